use diffcore::{Graph, Optimizer};
use hdno::decode::StepModel;
use hdno::eval::{policy_mean, EncodedDialogue};
use hdno::gradcheck::{tiny_model, TINY};
use hdno::model::{gaussian_kl, gaussian_logprob, GraphDecoder, HdnoModel, SampleMode};
use hdno::rng;
use hdno::sim::{sample_goal, World};
use hdno::trainer::{
    collect_rollouts, compute_returns, discounted_return, elbo_loss, policy_gradients, total_reward, zscore,
    BatchReturns, HrlConfig, HrlTrainer, PolicyVersions, RewardConfig, RolloutBatch, ScheduleConfig, TurnExample,
};
use hdno::disc::BigramTable;
use hdno::vocab::{Vocab, BOS_ID, EOS_ID};
use hdno::HdnoError;
use proptest::prelude::*;
use rand::Rng;

fn success_only() -> RewardConfig {
    RewardConfig { alpha: 0.0, gamma: 0.99, gamma_nll: 0.99, success2reward: true, disc2reward: false, nll_normalize: true }
}

fn vocab() -> Vocab {
    Vocab::from_tokens(["a", "b", "c"].map(String::from))
}

/// Dialogues over random contexts with `turns` system turns each.
fn dialogues(world: &World, seed: u64, n: usize, turns: usize) -> Vec<EncodedDialogue> {
    let mut r = rng::stream(seed, "dialogues");
    (0..n)
        .map(|_| EncodedDialogue {
            goal: sample_goal(world, &mut r).unwrap(),
            contexts: (0..turns).map(|_| (0..TINY.context_len()).map(|_| r.random_range(0.0..1.0)).collect()).collect(),
            references: Vec::new(),
            users: Vec::new(),
            acts: Vec::new(),
        })
        .collect()
}

fn indexed(ds: &[EncodedDialogue]) -> Vec<(usize, &EncodedDialogue)> {
    ds.iter().enumerate().collect()
}

fn first_token_probs(model: &HdnoModel, c: &[f64]) -> Vec<f64> {
    let mu = policy_mean(model, c).unwrap();
    let (mut dec, init) = GraphDecoder::new(model, c, &mu).unwrap();
    dec.log_probs(&init).unwrap().iter().map(|l| l.exp()).collect()
}

/// Two-armed choice on the first word: emitting token A wins, anything
/// else loses. The outcome is written into the rollouts and the returns
/// go through the regular reward pipeline.
#[test]
fn word_policy_learns_a_bandit() {
    const A: usize = 5;
    let world = World::standard();
    let mut model = tiny_model(1).unwrap();
    let ds = dialogues(&world, 1, 1, 1);
    let mut opt = Optimizer::sgd(0.5);
    let mut r = rng::stream(1, "bandit");
    let mut versions = PolicyVersions::default();
    let batch_of = vec![indexed(&ds)[0]; 16];
    for _ in 0..200 {
        let mut batch = collect_rollouts(&model, None, &world, &vocab(), &batch_of, 1.0, 1, versions, &mut r).unwrap();
        for t in &mut batch.trajectories {
            t.outcome.success = t.turns[0].tokens.first() == Some(&A);
        }
        let returns = compute_returns(&batch, &success_only()).unwrap();
        let (_, low) = policy_gradients(&model, &mut batch, &returns, versions, false, true).unwrap();
        drop(batch);
        opt.step(&mut model.store, &low.unwrap()).unwrap();
        versions.low += 1;
    }
    let p = first_token_probs(&model, &ds[0].contexts[0]);
    assert!(p[A] > 0.95, "P(A) = {}", p[A]);
}

/// The option policy is rewarded when the first latent coordinate is
/// positive.
#[test]
fn option_policy_learns_a_bandit() {
    let world = World::standard();
    let mut model = tiny_model(2).unwrap();
    let ds = dialogues(&world, 2, 1, 1);
    let mut opt = Optimizer::sgd(0.5);
    let mut r = rng::stream(2, "bandit");
    let mut versions = PolicyVersions::default();
    let batch_of = vec![indexed(&ds)[0]; 16];
    for _ in 0..300 {
        let mut batch = collect_rollouts(&model, None, &world, &vocab(), &batch_of, 1.0, 1, versions, &mut r).unwrap();
        for t in &mut batch.trajectories {
            t.outcome.success = t.turns[0].act.z_value[0] > 0.0;
        }
        let returns = compute_returns(&batch, &success_only()).unwrap();
        let (high, _) = policy_gradients(&model, &mut batch, &returns, versions, true, false).unwrap();
        drop(batch);
        opt.step(&mut model.store, &high.unwrap()).unwrap();
        versions.high += 1;
    }
    let c = &ds[0].contexts[0];
    let mut g = Graph::new();
    let cv = g.constant(diffcore::Tensor::vector(c.clone()));
    let act = model.act_with_noise(&mut g, cv, SampleMode::Mean, &[0.0; 2]).unwrap();
    let sd = (0.5 * act.logvar_value[0]).exp();
    let p = 0.5 * (1.0 + erf(act.mu_value[0] / (sd * std::f64::consts::SQRT_2)));
    assert!(p > 0.9, "P(z0 > 0) = {p}");
}

/// Abramowitz–Stegun 7.1.26, absolute error below 1.5e-7.
fn erf(x: f64) -> f64 {
    let t = 1.0 / (1.0 + 0.327_591_1 * x.abs());
    let poly = t * (0.254_829_592 + t * (-0.284_496_736 + t * (1.421_413_741 + t * (-1.453_152_027 + t * 1.061_405_429))));
    let y = 1.0 - poly * (-x * x).exp();
    y.copysign(x)
}

fn sample_batch(model: &HdnoModel, world: &World, ds: &[EncodedDialogue], seed: u64) -> RolloutBatch {
    let mut r = rng::stream(seed, "sample");
    collect_rollouts(model, None, world, &vocab(), &indexed(ds), 1.0, 4, PolicyVersions::default(), &mut r).unwrap()
}

#[test]
fn zero_returns_give_zero_gradients() {
    let world = World::standard();
    let model = tiny_model(3).unwrap();
    let ds = dialogues(&world, 3, 3, 2);
    let mut batch = sample_batch(&model, &world, &ds, 3);
    let returns = BatchReturns {
        low: batch.trajectories.iter().map(|t| vec![0.0; t.turn_lengths().iter().sum()]).collect(),
        high: batch.trajectories.iter().map(|t| vec![0.0; t.turns.len()]).collect(),
    };
    let (h, l) = policy_gradients(&model, &mut batch, &returns, PolicyVersions::default(), true, true).unwrap();
    assert!(h.unwrap().is_all_zero() && l.unwrap().is_all_zero());

    // identical outcomes z-score to zero as well
    let mut batch = sample_batch(&model, &world, &ds, 4);
    for t in &mut batch.trajectories {
        t.outcome.success = true;
    }
    let returns = compute_returns(&batch, &success_only()).unwrap();
    assert!(returns.low.iter().flatten().chain(returns.high.iter().flatten()).all(|&x| x == 0.0));
}

#[test]
fn stale_batches_are_rejected() {
    let world = World::standard();
    let model = tiny_model(4).unwrap();
    let ds = dialogues(&world, 4, 2, 1);
    let mut batch = sample_batch(&model, &world, &ds, 4);
    let returns = compute_returns(&batch, &success_only()).unwrap();
    let newer = PolicyVersions { high: 1, low: 0 };
    let err = policy_gradients(&model, &mut batch, &returns, newer, false, true).unwrap_err();
    assert!(matches!(err, HdnoError::StalePolicy { level: "high", .. }), "{err}");
}

#[test]
fn rollouts_never_touch_the_encoder() {
    let world = World::standard();
    let mut model = tiny_model(5).unwrap();
    let before = model.store.clone();
    let ds = dialogues(&world, 5, 4, 2);
    let batch = sample_batch(&model, &world, &ds, 5);
    let enc = model.encoder_params();
    assert!(batch.graph.param_vars().all(|(id, _)| !enc.contains(&id)));
    drop(batch);

    let cfg = HrlConfig {
        reward: disc_reward(),
        schedule: ScheduleConfig { high_freq: 1, low_freq: 1, synchron: true, high_lr: 0.1, low_lr: 0.1, grad_clip: 0.85 },
        epochs: 1,
        batch_size: 4,
        temperature: 1.0,
        max_dec_len: 4,
        seed: 5,
    };
    let mut trainer = HrlTrainer::new(cfg).unwrap();
    let mut r = rng::stream(5, "steps");
    let scorer = scorer(5);
    for _ in 0..5 {
        trainer.step(&mut model, Some(&scorer), &world, &vocab(), &indexed(&ds), &mut r).unwrap();
    }
    for id in enc {
        assert_eq!(model.store.get(id), before.get(id));
    }
    assert!(model.low_params().iter().any(|&id| model.store.get(id) != before.get(id)));
    assert!(model.high_params().iter().any(|&id| model.store.get(id) != before.get(id)));
}

/// Random goals make every rollout a failure, so the discriminator reward
/// is what moves the weights here.
fn scorer(seed: u64) -> BigramTable {
    let mut r = rng::stream(seed, "bigram");
    let seqs: Vec<Vec<usize>> = (0..40).map(|_| (0..r.random_range(0..5)).map(|_| r.random_range(3..7)).collect()).collect();
    BigramTable::fit(&seqs, TINY.vocab, 1.0, BOS_ID, Some(EOS_ID)).unwrap()
}

fn disc_reward() -> RewardConfig {
    RewardConfig { alpha: 0.3, disc2reward: true, ..success_only() }
}

fn trained(synchron: bool, seed: u64) -> (HdnoModel, Vec<(bool, bool)>) {
    let world = World::standard();
    let scorer = scorer(seed);
    let mut model = tiny_model(seed).unwrap();
    let ds = dialogues(&world, seed, 6, 2);
    let cfg = HrlConfig {
        reward: disc_reward(),
        schedule: ScheduleConfig { high_freq: 2, low_freq: 1, synchron, high_lr: 0.1, low_lr: 0.1, grad_clip: 0.85 },
        epochs: 1,
        batch_size: 6,
        temperature: 1.0,
        max_dec_len: 4,
        seed,
    };
    let mut trainer = HrlTrainer::new(cfg).unwrap();
    let mut r = rng::stream(seed, "steps");
    let levels = (0..6)
        .map(|_| {
            trainer.step(&mut model, Some(&scorer), &world, &vocab(), &indexed(&ds), &mut r).unwrap()
        })
        .collect();
    (model, levels)
}

#[test]
fn schedules_pick_the_levels_they_promise() {
    let (_, asy) = trained(false, 6);
    assert_eq!(asy, vec![(true, false), (true, false), (false, true), (true, false), (true, false), (false, true)]);
    let (_, syn) = trained(true, 6);
    assert_eq!(syn, vec![(true, true), (false, true), (true, true), (false, true), (true, true), (false, true)]);
}

#[test]
fn training_is_deterministic() {
    let (a, _) = trained(false, 7);
    let (b, _) = trained(false, 7);
    let fresh = tiny_model(7).unwrap();
    assert!(a.store.ids().any(|id| a.store.get(id) != fresh.store.get(id)));
    for id in a.store.ids() {
        assert_eq!(a.store.get(id).data(), b.store.get(id).data());
    }
}

#[test]
fn elbo_without_kl_is_the_reconstruction_nll() {
    let model = tiny_model(8).unwrap();
    let mut r = rng::stream(8, "elbo");
    let batch: Vec<TurnExample> = (0..4)
        .map(|_| TurnExample {
            user: vec![4, 5, 6],
            state: vec![1.0, 0.0, 0.5],
            db: vec![0.0, 1.0],
            sys: (0..r.random_range(0..5)).map(|_| r.random_range(3..7)).collect(),
        })
        .collect();
    let refs: Vec<&TurnExample> = batch.iter().collect();
    let mut g = Graph::new();
    let parts = elbo_loss(&model, &mut g, &refs, 0.0, SampleMode::Mean, 0.0, &mut r).unwrap();
    assert_eq!(g.scalar(parts.loss), parts.nll / 4.0);
    assert!(elbo_loss(&model, &mut g, &[], 0.0, SampleMode::Mean, 0.0, &mut r).is_err());
}

#[test]
fn act_log_probability_recomputes() {
    let model = tiny_model(9).unwrap();
    let mut r = rng::stream(9, "acts");
    for _ in 0..100 {
        let mut g = Graph::new();
        let c = model.build_context(&mut g, &[4, 6], &[0.2, 0.4, 0.1], &[1.0, 0.0]).unwrap();
        let act = model.sample_act(&mut g, c, SampleMode::Score, &mut r).unwrap();
        let lp = gaussian_logprob(&act.z_value, &act.mu_value, &act.logvar_value);
        assert!((lp - act.logprob_value).abs() < 1e-9);
    }
}

fn vecs(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, len)
}

proptest! {
    #[test]
    fn returns_satisfy_the_bellman_identity(r in prop::collection::vec(-5.0f64..5.0, 1..30), gamma in 0.0f64..=1.0) {
        let g = discounted_return(&r, gamma);
        prop_assert!((g[r.len() - 1] - r[r.len() - 1]).abs() < 1e-12);
        for t in 0..r.len() - 1 {
            prop_assert!((g[t] - (r[t] + gamma * g[t + 1])).abs() < 1e-9);
        }
    }

    #[test]
    fn total_reward_is_linear_in_alpha((s, d) in (1usize..20).prop_flat_map(|n| (vecs(n), vecs(n))), a in 0.0f64..=1.0) {
        let cfg = |alpha| RewardConfig { alpha, gamma: 1.0, gamma_nll: 1.0, success2reward: true, disc2reward: true, nll_normalize: true };
        let at = |alpha| total_reward(&s, &d, &cfg(alpha)).unwrap();
        let (r0, r1, ra) = (at(0.0), at(1.0), at(a));
        for i in 0..s.len() {
            prop_assert!((ra[i] - ((1.0 - a) * r0[i] + a * r1[i])).abs() < 1e-9);
        }
        prop_assert_eq!(r0, zscore(&s));
    }

    #[test]
    fn async_schedules_never_update_both(hf in 1usize..5, lf in 1usize..5, tick in 0u64..1000) {
        let s = ScheduleConfig { high_freq: hf, low_freq: lf, synchron: false, high_lr: 0.1, low_lr: 0.1, grad_clip: 0.0 };
        let (h, l) = s.levels(tick);
        prop_assert!(h != l);
    }

    #[test]
    fn kl_is_nonnegative(mu in vecs(4), lv in vecs(4)) {
        let kl = gaussian_kl(&mu, &lv);
        prop_assert!(kl >= 0.0);
        prop_assert_eq!(kl == 0.0, mu.iter().chain(&lv).all(|&x| x == 0.0));
    }
}

#[test]
fn sampled_acts_have_the_policy_moments() {
    let model = tiny_model(10).unwrap();
    let mut r = rng::stream(10, "moments");
    let n = 20_000;
    let mut g = Graph::new();
    let c = model.build_context(&mut g, &[5, 4], &[0.0, 1.0, 0.0], &[0.3, 0.7]).unwrap();
    let first = model.sample_act(&mut g, c, SampleMode::Score, &mut r).unwrap();
    let (mu, var): (Vec<f64>, Vec<f64>) = (first.mu_value.clone(), first.logvar_value.iter().map(|l| l.exp()).collect());
    let draws: Vec<Vec<f64>> = (0..n).map(|_| model.sample_act(&mut g, c, SampleMode::Score, &mut r).unwrap().z_value).collect();
    for k in 0..TINY.latent {
        let m = draws.iter().map(|z| z[k]).sum::<f64>() / n as f64;
        let v = draws.iter().map(|z| (z[k] - m).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        // standard errors of the sample mean and (Gaussian) sample variance
        let (se_m, se_v) = ((var[k] / n as f64).sqrt(), var[k] * (2.0 / (n as f64 - 1.0)).sqrt());
        assert!((m - mu[k]).abs() < 4.0 * se_m, "mean {m} vs {}", mu[k]);
        assert!((v - var[k]).abs() < 4.0 * se_v, "var {v} vs {}", var[k]);
    }
}
