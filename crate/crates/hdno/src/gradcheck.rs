//! Randomized finite-difference checks of the network and of both training
//! losses on a tiny model. Every parameter element reached by the loss is
//! probed.

use diffcore::check::{check_gradients, GradCheckReport};
use diffcore::{Graph, Tensor, Var};
use rand::Rng;

use crate::error::Result;
use crate::eval::EncodedDialogue;
use crate::model::{HdnoModel, ModelConfig, SampleMode};
use crate::rng;
use crate::sim::{sample_goal, World};
use crate::trainer::{collect_rollouts, elbo_loss, surrogate_loss, BatchReturns, PolicyVersions, TurnExample};
use crate::vocab::{Vocab, RESERVED};

pub const TINY: ModelConfig = ModelConfig { vocab: 7, embed: 3, enc_hidden: 4, dec_hidden: 5, latent: 2, state_len: 3, db_len: 2 };

pub fn tiny_model(seed: u64) -> Result<HdnoModel> {
    HdnoModel::new(TINY, &mut rng::stream(seed, "gradcheck-init"))
}

fn tokens(rng: &mut impl Rng, lo: usize, len: usize) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(lo..TINY.vocab)).collect()
}

fn unit(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(0.0..1.0)).collect()
}

fn param_leaves(g: &Graph) -> Vec<Var> {
    let mut p: Vec<_> = g.param_vars().collect();
    p.sort_by_key(|(id, _)| id.index());
    p.into_iter().map(|(_, v)| v).collect()
}

fn example(rng: &mut impl Rng) -> TurnExample {
    let (ul, sl) = (rng.random_range(1..5), rng.random_range(0..4));
    TurnExample {
        user: tokens(rng, RESERVED.len(), ul),
        state: unit(rng, TINY.state_len),
        db: unit(rng, TINY.db_len),
        sys: tokens(rng, RESERVED.len(), sl),
    }
}

/// Encoder, attention, both cells and the decoder through one teacher-forced
/// turn, with the context vector also probed as a leaf.
pub fn network_trial(seed: u64) -> Result<GradCheckReport> {
    let model = tiny_model(seed)?;
    let mut r = rng::stream(seed, "gradcheck-network");
    let ex = example(&mut r);
    let mut g = Graph::new();
    let c = model.build_context(&mut g, &ex.user, &ex.state, &ex.db)?;
    let free = g.variable(Tensor::vector(unit(&mut r, TINY.context_len())));
    let mixed = g.mul(c, free)?;
    let eps: Vec<f64> = (0..TINY.latent).map(|_| r.random_range(-1.5..1.5)).collect();
    let act = model.act_with_noise(&mut g, mixed, SampleMode::Reparameterize, &eps)?;
    let nll = model.teacher_forced_nll(&mut g, mixed, act.z, &ex.sys, r.random_range(0.5..2.0))?;
    let out = g.add(nll, act.logprob)?;
    let mut leaves = param_leaves(&g);
    leaves.push(free);
    Ok(check_gradients(&mut g, out, &leaves)?)
}

/// The reparameterized ELBO over a small batch with dropout on.
pub fn elbo_trial(seed: u64) -> Result<GradCheckReport> {
    let model = tiny_model(seed)?;
    let mut r = rng::stream(seed, "gradcheck-elbo");
    let batch: Vec<TurnExample> = (0..3).map(|_| example(&mut r)).collect();
    let refs: Vec<&TurnExample> = batch.iter().collect();
    let beta = r.random_range(0.0..1.0);
    let mut g = Graph::new();
    let parts = elbo_loss(&model, &mut g, &refs, beta, SampleMode::Reparameterize, 0.3, &mut r)?;
    let leaves = param_leaves(&g);
    Ok(check_gradients(&mut g, parts.loss, &leaves)?)
}

/// The REINFORCE surrogate of both levels over sampled rollouts, with
/// returns drawn at random so every log-probability term carries weight.
pub fn surrogate_trial(seed: u64) -> Result<GradCheckReport> {
    let model = tiny_model(seed)?;
    let mut r = rng::stream(seed, "gradcheck-surrogate");
    let world = World::standard();
    let vocab = Vocab::from_tokens(["a", "b", "c"].map(String::from));
    let dialogues: Vec<EncodedDialogue> = (0..2)
        .map(|_| {
            let turns = r.random_range(1..3);
            Ok(EncodedDialogue {
                goal: sample_goal(&world, &mut r)?,
                contexts: (0..turns).map(|_| unit(&mut r, TINY.context_len())).collect(),
                references: Vec::new(),
                users: Vec::new(),
                acts: Vec::new(),
            })
        })
        .collect::<Result<_>>()?;
    let indexed: Vec<(usize, &EncodedDialogue)> = dialogues.iter().enumerate().collect();
    let versions = PolicyVersions::default();
    let mut batch = collect_rollouts(&model, None, &world, &vocab, &indexed, 1.0, 4, versions, &mut r)?;
    let returns = BatchReturns {
        low: batch
            .trajectories
            .iter()
            .map(|t| t.turn_lengths().iter().flat_map(|&n| unit(&mut r, n)).map(|x| 2.0 * x - 1.0).collect())
            .collect(),
        high: batch.trajectories.iter().map(|t| unit(&mut r, t.turns.len())).collect(),
    };
    let loss = surrogate_loss(&mut batch, &returns, true, true)?.expect("random returns are non-zero");
    let leaves = param_leaves(&batch.graph);
    Ok(check_gradients(&mut batch.graph, loss, &leaves)?)
}
