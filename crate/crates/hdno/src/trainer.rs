//! Variational pretraining and hierarchical REINFORCE fine-tuning.

use diffcore::{clip_grad_norm, Graph, Optimizer, ParamGrads, ParamId, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::disc::{MarkovScorer, NeuralDisc};
use crate::error::{invalid, HdnoError, Result};
use crate::eval::{clip_tokens, evaluate_model, judge, Decoding, EncodedDialogue, Outcome};
use crate::model::{gaussian_kl_node, HdnoModel, LatentAct, SampleMode};
use crate::nets::dropout;
use crate::rng;
use crate::sim::{Dialogue, World};
use crate::vocab::{Vocab, BOS_ID, EOS_ID};

/// One system turn for teacher-forced training.
#[derive(Debug, Clone, PartialEq)]
pub struct TurnExample {
    pub user: Vec<usize>,
    pub state: Vec<f64>,
    pub db: Vec<f64>,
    pub sys: Vec<usize>,
}

pub fn turn_examples(vocab: &Vocab, dialogues: &[Dialogue], max_utt_len: usize, max_dec_len: usize) -> Vec<TurnExample> {
    dialogues
        .iter()
        .flat_map(|d| d.turns.iter())
        .map(|t| TurnExample {
            user: vocab.encode(clip_tokens(&t.user, max_utt_len)),
            state: t.state.clone(),
            db: t.db.clone(),
            sys: vocab.encode(clip_tokens(&t.sys, max_dec_len)),
        })
        .collect()
}

/// Per-batch ELBO pieces.
#[derive(Debug, Clone, Copy)]
pub struct ElboParts {
    pub loss: Var,
    pub nll: f64,
    pub kl: f64,
    pub tokens: usize,
}

/// Mean over turns of −Σ_t ln π(w_t | z, c̃_t) + β·KL[φ(z|c) ‖ N(0, I)],
/// with z drawn per `mode` and oracle tokens fed back (teacher forcing).
pub fn elbo_loss(
    model: &HdnoModel,
    g: &mut Graph,
    batch: &[&TurnExample],
    beta: f64,
    mode: SampleMode,
    dropout_rate: f64,
    rng: &mut impl Rng,
) -> Result<ElboParts> {
    if batch.is_empty() {
        return invalid("empty batch");
    }
    let mut terms = Vec::with_capacity(batch.len());
    let (mut nll, mut kl, mut tokens) = (0.0, 0.0, 0);
    for ex in batch {
        let c = model.build_context(g, &ex.user, &ex.state, &ex.db)?;
        let c = dropout(g, c, dropout_rate, rng)?;
        let act = model.sample_act(g, c, mode, rng)?;
        let rec = model.teacher_forced_nll(g, c, act.z, &ex.sys, 1.0)?;
        nll += g.scalar(rec);
        tokens += ex.sys.len() + 1;
        let term = if beta != 0.0 {
            let k = gaussian_kl_node(g, act.mu, act.logvar)?;
            kl += g.scalar(k);
            let bk = g.scale(k, beta)?;
            g.add(rec, bk)?
        } else {
            rec
        };
        terms.push(term);
    }
    let total = g.add_all(&terms)?;
    let loss = g.scale(total, 1.0 / batch.len() as f64)?;
    Ok(ElboParts { loss, nll, kl, tokens })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub grad_clip: f64,
    pub beta: f64,
    pub dropout: f64,
    pub eta: f64,
    pub max_dec_len: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_nll_per_token: f64,
    pub disc_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutcome {
    pub curve: Vec<LossRow>,
    pub best_epoch: usize,
}

/// Validation loss with z = μ: (mean loss over turns, NLL per token).
pub fn validation_loss(model: &HdnoModel, data: &[TurnExample], beta: f64) -> Result<(f64, f64)> {
    let mut rng = rng::stream(0, "unused");
    let (mut loss, mut nll, mut tokens) = (0.0, 0.0, 0usize);
    for chunk in data.chunks(64) {
        let refs: Vec<&TurnExample> = chunk.iter().collect();
        let mut g = Graph::new();
        let parts = elbo_loss(model, &mut g, &refs, beta, SampleMode::Mean, 0.0, &mut rng)?;
        loss += g.scalar(parts.loss) * chunk.len() as f64;
        nll += parts.nll;
        tokens += parts.tokens;
    }
    Ok((loss / data.len() as f64, nll / tokens as f64))
}

/// Trains the model on the ELBO with Adam and, alongside, the discriminator
/// on the oracle turns of each batch plus η-weighted greedy generations.
/// Epoch 0 of the curve is the untrained model. The model is left at the
/// epoch with the lowest validation loss; the discriminator at its last
/// step.
pub fn pretrain(
    model: &mut HdnoModel,
    mut disc: Option<&mut NeuralDisc>,
    train: &[TurnExample],
    valid: &[TurnExample],
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    if train.is_empty() || valid.is_empty() {
        return invalid("pretraining needs non-empty train and validation sets");
    }
    if cfg.batch_size == 0 {
        return invalid("batch size must be positive");
    }
    model.set_encoder_frozen(false);
    let mut rng = rng::stream(cfg.seed, "pretrain");
    let mut opt = Optimizer::adam(cfg.lr);
    let mut disc_opt = Optimizer::adam(cfg.lr);
    let (val_loss, val_nll) = validation_loss(model, valid, cfg.beta)?;
    let mut curve = vec![LossRow { epoch: 0, train_loss: f64::NAN, val_loss, val_nll_per_token: val_nll, disc_loss: f64::NAN }];
    let mut best = (0, val_loss, model.store.clone());
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut train_loss, mut disc_loss) = (0.0, 0.0);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&TurnExample> = idx.iter().map(|&i| &train[i]).collect();
            let mut g = Graph::new();
            let parts = elbo_loss(model, &mut g, &batch, cfg.beta, SampleMode::Reparameterize, cfg.dropout, &mut rng)?;
            train_loss += g.scalar(parts.loss) * batch.len() as f64;
            let mut grads = g.backward(parts.loss)?.param_grads(model.store.len());
            drop(g);

            if let Some(disc) = disc.as_deref_mut() {
                let oracle: Vec<Vec<usize>> = batch.iter().map(|e| e.sys.clone()).collect();
                let generated = if cfg.eta > 0.0 {
                    batch
                        .iter()
                        .map(|e| {
                            let c = model.context_values(&e.user, &e.state, &e.db)?;
                            let mu = crate::eval::policy_mean(model, &c)?;
                            model.decode_greedy(&c, &mu, cfg.max_dec_len)
                        })
                        .collect::<Result<Vec<_>>>()?
                } else {
                    Vec::new()
                };
                disc_loss += disc.train_step(&oracle, &generated, cfg.eta, BOS_ID, Some(EOS_ID), &mut disc_opt, cfg.grad_clip)?;
            }

            clip_grad_norm(&mut grads, cfg.grad_clip);
            opt.step(&mut model.store, &grads)?;
        }
        let (val_loss, val_nll) = validation_loss(model, valid, cfg.beta)?;
        log::info!("pretrain epoch {epoch}: train {:.4} val {val_loss:.4} nll/token {val_nll:.4}", train_loss / train.len() as f64);
        curve.push(LossRow {
            epoch,
            train_loss: train_loss / train.len() as f64,
            val_loss,
            val_nll_per_token: val_nll,
            disc_loss,
        });
        if val_loss < best.1 {
            best = (epoch, val_loss, model.store.clone());
        }
    }
    model.store = best.2;
    Ok(PretrainOutcome { curve, best_epoch: best.0 })
}

/// G_t = Σ_{i ≥ t} γ^{i−t} r_i.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for i in (0..rewards.len()).rev() {
        acc = rewards[i] + gamma * acc;
        out[i] = acc;
    }
    out
}

pub const ZSCORE_EPS: f64 = 1e-8;

/// (v − mean) / max(population std, ε).
pub fn zscore(values: &[f64]) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(ZSCORE_EPS);
    values.iter().map(|v| (v - mean) / sd).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub gamma_nll: f64,
    pub success2reward: bool,
    pub disc2reward: bool,
    pub nll_normalize: bool,
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return invalid(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        for (name, g) in [("gamma", self.gamma), ("gamma_nll", self.gamma_nll)] {
            if !(0.0..=1.0).contains(&g) {
                return invalid(format!("{name} must lie in [0, 1], got {g}"));
            }
        }
        Ok(())
    }
}

/// (1 − α)·r^succ + α·r^disc per step, each stream z-scored first when
/// `nll_normalize` is set. Disabled streams contribute zero.
pub fn total_reward(succ: &[f64], disc: &[f64], cfg: &RewardConfig) -> Result<Vec<f64>> {
    if succ.len() != disc.len() {
        return invalid(format!("reward streams differ in length: {} vs {}", succ.len(), disc.len()));
    }
    let (s, d) = if cfg.nll_normalize { (zscore(succ), zscore(disc)) } else { (succ.to_vec(), disc.to_vec()) };
    Ok(s.iter()
        .zip(&d)
        .map(|(s, d)| {
            let s = if cfg.success2reward { *s } else { 0.0 };
            let d = if cfg.disc2reward { *d } else { 0.0 };
            (1.0 - cfg.alpha) * s + cfg.alpha * d
        })
        .collect())
}

/// Success stream per turn: `outcome` at the last emitted word of the last
/// turn, zero elsewhere.
pub fn assign_success_reward(turn_lengths: &[usize], outcome: f64) -> Result<Vec<Vec<f64>>> {
    if turn_lengths.is_empty() || turn_lengths[turn_lengths.len() - 1] == 0 {
        return invalid("success is only assigned to a finished dialogue");
    }
    let mut out: Vec<Vec<f64>> = turn_lengths.iter().map(|&n| vec![0.0; n]).collect();
    let last = out.last_mut().expect("non-empty");
    let n = last.len();
    last[n - 1] = outcome;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PolicyVersions {
    pub high: u64,
    pub low: u64,
}

/// One sampled system turn: the option and the words it emitted.
#[derive(Debug, Clone)]
pub struct TurnRollout {
    pub act: LatentAct,
    pub tokens: Vec<usize>,
    /// ln π of every emitted action, `<eos>` included when it was emitted.
    pub logps: Vec<Var>,
    pub disc_rewards: Vec<f64>,
}

/// One dialogue rollout. The event-time sequence M is the index of the
/// first word of each turn in the flattened word sequence.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub dialogue: usize,
    pub turns: Vec<TurnRollout>,
    pub outcome: Outcome,
}

impl Trajectory {
    pub fn event_times(&self) -> Vec<usize> {
        let mut t = 0;
        self.turns
            .iter()
            .map(|turn| {
                let start = t;
                t += turn.logps.len();
                start
            })
            .collect()
    }

    pub fn turn_lengths(&self) -> Vec<usize> {
        self.turns.iter().map(|t| t.logps.len()).collect()
    }
}

/// Rollouts sharing one graph, stamped with the policy versions that
/// produced them.
pub struct RolloutBatch {
    pub graph: Graph,
    pub trajectories: Vec<Trajectory>,
    pub versions: PolicyVersions,
}

#[allow(clippy::too_many_arguments)]
pub fn collect_rollouts(
    model: &HdnoModel,
    scorer: Option<&dyn MarkovScorer>,
    world: &World,
    vocab: &Vocab,
    dialogues: &[(usize, &EncodedDialogue)],
    temperature: f64,
    max_len: usize,
    versions: PolicyVersions,
    rng: &mut impl Rng,
) -> Result<RolloutBatch> {
    let mut g = Graph::new();
    let mut trajectories = Vec::with_capacity(dialogues.len());
    for &(index, d) in dialogues {
        let mut turns = Vec::with_capacity(d.contexts.len());
        let mut surface = Vec::with_capacity(d.contexts.len());
        for c in &d.contexts {
            let cv = g.constant(Tensor::vector(c.clone()));
            let act = model.sample_act(&mut g, cv, SampleMode::Score, rng)?;
            let (tokens, logps) = model.sample_utterance(&mut g, cv, act.z, temperature, max_len, rng)?;
            let disc_rewards = match scorer {
                Some(s) => {
                    let mut prev = BOS_ID;
                    let mut r = Vec::with_capacity(logps.len());
                    for &w in tokens.iter().chain((logps.len() > tokens.len()).then_some(&EOS_ID)) {
                        r.push(s.reward(prev, w)?);
                        prev = w;
                    }
                    r
                }
                None => vec![0.0; logps.len()],
            };
            surface.push(vocab.decode(&tokens));
            turns.push(TurnRollout { act, tokens, logps, disc_rewards });
        }
        let outcome = judge(world, &d.goal, &surface)?;
        trajectories.push(Trajectory { dialogue: index, turns, outcome });
    }
    Ok(RolloutBatch { graph: g, trajectories, versions })
}

/// Per-word returns for the word policy and per-turn option returns.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchReturns {
    pub low: Vec<Vec<f64>>,
    pub high: Vec<Vec<f64>>,
}

/// Builds the reward streams of a batch and their returns.
///
/// With `nll_normalize`, the terminal success outcomes are z-scored across
/// the batch's dialogues and the discriminator rewards across all of the
/// batch's words. A word's return is
/// (1 − α)·Σ γ^{i−t} r^succ_i + α·Σ γ_nll^{i−t} r^disc_i over the rest of
/// the dialogue; an option's return is the success part from its first word
/// plus the discriminator part over its own turn only.
pub fn compute_returns(batch: &RolloutBatch, cfg: &RewardConfig) -> Result<BatchReturns> {
    cfg.validate()?;
    let trajs = &batch.trajectories;
    let mut succ: Vec<f64> = trajs
        .iter()
        .map(|t| if cfg.success2reward && t.outcome.success { 1.0 } else { 0.0 })
        .collect();
    let mut disc: Vec<Vec<f64>> = trajs
        .iter()
        .map(|t| {
            t.turns
                .iter()
                .flat_map(|turn| turn.disc_rewards.iter())
                .map(|&r| if cfg.disc2reward { r } else { 0.0 })
                .collect()
        })
        .collect();
    if cfg.nll_normalize {
        succ = zscore(&succ);
        let flat: Vec<f64> = disc.iter().flatten().copied().collect();
        let z = zscore(&flat);
        let mut k = 0;
        for d in &mut disc {
            for r in d.iter_mut() {
                *r = z[k];
                k += 1;
            }
        }
    }
    let mut low = Vec::with_capacity(trajs.len());
    let mut high = Vec::with_capacity(trajs.len());
    for (i, t) in trajs.iter().enumerate() {
        let lengths = t.turn_lengths();
        let s_stream: Vec<f64> = assign_success_reward(&lengths, succ[i])?.concat();
        let g_succ = discounted_return(&s_stream, cfg.gamma);
        let g_disc = discounted_return(&disc[i], cfg.gamma_nll);
        low.push(
            g_succ
                .iter()
                .zip(&g_disc)
                .map(|(s, d)| (1.0 - cfg.alpha) * s + cfg.alpha * d)
                .collect(),
        );
        let mut turn_returns = Vec::with_capacity(lengths.len());
        for (start, &len) in t.event_times().iter().zip(&lengths) {
            let within = discounted_return(&disc[i][*start..start + len], cfg.gamma_nll);
            turn_returns.push((1.0 - cfg.alpha) * g_succ[*start] + cfg.alpha * within[0]);
        }
        high.push(turn_returns);
    }
    Ok(BatchReturns { low, high })
}

fn check_fresh(batch: &RolloutBatch, current: PolicyVersions) -> Result<()> {
    if batch.versions.high != current.high {
        return Err(HdnoError::StalePolicy { level: "high", collected: batch.versions.high, current: current.high });
    }
    if batch.versions.low != current.low {
        return Err(HdnoError::StalePolicy { level: "low", collected: batch.versions.low, current: current.low });
    }
    Ok(())
}

/// The REINFORCE surrogate −(1/B)·Σ G·ln π (word level, with `low`) plus
/// −(1/B)·Σ g·ln φ (option level, with `high`) as a node of the batch graph.
/// `None` when every selected return is zero.
pub fn surrogate_loss(batch: &mut RolloutBatch, returns: &BatchReturns, high: bool, low: bool) -> Result<Option<Var>> {
    let scale = 1.0 / batch.trajectories.len().max(1) as f64;
    let g = &mut batch.graph;
    let mut terms = Vec::new();
    for (i, t) in batch.trajectories.iter().enumerate() {
        let mut w = 0;
        for (k, turn) in t.turns.iter().enumerate() {
            if high && returns.high[i][k] != 0.0 {
                terms.push(g.scale(turn.act.logprob, -scale * returns.high[i][k])?);
            }
            for &lp in &turn.logps {
                if low && returns.low[i][w] != 0.0 {
                    terms.push(g.scale(lp, -scale * returns.low[i][w])?);
                }
                w += 1;
            }
        }
    }
    if terms.is_empty() {
        return Ok(None);
    }
    Ok(Some(g.add_all(&terms)?))
}

/// REINFORCE gradients of −(1/B)·Σ G·ln π (word level) and/or
/// −(1/B)·Σ g·ln φ (option level) from one batch. The two losses touch
/// disjoint parameters (z enters the word policy as a constant), so one
/// backward pass serves both.
pub fn policy_gradients(
    model: &HdnoModel,
    batch: &mut RolloutBatch,
    returns: &BatchReturns,
    current: PolicyVersions,
    high: bool,
    low: bool,
) -> Result<(Option<ParamGrads>, Option<ParamGrads>)> {
    check_fresh(batch, current)?;
    let mut all = ParamGrads::zeros_like(&model.store);
    if let Some(loss) = surrogate_loss(batch, returns, high, low)? {
        all = batch.graph.backward(loss)?.param_grads(model.store.len());
    }
    let split = |ids: Vec<ParamId>| {
        let mut p = all.clone();
        p.retain(&ids);
        for id in ids {
            if p.get(id).is_none() {
                p.set(id, vec![0.0; model.store.get(id).len()]);
            }
        }
        p
    };
    Ok((high.then(|| split(model.high_params())), low.then(|| split(model.low_params()))))
}

pub fn reinforce_step_low(
    model: &HdnoModel,
    batch: &mut RolloutBatch,
    returns: &BatchReturns,
    current: PolicyVersions,
) -> Result<ParamGrads> {
    Ok(policy_gradients(model, batch, returns, current, false, true)?.1.expect("requested"))
}

pub fn reinforce_step_high(
    model: &HdnoModel,
    batch: &mut RolloutBatch,
    returns: &BatchReturns,
    current: PolicyVersions,
) -> Result<ParamGrads> {
    Ok(policy_gradients(model, batch, returns, current, true, false)?.0.expect("requested"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub high_freq: usize,
    pub low_freq: usize,
    pub synchron: bool,
    pub high_lr: f64,
    pub low_lr: f64,
    pub grad_clip: f64,
}

impl ScheduleConfig {
    /// Which levels update on batch `tick` (0-based). Asynchronous: a cycle
    /// of `high_freq` option-policy updates then `low_freq` word-policy
    /// updates, one level per batch. Synchronous: the option policy updates
    /// every `high_freq` batches and the word policy every `low_freq`
    /// batches, both from the same batch when they coincide.
    pub fn levels(&self, tick: u64) -> (bool, bool) {
        let (hf, lf) = (self.high_freq.max(1) as u64, self.low_freq.max(1) as u64);
        if self.synchron {
            (tick % hf == 0, tick % lf == 0)
        } else {
            let high = tick % (hf + lf) < hf;
            (high, !high)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HrlConfig {
    pub reward: RewardConfig,
    pub schedule: ScheduleConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub temperature: f64,
    pub max_dec_len: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub inform: f64,
    pub success: f64,
    pub bleu: f64,
    pub total: f64,
    pub mean_reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HrlOutcome {
    pub trace: Vec<TraceRow>,
    pub best_epoch: usize,
    /// (high updated, low updated) per batch.
    pub updates: Vec<(bool, bool)>,
    pub dialogues_seen: usize,
}

/// Owns the two optimizers and the policy version counters.
pub struct HrlTrainer {
    pub cfg: HrlConfig,
    pub versions: PolicyVersions,
    high_opt: Optimizer,
    low_opt: Optimizer,
    tick: u64,
}

impl HrlTrainer {
    pub fn new(cfg: HrlConfig) -> Result<Self> {
        cfg.reward.validate()?;
        if cfg.batch_size == 0 || cfg.schedule.high_freq == 0 || cfg.schedule.low_freq == 0 {
            return invalid("batch size and update frequencies must be positive");
        }
        Ok(Self {
            cfg,
            versions: PolicyVersions::default(),
            high_opt: Optimizer::sgd(cfg.schedule.high_lr),
            low_opt: Optimizer::sgd(cfg.schedule.low_lr),
            tick: 0,
        })
    }

    fn apply(&mut self, model: &mut HdnoModel, grads: Option<ParamGrads>, high: bool) -> Result<()> {
        if let Some(mut g) = grads {
            if self.cfg.schedule.grad_clip > 0.0 {
                clip_grad_norm(&mut g, self.cfg.schedule.grad_clip);
            }
            if high {
                self.high_opt.step(&mut model.store, &g)?;
                self.versions.high += 1;
            } else {
                self.low_opt.step(&mut model.store, &g)?;
                self.versions.low += 1;
            }
        }
        Ok(())
    }

    /// Collects one batch with the current policies and applies the
    /// scheduled update(s). Returns which levels changed.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &mut self,
        model: &mut HdnoModel,
        scorer: Option<&dyn MarkovScorer>,
        world: &World,
        vocab: &Vocab,
        dialogues: &[(usize, &EncodedDialogue)],
        rng: &mut impl Rng,
    ) -> Result<(bool, bool)> {
        let mut batch = collect_rollouts(
            model,
            scorer,
            world,
            vocab,
            dialogues,
            self.cfg.temperature,
            self.cfg.max_dec_len,
            self.versions,
            rng,
        )?;
        let returns = compute_returns(&batch, &self.cfg.reward)?;
        let (high, low) = self.cfg.schedule.levels(self.tick);
        self.tick += 1;
        let (gh, gl) = policy_gradients(model, &mut batch, &returns, self.versions, high, low)?;
        drop(batch);
        self.apply(model, gh, true)?;
        self.apply(model, gl, false)?;
        Ok((high, low))
    }
}

/// Validation reward: (1 − α)·success fraction + α·mean per-dialogue
/// Σ ln D of the generated words, with disabled terms dropped.
pub fn validation_reward(report: &crate::eval::EvalReport, cfg: &RewardConfig) -> f64 {
    let succ = if cfg.success2reward { report.success / 100.0 } else { 0.0 };
    let disc = if cfg.disc2reward { report.mean_disc_score().unwrap_or(0.0) } else { 0.0 };
    (1.0 - cfg.alpha) * succ + cfg.alpha * disc
}

/// Fine-tunes the option and word policies with the encoder frozen.
/// Validation (greedy, z = μ) runs before training (epoch 0) and after each
/// epoch; the model is left at the fine-tuned epoch with the highest
/// validation reward.
#[allow(clippy::too_many_arguments)]
pub fn run_hrl(
    model: &mut HdnoModel,
    scorer: Option<&dyn MarkovScorer>,
    world: &World,
    vocab: &Vocab,
    train: &[EncodedDialogue],
    valid: &[EncodedDialogue],
    cfg: &HrlConfig,
) -> Result<HrlOutcome> {
    if train.is_empty() || valid.is_empty() {
        return invalid("HRL needs non-empty train and validation sets");
    }
    model.set_encoder_frozen(true);
    let mut trainer = HrlTrainer::new(*cfg)?;
    let mut rng = rng::stream(cfg.seed, "rollout");
    let validate = |model: &HdnoModel, epoch: usize| -> Result<TraceRow> {
        let r = evaluate_model(model, vocab, world, valid, Decoding::Greedy, cfg.max_dec_len, scorer)?;
        Ok(TraceRow {
            epoch,
            inform: r.inform,
            success: r.success,
            bleu: r.bleu,
            total: r.total,
            mean_reward: validation_reward(&r, &cfg.reward),
        })
    };
    let mut trace = vec![validate(model, 0)?];
    let mut best: Option<(usize, f64, diffcore::ParamStore)> = None;
    let mut updates = Vec::new();
    let mut seen = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<(usize, &EncodedDialogue)> = idx.iter().map(|&i| (i, &train[i])).collect();
            updates.push(trainer.step(model, scorer, world, vocab, &batch, &mut rng)?);
            seen += batch.len();
        }
        let row = validate(model, epoch)?;
        log::info!(
            "hrl epoch {epoch}: inform {:.1} success {:.1} bleu {:.2} reward {:.4}",
            row.inform,
            row.success,
            row.bleu,
            row.mean_reward
        );
        if best.as_ref().is_none_or(|b| row.mean_reward > b.1) {
            best = Some((epoch, row.mean_reward, model.store.clone()));
        }
        trace.push(row);
    }
    let best_epoch = match best {
        Some((epoch, _, store)) => {
            model.store = store;
            epoch
        }
        None => 0,
    };
    Ok(HrlOutcome { trace, best_epoch, updates, dialogues_seen: seen })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn return_examples() {
        assert_eq!(discounted_return(&[1.0, 2.0, 3.0], 0.0), vec![1.0, 2.0, 3.0]);
        assert_eq!(discounted_return(&[1.0, 1.0, 1.0], 0.5)[0], 1.75);
        assert_eq!(discounted_return(&[1.0, 2.0, 3.0], 1.0)[0], 6.0);
    }

    #[test]
    fn zscore_examples() {
        assert_eq!(zscore(&[4.0, 4.0, 4.0]), vec![0.0; 3]);
        let z = zscore(&[1.0, 2.0, 3.0]);
        assert!((z[0] + 1.224_744_871_391_589).abs() < 1e-12);
        assert_eq!(z[1], 0.0);
    }

    #[test]
    fn success_assignment() {
        let s = assign_success_reward(&[3, 2], 1.0).unwrap();
        assert_eq!(s, vec![vec![0.0; 3], vec![0.0, 1.0]]);
        assert_eq!(assign_success_reward(&[3, 2], 0.0).unwrap().concat().iter().sum::<f64>(), 0.0);
        assert!(assign_success_reward(&[], 1.0).is_err());
    }

    #[test]
    fn async_schedule_alternates() {
        let s = ScheduleConfig { high_freq: 1, low_freq: 1, synchron: false, high_lr: 0.1, low_lr: 0.1, grad_clip: 1.0 };
        let seq: Vec<_> = (0..4).map(|t| s.levels(t)).collect();
        assert_eq!(seq, vec![(true, false), (false, true), (true, false), (false, true)]);
        let sync = ScheduleConfig { synchron: true, ..s };
        assert!((0..4).all(|t| sync.levels(t) == (true, true)));
        let uneven = ScheduleConfig { high_freq: 2, low_freq: 3, ..s };
        let seq: Vec<_> = (0..5).map(|t| uneven.levels(t).0).collect();
        assert_eq!(seq, vec![true, true, false, false, false]);
    }
}
