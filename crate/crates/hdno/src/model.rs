//! The hierarchical dialogue model: a Gaussian policy over latent acts
//! φ(z | c) and an LSTM word generator π(w | z, c̃) whose initial state is a
//! projection of `[c; z]`. Every context is a valid initiation state for
//! every latent act, and emitting `<eos>` ends the act.

use diffcore::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::decode::{self, Hypothesis, StepModel};
use crate::error::{invalid, Result};
use crate::nets::{self, Embedding, Encoder, GaussianHead, Linear, LstmCell};
use crate::vocab::{BOS_ID, EOS_ID};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub embed: usize,
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    pub latent: usize,
    pub state_len: usize,
    pub db_len: usize,
}

impl ModelConfig {
    pub fn context_len(&self) -> usize {
        2 * self.enc_hidden + self.state_len + self.db_len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// z = μ + exp(logvar / 2) ⊙ ε; gradients flow through z.
    Reparameterize,
    /// z is drawn and entered as a constant; only the log-density carries
    /// gradient (score-function estimator).
    Score,
    /// z = μ (greedy act).
    Mean,
}

/// A latent act with its Gaussian parameters, as graph nodes and values.
#[derive(Debug, Clone)]
pub struct LatentAct {
    pub z: Var,
    pub mu: Var,
    pub logvar: Var,
    pub logprob: Var,
    pub z_value: Vec<f64>,
    pub mu_value: Vec<f64>,
    pub logvar_value: Vec<f64>,
    pub logprob_value: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderState {
    pub h: Var,
    pub c: Var,
}

/// Diagonal-Gaussian log-density −½ Σ (ln 2π + logvar + (z − μ)² e^{−logvar}).
pub fn gaussian_logprob(z: &[f64], mu: &[f64], logvar: &[f64]) -> f64 {
    z.iter()
        .zip(mu)
        .zip(logvar)
        .map(|((z, m), lv)| -0.5 * (LN_2PI + lv + (z - m).powi(2) * (-lv).exp()))
        .sum()
}

/// KL[N(μ, e^{logvar}) ‖ N(0, I)] = ½ Σ (μ² + e^{logvar} − logvar − 1).
pub fn gaussian_kl(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(m, lv)| m * m + lv.exp() - lv - 1.0)
        .sum::<f64>()
}

pub fn gaussian_logprob_node(g: &mut Graph, z: Var, mu: Var, logvar: Var) -> Result<Var> {
    let k = g.value(mu).len();
    let d = g.sub(z, mu)?;
    let sq = g.square(d)?;
    let neg_lv = g.scale(logvar, -1.0)?;
    let prec = g.exp(neg_lv)?;
    let quad = g.mul(sq, prec)?;
    let inner = g.add(quad, logvar)?;
    let s = g.sum(inner)?;
    let c = g.constant_scalar(k as f64 * LN_2PI);
    let total = g.add(s, c)?;
    Ok(g.scale(total, -0.5)?)
}

pub fn gaussian_kl_node(g: &mut Graph, mu: Var, logvar: Var) -> Result<Var> {
    let k = g.value(mu).len();
    let m2 = g.square(mu)?;
    let var = g.exp(logvar)?;
    let a = g.add(m2, var)?;
    let b = g.sub(a, logvar)?;
    let s = g.sum(b)?;
    let c = g.constant_scalar(-(k as f64));
    let t = g.add(s, c)?;
    Ok(g.scale(t, 0.5)?)
}

#[derive(Debug, Clone)]
pub struct HdnoModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub head: GaussianHead,
    pub dec_embed: Embedding,
    pub dec_init: Linear,
    pub dec_lstm: LstmCell,
    pub dec_out: Linear,
}

impl HdnoModel {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.vocab <= EOS_ID || config.embed == 0 || config.enc_hidden == 0 || config.dec_hidden == 0 || config.latent == 0 {
            return invalid("model sizes must be positive and the vocabulary must hold the reserved tokens");
        }
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, "enc", config.vocab, config.embed, config.enc_hidden, rng)?;
        let head = GaussianHead::new(&mut store, "policy", config.context_len(), config.latent, rng)?;
        let dec_embed = Embedding::new(&mut store, "dec.embed", config.vocab, config.embed, rng)?;
        let dec_init = Linear::new(
            &mut store,
            "dec.init",
            config.context_len() + config.latent,
            config.dec_hidden,
            rng,
        )?;
        let dec_lstm = LstmCell::new(&mut store, "dec.lstm", config.embed, config.dec_hidden, rng)?;
        let dec_out = Linear::new(&mut store, "dec.out", config.dec_hidden, config.vocab, rng)?;
        Ok(Self { config, store, encoder, head, dec_embed, dec_init, dec_lstm, dec_out })
    }

    /// Parameters of the policy over latent acts (λ).
    pub fn high_params(&self) -> Vec<ParamId> {
        self.head.params()
    }

    /// Parameters of the word generator (ν).
    pub fn low_params(&self) -> Vec<ParamId> {
        let mut p = vec![self.dec_embed.table];
        p.extend(self.dec_init.params());
        p.extend(self.dec_lstm.params());
        p.extend(self.dec_out.params());
        p
    }

    pub fn encoder_params(&self) -> Vec<ParamId> {
        self.encoder.params()
    }

    pub fn set_encoder_frozen(&mut self, frozen: bool) {
        for id in self.encoder.params() {
            self.store.set_frozen(id, frozen);
        }
    }

    pub fn encoder_frozen(&self) -> bool {
        self.encoder.params().iter().all(|&id| self.store.is_frozen(id))
    }

    /// `[encode(user); state; db]`.
    pub fn build_context(&self, g: &mut Graph, user: &[usize], state: &[f64], db: &[f64]) -> Result<Var> {
        if state.len() != self.config.state_len || db.len() != self.config.db_len {
            return invalid(format!(
                "context features have lengths {}/{}, expected {}/{}",
                state.len(),
                db.len(),
                self.config.state_len,
                self.config.db_len
            ));
        }
        let enc = self.encoder.encode(g, &self.store, user)?;
        let s = g.constant(Tensor::vector(state.to_vec()));
        let d = g.constant(Tensor::vector(db.to_vec()));
        Ok(g.concat(&[enc.vector, s, d])?)
    }

    /// Context values without keeping a graph around.
    pub fn context_values(&self, user: &[usize], state: &[f64], db: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let c = self.build_context(&mut g, user, state, db)?;
        Ok(g.value(c).to_vec())
    }

    pub fn sample_act(&self, g: &mut Graph, c: Var, mode: SampleMode, rng: &mut impl Rng) -> Result<LatentAct> {
        let eps: Vec<f64> = match mode {
            SampleMode::Mean => vec![0.0; self.config.latent],
            _ => (0..self.config.latent).map(|_| rng.sample(StandardNormal)).collect(),
        };
        self.act_with_noise(g, c, mode, &eps)
    }

    /// As [`HdnoModel::sample_act`] with the standard-normal draw supplied.
    pub fn act_with_noise(&self, g: &mut Graph, c: Var, mode: SampleMode, eps: &[f64]) -> Result<LatentAct> {
        if eps.len() != self.config.latent {
            return invalid("noise vector does not match the latent size");
        }
        let (mu, logvar) = self.head.forward(g, &self.store, c)?;
        let z = match mode {
            SampleMode::Mean => mu,
            SampleMode::Reparameterize => {
                let half = g.scale(logvar, 0.5)?;
                let sd = g.exp(half)?;
                let e = g.constant(Tensor::vector(eps.to_vec()));
                let noise = g.mul(sd, e)?;
                g.add(mu, noise)?
            }
            SampleMode::Score => {
                let z: Vec<f64> = g
                    .value(mu)
                    .iter()
                    .zip(g.value(logvar))
                    .zip(eps)
                    .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
                    .collect();
                g.constant(Tensor::vector(z))
            }
        };
        let logprob = gaussian_logprob_node(g, z, mu, logvar)?;
        Ok(LatentAct {
            z,
            mu,
            logvar,
            logprob,
            z_value: g.value(z).to_vec(),
            mu_value: g.value(mu).to_vec(),
            logvar_value: g.value(logvar).to_vec(),
            logprob_value: g.scalar(logprob),
        })
    }

    /// Initial decoder state from `[c; z]`, after consuming `<bos>`.
    pub fn decoder_start(&self, g: &mut Graph, c: Var, z: Var) -> Result<DecoderState> {
        let cz = g.concat(&[c, z])?;
        let pre = self.dec_init.forward(g, &self.store, cz)?;
        let h = g.tanh(pre)?;
        let cell = g.constant(Tensor::zeros(vec![self.config.dec_hidden])?);
        self.decoder_feed(g, DecoderState { h, c: cell }, BOS_ID)
    }

    pub fn decoder_feed(&self, g: &mut Graph, state: DecoderState, token: usize) -> Result<DecoderState> {
        let x = self.dec_embed.lookup(g, &self.store, token)?;
        let (h, c) = self.dec_lstm.step(g, &self.store, x, state.h, state.c)?;
        Ok(DecoderState { h, c })
    }

    pub fn decoder_logits(&self, g: &mut Graph, state: DecoderState) -> Result<Var> {
        self.dec_out.forward(g, &self.store, state.h)
    }

    /// Next-token log-probabilities at temperature `t` as a graph node.
    pub fn decode_step(&self, g: &mut Graph, state: DecoderState, t: f64) -> Result<Var> {
        let logits = self.decoder_logits(g, state)?;
        nets::log_softmax_temperature(g, logits, t)
    }

    /// −Σ log π(w_t) over `targets` followed by `<eos>`, teacher forced.
    pub fn teacher_forced_nll(&self, g: &mut Graph, c: Var, z: Var, targets: &[usize], t: f64) -> Result<Var> {
        let mut state = self.decoder_start(g, c, z)?;
        let mut terms = Vec::with_capacity(targets.len() + 1);
        for (i, &w) in targets.iter().chain(std::iter::once(&EOS_ID)).enumerate() {
            let lp = self.decode_step(g, state, t)?;
            terms.push(g.pick(lp, w)?);
            if i < targets.len() {
                state = self.decoder_feed(g, state, w)?;
            }
        }
        let total = g.add_all(&terms)?;
        Ok(g.scale(total, -1.0)?)
    }

    /// Samples an utterance at temperature `t`. Returns the surface tokens
    /// and one log-probability node per emitted token (the final one is
    /// `<eos>` unless `max_len` was hit).
    pub fn sample_utterance(
        &self,
        g: &mut Graph,
        c: Var,
        z: Var,
        t: f64,
        max_len: usize,
        rng: &mut impl Rng,
    ) -> Result<(Vec<usize>, Vec<Var>)> {
        let mut state = self.decoder_start(g, c, z)?;
        let mut tokens = Vec::new();
        let mut logps = Vec::new();
        while tokens.len() < max_len {
            let lp = self.decode_step(g, state, t)?;
            let w = sample_index(g.value(lp), rng);
            logps.push(g.pick(lp, w)?);
            if w == EOS_ID {
                break;
            }
            tokens.push(w);
            if tokens.len() < max_len {
                state = self.decoder_feed(g, state, w)?;
            }
        }
        Ok((tokens, logps))
    }

    pub fn save(&self, path: &std::path::Path, config_hash: u64, mut meta: serde_json::Value) -> Result<()> {
        meta["model"] = serde_json::to_value(self.config)?;
        crate::checkpoint::save(path, &self.store, config_hash, &meta)
    }

    /// Rebuilds a model from a checkpoint written by [`HdnoModel::save`].
    pub fn load(path: &std::path::Path, expected_hash: Option<u64>) -> Result<(Self, serde_json::Value)> {
        let meta = crate::checkpoint::read_meta(path)?;
        let config: ModelConfig = serde_json::from_value(
            meta.get("model")
                .cloned()
                .ok_or_else(|| crate::HdnoError::Checkpoint("missing `model` metadata".into()))?,
        )?;
        let mut model = Self::new(config, &mut crate::rng::stream(0, "init"))?;
        let meta = crate::checkpoint::load_into(path, &mut model.store, expected_hash)?;
        Ok((model, meta))
    }

    pub fn decode_greedy(&self, c: &[f64], z: &[f64], max_len: usize) -> Result<Vec<usize>> {
        let (mut dec, init) = GraphDecoder::new(self, c, z)?;
        Ok(decode::greedy(&mut dec, init, max_len)?.tokens)
    }

    pub fn decode_beam(&self, c: &[f64], z: &[f64], width: usize, max_len: usize) -> Result<Hypothesis> {
        let (mut dec, init) = GraphDecoder::new(self, c, z)?;
        decode::beam(&mut dec, init, width, max_len)
    }
}

/// Draws an index from log-probabilities by inverse CDF.
pub fn sample_index(logp: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &l) in logp.iter().enumerate() {
        acc += l.exp();
        if u < acc {
            return i;
        }
    }
    // rounding left a sliver of mass: take the most likely token
    let mut best = 0;
    for (i, &l) in logp.iter().enumerate() {
        if l > logp[best] {
            best = i;
        }
    }
    best
}

/// Forward-only decoder over a private graph, for greedy and beam search.
pub struct GraphDecoder<'m> {
    model: &'m HdnoModel,
    graph: Graph,
}

impl<'m> GraphDecoder<'m> {
    pub fn new(model: &'m HdnoModel, c: &[f64], z: &[f64]) -> Result<(Self, DecoderState)> {
        if c.len() != model.config.context_len() || z.len() != model.config.latent {
            return invalid("context or latent act has the wrong length");
        }
        let mut graph = Graph::new();
        let cv = graph.constant(Tensor::vector(c.to_vec()));
        let zv = graph.constant(Tensor::vector(z.to_vec()));
        let init = model.decoder_start(&mut graph, cv, zv)?;
        Ok((Self { model, graph }, init))
    }
}

impl StepModel for GraphDecoder<'_> {
    type State = DecoderState;

    fn log_probs(&mut self, state: &DecoderState) -> Result<Vec<f64>> {
        let logits = self.model.decoder_logits(&mut self.graph, *state)?;
        let l = self.graph.value(logits);
        let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + l.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        Ok(l.iter().map(|v| v - lse).collect())
    }

    fn advance(&mut self, state: &DecoderState, token: usize) -> Result<DecoderState> {
        self.model.decoder_feed(&mut self.graph, *state, token)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny() -> HdnoModel {
        let cfg = ModelConfig { vocab: 7, embed: 3, enc_hidden: 4, dec_hidden: 5, latent: 2, state_len: 3, db_len: 2 };
        HdnoModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    #[test]
    fn kl_examples() {
        assert_eq!(gaussian_kl(&[0.0], &[0.0]), 0.0);
        assert!((gaussian_kl(&[1.0, 1.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
        assert!((gaussian_logprob(&[0.0], &[0.0], &[0.0]) + 0.918_938_533_204_672_8).abs() < 1e-12);
    }

    #[test]
    fn mean_mode_and_zero_noise_agree() {
        let m = tiny();
        let mut g = Graph::new();
        let c = m.build_context(&mut g, &[4, 5], &[1.0, 0.0, 0.0], &[0.0, 1.0]).unwrap();
        let a = m.act_with_noise(&mut g, c, SampleMode::Reparameterize, &[0.0, 0.0]).unwrap();
        assert_eq!(a.z_value, a.mu_value);
        let b = m.act_with_noise(&mut g, c, SampleMode::Score, &[0.3, -1.0]).unwrap();
        let recomputed = gaussian_logprob(&b.z_value, &b.mu_value, &b.logvar_value);
        assert!((recomputed - b.logprob_value).abs() < 1e-9);
    }

    #[test]
    fn context_has_expected_length() {
        let m = tiny();
        let c = m.context_values(&[4, 5, 6], &[0.0, 1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!(c.len(), m.config.context_len());
        assert!(m.context_values(&[4], &[0.0], &[1.0, 0.0]).is_err());
    }
}
