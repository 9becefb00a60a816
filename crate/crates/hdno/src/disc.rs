//! First-order Markov language model D(w_t | w_{t−1}) scoring generated
//! words. `BigramTable` is the add-k count model used as an oracle;
//! `NeuralDisc` is an embedding + LSTM + softmax model conditioned on the
//! previous token only, trained on oracle utterances plus η-weighted
//! generated ones. During HRL the neural model is frozen into a V×V table.

use std::collections::BTreeMap;
use std::path::Path;

use diffcore::{clip_grad_norm, Graph, Optimizer, ParamGrads, ParamStore, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{invalid, HdnoError, Result};
use crate::nets::{Embedding, Linear, LstmCell};

/// Adjacent pairs of a sequence with `bos` prepended and, if given, `eos`
/// appended.
pub fn pairs(seq: &[usize], bos: usize, eos: Option<usize>) -> Vec<(usize, usize)> {
    let mut full = Vec::with_capacity(seq.len() + 2);
    full.push(bos);
    full.extend_from_slice(seq);
    full.extend(eos);
    full.windows(2).map(|w| (w[0], w[1])).collect()
}

/// Anything that scores a word given the previous word.
pub trait MarkovScorer {
    fn vocab(&self) -> usize;

    /// ln D(cur | prev), without range checks.
    fn log_prob_unchecked(&self, prev: usize, cur: usize) -> f64;

    /// The per-word reward ln D(cur | prev) ≤ 0.
    fn reward(&self, prev: usize, cur: usize) -> Result<f64> {
        let v = self.vocab();
        if prev >= v || cur >= v {
            return Err(HdnoError::Unknown { what: "token id", name: prev.max(cur).to_string() });
        }
        Ok(self.log_prob_unchecked(prev, cur))
    }

    /// Mean −ln D per scored pair over the given sequences.
    fn nll_per_token(&self, seqs: &[Vec<usize>], bos: usize, eos: Option<usize>) -> Result<f64> {
        let mut total = 0.0;
        let mut n = 0usize;
        for s in seqs {
            for (p, c) in pairs(s, bos, eos) {
                total -= self.reward(p, c)?;
                n += 1;
            }
        }
        if n == 0 {
            return invalid("no tokens to score");
        }
        Ok(total / n as f64)
    }

    /// Σ_t ln D(w_t | w_{t−1}) over one sequence.
    fn sequence_score(&self, seq: &[usize], bos: usize, eos: Option<usize>) -> Result<f64> {
        pairs(seq, bos, eos).into_iter().map(|(p, c)| self.reward(p, c)).sum()
    }
}

/// Add-k smoothed bigram counts.
#[derive(Debug, Clone, PartialEq)]
pub struct BigramTable {
    vocab: usize,
    counts: Vec<f64>,
    row_totals: Vec<f64>,
    k: f64,
}

impl BigramTable {
    pub fn fit(seqs: &[Vec<usize>], vocab: usize, k: f64, bos: usize, eos: Option<usize>) -> Result<Self> {
        if seqs.is_empty() {
            return invalid("cannot fit a bigram table on an empty corpus");
        }
        if k < 0.0 {
            return invalid("smoothing constant must be non-negative");
        }
        let mut counts = vec![0.0; vocab * vocab];
        let mut row_totals = vec![0.0; vocab];
        for s in seqs {
            for (p, c) in pairs(s, bos, eos) {
                if p >= vocab || c >= vocab {
                    return Err(HdnoError::Unknown { what: "token id", name: p.max(c).to_string() });
                }
                counts[p * vocab + c] += 1.0;
                row_totals[p] += 1.0;
            }
        }
        Ok(Self { vocab, counts, row_totals, k })
    }

    pub fn prob(&self, prev: usize, cur: usize) -> f64 {
        let denom = self.row_totals[prev] + self.k * self.vocab as f64;
        if denom == 0.0 {
            return 1.0 / self.vocab as f64;
        }
        (self.counts[prev * self.vocab + cur] + self.k) / denom
    }

    pub fn count(&self, prev: usize, cur: usize) -> f64 {
        self.counts[prev * self.vocab + cur]
    }
}

impl MarkovScorer for BigramTable {
    fn vocab(&self) -> usize {
        self.vocab
    }

    fn log_prob_unchecked(&self, prev: usize, cur: usize) -> f64 {
        self.prob(prev, cur).ln()
    }
}

/// A frozen V×V table of ln D.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenDisc {
    vocab: usize,
    log_probs: Vec<f64>,
}

impl FrozenDisc {
    pub fn row(&self, prev: usize) -> &[f64] {
        &self.log_probs[prev * self.vocab..(prev + 1) * self.vocab]
    }
}

impl MarkovScorer for FrozenDisc {
    fn vocab(&self) -> usize {
        self.vocab
    }

    fn log_prob_unchecked(&self, prev: usize, cur: usize) -> f64 {
        self.log_probs[prev * self.vocab + cur]
    }
}

/// Weighted transition counts, one dense row per observed previous token.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TransitionCounts {
    pub vocab: usize,
    pub rows: BTreeMap<usize, Vec<f64>>,
}

impl TransitionCounts {
    pub fn new(vocab: usize) -> Self {
        Self { vocab, rows: BTreeMap::new() }
    }

    pub fn add_sequences(&mut self, seqs: &[Vec<usize>], weight: f64, bos: usize, eos: Option<usize>) -> Result<()> {
        for s in seqs {
            for (p, c) in pairs(s, bos, eos) {
                if p >= self.vocab || c >= self.vocab {
                    return Err(HdnoError::Unknown { what: "token id", name: p.max(c).to_string() });
                }
                self.rows.entry(p).or_insert_with(|| vec![0.0; self.vocab])[c] += weight;
            }
        }
        Ok(())
    }

    pub fn total(&self) -> f64 {
        self.rows.values().flat_map(|r| r.iter()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscConfig {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone)]
pub struct NeuralDisc {
    pub config: DiscConfig,
    pub store: ParamStore,
    embed: Embedding,
    lstm: LstmCell,
    out: Linear,
}

impl NeuralDisc {
    pub fn new(config: DiscConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let embed = Embedding::new(&mut store, "disc.embed", config.vocab, config.embed, rng)?;
        let lstm = LstmCell::new(&mut store, "disc.lstm", config.embed, config.hidden, rng)?;
        let out = Linear::new(&mut store, "disc.out", config.hidden, config.vocab, rng)?;
        Ok(Self { config, store, embed, lstm, out })
    }

    /// ln D(· | prev) as a graph node: one LSTM step from a zero state.
    fn row_node(&self, g: &mut Graph, prev: usize) -> Result<diffcore::Var> {
        let x = self.embed.lookup(g, &self.store, prev)?;
        let zero = g.constant(Tensor::zeros(vec![self.config.hidden])?);
        let (h, _) = self.lstm.step(g, &self.store, x, zero, zero)?;
        let logits = self.out.forward(g, &self.store, h)?;
        Ok(g.log_softmax(logits)?)
    }

    /// −Σ C[prev, w] ln D(w | prev).
    pub fn weighted_nll(&self, g: &mut Graph, counts: &TransitionCounts) -> Result<diffcore::Var> {
        let mut terms = Vec::with_capacity(counts.rows.len());
        for (&prev, row) in &counts.rows {
            let lp = self.row_node(g, prev)?;
            let c = g.constant_vec(row.clone());
            terms.push(g.dot(lp, c)?);
        }
        if terms.is_empty() {
            return invalid("no transitions to train on");
        }
        let total = g.add_all(&terms)?;
        Ok(g.scale(total, -1.0)?)
    }

    /// Negative of Σ ln D over oracle tokens plus η·Σ ln D over generated
    /// tokens, on the current parameters.
    pub fn loss(&self, oracle: &[Vec<usize>], generated: &[Vec<usize>], eta: f64, bos: usize, eos: Option<usize>) -> Result<f64> {
        let counts = self.counts(oracle, generated, eta, bos, eos)?;
        let mut g = Graph::new();
        let l = self.weighted_nll(&mut g, &counts)?;
        Ok(g.scalar(l))
    }

    fn counts(
        &self,
        oracle: &[Vec<usize>],
        generated: &[Vec<usize>],
        eta: f64,
        bos: usize,
        eos: Option<usize>,
    ) -> Result<TransitionCounts> {
        if oracle.is_empty() {
            return invalid("empty oracle batch");
        }
        if eta < 0.0 {
            return invalid("eta must be non-negative");
        }
        let mut counts = TransitionCounts::new(self.config.vocab);
        counts.add_sequences(oracle, 1.0, bos, eos)?;
        if eta > 0.0 {
            counts.add_sequences(generated, eta, bos, eos)?;
        }
        Ok(counts)
    }

    /// One optimizer step on the η-weighted objective. The gradient is taken
    /// per oracle token so step sizes do not depend on the batch size.
    /// Returns the (unnormalized) loss before the step.
    #[allow(clippy::too_many_arguments)]
    pub fn train_step(
        &mut self,
        oracle: &[Vec<usize>],
        generated: &[Vec<usize>],
        eta: f64,
        bos: usize,
        eos: Option<usize>,
        opt: &mut Optimizer,
        grad_clip: f64,
    ) -> Result<f64> {
        let counts = self.counts(oracle, generated, eta, bos, eos)?;
        let n_oracle: usize = oracle.iter().map(|s| pairs(s, bos, eos).len()).sum();
        let mut g = Graph::new();
        let loss = self.weighted_nll(&mut g, &counts)?;
        let value = g.scalar(loss);
        let mut grads: ParamGrads = g.backward(loss)?.param_grads(self.store.len());
        grads.scale(1.0 / n_oracle.max(1) as f64);
        if grad_clip > 0.0 {
            clip_grad_norm(&mut grads, grad_clip);
        }
        opt.step(&mut self.store, &grads)?;
        Ok(value)
    }

    pub fn freeze(&self) -> Result<FrozenDisc> {
        let v = self.config.vocab;
        let mut log_probs = Vec::with_capacity(v * v);
        for prev in 0..v {
            let mut g = Graph::new();
            let lp = self.row_node(&mut g, prev)?;
            log_probs.extend_from_slice(g.value(lp));
        }
        Ok(FrozenDisc { vocab: v, log_probs })
    }

    pub fn save(&self, path: &Path, config_hash: u64, mut meta: serde_json::Value) -> Result<()> {
        meta["disc"] = serde_json::to_value(self.config)?;
        checkpoint::save(path, &self.store, config_hash, &meta)
    }

    pub fn load(path: &Path, expected_hash: Option<u64>) -> Result<Self> {
        let meta = checkpoint::read_meta(path)?;
        let config: DiscConfig = serde_json::from_value(
            meta.get("disc").cloned().ok_or_else(|| HdnoError::Checkpoint("missing `disc` metadata".into()))?,
        )?;
        let mut disc = Self::new(config, &mut crate::rng::stream(0, "init"))?;
        checkpoint::load_into(path, &mut disc.store, expected_hash)?;
        Ok(disc)
    }
}
