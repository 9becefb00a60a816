//! Greedy and beam decoding over any step-wise token model.

use std::cmp::Ordering;

use crate::error::{invalid, Result};
use crate::vocab::EOS_ID;

/// A left-to-right token model.
pub trait StepModel {
    type State: Clone;

    /// Log-probabilities over the whole vocabulary for the next token.
    fn log_probs(&mut self, state: &Self::State) -> Result<Vec<f64>>;

    /// State after consuming `token`.
    fn advance(&mut self, state: &Self::State, token: usize) -> Result<Self::State>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Surface tokens, without `<eos>`.
    pub tokens: Vec<usize>,
    /// Sum of token log-probabilities, including the `<eos>` step if any.
    pub logprob: f64,
    pub finished: bool,
}

impl Hypothesis {
    pub fn steps(&self) -> usize {
        self.tokens.len() + usize::from(self.finished)
    }

    /// Log-probability divided by the number of emitted tokens (counting
    /// `<eos>`).
    pub fn normalized(&self) -> f64 {
        match self.steps() {
            0 => 0.0,
            n => self.logprob / n as f64,
        }
    }
}

/// Higher normalized score first; ties go to the lexicographically lower
/// token-id sequence.
pub fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.normalized()
        .partial_cmp(&a.normalized())
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Argmax decoding until `<eos>` or `max_len` surface tokens.
pub fn greedy<M: StepModel>(model: &mut M, init: M::State, max_len: usize) -> Result<Hypothesis> {
    if max_len == 0 {
        return invalid("max_len must be at least 1");
    }
    let mut state = init;
    let mut hyp = Hypothesis { tokens: Vec::new(), logprob: 0.0, finished: false };
    while hyp.tokens.len() < max_len {
        let lp = model.log_probs(&state)?;
        let w = argmax(&lp);
        hyp.logprob += lp[w];
        if w == EOS_ID {
            hyp.finished = true;
            break;
        }
        hyp.tokens.push(w);
        if hyp.tokens.len() < max_len {
            state = model.advance(&state, w)?;
        }
    }
    Ok(hyp)
}

/// Length-normalized beam search. Each step the expansions of all live
/// hypotheses, `<eos>` included, are pruned to the best `width`; finished
/// ones leave the beam for the pool and the survivors at `max_len` join it
/// unterminated. Expansions in one step share a length, so width 1 is the
/// argmax path. The greedy path is added to the pool, so the result never
/// scores below greedy.
pub fn beam<M: StepModel>(model: &mut M, init: M::State, width: usize, max_len: usize) -> Result<Hypothesis> {
    if width == 0 {
        return invalid("beam width must be at least 1");
    }
    let mut pool = vec![greedy(model, init.clone(), max_len)?];
    let mut live = vec![(Hypothesis { tokens: Vec::new(), logprob: 0.0, finished: false }, init)];
    for step in 0..max_len {
        let mut candidates: Vec<(Hypothesis, usize)> = Vec::new();
        for (li, (hyp, state)) in live.iter().enumerate() {
            let lp = model.log_probs(state)?;
            for (w, &l) in lp.iter().enumerate() {
                let mut tokens = hyp.tokens.clone();
                let finished = w == EOS_ID;
                if !finished {
                    tokens.push(w);
                }
                candidates.push((Hypothesis { tokens, logprob: hyp.logprob + l, finished }, li));
            }
        }
        // same-step candidates have equal length: a raw log-prob ranking
        candidates.sort_by(|a, b| rank(&a.0, &b.0));
        candidates.truncate(width);
        let (done, open): (Vec<_>, Vec<_>) = candidates.into_iter().partition(|(h, _)| h.finished);
        pool.extend(done.into_iter().map(|(h, _)| h));
        if step + 1 == max_len {
            pool.extend(open.into_iter().map(|(h, _)| h));
            break;
        }
        let mut next = Vec::with_capacity(open.len());
        for (hyp, li) in open {
            let w = *hyp.tokens.last().expect("non-empty candidate");
            let state = model.advance(&live[li].1, w)?;
            next.push((hyp, state));
        }
        live = next;
        if live.is_empty() {
            break;
        }
    }
    pool.sort_by(rank);
    Ok(pool.swap_remove(0))
}
