//! Instance and policy tables.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, VerifyError};

pub const MAX_STATES: usize = 8;
pub const MAX_OPTIONS: usize = 4;
pub const MAX_VOCAB: usize = 5;
/// Longest finite horizon (in primitive steps) accepted for gradients and
/// brute-force enumeration.
pub const MAX_HORIZON: usize = 12;

const ROW_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularSmdp {
    pub states: usize,
    pub options: usize,
    /// Primitive symbols per option; the last one terminates the option.
    pub vocab: usize,
    /// `transitions[s][w][s']` = P(s' | s, w).
    pub transitions: Vec<Vec<Vec<f64>>>,
    /// `rewards[s][w]`.
    pub rewards: Vec<Vec<f64>>,
    pub gamma: f64,
    /// Primitive steps to run; `None` is the infinite discounted horizon.
    #[serde(default)]
    pub horizon: Option<usize>,
}

impl TabularSmdp {
    pub fn terminal(&self) -> usize {
        self.vocab - 1
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_STATES).contains(&self.states) {
            return invalid(format!("{} states (1..={MAX_STATES} allowed)", self.states));
        }
        if !(1..=MAX_OPTIONS).contains(&self.options) {
            return invalid(format!("{} options (1..={MAX_OPTIONS} allowed)", self.options));
        }
        if !(1..=MAX_VOCAB).contains(&self.vocab) {
            return invalid(format!("vocabulary of {} (1..={MAX_VOCAB} allowed)", self.vocab));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return invalid(format!("gamma {} outside [0, 1]", self.gamma));
        }
        if self.horizon.is_none() && self.gamma >= 1.0 {
            return invalid("an infinite horizon needs gamma < 1");
        }
        if self.transitions.len() != self.states || self.rewards.len() != self.states {
            return invalid("transition and reward tables need one entry per state");
        }
        for s in 0..self.states {
            if self.transitions[s].len() != self.vocab || self.rewards[s].len() != self.vocab {
                return invalid(format!("state {s}: tables need one entry per symbol"));
            }
            for (w, row) in self.transitions[s].iter().enumerate() {
                if row.len() != self.states || row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return invalid(format!("P(·|{s}, {w}) is not a distribution over states"));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > ROW_TOL {
                    return invalid(format!("P(·|{s}, {w}) sums to {sum}"));
                }
            }
            if self.rewards[s].iter().any(|r| !r.is_finite()) {
                return invalid(format!("state {s}: rewards must be finite"));
            }
        }
        Ok(())
    }

    pub fn max_abs_reward(&self) -> f64 {
        self.rewards.iter().flatten().fold(0.0, |m, r| m.max(r.abs()))
    }
}

/// Softmax logits for the policy over options and the option policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicies {
    /// `phi_logits[s][o]`.
    pub phi_logits: Vec<Vec<f64>>,
    /// `pi_logits[o][s][w]`.
    pub pi_logits: Vec<Vec<Vec<f64>>>,
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

impl TabularPolicies {
    pub fn uniform(smdp: &TabularSmdp) -> Self {
        Self {
            phi_logits: vec![vec![0.0; smdp.options]; smdp.states],
            pi_logits: vec![vec![vec![0.0; smdp.vocab]; smdp.states]; smdp.options],
        }
    }

    pub fn phi(&self, s: usize) -> Vec<f64> {
        softmax(&self.phi_logits[s])
    }

    pub fn pi(&self, o: usize, s: usize) -> Vec<f64> {
        softmax(&self.pi_logits[o][s])
    }

    pub fn validate(&self, smdp: &TabularSmdp) -> Result<()> {
        if self.phi_logits.len() != smdp.states || self.phi_logits.iter().any(|r| r.len() != smdp.options) {
            return invalid("phi logits must be states × options");
        }
        if self.pi_logits.len() != smdp.options
            || self
                .pi_logits
                .iter()
                .any(|o| o.len() != smdp.states || o.iter().any(|r| r.len() != smdp.vocab))
        {
            return invalid("pi logits must be options × states × vocabulary");
        }
        if self.phi_logits.iter().flatten().chain(self.pi_logits.iter().flatten().flatten()).any(|l| l.is_nan()) {
            return invalid("logits must not be NaN");
        }
        Ok(())
    }

    /// Every option must reach its terminal symbol with positive probability
    /// from every state it can visit, otherwise it runs forever.
    pub fn check_termination(&self, smdp: &TabularSmdp) -> Result<()> {
        let term = smdp.terminal();
        for o in 0..smdp.options {
            // states from which option o can still terminate
            let mut ends: Vec<bool> = (0..smdp.states).map(|s| self.pi(o, s)[term] > 0.0).collect();
            loop {
                let mut changed = false;
                for s in 0..smdp.states {
                    if ends[s] {
                        continue;
                    }
                    let pi = self.pi(o, s);
                    let reach = (0..term).any(|w| {
                        pi[w] > 0.0 && (0..smdp.states).any(|t| smdp.transitions[s][w][t] > 0.0 && ends[t])
                    });
                    if reach {
                        ends[s] = true;
                        changed = true;
                    }
                }
                if !changed {
                    break;
                }
            }
            if let Some(state) = ends.iter().position(|e| !e) {
                return Err(VerifyError::NonTerminating { option: o, state });
            }
        }
        Ok(())
    }
}

/// An instance file: the process plus the starting policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub smdp: TabularSmdp,
    pub policies: TabularPolicies,
}

impl Instance {
    pub fn validate(&self) -> Result<()> {
        self.smdp.validate()?;
        self.policies.validate(&self.smdp)?;
        self.policies.check_termination(&self.smdp)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let inst: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        inst.validate()?;
        Ok(inst)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn random_distribution(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    // normalized exponentials: a flat Dirichlet draw
    let e: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// A random instance: 2–8 states, 2–4 options, 2–5 symbols, rewards in
/// [−1, 1], γ in [0.5, 0.95], standard-normal-ish logits.
pub fn random_instance(seed: u64, horizon: Option<usize>) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let states = rng.random_range(2..=MAX_STATES);
    let options = rng.random_range(2..=MAX_OPTIONS);
    let vocab = rng.random_range(2..=MAX_VOCAB);
    let transitions = (0..states)
        .map(|_| (0..vocab).map(|_| random_distribution(states, &mut rng)).collect())
        .collect();
    let rewards = (0..states)
        .map(|_| (0..vocab).map(|_| rng.random_range(-1.0..=1.0)).collect())
        .collect();
    let gamma = rng.random_range(0.5..=0.95);
    let mut logit = || {
        // sum of three uniforms, variance 1
        (0..3).map(|_| rng.random_range(-1.0..1.0)).sum::<f64>()
    };
    let phi_logits = (0..states).map(|_| (0..options).map(|_| logit()).collect()).collect();
    let pi_logits = (0..options)
        .map(|_| (0..states).map(|_| (0..vocab).map(|_| logit()).collect()).collect())
        .collect();
    Instance {
        smdp: TabularSmdp { states, options, vocab, transitions, rewards, gamma, horizon },
        policies: TabularPolicies { phi_logits, pi_logits },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_instances_are_valid() {
        for seed in 0..50 {
            random_instance(seed, None).validate().unwrap();
            random_instance(seed, Some(4)).validate().unwrap();
        }
    }

    #[test]
    fn blocked_termination_is_detected() {
        let mut inst = random_instance(3, None);
        let term = inst.smdp.terminal();
        for s in 0..inst.smdp.states {
            inst.policies.pi_logits[1][s][term] = f64::NEG_INFINITY;
        }
        assert!(matches!(inst.validate(), Err(VerifyError::NonTerminating { option: 1, .. })));
    }
}
