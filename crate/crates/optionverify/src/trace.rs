//! Exact-gradient ascent traces under synchronous and asynchronous updates
//! of the two policy levels.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::smdp::{random_instance, Instance, TabularPolicies, TabularSmdp};
use crate::value::{exact_value, objective_gradient, PolicyGradient};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Both levels step from the same evaluation point.
    Sync,
    /// φ and π take turns, one level per update, φ first.
    Async,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Updated {
    Initial,
    High,
    Low,
    Both,
}

impl Updated {
    pub fn label(self) -> &'static str {
        match self {
            Updated::Initial => "none",
            Updated::High => "high",
            Updated::Low => "low",
            Updated::Both => "both",
        }
    }
}

/// v(s) before any update (row 0) and after every update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateTrace {
    pub values: Vec<Vec<f64>>,
    pub updated: Vec<Updated>,
}

/// The largest one-update drop of any state's value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decrease {
    pub amount: f64,
    /// Index of the update (1-based row of the trace) that caused it.
    pub step: usize,
    pub state: usize,
}

impl UpdateTrace {
    pub fn state_trace(&self, s: usize) -> Vec<f64> {
        self.values.iter().map(|v| v[s]).collect()
    }

    pub fn max_decrease(&self) -> Decrease {
        let mut worst = Decrease { amount: f64::NEG_INFINITY, step: 0, state: 0 };
        for k in 1..self.values.len() {
            for (s, (a, b)) in self.values[k - 1].iter().zip(&self.values[k]).enumerate() {
                if a - b > worst.amount {
                    worst = Decrease { amount: a - b, step: k, state: s };
                }
            }
        }
        worst
    }

    /// No state's value drops by more than `tol` in any update.
    pub fn is_monotone(&self, tol: f64) -> bool {
        self.values.len() < 2 || self.max_decrease().amount <= tol
    }

    /// max_s |v_last(s) − v_{last−k}(s)|.
    pub fn final_change(&self, k: usize) -> f64 {
        let n = self.values.len();
        if n <= k {
            return f64::INFINITY;
        }
        self.values[n - 1]
            .iter()
            .zip(&self.values[n - 1 - k])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Columns step, state, value, updated_policy.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "state", "value", "updated_policy"])?;
        for (k, (vals, upd)) in self.values.iter().zip(&self.updated).enumerate() {
            for (s, v) in vals.iter().enumerate() {
                w.write_record([k.to_string(), s.to_string(), format!("{v:.17e}"), upd.label().to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn ascend(pol: &mut TabularPolicies, g: &PolicyGradient, lr: f64, high: bool, low: bool) {
    if high {
        for (row, grow) in pol.phi_logits.iter_mut().zip(&g.phi) {
            for (l, d) in row.iter_mut().zip(grow) {
                *l += lr * d;
            }
        }
    }
    if low {
        for (l, d) in pol.pi_logits.iter_mut().flatten().flatten().zip(g.pi.iter().flatten().flatten()) {
            *l += lr * d;
        }
    }
}

/// Gradient ascent on the mean state value with exact gradients, recording
/// v after every update. Returns the trace and the final policies.
pub fn run_update_trace(
    smdp: &TabularSmdp,
    policies: &TabularPolicies,
    mode: Mode,
    lr: f64,
    steps: usize,
) -> Result<(UpdateTrace, TabularPolicies)> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return invalid(format!("learning rate {lr} must be finite and non-negative"));
    }
    let mut pol = policies.clone();
    let mut values = vec![exact_value(smdp, &pol)?];
    let mut updated = vec![Updated::Initial];
    for k in 0..steps {
        let g = objective_gradient(smdp, &pol)?;
        let which = match mode {
            Mode::Sync => Updated::Both,
            Mode::Async if k % 2 == 0 => Updated::High,
            Mode::Async => Updated::Low,
        };
        ascend(&mut pol, &g, lr, which != Updated::Low, which != Updated::High);
        values.push(exact_value(smdp, &pol)?);
        updated.push(which);
    }
    Ok((UpdateTrace { values, updated }, pol))
}

/// Fejér monotonicity of a scalar trace towards its supremum:
/// |v_{n+1} − sup| ≤ |v_n − sup| + tol for every n. Returns the first
/// violating n if any.
pub fn fejer_check_tol(trace: &[f64], tol: f64) -> Result<(bool, Option<usize>)> {
    if trace.is_empty() {
        return invalid("empty trace");
    }
    let sup = trace.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for n in 0..trace.len() - 1 {
        if (trace[n + 1] - sup).abs() > (trace[n] - sup).abs() + tol {
            return Ok((false, Some(n)));
        }
    }
    Ok((true, None))
}

pub fn fejer_check(trace: &[f64]) -> Result<(bool, Option<usize>)> {
    fejer_check_tol(trace, 0.0)
}

/// A pinned instance on which a synchronous update lowers some state's
/// value while the asynchronous trace at the same step size stays monotone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub seed: u64,
    pub instance: Instance,
    pub lr: f64,
    pub steps: usize,
    /// Update index and state of the recorded synchronous decrease.
    pub step: usize,
    pub state: usize,
    pub decrease: f64,
}

const PINNED_WITNESS: &str = include_str!("../fixtures/sync_witness.json");

impl Witness {
    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let w: Self = serde_json::from_str(text)?;
        w.instance.validate()?;
        Ok(w)
    }

    /// The committed fixture.
    pub fn pinned() -> Result<Self> {
        Self::parse(PINNED_WITNESS)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WitnessCheck {
    /// v_{step−1}(state) − v_step(state) under synchronous updates.
    pub sync_decrease: f64,
    pub async_max_decrease: Decrease,
}

impl WitnessCheck {
    pub fn holds(&self, threshold: f64, tol: f64) -> bool {
        self.sync_decrease > threshold && self.async_max_decrease.amount <= tol
    }
}

/// Replays a witness from its instance.
pub fn check_witness(w: &Witness) -> Result<WitnessCheck> {
    let (sync, _) = run_update_trace(&w.instance.smdp, &w.instance.policies, Mode::Sync, w.lr, w.steps)?;
    if w.step == 0 || w.step >= sync.values.len() || w.state >= w.instance.smdp.states {
        return invalid(format!("witness step {} / state {} outside the trace", w.step, w.state));
    }
    let sync_decrease = sync.values[w.step - 1][w.state] - sync.values[w.step][w.state];
    let (asy, _) = run_update_trace(&w.instance.smdp, &w.instance.policies, Mode::Async, w.lr, w.steps)?;
    Ok(WitnessCheck { sync_decrease, async_max_decrease: asy.max_decrease() })
}

/// Horizon used for search instance `seed`: odd seeds are finite-horizon
/// (2–8 primitive steps), even seeds infinite.
pub fn search_horizon(seed: u64) -> Option<usize> {
    (seed % 2 == 1).then_some(2 + (seed / 2 % 7) as usize)
}

/// Scans instances `0..max_instances` and step sizes `lrs` for a witness
/// whose synchronous decrease exceeds `threshold` while the asynchronous
/// trace never drops by more than `tol`.
pub fn search_witness(max_instances: u64, lrs: &[f64], steps: usize, threshold: f64, tol: f64) -> Result<Option<Witness>> {
    for seed in 0..max_instances {
        let instance = random_instance(seed, search_horizon(seed));
        for &lr in lrs {
            let (sync, _) = run_update_trace(&instance.smdp, &instance.policies, Mode::Sync, lr, steps)?;
            let d = sync.max_decrease();
            if d.amount <= threshold {
                continue;
            }
            let (asy, _) = run_update_trace(&instance.smdp, &instance.policies, Mode::Async, lr, steps)?;
            if asy.is_monotone(tol) {
                return Ok(Some(Witness {
                    seed,
                    instance,
                    lr,
                    steps,
                    step: d.step,
                    state: d.state,
                    decrease: d.amount,
                }));
            }
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fejer_examples() {
        assert_eq!(fejer_check(&[1.0, 2.0, 3.0]).unwrap(), (true, None));
        assert_eq!(fejer_check(&[1.0, 3.0, 2.0]).unwrap(), (false, Some(1)));
        assert!(fejer_check(&[]).is_err());
    }

    #[test]
    fn zero_step_is_constant() {
        let inst = random_instance(5, None);
        let (t, _) = run_update_trace(&inst.smdp, &inst.policies, Mode::Sync, 0.0, 5).unwrap();
        assert!(t.values.iter().all(|v| v == &t.values[0]));
        assert_eq!(t.updated[1], Updated::Both);
    }
}
