//! Exact values and policy gradients.
//!
//! Unknowns are the decision values V(s) and the in-option values U(o, s):
//!
//!   V(s)    = Σ_o φ(o|s) U(o, s)
//!   U(o, s) = Σ_w π(w|o,s) [ r(s,w) + γ Σ_s' P(s'|s,w) X(s') ]
//!
//! with X = V after the terminal symbol and X = U(o, ·) otherwise. An
//! infinite horizon solves this linear system directly; a finite horizon
//! unrolls it over the remaining primitive steps. The objective for
//! gradients is the mean of V over states.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VerifyError};
use crate::smdp::{TabularPolicies, TabularSmdp, MAX_HORIZON};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Level {
    High,
    Low,
}

/// V(s) and U(o, s) (`u[o][s]`) for the whole horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct Values {
    pub v: Vec<f64>,
    pub u: Vec<Vec<f64>>,
}

fn check(smdp: &TabularSmdp, pol: &TabularPolicies) -> Result<()> {
    smdp.validate()?;
    pol.validate(smdp)?;
    pol.check_termination(smdp)
}

/// Σ_w π(w) (r + γ Σ P X) pieces for one (o, s): per-symbol q values.
fn q_values(smdp: &TabularSmdp, o: usize, s: usize, v: &[f64], u: &[Vec<f64>]) -> Vec<f64> {
    let term = smdp.terminal();
    (0..smdp.vocab)
        .map(|w| {
            let next = if w == term { v } else { &u[o][..] };
            let ev: f64 = smdp.transitions[s][w].iter().zip(next).map(|(p, x)| p * x).sum();
            smdp.rewards[s][w] + smdp.gamma * ev
        })
        .collect()
}

fn index_u(smdp: &TabularSmdp, o: usize, s: usize) -> usize {
    smdp.states + o * smdp.states + s
}

/// The linear system (I − M) x = b of the infinite-horizon values.
fn system(smdp: &TabularSmdp, pol: &TabularPolicies) -> (DMatrix<f64>, DVector<f64>) {
    let n = smdp.states * (1 + smdp.options);
    let term = smdp.terminal();
    let mut a = DMatrix::<f64>::identity(n, n);
    let mut b = DVector::<f64>::zeros(n);
    for s in 0..smdp.states {
        let phi = pol.phi(s);
        for o in 0..smdp.options {
            a[(s, index_u(smdp, o, s))] -= phi[o];
        }
    }
    for o in 0..smdp.options {
        for s in 0..smdp.states {
            let row = index_u(smdp, o, s);
            let pi = pol.pi(o, s);
            for w in 0..smdp.vocab {
                b[row] += pi[w] * smdp.rewards[s][w];
                for t in 0..smdp.states {
                    let col = if w == term { t } else { index_u(smdp, o, t) };
                    a[(row, col)] -= pi[w] * smdp.gamma * smdp.transitions[s][w][t];
                }
            }
        }
    }
    (a, b)
}

fn split(smdp: &TabularSmdp, x: &DVector<f64>) -> Values {
    Values {
        v: (0..smdp.states).map(|s| x[s]).collect(),
        u: (0..smdp.options)
            .map(|o| (0..smdp.states).map(|s| x[index_u(smdp, o, s)]).collect())
            .collect(),
    }
}

/// Finite-horizon values for every number of remaining steps 0..=H.
fn unrolled(smdp: &TabularSmdp, pol: &TabularPolicies, horizon: usize) -> Vec<Values> {
    let mut out = vec![Values { v: vec![0.0; smdp.states], u: vec![vec![0.0; smdp.states]; smdp.options] }];
    for _ in 0..horizon {
        let prev = out.last().expect("non-empty");
        let u: Vec<Vec<f64>> = (0..smdp.options)
            .map(|o| {
                (0..smdp.states)
                    .map(|s| {
                        let q = q_values(smdp, o, s, &prev.v, &prev.u);
                        pol.pi(o, s).iter().zip(&q).map(|(p, q)| p * q).sum()
                    })
                    .collect()
            })
            .collect();
        let v = (0..smdp.states)
            .map(|s| pol.phi(s).iter().enumerate().map(|(o, p)| p * u[o][s]).sum())
            .collect();
        out.push(Values { v, u });
    }
    out
}

pub fn solve(smdp: &TabularSmdp, pol: &TabularPolicies) -> Result<Values> {
    check(smdp, pol)?;
    match smdp.horizon {
        Some(h) => Ok(unrolled(smdp, pol, h).pop().expect("non-empty")),
        None => {
            let (a, b) = system(smdp, pol);
            let x = a.lu().solve(&b).ok_or(VerifyError::Singular)?;
            Ok(split(smdp, &x))
        }
    }
}

/// v(s) for every state, exactly.
pub fn exact_value(smdp: &TabularSmdp, pol: &TabularPolicies) -> Result<Vec<f64>> {
    Ok(solve(smdp, pol)?.v)
}

/// Largest violation of the two Bellman equations by infinite-horizon
/// `values`.
pub fn bellman_residual(smdp: &TabularSmdp, pol: &TabularPolicies, values: &Values) -> f64 {
    let mut worst = 0.0f64;
    for s in 0..smdp.states {
        let rhs: f64 = pol.phi(s).iter().enumerate().map(|(o, p)| p * values.u[o][s]).sum();
        worst = worst.max((values.v[s] - rhs).abs());
    }
    for o in 0..smdp.options {
        for s in 0..smdp.states {
            let q = q_values(smdp, o, s, &values.v, &values.u);
            let rhs: f64 = pol.pi(o, s).iter().zip(&q).map(|(p, q)| p * q).sum();
            worst = worst.max((values.u[o][s] - rhs).abs());
        }
    }
    worst
}

/// ∂J/∂logits for J = mean_s v(s); `phi[s][o]`, `pi[o][s][w]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyGradient {
    pub phi: Vec<Vec<f64>>,
    pub pi: Vec<Vec<Vec<f64>>>,
}

impl PolicyGradient {
    fn zeros(smdp: &TabularSmdp) -> Self {
        Self {
            phi: vec![vec![0.0; smdp.options]; smdp.states],
            pi: vec![vec![vec![0.0; smdp.vocab]; smdp.states]; smdp.options],
        }
    }

    pub fn norm(&self) -> f64 {
        self.phi
            .iter()
            .flatten()
            .chain(self.pi.iter().flatten().flatten())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

/// Exact gradient of both levels by the adjoint of the value equations.
pub fn objective_gradient(smdp: &TabularSmdp, pol: &TabularPolicies) -> Result<PolicyGradient> {
    check(smdp, pol)?;
    let n_states = smdp.states as f64;
    let mut grad = PolicyGradient::zeros(smdp);
    match smdp.horizon {
        None => {
            let (a, b) = system(smdp, pol);
            let lu = a.clone().lu();
            let x = lu.solve(&b).ok_or(VerifyError::Singular)?;
            let values = split(smdp, &x);
            let mut c = DVector::<f64>::zeros(a.nrows());
            for s in 0..smdp.states {
                c[s] = 1.0 / n_states;
            }
            let y = a.transpose().lu().solve(&c).ok_or(VerifyError::Singular)?;
            for s in 0..smdp.states {
                let phi = pol.phi(s);
                for o in 0..smdp.options {
                    grad.phi[s][o] = y[s] * phi[o] * (values.u[o][s] - values.v[s]);
                }
            }
            for o in 0..smdp.options {
                for s in 0..smdp.states {
                    let weight = y[index_u(smdp, o, s)];
                    let pi = pol.pi(o, s);
                    let q = q_values(smdp, o, s, &values.v, &values.u);
                    for w in 0..smdp.vocab {
                        grad.pi[o][s][w] = weight * pi[w] * (q[w] - values.u[o][s]);
                    }
                }
            }
        }
        Some(h) => {
            if h > MAX_HORIZON {
                return Err(VerifyError::HorizonTooLarge { horizon: h, limit: MAX_HORIZON });
            }
            let vals = unrolled(smdp, pol, h);
            let term = smdp.terminal();
            let mut adj_v = vec![vec![0.0; smdp.states]; h + 1];
            let mut adj_u = vec![vec![vec![0.0; smdp.states]; smdp.options]; h + 1];
            adj_v[h] = vec![1.0 / n_states; smdp.states];
            for k in (1..=h).rev() {
                for s in 0..smdp.states {
                    let phi = pol.phi(s);
                    for o in 0..smdp.options {
                        adj_u[k][o][s] += adj_v[k][s] * phi[o];
                        grad.phi[s][o] += adj_v[k][s] * phi[o] * (vals[k].u[o][s] - vals[k].v[s]);
                    }
                }
                for o in 0..smdp.options {
                    for s in 0..smdp.states {
                        let a = adj_u[k][o][s];
                        if a == 0.0 {
                            continue;
                        }
                        let pi = pol.pi(o, s);
                        let q = q_values(smdp, o, s, &vals[k - 1].v, &vals[k - 1].u);
                        for w in 0..smdp.vocab {
                            grad.pi[o][s][w] += a * pi[w] * (q[w] - vals[k].u[o][s]);
                            for t in 0..smdp.states {
                                let coef = a * pi[w] * smdp.gamma * smdp.transitions[s][w][t];
                                if w == term {
                                    adj_v[k - 1][t] += coef;
                                } else {
                                    adj_u[k - 1][o][t] += coef;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(grad)
}

/// The gradient for one level, the other level's table zeroed.
pub fn exact_policy_gradient(smdp: &TabularSmdp, pol: &TabularPolicies, level: Level) -> Result<PolicyGradient> {
    let mut g = objective_gradient(smdp, pol)?;
    match level {
        Level::High => g.pi.iter_mut().flatten().flatten().for_each(|x| *x = 0.0),
        Level::Low => g.phi.iter_mut().flatten().for_each(|x| *x = 0.0),
    }
    Ok(g)
}

/// v(s) by summing probability × discounted return over every trajectory
/// of a finite horizon. Exponential in the horizon.
pub fn enumerate_value(smdp: &TabularSmdp, pol: &TabularPolicies) -> Result<Vec<f64>> {
    check(smdp, pol)?;
    let h = smdp.horizon.ok_or_else(|| VerifyError::Invalid("enumeration needs a finite horizon".into()))?;
    if h > MAX_HORIZON {
        return Err(VerifyError::HorizonTooLarge { horizon: h, limit: MAX_HORIZON });
    }
    struct Node {
        prob: f64,
        ret: f64,
        discount: f64,
        state: usize,
        option: Option<usize>,
        left: usize,
    }
    let term = smdp.terminal();
    let mut out = Vec::with_capacity(smdp.states);
    for s0 in 0..smdp.states {
        let mut total = 0.0;
        let mut stack = vec![Node { prob: 1.0, ret: 0.0, discount: 1.0, state: s0, option: None, left: h }];
        while let Some(n) = stack.pop() {
            if n.left == 0 || n.prob == 0.0 {
                total += n.prob * n.ret;
                continue;
            }
            match n.option {
                None => {
                    for (o, p) in pol.phi(n.state).into_iter().enumerate() {
                        stack.push(Node { prob: n.prob * p, option: Some(o), ..n });
                    }
                }
                Some(o) => {
                    let pi = pol.pi(o, n.state);
                    for w in 0..smdp.vocab {
                        for t in 0..smdp.states {
                            let p = pi[w] * smdp.transitions[n.state][w][t];
                            stack.push(Node {
                                prob: n.prob * p,
                                ret: n.ret + n.discount * smdp.rewards[n.state][w],
                                discount: n.discount * smdp.gamma,
                                state: t,
                                option: if w == term { None } else { Some(o) },
                                left: n.left - 1,
                            });
                        }
                    }
                }
            }
        }
        out.push(total);
    }
    Ok(out)
}

fn sample(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Monte Carlo estimate of v(s0): (mean, standard error). Infinite-horizon
/// rollouts stop once the remaining discounted reward is below 1e-12.
pub fn monte_carlo_value(smdp: &TabularSmdp, pol: &TabularPolicies, s0: usize, rollouts: usize, seed: u64) -> Result<(f64, f64)> {
    check(smdp, pol)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let term = smdp.terminal();
    let r_max = smdp.max_abs_reward();
    let phi: Vec<Vec<f64>> = (0..smdp.states).map(|s| pol.phi(s)).collect();
    let pi: Vec<Vec<Vec<f64>>> =
        (0..smdp.options).map(|o| (0..smdp.states).map(|s| pol.pi(o, s)).collect()).collect();
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..rollouts {
        let (mut s, mut ret, mut disc, mut step) = (s0, 0.0, 1.0, 0usize);
        let mut option = None;
        loop {
            match smdp.horizon {
                Some(h) if step >= h => break,
                None if disc * r_max < 1e-12 * (1.0 - smdp.gamma) => break,
                _ => {}
            }
            let o = *option.get_or_insert_with(|| sample(&phi[s], &mut rng));
            let w = sample(&pi[o][s], &mut rng);
            ret += disc * smdp.rewards[s][w];
            disc *= smdp.gamma;
            s = sample(&smdp.transitions[s][w], &mut rng);
            if w == term {
                option = None;
            }
            step += 1;
        }
        sum += ret;
        sum_sq += ret * ret;
    }
    let n = rollouts as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    Ok((mean, (var / n).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smdp::random_instance;

    #[test]
    fn finite_and_infinite_agree_in_the_limit() {
        let inst = random_instance(11, None);
        let inf = exact_value(&inst.smdp, &inst.policies).unwrap();
        let mut long = inst.smdp.clone();
        long.horizon = Some(2000);
        let fin = exact_value(&long, &inst.policies).unwrap();
        for (a, b) in inf.iter().zip(&fin) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn long_horizon_gradient_is_refused() {
        let inst = random_instance(2, Some(MAX_HORIZON + 1));
        assert!(matches!(
            objective_gradient(&inst.smdp, &inst.policies),
            Err(VerifyError::HorizonTooLarge { .. })
        ));
        assert!(enumerate_value(&inst.smdp, &inst.policies).is_err());
    }
}
