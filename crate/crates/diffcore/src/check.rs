//! Central finite-difference gradient checking.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub leaf: Var,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// Largest relative error among entries of magnitude ≥ abs / rel, where
    /// the relative tolerance is the one that applies.
    pub max_binding_rel_err: f64,
    pub mismatches: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// True when `a` and `b` agree within `rel` relative error, or within `abs`
/// absolute error for values near zero.
pub fn grads_agree(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    let diff = (a - b).abs();
    diff <= abs || diff <= rel * a.abs().max(b.abs())
}

/// Compares the backward-pass gradient of `output` with respect to each of
/// `leaves` against central differences. The graph is left with its
/// original leaf values and re-evaluated.
pub fn check_gradients(graph: &mut Graph, output: Var, leaves: &[Var]) -> Result<GradCheckReport> {
    check_gradients_with(graph, output, leaves, FD_STEP, FD_REL_TOL, FD_ABS_TOL)
}

pub fn check_gradients_with(
    graph: &mut Graph,
    output: Var,
    leaves: &[Var],
    h: f64,
    rel: f64,
    abs: f64,
) -> Result<GradCheckReport> {
    graph.forward(output)?;
    let grads = graph.backward(output)?;
    let mut report = GradCheckReport::default();
    for &leaf in leaves {
        let original = graph.value(leaf).to_vec();
        let analytic = grads
            .wrt(leaf)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; original.len()]);
        let mut probe = original.clone();
        for i in 0..original.len() {
            probe[i] = original[i] + h;
            graph.set_leaf(leaf, &probe)?;
            let up = graph.forward(output)?;
            probe[i] = original[i] - h;
            graph.set_leaf(leaf, &probe)?;
            let down = graph.forward(output)?;
            probe[i] = original[i];
            let numeric = (up - down) / (2.0 * h);

            let a = analytic[i];
            let diff = (a - numeric).abs();
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(diff);
            let scale = a.abs().max(numeric.abs());
            if scale > 0.0 {
                report.max_rel_err = report.max_rel_err.max(diff / scale);
                if scale * rel >= abs {
                    report.max_binding_rel_err = report.max_binding_rel_err.max(diff / scale);
                }
            }
            if !grads_agree(a, numeric, rel, abs) {
                report.mismatches.push(Mismatch {
                    leaf,
                    element: i,
                    analytic: a,
                    numeric,
                });
            }
        }
        graph.set_leaf(leaf, &original)?;
    }
    graph.forward(output)?;
    Ok(report)
}

/// One randomized check over a graph that uses every primitive op and every
/// composite helper, with inputs drawn uniformly from [−2, 2].
pub fn op_trial(rng: &mut impl Rng) -> Result<GradCheckReport> {
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-2.0..2.0)).collect() };
    let (wv, xv, tv, bv, mv) = (draw(6), draw(2), draw(12), draw(3), draw(6));
    let (sv, idx, pick) = (draw(1)[0], (draw(1)[0].abs() * 1.99) as usize, (draw(1)[0].abs() * 1.49) as usize);
    let mut g = Graph::new();
    let w = g.variable(Tensor::new(vec![3, 2], wv)?);
    let x = g.variable(Tensor::vector(xv));
    let table = g.variable(Tensor::new(vec![4, 3], tv)?);
    let b = g.variable(Tensor::vector(bv));
    let m = g.variable(Tensor::new(vec![2, 3], mv)?);
    let s = g.variable(Tensor::scalar(sv));

    let h = g.linear(w, x, b)?; // [3]
    let sig = g.sigmoid(h)?;
    let th = g.tanh(h)?;
    let e = g.embedding(table, idx)?;
    let prod = g.mul(sig, e)?;
    let sum = g.add(prod, th)?;
    let cat = g.concat(&[sum, x])?; // [5]
    let sl = g.slice(cat, 1, 3)?;
    let p = g.softmax(sl)?;
    let lp = g.log(p)?;
    let ex = g.exp(th)?;
    let sq = g.square(ex)?;
    let l1 = g.sum(lp)?;
    let l2 = g.mean(sq)?;
    let mw = g.matmul(m, w)?; // [2, 2], matrix-matrix
    let shifted = g.add(mw, s)?; // scalar broadcast
    let l3 = g.sum(shifted)?;
    let lsm = g.log_softmax(cat)?;
    let l4 = g.pick(lsm, pick)?;
    let d = g.dot(sig, th)?;
    let diff = g.sub(d, s)?;
    let l5 = g.scale(diff, 0.3)?;
    let out = g.add_all(&[l1, l2, l3, l4, l5])?;
    check_gradients(&mut g, out, &[w, x, table, b, m, s])
}
