use diffcore::check::check_gradients;
use diffcore::{clip_grad_norm, Graph, Optimizer, ParamGrads, ParamStore, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn vec_strategy(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, len)
}

/// Builds a graph touching every primitive op and returns the scalar loss.
fn every_op_graph(g: &mut Graph, w: Var, x: Var, table: Var, idx: usize) -> Var {
    let h = g.matmul(w, x).unwrap(); // [3]
    let s = g.sigmoid(h).unwrap();
    let t = g.tanh(h).unwrap();
    let e = g.embedding(table, idx).unwrap(); // [3]
    let m = g.mul(s, e).unwrap();
    let a = g.add(m, t).unwrap();
    let c = g.concat(&[a, x]).unwrap(); // [5]
    let sl = g.slice(c, 1, 3).unwrap();
    let p = g.softmax(sl).unwrap();
    let lp = g.log(p).unwrap();
    let ex = g.exp(t).unwrap();
    let sq = g.square(ex).unwrap();
    let l1 = g.sum(lp).unwrap();
    let l2 = g.mean(sq).unwrap();
    let half = g.constant_scalar(0.5);
    let l2 = g.mul(half, l2).unwrap();
    g.add(l1, l2).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn every_op_matches_finite_differences(
        w in vec_strategy(6),
        x in vec_strategy(2),
        table in vec_strategy(12),
        idx in 0usize..4,
    ) {
        let mut g = Graph::new();
        let wv = g.variable(Tensor::new(vec![3, 2], w).unwrap());
        let xv = g.variable(Tensor::vector(x));
        let tv = g.variable(Tensor::new(vec![4, 3], table).unwrap());
        let loss = every_op_graph(&mut g, wv, xv, tv, idx);
        let report = check_gradients(&mut g, loss, &[wv, xv, tv]).unwrap();
        prop_assert!(report.passed(), "{:?}", report.mismatches);
    }

    #[test]
    fn matrix_matrix_and_broadcast_match_finite_differences(
        a in vec_strategy(6),
        b in vec_strategy(6),
        c in -2.0f64..2.0,
    ) {
        let mut g = Graph::new();
        let av = g.variable(Tensor::new(vec![2, 3], a).unwrap());
        let bv = g.variable(Tensor::new(vec![3, 2], b).unwrap());
        let cv = g.variable(Tensor::scalar(c));
        let ab = g.matmul(av, bv).unwrap();
        let shifted = g.add(ab, cv).unwrap();
        let scaled = g.mul(cv, shifted).unwrap();
        let t = g.tanh(scaled).unwrap();
        let loss = g.sum(t).unwrap();
        let report = check_gradients(&mut g, loss, &[av, bv, cv]).unwrap();
        prop_assert!(report.passed(), "{:?}", report.mismatches);
    }

    #[test]
    fn log_softmax_matches_log_of_softmax(x in vec_strategy(5), t in 0.05f64..2.0) {
        let mut g = Graph::new();
        let xv = g.variable(Tensor::vector(x));
        let scaled = g.scale(xv, 1.0 / t).unwrap();
        let ls = g.log_softmax(scaled).unwrap();
        let p = g.softmax(scaled).unwrap();
        for (a, b) in g.value(ls).iter().zip(g.value(p)) {
            prop_assert!((a - b.ln()).abs() < 1e-9);
        }
        let picked = g.pick(ls, 2).unwrap();
        let report = check_gradients(&mut g, picked, &[xv]).unwrap();
        prop_assert!(report.passed(), "{:?}", report.mismatches);
    }

    #[test]
    fn clipped_norm_never_exceeds_max(
        values in prop::collection::vec(-100.0f64..100.0, 1..20),
        max_norm in 1e-3f64..50.0,
    ) {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::vector(vec![0.0; values.len()])).unwrap();
        let mut grads = ParamGrads::zeros_like(&store);
        grads.set(id, values);
        clip_grad_norm(&mut grads, max_norm);
        prop_assert!(grads.global_norm() <= max_norm + 1e-12);
    }

    #[test]
    fn adam_with_zero_gradient_is_a_fixed_point(
        values in prop::collection::vec(-10.0f64..10.0, 1..8),
        steps in 1usize..20,
    ) {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::vector(values.clone())).unwrap();
        let mut grads = ParamGrads::zeros_like(&store);
        grads.set(id, vec![0.0; values.len()]);
        let mut opt = Optimizer::adam(1e-3);
        for _ in 0..steps {
            opt.step(&mut store, &grads).unwrap();
        }
        prop_assert_eq!(store.get(id).data(), values.as_slice());
    }
}

/// y = sum(tanh(W2 · sigmoid(W1 · x + b1) + b2) ⊙ v)
fn three_layer_reference(w1: &[f64], b1: &[f64], w2: &[f64], b2: &[f64], v: &[f64], x: &[f64]) -> f64 {
    let h1: Vec<f64> = (0..4)
        .map(|i| {
            let z: f64 = (0..3).map(|j| w1[i * 3 + j] * x[j]).sum::<f64>() + b1[i];
            1.0 / (1.0 + (-z).exp())
        })
        .collect();
    (0..2)
        .map(|i| {
            let z: f64 = (0..4).map(|j| w2[i * 4 + j] * h1[j]).sum::<f64>() + b2[i];
            z.tanh() * v[i]
        })
        .sum()
}

#[test]
fn random_three_layer_graph_matches_straight_line_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let (w1, b1, w2, b2, v, x) = (draw(12), draw(4), draw(8), draw(2), draw(2), draw(3));

    let build = || {
        let mut g = Graph::new();
        let w1v = g.variable(Tensor::new(vec![4, 3], w1.clone()).unwrap());
        let b1v = g.variable(Tensor::vector(b1.clone()));
        let w2v = g.variable(Tensor::new(vec![2, 4], w2.clone()).unwrap());
        let b2v = g.variable(Tensor::vector(b2.clone()));
        let vv = g.constant_vec(v.clone());
        let xv = g.constant_vec(x.clone());
        let l1 = g.linear(w1v, xv, b1v).unwrap();
        let h1 = g.sigmoid(l1).unwrap();
        let l2 = g.linear(w2v, h1, b2v).unwrap();
        let h2 = g.tanh(l2).unwrap();
        let y = g.dot(h2, vv).unwrap();
        (g, y, [w1v, b1v, w2v, b2v])
    };

    let (mut g, y, leaves) = build();
    let expected = three_layer_reference(&w1, &b1, &w2, &b2, &v, &x);
    let got = g.forward(y).unwrap();
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");

    let (mut g2, y2, _) = build();
    assert_eq!(g2.forward(y2).unwrap().to_bits(), got.to_bits());

    let report = check_gradients(&mut g, y, &leaves).unwrap();
    assert!(report.passed(), "{:?}", report.mismatches);
}

#[test]
fn adam_converges_on_a_quadratic() {
    let mut store = ParamStore::new();
    let id = store.add("p", Tensor::scalar(0.0)).unwrap();
    let mut opt = Optimizer::adam(0.3);
    for _ in 0..100 {
        let mut g = Graph::new();
        let p = g.param(&store, id);
        let five = g.constant_scalar(5.0);
        let d = g.sub(p, five).unwrap();
        let loss = g.square(d).unwrap();
        let grads = g.backward(loss).unwrap().param_grads(store.len());
        opt.step(&mut store, &grads).unwrap();
    }
    let p = store.get(id).data()[0];
    assert!((p - 5.0).abs() < 0.1, "p = {p}");
}

#[test]
fn sgd_zero_gradient_leaves_params() {
    let mut store = ParamStore::new();
    let id = store.add("p", Tensor::vector(vec![1.0, -2.0])).unwrap();
    let mut grads = ParamGrads::zeros_like(&store);
    grads.set(id, vec![0.0, 0.0]);
    Optimizer::sgd(0.5).step(&mut store, &grads).unwrap();
    assert_eq!(store.get(id).data(), &[1.0, -2.0]);
}
