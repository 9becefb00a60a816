use diffcore::{Graph, ParamStore, Tensor};
use hdno::nets::{GruCell, LstmCell};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Row-major `m` (rows × cols) times `v`.
fn matvec(m: &[f64], v: &[f64]) -> Vec<f64> {
    m.chunks(v.len()).map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn draw(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()
}

fn gru_reference(store: &ParamStore, cell: &GruCell, x: &[f64], h: &[f64]) -> Vec<f64> {
    let n = cell.hidden;
    let gx: Vec<f64> = matvec(store.get(cell.wx).data(), x)
        .iter()
        .zip(store.get(cell.b).data())
        .map(|(a, b)| a + b)
        .collect();
    let gh = matvec(store.get(cell.uzr).data(), h);
    let z: Vec<f64> = (0..n).map(|i| sigmoid(gx[i] + gh[i])).collect();
    let r: Vec<f64> = (0..n).map(|i| sigmoid(gx[n + i] + gh[n + i])).collect();
    let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
    let uh = matvec(store.get(cell.uh).data(), &rh);
    (0..n)
        .map(|i| {
            let cand = (gx[2 * n + i] + uh[i]).tanh();
            (1.0 - z[i]) * h[i] + z[i] * cand
        })
        .collect()
}

fn lstm_reference(store: &ParamStore, cell: &LstmCell, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = cell.hidden;
    let xh: Vec<f64> = x.iter().chain(h).copied().collect();
    let a: Vec<f64> = matvec(store.get(cell.w).data(), &xh)
        .iter()
        .zip(store.get(cell.b).data())
        .map(|(p, q)| p + q)
        .collect();
    let mut h2 = Vec::with_capacity(n);
    let mut c2 = Vec::with_capacity(n);
    for k in 0..n {
        let (i, f, g, o) = (sigmoid(a[k]), sigmoid(a[n + k]), a[2 * n + k].tanh(), sigmoid(a[3 * n + k]));
        let cn = f * c[k] + i * g;
        c2.push(cn);
        h2.push(o * cn.tanh());
    }
    (h2, c2)
}

fn close(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
}

#[test]
fn gru_step_matches_the_gate_equations() {
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (input, hidden) = (rng.random_range(1..6), rng.random_range(1..6));
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "gru", input, hidden, &mut rng).unwrap();
        let (x, h) = (draw(&mut rng, input), draw(&mut rng, hidden));
        let mut g = Graph::new();
        let xv = g.constant(Tensor::vector(x.clone()));
        let hv = g.constant(Tensor::vector(h.clone()));
        let out = cell.step(&mut g, &store, xv, hv).unwrap();
        let expected = gru_reference(&store, &cell, &x, &h);
        assert!(close(g.value(out), &expected), "seed {seed}: {:?} vs {expected:?}", g.value(out));
    }
}

#[test]
fn lstm_step_matches_the_gate_equations() {
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (input, hidden) = (rng.random_range(1..6), rng.random_range(1..6));
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "lstm", input, hidden, &mut rng).unwrap();
        let (x, h, c) = (draw(&mut rng, input), draw(&mut rng, hidden), draw(&mut rng, hidden));
        let mut g = Graph::new();
        let xv = g.constant(Tensor::vector(x.clone()));
        let hv = g.constant(Tensor::vector(h.clone()));
        let cv = g.constant(Tensor::vector(c.clone()));
        let (h2, c2) = cell.step(&mut g, &store, xv, hv, cv).unwrap();
        let (eh, ec) = lstm_reference(&store, &cell, &x, &h, &c);
        assert!(close(g.value(h2), &eh), "seed {seed}: h");
        assert!(close(g.value(c2), &ec), "seed {seed}: c");
    }
}
