//! Recurrent building blocks over `diffcore` graphs.
//!
//! Cell conventions (σ = logistic sigmoid, ⊙ = elementwise product):
//!
//! GRU, with stacked weights `wx: [3H, in]`, `uzr: [2H, H]`, `uh: [H, H]`,
//! `b: [3H]` (rows ordered update, reset, candidate):
//!   z  = σ(Wz x + Uz h + bz)
//!   r  = σ(Wr x + Ur h + br)
//!   h̃  = tanh(Wh x + Uh (r ⊙ h) + bh)
//!   h' = (1 − z) ⊙ h + z ⊙ h̃
//!
//! LSTM, with `w: [4H, in + H]` applied to `[x; h]` and `b: [4H]` (rows
//! ordered input, forget, candidate, output):
//!   i = σ(·), f = σ(·), g = tanh(·), o = σ(·)
//!   c' = f ⊙ c + i ⊙ g
//!   h' = o ⊙ tanh(c')
//!
//! Every weight matrix is initialised uniform(±1/√fan_in).

use diffcore::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

use crate::error::{invalid, HdnoError, Result};

fn init(store: &mut ParamStore, name: String, shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Result<ParamId> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Ok(store.add(name, Tensor::uniform(shape, bound, rng)?)?)
}

fn check_len(g: &Graph, v: Var, expected: usize, what: &str) -> Result<()> {
    let got = g.value(v).len();
    if got != expected {
        return invalid(format!("{what}: expected length {expected}, got {got}"));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            w: init(store, format!("{name}.w"), vec![output, input], input, rng)?,
            b: init(store, format!("{name}.b"), vec![output], input, rng)?,
            input,
            output,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        check_len(g, x, self.input, "linear input")?;
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        Ok(g.linear(w, x, b)?)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }
}

#[derive(Debug, Clone)]
pub struct GruCell {
    pub wx: ParamId,
    pub uzr: ParamId,
    pub uh: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            wx: init(store, format!("{name}.wx"), vec![3 * hidden, input], input, rng)?,
            uzr: init(store, format!("{name}.uzr"), vec![2 * hidden, hidden], hidden, rng)?,
            uh: init(store, format!("{name}.uh"), vec![hidden, hidden], hidden, rng)?,
            b: init(store, format!("{name}.b"), vec![3 * hidden], input, rng)?,
            input,
            hidden,
        })
    }

    pub fn step(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        check_len(g, x, self.input, "gru input")?;
        check_len(g, h, self.hidden, "gru state")?;
        let n = self.hidden;
        let (wx, uzr, uh, b) = (
            g.param(store, self.wx),
            g.param(store, self.uzr),
            g.param(store, self.uh),
            g.param(store, self.b),
        );
        let gx = g.linear(wx, x, b)?;
        let gh = g.matmul(uzr, h)?;
        let zx = g.slice(gx, 0, n)?;
        let zh = g.slice(gh, 0, n)?;
        let za = g.add(zx, zh)?;
        let z = g.sigmoid(za)?;
        let rx = g.slice(gx, n, n)?;
        let rh = g.slice(gh, n, n)?;
        let ra = g.add(rx, rh)?;
        let r = g.sigmoid(ra)?;
        let r_h = g.mul(r, h)?;
        let ch = g.matmul(uh, r_h)?;
        let cx = g.slice(gx, 2 * n, n)?;
        let ca = g.add(cx, ch)?;
        let cand = g.tanh(ca)?;
        // (1 − z) ⊙ h + z ⊙ h̃  =  h + z ⊙ (h̃ − h)
        let diff = g.sub(cand, h)?;
        let gated = g.mul(z, diff)?;
        Ok(g.add(h, gated)?)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.wx, self.uzr, self.uh, self.b]
    }
}

#[derive(Debug, Clone)]
pub struct LstmCell {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            w: init(store, format!("{name}.w"), vec![4 * hidden, input + hidden], input + hidden, rng)?,
            b: init(store, format!("{name}.b"), vec![4 * hidden], input + hidden, rng)?,
            input,
            hidden,
        })
    }

    /// Returns `(h', c')`.
    pub fn step(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        check_len(g, x, self.input, "lstm input")?;
        check_len(g, h, self.hidden, "lstm state")?;
        check_len(g, c, self.hidden, "lstm cell")?;
        let n = self.hidden;
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let xh = g.concat(&[x, h])?;
        let gates = g.linear(w, xh, b)?;
        let ia = g.slice(gates, 0, n)?;
        let i = g.sigmoid(ia)?;
        let fa = g.slice(gates, n, n)?;
        let f = g.sigmoid(fa)?;
        let ga = g.slice(gates, 2 * n, n)?;
        let cand = g.tanh(ga)?;
        let oa = g.slice(gates, 3 * n, n)?;
        let o = g.sigmoid(oa)?;
        let fc = g.mul(f, c)?;
        let ic = g.mul(i, cand)?;
        let c_new = g.add(fc, ic)?;
        let tc = g.tanh(c_new)?;
        let h_new = g.mul(o, tc)?;
        Ok((h_new, c_new))
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, vocab: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self { table: init(store, format!("{name}.table"), vec![vocab, dim], dim, rng)?, vocab, dim })
    }

    pub fn lookup(&self, g: &mut Graph, store: &ParamStore, id: usize) -> Result<Var> {
        if id >= self.vocab {
            return Err(HdnoError::Unknown { what: "token id", name: id.to_string() });
        }
        let t = g.param(store, self.table);
        Ok(g.embedding(t, id)?)
    }
}

/// Output of [`Encoder::encode`].
#[derive(Debug, Clone)]
pub struct Encoding {
    pub vector: Var,
    pub attention: Vec<f64>,
}

/// Bidirectional GRU over token embeddings with dot-product attention
/// against a learned global query over the concatenated states.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub embed: Embedding,
    pub fwd: GruCell,
    pub bwd: GruCell,
    pub query: ParamId,
    pub hidden: usize,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, name: &str, vocab: usize, embed: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            embed: Embedding::new(store, &format!("{name}.embed"), vocab, embed, rng)?,
            fwd: GruCell::new(store, &format!("{name}.fwd"), embed, hidden, rng)?,
            bwd: GruCell::new(store, &format!("{name}.bwd"), embed, hidden, rng)?,
            query: init(store, format!("{name}.query"), vec![2 * hidden], 2 * hidden, rng)?,
            hidden,
        })
    }

    pub fn output_len(&self) -> usize {
        2 * self.hidden
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, tokens: &[usize]) -> Result<Encoding> {
        if tokens.is_empty() {
            return invalid("cannot encode an empty utterance");
        }
        let xs: Vec<Var> = tokens
            .iter()
            .map(|&t| self.embed.lookup(g, store, t))
            .collect::<Result<_>>()?;
        let zero = g.constant(Tensor::zeros(vec![self.hidden])?);
        let mut fwd = Vec::with_capacity(xs.len());
        let mut h = zero;
        for &x in &xs {
            h = self.fwd.step(g, store, x, h)?;
            fwd.push(h);
        }
        let mut bwd = vec![zero; xs.len()];
        let mut h = zero;
        for (i, &x) in xs.iter().enumerate().rev() {
            h = self.bwd.step(g, store, x, h)?;
            bwd[i] = h;
        }
        let q = g.param(store, self.query);
        let mut states = Vec::with_capacity(xs.len());
        let mut scores = Vec::with_capacity(xs.len());
        for (f, b) in fwd.into_iter().zip(bwd) {
            let s = g.concat(&[f, b])?;
            scores.push(g.dot(q, s)?);
            states.push(s);
        }
        let scores = g.concat(&scores)?;
        let weights = g.softmax(scores)?;
        let mut terms = Vec::with_capacity(states.len());
        for (i, &s) in states.iter().enumerate() {
            let w = g.pick(weights, i)?;
            terms.push(g.mul(w, s)?);
        }
        let vector = g.add_all(&terms)?;
        Ok(Encoding { vector, attention: g.value(weights).to_vec() })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.embed.table, self.query];
        p.extend(self.fwd.params());
        p.extend(self.bwd.params());
        p
    }
}

/// Linear map from a context to the mean and log-variance of a diagonal
/// Gaussian over latent acts.
#[derive(Debug, Clone)]
pub struct GaussianHead {
    pub linear: Linear,
    pub latent: usize,
}

impl GaussianHead {
    pub fn new(store: &mut ParamStore, name: &str, context: usize, latent: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self { linear: Linear::new(store, name, context, 2 * latent, rng)?, latent })
    }

    /// Returns `(μ, logvar)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, c: Var) -> Result<(Var, Var)> {
        let out = self.linear.forward(g, store, c)?;
        let mu = g.slice(out, 0, self.latent)?;
        let logvar = g.slice(out, self.latent, self.latent)?;
        Ok((mu, logvar))
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.linear.params()
    }
}

/// `softmax(logits / T)` on plain values, max-subtracted.
pub fn softmax_temperature(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return invalid(format!("temperature must be positive, got {temperature}"));
    }
    if temperature == 1.0 {
        return Ok(diffcore::softmax(logits));
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    Ok(diffcore::softmax(&scaled))
}

/// Graph version of [`softmax_temperature`] returning log-probabilities.
pub fn log_softmax_temperature(g: &mut Graph, logits: Var, temperature: f64) -> Result<Var> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return invalid(format!("temperature must be positive, got {temperature}"));
    }
    let scaled = if temperature == 1.0 { logits } else { g.scale(logits, 1.0 / temperature)? };
    Ok(g.log_softmax(scaled)?)
}

/// Inverted dropout: zeroes entries with probability `rate` and rescales the
/// rest by 1/(1 − rate). Identity when `rate` is 0.
pub fn dropout(g: &mut Graph, x: Var, rate: f64, rng: &mut impl Rng) -> Result<Var> {
    if rate <= 0.0 {
        return Ok(x);
    }
    if rate >= 1.0 {
        return invalid(format!("dropout rate must be below 1, got {rate}"));
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..g.value(x).len())
        .map(|_| if rng.random_bool(rate) { 0.0 } else { keep })
        .collect();
    let m = g.constant_vec(mask);
    Ok(g.mul(x, m)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_all(store: &mut ParamStore) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.get_mut(id).data_mut().fill(0.0);
        }
    }

    #[test]
    fn zero_gru_halves_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "gru", 2, 3, &mut rng).unwrap();
        zero_all(&mut store);
        let mut g = Graph::new();
        let x = g.constant_vec(vec![0.7, -1.0]);
        let h = g.constant_vec(vec![1.0, -2.0, 0.5]);
        let out = cell.step(&mut g, &store, x, h).unwrap();
        assert_eq!(g.value(out), &[0.5, -1.0, 0.25]);
        let h0 = g.constant_vec(vec![0.0; 3]);
        let out = cell.step(&mut g, &store, x, h0).unwrap();
        assert_eq!(g.value(out), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_lstm_halves_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "lstm", 2, 2, &mut rng).unwrap();
        zero_all(&mut store);
        let mut g = Graph::new();
        let x = g.constant_vec(vec![0.3, 0.1]);
        let h = g.constant_vec(vec![0.0, 0.0]);
        let c = g.constant_vec(vec![2.0, -1.0]);
        let (h2, c2) = cell.step(&mut g, &store, x, h, c).unwrap();
        assert_eq!(g.value(c2), &[1.0, -0.5]);
        assert_eq!(g.value(h2), &[0.5 * 1f64.tanh(), 0.5 * (-0.5f64).tanh()]);
    }

    #[test]
    fn temperature_softmax() {
        assert_eq!(softmax_temperature(&[0.0, 0.0], 1.0).unwrap(), vec![0.5, 0.5]);
        let p = softmax_temperature(&[1.0, 0.0], 0.1).unwrap();
        assert!(p[0] > 0.9999);
        assert!(softmax_temperature(&[1.0], 0.0).is_err());
        let l = [0.3, -1.2, 2.0];
        assert_eq!(softmax_temperature(&l, 1.0).unwrap(), diffcore::softmax(&l));
    }

    #[test]
    fn encoder_rejects_empty_and_unknown() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "enc", 5, 3, 4, &mut rng).unwrap();
        let mut g = Graph::new();
        assert!(enc.encode(&mut g, &store, &[]).is_err());
        assert!(enc.encode(&mut g, &store, &[1, 9]).is_err());
        let e = enc.encode(&mut g, &store, &[2]).unwrap();
        assert_eq!(e.attention, vec![1.0]);
    }
}
