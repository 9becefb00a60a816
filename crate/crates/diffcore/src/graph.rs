//! Define-by-run computation graph.
//!
//! Every op is evaluated as soon as it is recorded, so model code can branch
//! on intermediate values (sampling, greedy decoding). The recorded tape can
//! be replayed with [`Graph::forward`] after leaves are overwritten with
//! [`Graph::set_leaf`], which is what the finite-difference checker relies on.
//!
//! Vectors are 1-D tensors, scalars have shape `[1]`. `add` and `mul`
//! broadcast a `[1]` operand against any shape.

use std::collections::HashMap;

use crate::error::{shape_err, DiffError, Result};
use crate::tensor::{ParamGrads, ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Concat(Vec<Var>),
    Slice { src: Var, start: usize, len: usize },
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Softmax(Var),
    Embedding { table: Var, index: usize },
    Sum(Var),
    Mean(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Square(..) => "square",
            Op::Softmax(..) => "softmax",
            Op::Embedding { .. } => "embedding",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Concat(parts) => parts.clone(),
            Op::Slice { src, .. } => vec![*src],
            Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Square(x)
            | Op::Softmax(x)
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::Embedding { table, .. } => vec![*table],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// A reverse-mode tape. Nodes are stored in topological (insertion) order.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    stale: bool,
}

/// Result of a backward pass: gradients of every leaf that requires grad.
#[derive(Debug, Clone)]
pub struct Gradients {
    leaves: HashMap<Var, Vec<f64>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.leaves.get(&var).map(Vec::as_slice)
    }

    /// Collects the gradients of parameter leaves into a `ParamGrads`.
    pub fn param_grads(&self, num_params: usize) -> ParamGrads {
        let mut out = ParamGrads::with_len(num_params);
        for &(id, var) in &self.params {
            if let Some(g) = self.leaves.get(&var) {
                out.accumulate(id, g);
            }
        }
        out
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..chunks {
        let i = c * 4;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..n {
        tail += a[i] * b[i];
    }
    (s0 + s1) + (s2 + s3) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &[f64] {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        &self.nodes[var.0].shape
    }

    /// Value of a `[1]`-shaped node.
    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value[0]
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push_leaf(&mut self, tensor: Tensor, requires_grad: bool, param: Option<ParamId>) -> Var {
        let shape = tensor.shape().to_vec();
        let value = tensor.into_data();
        self.nodes.push(Node {
            op: Op::Leaf,
            shape,
            value,
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf; never receives gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push_leaf(tensor, false, None)
    }

    pub fn constant_vec(&mut self, data: Vec<f64>) -> Var {
        self.constant(Tensor::vector(data))
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// A free leaf that receives gradient (inputs under test, ad-hoc variables).
    pub fn variable(&mut self, tensor: Tensor) -> Var {
        self.push_leaf(tensor, true, None)
    }

    /// Brings a stored parameter into the graph, once per graph. Frozen
    /// parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&var) = self.params.get(&id) {
            return var;
        }
        let tensor = store.get(id).clone();
        let var = self.push_leaf(tensor, !store.is_frozen(id), Some(id));
        self.params.insert(id, var);
        var
    }

    /// Parameter leaves registered so far.
    pub fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&id, &var)| (id, var))
    }

    /// Overwrites a leaf's value. The graph must be re-run with
    /// [`Graph::forward`] before another backward pass.
    pub fn set_leaf(&mut self, var: Var, data: &[f64]) -> Result<()> {
        let node = &mut self.nodes[var.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(DiffError::State(format!("node {} is not a leaf", var.0)));
        }
        if node.value.len() != data.len() {
            return shape_err(
                "set_leaf",
                format!("expected {} values, got {}", node.value.len(), data.len()),
            );
        }
        node.value.copy_from_slice(data);
        self.stale = true;
        Ok(())
    }

    fn evaluate(&self, op: &Op) -> Result<(Vec<usize>, Vec<f64>)> {
        let node = |v: &Var| &self.nodes[v.0];
        Ok(match op {
            Op::Leaf => unreachable!("leaves are not evaluated"),
            Op::MatMul(a, b) => {
                let (a, b) = (node(a), node(b));
                if a.shape.len() != 2 {
                    return shape_err("matmul", format!("left operand must be 2-D, got {:?}", a.shape));
                }
                let (m, k) = (a.shape[0], a.shape[1]);
                match b.shape.as_slice() {
                    [kb] if *kb == k => {
                        let out = (0..m).map(|i| dot(&a.value[i * k..(i + 1) * k], &b.value)).collect();
                        (vec![m], out)
                    }
                    [kb, n] if *kb == k => {
                        let n = *n;
                        let mut out = vec![0.0; m * n];
                        for i in 0..m {
                            let row = &mut out[i * n..(i + 1) * n];
                            for p in 0..k {
                                axpy(a.value[i * k + p], &b.value[p * n..(p + 1) * n], row);
                            }
                        }
                        (vec![m, n], out)
                    }
                    _ => {
                        return shape_err("matmul", format!("{:?} x {:?}", a.shape, b.shape));
                    }
                }
            }
            Op::Add(a, b) | Op::Mul(a, b) => {
                let (a, b) = (node(a), node(b));
                let f: fn(f64, f64) -> f64 = if matches!(op, Op::Add(..)) {
                    |x, y| x + y
                } else {
                    |x, y| x * y
                };
                if a.shape == b.shape {
                    let out = a.value.iter().zip(&b.value).map(|(&x, &y)| f(x, y)).collect();
                    (a.shape.clone(), out)
                } else if a.value.len() == 1 {
                    let x = a.value[0];
                    (b.shape.clone(), b.value.iter().map(|&y| f(x, y)).collect())
                } else if b.value.len() == 1 {
                    let y = b.value[0];
                    (a.shape.clone(), a.value.iter().map(|&x| f(x, y)).collect())
                } else {
                    return shape_err(op.name(), format!("{:?} vs {:?}", a.shape, b.shape));
                }
            }
            Op::Concat(parts) => {
                if parts.is_empty() {
                    return shape_err("concat", "no inputs");
                }
                let mut out = Vec::new();
                for p in parts {
                    let p = node(p);
                    if p.shape.len() != 1 {
                        return shape_err("concat", format!("inputs must be 1-D, got {:?}", p.shape));
                    }
                    out.extend_from_slice(&p.value);
                }
                (vec![out.len()], out)
            }
            Op::Slice { src, start, len } => {
                let s = node(src);
                if s.shape.len() != 1 || *len == 0 || start + len > s.value.len() {
                    return shape_err(
                        "slice",
                        format!("[{start}, {}) of {:?}", start + len, s.shape),
                    );
                }
                (vec![*len], s.value[*start..start + len].to_vec())
            }
            Op::Sigmoid(x) => {
                let x = node(x);
                (x.shape.clone(), x.value.iter().map(|&v| sigmoid(v)).collect())
            }
            Op::Tanh(x) => {
                let x = node(x);
                (x.shape.clone(), x.value.iter().map(|v| v.tanh()).collect())
            }
            Op::Exp(x) => {
                let x = node(x);
                (x.shape.clone(), x.value.iter().map(|v| v.exp()).collect())
            }
            Op::Log(x) => {
                let x = node(x);
                (x.shape.clone(), x.value.iter().map(|v| v.ln()).collect())
            }
            Op::Square(x) => {
                let x = node(x);
                (x.shape.clone(), x.value.iter().map(|v| v * v).collect())
            }
            Op::Softmax(x) => {
                let x = node(x);
                if x.shape.len() != 1 {
                    return shape_err("softmax", format!("input must be 1-D, got {:?}", x.shape));
                }
                (x.shape.clone(), softmax(&x.value))
            }
            Op::Embedding { table, index } => {
                let t = node(table);
                if t.shape.len() != 2 {
                    return shape_err("embedding", format!("table must be 2-D, got {:?}", t.shape));
                }
                let (rows, cols) = (t.shape[0], t.shape[1]);
                if *index >= rows {
                    return Err(DiffError::Index {
                        what: "embedding table",
                        index: *index,
                        size: rows,
                    });
                }
                (vec![cols], t.value[index * cols..(index + 1) * cols].to_vec())
            }
            Op::Sum(x) => (vec![1], vec![node(x).value.iter().sum()]),
            Op::Mean(x) => {
                let x = node(x);
                (vec![1], vec![x.value.iter().sum::<f64>() / x.value.len() as f64])
            }
        })
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let (shape, value) = self.evaluate(&op)?;
        let id = self.nodes.len();
        if value.iter().any(|v| !v.is_finite()) {
            return Err(DiffError::NonFinite { node: id, op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
            param: None,
        });
        Ok(Var(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        self.push(Op::Slice { src, start, len })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Log(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Square(x))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Softmax(x))
    }

    pub fn embedding(&mut self, table: Var, index: usize) -> Result<Var> {
        self.push(Op::Embedding { table, index })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Mean(x))
    }

    // Composites built from the primitive set.

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let c = self.constant_scalar(factor);
        self.mul(x, c)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    /// `w · x + b`.
    pub fn linear(&mut self, w: Var, x: Var, b: Var) -> Result<Var> {
        let wx = self.matmul(w, x)?;
        self.add(wx, b)
    }

    /// Element `i` of a vector as a `[1]` node.
    pub fn pick(&mut self, x: Var, i: usize) -> Result<Var> {
        self.slice(x, i, 1)
    }

    /// Numerically stable log-softmax: `x − m − ln Σ exp(x − m)` where `m`
    /// is the current maximum, entered as a constant.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let max = self.value(x).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let shift = self.constant_scalar(-max);
        let shifted = self.add(x, shift)?;
        let e = self.exp(shifted)?;
        let total = self.sum(e)?;
        let lse = self.log(total)?;
        let neg = self.scale(lse, -1.0)?;
        self.add(shifted, neg)
    }

    /// Sums a non-empty list of same-shaped nodes left to right.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| DiffError::Shape { op: "add_all", detail: "no terms".into() })?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Re-evaluates every non-leaf node from the current leaf values and
    /// returns the value of the scalar `output`.
    pub fn forward(&mut self, output: Var) -> Result<f64> {
        self.recompute()?;
        let node = &self.nodes[output.0];
        if node.value.len() != 1 {
            return shape_err("forward", format!("output must be scalar, got {:?}", node.shape));
        }
        Ok(node.value[0])
    }

    /// Replays the whole tape.
    pub fn recompute(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let (_, value) = self.evaluate(&op)?;
            if value.iter().any(|v| !v.is_finite()) {
                return Err(DiffError::NonFinite { node: i, op: op.name() });
            }
            self.nodes[i].value = value;
        }
        self.stale = false;
        Ok(())
    }

    /// Gradient of the scalar `output` with respect to every leaf that
    /// requires grad. Each node reachable from `output` is visited once, in
    /// reverse insertion order.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.stale {
            return Err(DiffError::State(
                "leaves changed since the last forward pass".into(),
            ));
        }
        let out = &self.nodes[output.0];
        if out.value.len() != 1 {
            return shape_err("backward", format!("output must be scalar, got {:?}", out.shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        let mut leaves = HashMap::new();

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                leaves.insert(Var(i), g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }

        let params = self
            .params
            .iter()
            .map(|(&id, &var)| (id, var))
            .collect();
        Ok(Gradients { leaves, params })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0], &nodes[b.0]);
                let (m, k) = (av.shape[0], av.shape[1]);
                if bv.shape.len() == 1 {
                    if wants(*a) {
                        let ga = slot(grads, *a, m * k);
                        for i in 0..m {
                            axpy(g[i], &bv.value, &mut ga[i * k..(i + 1) * k]);
                        }
                    }
                    if wants(*b) {
                        let gb = slot(grads, *b, k);
                        for i in 0..m {
                            axpy(g[i], &av.value[i * k..(i + 1) * k], gb);
                        }
                    }
                } else {
                    let n = bv.shape[1];
                    if wants(*a) {
                        let ga = slot(grads, *a, m * k);
                        for i in 0..m {
                            for p in 0..k {
                                ga[i * k + p] += dot(&g[i * n..(i + 1) * n], &bv.value[p * n..(p + 1) * n]);
                            }
                        }
                    }
                    if wants(*b) {
                        let gb = slot(grads, *b, k * n);
                        for i in 0..m {
                            for p in 0..k {
                                axpy(av.value[i * k + p], &g[i * n..(i + 1) * n], &mut gb[p * n..(p + 1) * n]);
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if !wants(v) {
                        continue;
                    }
                    let len = nodes[v.0].value.len();
                    let gv = slot(grads, v, len);
                    if len == g.len() {
                        axpy(1.0, g, gv);
                    } else {
                        gv[0] += g.iter().sum::<f64>();
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if !wants(v) {
                        continue;
                    }
                    let len = nodes[v.0].value.len();
                    let ov = &nodes[other.0].value;
                    let gv = slot(grads, v, len);
                    if len == g.len() {
                        if ov.len() == g.len() {
                            for ((gi, &gg), &o) in gv.iter_mut().zip(g).zip(ov) {
                                *gi += gg * o;
                            }
                        } else {
                            axpy(ov[0], g, gv);
                        }
                    } else {
                        gv[0] += dot(g, ov);
                    }
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    if wants(p) {
                        axpy(1.0, &g[offset..offset + len], slot(grads, p, len));
                    }
                    offset += len;
                }
            }
            Op::Slice { src, start, len } => {
                if wants(*src) {
                    let total = nodes[src.0].value.len();
                    axpy(1.0, g, &mut slot(grads, *src, total)[*start..start + len]);
                }
            }
            Op::Sigmoid(x) | Op::Tanh(x) | Op::Exp(x) | Op::Log(x) | Op::Square(x) => {
                if !wants(*x) {
                    return;
                }
                let xv = &nodes[x.0].value;
                let y = &node.value;
                let gx = slot(grads, *x, xv.len());
                match node.op {
                    Op::Sigmoid(_) => {
                        for i in 0..gx.len() {
                            gx[i] += g[i] * y[i] * (1.0 - y[i]);
                        }
                    }
                    Op::Tanh(_) => {
                        for i in 0..gx.len() {
                            gx[i] += g[i] * (1.0 - y[i] * y[i]);
                        }
                    }
                    Op::Exp(_) => {
                        for i in 0..gx.len() {
                            gx[i] += g[i] * y[i];
                        }
                    }
                    Op::Log(_) => {
                        for i in 0..gx.len() {
                            gx[i] += g[i] / xv[i];
                        }
                    }
                    Op::Square(_) => {
                        for i in 0..gx.len() {
                            gx[i] += 2.0 * xv[i] * g[i];
                        }
                    }
                    _ => unreachable!(),
                }
            }
            Op::Softmax(x) => {
                if wants(*x) {
                    let y = &node.value;
                    let inner = dot(g, y);
                    let gx = slot(grads, *x, y.len());
                    for i in 0..y.len() {
                        gx[i] += y[i] * (g[i] - inner);
                    }
                }
            }
            Op::Embedding { table, index } => {
                if wants(*table) {
                    let t = &nodes[table.0];
                    let cols = t.shape[1];
                    let gt = slot(grads, *table, t.value.len());
                    axpy(1.0, g, &mut gt[index * cols..(index + 1) * cols]);
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                if wants(*x) {
                    let len = nodes[x.0].value.len();
                    let scale = if matches!(node.op, Op::Mean(_)) {
                        g[0] / len as f64
                    } else {
                        g[0]
                    };
                    for v in slot(grads, *x, len).iter_mut() {
                        *v += scale;
                    }
                }
            }
        }
    }

    /// Parameter the leaf `var` was created from, if any.
    pub fn param_of(&self, var: Var) -> Option<ParamId> {
        self.nodes[var.0].param
    }
}

/// Max-subtracted softmax over a slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
