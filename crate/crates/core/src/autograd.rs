//! Reverse-mode differentiation over a recorded operation graph.
//!
//! Every operation appends a node holding its forward value and enough saved
//! state to run its vector-Jacobian product. [`Graph::backward`] walks the
//! nodes in reverse creation order, which is a valid topological order because
//! a node can only refer to earlier nodes.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{broadcast_index_map, broadcast_shape, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: f64 },
    Sigmoid(Var),
    Relu(Var),
    Softmax { a: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Dropout { a: Var, mask: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    Reshape(Var),
    Transpose(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, pad: usize, smoothing: f64, probs: Vec<f64>, count: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single forward pass worth of recorded operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `c[m,n] += a[m,p] * b[p,n]`.
fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, p: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for k in 0..p {
            let aik = a[i * p + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * n..(k + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
}

/// `c[m,p] += g[m,n] * b[p,n]^T`.
fn gemm_acc_bt(g: &[f64], b: &[f64], c: &mut [f64], m: usize, p: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for k in 0..p {
            let brow = &b[k * n..(k + 1) * n];
            c[i * p + k] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c[p,n] += a[m,p]^T * g[m,n]`.
fn gemm_acc_at(a: &[f64], g: &[f64], c: &mut [f64], m: usize, p: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for k in 0..p {
            let aik = a[i * p + k];
            if aik == 0.0 {
                continue;
            }
            let crow = &mut c[k * n..(k + 1) * n];
            for (cv, gv) in crow.iter_mut().zip(grow) {
                *cv += aik * gv;
            }
        }
    }
}

struct MatMulDims {
    m: usize,
    p: usize,
    n: usize,
    a_map: Vec<usize>,
    b_map: Vec<usize>,
    batch_shape: Vec<usize>,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatMulDims> {
    if a.len() < 2 || b.len() < 2 || a[a.len() - 1] != b[b.len() - 2] {
        return Err(Error::shape("matmul", a, b));
    }
    let (ab, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    let batch_shape = broadcast_shape("matmul", ab, bb).map_err(|_| Error::shape("matmul", a, b))?;
    Ok(MatMulDims {
        m: a[a.len() - 2],
        p: a[a.len() - 1],
        n: b[b.len() - 1],
        a_map: broadcast_index_map(ab, &batch_shape),
        b_map: broadcast_index_map(bb, &batch_shape),
        batch_shape,
    })
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (used by gradient checks).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// The node for a stored parameter; created once per graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = matmul_dims(self.shape(a), self.shape(b))?;
        let batches: usize = d.batch_shape.iter().product();
        let mut out = vec![0.0; batches * d.m * d.n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for bi in 0..batches {
                let ao = d.a_map[bi] * d.m * d.p;
                let bo = d.b_map[bi] * d.p * d.n;
                gemm_acc(
                    &av[ao..ao + d.m * d.p],
                    &bv[bo..bo + d.p * d.n],
                    &mut out[bi * d.m * d.n..(bi + 1) * d.m * d.n],
                    d.m,
                    d.p,
                    d.n,
                );
            }
        }
        let mut shape = d.batch_shape;
        shape.extend([d.m, d.n]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data: Vec<f64> = if sa == sb {
            av.iter().zip(bv).map(|(x, y)| f(*x, *y)).collect()
        } else {
            let shape = broadcast_shape(name, &sa, &sb)?;
            let am = broadcast_index_map(&sa, &shape);
            let bm = broadcast_index_map(&sb, &shape);
            let data = am.iter().zip(&bm).map(|(&i, &j)| f(av[i], bv[j])).collect();
            return Ok((Tensor::new(shape, data)?, self.rg(a) || self.rg(b)));
        };
        Ok((Tensor::new(sa, data)?, self.rg(a) || self.rg(b)))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub { a, b }, rg))
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * s).collect()).unwrap();
        let rg = self.rg(a);
        self.push(t, Op::Scale { a, s }, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| sigmoid(x)).collect()).unwrap();
        let rg = self.rg(a);
        self.push(t, Op::Sigmoid(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| x.max(0.0)).collect()).unwrap();
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        if len == 0 {
            return Err(Error::invalid("softmax", "empty axis"));
        }
        let x = self.value(a).data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let max = (0..len).map(|l| x[base + l * inner]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (x[base + l * inner] - max).exp();
                    out[base + l * inner] = e;
                    z += e;
                }
                for l in 0..len {
                    out[base + l * inner] /= z;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { a, axis }, rg))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias` (both shaped like the last axis).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::invalid("layer_norm", "scalar input"))?;
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gain)));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xv.len() / n.max(1);
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// Inverted dropout. Outside training, or at rate 0, returns `a` itself.
    pub fn dropout(&mut self, a: Var, rate: f64, training: bool, rng: &mut ChaCha8Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} must be in [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let v = self.value(a);
        let mask: Vec<f64> = (0..v.numel()).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().zip(&mask).map(|(x, m)| x * m).collect())?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Dropout { a, mask }, rg))
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::invalid("embedding", format!("table must be rank 2, got {shape:?}")));
        }
        let (vocab, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::invalid("embedding", format!("id {bad} outside vocabulary of {vocab}")));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(Tensor::new(vec![ids.len(), d], out)?, Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let r = shape.len();
        if r < 2 {
            return Err(Error::invalid("transpose", format!("rank {r} < 2")));
        }
        let (m, n) = (shape[r - 2], shape[r - 1]);
        let x = self.value(a).data();
        let mut out = vec![0.0; x.len()];
        for b in 0..x.len() / (m * n).max(1) {
            let o = b * m * n;
            for i in 0..m {
                for j in 0..n {
                    out[o + j * m + i] = x[o + i * n + j];
                }
            }
        }
        let mut s = shape;
        s.swap(r - 2, r - 1);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(s, out)?, Op::Transpose(a), rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let chunk = len * inner;
                out.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    /// Takes `[start, end)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(Error::invalid("slice", format!("[{start}, {end}) on axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&x[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut s = shape;
        s[axis] = end - start;
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(s, out)?, Op::Slice { a, axis, start }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(t, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::scalar(v.sum() / v.numel().max(1) as f64);
        let rg = self.rg(a);
        self.push(t, Op::Mean(a), rg)
    }

    /// Label-smoothed cross entropy, averaged over non-pad positions.
    ///
    /// The target distribution puts `1 - smoothing` on the gold token and
    /// spreads `smoothing` evenly over the other `vocab - 1` tokens. The value
    /// is the KL divergence from that distribution to `softmax(logits)`.
    pub fn cross_entropy_smoothed(&mut self, logits: Var, targets: &[usize], smoothing: f64, pad: usize) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::shape("cross_entropy", &shape, &[targets.len()]));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::invalid("cross_entropy", format!("smoothing {smoothing} outside [0, 1)")));
        }
        let vocab = shape[1];
        if vocab < 2 {
            return Err(Error::invalid("cross_entropy", "vocabulary smaller than 2"));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::invalid("cross_entropy", format!("target {bad} outside vocabulary of {vocab}")));
        }
        let count = targets.iter().filter(|&&t| t != pad).count();
        if count == 0 {
            return Err(Error::invalid("cross_entropy", "every position is padding"));
        }
        let x = self.value(logits).data();
        let on = 1.0 - smoothing;
        let off = smoothing / (vocab - 1) as f64;
        let entropy_term = |q: f64| if q > 0.0 { q * q.ln() } else { 0.0 };
        let neg_entropy = entropy_term(on) + (vocab - 1) as f64 * entropy_term(off);
        let mut probs = vec![0.0; x.len()];
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &x[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (j, &v) in row.iter().enumerate() {
                probs[r * vocab + j] = (v - lse).exp();
            }
            if t == pad {
                continue;
            }
            let mut cross = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let q = if j == t { on } else { off };
                if q > 0.0 {
                    cross -= q * (v - lse);
                }
            }
            total += neg_entropy + cross;
        }
        let loss = total / count as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("cross entropy loss".into()));
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), pad, smoothing, probs, count },
            rg,
        ))
    }

    /// Back-propagates from scalar `out`, storing gradients for every node
    /// that requires them.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.value(out).numel() != 1 {
            return Err(Error::invalid("backward", format!("output shape {:?} is not scalar", self.shape(out))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![1.0]);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of node {i}")));
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last `backward` output with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every parameter node touched by this graph.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| {
                let g = self.grad(v)?;
                Some((id, Tensor::new(self.shape(v).to_vec(), g.to_vec()).unwrap()))
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { a, b } => {
                let d = matmul_dims(self.shape(*a), self.shape(*b))?;
                let (m, p, n) = (d.m, d.p, d.n);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let batches = d.a_map.len();
                acc(*a, &mut |ga| {
                    for bi in 0..batches {
                        let (ao, bo) = (d.a_map[bi] * m * p, d.b_map[bi] * p * n);
                        gemm_acc_bt(&g[bi * m * n..(bi + 1) * m * n], &bv[bo..bo + p * n], &mut ga[ao..ao + m * p], m, p, n);
                    }
                });
                acc(*b, &mut |gb| {
                    for bi in 0..batches {
                        let (ao, bo) = (d.a_map[bi] * m * p, d.b_map[bi] * p * n);
                        gemm_acc_at(&av[ao..ao + m * p], &g[bi * m * n..(bi + 1) * m * n], &mut gb[bo..bo + p * n], m, p, n);
                    }
                });
            }
            Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                let out_shape = node.value.shape();
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let am = (sa != out_shape).then(|| broadcast_index_map(sa, out_shape));
                let bm = (sb != out_shape).then(|| broadcast_index_map(sb, out_shape));
                let idx = |m: &Option<Vec<usize>>, k: usize| m.as_ref().map_or(k, |m| m[k]);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let (ca, cb): (f64, f64) = match node.op {
                    Op::Sub { .. } => (1.0, -1.0),
                    _ => (1.0, 1.0),
                };
                let is_mul = matches!(node.op, Op::Mul { .. });
                acc(*a, &mut |ga| {
                    for (k, gk) in g.iter().enumerate() {
                        let f = if is_mul { bv[idx(&bm, k)] } else { ca };
                        ga[idx(&am, k)] += gk * f;
                    }
                });
                acc(*b, &mut |gb| {
                    for (k, gk) in g.iter().enumerate() {
                        let f = if is_mul { av[idx(&am, k)] } else { cb };
                        gb[idx(&bm, k)] += gk * f;
                    }
                });
            }
            Op::Scale { a, s } => acc(*a, &mut |ga| {
                for (x, gk) in ga.iter_mut().zip(g) {
                    *x += gk * s;
                }
            }),
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(*a, &mut |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(*a, &mut |ga| {
                    for k in 0..g.len() {
                        if x[k] > 0.0 {
                            ga[k] += g[k];
                        }
                    }
                });
            }
            Op::Softmax { a, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * len * inner + ii;
                            let dot: f64 = (0..len).map(|l| g[base + l * inner] * y[base + l * inner]).sum();
                            for l in 0..len {
                                let k = base + l * inner;
                                ga[k] += y[k] * (g[k] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let n = self.value(*gain).numel();
                let gv = self.value(*gain).data();
                let rows = rstd.len();
                acc(*gain, &mut |gg| {
                    for r in 0..rows {
                        for j in 0..n {
                            gg[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for r in 0..rows {
                        for j in 0..n {
                            gb[j] += g[r * n + j];
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    for r in 0..rows {
                        let o = r * n;
                        let dh: Vec<f64> = (0..n).map(|j| g[o + j] * gv[j]).collect();
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dh_h = (0..n).map(|j| dh[j] * xhat[o + j]).sum::<f64>() / n as f64;
                        for j in 0..n {
                            gx[o + j] += rstd[r] * (dh[j] - mean_dh - xhat[o + j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::Dropout { a, mask } => acc(*a, &mut |ga| {
                for k in 0..g.len() {
                    ga[k] += g[k] * mask[k];
                }
            }),
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |ga| {
                for (x, gk) in ga.iter_mut().zip(g) {
                    *x += gk;
                }
            }),
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let r = s.len();
                let (m, n) = (s[r - 2], s[r - 1]);
                acc(*a, &mut |ga| {
                    for b in 0..ga.len() / (m * n).max(1) {
                        let o = b * m * n;
                        for i in 0..m {
                            for j in 0..n {
                                ga[o + i * n + j] += g[o + j * m + i];
                            }
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = axis_split(out_shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    acc(v, &mut |gv| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for k in 0..len * inner {
                                gv[dst + k] += g[src + k];
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let in_shape = self.shape(*a);
                let (outer, len, inner) = axis_split(in_shape, *axis);
                let width = node.value.shape()[*axis];
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        let dst = (o * len + start) * inner;
                        let src = o * width * inner;
                        for k in 0..width * inner {
                            ga[dst + k] += g[src + k];
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| {
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }),
            Op::Mean(a) => {
                let n = self.value(*a).numel().max(1) as f64;
                acc(*a, &mut |ga| {
                    for x in ga.iter_mut() {
                        *x += g[0] / n;
                    }
                });
            }
            Op::CrossEntropy { logits, targets, pad, smoothing, probs, count } => {
                let vocab = self.shape(*logits)[1];
                let on = 1.0 - smoothing;
                let off = smoothing / (vocab - 1) as f64;
                let scale = g[0] / *count as f64;
                acc(*logits, &mut |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *pad {
                            continue;
                        }
                        for j in 0..vocab {
                            let q = if j == t { on } else { off };
                            gl[r * vocab + j] += scale * (probs[r * vocab + j] - q);
                        }
                    }
                });
            }
        }
        Ok(())
    }
}
