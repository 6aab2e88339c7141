//! Layers shared by the transformer and the hierarchical context blocks.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::param::{Init, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Layer-norm stabilizer.
pub const LN_EPS: f64 = 1e-6;

/// Additive score for masked attention positions. Large enough that
/// `exp(MASKED - max)` is exactly zero for any realistic score.
const MASKED: f64 = -1e9;

/// One forward (and optionally backward) pass over a model's parameters.
pub struct Ctx<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    training: bool,
    rng: Option<&'a mut ChaCha8Rng>,
    attention_log: Option<Vec<Tensor>>,
}

impl<'a> Ctx<'a> {
    /// Inference context: dropout disabled, no RNG needed.
    pub fn eval(store: &'a ParamStore) -> Self {
        Self { graph: Graph::new(), store, training: false, rng: None, attention_log: None }
    }

    pub fn train(store: &'a ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self { graph: Graph::new(), store, training: true, rng: Some(rng), attention_log: None }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Starts keeping a copy of every attention weight tensor produced.
    pub fn record_attention(&mut self) {
        self.attention_log = Some(Vec::new());
    }

    pub fn take_attention_log(&mut self) -> Vec<Tensor> {
        self.attention_log.take().unwrap_or_default()
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.graph.param(self.store, id)
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !self.training || rate == 0.0 {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Config(format!("dropout rate {rate} must be in [0, 1)")));
            }
            return Ok(x);
        }
        let rng = self
            .rng
            .as_deref_mut()
            .ok_or_else(|| Error::Config("training context without an RNG".into()))?;
        self.graph.dropout(x, rate, true, rng)
    }

    fn log_attention(&mut self, w: &Tensor) {
        if let Some(log) = &mut self.attention_log {
            log.push(w.clone());
        }
    }
}

/// `x W (+ b)` over the last axis of `x`.
pub fn affine(g: &mut Graph, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    let ws = g.shape(w).to_vec();
    if ws.len() != 2 || xs.last() != Some(&ws[0]) {
        return Err(Error::shape("affine", &xs, &ws));
    }
    let y = if xs.len() == 1 {
        let x2 = g.reshape(x, &[1, xs[0]])?;
        let y = g.matmul(x2, w)?;
        g.reshape(y, &[ws[1]])?
    } else {
        g.matmul(x, w)?
    };
    match b {
        Some(b) => g.add(y, b),
        None => Ok(y),
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), &[d_in, d_out], Init::FanIn(d_in), rng)?;
        let bias = if bias { Some(store.add(format!("{name}.bias"), &[d_out], Init::Zeros, rng)?) } else { None };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        affine(&mut ctx.graph, x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), &[d], Init::Ones, rng)?,
            bias: store.add(format!("{name}.bias"), &[d], Init::Zeros, rng)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let g = ctx.param(self.gain);
        let b = ctx.param(self.bias);
        ctx.graph.layer_norm(x, g, b, LN_EPS)
    }
}

/// Position-wise feed-forward: `relu(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
    pub dropout: f64,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, d_ff: usize, dropout: f64) -> Result<Self> {
        Ok(Self {
            inner: Linear::new(store, rng, &format!("{name}.inner"), d, d_ff, true)?,
            outer: Linear::new(store, rng, &format!("{name}.outer"), d_ff, d, true)?,
            dropout,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.inner.forward(ctx, x)?;
        let h = ctx.graph.relu(h);
        let h = ctx.dropout(h, self.dropout)?;
        self.outer.forward(ctx, h)
    }
}

/// Which keys each query may attend to.
///
/// `allowed` is `[rows, keys]` in row-major order; `rows` is either 1 (the
/// same mask for every query) or the number of queries.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    rows: usize,
    keys: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    /// Every query may see every key where `keys[i]` is true.
    pub fn keys(keys: &[bool]) -> Self {
        Self { rows: 1, keys: keys.len(), allowed: keys.to_vec() }
    }

    /// Causal self-attention mask combined with a key padding mask.
    pub fn causal(keys: &[bool]) -> Self {
        let n = keys.len();
        let allowed = (0..n).flat_map(|q| (0..n).map(move |k| k <= q)).zip(keys.iter().cycle()).map(|(c, &k)| c && k).collect();
        Self { rows: n, keys: n, allowed }
    }

    fn check(&self, queries: usize, keys: usize) -> Result<()> {
        if self.keys != keys || (self.rows != 1 && self.rows != queries) {
            return Err(Error::shape("attention_mask", &[self.rows, self.keys], &[queries, keys]));
        }
        for r in 0..self.rows {
            if !self.allowed[r * keys..(r + 1) * keys].iter().any(|&a| a) {
                return Err(Error::invalid("attention", format!("every key is masked for query row {r}")));
            }
        }
        Ok(())
    }

    fn additive(&self) -> Tensor {
        let data = self.allowed.iter().map(|&a| if a { 0.0 } else { MASKED }).collect();
        Tensor::new(vec![self.rows, self.keys], data).unwrap()
    }
}

/// Scaled dot-product attention with per-head projections and an output
/// projection.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub d_model: usize,
    pub dropout: f64,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_model: usize, heads: usize, dropout: f64) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!("d_model {d_model} is not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Linear::new(store, rng, &format!("{name}.query"), d_model, d_model, true)?,
            key: Linear::new(store, rng, &format!("{name}.key"), d_model, d_model, true)?,
            value: Linear::new(store, rng, &format!("{name}.value"), d_model, d_model, true)?,
            output: Linear::new(store, rng, &format!("{name}.output"), d_model, d_model, true)?,
            heads,
            d_model,
            dropout,
        })
    }

    /// Attends `query [.., q, d]` over `keys`/`values [.., kv, d]`.
    ///
    /// Returns the projected output `[.., q, d]` and the attention weights
    /// stacked per head as `[heads, .., q, kv]`.
    pub fn forward(&self, ctx: &mut Ctx, query: Var, keys: Var, values: Var, mask: Option<&AttentionMask>) -> Result<(Var, Tensor)> {
        let qs = ctx.graph.shape(query).to_vec();
        let ks = ctx.graph.shape(keys).to_vec();
        if qs.len() < 2 || ks.len() < 2 || qs[qs.len() - 1] != self.d_model || ks[ks.len() - 1] != self.d_model {
            return Err(Error::shape("multi_head_attention", &qs, &ks));
        }
        let (n_q, n_kv) = (qs[qs.len() - 2], ks[ks.len() - 2]);
        if n_kv == 0 {
            return Err(Error::invalid("attention", "no keys"));
        }
        let mask = match mask {
            Some(m) => {
                m.check(n_q, n_kv)?;
                Some(ctx.graph.constant(m.additive()))
            }
            None => None,
        };
        let q = self.query.forward(ctx, query)?;
        let k = self.key.forward(ctx, keys)?;
        let v = self.value.forward(ctx, values)?;
        let last = qs.len() - 1;
        let dh = self.d_model / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::new();
        let mut w_shape = Vec::new();
        for h in 0..self.heads {
            let qh = ctx.graph.slice(q, last, h * dh, (h + 1) * dh)?;
            let kh = ctx.graph.slice(k, ks.len() - 1, h * dh, (h + 1) * dh)?;
            let vh = ctx.graph.slice(v, ks.len() - 1, h * dh, (h + 1) * dh)?;
            let kt = ctx.graph.transpose(kh)?;
            let scores = ctx.graph.matmul(qh, kt)?;
            let mut scores = ctx.graph.scale(scores, scale);
            if let Some(m) = mask {
                scores = ctx.graph.add(scores, m)?;
            }
            let rank = ctx.graph.shape(scores).len();
            let w = ctx.graph.softmax(scores, rank - 1)?;
            let wv = ctx.graph.value(w);
            w_shape = wv.shape().to_vec();
            weights.extend_from_slice(wv.data());
            let w = ctx.dropout(w, self.dropout)?;
            outs.push(ctx.graph.matmul(w, vh)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { ctx.graph.concat(&outs, last)? };
        let out = self.output.forward(ctx, merged)?;
        let mut shape = vec![self.heads];
        shape.extend(w_shape);
        let weights = Tensor::new(shape, weights)?;
        ctx.log_attention(&weights);
        Ok((out, weights))
    }
}

/// Sinusoidal position table: row `t`, columns `(2i, 2i+1)` hold
/// `sin`/`cos` of `t / 10000^(2i/d_model)`.
pub fn positional_encoding(max_len: usize, d_model: usize) -> Result<Tensor> {
    if d_model % 2 != 0 {
        return Err(Error::Config(format!("positional encoding needs an even width, got {d_model}")));
    }
    let mut data = vec![0.0; max_len * d_model];
    for t in 0..max_len {
        for i in 0..d_model / 2 {
            let angle = t as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[t * d_model + 2 * i] = angle.sin();
            data[t * d_model + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![max_len, d_model], data)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn affine_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 1.0]));
        let w = g.constant(Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap());
        let y = affine(&mut g, x, w, None).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 3.0]);

        let x = g.constant(Tensor::from_rows(&[vec![1.5, -2.0]]).unwrap());
        let i = g.constant(Tensor::eye(2));
        let y = affine(&mut g, x, i, None).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let z = g.constant(Tensor::zeros(&[2, 3]));
        let y = affine(&mut g, x, z, None).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 3]);

        let bad = g.constant(Tensor::zeros(&[3, 3]));
        assert!(affine(&mut g, x, bad, None).is_err());
    }

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encoding(10, 6).unwrap();
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!((pe.row(1)[0] - 0.84147).abs() < 1e-5);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(positional_encoding(4, 5).is_err());
    }

    #[test]
    fn causal_mask_layout() {
        let m = AttentionMask::causal(&[true, true, false]);
        assert_eq!(m.allowed, vec![true, false, false, true, true, false, true, true, false]);
    }

    fn mha(heads: usize) -> (ParamStore, MultiHeadAttention) {
        let mut store = ParamStore::new();
        let m = MultiHeadAttention::new(&mut store, &mut rng(), "attn", 8, heads, 0.0).unwrap();
        (store, m)
    }

    #[test]
    fn single_key_gets_all_weight() {
        let (store, m) = mha(2);
        let mut ctx = Ctx::eval(&store);
        let q = ctx.graph.constant(Tensor::new(vec![3, 8], (0..24).map(|i| i as f64 * 0.1).collect()).unwrap());
        let kv = ctx.graph.constant(Tensor::new(vec![1, 8], (0..8).map(|i| i as f64 * -0.3).collect()).unwrap());
        let (out, w) = m.forward(&mut ctx, q, kv, kv, None).unwrap();
        assert!(w.data().iter().all(|&x| x == 1.0));
        // output is the projected value, repeated for every query
        let v = m.value.forward(&mut ctx, kv).unwrap();
        let o = m.output.forward(&mut ctx, v).unwrap();
        for r in 0..3 {
            for (a, b) in ctx.graph.value(out).row(r).iter().zip(ctx.graph.value(o).row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_keys_split_evenly() {
        let (store, m) = mha(4);
        let mut ctx = Ctx::eval(&store);
        let q = ctx.graph.constant(Tensor::new(vec![2, 8], (0..16).map(|i| (i as f64).sin()).collect()).unwrap());
        let row: Vec<f64> = (0..8).map(|i| (i as f64).cos()).collect();
        let kv = ctx.graph.constant(Tensor::from_rows(&[row.clone(), row]).unwrap());
        let (_, w) = m.forward(&mut ctx, q, kv, kv, None).unwrap();
        assert_eq!(w.shape(), &[4, 2, 2]);
        assert!(w.data().iter().all(|&x| (x - 0.5).abs() < 1e-12));
    }

    #[test]
    fn fully_masked_query_is_an_error() {
        let (store, m) = mha(1);
        let mut ctx = Ctx::eval(&store);
        let x = ctx.graph.constant(Tensor::zeros(&[2, 8]));
        let mask = AttentionMask::keys(&[false, false]);
        assert!(m.forward(&mut ctx, x, x, x, Some(&mask)).is_err());
    }

    #[test]
    fn masked_keys_get_zero_weight() {
        let (store, m) = mha(2);
        let mut ctx = Ctx::eval(&store);
        let x = ctx.graph.constant(Tensor::new(vec![3, 8], (0..24).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap());
        let mask = AttentionMask::causal(&[true, true, true]);
        let (_, w) = m.forward(&mut ctx, x, x, x, Some(&mask)).unwrap();
        for h in 0..2 {
            assert_eq!(w.data()[h * 9 + 1], 0.0);
            assert_eq!(w.data()[h * 9 + 2], 0.0);
            assert_eq!(w.data()[h * 9], 1.0);
        }
    }

    #[test]
    fn scores_use_per_head_scaling() {
        // one head over d=8: the scale is 1/sqrt(8); doubling keys doubles the
        // scores before the softmax
        let mut store = ParamStore::new();
        let m = MultiHeadAttention::new(&mut store, &mut rng(), "attn", 8, 1, 0.0).unwrap();
        for id in [m.query.weight, m.key.weight, m.value.weight, m.output.weight] {
            store.set(id, Tensor::eye(8)).unwrap();
        }
        let q: Vec<f64> = (0..8).map(|i| 0.1 * i as f64).collect();
        let keys = [vec![1.0; 8], (0..8).map(|i| (i as f64) * 0.2 - 0.5).collect::<Vec<_>>()];
        for factor in [1.0, 2.0] {
            let scaled: Vec<Vec<f64>> = keys.iter().map(|k| k.iter().map(|x| x * factor).collect()).collect();
            let mut ctx = Ctx::eval(&store);
            let qv = ctx.graph.constant(Tensor::from_rows(&[q.clone()]).unwrap());
            let kv = ctx.graph.constant(Tensor::from_rows(&scaled).unwrap());
            let (_, w) = m.forward(&mut ctx, qv, kv, kv, None).unwrap();
            let s: Vec<f64> = scaled.iter().map(|k| k.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / 8f64.sqrt()).collect();
            let z: f64 = s.iter().map(|x| x.exp()).sum();
            for (got, si) in w.data().iter().zip(&s) {
                assert!((got - si.exp() / z).abs() < 1e-12);
            }
        }
    }
}
