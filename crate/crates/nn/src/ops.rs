//! Forward kernels.
//!
//! Each kernel computes an output row from its input row(s) with a fixed
//! operation order, so batching rows never changes results.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor2;

pub const LN_EPS: f64 = 1e-5;

/// `x (n x in) * w (in x out) + b (1 x out)`.
pub fn linear(x: &Tensor2, w: &Tensor2, b: Option<&Tensor2>) -> Result<Tensor2> {
    let mut y = x.matmul(w)?;
    if let Some(b) = b {
        if b.shape() != (1, w.cols()) {
            return Err(shape_err("linear", format!("bias {:?} for {} outputs", b.shape(), w.cols())));
        }
        for r in 0..y.rows() {
            for (o, bv) in y.row_mut(r).iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
    }
    Ok(y)
}

/// Per-row layer normalisation with learned gain and bias.
pub fn layer_norm(x: &Tensor2, gamma: &Tensor2, beta: &Tensor2) -> Result<Tensor2> {
    let c = x.cols();
    if gamma.shape() != (1, c) || beta.shape() != (1, c) {
        return Err(shape_err("layer_norm", format!("gain {:?} / bias {:?} for width {c}", gamma.shape(), beta.shape())));
    }
    let mut y = Tensor2::zeros(x.rows(), c);
    for r in 0..x.rows() {
        let (mean, rstd) = row_stats(x.row(r));
        for ((o, &xv), (&g, &b)) in y.row_mut(r).iter_mut().zip(x.row(r)).zip(gamma.data().iter().zip(beta.data())) {
            *o = (xv - mean) * rstd * g + b;
        }
    }
    Ok(y)
}

/// Mean and reciprocal standard deviation used by [`layer_norm`].
pub(crate) fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Absolute sinusoidal encoding for one global position.
pub fn sinusoidal_position(pos: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let pair = (i / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * pair / dim as f64);
            let angle = pos as f64 * freq;
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Adds the encoding of positions `start..start + x.rows()` in place.
pub fn add_positions(x: &mut Tensor2, start: usize) {
    let d = x.cols();
    for r in 0..x.rows() {
        let pe = sinusoidal_position(start + r, d);
        for (v, p) in x.row_mut(r).iter_mut().zip(pe) {
            *v += p;
        }
    }
}

/// Which keys each query row may attend to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    query_len: usize,
    key_len: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    /// Lower-triangular: query `i` sees keys `0..=i`.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| j <= i)
    }

    /// Causal with a bounded look-back of `window` keys (including self).
    pub fn causal_window(n: usize, window: Option<usize>) -> Self {
        match window {
            None => Self::causal(n),
            Some(w) => Self::from_fn(n, n, |i, j| j <= i && i - j < w),
        }
    }

    pub fn from_fn(query_len: usize, key_len: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(query_len * key_len);
        for i in 0..query_len {
            for j in 0..key_len {
                allowed.push(f(i, j));
            }
        }
        Self { query_len, key_len, allowed }
    }

    pub fn query_len(&self) -> usize {
        self.query_len
    }

    pub fn key_len(&self) -> usize {
        self.key_len
    }

    pub fn is_allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.key_len + j]
    }

    pub fn allowed_keys(&self, i: usize) -> Vec<usize> {
        (0..self.key_len).filter(|&j| self.is_allowed(i, j)).collect()
    }

    pub fn is_lower_triangular(&self) -> bool {
        (0..self.query_len).all(|i| (0..self.key_len).all(|j| !self.is_allowed(i, j) || j <= i))
    }
}

/// Softmax attention of one query over the listed keys, in list order.
/// Returns the attended value and the weights (aligned with `keys`).
pub(crate) fn attend_row(
    q: &[f64],
    k: &Tensor2,
    v: &Tensor2,
    col0: usize,
    keys: &[usize],
    scale: f64,
) -> (Vec<f64>, Vec<f64>) {
    let dh = q.len();
    let mut out = vec![0.0; dh];
    if keys.is_empty() {
        return (out, Vec::new());
    }
    let scores: Vec<f64> = keys
        .iter()
        .map(|&j| {
            let kr = &k.row(j)[col0..col0 + dh];
            q.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() * scale
        })
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let weights: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    for (&j, &w) in keys.iter().zip(&weights) {
        let vr = &v.row(j)[col0..col0 + dh];
        for (o, &x) in out.iter_mut().zip(vr) {
            *o += w * x;
        }
    }
    (out, weights)
}

/// Multi-head attention core given per-row key lists (ascending key order). `q`, `k`, `v` carry
/// all heads side by side in their columns.
pub fn attention_with_keys(
    q: &Tensor2,
    k: &Tensor2,
    v: &Tensor2,
    heads: usize,
    keys_for: &dyn Fn(usize) -> Vec<usize>,
) -> Result<Tensor2> {
    let d = q.cols();
    if k.cols() != d || v.cols() != d || k.rows() != v.rows() {
        return Err(shape_err("attention", format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape())));
    }
    if heads == 0 || d % heads != 0 {
        return Err(shape_err("attention", format!("{d} columns not divisible into {heads} heads")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Tensor2::zeros(q.rows(), d);
    for i in 0..q.rows() {
        let keys = keys_for(i);
        for h in 0..heads {
            let c0 = h * dh;
            let (o, _) = attend_row(&q.row(i)[c0..c0 + dh], k, v, c0, &keys, scale);
            out.row_mut(i)[c0..c0 + dh].copy_from_slice(&o);
        }
    }
    Ok(out)
}

/// Single-head masked scaled dot-product attention.
pub fn attention_forward(q: &Tensor2, k: &Tensor2, v: &Tensor2, mask: &AttentionMask) -> Result<Tensor2> {
    multi_head_attention(q, k, v, mask, 1)
}

pub fn multi_head_attention(q: &Tensor2, k: &Tensor2, v: &Tensor2, mask: &AttentionMask, heads: usize) -> Result<Tensor2> {
    check_mask(q, k, mask)?;
    attention_with_keys(q, k, v, heads, &|i| mask.allowed_keys(i))
}

/// Single-head attention weights (`query_len x key_len`, zero where masked).
pub fn attention_weights(q: &Tensor2, k: &Tensor2, mask: &AttentionMask) -> Result<Tensor2> {
    check_mask(q, k, mask)?;
    if q.cols() != k.cols() {
        return Err(shape_err("attention_weights", format!("q {:?}, k {:?}", q.shape(), k.shape())));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut w = Tensor2::zeros(q.rows(), k.rows());
    for i in 0..q.rows() {
        let keys = mask.allowed_keys(i);
        let (_, weights) = attend_row(q.row(i), k, k, 0, &keys, scale);
        for (&j, wt) in keys.iter().zip(weights) {
            w.set(i, j, wt);
        }
    }
    Ok(w)
}

fn check_mask(q: &Tensor2, k: &Tensor2, mask: &AttentionMask) -> Result<()> {
    if mask.query_len() != q.rows() || mask.key_len() != k.rows() {
        return Err(shape_err(
            "attention",
            format!("mask {}x{} for {} queries / {} keys", mask.query_len(), mask.key_len(), q.rows(), k.rows()),
        ));
    }
    Ok(())
}

/// Carried input frames of a depthwise causal convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvState {
    pub carry: Tensor2,
}

impl ConvState {
    /// Zero history for a kernel of `width` over `channels`.
    pub fn new(width: usize, channels: usize) -> Self {
        Self { carry: Tensor2::zeros(width.saturating_sub(1), channels) }
    }
}

/// Depthwise causal convolution. `kernel` is `width x channels`; row
/// `width - 1` multiplies the current frame, row 0 the oldest.
pub fn causal_conv1d(x: &Tensor2, kernel: &Tensor2, state: &ConvState) -> Result<(Tensor2, ConvState)> {
    let w = kernel.rows();
    let c = kernel.cols();
    if w == 0 {
        return Err(shape_err("causal_conv1d", "kernel width must be >= 1"));
    }
    if x.cols() != c || state.carry.shape() != (w - 1, c) {
        return Err(shape_err(
            "causal_conv1d",
            format!("input {:?}, kernel {:?}, carry {:?}", x.shape(), kernel.shape(), state.carry.shape()),
        ));
    }
    let mut full = state.carry.clone();
    full.append_rows(x)?;
    let mut y = Tensor2::zeros(x.rows(), c);
    for i in 0..x.rows() {
        let out = y.row_mut(i);
        for k in 0..w {
            let src = full.row(i + k);
            for ((o, &s), &kv) in out.iter_mut().zip(src).zip(kernel.row(k)) {
                *o += kv * s;
            }
        }
    }
    let carry = full.slice_rows(full.rows() - (w - 1), full.rows());
    Ok((y, ConvState { carry }))
}

/// Parameters of one pre-norm decoder block.
#[derive(Debug, Clone, Copy)]
pub struct BlockParams<'a> {
    pub ln1_g: &'a Tensor2,
    pub ln1_b: &'a Tensor2,
    pub wq: &'a Tensor2,
    pub wk: &'a Tensor2,
    pub wv: &'a Tensor2,
    pub wo: &'a Tensor2,
    pub ln2_g: &'a Tensor2,
    pub ln2_b: &'a Tensor2,
    pub w1: &'a Tensor2,
    pub b1: &'a Tensor2,
    pub w2: &'a Tensor2,
    pub b2: &'a Tensor2,
    pub heads: usize,
}

impl<'a> BlockParams<'a> {
    /// Looks up `{prefix}.ln1.g`, `{prefix}.attn.wq`, ... in `params`.
    pub fn from_params(params: &'a crate::ParamSet, prefix: &str, heads: usize) -> Result<Self> {
        let g = |s: &str| params.get(&format!("{prefix}.{s}"));
        Ok(Self {
            ln1_g: g("ln1.g")?,
            ln1_b: g("ln1.b")?,
            wq: g("attn.wq")?,
            wk: g("attn.wk")?,
            wv: g("attn.wv")?,
            wo: g("attn.wo")?,
            ln2_g: g("ln2.g")?,
            ln2_b: g("ln2.b")?,
            w1: g("ff.w1")?,
            b1: g("ff.b1")?,
            w2: g("ff.w2")?,
            b2: g("ff.b2")?,
            heads,
        })
    }

    /// Registers a block's tensors under `prefix`.
    pub fn init(init: &mut crate::params::ParamInit, prefix: &str, d: usize, d_ff: usize) -> Result<()> {
        init.constant(&format!("{prefix}.ln1.g"), 1, d, 1.0)?;
        init.constant(&format!("{prefix}.ln1.b"), 1, d, 0.0)?;
        for w in ["wq", "wk", "wv", "wo"] {
            init.uniform(&format!("{prefix}.attn.{w}"), d, d)?;
        }
        init.constant(&format!("{prefix}.ln2.g"), 1, d, 1.0)?;
        init.constant(&format!("{prefix}.ln2.b"), 1, d, 0.0)?;
        init.uniform(&format!("{prefix}.ff.w1"), d, d_ff)?;
        init.constant(&format!("{prefix}.ff.b1"), 1, d_ff, 0.0)?;
        init.uniform(&format!("{prefix}.ff.w2"), d_ff, d)?;
        init.constant(&format!("{prefix}.ff.b2"), 1, d, 0.0)?;
        Ok(())
    }
}

/// Pre-norm block: `x + attn(ln1(x))`, then `+ ff(ln2(.))`.
pub fn transformer_block_forward(x: &Tensor2, p: &BlockParams<'_>, mask: &AttentionMask) -> Result<Tensor2> {
    if mask.query_len() != x.rows() || mask.key_len() != x.rows() {
        return Err(shape_err("transformer_block_forward", format!("mask {}x{} for {} rows", mask.query_len(), mask.key_len(), x.rows())));
    }
    let h = layer_norm(x, p.ln1_g, p.ln1_b)?;
    let q = h.matmul(p.wq)?;
    let k = h.matmul(p.wk)?;
    let v = h.matmul(p.wv)?;
    let a = attention_with_keys(&q, &k, &v, p.heads, &|i| mask.allowed_keys(i))?;
    block_tail(x, &a, p)
}

/// Block forward for `x` appended after `k_cache.rows()` cached positions.
/// Keys/values of the new rows are appended to the caches.
pub fn transformer_block_forward_cached(
    x: &Tensor2,
    p: &BlockParams<'_>,
    k_cache: &mut Tensor2,
    v_cache: &mut Tensor2,
    window: Option<usize>,
) -> Result<Tensor2> {
    let start = k_cache.rows();
    let h = layer_norm(x, p.ln1_g, p.ln1_b)?;
    let q = h.matmul(p.wq)?;
    k_cache.append_rows(&h.matmul(p.wk)?)?;
    v_cache.append_rows(&h.matmul(p.wv)?)?;
    let keys_for = |i: usize| {
        let pos = start + i;
        let lo = window.map_or(0, |w| (pos + 1).saturating_sub(w));
        (lo..=pos).collect()
    };
    let a = attention_with_keys(&q, k_cache, v_cache, p.heads, &keys_for)?;
    block_tail(x, &a, p)
}

fn block_tail(x: &Tensor2, attn: &Tensor2, p: &BlockParams<'_>) -> Result<Tensor2> {
    let x1 = x.add(&attn.matmul(p.wo)?)?;
    let h2 = layer_norm(&x1, p.ln2_g, p.ln2_b)?;
    let f = linear(&h2, p.w1, Some(p.b1))?.map(gelu);
    let f = linear(&f, p.w2, Some(p.b2))?;
    x1.add(&f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamInit;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor2 {
        Tensor2::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn single_allowed_key_copies_value_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (q, k, v) = (rand_t(&mut rng, 3, 4), rand_t(&mut rng, 3, 4), rand_t(&mut rng, 3, 4));
        let mask = AttentionMask::from_fn(3, 3, |i, j| j == (i + 1) % 3);
        let out = attention_forward(&q, &k, &v, &mask).unwrap();
        for i in 0..3 {
            assert_eq!(out.row(i), v.row((i + 1) % 3));
        }
    }

    #[test]
    fn causal_row_zero_is_value_row_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (q, k, v) = (rand_t(&mut rng, 5, 4), rand_t(&mut rng, 5, 4), rand_t(&mut rng, 5, 4));
        let out = attention_forward(&q, &k, &v, &AttentionMask::causal(5)).unwrap();
        assert_eq!(out.row(0), v.row(0));
    }

    #[test]
    fn weight_rows_sum_to_one_and_respect_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 1..12 {
            let (q, k) = (rand_t(&mut rng, n, 6), rand_t(&mut rng, n, 6));
            let mask = AttentionMask::causal(n);
            let w = attention_weights(&q, &k, &mask).unwrap();
            for i in 0..n {
                let s: f64 = w.row(i).iter().sum();
                assert!((s - 1.0).abs() <= 1e-6, "row {i} sums to {s}");
                for j in i + 1..n {
                    assert_eq!(w.get(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn attention_shape_errors() {
        let q = Tensor2::zeros(2, 4);
        let k = Tensor2::zeros(3, 4);
        assert!(attention_forward(&q, &k, &k, &AttentionMask::causal(2)).is_err());
        assert!(multi_head_attention(&q, &q, &q, &AttentionMask::causal(2), 3).is_err());
    }

    #[test]
    fn conv_width_one_is_pointwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_t(&mut rng, 6, 3);
        let kernel = Tensor2::from_vec(1, 3, vec![2.0, -1.0, 0.5]).unwrap();
        let (y, st) = causal_conv1d(&x, &kernel, &ConvState::new(1, 3)).unwrap();
        for i in 0..6 {
            for c in 0..3 {
                assert_eq!(y.get(i, c), x.get(i, c) * kernel.get(0, c));
            }
        }
        assert_eq!(st.carry.rows(), 0);
    }

    #[test]
    fn conv_impulse_gives_reversed_kernel() {
        let kernel = Tensor2::from_vec(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let mut x = Tensor2::zeros(5, 1);
        x.set(0, 0, 1.0);
        let (y, _) = causal_conv1d(&x, &kernel, &ConvState::new(3, 1)).unwrap();
        assert_eq!(y.data(), &[3.0, 2.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn conv_streaming_matches_offline() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = rng.gen_range(1..30);
            let w = rng.gen_range(1..5);
            let x = rand_t(&mut rng, n, 4);
            let kernel = rand_t(&mut rng, w, 4);
            let (offline, _) = causal_conv1d(&x, &kernel, &ConvState::new(w, 4)).unwrap();
            let mut state = ConvState::new(w, 4);
            let mut streamed = Tensor2::zeros(0, 4);
            let mut at = 0;
            while at < n {
                let end = (at + rng.gen_range(1..6)).min(n);
                let (y, st) = causal_conv1d(&x.slice_rows(at, end), &kernel, &state).unwrap();
                streamed.append_rows(&y).unwrap();
                state = st;
                at = end;
            }
            assert_eq!(streamed, offline);
        }
    }

    fn block_params(seed: u64, d: usize) -> crate::ParamSet {
        let mut init = ParamInit::new(seed);
        BlockParams::init(&mut init, "b", d, 2 * d).unwrap();
        init.finish()
    }

    #[test]
    fn block_is_causal_and_cache_consistent() {
        let ps = block_params(9, 8);
        let p = BlockParams::from_params(&ps, "b", 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_t(&mut rng, 10, 8);
        let full = transformer_block_forward(&x, &p, &AttentionMask::causal(10)).unwrap();

        let mut x2 = x.clone();
        for c in 0..8 {
            x2.set(7, c, 5.0);
        }
        let pert = transformer_block_forward(&x2, &p, &AttentionMask::causal(10)).unwrap();
        assert_eq!(full.slice_rows(0, 7), pert.slice_rows(0, 7));
        assert_ne!(full.row(7), pert.row(7));

        let (mut kc, mut vc) = (Tensor2::zeros(0, 8), Tensor2::zeros(0, 8));
        let a = transformer_block_forward_cached(&x.slice_rows(0, 4), &p, &mut kc, &mut vc, None).unwrap();
        let b = transformer_block_forward_cached(&x.slice_rows(4, 10), &p, &mut kc, &mut vc, None).unwrap();
        assert_eq!(Tensor2::vstack(&[&a, &b]).unwrap(), full);
        assert_eq!(kc.rows(), 10);
    }

    #[test]
    fn block_deterministic_per_seed() {
        let x = Tensor2::from_vec(3, 8, (0..24).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let run = |seed| {
            let ps = block_params(seed, 8);
            let p = BlockParams::from_params(&ps, "b", 1).unwrap();
            transformer_block_forward(&x, &p, &AttentionMask::causal(3)).unwrap()
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
    }

    #[test]
    fn layer_norm_rows_are_standardised() {
        let x = Tensor2::from_vec(2, 4, vec![1., 2., 3., 4., -1., 0., 0., 1.]).unwrap();
        let y = layer_norm(&x, &Tensor2::filled(1, 4, 1.0), &Tensor2::zeros(1, 4)).unwrap();
        for r in 0..2 {
            let m: f64 = y.row(r).iter().sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
