//! Reverse-mode tape over the forward kernels in [`crate::ops`].
//!
//! Forward values are produced by the very same kernels used for inference,
//! so a graph evaluation and a plain forward pass agree exactly.

use std::collections::HashMap;

use crate::error::{shape_err, Result};
use crate::ops::{self, AttentionMask, ConvState};
use crate::params::ParamSet;
use crate::tensor::Tensor2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    LayerNorm(NodeId, NodeId, NodeId),
    Gelu(NodeId),
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize, mask: AttentionMask },
    CausalConv(NodeId, NodeId),
    Gather(Vec<(NodeId, usize)>),
    CrossEntropy(NodeId, Vec<Option<usize>>),
    Mse(NodeId, Tensor2),
    LinComb(NodeId, NodeId, f64, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor2,
    op: Op,
}

/// A computation tape. Parameters are bound once per graph and share one leaf.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<usize, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor2 {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor2, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// A value that receives no gradient outside the tape.
    pub fn constant(&mut self, value: Tensor2) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Leaf for the named parameter; repeated calls return the same node.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<NodeId> {
        let idx = params.index_of(name).ok_or_else(|| crate::NnError::UnknownParam(name.to_string()))?;
        if let Some(&id) = self.param_nodes.get(&idx) {
            return Ok(id);
        }
        let id = self.push(params.by_index(idx).clone(), Op::Leaf);
        self.param_nodes.insert(idx, id);
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (x, b) = (self.value(a), self.value(bias));
        if b.shape() != (1, x.cols()) {
            return Err(shape_err("add_bias", format!("bias {:?} for {:?}", b.shape(), x.shape())));
        }
        let mut v = x.clone();
        for r in 0..v.rows() {
            for (o, bv) in v.row_mut(r).iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        Ok(self.push(v, Op::AddBias(a, bias)))
    }

    /// `x * w + b`, matching [`ops::linear`].
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn layer_norm(&mut self, x: NodeId, g: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::layer_norm(self.value(x), self.value(g), self.value(b))?;
        Ok(self.push(v, Op::LayerNorm(x, g, b)))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(ops::gelu);
        self.push(v, Op::Gelu(x))
    }

    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, mask: &AttentionMask, heads: usize) -> Result<NodeId> {
        let out = ops::multi_head_attention(self.value(q), self.value(k), self.value(v), mask, heads)?;
        Ok(self.push(out, Op::Attention { q, k, v, heads, mask: mask.clone() }))
    }

    /// Depthwise causal convolution from zero history.
    pub fn causal_conv(&mut self, x: NodeId, kernel: NodeId) -> Result<NodeId> {
        let kv = self.value(kernel);
        let state = ConvState::new(kv.rows(), kv.cols());
        let (y, _) = ops::causal_conv1d(self.value(x), kv, &state)?;
        Ok(self.push(y, Op::CausalConv(x, kernel)))
    }

    /// Builds a matrix whose row `i` is row `sources[i].1` of node `sources[i].0`.
    pub fn gather(&mut self, sources: Vec<(NodeId, usize)>) -> Result<NodeId> {
        let cols = match sources.first() {
            Some(&(n, _)) => self.value(n).cols(),
            None => return Err(shape_err("gather", "no source rows")),
        };
        let mut v = Tensor2::zeros(0, cols);
        for &(n, r) in &sources {
            let src = self.value(n);
            if r >= src.rows() {
                return Err(shape_err("gather", format!("row {r} of {} rows", src.rows())));
            }
            v.push_row(src.row(r))?;
        }
        Ok(self.push(v, Op::Gather(sources)))
    }

    /// Rows `start..end` of `x`.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.gather((start..end).map(|r| (x, r)).collect())
    }

    /// Vertical concatenation.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut src = Vec::new();
        for &p in parts {
            src.extend((0..self.value(p).rows()).map(|r| (p, r)));
        }
        self.gather(src)
    }

    /// Mean softmax cross-entropy over rows with a target; `None` rows are ignored.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<Option<usize>>) -> Result<NodeId> {
        let l = self.value(logits);
        if targets.len() != l.rows() {
            return Err(shape_err("cross_entropy", format!("{} targets for {} rows", targets.len(), l.rows())));
        }
        let loss = cross_entropy_value(l, &targets)?;
        Ok(self.push(Tensor2::filled(1, 1, loss), Op::CrossEntropy(logits, targets)))
    }

    /// Mean squared error against a fixed target.
    pub fn mse(&mut self, a: NodeId, target: Tensor2) -> Result<NodeId> {
        let loss = mse_value(self.value(a), &target)?;
        Ok(self.push(Tensor2::filled(1, 1, loss), Op::Mse(a, target)))
    }

    /// `la * a + lb * b` for scalar nodes.
    pub fn lin_comb(&mut self, a: NodeId, b: NodeId, la: f64, lb: f64) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != (1, 1) || y.shape() != (1, 1) {
            return Err(shape_err("lin_comb", "operands must be scalars"));
        }
        let v = la * x.get(0, 0) + lb * y.get(0, 0);
        Ok(self.push(Tensor2::filled(1, 1, v), Op::LinComb(a, b, la, lb)))
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id).get(0, 0)
    }

    /// Gradients of the scalar `loss` with respect to every bound parameter,
    /// shaped like `params`. Unbound parameters get zero gradients.
    pub fn backward(&self, loss: NodeId, params: &ParamSet) -> Result<ParamSet> {
        let grads = self.backward_all(loss)?;
        let mut out = params.zeros_like();
        for (&idx, &node) in &self.param_nodes {
            if let Some(g) = &grads[node.0] {
                *out.by_index_mut(idx) = g.clone();
            }
        }
        Ok(out)
    }

    fn backward_all(&self, loss: NodeId) -> Result<Vec<Option<Tensor2>>> {
        if self.value(loss).shape() != (1, 1) {
            return Err(shape_err("backward", "loss must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor2>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor2::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = dy.matmul(&self.value(*b).transpose())?;
                    let db = self.value(*a).transpose().matmul(&dy)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, dy.clone())?;
                    accumulate(&mut grads, *b, dy.clone())?;
                }
                Op::AddBias(a, bias) => {
                    let mut db = Tensor2::zeros(1, dy.cols());
                    for r in 0..dy.rows() {
                        for (o, v) in db.data_mut().iter_mut().zip(dy.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *a, dy.clone())?;
                    accumulate(&mut grads, *bias, db)?;
                }
                Op::LayerNorm(x, g, b) => {
                    let (dx, dg, db) = layer_norm_backward(self.value(*x), self.value(*g), &dy);
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *g, dg)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Gelu(x) => {
                    let dx = self.value(*x).zip_map(&dy, |xv, d| d * ops::gelu_grad(xv))?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Attention { q, k, v, heads, mask } => {
                    let (dq, dk, dv) = attention_backward(self.value(*q), self.value(*k), self.value(*v), mask, *heads, &dy);
                    accumulate(&mut grads, *q, dq)?;
                    accumulate(&mut grads, *k, dk)?;
                    accumulate(&mut grads, *v, dv)?;
                }
                Op::CausalConv(x, kernel) => {
                    let (dx, dk) = conv_backward(self.value(*x), self.value(*kernel), &dy);
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *kernel, dk)?;
                }
                Op::Gather(sources) => {
                    let mut per_source: HashMap<NodeId, Tensor2> = HashMap::new();
                    for (i, &(n, r)) in sources.iter().enumerate() {
                        let src = self.value(n);
                        let g = per_source.entry(n).or_insert_with(|| Tensor2::zeros(src.rows(), src.cols()));
                        for (o, v) in g.row_mut(r).iter_mut().zip(dy.row(i)) {
                            *o += v;
                        }
                    }
                    for (n, g) in per_source {
                        accumulate(&mut grads, n, g)?;
                    }
                }
                Op::CrossEntropy(logits, targets) => {
                    let l = self.value(*logits);
                    let n_valid = targets.iter().filter(|t| t.is_some()).count().max(1) as f64;
                    let scale = dy.get(0, 0) / n_valid;
                    let mut dl = Tensor2::zeros(l.rows(), l.cols());
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let p = softmax(l.row(r));
                        for (c, (o, pv)) in dl.row_mut(r).iter_mut().zip(p).enumerate() {
                            *o = scale * (pv - if c == t { 1.0 } else { 0.0 });
                        }
                    }
                    accumulate(&mut grads, *logits, dl)?;
                }
                Op::Mse(a, target) => {
                    let n = target.len().max(1) as f64;
                    let s = dy.get(0, 0) * 2.0 / n;
                    let da = self.value(*a).zip_map(target, |x, t| s * (x - t))?;
                    accumulate(&mut grads, *a, da)?;
                }
                Op::LinComb(a, b, la, lb) => {
                    let d = dy.get(0, 0);
                    accumulate(&mut grads, *a, Tensor2::filled(1, 1, la * d))?;
                    accumulate(&mut grads, *b, Tensor2::filled(1, 1, lb * d))?;
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(dy);
            }
        }
        Ok(grads)
    }
}

fn accumulate(grads: &mut [Option<Tensor2>], id: NodeId, g: Tensor2) -> Result<()> {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

pub(crate) fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Mean cross-entropy over the rows that carry a target.
pub fn cross_entropy_value(logits: &Tensor2, targets: &[Option<usize>]) -> Result<f64> {
    if targets.len() != logits.rows() {
        return Err(shape_err("cross_entropy", format!("{} targets for {} rows", targets.len(), logits.rows())));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for (r, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        if t >= logits.cols() {
            return Err(shape_err("cross_entropy", format!("target {t} outside {} classes", logits.cols())));
        }
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[t];
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

pub fn mse_value(a: &Tensor2, target: &Tensor2) -> Result<f64> {
    if a.shape() != target.shape() {
        return Err(shape_err("mse", format!("{:?} vs {:?}", a.shape(), target.shape())));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    Ok(a.data().iter().zip(target.data()).map(|(x, t)| (x - t) * (x - t)).sum::<f64>() / a.len() as f64)
}

fn layer_norm_backward(x: &Tensor2, g: &Tensor2, dy: &Tensor2) -> (Tensor2, Tensor2, Tensor2) {
    let c = x.cols();
    let n = c as f64;
    let mut dx = Tensor2::zeros(x.rows(), c);
    let mut dg = Tensor2::zeros(1, c);
    let mut db = Tensor2::zeros(1, c);
    for r in 0..x.rows() {
        let (mean, rstd) = ops::row_stats(x.row(r));
        let xhat: Vec<f64> = x.row(r).iter().map(|v| (v - mean) * rstd).collect();
        let dxhat: Vec<f64> = dy.row(r).iter().zip(g.data()).map(|(d, gv)| d * gv).collect();
        for i in 0..c {
            dg.data_mut()[i] += dy.get(r, i) * xhat[i];
            db.data_mut()[i] += dy.get(r, i);
        }
        let sum_d: f64 = dxhat.iter().sum();
        let sum_dx: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
        for i in 0..c {
            dx.set(r, i, rstd / n * (n * dxhat[i] - sum_d - xhat[i] * sum_dx));
        }
    }
    (dx, dg, db)
}

fn attention_backward(
    q: &Tensor2,
    k: &Tensor2,
    v: &Tensor2,
    mask: &AttentionMask,
    heads: usize,
    dy: &Tensor2,
) -> (Tensor2, Tensor2, Tensor2) {
    let d = q.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Tensor2::zeros(q.rows(), d);
    let mut dk = Tensor2::zeros(k.rows(), d);
    let mut dv = Tensor2::zeros(v.rows(), d);
    for i in 0..q.rows() {
        let keys = mask.allowed_keys(i);
        if keys.is_empty() {
            continue;
        }
        for h in 0..heads {
            let c0 = h * dh;
            let qi = &q.row(i)[c0..c0 + dh];
            let (_, w) = ops::attend_row(qi, k, v, c0, &keys, scale);
            let doi = &dy.row(i)[c0..c0 + dh];
            let dw: Vec<f64> = keys
                .iter()
                .map(|&j| v.row(j)[c0..c0 + dh].iter().zip(doi).map(|(a, b)| a * b).sum())
                .collect();
            let dot: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
            for (idx, &j) in keys.iter().enumerate() {
                let ds = w[idx] * (dw[idx] - dot) * scale;
                for t in 0..dh {
                    dv.row_mut(j)[c0 + t] += w[idx] * doi[t];
                    dq.row_mut(i)[c0 + t] += ds * k.get(j, c0 + t);
                    dk.row_mut(j)[c0 + t] += ds * qi[t];
                }
            }
        }
    }
    (dq, dk, dv)
}

fn conv_backward(x: &Tensor2, kernel: &Tensor2, dy: &Tensor2) -> (Tensor2, Tensor2) {
    let w = kernel.rows();
    let c = kernel.cols();
    let mut dx = Tensor2::zeros(x.rows(), c);
    let mut dk = Tensor2::zeros(w, c);
    for i in 0..x.rows() {
        for k in 0..w {
            // padded index i + k maps to input row i + k - (w - 1)
            let Some(src) = (i + k).checked_sub(w - 1) else { continue };
            for ch in 0..c {
                dx.row_mut(src)[ch] += kernel.get(k, ch) * dy.get(i, ch);
                dk.row_mut(k)[ch] += dy.get(i, ch) * x.get(src, ch);
            }
        }
    }
    (dx, dk)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn graph_forward_matches_kernels() {
        let mut ps = ParamSet::new(0);
        ps.insert("w", Tensor2::from_vec(2, 2, vec![0.5, -0.2, 0.1, 0.3]).unwrap()).unwrap();
        ps.insert("b", Tensor2::from_vec(1, 2, vec![0.01, 0.02]).unwrap()).unwrap();
        let x = Tensor2::from_vec(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let w = g.param(&ps, "w").unwrap();
        let b = g.param(&ps, "b").unwrap();
        let y = g.linear(xn, w, Some(b)).unwrap();
        let expect = ops::linear(&x, ps.get("w").unwrap(), Some(ps.get("b").unwrap())).unwrap();
        assert_eq!(g.value(y), &expect);
        assert_eq!(g.param(&ps, "w").unwrap(), w);
    }

    #[test]
    fn cross_entropy_ignores_untargeted_rows() {
        let l = Tensor2::from_vec(2, 3, vec![1., 2., 3., 100., -100., 7.]).unwrap();
        let a = cross_entropy_value(&l, &[Some(2), None]).unwrap();
        let mut l2 = l.clone();
        l2.set(1, 0, -55.0);
        assert_eq!(a, cross_entropy_value(&l2, &[Some(2), None]).unwrap());
    }
}
