//! Decoder-only language models over a layout, with a key/value cache.

use streamtse_nn::ops::add_positions;
use streamtse_nn::{linear, transformer_block_forward, transformer_block_forward_cached, AttentionMask, BlockParams, Graph, NodeId, ParamSet, Tensor2};

use crate::error::{Error, Result};
use crate::layout::PositionRole;
use crate::model::{LmKind, ModelConfig, VOCAB_SIZE};

/// Per-layer keys and values for the first `len` layout positions.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    layers: Vec<(Tensor2, Tensor2)>,
    len: usize,
}

impl KvCache {
    pub fn new(layers: usize, d_model: usize) -> Self {
        Self { layers: (0..layers).map(|_| (Tensor2::zeros(0, d_model), Tensor2::zeros(0, d_model))).collect(), len: 0 }
    }

    pub fn for_model(cfg: &ModelConfig, kind: LmKind) -> Self {
        Self::new(kind.layers(cfg), cfg.d_model)
    }

    /// Number of cached positions.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Drops positions `p..`. Returns the number of positions dropped.
    pub fn invalidate_from(&mut self, p: usize) -> Result<usize> {
        let len = self.len;
        if p > len {
            return Err(Error::Range { pos: p, len });
        }
        for (k, v) in &mut self.layers {
            k.truncate_rows(p);
            v.truncate_rows(p);
        }
        self.len = p;
        Ok(len - p)
    }
}

/// Truncates `cache` to `p` positions.
pub fn cache_invalidate_from(cache: &mut KvCache, p: usize) -> Result<usize> {
    cache.invalidate_from(p)
}

/// Input embedding of one position (before the positional term).
fn role_vector<'a>(params: &'a ParamSet, kind: LmKind, role: &PositionRole<'a>) -> Result<&'a [f64]> {
    let p = kind.prefix();
    Ok(match *role {
        PositionRole::Ref(v) | PositionRole::Mix { vector: v, .. } => v,
        PositionRole::Sep => params.get(&format!("{p}.sep"))?.row(0),
        PositionRole::Task { .. } => match kind {
            LmKind::Selm => params.get("selm.task")?.row(0),
            LmKind::Arlm => return Err(Error::UnsupportedLayout("task marker in an acoustic layout".into())),
        },
        PositionRole::Token { id, .. } => {
            if id as usize >= VOCAB_SIZE {
                return Err(Error::Shape(format!("token id {id} outside vocabulary of {VOCAB_SIZE}")));
            }
            params.get(&format!("{p}.tok_emb"))?.row(id as usize)
        }
    })
}

/// Embeds `roles`, the first of which sits at global position `start`.
pub fn embed_positions(cfg: &ModelConfig, params: &ParamSet, kind: LmKind, roles: &[PositionRole<'_>], start: usize) -> Result<Tensor2> {
    let mut x = Tensor2::zeros(0, cfg.d_model);
    for role in roles {
        let v = role_vector(params, kind, role)?;
        if v.len() != cfg.d_model {
            return Err(Error::Shape(format!("{} vector has {} dims, model has {}", role.tag(), v.len(), cfg.d_model)));
        }
        x.push_row(v)?;
    }
    add_positions(&mut x, start);
    Ok(x)
}

/// Positional term for `n` rows starting at `start`, for tape inputs.
pub fn position_table(n: usize, start: usize, d: usize) -> Tensor2 {
    let mut t = Tensor2::zeros(n, d);
    add_positions(&mut t, start);
    t
}

fn final_norm(params: &ParamSet, kind: LmKind, x: &Tensor2) -> Result<Tensor2> {
    let p = kind.prefix();
    Ok(streamtse_nn::layer_norm(x, params.get(&format!("{p}.lnf.g"))?, params.get(&format!("{p}.lnf.b"))?)?)
}

/// Runs embedded rows `x` appended after the cached positions; extends the cache.
pub fn forward_cached(cfg: &ModelConfig, params: &ParamSet, kind: LmKind, cache: &mut KvCache, x: &Tensor2) -> Result<Tensor2> {
    let mut h = x.clone();
    for (l, (k, v)) in cache.layers.iter_mut().enumerate() {
        let bp = BlockParams::from_params(params, &format!("{}.l{l}", kind.prefix()), cfg.heads)?;
        h = transformer_block_forward_cached(&h, &bp, k, v, None)?;
    }
    cache.len += x.rows();
    final_norm(params, kind, &h)
}

/// Whole-sequence forward with a lower-triangular mask.
pub fn forward_full(cfg: &ModelConfig, params: &ParamSet, kind: LmKind, x: &Tensor2) -> Result<Tensor2> {
    let mask = AttentionMask::causal(x.rows());
    let mut h = x.clone();
    for l in 0..kind.layers(cfg) {
        let bp = BlockParams::from_params(params, &format!("{}.l{l}", kind.prefix()), cfg.heads)?;
        h = transformer_block_forward(&h, &bp, &mask)?;
    }
    final_norm(params, kind, &h)
}

/// Semantic logits (`rows x VOCAB_SIZE`) from final hidden rows.
pub fn selm_logits(params: &ParamSet, h: &Tensor2) -> Result<Tensor2> {
    Ok(linear(h, params.get("selm.out.w")?, Some(params.get("selm.out.b")?))?)
}

/// Acoustic latents (`rows x LATENT_DIM`) from final hidden rows.
pub fn arlm_project(params: &ParamSet, h: &Tensor2) -> Result<Tensor2> {
    Ok(linear(h, params.get("arlm.proj.w")?, Some(params.get("arlm.proj.b")?))?)
}

/// Tape version of [`forward_full`] on already embedded rows.
pub fn forward_graph(g: &mut Graph, cfg: &ModelConfig, params: &ParamSet, kind: LmKind, x: NodeId) -> Result<NodeId> {
    let n = g.value(x).rows();
    let mask = AttentionMask::causal(n);
    let pre = kind.prefix();
    let mut x = x;
    for l in 0..kind.layers(cfg) {
        let p = |g: &mut Graph, s: &str| g.param(params, &format!("{pre}.l{l}.{s}"));
        let (g1, b1) = (p(g, "ln1.g")?, p(g, "ln1.b")?);
        let h = g.layer_norm(x, g1, b1)?;
        let (wq, wk, wv, wo) = (p(g, "attn.wq")?, p(g, "attn.wk")?, p(g, "attn.wv")?, p(g, "attn.wo")?);
        let (q, k, v) = (g.matmul(h, wq)?, g.matmul(h, wk)?, g.matmul(h, wv)?);
        let a = g.attention(q, k, v, &mask, cfg.heads)?;
        let a = g.matmul(a, wo)?;
        let x1 = g.add(x, a)?;
        let (g2, b2) = (p(g, "ln2.g")?, p(g, "ln2.b")?);
        let h2 = g.layer_norm(x1, g2, b2)?;
        let (w1, bb1, w2, bb2) = (p(g, "ff.w1")?, p(g, "ff.b1")?, p(g, "ff.w2")?, p(g, "ff.b2")?);
        let f = g.linear(h2, w1, Some(bb1))?;
        let f = g.gelu(f);
        let f = g.linear(f, w2, Some(bb2))?;
        x = g.add(x1, f)?;
    }
    let fg = g.param(params, &format!("{pre}.lnf.g"))?;
    let fb = g.param(params, &format!("{pre}.lnf.b"))?;
    Ok(g.layer_norm(x, fg, fb)?)
}
