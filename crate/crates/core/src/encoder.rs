//! Weight-shared causal encoder for reference and mixture features.
//!
//! Each layer is pre-norm self-attention, a depthwise causal convolution
//! followed by a pointwise projection, and a feed-forward block. The same
//! parameters (`enc.*`) encode the reference block and the mixture stream.

use streamtse_nn::ops::{add_positions, attention_with_keys, causal_conv1d, gelu, layer_norm, linear, AttentionMask, ConvState};
use streamtse_nn::{BlockParams, Graph, NodeId, ParamSet, Tensor2};

use crate::error::{Error, Result};
use crate::frontend::MelFrames;
use crate::model::ModelConfig;

/// Reference frames (`n_ref x d_model`), computed once per session.
#[derive(Debug, Clone, PartialEq)]
pub struct RefEmbedding {
    pub frames: Tensor2,
}

/// Encoded mixture chunk for step `step` (1-based).
#[derive(Debug, Clone, PartialEq)]
pub struct MixChunkEmbedding {
    pub frames: Tensor2,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct LayerState {
    keys: Tensor2,
    values: Tensor2,
    /// Global frame index of `keys` row 0.
    offset: usize,
    conv: ConvState,
}

/// Streaming state after the chunks seen so far.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    frames_seen: usize,
    chunks_seen: usize,
    layers: Vec<LayerState>,
}

impl EncoderState {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            frames_seen: 0,
            chunks_seen: 0,
            layers: (0..cfg.encoder_layers)
                .map(|_| LayerState {
                    keys: Tensor2::zeros(0, d),
                    values: Tensor2::zeros(0, d),
                    offset: 0,
                    conv: ConvState::new(cfg.conv_width, d),
                })
                .collect(),
        }
    }

    pub fn frames_seen(&self) -> usize {
        self.frames_seen
    }

    /// Cached key rows in the first layer (bounded by the window, if any).
    pub fn cached_frames(&self) -> usize {
        self.layers.first().map_or(0, |l| l.keys.rows())
    }
}

struct ConvParams<'a> {
    ln_g: &'a Tensor2,
    ln_b: &'a Tensor2,
    kernel: &'a Tensor2,
    w: &'a Tensor2,
    b: &'a Tensor2,
}

fn conv_params<'a>(params: &'a ParamSet, prefix: &str) -> Result<ConvParams<'a>> {
    let g = |s: &str| params.get(&format!("{prefix}.{s}"));
    Ok(ConvParams { ln_g: g("lnc.g")?, ln_b: g("lnc.b")?, kernel: g("conv.k")?, w: g("conv.w")?, b: g("conv.b")? })
}

fn input_projection(cfg: &ModelConfig, params: &ParamSet, mel: &Tensor2, start: usize) -> Result<Tensor2> {
    if mel.cols() != cfg.n_mels {
        return Err(Error::Shape(format!("mel has {} bins, encoder expects {}", mel.cols(), cfg.n_mels)));
    }
    let h = layer_norm(mel, params.get("enc.in_ln.g")?, params.get("enc.in_ln.b")?)?;
    let mut x = linear(&h, params.get("enc.in.w")?, Some(params.get("enc.in.b")?))?;
    add_positions(&mut x, start);
    Ok(x)
}

fn key_range(pos: usize, window: Option<usize>) -> std::ops::RangeInclusive<usize> {
    window.map_or(0, |w| (pos + 1).saturating_sub(w))..=pos
}

/// Runs `mel` (the frames following `state`) through the encoder.
fn forward_stream(cfg: &ModelConfig, params: &ParamSet, mel: &Tensor2, state: &EncoderState) -> Result<(Tensor2, EncoderState)> {
    let start = state.frames_seen;
    let mut next = state.clone();
    let mut x = input_projection(cfg, params, mel, start)?;
    for (l, st) in next.layers.iter_mut().enumerate() {
        let prefix = format!("enc.l{l}");
        let bp = BlockParams::from_params(params, &prefix, cfg.heads)?;
        let cp = conv_params(params, &prefix)?;

        let h = layer_norm(&x, bp.ln1_g, bp.ln1_b)?;
        let q = h.matmul(bp.wq)?;
        st.keys.append_rows(&h.matmul(bp.wk)?)?;
        st.values.append_rows(&h.matmul(bp.wv)?)?;
        let offset = st.offset;
        let keys_for = |i: usize| key_range(start + i, cfg.encoder_window).map(|j| j - offset).collect();
        let a = attention_with_keys(&q, &st.keys, &st.values, cfg.heads, &keys_for)?;
        let x1 = x.add(&a.matmul(bp.wo)?)?;

        let c = layer_norm(&x1, cp.ln_g, cp.ln_b)?;
        let (cv, conv) = causal_conv1d(&c, cp.kernel, &st.conv)?;
        st.conv = conv;
        let x2 = x1.add(&linear(&cv, cp.w, Some(cp.b))?)?;

        let h2 = layer_norm(&x2, bp.ln2_g, bp.ln2_b)?;
        let f = linear(&linear(&h2, bp.w1, Some(bp.b1))?.map(gelu), bp.w2, Some(bp.b2))?;
        x = x2.add(&f)?;

        if let Some(w) = cfg.encoder_window {
            let next_pos = start + mel.rows();
            let keep_from = (next_pos + 1).saturating_sub(w).max(st.offset);
            let drop = keep_from - st.offset;
            if drop > 0 {
                st.keys = st.keys.slice_rows(drop, st.keys.rows());
                st.values = st.values.slice_rows(drop, st.values.rows());
                st.offset = keep_from;
            }
        }
    }
    next.frames_seen += mel.rows();
    let out = layer_norm(&x, params.get("enc.lnf.g")?, params.get("enc.lnf.b")?)?;
    Ok((out, next))
}

/// Encodes the whole reference as one block from an empty state.
pub fn encode_reference(cfg: &ModelConfig, params: &ParamSet, mel: &MelFrames) -> Result<RefEmbedding> {
    if mel.n_frames() == 0 {
        return Err(Error::EmptyReference);
    }
    let (frames, _) = forward_stream(cfg, params, &mel.frames, &EncoderState::new(cfg))?;
    Ok(RefEmbedding { frames })
}

/// Encodes the next mixture chunk, carrying attention and convolution history.
pub fn encode_chunk(
    cfg: &ModelConfig,
    params: &ParamSet,
    mel: &MelFrames,
    state: &EncoderState,
) -> Result<(MixChunkEmbedding, EncoderState)> {
    let (frames, mut next) = forward_stream(cfg, params, &mel.frames, state)?;
    next.chunks_seen += 1;
    Ok((MixChunkEmbedding { frames, step: next.chunks_seen }, next))
}

/// Whole-sequence encoding with an explicit causal mask.
pub fn encode_offline(cfg: &ModelConfig, params: &ParamSet, mel: &Tensor2) -> Result<Tensor2> {
    let n = mel.rows();
    let mask = AttentionMask::causal_window(n, cfg.encoder_window);
    let mut x = input_projection(cfg, params, mel, 0)?;
    for l in 0..cfg.encoder_layers {
        let prefix = format!("enc.l{l}");
        let bp = BlockParams::from_params(params, &prefix, cfg.heads)?;
        let cp = conv_params(params, &prefix)?;
        let h = layer_norm(&x, bp.ln1_g, bp.ln1_b)?;
        let a = streamtse_nn::multi_head_attention(&h.matmul(bp.wq)?, &h.matmul(bp.wk)?, &h.matmul(bp.wv)?, &mask, cfg.heads)?;
        let x1 = x.add(&a.matmul(bp.wo)?)?;
        let c = layer_norm(&x1, cp.ln_g, cp.ln_b)?;
        let (cv, _) = causal_conv1d(&c, cp.kernel, &ConvState::new(cfg.conv_width, cfg.d_model))?;
        let x2 = x1.add(&linear(&cv, cp.w, Some(cp.b))?)?;
        let h2 = layer_norm(&x2, bp.ln2_g, bp.ln2_b)?;
        let f = linear(&linear(&h2, bp.w1, Some(bp.b1))?.map(gelu), bp.w2, Some(bp.b2))?;
        x = x2.add(&f)?;
    }
    Ok(layer_norm(&x, params.get("enc.lnf.g")?, params.get("enc.lnf.b")?)?)
}

/// Tape version of [`encode_offline`].
pub fn encode_graph(g: &mut Graph, cfg: &ModelConfig, params: &ParamSet, mel: &Tensor2) -> Result<NodeId> {
    let n = mel.rows();
    let mask = AttentionMask::causal_window(n, cfg.encoder_window);
    let p = |g: &mut Graph, name: &str| g.param(params, name);

    let m = g.constant(mel.clone());
    let (ig, ib) = (p(g, "enc.in_ln.g")?, p(g, "enc.in_ln.b")?);
    let h = g.layer_norm(m, ig, ib)?;
    let (w, b) = (p(g, "enc.in.w")?, p(g, "enc.in.b")?);
    let x = g.linear(h, w, Some(b))?;
    let mut pe = Tensor2::zeros(n, cfg.d_model);
    add_positions(&mut pe, 0);
    let pe = g.constant(pe);
    let mut x = g.add(x, pe)?;

    for l in 0..cfg.encoder_layers {
        let q = |s: &str| format!("enc.l{l}.{s}");
        let (g1, b1) = (p(g, &q("ln1.g"))?, p(g, &q("ln1.b"))?);
        let h = g.layer_norm(x, g1, b1)?;
        let (wq, wk, wv, wo) = (p(g, &q("attn.wq"))?, p(g, &q("attn.wk"))?, p(g, &q("attn.wv"))?, p(g, &q("attn.wo"))?);
        let (qq, kk, vv) = (g.matmul(h, wq)?, g.matmul(h, wk)?, g.matmul(h, wv)?);
        let a = g.attention(qq, kk, vv, &mask, cfg.heads)?;
        let a = g.matmul(a, wo)?;
        let x1 = g.add(x, a)?;

        let (cg, cb) = (p(g, &q("lnc.g"))?, p(g, &q("lnc.b"))?);
        let c = g.layer_norm(x1, cg, cb)?;
        let k = p(g, &q("conv.k"))?;
        let cv = g.causal_conv(c, k)?;
        let (cw, cbias) = (p(g, &q("conv.w"))?, p(g, &q("conv.b"))?);
        let cv = g.linear(cv, cw, Some(cbias))?;
        let x2 = g.add(x1, cv)?;

        let (g2, b2) = (p(g, &q("ln2.g"))?, p(g, &q("ln2.b"))?);
        let h2 = g.layer_norm(x2, g2, b2)?;
        let (w1, bb1, w2, bb2) = (p(g, &q("ff.w1"))?, p(g, &q("ff.b1"))?, p(g, &q("ff.w2"))?, p(g, &q("ff.b2"))?);
        let f = g.linear(h2, w1, Some(bb1))?;
        let f = g.gelu(f);
        let f = g.linear(f, w2, Some(bb2))?;
        x = g.add(x2, f)?;
    }
    let (fg, fb) = (p(g, "enc.lnf.g")?, p(g, "enc.lnf.b")?);
    Ok(g.layer_norm(x, fg, fb)?)
}
