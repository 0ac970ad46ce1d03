//! Teacher-forced training with the hybrid token/latent objective.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use streamtse_nn::{cross_entropy_value, mse_value, Graph, NodeId, ParamSet, Tensor2};

use crate::codec::MockCodec;
use crate::encoder::encode_graph;
use crate::error::{Error, Result};
use crate::frontend::{synth_scene_with_reference, ChunkSpec, MelConfig, MelFrontend, SynthScene};
use crate::layout::{build_prefix, Layout, PositionRole, Stage, Strategy};
use crate::lm::{forward_graph, position_table};
use crate::model::{LmKind, ModelConfig};

/// Weighted sum of the semantic and acoustic terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nll: f64,
    pub reg: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossBreakdown {
    pub fn new(nll: f64, reg: f64, lambda1: f64, lambda2: f64) -> Self {
        Self { nll, reg, total: lambda1 * nll + lambda2 * reg, lambda1, lambda2 }
    }
}

/// Mean cross-entropy over rows with a target plus mean squared latent error.
pub fn hybrid_loss(
    selm_logits: &Tensor2,
    gt_tokens: &[Option<usize>],
    arlm_latents: &Tensor2,
    gt_latents: &Tensor2,
    lambda1: f64,
    lambda2: f64,
) -> Result<LossBreakdown> {
    let nll = cross_entropy_value(selm_logits, gt_tokens)?;
    let reg = mse_value(arlm_latents, gt_latents)?;
    Ok(LossBreakdown::new(nll, reg, lambda1, lambda2))
}

/// One scene with its features and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingScene {
    pub scene: SynthScene,
    pub reference_mel: Tensor2,
    /// Mixture log-mel frames of all chunks, in order.
    pub mixture_mel: Tensor2,
    /// Quantizer-0 ids of the clean target, one per codec frame.
    pub gt_tokens: Vec<u32>,
    /// Pre-quantization latents of the clean target, one row per codec frame.
    pub gt_latents: Tensor2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub spec: ChunkSpec,
    pub scenes: Vec<TrainingScene>,
}

impl TrainingBatch {
    pub fn steps(&self) -> usize {
        self.scenes.first().map_or(0, |s| s.gt_tokens.len() / self.spec.codec_frames_per_chunk)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchConfig {
    /// Chunks per scene.
    pub steps: usize,
    pub reference_ms: u32,
    pub snr_db: f64,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self { steps: 2, reference_ms: 400, snr_db: 0.0 }
    }
}

/// [`make_training_batch_with`] using [`BatchConfig::default`].
pub fn make_training_batch(seed: u64, spec: &ChunkSpec, n_scenes: usize) -> Result<TrainingBatch> {
    make_training_batch_with(seed, spec, n_scenes, &BatchConfig::default(), &MelConfig::default())
}

pub fn make_training_batch_with(seed: u64, spec: &ChunkSpec, n_scenes: usize, cfg: &BatchConfig, mel: &MelConfig) -> Result<TrainingBatch> {
    if n_scenes == 0 || cfg.steps == 0 {
        return Err(Error::Config("a batch needs at least one scene and one step".into()));
    }
    let frontend = MelFrontend::new(*mel)?;
    let codec = MockCodec::default();
    let duration_ms = spec.chunk_ms * cfg.steps as u32;
    let scenes = (0..n_scenes as u64)
        .map(|i| {
            let scene = synth_scene_with_reference(seed.wrapping_mul(1_000_003).wrapping_add(i), duration_ms, cfg.reference_ms, cfg.snr_db);
            let target = codec.encode_samples(scene.target.samples())?;
            Ok(TrainingScene {
                reference_mel: frontend.process_offline(scene.reference.samples())?.frames,
                mixture_mel: frontend.process_offline(scene.mixture.samples())?.frames,
                gt_tokens: target.first_q,
                gt_latents: codec.project(scene.target.samples())?.vectors,
                scene,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainingBatch { spec: *spec, scenes })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Gd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Self::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub strategy: Strategy,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1e-2, lambda1: 1.0, lambda2: 1.0, strategy: Strategy::Interleaved, optimizer: Optimizer::Gd }
    }
}

/// Loss nodes of one teacher-forced pass.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub nll: NodeId,
    pub reg: NodeId,
    pub total: NodeId,
}

/// Teacher-forced layouts for a scene, built and validated with the same
/// builder the streaming engine uses.
pub fn teacher_forced_layouts(
    reference: &Tensor2,
    mixture: &Tensor2,
    tokens: &[u32],
    m: usize,
    strategy: Strategy,
) -> Result<(Layout, Layout)> {
    let steps = tokens.len() / m;
    if steps * m != tokens.len() || mixture.rows() != tokens.len() {
        return Err(Error::Shape(format!("{} mixture frames and {} tokens for {m}-frame chunks", mixture.rows(), tokens.len())));
    }
    let mut selm = build_prefix(reference, Stage::Selm, Strategy::Interleaved, m)?;
    let mut arlm = build_prefix(reference, Stage::Arlm, strategy, m)?;
    for t in 1..=steps {
        let mix = mixture.slice_rows((t - 1) * m, t * m);
        let ids = &tokens[(t - 1) * m..t * m];
        selm.append_selm_step(t, &mix, ids)?;
        arlm.append_arlm_step(t, &mix, ids)?;
    }
    selm.validate()?;
    arlm.validate()?;
    Ok((selm, arlm))
}

/// Embeds `layout` on the tape. Reference and mixture rows come from the
/// encoder nodes, special and token rows from the model parameters.
fn embed_graph(g: &mut Graph, cfg: &ModelConfig, params: &ParamSet, kind: LmKind, layout: &Layout, enc_ref: NodeId, enc_mix: NodeId) -> Result<NodeId> {
    let p = kind.prefix();
    let sep = g.param(params, &format!("{p}.sep"))?;
    let tok = g.param(params, &format!("{p}.tok_emb"))?;
    let task = match kind {
        LmKind::Selm => Some(g.param(params, "selm.task")?),
        LmKind::Arlm => None,
    };
    let m = layout.frames_per_chunk();
    let mut ref_seen = 0;
    let mut mix_seen: HashMap<usize, usize> = HashMap::new();
    let mut sources = Vec::with_capacity(layout.len());
    for role in layout.positions() {
        sources.push(match role {
            PositionRole::Ref(_) => {
                ref_seen += 1;
                (enc_ref, ref_seen - 1)
            }
            PositionRole::Sep => (sep, 0),
            PositionRole::Task { .. } => (task.ok_or_else(|| Error::UnsupportedLayout("task marker in an acoustic layout".into()))?, 0),
            PositionRole::Mix { step, .. } => {
                let j = mix_seen.entry(step).or_insert(0);
                *j += 1;
                (enc_mix, (step - 1) * m + *j - 1)
            }
            PositionRole::Token { id, .. } => (tok, id as usize),
        });
    }
    let x = g.gather(sources)?;
    let pe = g.constant(position_table(layout.len(), 0, cfg.d_model));
    Ok(g.add(x, pe)?)
}

/// Builds the teacher-forced loss of one scene on `g`.
pub fn scene_loss_graph(g: &mut Graph, cfg: &ModelConfig, params: &ParamSet, scene: &TrainingScene, m: usize, tc: &TrainConfig) -> Result<LossNodes> {
    let enc_ref = encode_graph(g, cfg, params, &scene.reference_mel)?;
    let enc_mix = encode_graph(g, cfg, params, &scene.mixture_mel)?;
    let (selm, arlm) = teacher_forced_layouts(g.value(enc_ref), g.value(enc_mix), &scene.gt_tokens, m, tc.strategy)?;
    let steps = selm.steps();

    let x = embed_graph(g, cfg, params, LmKind::Selm, &selm, enc_ref, enc_mix)?;
    let h = forward_graph(g, cfg, params, LmKind::Selm, x)?;
    let rows: Vec<(NodeId, usize)> = (1..=steps).flat_map(|t| selm.prediction_positions(t)).map(|r| (h, r)).collect();
    let h = g.gather(rows)?;
    let (w, b) = (g.param(params, "selm.out.w")?, g.param(params, "selm.out.b")?);
    let logits = g.linear(h, w, Some(b))?;
    let nll = g.cross_entropy(logits, scene.gt_tokens.iter().map(|&id| Some(id as usize)).collect())?;

    let x = embed_graph(g, cfg, params, LmKind::Arlm, &arlm, enc_ref, enc_mix)?;
    let h = forward_graph(g, cfg, params, LmKind::Arlm, x)?;
    let rows: Vec<(NodeId, usize)> = (1..=steps).flat_map(|t| arlm.token_positions(t)).map(|r| (h, r)).collect();
    let h = g.gather(rows)?;
    let (w, b) = (g.param(params, "arlm.proj.w")?, g.param(params, "arlm.proj.b")?);
    let latents = g.linear(h, w, Some(b))?;
    let reg = g.mse(latents, scene.gt_latents.clone())?;

    let total = g.lin_comb(nll, reg, tc.lambda1, tc.lambda2)?;
    Ok(LossNodes { nll, reg, total })
}

/// Mean loss over the batch on `g`.
pub fn batch_loss_graph(g: &mut Graph, cfg: &ModelConfig, params: &ParamSet, batch: &TrainingBatch, tc: &TrainConfig) -> Result<LossNodes> {
    let m = batch.spec.codec_frames_per_chunk;
    let w = 1.0 / batch.scenes.len() as f64;
    let mut acc: Option<LossNodes> = None;
    for scene in &batch.scenes {
        let s = scene_loss_graph(g, cfg, params, scene, m, tc)?;
        acc = Some(match acc {
            None => LossNodes { nll: g.lin_comb(s.nll, s.nll, w, 0.0)?, reg: g.lin_comb(s.reg, s.reg, w, 0.0)?, total: g.lin_comb(s.total, s.total, w, 0.0)? },
            Some(a) => LossNodes { nll: g.lin_comb(a.nll, s.nll, 1.0, w)?, reg: g.lin_comb(a.reg, s.reg, 1.0, w)?, total: g.lin_comb(a.total, s.total, 1.0, w)? },
        });
    }
    acc.ok_or_else(|| Error::Config("empty batch".into()))
}

/// Loss and gradients of the batch at `params`.
pub fn loss_and_grad(cfg: &ModelConfig, params: &ParamSet, batch: &TrainingBatch, tc: &TrainConfig) -> Result<(LossBreakdown, ParamSet)> {
    let mut g = Graph::new();
    let nodes = batch_loss_graph(&mut g, cfg, params, batch, tc)?;
    let loss = LossBreakdown {
        nll: g.scalar(nodes.nll),
        reg: g.scalar(nodes.reg),
        total: g.scalar(nodes.total),
        lambda1: tc.lambda1,
        lambda2: tc.lambda2,
    };
    let grads = g.backward(nodes.total, params)?;
    Ok((loss, grads))
}

/// Mutable training state: parameters plus optimizer moments.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub train: TrainConfig,
    moments: Option<(ParamSet, ParamSet)>,
    steps: u64,
}

impl Trainer {
    pub fn new(config: ModelConfig, params: ParamSet, train: TrainConfig) -> Self {
        Self { config, params, train, moments: None, steps: 0 }
    }

    /// One update; returns the loss before the update.
    pub fn step(&mut self, batch: &TrainingBatch) -> Result<LossBreakdown> {
        let (loss, grads) = loss_and_grad(&self.config, &self.params, batch, &self.train)?;
        self.steps += 1;
        let lr = self.train.lr;
        match self.train.optimizer {
            Optimizer::Gd => {
                if lr != 0.0 {
                    self.params.axpy(-lr, &grads)?;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let (m, v) = self.moments.get_or_insert_with(|| (self.params.zeros_like(), self.params.zeros_like()));
                let c1 = 1.0 - beta1.powi(self.steps as i32);
                let c2 = 1.0 - beta2.powi(self.steps as i32);
                for i in 0..grads.len() {
                    let gr = grads.by_index(i).data();
                    let (mi, vi) = (m.by_index_mut(i).data_mut(), v.by_index_mut(i).data_mut());
                    let p = self.params.by_index_mut(i).data_mut();
                    for k in 0..gr.len() {
                        mi[k] = beta1 * mi[k] + (1.0 - beta1) * gr[k];
                        vi[k] = beta2 * vi[k] + (1.0 - beta2) * gr[k] * gr[k];
                        p[k] -= lr * (mi[k] / c1) / ((vi[k] / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(loss)
    }
}

/// One plain gradient-descent update of `params`; returns the pre-update loss.
pub fn train_step(cfg: &ModelConfig, params: &mut ParamSet, batch: &TrainingBatch, lr: f64) -> Result<LossBreakdown> {
    let tc = TrainConfig { lr, ..TrainConfig::default() };
    let (loss, grads) = loss_and_grad(cfg, params, batch, &tc)?;
    if lr != 0.0 {
        params.axpy(-lr, &grads)?;
    }
    Ok(loss)
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub step: usize,
    pub nll: f64,
    pub reg: f64,
    pub total: f64,
}

/// Fixed-seed single-batch training run.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub chunk_ms: u32,
    pub batch: BatchConfig,
    pub n_scenes: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig { d_model: 16, d_ff: 32, ..ModelConfig::micro(1) },
            train: TrainConfig::default(),
            chunk_ms: 80,
            batch: BatchConfig { steps: 4, reference_ms: 400, snr_db: 0.0 },
            n_scenes: 1,
            iterations: 500,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyRun {
    pub trainer: Trainer,
    pub batch: TrainingBatch,
    pub log: Vec<LogLine>,
}

/// Trains on one fixed batch, calling `on_step` with each pre-update loss.
pub fn train_toy(cfg: &ToyConfig, mut on_step: impl FnMut(&LogLine)) -> Result<ToyRun> {
    let spec = crate::frontend::validate_chunk_spec(cfg.chunk_ms)?;
    let mel = MelConfig { n_mels: cfg.model.n_mels, ..MelConfig::default() };
    let batch = make_training_batch_with(cfg.seed, &spec, cfg.n_scenes, &cfg.batch, &mel)?;
    let mut trainer = Trainer::new(cfg.model.clone(), cfg.model.init_params()?, cfg.train);
    let mut log = Vec::with_capacity(cfg.iterations);
    for step in 0..cfg.iterations {
        let l = trainer.step(&batch)?;
        let line = LogLine { step, nll: l.nll, reg: l.reg, total: l.total };
        on_step(&line);
        log.push(line);
    }
    Ok(ToyRun { trainer, batch, log })
}
