//! Streaming extraction sessions.
//!
//! Per chunk: log-mel, causal encoding, greedy semantic decoding on the
//! interleaved semantic layout, one acoustic pass on the acoustic layout, then
//! codec decoding of the refined hidden states.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use streamtse_nn::{load_checkpoint, save_checkpoint, Checkpoint, ParamSet, Tensor2};

use crate::codec::{codec_decode, refine_input, HiddenChunk, HistoryDepth, MockCodec, TokenChunk};
use crate::encoder::{encode_chunk, encode_offline, encode_reference, EncoderState, RefEmbedding};
use crate::error::{Error, Result};
use crate::frontend::{
    chunk_waveform, log_mel, validate_chunk_spec, AudioChunk, ChunkSpec, FrontendState, MelConfig, MelFrontend, Waveform,
    CODEC_FRAME_SAMPLES,
};
use crate::layout::{build_prefix, Layout, PositionRole, Stage, Strategy};
use crate::lm::{arlm_project, embed_positions, forward_cached, forward_full, selm_logits, KvCache};
use crate::model::{LmKind, ModelConfig, END_TOKEN};

/// Model parameters plus the fixed codec and frontend.
#[derive(Debug)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub codec: MockCodec,
    pub frontend: MelFrontend,
}

impl ModelBundle {
    /// Freshly initialised parameters for `config`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let params = config.init_params()?;
        Self::with_params(config, params)
    }

    pub fn with_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let frontend = MelFrontend::new(MelConfig { n_mels: config.n_mels, ..MelConfig::default() })?;
        Ok(Self { config, params, codec: MockCodec::default(), frontend })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({ "model": self.config });
        save_checkpoint(path, &Checkpoint::new(self.params.clone(), meta))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = load_checkpoint(path)?;
        let config: ModelConfig = serde_json::from_value(ckpt.meta.get("model").cloned().unwrap_or_default())
            .map_err(|e| Error::Config(format!("checkpoint has no usable model config: {e}")))?;
        let expected = config.init_params()?;
        let names: Vec<&str> = expected.names().collect();
        if names != ckpt.params.names().collect::<Vec<_>>() {
            return Err(Error::Config("checkpoint parameters do not match its model config".into()));
        }
        Self::with_params(config, ckpt.params)
    }
}

/// Steps (1-based) at which the semantic model is forced to emit the end token.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultPlan {
    pub null_steps: BTreeSet<usize>,
}

impl FaultPlan {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn at_steps(steps: impl IntoIterator<Item = usize>) -> Self {
        Self { null_steps: steps.into_iter().collect() }
    }

    pub fn forces(&self, step: usize) -> bool {
        self.null_steps.contains(&step)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionConfig {
    pub chunk_ms: u32,
    /// Acoustic layout strategy; the semantic layout is always interleaved.
    pub strategy: Strategy,
    pub history: HistoryDepth,
    pub faults: FaultPlan,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self { chunk_ms: 560, strategy: Strategy::Interleaved, history: HistoryDepth::One, faults: FaultPlan::none() }
    }
}

impl SessionConfig {
    pub fn new(chunk_ms: u32, strategy: Strategy, history: HistoryDepth) -> Self {
        Self { chunk_ms, strategy, history, faults: FaultPlan::none() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub step: usize,
    pub tokens: TokenChunk,
    pub hidden: HiddenChunk,
    pub audio: AudioChunk,
    pub valid: bool,
    /// Rows of the codec decoder input (current chunk plus history).
    pub decoder_rows: usize,
}

/// Cache cost of one stage in one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCost {
    pub appended: usize,
    pub recomputed: usize,
    pub invalidated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    /// Positions appended over both stages.
    pub appended: usize,
    /// Positions recomputed after an invalidation, over both stages.
    pub recomputed: usize,
    pub valid: bool,
    pub selm: StageCost,
    pub arlm: StageCost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub chunk_ms: u32,
    pub strategy: String,
    pub history_depth: String,
    pub steps: Vec<StepRecord>,
    pub valid_fraction: f64,
}

impl SessionReport {
    pub fn all_valid(&self) -> bool {
        self.steps.iter().all(|s| s.valid)
    }

    pub fn invalidations(&self) -> usize {
        self.steps.iter().map(|s| s.selm.invalidated as usize + s.arlm.invalidated as usize).sum()
    }
}

/// One streaming extraction over a shared, read-only model.
#[derive(Debug)]
pub struct Session<'m> {
    bundle: &'m ModelBundle,
    config: SessionConfig,
    spec: ChunkSpec,
    reference: RefEmbedding,
    selm_layout: Layout,
    arlm_layout: Layout,
    selm_cache: KvCache,
    arlm_cache: KvCache,
    encoder: EncoderState,
    frontend: FrontendState,
    history: Vec<HiddenChunk>,
    step: usize,
    emitted: Vec<f64>,
    true_len: usize,
    ledger: Vec<StepRecord>,
}

/// Reference samples cut to whole 40 ms frames.
fn reference_mel(bundle: &ModelBundle, reference: &Waveform) -> Result<Tensor2> {
    let n = reference.len() / CODEC_FRAME_SAMPLES * CODEC_FRAME_SAMPLES;
    if n == 0 {
        return Err(Error::EmptyReference);
    }
    Ok(bundle.frontend.process_offline(&reference.samples()[..n])?.frames)
}

fn prefix_roles(reference: &Tensor2) -> Vec<PositionRole<'_>> {
    let mut roles: Vec<PositionRole<'_>> = reference.iter_rows().map(PositionRole::Ref).collect();
    roles.push(PositionRole::Sep);
    roles
}

/// Encodes the reference and primes both caches with the static prefix.
pub fn open_session<'m>(bundle: &'m ModelBundle, config: SessionConfig, reference: &Waveform) -> Result<Session<'m>> {
    let spec = validate_chunk_spec(config.chunk_ms)?;
    let m = spec.codec_frames_per_chunk;
    let cfg = &bundle.config;
    let mel = reference_mel(bundle, reference)?;
    let e_ref = encode_reference(cfg, &bundle.params, &crate::frontend::MelFrames { frames: mel })?;
    let selm_layout = build_prefix(&e_ref.frames, Stage::Selm, Strategy::Interleaved, m)?;
    let arlm_layout = build_prefix(&e_ref.frames, Stage::Arlm, config.strategy, m)?;

    let roles = prefix_roles(&e_ref.frames);
    let mut selm_cache = KvCache::for_model(cfg, LmKind::Selm);
    let x = embed_positions(cfg, &bundle.params, LmKind::Selm, &roles, 0)?;
    forward_cached(cfg, &bundle.params, LmKind::Selm, &mut selm_cache, &x)?;
    let mut arlm_cache = KvCache::for_model(cfg, LmKind::Arlm);
    let x = embed_positions(cfg, &bundle.params, LmKind::Arlm, &roles, 0)?;
    forward_cached(cfg, &bundle.params, LmKind::Arlm, &mut arlm_cache, &x)?;

    Ok(Session {
        bundle,
        spec,
        reference: e_ref,
        selm_layout,
        arlm_layout,
        selm_cache,
        arlm_cache,
        encoder: EncoderState::new(cfg),
        frontend: bundle.frontend.initial_state(),
        history: Vec::new(),
        step: 0,
        emitted: Vec::new(),
        true_len: 0,
        ledger: Vec::new(),
        config,
    })
}

impl Session<'_> {
    pub fn spec(&self) -> &ChunkSpec {
        &self.spec
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn reference(&self) -> &RefEmbedding {
        &self.reference
    }

    pub fn selm_layout(&self) -> &Layout {
        &self.selm_layout
    }

    pub fn arlm_layout(&self) -> &Layout {
        &self.arlm_layout
    }

    pub fn selm_cache(&self) -> &KvCache {
        &self.selm_cache
    }

    pub fn arlm_cache(&self) -> &KvCache {
        &self.arlm_cache
    }

    pub fn ledger(&self) -> &[StepRecord] {
        &self.ledger
    }

    /// The most recent hidden chunk, if history is kept.
    pub fn h_prev(&self) -> Option<&HiddenChunk> {
        self.history.last()
    }

    /// Samples emitted so far, before truncation to the input length.
    pub fn emitted_samples(&self) -> usize {
        self.emitted.len()
    }

    /// Runs one chunk through the whole pipeline.
    pub fn process_chunk(&mut self, chunk: &AudioChunk) -> Result<StepOutput> {
        if chunk.samples.len() != self.spec.samples_per_chunk || chunk.valid_len > chunk.samples.len() {
            return Err(Error::Shape(format!(
                "chunk has {} samples ({} valid), expected {}",
                chunk.samples.len(),
                chunk.valid_len,
                self.spec.samples_per_chunk
            )));
        }
        let bundle = self.bundle;
        let (cfg, params) = (&bundle.config, &bundle.params);
        let m = self.spec.codec_frames_per_chunk;
        let t = self.step + 1;

        let (mel, frontend) = log_mel(&bundle.frontend, chunk, &self.frontend)?;
        let (mix, encoder) = encode_chunk(cfg, params, &mel, &self.encoder)?;
        if mix.frames.rows() != m {
            return Err(Error::Shape(format!("{} encoder frames for a {m}-frame chunk", mix.frames.rows())));
        }

        // semantic stage: append mixture frames and the task marker, then
        // decode m tokens greedily, appending each
        let selm_start = self.selm_cache.len();
        let mut roles: Vec<PositionRole<'_>> = mix.frames.iter_rows().map(|v| PositionRole::Mix { vector: v, step: t }).collect();
        roles.push(PositionRole::Task { step: t });
        let x = embed_positions(cfg, params, LmKind::Selm, &roles, selm_start)?;
        let out = forward_cached(cfg, params, LmKind::Selm, &mut self.selm_cache, &x)?;
        let mut last = out.slice_rows(out.rows() - 1, out.rows());
        let mut tokens: Vec<u32> = Vec::with_capacity(m);
        let mut fed = 0;
        let mut valid = true;
        while tokens.len() < m {
            let id = if self.config.faults.forces(t) && tokens.is_empty() {
                END_TOKEN
            } else {
                selm_logits(params, &last)?.argmax_row(0) as u32
            };
            if id == END_TOKEN {
                valid = false;
                tokens.resize(m, END_TOKEN);
                break;
            }
            tokens.push(id);
            if tokens.len() < m {
                let pos = self.selm_cache.len();
                let x = embed_positions(cfg, params, LmKind::Selm, &[PositionRole::Token { id, step: t }], pos)?;
                last = forward_cached(cfg, params, LmKind::Selm, &mut self.selm_cache, &x)?;
                fed += 1;
            }
        }
        let rest: Vec<PositionRole<'_>> = tokens[fed..].iter().map(|&id| PositionRole::Token { id, step: t }).collect();
        let x = embed_positions(cfg, params, LmKind::Selm, &rest, self.selm_cache.len())?;
        forward_cached(cfg, params, LmKind::Selm, &mut self.selm_cache, &x)?;
        let selm_delta = self.selm_layout.append_selm_step(t, &mix.frames, &tokens)?;
        debug_assert_eq!(self.selm_cache.len(), self.selm_layout.len());
        let selm_cost = StageCost {
            appended: self.selm_cache.len() - selm_start,
            recomputed: 0,
            invalidated: selm_delta.invalidate_from.is_some(),
        };

        // acoustic stage
        let arlm_before = self.arlm_cache.len();
        let arlm_delta = self.arlm_layout.append_arlm_step(t, &mix.frames, &tokens)?;
        let from = arlm_delta.invalidate_from.unwrap_or(arlm_before);
        self.arlm_cache.invalidate_from(from)?;
        let positions = self.arlm_layout.positions();
        let x = embed_positions(cfg, params, LmKind::Arlm, &positions[from..], from)?;
        let out = forward_cached(cfg, params, LmKind::Arlm, &mut self.arlm_cache, &x)?;
        let tok = self.arlm_layout.token_positions(t);
        let hidden = HiddenChunk::new(arlm_project(params, &out.slice_rows(tok.start - from, tok.end - from))?)?;
        let arlm_cost = StageCost {
            appended: arlm_delta.appended_positions,
            recomputed: if arlm_delta.invalidate_from.is_some() { self.arlm_layout.len() - from } else { 0 },
            invalidated: arlm_delta.invalidate_from.is_some(),
        };

        // waveform
        let input = refine_input(&self.history, &hidden, self.config.history)?;
        let decoder_rows = input.rows();
        let mut audio = if valid {
            codec_decode(&bundle.codec, &input, &self.spec)?
        } else {
            AudioChunk::silence(chunk.index, self.spec.samples_per_chunk)
        };
        audio.index = chunk.index;
        audio.valid_len = chunk.valid_len;

        match self.config.history {
            HistoryDepth::None => {}
            HistoryDepth::One => self.history = vec![hidden.clone()],
            HistoryDepth::Full => self.history.push(hidden.clone()),
        }
        self.emitted.extend_from_slice(&audio.samples);
        self.true_len += chunk.valid_len;
        self.frontend = frontend;
        self.encoder = encoder;
        self.step = t;
        self.ledger.push(StepRecord {
            t,
            appended: selm_cost.appended + arlm_cost.appended,
            recomputed: selm_cost.recomputed + arlm_cost.recomputed,
            valid,
            selm: selm_cost,
            arlm: arlm_cost,
        });
        Ok(StepOutput { step: t, tokens: TokenChunk::semantic(tokens), hidden, audio, valid, decoder_rows })
    }

    fn report(&self) -> SessionReport {
        let n = self.ledger.len();
        let valid = self.ledger.iter().filter(|s| s.valid).count();
        SessionReport {
            chunk_ms: self.spec.chunk_ms,
            strategy: self.config.strategy.to_string(),
            history_depth: self.config.history.to_string(),
            steps: self.ledger.clone(),
            valid_fraction: if n == 0 { 1.0 } else { valid as f64 / n as f64 },
        }
    }
}

/// Concatenated audio truncated to the true input length, plus the report.
pub fn close_session(session: Session<'_>) -> (Waveform, SessionReport) {
    let report = session.report();
    let mut samples = session.emitted;
    samples.truncate(session.true_len);
    (Waveform::from_clamped(samples), report)
}

/// Opens a session, streams every chunk of `mixture` and closes it.
pub fn run_session(
    bundle: &ModelBundle,
    config: SessionConfig,
    reference: &Waveform,
    mixture: &Waveform,
) -> Result<(Waveform, SessionReport, Vec<StepOutput>)> {
    let mut session = open_session(bundle, config, reference)?;
    let chunks = chunk_waveform(mixture, session.spec());
    let mut outputs = Vec::with_capacity(chunks.len());
    for c in &chunks {
        outputs.push(session.process_chunk(c)?);
    }
    let (wave, report) = close_session(session);
    Ok((wave, report, outputs))
}

/// Final hidden rows of a single uncached causal pass over `layout`.
pub fn offline_reference_forward(bundle: &ModelBundle, layout: &Layout) -> Result<Tensor2> {
    let kind = match layout.stage() {
        Stage::Selm => LmKind::Selm,
        Stage::Arlm => LmKind::Arlm,
    };
    let x = embed_positions(&bundle.config, &bundle.params, kind, &layout.positions(), 0)?;
    forward_full(&bundle.config, &bundle.params, kind, &x)
}

/// Per-step results of the uncached oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutput {
    pub tokens: Vec<Vec<u32>>,
    pub hidden: Vec<Tensor2>,
    pub valid: Vec<bool>,
}

/// Recomputes a whole session without caches or streaming state: offline
/// features and encoder, greedy decoding by repeated full forwards, and a full
/// acoustic forward over the layout after each step.
pub fn offline_oracle(bundle: &ModelBundle, config: &SessionConfig, reference: &Waveform, mixture: &Waveform) -> Result<OracleOutput> {
    let spec = validate_chunk_spec(config.chunk_ms)?;
    let m = spec.codec_frames_per_chunk;
    let (cfg, params) = (&bundle.config, &bundle.params);
    let e_ref = encode_offline(cfg, params, &reference_mel(bundle, reference)?)?;
    let chunks = chunk_waveform(mixture, &spec);
    let padded: Vec<f64> = chunks.iter().flat_map(|c| c.samples.iter().copied()).collect();
    let mix = encode_offline(cfg, params, &bundle.frontend.process_offline(&padded)?.frames)?;

    let mut x = embed_positions(cfg, params, LmKind::Selm, &prefix_roles(&e_ref), 0)?;
    let mut arlm = build_prefix(&e_ref, Stage::Arlm, config.strategy, m)?;
    let mut out = OracleOutput { tokens: Vec::new(), hidden: Vec::new(), valid: Vec::new() };
    for t in 1..=chunks.len() {
        let frames = mix.slice_rows((t - 1) * m, t * m);
        let mut roles: Vec<PositionRole<'_>> = frames.iter_rows().map(|v| PositionRole::Mix { vector: v, step: t }).collect();
        roles.push(PositionRole::Task { step: t });
        x.append_rows(&embed_positions(cfg, params, LmKind::Selm, &roles, x.rows())?)?;
        let mut tokens = Vec::with_capacity(m);
        let mut valid = true;
        while tokens.len() < m {
            let id = if config.faults.forces(t) && tokens.is_empty() {
                END_TOKEN
            } else {
                let h = forward_full(cfg, params, LmKind::Selm, &x)?;
                selm_logits(params, &h.slice_rows(h.rows() - 1, h.rows()))?.argmax_row(0) as u32
            };
            if id == END_TOKEN {
                valid = false;
                tokens.resize(m, END_TOKEN);
                break;
            }
            tokens.push(id);
            if tokens.len() < m {
                x.append_rows(&embed_positions(cfg, params, LmKind::Selm, &[PositionRole::Token { id, step: t }], x.rows())?)?;
            }
        }
        let fed = x.rows() - (e_ref.rows() + 1 + (t - 1) * (2 * m + 1) + m + 1);
        let rest: Vec<PositionRole<'_>> = tokens[fed..].iter().map(|&id| PositionRole::Token { id, step: t }).collect();
        x.append_rows(&embed_positions(cfg, params, LmKind::Selm, &rest, x.rows())?)?;

        arlm.append_arlm_step(t, &frames, &tokens)?;
        let h = offline_reference_forward(bundle, &arlm)?;
        let tok = arlm.token_positions(t);
        out.hidden.push(arlm_project(params, &h.slice_rows(tok.start, tok.end))?);
        out.tokens.push(tokens);
        out.valid.push(valid);
    }
    Ok(out)
}
