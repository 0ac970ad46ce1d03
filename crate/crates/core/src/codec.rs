//! Deterministic stand-in for a 16 kHz residual-vector-quantised codec.
//!
//! Each 640-sample frame is projected onto a fixed orthonormal basis of 32
//! vectors (sine/cosine pairs at 50..=800 Hz, mixed by a seeded rotation),
//! giving a 32-dim latent. The latent is quantised greedily by 32 codebooks
//! of 1024 entries. Decoding applies the transposed basis; when history rows
//! precede the current chunk, the first 10 ms are crossfaded from the
//! continuation of the previous frame.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use streamtse_nn::Tensor2;

use crate::error::{Error, Result};
use crate::frontend::{AudioChunk, ChunkSpec, CODEC_FRAME_SAMPLES, SAMPLES_PER_MS, SAMPLE_RATE_HZ};

pub const NUM_QUANTIZERS: usize = 32;
pub const CODEBOOK_SIZE: usize = 1024;
pub const LATENT_DIM: usize = 32;
pub const CROSSFADE_SAMPLES: usize = 10 * SAMPLES_PER_MS;
pub const DEFAULT_CODEC_SEED: u64 = 0xC0DEC;

/// Spread of the first codebook; later stages shrink geometrically.
const STAGE0_STD: f64 = 0.6;
const STAGE_DECAY: f64 = 0.8;

/// One frame's token stack, one id per quantizer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecFrameTokens {
    pub ids: Vec<u32>,
}

/// Tokens of one chunk. `first_q` holds the quantizer-0 (semantic) ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenChunk {
    pub first_q: Vec<u32>,
    pub full: Option<Vec<CodecFrameTokens>>,
}

impl TokenChunk {
    pub fn semantic(first_q: Vec<u32>) -> Self {
        Self { first_q, full: None }
    }

    pub fn len(&self) -> usize {
        self.first_q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_q.is_empty()
    }
}

/// Continuous per-frame latents (`frames x LATENT_DIM`).
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenChunk {
    pub vectors: Tensor2,
}

impl HiddenChunk {
    pub fn new(vectors: Tensor2) -> Result<Self> {
        if vectors.cols() != LATENT_DIM {
            return Err(Error::Shape(format!("hidden chunk has {} columns, expected {LATENT_DIM}", vectors.cols())));
        }
        if !vectors.is_finite() {
            return Err(Error::Shape("hidden chunk has non-finite entries".into()));
        }
        Ok(Self { vectors })
    }

    pub fn frames(&self) -> usize {
        self.vectors.rows()
    }
}

/// How much previous-chunk context the decoder sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryDepth {
    None,
    One,
    Full,
}

impl std::str::FromStr for HistoryDepth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "one" => Ok(Self::One),
            "full" => Ok(Self::Full),
            other => Err(Error::Config(format!("unknown history depth `{other}` (none|one|full)"))),
        }
    }
}

impl std::fmt::Display for HistoryDepth {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::One => "one",
            Self::Full => "full",
        })
    }
}

#[derive(Debug, Clone)]
pub struct MockCodec {
    /// `LATENT_DIM x 640`, orthonormal rows.
    basis: Tensor2,
    /// `NUM_QUANTIZERS` codebooks of `CODEBOOK_SIZE x LATENT_DIM`.
    codebooks: Vec<Tensor2>,
}

fn harmonic_basis() -> Tensor2 {
    let n = CODEC_FRAME_SAMPLES;
    let sr = SAMPLE_RATE_HZ as f64;
    let norm = (2.0 / n as f64).sqrt();
    let mut b = Tensor2::zeros(LATENT_DIM, n);
    for k in 0..LATENT_DIM / 2 {
        let f = 50.0 * (k + 1) as f64;
        for i in 0..n {
            let a = 2.0 * PI * f * i as f64 / sr;
            b.set(2 * k, i, norm * a.sin());
            b.set(2 * k + 1, i, norm * a.cos());
        }
    }
    b
}

/// Seeded orthogonal matrix by Gram-Schmidt on Gaussian rows.
fn random_rotation(rng: &mut ChaCha8Rng, n: usize) -> Tensor2 {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut q = Tensor2::zeros(n, n);
    for r in 0..n {
        let mut v: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
        for p in 0..r {
            let dot: f64 = v.iter().zip(q.row(p)).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q.row(p)).for_each(|(a, b)| *a -= dot * b);
        }
        let len = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        q.row_mut(r).iter_mut().zip(&v).for_each(|(o, x)| *o = x / len);
    }
    q
}

impl Default for MockCodec {
    fn default() -> Self {
        Self::new(DEFAULT_CODEC_SEED)
    }
}

impl MockCodec {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rot = random_rotation(&mut rng, LATENT_DIM);
        let basis = rot.matmul(&harmonic_basis()).expect("32x32 * 32x640");
        let codebooks = (0..NUM_QUANTIZERS)
            .map(|s| {
                let normal = Normal::new(0.0, STAGE0_STD * STAGE_DECAY.powi(s as i32)).expect("positive std");
                let data = (0..CODEBOOK_SIZE * LATENT_DIM).map(|_| normal.sample(&mut rng)).collect();
                Tensor2::from_vec(CODEBOOK_SIZE, LATENT_DIM, data).expect("codebook shape")
            })
            .collect();
        Self { basis, codebooks }
    }

    fn check_frames(samples: &[f64]) -> Result<usize> {
        if samples.len() % CODEC_FRAME_SAMPLES != 0 {
            return Err(Error::Length { len: samples.len(), frame: CODEC_FRAME_SAMPLES });
        }
        Ok(samples.len() / CODEC_FRAME_SAMPLES)
    }

    /// Pre-quantisation latents, one row per 640-sample frame.
    pub fn project(&self, samples: &[f64]) -> Result<HiddenChunk> {
        let n = Self::check_frames(samples)?;
        let mut z = Tensor2::zeros(n, LATENT_DIM);
        for f in 0..n {
            let frame = &samples[f * CODEC_FRAME_SAMPLES..(f + 1) * CODEC_FRAME_SAMPLES];
            for d in 0..LATENT_DIM {
                z.set(f, d, self.basis.row(d).iter().zip(frame).map(|(a, b)| a * b).sum());
            }
        }
        HiddenChunk::new(z)
    }

    /// Greedy residual quantisation of one latent vector.
    pub fn quantize(&self, latent: &[f64]) -> CodecFrameTokens {
        let mut residual = latent.to_vec();
        let mut ids = Vec::with_capacity(NUM_QUANTIZERS);
        for book in &self.codebooks {
            let mut best = (0usize, f64::INFINITY);
            for (i, code) in book.iter_rows().enumerate() {
                let d: f64 = residual.iter().zip(code).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.1 {
                    best = (i, d);
                }
            }
            residual.iter_mut().zip(book.row(best.0)).for_each(|(r, c)| *r -= c);
            ids.push(best.0 as u32);
        }
        CodecFrameTokens { ids }
    }

    /// Sum of the selected codewords.
    pub fn dequantize(&self, tokens: &CodecFrameTokens) -> Vec<f64> {
        let mut z = vec![0.0; LATENT_DIM];
        for (book, &id) in self.codebooks.iter().zip(&tokens.ids) {
            z.iter_mut().zip(book.row(id as usize)).for_each(|(a, b)| *a += b);
        }
        z
    }

    pub fn encode_samples(&self, samples: &[f64]) -> Result<TokenChunk> {
        let z = self.project(samples)?;
        let full: Vec<CodecFrameTokens> = z.vectors.iter_rows().map(|row| self.quantize(row)).collect();
        Ok(TokenChunk { first_q: full.iter().map(|f| f.ids[0]).collect(), full: Some(full) })
    }

    /// Decodes one latent row to a 640-sample frame.
    pub fn synthesize_frame(&self, latent: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; CODEC_FRAME_SAMPLES];
        for (d, &z) in latent.iter().enumerate() {
            out.iter_mut().zip(self.basis.row(d)).for_each(|(o, b)| *o += z * b);
        }
        out
    }
}

pub fn codec_encode(codec: &MockCodec, chunk: &AudioChunk) -> Result<TokenChunk> {
    codec.encode_samples(&chunk.samples)
}

/// Decoder input for the current chunk given earlier chunks (oldest first).
pub fn refine_input(history: &[HiddenChunk], current: &HiddenChunk, depth: HistoryDepth) -> Result<Tensor2> {
    let context: &[HiddenChunk] = match depth {
        HistoryDepth::None => &[],
        HistoryDepth::One => &history[history.len().saturating_sub(1)..],
        HistoryDepth::Full => history,
    };
    let mut parts: Vec<&Tensor2> = context.iter().map(|h| &h.vectors).collect();
    parts.push(&current.vectors);
    Ok(Tensor2::vstack(&parts)?)
}

/// Emits the audio of the last `codec_frames_per_chunk` rows of `input`.
pub fn codec_decode(codec: &MockCodec, input: &Tensor2, spec: &ChunkSpec) -> Result<AudioChunk> {
    let m = spec.codec_frames_per_chunk;
    if input.cols() != LATENT_DIM || input.rows() < m || input.rows() % m != 0 {
        return Err(Error::Shape(format!(
            "decoder input {:?} is not k x {m} rows of {LATENT_DIM} latents",
            input.shape()
        )));
    }
    let first = input.rows() - m;
    let mut samples = Vec::with_capacity(spec.samples_per_chunk);
    for r in first..input.rows() {
        samples.extend(codec.synthesize_frame(input.row(r)));
    }
    if first > 0 {
        // the basis is periodic in the frame, so the previous frame continues
        // with its own first samples
        let prev = codec.synthesize_frame(input.row(first - 1));
        for (n, s) in samples.iter_mut().take(CROSSFADE_SAMPLES).enumerate() {
            let w = (n as f64 + 0.5) / CROSSFADE_SAMPLES as f64;
            *s = (1.0 - w) * prev[n] + w * *s;
        }
    }
    Ok(AudioChunk { index: 0, samples, valid_len: spec.samples_per_chunk })
}

/// One line per frame, 32 space-separated ids.
pub fn token_dump(frames: &[CodecFrameTokens]) -> String {
    let mut out = String::new();
    for f in frames {
        let line: Vec<String> = f.ids.iter().map(u32::to_string).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_token_dump(text: &str) -> Result<Vec<CodecFrameTokens>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let ids = line
                .split_whitespace()
                .map(|t| t.parse::<u32>().map_err(|e| Error::Config(format!("token dump line {i}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            if ids.len() != NUM_QUANTIZERS || ids.iter().any(|&id| id as usize >= CODEBOOK_SIZE) {
                return Err(Error::Config(format!("token dump line {i}: expected {NUM_QUANTIZERS} ids below {CODEBOOK_SIZE}")));
            }
            Ok(CodecFrameTokens { ids })
        })
        .collect()
}

/// Normalised cross-correlation at lag 0.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let dot: f64 = a[..n].iter().zip(&b[..n]).map(|(x, y)| x * y).sum();
    let na: f64 = a[..n].iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b[..n].iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{synth_scene_with_reference, validate_chunk_spec};

    #[test]
    fn basis_is_orthonormal() {
        let c = MockCodec::default();
        let g = c.basis.matmul(&c.basis.transpose()).unwrap();
        for i in 0..LATENT_DIM {
            for j in 0..LATENT_DIM {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g.get(i, j) - want).abs() < 1e-9, "({i},{j}) = {}", g.get(i, j));
            }
        }
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let c = MockCodec::default();
        let spec = validate_chunk_spec(560).unwrap();
        let scene = synth_scene_with_reference(3, 560, 200, 0.0);
        let chunk = AudioChunk { index: 0, samples: scene.mixture.samples().to_vec(), valid_len: spec.samples_per_chunk };
        let t = codec_encode(&c, &chunk).unwrap();
        let full = t.full.as_ref().unwrap();
        assert_eq!(full.len(), 14);
        for (f, q0) in full.iter().zip(&t.first_q) {
            assert_eq!(f.ids.len(), NUM_QUANTIZERS);
            assert!(f.ids.iter().all(|&id| (id as usize) < CODEBOOK_SIZE));
            assert_eq!(f.ids[0], *q0);
        }
        assert_eq!(t, codec_encode(&c, &chunk).unwrap());
        assert_eq!(t, codec_encode(&MockCodec::default(), &chunk).unwrap());
    }

    #[test]
    fn zero_chunk_quantises_to_constant_stack() {
        let c = MockCodec::default();
        let t = c.encode_samples(&vec![0.0; 640 * 3]).unwrap();
        let full = t.full.unwrap();
        assert_eq!(full[0], full[1]);
        assert_eq!(full[1], full[2]);
        // oracle: stage by stage nearest codeword to the running residual from zero
        let mut residual = vec![0.0; LATENT_DIM];
        for (s, book) in c.codebooks.iter().enumerate() {
            let norms: Vec<f64> = book
                .iter_rows()
                .map(|code| code.iter().zip(&residual).map(|(a, b): (&f64, &f64)| (b - a).powi(2)).sum())
                .collect();
            let best = (0..CODEBOOK_SIZE).min_by(|&a, &b| norms[a].total_cmp(&norms[b])).unwrap();
            assert_eq!(full[0].ids[s] as usize, best);
            residual.iter_mut().zip(book.row(best)).for_each(|(r, v)| *r -= v);
        }
    }

    #[test]
    fn rejects_partial_frames() {
        let c = MockCodec::default();
        assert!(matches!(c.encode_samples(&[0.0; 700]), Err(Error::Length { .. })));
    }

    #[test]
    fn round_trip_correlates_with_input() {
        let c = MockCodec::default();
        let spec = validate_chunk_spec(560).unwrap();
        for seed in 1..6 {
            let scene = synth_scene_with_reference(seed, 2240, 200, 0.0);
            for w in [&scene.target, &scene.mixture] {
                let z = c.project(w.samples()).unwrap();
                let mut out = Vec::new();
                let mut history: Vec<HiddenChunk> = Vec::new();
                for t in 0..4 {
                    let cur = HiddenChunk::new(z.vectors.slice_rows(t * 14, (t + 1) * 14)).unwrap();
                    let input = refine_input(&history, &cur, HistoryDepth::One).unwrap();
                    out.extend(codec_decode(&c, &input, &spec).unwrap().samples);
                    history.push(cur);
                }
                let r = correlation(&out, w.samples());
                assert!(r >= 0.9, "seed {seed}: correlation {r}");
            }
        }
    }

    #[test]
    fn refine_input_rows() {
        let h = |v: f64| HiddenChunk::new(Tensor2::filled(14, LATENT_DIM, v)).unwrap();
        let (h1, h2, h3) = (h(1.0), h(2.0), h(3.0));
        assert_eq!(refine_input(&[], &h1, HistoryDepth::One).unwrap().rows(), 14);
        assert_eq!(refine_input(&[h1.clone()], &h2, HistoryDepth::One).unwrap().rows(), 28);
        assert_eq!(refine_input(&[h1.clone(), h2.clone()], &h3, HistoryDepth::One).unwrap().rows(), 28);
        assert_eq!(refine_input(&[h1.clone(), h2.clone()], &h3, HistoryDepth::Full).unwrap().rows(), 42);
        assert_eq!(refine_input(&[h1, h2], &h3, HistoryDepth::None).unwrap().rows(), 14);
    }

    #[test]
    fn decode_contract() {
        let c = MockCodec::default();
        let spec = validate_chunk_spec(160).unwrap();
        let zeros = Tensor2::zeros(8, LATENT_DIM);
        let out = codec_decode(&c, &zeros, &spec).unwrap();
        assert_eq!(out.samples.len(), spec.samples_per_chunk);
        assert!(out.samples.iter().all(|x| x.abs() < 1e-3));
        let z = Tensor2::from_vec(8, LATENT_DIM, (0..8 * LATENT_DIM).map(|i| (i as f64).sin()).collect()).unwrap();
        let with = codec_decode(&c, &z, &spec).unwrap();
        let without = codec_decode(&c, &z.slice_rows(4, 8), &spec).unwrap();
        assert_eq!(with.samples.len(), without.samples.len());
        assert_eq!(with.samples[CROSSFADE_SAMPLES..], without.samples[CROSSFADE_SAMPLES..]);
        assert!(codec_decode(&c, &Tensor2::zeros(5, LATENT_DIM), &spec).is_err());
        assert!(codec_decode(&c, &Tensor2::zeros(4, 3), &spec).is_err());
    }

    #[test]
    fn token_dump_round_trip() {
        let c = MockCodec::default();
        let frames = c.encode_samples(&synth_scene_with_reference(2, 80, 80, 0.0).target.samples()[..1280]).unwrap().full.unwrap();
        let text = token_dump(&frames);
        assert_eq!(text.lines().count(), 2);
        assert_eq!(text.lines().next().unwrap().split(' ').count(), 32);
        assert_eq!(parse_token_dump(&text).unwrap(), frames);
        assert!(parse_token_dump("1 2 3").is_err());
    }
}
