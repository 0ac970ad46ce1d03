//! Waveforms, chunking, log-mel features, WAV I/O and synthetic scenes.

mod mel;
mod synth;
mod wav;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use mel::{log_mel, FrontendState, MelConfig, MelFrames, MelFrontend};
pub use synth::{synth_scene, synth_scene_with_reference, SynthScene, DEFAULT_REFERENCE_MS};
pub use wav::{read_wav, write_wav};

pub const SAMPLE_RATE_HZ: u32 = 16_000;
pub const SAMPLES_PER_MS: usize = 16;
/// Codec frame duration; chunk sizes must be multiples of it.
pub const CODEC_FRAME_MS: u32 = 40;
pub const CODEC_FRAME_SAMPLES: usize = 640;
/// Chunk sizes evaluated for the streaming system.
pub const STANDARD_CHUNK_MS: [u32; 6] = [80, 160, 400, 560, 800, 2000];

/// Mono 16 kHz audio with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz != SAMPLE_RATE_HZ {
            return Err(Error::Waveform(format!("sample rate {sample_rate_hz} Hz, expected {SAMPLE_RATE_HZ}")));
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite() || x.abs() > 1.0) {
            return Err(Error::Waveform(format!("sample {i} = {} outside [-1, 1]", samples[i])));
        }
        Ok(Self { samples, sample_rate_hz })
    }

    /// Clamps into `[-1, 1]` and maps non-finite values to 0.
    pub fn from_clamped(samples: Vec<f64>) -> Self {
        let samples = samples.into_iter().map(|x| if x.is_finite() { x.clamp(-1.0, 1.0) } else { 0.0 }).collect();
        Self { samples, sample_rate_hz: SAMPLE_RATE_HZ }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

/// Chunk duration with its derived sample and codec-frame counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChunkSpec {
    pub chunk_ms: u32,
    pub samples_per_chunk: usize,
    pub codec_frames_per_chunk: usize,
}

impl ChunkSpec {
    pub fn duration_s(&self) -> f64 {
        self.chunk_ms as f64 / 1000.0
    }
}

pub fn validate_chunk_spec(chunk_ms: u32) -> Result<ChunkSpec> {
    if chunk_ms == 0 || chunk_ms % CODEC_FRAME_MS != 0 {
        return Err(Error::Granularity { chunk_ms });
    }
    Ok(ChunkSpec {
        chunk_ms,
        samples_per_chunk: chunk_ms as usize * SAMPLES_PER_MS,
        codec_frames_per_chunk: (chunk_ms / CODEC_FRAME_MS) as usize,
    })
}

/// One fixed-length chunk of a stream. The tail chunk may be zero padded,
/// in which case `valid_len < samples.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioChunk {
    pub index: usize,
    pub samples: Vec<f64>,
    pub valid_len: usize,
}

impl AudioChunk {
    pub fn is_padded(&self) -> bool {
        self.valid_len < self.samples.len()
    }

    pub fn valid_samples(&self) -> &[f64] {
        &self.samples[..self.valid_len]
    }

    pub fn silence(index: usize, len: usize) -> Self {
        Self { index, samples: vec![0.0; len], valid_len: len }
    }
}

/// Splits `w` into full chunks, zero-padding the last one.
pub fn chunk_waveform(w: &Waveform, spec: &ChunkSpec) -> Vec<AudioChunk> {
    chunk_samples(w.samples(), spec)
}

pub fn chunk_samples(samples: &[f64], spec: &ChunkSpec) -> Vec<AudioChunk> {
    let n = spec.samples_per_chunk;
    samples
        .chunks(n)
        .enumerate()
        .map(|(index, part)| {
            let mut buf = part.to_vec();
            buf.resize(n, 0.0);
            AudioChunk { index, samples: buf, valid_len: part.len() }
        })
        .collect()
}
