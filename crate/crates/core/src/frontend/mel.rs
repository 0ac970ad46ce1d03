//! Causal log-mel features.
//!
//! Frames hop by one codec frame (640 samples) and look back one extra hop,
//! so each frame covers the 80 ms ending at its hop boundary. The previous
//! hop's samples are carried between chunks in [`FrontendState`]; streaming
//! a waveform chunk by chunk yields exactly the frames of the whole waveform.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use streamtse_nn::Tensor2;

use super::{AudioChunk, CODEC_FRAME_SAMPLES, SAMPLE_RATE_HZ};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MelConfig {
    pub n_mels: usize,
    pub hop_samples: usize,
    pub window_samples: usize,
    /// Energies are clamped to this before the natural log.
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self { n_mels: 40, hop_samples: CODEC_FRAME_SAMPLES, window_samples: 2 * CODEC_FRAME_SAMPLES, log_floor: 1e-10 }
    }
}

/// `n_frames x n_mels` log-mel energies.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFrames {
    pub frames: Tensor2,
}

impl MelFrames {
    pub fn n_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn n_mels(&self) -> usize {
        self.frames.cols()
    }
}

/// Samples of the previous `window - hop` carried into the next chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct FrontendState {
    carry: Vec<f64>,
}

pub struct MelFrontend {
    config: MelConfig,
    window: Vec<f64>,
    filters: Tensor2,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MelFrontend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelFrontend").field("config", &self.config).finish_non_exhaustive()
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

impl MelFrontend {
    pub fn new(config: MelConfig) -> Result<Self> {
        if config.hop_samples == 0 || config.window_samples < config.hop_samples || config.n_mels == 0 {
            return Err(Error::Config(format!("bad mel config {config:?}")));
        }
        let n_fft = config.window_samples;
        let window = (0..n_fft).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n_fft as f64).cos()).collect();
        let n_bins = n_fft / 2 + 1;
        let sr = SAMPLE_RATE_HZ as f64;
        let mel_max = hz_to_mel(sr / 2.0);
        let edges: Vec<f64> =
            (0..config.n_mels + 2).map(|i| mel_to_hz(mel_max * i as f64 / (config.n_mels + 1) as f64)).collect();
        let mut filters = Tensor2::zeros(config.n_mels, n_bins);
        for m in 0..config.n_mels {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            for b in 0..n_bins {
                let f = b as f64 * sr / n_fft as f64;
                let w = if f > lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                filters.set(m, b, w);
            }
        }
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Ok(Self { config, window, filters, fft })
    }

    pub fn config(&self) -> &MelConfig {
        &self.config
    }

    pub fn initial_state(&self) -> FrontendState {
        FrontendState { carry: vec![0.0; self.config.window_samples - self.config.hop_samples] }
    }

    fn frame(&self, samples: &[f64], out: &mut [f64]) {
        let mut buf: Vec<Complex<f64>> =
            samples.iter().zip(&self.window).map(|(&s, &w)| Complex::new(s * w, 0.0)).collect();
        self.fft.process(&mut buf);
        let n_bins = self.filters.cols();
        let power: Vec<f64> = buf[..n_bins].iter().map(|c| c.norm_sqr()).collect();
        for (m, o) in out.iter_mut().enumerate() {
            let e: f64 = self.filters.row(m).iter().zip(&power).map(|(w, p)| w * p).sum();
            *o = e.max(self.config.log_floor).ln();
        }
    }

    /// Features for `samples` given the carried history; the sample count
    /// must be a multiple of the hop.
    pub fn process(&self, samples: &[f64], state: &FrontendState) -> Result<(MelFrames, FrontendState)> {
        let hop = self.config.hop_samples;
        if samples.len() % hop != 0 {
            return Err(Error::Length { len: samples.len(), frame: hop });
        }
        let mut full = state.carry.clone();
        full.extend_from_slice(samples);
        let n_frames = samples.len() / hop;
        let win = self.config.window_samples;
        let mut frames = Tensor2::zeros(n_frames, self.config.n_mels);
        for i in 0..n_frames {
            self.frame(&full[i * hop..i * hop + win], frames.row_mut(i));
        }
        let carry = full[full.len() - (win - hop)..].to_vec();
        Ok((MelFrames { frames }, FrontendState { carry }))
    }

    /// Whole-signal features from silence history (the offline path).
    pub fn process_offline(&self, samples: &[f64]) -> Result<MelFrames> {
        Ok(self.process(samples, &self.initial_state())?.0)
    }
}

/// Log-mel frames for one chunk.
pub fn log_mel(frontend: &MelFrontend, chunk: &AudioChunk, state: &FrontendState) -> Result<(MelFrames, FrontendState)> {
    frontend.process(&chunk.samples, state)
}
