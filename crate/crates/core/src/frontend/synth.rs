//! Synthetic two-speaker scenes.
//!
//! A "speaker" is a harmonic series with a fixed fundamental, spectral tilt
//! and phase set. Content is a sequence of syllables that rescale the
//! harmonics every few codec frames. All partials are multiples of 50 Hz up
//! to 800 Hz, so each 40 ms frame holds an integer number of cycles.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Waveform, CODEC_FRAME_SAMPLES, SAMPLES_PER_MS, SAMPLE_RATE_HZ};

pub const DEFAULT_REFERENCE_MS: u32 = 5000;
const MAX_PARTIAL_HZ: f64 = 800.0;
const NOISE_STD: f64 = 0.002;
const PEAK: f64 = 0.95;

/// Fundamental (Hz) and spectral tilt per synthetic speaker.
const SPEAKERS: [(f64, f64); 6] = [(100.0, 0.6), (150.0, 0.9), (200.0, 0.4), (250.0, 1.2), (300.0, 0.7), (350.0, 1.0)];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub mixture: Waveform,
    pub target: Waveform,
    /// Already scaled so that `mixture == target + interferer`.
    pub interferer: Waveform,
    pub reference: Waveform,
    pub snr_db: f64,
    pub target_speaker: usize,
    pub interferer_speaker: usize,
}

fn render_speaker(speaker: usize, content_seed: u64, n_samples: usize) -> Vec<f64> {
    let (f0, tilt) = SPEAKERS[speaker];
    let mut sig_rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + speaker as u64);
    let n_harm = (MAX_PARTIAL_HZ / f0).floor() as usize;
    let phases: Vec<f64> = (0..n_harm).map(|_| sig_rng.gen_range(0.0..2.0 * PI)).collect();
    let base: Vec<f64> = (1..=n_harm).map(|k| (k as f64).powf(-tilt)).collect();
    let norm: f64 = base.iter().sum();

    let mut rng = ChaCha8Rng::seed_from_u64(content_seed);
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let n_frames = n_samples.div_ceil(CODEC_FRAME_SAMPLES);
    let mut gains = vec![vec![0.0; n_harm]; n_frames];
    let mut f = 0;
    while f < n_frames {
        let len = rng.gen_range(2..=5);
        let level = rng.gen_range(0.35..1.0);
        let shape: Vec<f64> = base.iter().map(|b| b * rng.gen_range(0.5..1.5)).collect();
        for g in gains.iter_mut().skip(f).take(len) {
            for (gv, s) in g.iter_mut().zip(&shape) {
                *gv = level * s / norm;
            }
        }
        f += len;
        // short pause between syllables
        if rng.gen_bool(0.3) && f < n_frames {
            gains[f].iter_mut().zip(&base).for_each(|(gv, b)| *gv = 0.05 * b / norm);
            f += 1;
        }
    }

    let sr = SAMPLE_RATE_HZ as f64;
    (0..n_samples)
        .map(|n| {
            let g = &gains[n / CODEC_FRAME_SAMPLES];
            let t = n as f64 / sr;
            let s: f64 = (0..n_harm).map(|k| g[k] * (2.0 * PI * f0 * (k + 1) as f64 * t + phases[k]).sin()).sum();
            s + noise.sample(&mut rng)
        })
        .collect()
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64
}

fn normalise_peak(parts: &mut [&mut Vec<f64>], peak_of: &[f64]) {
    let peak = peak_of.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let s = PEAK / peak;
        for p in parts.iter_mut() {
            p.iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Scene with the default 5 s reference.
pub fn synth_scene(seed: u64, duration_ms: u32, snr_db: f64) -> SynthScene {
    synth_scene_with_reference(seed, duration_ms, DEFAULT_REFERENCE_MS, snr_db)
}

pub fn synth_scene_with_reference(seed: u64, duration_ms: u32, reference_ms: u32, snr_db: f64) -> SynthScene {
    assert!(duration_ms > 0 && reference_ms > 0, "durations must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target_speaker = rng.gen_range(0..SPEAKERS.len());
    let interferer_speaker = (target_speaker + rng.gen_range(1..SPEAKERS.len())) % SPEAKERS.len();
    let n = duration_ms as usize * SAMPLES_PER_MS;
    let mut target = render_speaker(target_speaker, rng.gen(), n);
    let mut interferer = render_speaker(interferer_speaker, rng.gen(), n);
    let mut reference = render_speaker(target_speaker, rng.gen(), reference_ms as usize * SAMPLES_PER_MS);

    let gain = (power(&target) / (power(&interferer) * 10f64.powf(snr_db / 10.0))).sqrt();
    interferer.iter_mut().for_each(|v| *v *= gain);
    let mixture: Vec<f64> = target.iter().zip(&interferer).map(|(a, b)| a + b).collect();
    let mut mixture = mixture;
    let peak_src = mixture.clone();
    normalise_peak(&mut [&mut target, &mut interferer], &peak_src);
    // recompute the sum after scaling so the identity holds exactly
    mixture.iter_mut().zip(target.iter().zip(&interferer)).for_each(|(m, (a, b))| *m = a + b);
    let peak_ref = reference.clone();
    normalise_peak(&mut [&mut reference], &peak_ref);

    let wav = |s: Vec<f64>| Waveform::from_clamped(s);
    SynthScene {
        mixture: wav(mixture),
        target: wav(target),
        interferer: wav(interferer),
        reference: wav(reference),
        snr_db,
        target_speaker,
        interferer_speaker,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snr(scene: &SynthScene) -> f64 {
        10.0 * (power(scene.target.samples()) / power(scene.interferer.samples())).log10()
    }

    #[test]
    fn zero_db_means_equal_power() {
        let s = synth_scene(1, 2240, 0.0);
        assert!(snr(&s).abs() < 0.1);
        assert_eq!(s.mixture.len(), 2240 * 16);
        assert_eq!(s.reference.len(), 5000 * 16);
    }

    #[test]
    fn snr_and_sum_identity() {
        for (seed, db) in [(3, 5.0), (4, 2.5), (5, -3.0)] {
            let s = synth_scene_with_reference(seed, 800, 400, db);
            assert!((snr(&s) - db).abs() < 0.1);
            for ((m, t), i) in s.mixture.samples().iter().zip(s.target.samples()).zip(s.interferer.samples()) {
                assert_eq!(*m, t + i);
            }
            assert_ne!(s.target_speaker, s.interferer_speaker);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(synth_scene(1, 560, 0.0), synth_scene(1, 560, 0.0));
        let a = synth_scene(1, 560, 0.0);
        let b = synth_scene(2, 560, 0.0);
        let diff: f64 = a.target.samples().iter().zip(b.target.samples()).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1.0, "seeds 1 and 2 too similar: {diff}");
    }
}
