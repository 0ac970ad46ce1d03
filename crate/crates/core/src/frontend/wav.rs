//! PCM16 mono 16 kHz WAV files.

use std::path::Path;

use super::{Waveform, SAMPLE_RATE_HZ};
use crate::error::{Error, Result};

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path).map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Wav(format!("{}: {} channels, expected mono", path.display(), spec.channels)));
    }
    if spec.sample_rate != SAMPLE_RATE_HZ {
        return Err(Error::Wav(format!("{}: {} Hz, expected {SAMPLE_RATE_HZ} Hz", path.display(), spec.sample_rate)));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Wav(format!(
            "{}: {:?} {}-bit samples, expected 16-bit PCM",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Wav(e.to_string()))?;
    Waveform::new(samples, SAMPLE_RATE_HZ)
}

pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE_HZ,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| Error::Wav(e.to_string()))?;
    for &s in w.samples() {
        let v = (s * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        writer.write_sample(v).map_err(|e| Error::Wav(e.to_string()))?;
    }
    writer.finalize().map_err(|e| Error::Wav(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_within_quantisation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = Waveform::new((0..1600).map(|i| (i as f64 * 0.01).sin() * 0.5).collect(), 16000).unwrap();
        write_wav(&path, &w).unwrap();
        let r = read_wav(&path).unwrap();
        assert_eq!(r.len(), w.len());
        for (a, b) in r.samples().iter().zip(w.samples()) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn rejects_other_formats() {
        let dir = tempfile::tempdir().unwrap();
        for (ch, sr, bits) in [(2u16, 16000u32, 16u16), (1, 8000, 16), (1, 16000, 8)] {
            let path = dir.path().join(format!("{ch}_{sr}_{bits}.wav"));
            let spec = hound::WavSpec { channels: ch, sample_rate: sr, bits_per_sample: bits, sample_format: hound::SampleFormat::Int };
            let mut w = hound::WavWriter::create(&path, spec).unwrap();
            for _ in 0..(10 * ch) {
                if bits == 8 {
                    w.write_sample(0i8).unwrap();
                } else {
                    w.write_sample(0i16).unwrap();
                }
            }
            w.finalize().unwrap();
            let err = read_wav(&path).unwrap_err();
            assert!(matches!(err, Error::Wav(_)), "{err}");
        }
    }
}
