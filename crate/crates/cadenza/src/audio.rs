//! Audio clips: validated sample buffers plus WAV ingestion and slicing.

use std::path::Path;

use crate::error::{Error, Result};

/// A validated mono audio buffer.
///
/// Samples are dimensionless amplitudes, nominally in `[-1, 1]`; the
/// constructor enforces non-emptiness, a positive sample rate, and finite
/// samples so downstream code can rely on those invariants.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("audio clip has no samples".into()));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        if let Some(pos) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite sample at index {pos}")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Load a mono or stereo WAV file (16-bit PCM or 32-bit float).
    /// Stereo is downmixed by channel mean.
    pub fn from_wav(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = hound::WavReader::open(path)
            .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))?;
        let spec = reader.spec();
        let read_err =
            |e: hound::Error| Error::Io(std::io::Error::other(format!("{}: {e}", path.display())));

        let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
            (hound::SampleFormat::Int, 16) => reader
                .samples::<i16>()
                .map(|s| s.map(|v| v as f32 / 32768.0))
                .collect::<std::result::Result<_, _>>()
                .map_err(read_err)?,
            (hound::SampleFormat::Float, 32) => {
                reader.samples::<f32>().collect::<std::result::Result<_, _>>().map_err(read_err)?
            }
            (fmt, bits) => {
                return Err(Error::InvalidInput(format!(
                    "unsupported WAV format {fmt:?}/{bits}-bit in {}",
                    path.display()
                )))
            }
        };

        let samples = match spec.channels {
            1 => interleaved,
            2 => interleaved.chunks_exact(2).map(|p| (p[0] + p[1]) / 2.0).collect(),
            n => {
                return Err(Error::InvalidInput(format!(
                    "unsupported channel count {n} in {}",
                    path.display()
                )))
            }
        };
        AudioClip::new(samples, spec.sample_rate)
    }

    /// Write a mono 32-bit float WAV; `from_wav` reads it back losslessly.
    pub fn to_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let write_err =
            |e: hound::Error| Error::Io(std::io::Error::other(format!("{}: {e}", path.display())));
        let mut writer = hound::WavWriter::create(path, spec).map_err(write_err)?;
        for &s in &self.samples {
            writer.write_sample(s).map_err(write_err)?;
        }
        writer.finalize().map_err(write_err)
    }

    /// Resample to `target_rate` by linear interpolation. Identity when the
    /// rate already matches.
    pub fn resample(&self, target_rate: u32) -> Result<Self> {
        if target_rate == 0 {
            return Err(Error::InvalidInput("target rate must be positive".into()));
        }
        if target_rate == self.sample_rate {
            return Ok(self.clone());
        }
        let ratio = self.sample_rate as f64 / target_rate as f64;
        let out_len = ((self.samples.len() as f64 / ratio).round() as usize).max(1);
        let last = self.samples.len() - 1;
        let samples = (0..out_len)
            .map(|i| {
                let pos = i as f64 * ratio;
                let i0 = (pos.floor() as usize).min(last);
                let i1 = (i0 + 1).min(last);
                let frac = (pos - i0 as f64) as f32;
                self.samples[i0] * (1.0 - frac) + self.samples[i1] * frac
            })
            .collect();
        AudioClip::new(samples, target_rate)
    }

    /// Slice `[start, start+len)` in samples. Bounds-checked.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.samples.len() {
            return Err(Error::Shape(format!(
                "slice [{start}, {}) out of range for {} samples",
                start + len,
                self.samples.len()
            )));
        }
        AudioClip::new(self.samples[start..start + len].to_vec(), self.sample_rate)
    }
}

/// Synthesize a sine tone; used by fixtures and examples.
pub fn sine_clip(freq_hz: f64, sample_rate: u32, duration_s: f64, amplitude: f32) -> AudioClip {
    let n = ((duration_s * sample_rate as f64).round() as usize).max(1);
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sample_rate as f64;
            amplitude * (2.0 * std::f64::consts::PI * freq_hz * t).sin() as f32
        })
        .collect();
    AudioClip::new(samples, sample_rate).expect("sine synth produces valid clips")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty_samples() {
        assert!(matches!(AudioClip::new(vec![], 24_000), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn rejects_zero_rate_and_non_finite() {
        assert!(AudioClip::new(vec![0.0], 0).is_err());
        assert!(AudioClip::new(vec![0.0, f32::NAN], 8_000).is_err());
    }

    #[test]
    fn duration_derives_from_len_and_rate() {
        let clip = AudioClip::new(vec![0.0; 12_000], 24_000).unwrap();
        assert_eq!(clip.duration_s(), 0.5);
    }

    #[test]
    fn resample_identity_and_length() {
        let clip = sine_clip(440.0, 24_000, 0.5, 0.8);
        assert_eq!(clip.resample(24_000).unwrap(), clip);
        let down = clip.resample(8_000).unwrap();
        assert_eq!(down.samples().len(), 4_000);
    }

    #[test]
    fn wav_round_trip_and_stereo_downmix() {
        let dir = tempfile::tempdir().unwrap();
        let mono = dir.path().join("mono.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&mono, spec).unwrap();
        for i in 0..800i32 {
            w.write_sample((i % 100) as i16 * 300).unwrap();
        }
        w.finalize().unwrap();
        let clip = AudioClip::from_wav(&mono).unwrap();
        assert_eq!(clip.samples().len(), 800);
        assert_eq!(clip.sample_rate(), 8_000);

        let stereo = dir.path().join("stereo.wav");
        let spec = hound::WavSpec { channels: 2, ..spec };
        let mut w = hound::WavWriter::create(&stereo, spec).unwrap();
        for _ in 0..100 {
            w.write_sample(16384i16).unwrap(); // left
            w.write_sample(-16384i16).unwrap(); // right
        }
        w.finalize().unwrap();
        let clip = AudioClip::from_wav(&stereo).unwrap();
        assert_eq!(clip.samples().len(), 100);
        assert!(clip.samples().iter().all(|s| s.abs() < 1e-6));
    }

    #[test]
    fn to_wav_is_lossless_for_float_samples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tone.wav");
        let clip = sine_clip(220.0, 8_000, 0.25, 0.5);
        clip.to_wav(&path).unwrap();
        let back = AudioClip::from_wav(&path).unwrap();
        assert_eq!(back.sample_rate(), clip.sample_rate());
        assert_eq!(back.samples(), clip.samples());
    }
}
