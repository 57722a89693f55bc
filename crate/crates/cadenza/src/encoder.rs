//! Audio-encoder contract and the frozen toy spectral encoder.
//!
//! The encoder maps a clip to a layered embedding of shape `[L, T', D]`.
//! Production would plug a pretrained checkpoint in behind [`AudioEncoder`];
//! desk-scale work uses [`ToySpectralEncoder`], a pure function of
//! `(samples, sample_rate, seed)` with no trainable parameters.

use ndarray::{Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::AudioClip;
use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::par;

/// Hierarchical embedding `[L, T', D]`: layer, frame, channel.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredEmbedding {
    data: Array3<f64>,
}

impl LayeredEmbedding {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (l, t, d) = data.dim();
        if l == 0 || t == 0 || d == 0 {
            return Err(Error::Shape(format!("degenerate embedding [{l}, {t}, {d}]")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite embedding entry".into()));
        }
        Ok(Self { data })
    }

    pub fn layers(&self) -> usize {
        self.data.dim().0
    }

    pub fn frames(&self) -> usize {
        self.data.dim().1
    }

    pub fn dim(&self) -> usize {
        self.data.dim().2
    }

    pub fn layer(&self, l: usize) -> ArrayView2<'_, f64> {
        self.data.index_axis(Axis(0), l)
    }

    /// Owned per-layer matrices `[T', D]`, in layer order.
    pub fn layer_mats(&self) -> Vec<Mat> {
        (0..self.layers()).map(|l| self.layer(l).to_owned()).collect()
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }
}

/// Frozen-encoder geometry and seeding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Representation layer count L.
    pub layers: usize,
    /// Embedding dimension D.
    pub dim: usize,
    /// Spectral bands feeding each layer projection.
    pub bands: usize,
    /// Frame rate; hop = sample_rate / frames_per_second.
    pub frames_per_second: u32,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { layers: 13, dim: 768, bands: 16, frames_per_second: 75, seed: 17 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.dim == 0 || self.bands == 0 || self.frames_per_second == 0 {
            return Err(Error::Config(
                "encoder layers, dim, bands, frames_per_second must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn hop(&self, sample_rate: u32) -> usize {
        ((sample_rate / self.frames_per_second) as usize).max(1)
    }
}

/// Frozen encoder interface. Implementations are pure after construction
/// and safe for concurrent calls on distinct clips.
pub trait AudioEncoder: Send + Sync {
    fn layers(&self) -> usize;
    fn dim(&self) -> usize;
    fn encode(&self, clip: &AudioClip) -> Result<LayeredEmbedding>;
    /// Hex digest of the frozen parameters; must not change between calls.
    fn digest(&self) -> String;
}

/// Deterministic spectral toy encoder.
///
/// Per frame: Hann window, FFT, log-spaced band energies through `log1p`,
/// then per layer `tanh(R_l · f + b_l)` with seeded fixed projections.
/// Windows equal the hop, so frames never overlap and locality holds
/// exactly: full frames of a prefix are unaffected by appended audio.
pub struct ToySpectralEncoder {
    config: EncoderConfig,
    /// Per layer: projection `[D, B]` and bias `[D]`.
    projections: Vec<(Mat, Vec<f64>)>,
}

impl ToySpectralEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let projections = (0..config.layers)
            .map(|l| {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(l as u64);
                let scale = 1.0 / (config.bands as f64).sqrt();
                let proj = Mat::from_shape_fn((config.dim, config.bands), |_| {
                    rng.random_range(-1.0..1.0) * scale
                });
                let bias: Vec<f64> = (0..config.dim).map(|_| rng.random_range(-0.5..0.5)).collect();
                (proj, bias)
            })
            .collect();
        Ok(Self { config, projections })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Band-energy feature vector for one frame, length B.
    fn frame_features(&self, frame: &[f64]) -> Vec<f64> {
        let window = frame.len();
        let bands = self.config.bands;
        let nbins = window / 2;
        let mut energies = vec![0.0_f64; bands];
        if nbins == 0 {
            return energies;
        }
        let mut buf: Vec<Complex<f64>> = frame.iter().map(|&s| Complex::new(s, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(window).process(&mut buf);
        let denom = ((nbins + 1) as f64).ln();
        for (b, v) in buf.iter().enumerate().take(nbins + 1).skip(1) {
            let band = (((bands as f64) * (b as f64).ln() / denom) as usize).min(bands - 1);
            energies[band] += v.norm_sqr();
        }
        for e in &mut energies {
            *e = e.ln_1p();
        }
        energies
    }
}

impl AudioEncoder for ToySpectralEncoder {
    fn layers(&self) -> usize {
        self.config.layers
    }

    fn dim(&self) -> usize {
        self.config.dim
    }

    fn encode(&self, clip: &AudioClip) -> Result<LayeredEmbedding> {
        let hop = self.config.hop(clip.sample_rate());
        let samples = clip.samples();
        let t_frames = samples.len().div_ceil(hop);
        let features: Vec<Vec<f64>> = par::map_range(t_frames, |t| {
            let start = t * hop;
            let mut frame = vec![0.0_f64; hop];
            for (i, slot) in frame.iter_mut().enumerate() {
                if let Some(&s) = samples.get(start + i) {
                    *slot = s as f64 * hann(i, hop);
                }
            }
            self.frame_features(&frame)
        });

        let (l_count, d) = (self.config.layers, self.config.dim);
        let mut data = Array3::<f64>::zeros((l_count, t_frames, d));
        for (l, (proj, bias)) in self.projections.iter().enumerate() {
            for (t, feat) in features.iter().enumerate() {
                for i in 0..d {
                    let mut acc = bias[i];
                    for (j, f) in feat.iter().enumerate() {
                        acc += proj[[i, j]] * f;
                    }
                    data[[l, t, i]] = acc.tanh();
                }
            }
        }
        LayeredEmbedding::new(data)
    }

    fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.config.layers.to_le_bytes());
        hasher.update(self.config.dim.to_le_bytes());
        hasher.update(self.config.bands.to_le_bytes());
        hasher.update(self.config.frames_per_second.to_le_bytes());
        hasher.update(self.config.seed.to_le_bytes());
        for (proj, bias) in &self.projections {
            for v in proj.iter().chain(bias.iter()) {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

fn hann(i: usize, n: usize) -> f64 {
    if n <= 1 {
        return 1.0;
    }
    let x = std::f64::consts::TAU * i as f64 / (n - 1) as f64;
    0.5 * (1.0 - x.cos())
}

/// Encodes with an explicit config. Equivalent to constructing a
/// [`ToySpectralEncoder`] once and calling [`AudioEncoder::encode`].
pub fn encode(clip: &AudioClip, config: &EncoderConfig) -> Result<LayeredEmbedding> {
    ToySpectralEncoder::new(config.clone())?.encode(clip)
}

/// Default-geometry toy encoding with an explicit seed.
pub fn toy_encode(clip: &AudioClip, seed: u64) -> Result<LayeredEmbedding> {
    let config = EncoderConfig { seed, ..EncoderConfig::default() };
    encode(clip, &config)
}
