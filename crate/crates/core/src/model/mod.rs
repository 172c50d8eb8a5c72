//! The separation network, its parameter stores, and end-to-end
//! separation of audio clips.

mod config;
mod net;
mod params;

pub use config::{Architecture, ModelConfig};
pub use net::{check_layout, param_count, Branch, Forward, ForwardOutput, Layout, Model};
pub use params::{Bound, ParamStore, StatStore};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::{resample, AudioClip, CANONICAL_RATE};
use crate::dsp::{istft, stft, ComplexSpectrogram, Matrix};
use crate::error::{Error, Result};
use crate::tensor::{Mode, Tape, Tensor};

/// Network output over a whole clip, `freq_bins x time_bins`, row-major by
/// frequency.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub values: Vec<f32>,
    pub freq_bins: usize,
    pub time_bins: usize,
}

impl Mask {
    pub fn min(&self) -> f32 {
        self.values.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix {
            rows: self.freq_bins,
            cols: self.time_bins,
            data: self.values.iter().map(|&v| v as f64).collect(),
        }
    }
}

impl Model<f32> {
    /// Eval-mode output `[F x T]` for one window.
    pub fn predict(&mut self, wave: &[f32], magnitude: &[f32]) -> Result<Vec<f32>> {
        let (f, t) = (self.config.freq_bins(), self.config.time_bins);
        let wave = Tensor::new(vec![1, 1, wave.len()], wave.to_vec())?;
        let mag = Tensor::new(vec![1, 1, f, t], magnitude.to_vec())?;
        let mut tape = Tape::new();
        // Dropout never draws in eval mode.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, _) = self.forward(&mut tape, &wave, &mag, Mode::Eval, false, &mut rng)?;
        Ok(tape.value(out.output).data().to_vec())
    }
}

/// What a per-window estimator returns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EstimateKind {
    /// Multiplied with the mixture magnitude.
    Mask,
    /// Used as the source magnitude directly.
    Magnitude,
}

/// Separated source plus the assembled network output.
#[derive(Clone, Debug)]
pub struct Separation {
    pub vocal: AudioClip,
    pub mask: Mask,
}

/// Runs `model` over `mixture` window by window.
pub fn separate(model: &mut Model<f32>, mixture: &AudioClip) -> Result<Separation> {
    let cfg = model.config.clone();
    let kind = if cfg.architecture.outputs_mask() {
        EstimateKind::Mask
    } else {
        EstimateKind::Magnitude
    };
    separate_with(&cfg, mixture, kind, |wave, mag| model.predict(wave, mag))
}

/// Separation with an arbitrary per-window estimator
/// `(wave, magnitude) -> F x T plane`.
///
/// The clip is brought to the canonical rate and zero-padded so that its
/// analysis frames split into whole blocks of `time_bins`; block `b`
/// covers exactly the samples of window `b` at a hop of
/// `time_bins * hop`. The estimator sees each block, the blocks are
/// joined along time, and a single overlap-add synthesis rebuilds the
/// signal with the mixture phase untouched.
pub fn separate_with<F>(cfg: &ModelConfig, mixture: &AudioClip, kind: EstimateKind, mut estimate: F) -> Result<Separation>
where
    F: FnMut(&[f32], &[f32]) -> Result<Vec<f32>>,
{
    if mixture.is_empty() {
        return Err(Error::config("cannot separate an empty clip"));
    }
    let input_rate = mixture.sample_rate;
    let clip = if input_rate == CANONICAL_RATE {
        mixture.clone()
    } else {
        resample(mixture, CANONICAL_RATE)?
    };
    let n = clip.len();
    let (f, t) = (cfg.freq_bins(), cfg.time_bins);
    let win = cfg.window_samples();
    let block_hop = t * cfg.stft.hop;
    let blocks = if n <= win { 1 } else { (n - win).div_ceil(block_hop) + 1 };
    let padded_len = (blocks - 1) * block_hop + win;
    let mut samples = clip.samples.clone();
    samples.resize(padded_len, 0.0);
    let padded = AudioClip::new(samples, CANONICAL_RATE)?;
    let spec = stft(&padded, cfg.stft)?;
    let total = spec.time_bins;
    debug_assert_eq!(total, blocks * t);
    let mag = spec.magnitude_f32();
    let mut plane = vec![0.0f32; f * total];
    let mut block_mag = vec![0.0f32; f * t];
    for b in 0..blocks {
        for k in 0..f {
            block_mag[k * t..(k + 1) * t].copy_from_slice(&mag[k * total + b * t..k * total + (b + 1) * t]);
        }
        let wave = &padded.samples[b * block_hop..b * block_hop + win];
        let out = estimate(wave, &block_mag)?;
        if out.len() != f * t {
            return Err(Error::config(format!("estimator returned {} values, expected {}", out.len(), f * t)));
        }
        for k in 0..f {
            plane[k * total + b * t..k * total + (b + 1) * t].copy_from_slice(&out[k * t..(k + 1) * t]);
        }
    }
    let masked: ComplexSpectrogram = match kind {
        EstimateKind::Mask => spec.apply_mask(&plane)?,
        EstimateKind::Magnitude => spec.with_magnitude(&plane)?,
    };
    let mut vocal = istft(&masked)?;
    vocal.samples.truncate(n);
    if input_rate != CANONICAL_RATE {
        let mut back = resample(&vocal, input_rate)?;
        back.samples.resize(mixture.len(), 0.0);
        vocal = back;
    }
    Ok(Separation {
        vocal,
        mask: Mask {
            values: plane,
            freq_bins: f,
            time_bins: total,
        },
    })
}
