//! Learnable spectrogram front end: groups of dilated 1-D convolutions
//! that turn a raw waveform into a feature plane with the same shape as
//! the STFT magnitude.

use crate::error::{Error, Result};
use crate::tensor::{Activation, Real, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct FilterbankConfig {
    pub kernel_len: usize,
    pub dilation_rates: Vec<usize>,
    /// Kernels per dilation group; rows of the output plane.
    pub kernels_per_group: Vec<usize>,
    pub stride: usize,
    pub target_frames: usize,
    pub leaky_slope: f64,
}

impl Default for FilterbankConfig {
    fn default() -> Self {
        FilterbankConfig {
            kernel_len: 2048,
            dilation_rates: vec![1, 2, 4, 8, 16],
            kernels_per_group: vec![512, 256, 128, 64, 64],
            stride: 512,
            target_frames: 128,
            leaky_slope: 0.01,
        }
    }
}

/// Framing of one dilation group.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupFraming {
    pub dilation: usize,
    pub kernels: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    pub frames: usize,
}

impl FilterbankConfig {
    pub fn rows(&self) -> usize {
        self.kernels_per_group.iter().sum()
    }

    pub fn validate(&self, freq_bins: usize) -> Result<()> {
        if self.kernel_len == 0 || self.stride == 0 || self.target_frames == 0 {
            return Err(Error::config("filterbank kernel length, stride and frames must be positive"));
        }
        if self.dilation_rates.len() != self.kernels_per_group.len() || self.dilation_rates.is_empty() {
            return Err(Error::config(format!(
                "filterbank has {} dilation rates but {} kernel counts",
                self.dilation_rates.len(),
                self.kernels_per_group.len()
            )));
        }
        if self.dilation_rates.contains(&0) || self.kernels_per_group.contains(&0) {
            return Err(Error::config("filterbank dilations and kernel counts must be positive"));
        }
        if self.kernels_per_group.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::config(format!(
                "filterbank kernel counts {:?} must be non-increasing",
                self.kernels_per_group
            )));
        }
        if self.rows() != freq_bins {
            return Err(Error::config(format!(
                "filterbank kernels sum to {}, spectrogram has {freq_bins} bins",
                self.rows()
            )));
        }
        Ok(())
    }

    /// Padding and frame count per group for a waveform of `n` samples.
    ///
    /// Each group pads `(kernel_len - 1) * (dilation - 1)` zeros in total
    /// (floor left, ceil right), which keeps every group on the same
    /// frame grid as an undilated kernel.
    pub fn framing(&self, n: usize) -> Result<Vec<GroupFraming>> {
        self.dilation_rates
            .iter()
            .zip(&self.kernels_per_group)
            .enumerate()
            .map(|(g, (&d, &kernels))| {
                let total = (self.kernel_len - 1) * (d - 1);
                let span = (self.kernel_len - 1) * d + 1;
                let padded = n + total;
                let frames = if padded >= span {
                    (padded - span) / self.stride + 1
                } else {
                    0
                };
                if frames != self.target_frames {
                    return Err(Error::config(format!(
                        "filterbank group {g} (dilation {d}) yields {frames} frames for {n} samples, \
                         expected {}",
                        self.target_frames
                    )));
                }
                Ok(GroupFraming {
                    dilation: d,
                    kernels,
                    pad_left: total / 2,
                    pad_right: total - total / 2,
                    frames,
                })
            })
            .collect()
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.kernels_per_group
            .iter()
            .enumerate()
            .flat_map(|(g, &k)| {
                [
                    (format!("fb.g{g}.weight"), vec![k, 1, self.kernel_len]),
                    (format!("fb.g{g}.bias"), vec![k]),
                ]
            })
            .collect()
    }
}

/// Maps `wave` (`[N, 1, n]`) to a `[N, rows, target_frames]` plane.
/// `params` holds `(weight, bias)` per group in dilation order; group rows
/// are stacked in that same order.
pub fn learnable_spectrogram<T: Real>(
    tape: &mut Tape<T>,
    wave: Var,
    params: &[(Var, Var)],
    cfg: &FilterbankConfig,
) -> Result<Var> {
    let shape = tape.shape(wave).to_vec();
    let n = *shape.last().ok_or_else(|| Error::config("empty waveform shape"))?;
    if shape.len() != 3 || shape[1] != 1 {
        return Err(Error::config(format!("waveform must be [N, 1, n], got {shape:?}")));
    }
    if params.len() != cfg.kernels_per_group.len() {
        return Err(Error::config("filterbank parameter count does not match its groups"));
    }
    let framing = cfg.framing(n)?;
    let act = Activation::LeakyRelu {
        slope: cfg.leaky_slope,
    };
    let mut groups = Vec::with_capacity(framing.len());
    for (f, &(w, b)) in framing.iter().zip(params) {
        let y = tape.conv1d(wave, w, b, cfg.stride, f.dilation, f.pad_left, f.pad_right)?;
        groups.push(tape.activation(y, act)?);
    }
    tape.concat(&groups, 1)
}
