//! STFT analysis, mixture-phase ISTFT synthesis and mel rendering.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::audio::AudioClip;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StftConfig {
    /// Analysis window and FFT length.
    pub window_len: usize,
    pub hop: usize,
    /// Number of low-frequency bins kept in the magnitude/phase planes.
    pub freq_bins: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            window_len: 2048,
            hop: 512,
            freq_bins: 1024,
        }
    }
}

impl StftConfig {
    pub fn fft_len(&self) -> usize {
        self.window_len
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_len < 2 || self.hop == 0 || self.hop > self.window_len {
            return Err(Error::config(format!(
                "invalid STFT framing: window {} hop {}",
                self.window_len, self.hop
            )));
        }
        if self.freq_bins == 0 || self.freq_bins > self.window_len / 2 + 1 {
            return Err(Error::config(format!(
                "freq_bins {} must lie in 1..={}",
                self.freq_bins,
                self.window_len / 2 + 1
            )));
        }
        Ok(())
    }

    pub fn frames_for(&self, n: usize) -> Option<usize> {
        (n >= self.window_len).then(|| (n - self.window_len) / self.hop + 1)
    }

    /// Shortest signal length that yields exactly `frames` frames.
    pub fn samples_for(&self, frames: usize) -> usize {
        (frames - 1) * self.hop + self.window_len
    }
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / len as f64).cos())
        .collect()
}

/// Magnitude and phase planes (`freq_bins x time_bins`, row-major by
/// frequency) of a framed analysis.
///
/// Bins above `freq_bins` that the analysis produced are carried in
/// `upper_bins` (`time_bins x dropped`) so that synthesis can rebuild the
/// signal exactly; they are not part of the planes the network sees.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    pub magnitude: Vec<f64>,
    pub phase: Vec<f64>,
    pub config: StftConfig,
    pub time_bins: usize,
    pub original_length: usize,
    pub sample_rate: u32,
    pub upper_bins: Option<Vec<Complex64>>,
}

impl ComplexSpectrogram {
    pub fn freq_bins(&self) -> usize {
        self.config.freq_bins
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.config.freq_bins, self.time_bins)
    }

    fn dropped_bins(&self) -> usize {
        self.config.window_len / 2 + 1 - self.config.freq_bins
    }

    /// Replaces the magnitude plane with `mask * magnitude`, clamped at 0.
    /// Carried upper bins are scaled by the mask of the highest kept bin in
    /// the same frame. The phase plane is left untouched.
    pub fn apply_mask(&self, mask: &[f32]) -> Result<ComplexSpectrogram> {
        if mask.len() != self.magnitude.len() {
            return Err(Error::config(format!(
                "mask has {} values, spectrogram {}",
                mask.len(),
                self.magnitude.len()
            )));
        }
        let magnitude = self
            .magnitude
            .iter()
            .zip(mask)
            .map(|(&m, &g)| (m * g as f64).max(0.0))
            .collect();
        Ok(ComplexSpectrogram {
            magnitude,
            upper_bins: self.scaled_upper(|t| (mask[(self.freq_bins() - 1) * self.time_bins + t] as f64).max(0.0)),
            ..self.clone()
        })
    }

    /// Uses `magnitude` directly as the estimated magnitude plane (clamped
    /// at 0), keeping the mixture phase. Upper bins are scaled by the ratio
    /// of estimated to mixture magnitude at the highest kept bin.
    pub fn with_magnitude(&self, magnitude: &[f32]) -> Result<ComplexSpectrogram> {
        if magnitude.len() != self.magnitude.len() {
            return Err(Error::config("magnitude plane size mismatch"));
        }
        let top = (self.freq_bins() - 1) * self.time_bins;
        Ok(ComplexSpectrogram {
            magnitude: magnitude.iter().map(|&m| (m as f64).max(0.0)).collect(),
            upper_bins: self.scaled_upper(|t| {
                let mix = self.magnitude[top + t];
                if mix > 0.0 {
                    (magnitude[top + t] as f64).max(0.0) / mix
                } else {
                    0.0
                }
            }),
            ..self.clone()
        })
    }

    fn scaled_upper(&self, gain: impl Fn(usize) -> f64) -> Option<Vec<Complex64>> {
        let dropped = self.dropped_bins();
        self.upper_bins.as_ref().map(|up| {
            up.iter()
                .enumerate()
                .map(|(i, &c)| c * gain(i / dropped))
                .collect()
        })
    }

    pub fn magnitude_f32(&self) -> Vec<f32> {
        self.magnitude.iter().map(|&m| m as f32).collect()
    }
}

/// Short-time Fourier transform without centring or padding.
pub fn stft(clip: &AudioClip, cfg: StftConfig) -> Result<ComplexSpectrogram> {
    cfg.validate()?;
    let n = clip.samples.len();
    let frames = cfg.frames_for(n).ok_or_else(|| {
        Error::usage(format!(
            "clip of {n} samples is shorter than one {}-sample window",
            cfg.window_len
        ))
    })?;
    let w = cfg.window_len;
    let bins = cfg.freq_bins;
    let half = w / 2 + 1;
    let dropped = half - bins;
    let window = hann(w);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(w);
    let mut buf = vec![Complex64::new(0.0, 0.0); w];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut magnitude = vec![0.0; bins * frames];
    let mut phase = vec![0.0; bins * frames];
    let mut upper = Vec::with_capacity(dropped * frames);
    for t in 0..frames {
        let seg = &clip.samples[t * cfg.hop..t * cfg.hop + w];
        for ((b, &s), &win) in buf.iter_mut().zip(seg).zip(&window) {
            *b = Complex64::new(s as f64 * win, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for k in 0..bins {
            let c = buf[k];
            magnitude[k * frames + t] = c.norm();
            let mut p = c.arg();
            if p <= -PI {
                p = PI;
            }
            phase[k * frames + t] = p;
        }
        upper.extend_from_slice(&buf[bins..half]);
    }
    Ok(ComplexSpectrogram {
        magnitude,
        phase,
        config: cfg,
        time_bins: frames,
        original_length: n,
        sample_rate: clip.sample_rate,
        upper_bins: (dropped > 0).then_some(upper),
    })
}

/// Inverse STFT by weighted overlap-add with a Hann synthesis window,
/// normalised by the summed squared-window envelope.
pub fn istft(spec: &ComplexSpectrogram) -> Result<AudioClip> {
    let cfg = spec.config;
    cfg.validate()?;
    let (bins, frames) = spec.shape();
    if spec.magnitude.len() != bins * frames || spec.phase.len() != bins * frames {
        return Err(Error::config("spectrogram planes do not match their declared shape"));
    }
    let w = cfg.window_len;
    let half = w / 2 + 1;
    let dropped = half - bins;
    if let Some(up) = &spec.upper_bins {
        if up.len() != dropped * frames {
            return Err(Error::config("carried upper bins do not match the framing"));
        }
    }
    let window = hann(w);
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(w);
    let mut buf = vec![Complex64::new(0.0, 0.0); w];
    let mut scratch = vec![Complex64::new(0.0, 0.0); ifft.get_inplace_scratch_len()];
    let span = cfg.samples_for(frames).max(spec.original_length);
    let mut acc = vec![0.0f64; span];
    let mut env = vec![0.0f64; span];
    let scale = 1.0 / w as f64;
    for t in 0..frames {
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        for k in 0..bins {
            buf[k] = Complex64::from_polar(spec.magnitude[k * frames + t], spec.phase[k * frames + t]);
        }
        if let Some(up) = &spec.upper_bins {
            buf[bins..half].copy_from_slice(&up[t * dropped..(t + 1) * dropped]);
        }
        for k in 1..w - half + 1 {
            buf[w - k] = buf[k].conj();
        }
        ifft.process_with_scratch(&mut buf, &mut scratch);
        let start = t * cfg.hop;
        for (i, (c, &win)) in buf.iter().zip(&window).enumerate() {
            acc[start + i] += c.re * scale * win;
            env[start + i] += win * win;
        }
    }
    // Where fewer windows overlap (the first and last partial hop), a
    // modified spectrogram is no longer consistent and dividing by a tiny
    // window energy would blow the mismatch up. Floor the normaliser.
    let floor = ENVELOPE_FLOOR * env.iter().fold(0.0f64, |m, &e| m.max(e));
    let samples = acc
        .iter()
        .zip(&env)
        .take(spec.original_length)
        .map(|(&a, &e)| if e > 0.0 { (a / e.max(floor)) as f32 } else { 0.0 })
        .collect();
    AudioClip::new(samples, spec.sample_rate)
}

/// Lowest overlap-add normaliser, relative to its peak.
pub const ENVELOPE_FLOOR: f64 = 0.1;

/// Dense row-major matrix of reals used for rendered images.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// ASCII PGM (P2), `cols` wide and `rows` high with row 0 at the
    /// bottom, linearly mapped onto 0..=255 over the matrix range. A
    /// constant matrix renders as all zeros.
    pub fn to_pgm(&self) -> String {
        let lo = self.data.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        let mut out = format!("P2\n{} {}\n255\n", self.cols, self.rows);
        for r in (0..self.rows).rev() {
            let line: Vec<String> = (0..self.cols)
                .map(|c| {
                    let v = if range > 0.0 {
                        ((self.get(r, c) - lo) / range * 255.0).round()
                    } else {
                        0.0
                    };
                    (v as u8).to_string()
                })
                .collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in 0..self.rows {
            for c in 0..self.cols {
                if c > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{}", self.get(r, c));
            }
            out.push('\n');
        }
        out
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-scale filterbank, `n_mels x freq_bins`, spanning
/// 0 Hz to Nyquist with unit-peak triangles.
pub fn mel_filterbank(n_mels: usize, freq_bins: usize, fft_len: usize, sample_rate: u32) -> Matrix {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut data = vec![0.0; n_mels * freq_bins];
    for m in 0..n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..freq_bins {
            let f = k as f64 * sample_rate as f64 / fft_len as f64;
            let w = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            data[m * freq_bins + k] = w;
        }
    }
    Matrix {
        rows: n_mels,
        cols: freq_bins,
        data,
    }
}

/// Mel energies of the power spectrogram before the log.
pub fn mel_power(spec: &ComplexSpectrogram, n_mels: usize) -> Result<Matrix> {
    if n_mels == 0 {
        return Err(Error::usage("n_mels must be at least 1"));
    }
    let (bins, frames) = spec.shape();
    let fb = mel_filterbank(n_mels, bins, spec.config.fft_len(), spec.sample_rate);
    let mut data = vec![0.0; n_mels * frames];
    for m in 0..n_mels {
        for k in 0..bins {
            let wgt = fb.get(m, k);
            if wgt == 0.0 {
                continue;
            }
            for t in 0..frames {
                let mag = spec.magnitude[k * frames + t];
                data[m * frames + t] += wgt * mag * mag;
            }
        }
    }
    Ok(Matrix {
        rows: n_mels,
        cols: frames,
        data,
    })
}

/// Log-mel rendering: `log10(mel power + 1e-10)`, `n_mels x time_bins`.
pub fn mel_render(spec: &ComplexSpectrogram, n_mels: usize) -> Result<Matrix> {
    let mut m = mel_power(spec, n_mels)?;
    m.data.iter_mut().for_each(|v| *v = (*v + 1e-10).log10());
    Ok(m)
}
