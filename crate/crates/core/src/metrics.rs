//! Objective separation metrics: SDR, SI-SNR and STOI.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::warn;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::audio::{read_wav, resample, AudioClip};
use crate::error::{Error, Result};

/// Ratios are clamped to `±DB_CAP` decibels.
pub const DB_CAP: f64 = 100.0;

fn check_pair(reference: &AudioClip, estimate: &AudioClip) -> Result<()> {
    if reference.len() != estimate.len() {
        return Err(Error::usage(format!(
            "reference has {} samples, estimate {}",
            reference.len(),
            estimate.len()
        )));
    }
    if reference.sample_rate != estimate.sample_rate {
        return Err(Error::usage(format!(
            "reference is {} Hz, estimate {} Hz",
            reference.sample_rate, estimate.sample_rate
        )));
    }
    Ok(())
}

fn centred(clip: &AudioClip) -> Vec<f64> {
    let n = clip.len().max(1) as f64;
    let mean = clip.samples.iter().map(|&v| v as f64).sum::<f64>() / n;
    clip.samples.iter().map(|&v| v as f64 - mean).collect()
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn ratio_db(signal: f64, noise: f64) -> f64 {
    if noise <= 0.0 {
        return DB_CAP;
    }
    if signal <= 0.0 {
        return -DB_CAP;
    }
    (10.0 * (signal / noise).log10()).clamp(-DB_CAP, DB_CAP)
}

fn centred_pair(reference: &AudioClip, estimate: &AudioClip) -> Result<(Vec<f64>, Vec<f64>)> {
    check_pair(reference, estimate)?;
    let s = centred(reference);
    if energy(&s) == 0.0 {
        return Err(Error::usage("reference signal is silent"));
    }
    Ok((s, centred(estimate)))
}

/// Signal-to-distortion ratio in dB on mean-removed signals.
pub fn sdr(reference: &AudioClip, estimate: &AudioClip) -> Result<f64> {
    let (s, e) = centred_pair(reference, estimate)?;
    let err: f64 = s.iter().zip(&e).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(ratio_db(energy(&s), err))
}

/// Scale-invariant signal-to-noise ratio in dB.
pub fn si_snr(reference: &AudioClip, estimate: &AudioClip) -> Result<f64> {
    let (s, e) = centred_pair(reference, estimate)?;
    let dot: f64 = s.iter().zip(&e).map(|(a, b)| a * b).sum();
    if dot == 0.0 {
        return Ok(-DB_CAP);
    }
    let alpha = dot / energy(&s);
    let (mut target, mut noise) = (0.0, 0.0);
    for (a, b) in s.iter().zip(&e) {
        let t = alpha * a;
        target += t * t;
        noise += (b - t) * (b - t);
    }
    Ok(ratio_db(target, noise))
}

const STOI_RATE: u32 = 10_000;
const STOI_FRAME: usize = 256;
const STOI_FFT: usize = 512;
const STOI_BANDS: usize = 15;
const STOI_MIN_FREQ: f64 = 150.0;
const STOI_SEGMENT: usize = 30;
const STOI_BETA_DB: f64 = -15.0;
const STOI_DYN_RANGE_DB: f64 = 40.0;

/// Hann window of `len` points without the zero end points.
fn stoi_window(len: usize) -> Vec<f64> {
    let m = (len + 2) as f64;
    (1..=len)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (m - 1.0)).cos())
        .collect()
}

fn frame_starts(len: usize, frame: usize, hop: usize) -> impl Iterator<Item = usize> {
    (0..len.saturating_sub(frame)).step_by(hop)
}

/// Drops frames more than `STOI_DYN_RANGE_DB` below the loudest reference
/// frame and overlap-adds the survivors.
fn remove_silent_frames(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let hop = STOI_FRAME / 2;
    let w = stoi_window(STOI_FRAME);
    let starts: Vec<usize> = frame_starts(x.len(), STOI_FRAME, hop).collect();
    let energies: Vec<f64> = starts
        .iter()
        .map(|&s| {
            let e: f64 = (0..STOI_FRAME).map(|i| (w[i] * x[s + i]).powi(2)).sum();
            20.0 * (e.sqrt() + f64::EPSILON).log10()
        })
        .collect();
    let peak = energies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<usize> = starts
        .iter()
        .zip(&energies)
        .filter(|&(_, &e)| peak - STOI_DYN_RANGE_DB - e < 0.0)
        .map(|(&s, _)| s)
        .collect();
    if kept.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let out_len = (kept.len() - 1) * hop + STOI_FRAME;
    let mut xs = vec![0.0; out_len];
    let mut ys = vec![0.0; out_len];
    for (k, &s) in kept.iter().enumerate() {
        for i in 0..STOI_FRAME {
            xs[k * hop + i] += w[i] * x[s + i];
            ys[k * hop + i] += w[i] * y[s + i];
        }
    }
    (xs, ys)
}

/// Power spectra `[frame][bin]` of 256-sample frames at 50% overlap.
fn stoi_spectra(x: &[f64]) -> Vec<Vec<f64>> {
    let w = stoi_window(STOI_FRAME);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(STOI_FFT);
    let mut buf = vec![Complex64::new(0.0, 0.0); STOI_FFT];
    frame_starts(x.len(), STOI_FRAME, STOI_FRAME / 2)
        .map(|s| {
            buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            for i in 0..STOI_FRAME {
                buf[i].re = w[i] * x[s + i];
            }
            fft.process(&mut buf);
            buf[..STOI_FFT / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
        })
        .collect()
}

/// One-third-octave band edges as `[lo, hi)` FFT-bin ranges, each edge
/// snapped to the nearest bin.
fn third_octave_bands() -> Vec<(usize, usize)> {
    let bins = STOI_FFT / 2 + 1;
    let freqs: Vec<f64> = (0..bins)
        .map(|k| k as f64 * STOI_RATE as f64 / STOI_FFT as f64)
        .collect();
    let nearest = |target: f64| {
        let mut best = 0;
        for (i, f) in freqs.iter().enumerate() {
            if (f - target).powi(2) < (freqs[best] - target).powi(2) {
                best = i;
            }
        }
        best
    };
    (0..STOI_BANDS)
        .map(|k| {
            let k = k as f64;
            let lo = STOI_MIN_FREQ * 2f64.powf((2.0 * k - 1.0) / 6.0);
            let hi = STOI_MIN_FREQ * 2f64.powf((2.0 * k + 1.0) / 6.0);
            (nearest(lo), nearest(hi))
        })
        .collect()
}

fn band_envelopes(spectra: &[Vec<f64>], bands: &[(usize, usize)]) -> Vec<Vec<f64>> {
    bands
        .iter()
        .map(|&(lo, hi)| {
            spectra
                .iter()
                .map(|frame| frame[lo..hi].iter().sum::<f64>().sqrt())
                .collect()
        })
        .collect()
}

fn norm(x: &[f64]) -> f64 {
    energy(x).sqrt()
}

fn centre_in_place(x: &mut [f64]) {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter_mut().for_each(|v| *v -= mean);
}

/// Short-time objective intelligibility of `estimate` against `reference`.
pub fn stoi(reference: &AudioClip, estimate: &AudioClip) -> Result<f64> {
    check_pair(reference, estimate)?;
    let (x, y) = if reference.sample_rate == STOI_RATE {
        (reference.clone(), estimate.clone())
    } else {
        (resample(reference, STOI_RATE)?, resample(estimate, STOI_RATE)?)
    };
    let x: Vec<f64> = x.samples.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = y.samples.iter().map(|&v| v as f64).collect();
    let (x, y) = remove_silent_frames(&x, &y);
    let xs = stoi_spectra(&x);
    let ys = stoi_spectra(&y);
    if xs.len() < STOI_SEGMENT {
        let min_ms = (STOI_SEGMENT * STOI_FRAME / 2) as f64 * 1000.0 / STOI_RATE as f64;
        return Err(Error::usage(format!(
            "STOI needs at least {min_ms:.0} ms of non-silent audio ({} frames after silence removal)",
            xs.len()
        )));
    }
    let bands = third_octave_bands();
    let xb = band_envelopes(&xs, &bands);
    let yb = band_envelopes(&ys, &bands);
    let clip = 1.0 + 10f64.powf(-STOI_BETA_DB / 20.0);
    let frames = xs.len();
    let mut total = 0.0;
    let mut count = 0usize;
    for m in STOI_SEGMENT..=frames {
        for (xe, ye) in xb.iter().zip(&yb) {
            let mut xseg = xe[m - STOI_SEGMENT..m].to_vec();
            let yseg = &ye[m - STOI_SEGMENT..m];
            let scale = norm(&xseg) / (norm(yseg) + f64::EPSILON);
            let mut yp: Vec<f64> = yseg
                .iter()
                .zip(&xseg)
                .map(|(&yv, &xv)| (yv * scale).min(xv * clip))
                .collect();
            centre_in_place(&mut yp);
            centre_in_place(&mut xseg);
            let ny = norm(&yp) + f64::EPSILON;
            let nx = norm(&xseg) + f64::EPSILON;
            total += yp.iter().zip(&xseg).map(|(a, b)| (a / ny) * (b / nx)).sum::<f64>();
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Metrics for one reference/estimate pair.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub clip: String,
    pub sdr_db: f64,
    pub si_snr_db: f64,
    pub stoi: f64,
}

impl EvalRow {
    pub fn compute(clip: impl Into<String>, reference: &AudioClip, estimate: &AudioClip) -> Result<Self> {
        Ok(EvalRow {
            clip: clip.into(),
            sdr_db: sdr(reference, estimate)?,
            si_snr_db: si_snr(reference, estimate)?,
            stoi: stoi(reference, estimate)?,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Files that could not be evaluated, with the reason.
    pub skipped: Vec<(String, String)>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

impl EvalReport {
    fn column(&self, f: impl Fn(&EvalRow) -> f64) -> Vec<f64> {
        self.rows.iter().map(f).collect()
    }

    fn aggregate(&self, name: &str, agg: fn(&[f64]) -> f64) -> Option<EvalRow> {
        if self.rows.is_empty() {
            return None;
        }
        Some(EvalRow {
            clip: name.to_string(),
            sdr_db: agg(&self.column(|r| r.sdr_db)),
            si_snr_db: agg(&self.column(|r| r.si_snr_db)),
            stoi: agg(&self.column(|r| r.stoi)),
        })
    }

    pub fn mean(&self) -> Option<EvalRow> {
        self.aggregate("mean", mean)
    }

    pub fn median(&self) -> Option<EvalRow> {
        self.aggregate("median", median)
    }

    /// Header, one row per pair, then `mean` and `median` rows when any
    /// pair was evaluated.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("clip,sdr_db,si_snr_db,stoi\n");
        let rows = self.rows.iter().cloned().chain(self.mean()).chain(self.median());
        for r in rows {
            let _ = writeln!(out, "{},{:.4},{:.4},{:.4}", r.clip, r.sdr_db, r.si_snr_db, r.stoi);
        }
        out
    }
}

fn wav_names(dir: &Path) -> Result<Vec<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_file() && path.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")) {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

/// Evaluates every `*.wav` in `ref_dir` against the same file name in
/// `est_dir`. Unmatched or unreadable files are listed in
/// [`EvalReport::skipped`]; the remaining pairs are still evaluated.
pub fn evaluate_pairs(ref_dir: &Path, est_dir: &Path) -> Result<EvalReport> {
    let refs = wav_names(ref_dir)?;
    let ests = wav_names(est_dir)?;
    let mut report = EvalReport::default();
    for name in &refs {
        if !ests.contains(name) {
            report.skipped.push((name.clone(), format!("no estimate in {}", est_dir.display())));
            continue;
        }
        let pair = |dir: &Path| -> PathBuf { dir.join(name) };
        let row = read_wav(pair(ref_dir))
            .and_then(|r| read_wav(pair(est_dir)).map(|e| (r, e)))
            .and_then(|(r, e)| EvalRow::compute(name.clone(), &r, &e));
        match row {
            Ok(row) => report.rows.push(row),
            Err(e) => report.skipped.push((name.clone(), e.to_string())),
        }
    }
    for name in ests.iter().filter(|n| !refs.contains(n)) {
        report.skipped.push((name.clone(), format!("no reference in {}", ref_dir.display())));
    }
    if refs.is_empty() && ests.is_empty() {
        warn!("no WAV files found in {} or {}", ref_dir.display(), est_dir.display());
    }
    for (name, why) in &report.skipped {
        warn!("skipped {name}: {why}");
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stoi_window_matches_trimmed_hanning() {
        // numpy.hanning(5)[1:-1] = [0.5, 1, 0.5]
        let w = stoi_window(3);
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 1.0).abs() < 1e-15 && (w[2] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn band_edges() {
        let bands = third_octave_bands();
        assert_eq!(bands.len(), 15);
        // 150 * 2^(-1/6) = 133.6 Hz -> bin 7 (136.7 Hz); 150 * 2^(1/6) = 168.4 Hz -> bin 9 (175.8 Hz)
        assert_eq!(bands[0], (7, 9));
        assert!(bands.windows(2).all(|w| w[0].1 == w[1].0));
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
