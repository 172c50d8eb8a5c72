use std::f64::consts::PI;
use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::audio::{read_wav, resample, slice_windows, AudioClip, CANONICAL_RATE, WINDOW_LEN};
use crate::error::{Error, Result};

/// Aligned mixture and vocal windows of one training example.
#[derive(Clone, Debug, PartialEq)]
pub struct ExamplePair {
    pub mixture: Vec<f32>,
    pub vocal: Vec<f32>,
    /// `song#window` for stems, `synth#index` for generated pairs.
    pub id: String,
}

fn load_canonical(path: &Path, song: &str) -> Result<AudioClip> {
    let clip = read_wav(path)?;
    if clip.sample_rate == CANONICAL_RATE {
        return Ok(clip);
    }
    warn!(
        "{song}: {} is {} Hz, resampling to {CANONICAL_RATE} Hz",
        path.display(),
        clip.sample_rate
    );
    resample(&clip, CANONICAL_RATE)
}

/// Reads `<root>/<song>/{mixture,vocals}.wav` for every song directory in
/// lexicographic order and slices both stems into aligned
/// `window_len`-sample windows.
pub fn build_dataset(root: &Path, window_len: usize) -> Result<Vec<ExamplePair>> {
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut songs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.path().is_dir() {
            songs.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    songs.sort();
    let mut pairs = Vec::new();
    for song in songs {
        let dir = root.join(&song);
        let (mix_path, voc_path) = (dir.join("mixture.wav"), dir.join("vocals.wav"));
        if !mix_path.is_file() || !voc_path.is_file() {
            warn!("{song}: missing mixture.wav or vocals.wav, skipped");
            continue;
        }
        let mut mix = load_canonical(&mix_path, &song)?;
        let mut voc = load_canonical(&voc_path, &song)?;
        if mix.len() != voc.len() {
            warn!(
                "{song}: mixture has {} samples, vocals {}; truncating to the shorter",
                mix.len(),
                voc.len()
            );
            let n = mix.len().min(voc.len());
            mix.samples.truncate(n);
            voc.samples.truncate(n);
        }
        let mix_windows = slice_windows(&mix, window_len, window_len)?;
        let voc_windows = slice_windows(&voc, window_len, window_len)?;
        for (i, (m, v)) in mix_windows.into_iter().zip(voc_windows).enumerate() {
            pairs.push(ExamplePair {
                mixture: m.samples,
                vocal: v.samples,
                id: format!("{song}#{i}"),
            });
        }
    }
    Ok(pairs)
}

/// Vocal-to-accompaniment power ratios are drawn from this range (dB).
pub const SYNTH_RATIO_DB: (f64, f64) = (-6.0, 6.0);
/// Peak absolute value of every generated mixture.
pub const SYNTH_PEAK: f32 = 0.9;

/// Synthetic stems of one generated example before mixing.
#[derive(Clone, Debug)]
pub struct SynthStems {
    pub vocal: Vec<f64>,
    pub accompaniment: Vec<f64>,
}

fn synth_vocal(rng: &mut ChaCha8Rng, n: usize, rate: f64) -> Vec<f64> {
    let f_start: f64 = rng.random_range(120.0..600.0);
    let f_end: f64 = rng.random_range(120.0..600.0);
    let vib_rate: f64 = rng.random_range(4.5..6.5);
    let vib_depth: f64 = rng.random_range(0.005..0.02);
    let trem_rate: f64 = rng.random_range(3.0..7.0);
    let trem_depth: f64 = rng.random_range(0.1..0.4);
    let harmonics = rng.random_range(3..=6);
    let amps: Vec<f64> = (1..=harmonics)
        .map(|h| rng.random_range(0.5..1.0) / h as f64)
        .collect();
    let duration = n as f64 / rate;
    let mut phase = 0.0;
    (0..n)
        .map(|i| {
            let t = i as f64 / rate;
            let glide = f_start * (f_end / f_start).powf(t / duration);
            let f0 = glide * (1.0 + vib_depth * (2.0 * PI * vib_rate * t).sin());
            phase += 2.0 * PI * f0 / rate;
            let env = 1.0 + trem_depth * (2.0 * PI * trem_rate * t).sin();
            let mut s = 0.0;
            for (h, a) in amps.iter().enumerate() {
                let fh = f0 * (h + 1) as f64;
                if fh < rate / 2.0 {
                    s += a * ((h + 1) as f64 * phase).sin();
                }
            }
            env * s
        })
        .collect()
}

fn synth_accompaniment(rng: &mut ChaCha8Rng, n: usize, rate: f64) -> Vec<f64> {
    // three one-pole sections approximate a 1/f slope over the audio band
    let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
    let tones: Vec<(f64, f64, f64)> = (0..rng.random_range(2..=3))
        .map(|_| {
            (
                rng.random_range(40.0..110.0),
                rng.random_range(0.5..1.5),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let tone_gain: f64 = rng.random_range(0.5..2.0);
    (0..n)
        .map(|i| {
            let w: f64 = rng.sample(StandardNormal);
            b0 = 0.99765 * b0 + w * 0.099_046;
            b1 = 0.963 * b1 + w * 0.296_516_4;
            b2 = 0.57 * b2 + w * 1.052_691_3;
            let pink = (b0 + b1 + b2 + w * 0.1848) * 0.2;
            let t = i as f64 / rate;
            let bed: f64 = tones.iter().map(|&(f, a, p)| a * (2.0 * PI * f * t + p).sin()).sum();
            pink + tone_gain * bed
        })
        .collect()
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Stems of generated example `index` under `seed`, with the
/// accompaniment scaled to a random vocal-to-accompaniment ratio in
/// [`SYNTH_RATIO_DB`].
pub fn synth_stems(seed: u64, index: usize, n: usize) -> SynthStems {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let rate = CANONICAL_RATE as f64;
    let vocal = synth_vocal(&mut rng, n, rate);
    let mut accompaniment = synth_accompaniment(&mut rng, n, rate);
    let ratio_db: f64 = rng.random_range(SYNTH_RATIO_DB.0..SYNTH_RATIO_DB.1);
    let gain = (power(&vocal) / power(&accompaniment) / 10f64.powf(ratio_db / 10.0)).sqrt();
    accompaniment.iter_mut().for_each(|v| *v *= gain);
    SynthStems { vocal, accompaniment }
}

/// Seeded synthetic pairs of `n`-sample windows; mixtures peak at
/// [`SYNTH_PEAK`] with the vocal scaled by the same factor.
pub fn synth_dataset_len(seed: u64, pairs: usize, n: usize) -> Result<Vec<ExamplePair>> {
    if pairs == 0 {
        return Err(Error::usage("synthetic dataset needs at least one pair"));
    }
    Ok((0..pairs)
        .map(|i| {
            let stems = synth_stems(seed, i, n);
            let mix: Vec<f64> = stems.vocal.iter().zip(&stems.accompaniment).map(|(a, b)| a + b).collect();
            let peak = mix.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let g = SYNTH_PEAK as f64 / peak;
            ExamplePair {
                mixture: mix.iter().map(|v| (v * g) as f32).collect(),
                vocal: stems.vocal.iter().map(|v| (v * g) as f32).collect(),
                id: format!("synth#{i}"),
            }
        })
        .collect())
}

/// [`synth_dataset_len`] at the canonical window length.
pub fn synth_dataset(seed: u64, pairs: usize) -> Result<Vec<ExamplePair>> {
    synth_dataset_len(seed, pairs, WINDOW_LEN)
}
