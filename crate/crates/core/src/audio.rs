//! Mono audio clips, RIFF/WAVE reading and writing, fixed-length windowing
//! and rational-ratio resampling.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Sample rate used throughout training.
pub const CANONICAL_RATE: u32 = 44_100;
/// Training window length in samples (about 1.52 s at 44.1 kHz).
pub const WINDOW_LEN: usize = 67_072;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::usage("sample rate must be positive"));
        }
        Ok(AudioClip {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Reads a PCM-16 or float-32 WAV file, averaging stereo down to mono.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::format(format!("{}: {msg}", path.display())),
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

fn truncated(what: &str) -> Error {
    Error::io(
        "<wav>",
        std::io::Error::new(std::io::ErrorKind::UnexpectedEof, format!("truncated {what}")),
    )
}

pub fn decode_wav(bytes: &[u8]) -> Result<AudioClip> {
    if bytes.len() < 12 {
        return Err(truncated("RIFF header"));
    }
    if &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::format("chunk `RIFF`: not a RIFF/WAVE file"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        if id == b"data" {
            if body + size > bytes.len() {
                return Err(truncated("`data` chunk"));
            }
            data = Some(&bytes[body..body + size]);
        } else if id == b"fmt " {
            if size < 16 || body + size > bytes.len() {
                return Err(truncated("`fmt ` chunk"));
            }
            let mut tag = u16_at(bytes, body);
            if tag == FORMAT_EXTENSIBLE {
                if size < 40 {
                    return Err(Error::format("chunk `fmt `: extensible header too short"));
                }
                tag = u16_at(bytes, body + 24);
            }
            fmt = Some((
                tag,
                u16_at(bytes, body + 2),
                u32_at(bytes, body + 4),
                u16_at(bytes, body + 14),
            ));
        }
        pos = body + size + (size & 1);
    }
    let (tag, channels, rate, bits) = fmt.ok_or_else(|| Error::format("chunk `fmt `: missing"))?;
    let data = data.ok_or_else(|| Error::format("chunk `data`: missing"))?;
    if channels == 0 || channels > 2 {
        return Err(Error::format(format!(
            "chunk `fmt `: {channels} channels unsupported (mono or stereo only)"
        )));
    }
    if rate == 0 {
        return Err(Error::format("chunk `fmt `: zero sample rate"));
    }
    let decoded: Vec<f32> = match (tag, bits) {
        (FORMAT_PCM, 16) => data
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32768.0)
            .collect(),
        (FORMAT_FLOAT, 32) => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        _ => {
            return Err(Error::format(format!(
                "chunk `fmt `: format code {tag} with {bits} bits per sample unsupported \
                 (PCM-16 or IEEE float-32 only)"
            )))
        }
    };
    let samples = if channels == 2 {
        decoded.chunks_exact(2).map(|lr| 0.5 * (lr[0] + lr[1])).collect()
    } else {
        decoded
    };
    AudioClip::new(samples, rate)
}

/// Encodes `clip` as a mono RIFF/WAVE byte stream.
pub fn encode_wav(clip: &AudioClip, encoding: WavEncoding) -> Vec<u8> {
    let (tag, bits) = match encoding {
        WavEncoding::Pcm16 => (FORMAT_PCM, 16u16),
        WavEncoding::Float32 => (FORMAT_FLOAT, 32u16),
    };
    let block = bits / 8;
    let data_len = clip.samples.len() * block as usize;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate * block as u32).to_le_bytes());
    out.extend_from_slice(&block.to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &clip.samples {
        match encoding {
            WavEncoding::Pcm16 => {
                let q = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                out.extend_from_slice(&q.to_le_bytes());
            }
            WavEncoding::Float32 => out.extend_from_slice(&s.to_le_bytes()),
        }
    }
    out
}

pub fn write_wav(clip: &AudioClip, path: impl AsRef<Path>, encoding: WavEncoding) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode_wav(clip, encoding))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Cuts `clip` into windows starting at multiples of `hop`.
///
/// The trailing partial window is zero-padded when it is at least half
/// full and dropped otherwise.
pub fn slice_windows(clip: &AudioClip, window_len: usize, hop: usize) -> Result<Vec<AudioClip>> {
    if window_len == 0 || hop == 0 {
        return Err(Error::usage("window length and hop must be positive"));
    }
    let n = clip.samples.len();
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let remaining = n - start;
        if remaining >= window_len {
            out.push(AudioClip {
                samples: clip.samples[start..start + window_len].to_vec(),
                sample_rate: clip.sample_rate,
            });
        } else {
            if 2 * remaining >= window_len {
                let mut samples = clip.samples[start..].to_vec();
                samples.resize(window_len, 0.0);
                out.push(AudioClip {
                    samples,
                    sample_rate: clip.sample_rate,
                });
            }
            break;
        }
        start += hop;
    }
    Ok(out)
}

const RESAMPLE_HALF_TAPS: usize = 32;
const KAISER_BETA: f64 = 8.6;

/// Zeroth-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// 64 Kaiser-windowed sinc taps for input offsets `base-31 ..= base+32`
/// given the fractional position `frac` in `[0, 1)`, normalised to unit
/// DC gain.
fn resample_taps(frac: f64, cutoff: f64) -> [f64; 2 * RESAMPLE_HALF_TAPS] {
    let half = RESAMPLE_HALF_TAPS as f64;
    let norm = bessel_i0(KAISER_BETA);
    let mut taps = [0.0; 2 * RESAMPLE_HALF_TAPS];
    for (j, tap) in taps.iter_mut().enumerate() {
        let tau = frac + half - 1.0 - j as f64;
        let arg = cutoff * tau;
        let sinc = if arg.abs() < 1e-12 {
            1.0
        } else {
            (std::f64::consts::PI * arg).sin() / (std::f64::consts::PI * arg)
        };
        let r = (tau / half).clamp(-1.0, 1.0);
        *tap = cutoff * sinc * bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / norm;
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Windowed-sinc (Kaiser, beta 8.6, 64 taps per polyphase branch)
/// rational-ratio resampling. Output length is `round(n * target / source)`.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if target_rate == 0 {
        return Err(Error::usage("target sample rate must be positive"));
    }
    if target_rate == clip.sample_rate {
        return Ok(clip.clone());
    }
    let g = gcd(target_rate as u64, clip.sample_rate as u64);
    let up = target_rate as u64 / g;
    let down = clip.sample_rate as u64 / g;
    let cutoff = (up as f64 / down as f64).min(1.0);
    let n = clip.samples.len();
    let out_len = (n as f64 * target_rate as f64 / clip.sample_rate as f64).round() as usize;
    let table: Option<Vec<[f64; 64]>> =
        (up <= 4096).then(|| (0..up).map(|p| resample_taps(p as f64 / up as f64, cutoff)).collect());
    let x = &clip.samples;
    let samples = (0..out_len as u64)
        .map(|i| {
            let base = (i * down / up) as isize;
            let phase = (i * down % up) as usize;
            let computed;
            let taps = match &table {
                Some(t) => &t[phase],
                None => {
                    computed = resample_taps(phase as f64 / up as f64, cutoff);
                    &computed
                }
            };
            let first = base - (RESAMPLE_HALF_TAPS as isize - 1);
            let mut acc = 0.0f64;
            for (j, &h) in taps.iter().enumerate() {
                let idx = first + j as isize;
                if idx >= 0 && (idx as usize) < n {
                    acc += h * x[idx as usize] as f64;
                }
            }
            acc as f32
        })
        .collect();
    AudioClip::new(samples, target_rate)
}
