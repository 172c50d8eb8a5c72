use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use ynet_core::audio::{resample, write_wav, AudioClip, WavEncoding};
use ynet_core::metrics::{evaluate_pairs, sdr, si_snr, stoi, DB_CAP};
use ynet_core::Error;

fn clip(samples: Vec<f64>, rate: u32) -> AudioClip {
    AudioClip::new(samples.into_iter().map(|v| v as f32).collect(), rate).unwrap()
}

fn gaussian(n: usize, seed: u64) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| r.sample(StandardNormal)).collect()
}

fn centre(x: &mut [f64]) {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter_mut().for_each(|v| *v -= m);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Vowel-like test signal: a few harmonics of a wobbling pitch under a
/// syllabic amplitude envelope.
fn speechlike(n: usize, rate: u32, seed: u64) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let f0 = r.random_range(110.0..220.0);
    let mut phase = 0.0f64;
    (0..n)
        .map(|i| {
            let t = i as f64 / rate as f64;
            let f = f0 * (1.0 + 0.05 * (2.0 * std::f64::consts::PI * 5.0 * t).sin());
            phase += 2.0 * std::f64::consts::PI * f / rate as f64;
            let env = 0.55 + 0.45 * (2.0 * std::f64::consts::PI * 3.0 * t).sin();
            env * (1..=5).map(|h| (h as f64 * phase).sin() / h as f64).sum::<f64>()
        })
        .collect()
}

#[test]
fn sdr_examples() {
    let s = gaussian(20_000, 1);
    let ref_clip = clip(s.clone(), 16_000);
    assert_eq!(sdr(&ref_clip, &ref_clip).unwrap(), DB_CAP);
    assert_eq!(si_snr(&ref_clip, &ref_clip).unwrap(), DB_CAP);

    let neg = clip(s.iter().map(|v| -v).collect(), 16_000);
    // |s - (-s)|^2 = 4 |s|^2
    let expected = 10.0 * 0.25f64.log10();
    assert!((sdr(&ref_clip, &neg).unwrap() - expected).abs() < 0.01);
    assert!((expected + 6.02).abs() < 0.01);

    // noise orthogonal to s at an exact 100:1 energy ratio
    let mut sc = s.clone();
    centre(&mut sc);
    let mut noise = gaussian(20_000, 2);
    centre(&mut noise);
    let k = dot(&noise, &sc) / dot(&sc, &sc);
    noise.iter_mut().zip(&sc).for_each(|(n, v)| *n -= k * v);
    let scale = (dot(&sc, &sc) / 100.0 / dot(&noise, &noise)).sqrt();
    let est = clip(sc.iter().zip(&noise).map(|(a, b)| a + scale * b).collect(), 16_000);
    let sc_clip = clip(sc.clone(), 16_000);
    assert!((sdr(&sc_clip, &est).unwrap() - 20.0).abs() < 0.01);
}

#[test]
fn si_snr_examples() {
    let s = gaussian(8_000, 3);
    let r = clip(s.clone(), 8_000);
    let scaled = clip(s.iter().map(|v| 3.7 * v).collect(), 8_000);
    assert_eq!(si_snr(&r, &scaled).unwrap(), DB_CAP);

    // estimate exactly orthogonal to the reference: alternating signs
    let a = clip((0..100).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect(), 8_000);
    let b = clip((0..100).map(|i| if (i / 2) % 2 == 0 { 1.0 } else { -1.0 }).collect(), 8_000);
    assert_eq!(si_snr(&a, &b).unwrap(), -DB_CAP);
}

#[test]
fn metric_errors() {
    let a = clip(vec![0.0; 100], 8_000);
    let b = clip(gaussian(100, 1), 8_000);
    assert!(matches!(sdr(&a, &b), Err(Error::Usage(_))));
    assert!(matches!(si_snr(&a, &b), Err(Error::Usage(_))));
    let short = clip(gaussian(99, 1), 8_000);
    assert!(matches!(sdr(&b, &short), Err(Error::Usage(_))));
    match stoi(&b, &b) {
        Err(Error::Usage(msg)) => assert!(msg.contains("384 ms"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn stoi_examples() {
    let rate = 10_000;
    let s = speechlike(30_000, rate, 4);
    let r = clip(s.clone(), rate);
    assert!(stoi(&r, &r).unwrap() >= 0.999);
    let half = clip(s.iter().map(|v| 0.5 * v).collect(), rate);
    assert!(stoi(&r, &half).unwrap() >= 0.99);
    let mut total = 0.0;
    for seed in 0..5 {
        let noise = clip(gaussian(30_000, 100 + seed), rate);
        let d = stoi(&r, &noise).unwrap();
        assert!(d < 0.2, "seed {seed}: {d}");
        total += d;
    }
    assert!(total / 5.0 < 0.2);
}

#[test]
fn stoi_rate_symmetry() {
    let s = speechlike(44_100 * 2, 44_100, 5);
    let noise = gaussian(44_100 * 2, 6);
    let r = clip(s.clone(), 44_100);
    let e = clip(s.iter().zip(&noise).map(|(a, b)| a + 0.3 * b).collect(), 44_100);
    let direct = stoi(&r, &e).unwrap();
    let pre = stoi(&resample(&r, 10_000).unwrap(), &resample(&e, 10_000).unwrap()).unwrap();
    assert!((direct - pre).abs() < 1e-3);
    assert!(direct > 0.3 && direct < 1.0);
}

#[test]
fn evaluate_directories() {
    let root = tempfile::tempdir().unwrap();
    let (rd, ed) = (root.path().join("ref"), root.path().join("est"));
    std::fs::create_dir_all(&rd).unwrap();
    std::fs::create_dir_all(&ed).unwrap();
    let empty = evaluate_pairs(&rd, &ed).unwrap();
    assert!(empty.rows.is_empty());
    assert_eq!(empty.to_csv(), "clip,sdr_db,si_snr_db,stoi\n");

    let a = clip(speechlike(20_000, 10_000, 1), 10_000);
    let b = clip(speechlike(20_000, 10_000, 2), 10_000);
    let b_noisy = clip(
        b.samples.iter().zip(gaussian(20_000, 3)).map(|(&x, n)| x as f64 + 0.2 * n).collect(),
        10_000,
    );
    write_wav(&a, rd.join("a.wav"), WavEncoding::Float32).unwrap();
    write_wav(&a, ed.join("a.wav"), WavEncoding::Float32).unwrap();
    write_wav(&b, rd.join("b.wav"), WavEncoding::Float32).unwrap();
    write_wav(&b_noisy, ed.join("b.wav"), WavEncoding::Float32).unwrap();
    write_wav(&b, rd.join("orphan.wav"), WavEncoding::Float32).unwrap();
    let report = evaluate_pairs(&rd, &ed).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.skipped.len(), 1);
    assert_eq!(report.skipped[0].0, "orphan.wav");
    let first = &report.rows[0];
    assert_eq!((first.sdr_db, first.si_snr_db), (DB_CAP, DB_CAP));
    assert!(first.stoi > 0.999);
    let mean = report.mean().unwrap();
    let median = report.median().unwrap();
    let second = &report.rows[1];
    assert!((mean.sdr_db - (first.sdr_db + second.sdr_db) / 2.0).abs() < 1e-12);
    assert!((median.stoi - (first.stoi + second.stoi) / 2.0).abs() < 1e-12);
    let csv = report.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[3].starts_with("mean,") && lines[4].starts_with("median,"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn si_snr_is_scale_invariant(seed in 0u64..1000, a in prop::sample::select(vec![0.1f64, 1.0, 10.0])) {
        let s = gaussian(4_000, seed);
        let noise = gaussian(4_000, seed + 7);
        let est: Vec<f64> = s.iter().zip(&noise).map(|(x, n)| x + 0.5 * n).collect();
        let r = clip(s, 8_000);
        let base = si_snr(&r, &clip(est.clone(), 8_000)).unwrap();
        let scaled = si_snr(&r, &clip(est.iter().map(|v| a * v).collect(), 8_000)).unwrap();
        prop_assert!((base - scaled).abs() < 1e-6, "{} vs {}", base, scaled);
    }

    #[test]
    fn scaling_up_only_hurts_sdr(seed in 0u64..1000, a in 1.0f64..5.0) {
        let mut s = gaussian(4_000, seed);
        centre(&mut s);
        let mut e = gaussian(4_000, seed + 11);
        centre(&mut e);
        let k = dot(&e, &s) / dot(&s, &s);
        e.iter_mut().zip(&s).for_each(|(v, x)| *v -= k * x);
        let est: Vec<f64> = s.iter().zip(&e).map(|(x, n)| a * x + 0.3 * n).collect();
        let r = clip(s, 8_000);
        let ec = clip(est, 8_000);
        prop_assert!(sdr(&r, &ec).unwrap() <= si_snr(&r, &ec).unwrap() + 1e-6);
    }
}
