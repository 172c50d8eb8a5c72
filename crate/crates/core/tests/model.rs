use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ynet_core::audio::AudioClip;
use ynet_core::dsp::{istft, stft, StftConfig};
use ynet_core::model::{
    param_count, separate, separate_with, Architecture, Branch, EstimateKind, Forward, Model, ModelConfig,
};
use ynet_core::tensor::{Mode, Tape, Tensor, Var};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn noise(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Runs `f` with a forward context over a fresh tape.
fn with_forward<R>(model: &mut Model<f32>, f: impl FnOnce(&mut Forward<'_, f32, ChaCha8Rng>) -> R) -> R {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, false);
    let mut r = rng(0);
    let mut fwd = Forward {
        model,
        tape: &mut tape,
        bound: &bound,
        mode: Mode::Train,
        rng: &mut r,
    };
    f(&mut fwd)
}

fn shape_of(fwd: &Forward<'_, f32, ChaCha8Rng>, v: Var) -> Vec<usize> {
    fwd.tape.shape(v).to_vec()
}

#[test]
fn encoder_level_one_shapes_at_base_16() {
    let mut model = Model::<f32>::new(ModelConfig::default(), 3).unwrap();
    with_forward(&mut model, |fwd| {
        let x = fwd.tape.constant(noise(&[1, 16, 1024, 128], 1));
        let (out, skip) = fwd.encoder_layer(x, 1, Branch::Spectral).unwrap();
        assert_eq!(shape_of(fwd, out), [1, 32, 512, 64]);
        assert_eq!(shape_of(fwd, skip), [1, 32, 1024, 128]);
    });
}

#[test]
fn encoder_rejects_odd_dims() {
    let mut model = Model::<f32>::new(ModelConfig::miniature(Architecture::UNetSpec, 2), 3).unwrap();
    with_forward(&mut model, |fwd| {
        let x = fwd.tape.constant(noise(&[1, 2, 7, 8], 1));
        assert!(fwd.encoder_layer(x, 1, Branch::Spectral).is_err());
    });
}

#[test]
fn five_levels_halve_space_and_double_channels() {
    let cfg = ModelConfig::default().with_architecture(Architecture::UNetSpec).with_base_channels(2);
    let mut model = Model::<f32>::new(cfg, 5).unwrap();
    with_forward(&mut model, |fwd| {
        let x = fwd.tape.constant(noise(&[1, 1, 1024, 128], 2));
        let (deep, skips) = fwd.encoder(x, Branch::Spectral).unwrap();
        for (k, &s) in skips.iter().enumerate() {
            let level = k + 1;
            // oracle: channels base*2^k, spatial of the level's input
            assert_eq!(shape_of(fwd, s), [1, 2 << level, 1024 >> (level - 1), 128 >> (level - 1)]);
        }
        assert_eq!(shape_of(fwd, deep), [1, 2 * 32, 32, 4]);
    });
}

#[test]
fn core_widths() {
    let preserved = ModelConfig {
        core_preserve_width: true,
        ..ModelConfig::default()
    };
    let mut model = Model::<f32>::new(preserved, 1).unwrap();
    with_forward(&mut model, |fwd| {
        let a = fwd.tape.constant(noise(&[1, 512, 32, 4], 1));
        let b = fwd.tape.constant(noise(&[1, 512, 32, 4], 2));
        let c = fwd.core(&[a, b]).unwrap();
        assert_eq!(shape_of(fwd, c), [1, 1024, 32, 4]);
        let short = fwd.tape.constant(noise(&[1, 512, 16, 4], 3));
        assert!(fwd.core(&[a, short]).is_err());
    });

    let mut model = Model::<f32>::new(ModelConfig::default(), 1).unwrap();
    with_forward(&mut model, |fwd| {
        let a = fwd.tape.constant(noise(&[1, 512, 32, 4], 1));
        let b = fwd.tape.constant(noise(&[1, 512, 32, 4], 2));
        let c = fwd.core(&[a, b]).unwrap();
        assert_eq!(shape_of(fwd, c), [1, 512, 32, 4]);
    });

    let cfg = ModelConfig::default().with_architecture(Architecture::UNetSpec);
    let mut model = Model::<f32>::new(cfg, 1).unwrap();
    with_forward(&mut model, |fwd| {
        let a = fwd.tape.constant(noise(&[1, 512, 32, 4], 1));
        let c = fwd.core(&[a]).unwrap();
        assert_eq!(shape_of(fwd, c), [1, 512, 32, 4]);
    });
}

#[test]
fn decoder_shapes() {
    let mut model = Model::<f32>::new(ModelConfig::default(), 1).unwrap();
    with_forward(&mut model, |fwd| {
        // deepest level: core output 512 @ 32x4, level-5 skips 512 @ 64x8
        let x = fwd.tape.constant(noise(&[1, 512, 32, 4], 1));
        let s1 = fwd.tape.constant(noise(&[1, 512, 64, 8], 2));
        let s2 = fwd.tape.constant(noise(&[1, 512, 64, 8], 3));
        let y = fwd.decoder_layer(x, &[s1, s2], 5).unwrap();
        assert_eq!(shape_of(fwd, y), [1, 256, 64, 8]);

        // shallowest level, skips zeroed
        let x = fwd.tape.constant(noise(&[1, 32, 512, 64], 4));
        let z = fwd.tape.constant(Tensor::zeros(vec![1, 32, 1024, 128]));
        let y = fwd.decoder_layer(x, &[z, z], 1).unwrap();
        assert_eq!(shape_of(fwd, y), [1, 16, 1024, 128]);

        let bad = fwd.tape.constant(Tensor::zeros(vec![1, 32, 1000, 128]));
        assert!(fwd.decoder_layer(x, &[bad, z], 1).is_err());
    });
}

fn full_inputs(n: usize, seed: u64) -> (Tensor<f32>, Tensor<f32>) {
    let wave = noise(&[n, 1, 67_072], seed);
    let mut mag = noise(&[n, 1, 1024, 128], seed + 1);
    mag.data_mut().iter_mut().for_each(|v| *v = v.abs() * 3.0);
    (wave, mag)
}

#[test]
fn full_forward_mask_shape_and_range() {
    let (wave, mag) = full_inputs(1, 10);
    for (lo, hi) in [(0.0, 1.0), (-1.0, 1.0)] {
        let mut cfg = ModelConfig::default().with_base_channels(4);
        cfg.hardtanh_lo = lo;
        cfg.hardtanh_hi = hi;
        let mut model = Model::<f32>::new(cfg, 7).unwrap();
        let mut tape = Tape::new();
        let (out, _) = model
            .forward(&mut tape, &wave, &mag, Mode::Train, false, &mut rng(1))
            .unwrap();
        let mask = tape.value(out.output);
        assert_eq!(mask.shape(), [1, 1, 1024, 128]);
        assert!(mask.data().iter().all(|&v| v >= lo as f32 && v <= hi as f32));
    }
}

#[test]
fn eval_forward_is_deterministic_on_zero_input() {
    let cfg = ModelConfig::default().with_base_channels(4);
    let mut model = Model::<f32>::new(cfg, 2).unwrap();
    let wave = vec![0.0f32; 67_072];
    let mag = vec![0.0f32; 1024 * 128];
    let a = model.predict(&wave, &mag).unwrap();
    let b = model.predict(&wave, &mag).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 1024 * 128);
}

#[test]
fn forward_rejects_wrong_shapes() {
    let mut model = Model::<f32>::new(ModelConfig::miniature(Architecture::YNet, 2), 2).unwrap();
    let mut tape = Tape::new();
    let wave = Tensor::zeros(vec![1, 1, 1000]);
    let mag = Tensor::zeros(vec![1, 1, 64, 32]);
    assert!(model.forward(&mut tape, &wave, &mag, Mode::Eval, false, &mut rng(0)).is_err());
    let wave = Tensor::zeros(vec![1, 1, 1120]);
    let mag = Tensor::zeros(vec![1, 1, 32, 32]);
    assert!(model.forward(&mut tape, &wave, &mag, Mode::Eval, false, &mut rng(0)).is_err());
}

fn mini_loss(model: &mut Model<f32>, wave: &Tensor<f32>, mag: &Tensor<f32>, target: &Tensor<f32>) -> f32 {
    let mut tape = Tape::new();
    let (out, _) = model.forward(&mut tape, wave, mag, Mode::Eval, false, &mut rng(0)).unwrap();
    let t = tape.constant(target.clone());
    let l = tape.mse(out.estimate, t).unwrap();
    tape.value(l).data()[0]
}

#[test]
fn both_branches_influence_the_loss() {
    let cfg = ModelConfig::miniature(Architecture::YNet, 2);
    let mut model = Model::<f32>::new(cfg, 11).unwrap();
    let wave = noise(&[1, 1, 1120], 1);
    let mut mag = noise(&[1, 1, 64, 32], 2);
    mag.data_mut().iter_mut().for_each(|v| *v = v.abs());
    let target = noise(&[1, 1, 64, 32], 3);
    let base = mini_loss(&mut model, &wave, &mag, &target);
    for name in ["spec.enc1.conv1.weight", "wave.enc1.conv1.weight", "fb.g0.weight"] {
        let mut m = model.clone();
        m.params.get_mut(name).unwrap().value.data_mut().iter_mut().for_each(|v| *v += 0.05);
        let moved = mini_loss(&mut m, &wave, &mag, &target);
        assert!((moved - base).abs() > 1e-7, "{name}: loss unchanged at {base}");
    }
}

/// Independent count: sum over the declared conv/norm layers.
fn count_oracle(arch: Architecture, base: usize, preserve: bool) -> usize {
    let conv = |o: usize, i: usize, k: usize| o * i * k * k + o;
    let branches = arch.branch_count();
    let mut p = 0;
    if arch.has_waveform() {
        p += 1024 * 2048 + 1024;
    }
    for _ in 0..branches {
        p += conv(base, 1, 3);
        for l in 1..=5 {
            let c = base << (l - 1);
            p += 2 * c + conv(2 * c, c, 3) + conv(2 * c, 2 * c, 3);
        }
    }
    let cat = branches * (base << 5);
    let core = if preserve { cat } else { base << 5 };
    p += conv(core, cat, 3) + conv(core, core, 3) + 2 * core;
    for l in (1..=5).rev() {
        let x = if l == 5 { core } else { base << l };
        let o = base << (l - 1);
        p += conv(o, x + branches * (base << l), 3) + conv(o, o, 3) + 2 * o;
    }
    p + conv(1, base, 1)
}

#[test]
fn param_count_matches_oracle_and_model() {
    for arch in Architecture::all() {
        for base in [2, 4, 16] {
            for preserve in [false, true] {
                let mut cfg = ModelConfig::default().with_architecture(arch).with_base_channels(base);
                cfg.core_preserve_width = preserve;
                assert_eq!(param_count(&cfg), count_oracle(arch, base, preserve), "{arch} base {base}");
            }
        }
        let cfg = ModelConfig::default().with_architecture(arch).with_base_channels(4);
        let model = Model::<f32>::new(cfg.clone(), 0).unwrap();
        assert_eq!(model.params.scalar_count(), param_count(&cfg));
    }
}

#[test]
fn param_count_properties() {
    let at = |arch, base| param_count(&ModelConfig::default().with_architecture(arch).with_base_channels(base));
    for base in [2, 4, 8, 16] {
        assert!(at(Architecture::YNet, base) < at(Architecture::UNetSpec, base) + at(Architecture::UNetWave, base));
        assert!(at(Architecture::UNetSpec, base) < at(Architecture::YNet, base));
    }
    // conv terms dominate the spectral-only model and scale with base^2
    let ratio = at(Architecture::UNetSpec, 32) as f64 / at(Architecture::UNetSpec, 16) as f64;
    assert!((ratio - 4.0).abs() < 0.2, "ratio {ratio}");

    let mut cfg = ModelConfig::default();
    let before = param_count(&cfg);
    cfg.dropout = 0.5;
    cfg.hardtanh_lo = -1.0;
    cfg.hardtanh_hi = 2.0;
    assert_eq!(param_count(&cfg), before);
}

fn test_clip(n: usize, seed: u64) -> AudioClip {
    let mut r = rng(seed);
    AudioClip::new((0..n).map(|_| r.random_range(-0.5..0.5)).collect(), 44_100).unwrap()
}

fn interior_rel_error(a: &[f32], b: &[f32], margin: usize) -> f64 {
    let n = a.len().min(b.len());
    let (mut num, mut den) = (0.0, 0.0);
    for i in margin..n - margin {
        num += (a[i] as f64 - b[i] as f64).powi(2);
        den += (b[i] as f64).powi(2);
    }
    (num / den).sqrt()
}

#[test]
fn identity_and_zero_masks() {
    let cfg = ModelConfig::default();
    for n in [67_072, 150_000] {
        let clip = test_clip(n, n as u64);
        let sep = separate_with(&cfg, &clip, EstimateKind::Mask, |_, _| Ok(vec![1.0; 1024 * 128])).unwrap();
        assert_eq!(sep.vocal.len(), n);
        let reference = istft(&stft(&clip, StftConfig::default()).unwrap()).unwrap();
        assert!(interior_rel_error(&sep.vocal.samples, &reference.samples, 2048) < 1e-6);
        assert!(interior_rel_error(&sep.vocal.samples, &clip.samples, 2048) < 1e-6);

        let silent = separate_with(&cfg, &clip, EstimateKind::Mask, |_, _| Ok(vec![0.0; 1024 * 128])).unwrap();
        assert!(silent.vocal.samples.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn separate_sees_every_window_and_preserves_phase() {
    let cfg = ModelConfig::default();
    let clip = test_clip(200_000, 4);
    let mut windows = Vec::new();
    let sep = separate_with(&cfg, &clip, EstimateKind::Mask, |wave, mag| {
        assert_eq!(wave.len(), 67_072);
        windows.push(wave[..4].to_vec());
        Ok(mag.iter().map(|_| 0.5).collect())
    })
    .unwrap();
    // ceil((200000 - 67072) / 65536) + 1
    assert_eq!(windows.len(), 4);
    assert_eq!(windows[1], clip.samples[65_536..65_540]);
    assert_eq!(sep.mask.time_bins, 4 * 128);
    let half = interior_rel_error(
        &sep.vocal.samples,
        &clip.samples.iter().map(|v| v * 0.5).collect::<Vec<_>>(),
        2048,
    );
    assert!(half < 1e-6, "{half}");

    let spec = stft(&clip, StftConfig::default()).unwrap();
    let masked = spec.apply_mask(&vec![0.3; spec.magnitude.len()]).unwrap();
    assert_eq!(masked.phase, spec.phase);
}

#[test]
fn model_separation_is_deterministic() {
    let cfg = ModelConfig::default().with_base_channels(2);
    let mut model = Model::<f32>::new(cfg, 9).unwrap();
    let clip = test_clip(70_000, 5);
    let a = separate(&mut model, &clip).unwrap();
    let b = separate(&mut model, &clip).unwrap();
    assert_eq!(a.vocal.samples, b.vocal.samples);
    assert!(a.mask.min() >= 0.0 && a.mask.max() <= 1.0);
    assert_eq!((a.mask.freq_bins, a.mask.time_bins), (1024, 256));
}
