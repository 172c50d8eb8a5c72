//! Finite-difference verification of every differentiable op and of a
//! miniature full model, in 64-bit arithmetic.
//!
//! Each case reduces the op output to `L = sum(out * R)` with a random
//! readout `R`, then compares the analytic gradient of `L` with central
//! differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::filterbank::{learnable_spectrogram, FilterbankConfig};
use crate::model::{Architecture, Model, ModelConfig};
use crate::tensor::{Activation, BatchNormStats, Mode, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    /// Every case runs once per seed.
    pub seeds: Vec<u64>,
    pub fd_step: f64,
    /// Default relative tolerance.
    pub tolerance: f64,
    /// Relative tolerance for batch norm and the full model.
    pub loose_tolerance: f64,
    /// Gradients below this magnitude are compared absolutely.
    pub floor: f64,
    /// Entries checked per parameter tensor of the full model.
    pub model_entries: usize,
    /// Full model: gradients below this fraction of the largest one are
    /// compared absolutely (biases feeding a batch norm are exactly zero).
    pub model_floor_rel: f64,
    /// Full model: an entry whose one-sided differences disagree by more
    /// than this (relative) has a ReLU or max-pool switch inside the
    /// stencil and is skipped.
    pub kink_tol: f64,
    /// Largest fraction of full-model entries that may be skipped.
    pub max_skipped: f64,
    /// Test hook: scales the analytic gradient of the named case so that
    /// it must fail.
    pub corrupt: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self::with_base_seed(0)
    }
}

impl GradcheckConfig {
    pub fn with_base_seed(seed: u64) -> Self {
        GradcheckConfig {
            seeds: (0..10).map(|i| seed.wrapping_add(i)).collect(),
            fd_step: 1e-6,
            tolerance: 1e-4,
            loose_tolerance: 1e-3,
            floor: 1e-6,
            model_entries: 3,
            model_floor_rel: 1e-5,
            kink_tol: 1e-3,
            max_skipped: 0.1,
            corrupt: None,
        }
    }
}

/// Outcome of one case over all seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub name: String,
    pub checks: usize,
    /// Entries left out because the loss is not differentiable there.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub max_skipped: f64,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance && self.skipped as f64 <= self.max_skipped * (self.checks + self.skipped) as f64
    }
}

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

struct Case {
    name: &'static str,
    loose: bool,
    shapes: Vec<Vec<usize>>,
    build: Box<Build>,
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn readout(values: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    values.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn eval_case(case: &Case, inputs: &[Tensor<f64>], r: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = (case.build)(&mut tape, &vars)?;
    Ok(readout(tape.value(out), r))
}

fn run_case(case: &Case, seed: u64, cfg: &GradcheckConfig) -> Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs: Vec<Tensor<f64>> = case.shapes.iter().map(|s| random_tensor(s, &mut rng)).collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = (case.build)(&mut tape, &vars)?;
    let r = random_tensor(tape.shape(out), &mut rng);
    let rv = tape.constant(r.clone());
    let prod = tape.mul(out, rv)?;
    let loss = tape.sum(prod)?;
    tape.backward(loss)?;
    let scale = if cfg.corrupt.as_deref() == Some(case.name) { 1.5 } else { 1.0 };
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(|g| g.iter().map(|x| x * scale).collect())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let h = cfg.fd_step;
    let (mut worst, mut checks) = (0.0f64, 0);
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            inputs[i].data_mut()[j] = orig + h;
            let plus = eval_case(case, &inputs, &r)?;
            inputs[i].data_mut()[j] = orig - h;
            let minus = eval_case(case, &inputs, &r)?;
            inputs[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(rel_err(analytic[i][j], numeric, cfg.floor));
            checks += 1;
        }
    }
    Ok((worst, checks))
}

fn cases() -> Vec<Case> {
    let fb = FilterbankConfig {
        kernel_len: 16,
        dilation_rates: vec![1, 2],
        kernels_per_group: vec![3, 2],
        stride: 4,
        target_frames: 6,
        leaky_slope: 0.01,
    };
    vec![
        Case {
            name: "conv1d",
            loose: false,
            shapes: vec![vec![2, 2, 23], vec![3, 2, 4], vec![3]],
            build: Box::new(|t, v| t.conv1d(v[0], v[1], v[2], 3, 2, 2, 3)),
        },
        Case {
            name: "conv2d_3x3_dilated",
            loose: false,
            shapes: vec![vec![2, 2, 6, 5], vec![3, 2, 3, 3], vec![3]],
            build: Box::new(|t, v| t.conv2d(v[0], v[1], v[2], 2)),
        },
        Case {
            name: "conv2d_1x1",
            loose: false,
            shapes: vec![vec![2, 3, 4, 4], vec![2, 3, 1, 1], vec![2]],
            build: Box::new(|t, v| t.conv2d(v[0], v[1], v[2], 1)),
        },
        Case {
            name: "maxpool2d",
            loose: false,
            shapes: vec![vec![2, 2, 4, 6]],
            build: Box::new(|t, v| t.maxpool2d(v[0])),
        },
        Case {
            name: "upsample2x",
            loose: false,
            shapes: vec![vec![2, 2, 3, 2]],
            build: Box::new(|t, v| t.upsample2x(v[0])),
        },
        Case {
            name: "batchnorm2d_train",
            loose: true,
            shapes: vec![vec![2, 3, 3, 2], vec![3], vec![3]],
            build: Box::new(|t, v| {
                let mut stats = BatchNormStats::new(3);
                t.batchnorm2d(v[0], v[1], v[2], &mut stats, Mode::Train)
            }),
        },
        Case {
            name: "batchnorm2d_eval",
            loose: true,
            shapes: vec![vec![2, 3, 3, 2], vec![3], vec![3]],
            build: Box::new(|t, v| {
                let mut stats = BatchNormStats {
                    mean: vec![0.1, -0.2, 0.3],
                    var: vec![0.5, 1.5, 2.0],
                    tracked: 1,
                };
                t.batchnorm2d(v[0], v[1], v[2], &mut stats, Mode::Eval)
            }),
        },
        Case {
            name: "relu",
            loose: false,
            shapes: vec![vec![4, 5]],
            build: Box::new(|t, v| t.relu(v[0])),
        },
        Case {
            name: "leaky_relu",
            loose: false,
            shapes: vec![vec![4, 5]],
            build: Box::new(|t, v| t.activation(v[0], Activation::LeakyRelu { slope: 0.01 })),
        },
        Case {
            name: "hardtanh",
            loose: false,
            shapes: vec![vec![4, 5]],
            build: Box::new(|t, v| t.activation(v[0], Activation::Hardtanh { lo: -0.5, hi: 0.5 })),
        },
        Case {
            name: "concat",
            loose: false,
            shapes: vec![vec![2, 2, 3], vec![2, 1, 3]],
            build: Box::new(|t, v| t.concat(&[v[0], v[1]], 1)),
        },
        Case {
            name: "slice",
            loose: false,
            shapes: vec![vec![2, 5, 3]],
            build: Box::new(|t, v| t.slice(v[0], 1, 1, 3)),
        },
        Case {
            name: "mul",
            loose: false,
            shapes: vec![vec![3, 4], vec![3, 4]],
            build: Box::new(|t, v| t.mul(v[0], v[1])),
        },
        Case {
            name: "dropout_train",
            loose: false,
            shapes: vec![vec![4, 6]],
            build: Box::new(|t, v| {
                let mut rng = ChaCha8Rng::seed_from_u64(99);
                t.dropout(v[0], 0.3, Mode::Train, &mut rng)
            }),
        },
        Case {
            name: "reshape",
            loose: false,
            shapes: vec![vec![2, 6]],
            build: Box::new(|t, v| t.reshape(v[0], &[3, 4])),
        },
        Case {
            name: "sum",
            loose: false,
            shapes: vec![vec![3, 4]],
            build: Box::new(|t, v| t.sum(v[0])),
        },
        Case {
            name: "mse",
            loose: false,
            shapes: vec![vec![3, 4], vec![3, 4]],
            build: Box::new(|t, v| t.mse(v[0], v[1])),
        },
        Case {
            name: "learnable_spectrogram",
            loose: false,
            // n = (frames - 1) * stride + kernel_len
            shapes: vec![vec![2, 1, 36], vec![3, 1, 16], vec![3], vec![2, 1, 16], vec![2]],
            build: Box::new(move |t, v| learnable_spectrogram(t, v[0], &[(v[1], v[2]), (v[3], v[4])], &fb)),
        },
    ]
}

pub const FULL_MODEL: &str = "ynet_miniature";

/// Finite-difference check of the miniature Y-Net (base 2, 64 x 32
/// spectrogram, batch 2, train mode, dropout off) on a sample of
/// `cfg.model_entries` entries per parameter tensor.
fn run_full_model(seed: u64, cfg: &GradcheckConfig) -> Result<(f64, usize, usize)> {
    let mcfg = ModelConfig::miniature(Architecture::YNet, 2);
    let mut model = Model::<f64>::new(mcfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // Non-zero batch-norm offsets keep ReLU inputs away from their kinks.
    for (name, p) in model.params.params_mut_named() {
        if name.ends_with(".beta") || name.ends_with(".bias") {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }
    let n = 2;
    let wave = random_tensor(&[n, 1, mcfg.window_samples()], &mut rng);
    let mut mag = random_tensor(&[n, 1, mcfg.freq_bins(), mcfg.time_bins], &mut rng);
    mag.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.1);
    let r = random_tensor(&[n, 1, mcfg.freq_bins(), mcfg.time_bins], &mut rng);

    let loss_of = |model: &mut Model<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let mut drop_rng = ChaCha8Rng::seed_from_u64(0);
        let (out, _) = model.forward(&mut tape, &wave, &mag, Mode::Train, false, &mut drop_rng)?;
        Ok(readout(tape.value(out.estimate), &r))
    };

    let mut tape = Tape::new();
    let mut drop_rng = ChaCha8Rng::seed_from_u64(0);
    let (out, bound) = model.forward(&mut tape, &wave, &mag, Mode::Train, true, &mut drop_rng)?;
    let rv = tape.constant(r.clone());
    let prod = tape.mul(out.estimate, rv)?;
    let loss = tape.sum(prod)?;
    tape.backward(loss)?;
    model.params.zero_grads();
    model.params.collect_grads(&tape, &bound);
    let scale = if cfg.corrupt.as_deref() == Some(FULL_MODEL) { 1.5 } else { 1.0 };

    let names: Vec<String> = model.params.names().to_vec();
    let largest = model
        .params
        .iter()
        .flat_map(|(_, p)| p.grad.iter().flatten())
        .fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = cfg.floor.max(cfg.model_floor_rel * largest);
    let centre = loss_of(&mut model)?;
    let h = cfg.fd_step;
    let (mut worst, mut checks, mut skipped) = (0.0f64, 0, 0);
    for name in names {
        let (numel, grad) = {
            let p = model.params.get(&name).expect("own name");
            (p.value.numel(), p.grad.clone().unwrap_or_else(|| vec![0.0; p.value.numel()]))
        };
        for _ in 0..cfg.model_entries.min(numel) {
            let j = rng.random_range(0..numel);
            let orig = model.params.get(&name).expect("own name").value.data()[j];
            let set = |m: &mut Model<f64>, v: f64| m.params.get_mut(&name).expect("own name").value.data_mut()[j] = v;
            set(&mut model, orig + h);
            let plus = loss_of(&mut model)?;
            set(&mut model, orig - h);
            let minus = loss_of(&mut model)?;
            set(&mut model, orig);
            let (ahead, behind) = ((plus - centre) / h, (centre - minus) / h);
            if rel_err(ahead, behind, floor) > cfg.kink_tol {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(rel_err(grad[j] * scale, numeric, floor));
            checks += 1;
        }
    }
    Ok((worst, checks, skipped))
}

/// Names of every case, full model last.
pub fn case_names() -> Vec<&'static str> {
    cases().iter().map(|c| c.name).chain([FULL_MODEL]).collect()
}

/// Runs the whole suite and returns one report per case.
pub fn run_suite(cfg: &GradcheckConfig) -> Result<Vec<CaseReport>> {
    let mut reports = Vec::new();
    for case in cases() {
        let (mut worst, mut checks) = (0.0f64, 0);
        for &seed in &cfg.seeds {
            let (w, c) = run_case(&case, seed, cfg)?;
            worst = worst.max(w);
            checks += c;
        }
        reports.push(CaseReport {
            name: case.name.to_string(),
            checks,
            skipped: 0,
            max_rel_err: worst,
            tolerance: if case.loose { cfg.loose_tolerance } else { cfg.tolerance },
            max_skipped: 0.0,
        });
    }
    let (mut worst, mut checks, mut skipped) = (0.0f64, 0, 0);
    for &seed in &cfg.seeds {
        let (w, c, s) = run_full_model(seed, cfg)?;
        worst = worst.max(w);
        checks += c;
        skipped += s;
    }
    reports.push(CaseReport {
        name: FULL_MODEL.to_string(),
        checks,
        skipped,
        max_rel_err: worst,
        tolerance: cfg.loose_tolerance,
        max_skipped: cfg.max_skipped,
    });
    Ok(reports)
}

/// Fixed-width table, one line per case.
pub fn format_table(reports: &[CaseReport]) -> String {
    let mut out = format!(
        "{:<24} {:>7} {:>7} {:>12} {:>8}  result\n",
        "op", "checks", "skipped", "max_rel_err", "tol"
    );
    for r in reports {
        out.push_str(&format!(
            "{:<24} {:>7} {:>7} {:>12.3e} {:>8.0e}  {}\n",
            r.name,
            r.checks,
            r.skipped,
            r.max_rel_err,
            r.tolerance,
            if r.passed() { "PASS" } else { "FAIL" }
        ));
    }
    out
}
