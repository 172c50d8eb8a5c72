use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{Architecture, ModelConfig};
use super::params::{Bound, ParamStore, StatStore};
use crate::error::{Error, Result};
use crate::filterbank::learnable_spectrogram;
use crate::tensor::{Activation, BatchNormStats, Mode, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Spectral,
    Waveform,
}

impl Branch {
    pub fn prefix(self) -> &'static str {
        match self {
            Branch::Spectral => "spec",
            Branch::Waveform => "wave",
        }
    }
}

/// Declared layout of a model: parameter names with shapes, and the
/// batch-norm layers (name, channels) that own running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub params: Vec<(String, Vec<usize>)>,
    pub norms: Vec<(String, usize)>,
}

fn conv_shape(out: usize, inp: usize, k: usize) -> Vec<usize> {
    vec![out, inp, k, k]
}

impl ModelConfig {
    pub fn branches(&self) -> Vec<Branch> {
        let mut b = Vec::new();
        if self.architecture.has_spectral() {
            b.push(Branch::Spectral);
        }
        if self.architecture.has_waveform() {
            b.push(Branch::Waveform);
        }
        b
    }

    /// Channels leaving encoder level `level` (1-based), which is also the
    /// skip width at that level.
    pub fn encoder_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Width of the branch features after channel concatenation.
    pub fn concat_channels(&self) -> usize {
        self.architecture.branch_count() * self.encoder_channels(self.depth)
    }

    /// Width leaving the core.
    pub fn core_channels(&self) -> usize {
        if self.core_preserve_width {
            self.concat_channels()
        } else {
            self.encoder_channels(self.depth)
        }
    }

    /// Channels leaving decoder level `level`; mirrors the encoder input.
    pub fn decoder_channels(&self, level: usize) -> usize {
        self.base_channels << (level - 1)
    }

    pub fn layout(&self) -> Layout {
        let mut params = Vec::new();
        let mut norms = Vec::new();
        let conv = |params: &mut Vec<(String, Vec<usize>)>, name: String, out, inp, k| {
            params.push((format!("{name}.weight"), conv_shape(out, inp, k)));
            params.push((format!("{name}.bias"), vec![out]));
        };
        let mut norm = |params: &mut Vec<(String, Vec<usize>)>, name: String, c: usize| {
            params.push((format!("{name}.gamma"), vec![c]));
            params.push((format!("{name}.beta"), vec![c]));
            norms.push((name, c));
        };
        if self.architecture.has_waveform() {
            params.extend(self.filterbank.param_shapes());
        }
        let base = self.base_channels;
        for branch in self.branches() {
            let p = branch.prefix();
            conv(&mut params, format!("{p}.stem"), base, 1, 3);
            for level in 1..=self.depth {
                let c_in = self.encoder_channels(level - 1);
                let c_out = self.encoder_channels(level);
                norm(&mut params, format!("{p}.enc{level}.bn"), c_in);
                conv(&mut params, format!("{p}.enc{level}.conv1"), c_out, c_in, 3);
                conv(&mut params, format!("{p}.enc{level}.conv2"), c_out, c_out, 3);
            }
        }
        let width = self.core_channels();
        conv(&mut params, "core.conv1".into(), width, self.concat_channels(), 3);
        conv(&mut params, "core.conv2".into(), width, width, 3);
        norm(&mut params, "core.bn".into(), width);
        let branches = self.architecture.branch_count();
        for level in (1..=self.depth).rev() {
            let x_ch = if level == self.depth {
                width
            } else {
                self.decoder_channels(level + 1)
            };
            let c_in = x_ch + branches * self.encoder_channels(level);
            let c_out = self.decoder_channels(level);
            conv(&mut params, format!("dec{level}.conv1"), c_out, c_in, 3);
            conv(&mut params, format!("dec{level}.conv2"), c_out, c_out, 3);
            norm(&mut params, format!("dec{level}.bn"), c_out);
        }
        conv(&mut params, "head".into(), 1, base, 1);
        Layout { params, norms }
    }
}

/// Exact number of learnable scalars for `cfg`.
pub fn param_count(cfg: &ModelConfig) -> usize {
    cfg.layout()
        .params
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

/// Network parameters, running statistics and configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub stats: StatStore<T>,
}

/// Tensors produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// Head output `[N, 1, F, T]`: the mask, or the magnitude itself for
    /// direct-estimate architectures.
    pub output: Var,
    /// Mixture magnitude the mask is applied to.
    pub mixture: Var,
    /// Estimated source magnitude.
    pub estimate: Var,
}

impl<T: Real> Model<T> {
    /// Seeded initialisation: conv kernels uniform in `±sqrt(1 / fan_in)`,
    /// biases 0, batch-norm gamma 1 and beta 0.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        for (name, shape) in &layout.params {
            let numel = shape.iter().product();
            let data: Vec<T> = if name.ends_with(".weight") {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (1.0 / fan_in as f64).sqrt();
                (0..numel)
                    .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
                    .collect()
            } else if name.ends_with(".gamma") {
                vec![T::one(); numel]
            } else {
                vec![T::zero(); numel]
            };
            params.insert(name.clone(), Tensor::new(shape.clone(), data)?)?;
        }
        let mut stats = StatStore::default();
        for (name, c) in &layout.norms {
            stats.insert(name.clone(), BatchNormStats::new(*c))?;
        }
        Ok(Model {
            config,
            params,
            stats,
        })
    }

    /// Full forward pass on a batch. `wave` is `[N, 1, n]`, `magnitude` is
    /// the raw mixture magnitude `[N, 1, F, T]`.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape<T>,
        wave: &Tensor<T>,
        magnitude: &Tensor<T>,
        mode: Mode,
        requires_grad: bool,
        rng: &mut R,
    ) -> Result<(ForwardOutput, Bound)> {
        let cfg = self.config.clone();
        let (f, t) = (cfg.freq_bins(), cfg.time_bins);
        let mshape = magnitude.shape();
        if mshape.len() != 4 || mshape[1] != 1 || mshape[2] != f || mshape[3] != t {
            return Err(Error::config(format!(
                "magnitude must be [N, 1, {f}, {t}], got {mshape:?}"
            )));
        }
        let n = mshape[0];
        let samples = cfg.window_samples();
        if wave.shape() != [n, 1, samples] {
            return Err(Error::config(format!(
                "waveform must be [{n}, 1, {samples}], got {:?}",
                wave.shape()
            )));
        }
        let bound = self.params.bind(tape, requires_grad);
        let mixture = tape.constant(magnitude.clone());
        let spectral_input = if cfg.log_mag {
            let mut m = magnitude.clone();
            m.data_mut().iter_mut().for_each(|v| *v = v.ln_1p());
            tape.constant(m)
        } else {
            mixture
        };
        let wave_var = tape.constant(wave.clone());
        let mut fwd = Forward {
            model: self,
            tape,
            bound: &bound,
            mode,
            rng,
        };
        let output = fwd.run(spectral_input, wave_var)?;
        let estimate = if cfg.architecture.outputs_mask() {
            fwd.tape.mul(output, mixture)?
        } else {
            output
        };
        Ok((
            ForwardOutput {
                output,
                mixture,
                estimate,
            },
            bound,
        ))
    }
}

/// One forward pass in progress: the tape, the bound parameters and the
/// mutable running statistics.
pub struct Forward<'a, T: Real, R: Rng + ?Sized> {
    pub model: &'a mut Model<T>,
    pub tape: &'a mut Tape<T>,
    pub bound: &'a Bound,
    pub mode: Mode,
    pub rng: &'a mut R,
}

impl<T: Real, R: Rng + ?Sized> Forward<'_, T, R> {
    fn p(&self, name: &str) -> Result<Var> {
        self.model.params.var(self.bound, name)
    }

    fn conv(&mut self, x: Var, name: &str, dilation: usize) -> Result<Var> {
        let w = self.p(&format!("{name}.weight"))?;
        let b = self.p(&format!("{name}.bias"))?;
        self.tape.conv2d(x, w, b, dilation)
    }

    fn norm(&mut self, x: Var, name: &str) -> Result<Var> {
        let g = self.p(&format!("{name}.gamma"))?;
        let b = self.p(&format!("{name}.beta"))?;
        let stats = self.model.stats.get_mut(name)?;
        self.tape.batchnorm2d(x, g, b, stats, self.mode)
    }

    fn branch_activation(&self, branch: Branch) -> Activation {
        match branch {
            Branch::Spectral => Activation::Relu,
            Branch::Waveform => Activation::LeakyRelu {
                slope: self.model.config.leaky_slope,
            },
        }
    }

    /// Batch norm, two 3x3 convs with the level's dilation and the branch
    /// activation, then 2x2 max pooling and dropout. Returns
    /// `(pooled, skip)`, the skip taken before pooling.
    pub fn encoder_layer(&mut self, x: Var, level: usize, branch: Branch) -> Result<(Var, Var)> {
        let prefix = format!("{}.enc{level}", branch.prefix());
        let shape = self.tape.shape(x).to_vec();
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::config(format!("encoder level {level} got odd spatial dims {h}x{w}")));
        }
        let dilation = self.model.config.encoder_dilations[level - 1];
        let act = self.branch_activation(branch);
        let y = self.norm(x, &format!("{prefix}.bn"))?;
        let y = self.conv(y, &format!("{prefix}.conv1"), dilation)?;
        let y = self.tape.activation(y, act)?;
        let y = self.conv(y, &format!("{prefix}.conv2"), dilation)?;
        let skip = self.tape.activation(y, act)?;
        let pooled = self.tape.maxpool2d(skip)?;
        let rate = self.model.config.dropout;
        let out = self.tape.dropout(pooled, rate, self.mode, self.rng)?;
        Ok((out, skip))
    }

    /// Stem conv then every encoder level; returns the deepest features
    /// and the skips from level 1 upwards.
    pub fn encoder(&mut self, input: Var, branch: Branch) -> Result<(Var, Vec<Var>)> {
        let act = self.branch_activation(branch);
        let x = self.conv(input, &format!("{}.stem", branch.prefix()), 1)?;
        let mut x = self.tape.activation(x, act)?;
        let mut skips = Vec::with_capacity(self.model.config.depth);
        for level in 1..=self.model.config.depth {
            let (out, skip) = self.encoder_layer(x, level, branch)?;
            skips.push(skip);
            x = out;
        }
        Ok((x, skips))
    }

    /// Channel concat of the branch features, conv, ReLU, conv, batch
    /// norm, ReLU. The first conv maps the concat width to
    /// [`ModelConfig::core_channels`].
    pub fn core(&mut self, features: &[Var]) -> Result<Var> {
        if let [a, b] = features {
            if self.tape.shape(*a) != self.tape.shape(*b) {
                return Err(Error::config(format!(
                    "core: branch features differ: {:?} vs {:?}",
                    self.tape.shape(*a),
                    self.tape.shape(*b)
                )));
            }
        }
        let x = if features.len() == 1 {
            features[0]
        } else {
            self.tape.concat(features, 1)?
        };
        let y = self.conv(x, "core.conv1", 1)?;
        let y = self.tape.relu(y)?;
        let y = self.conv(y, "core.conv2", 1)?;
        let y = self.norm(y, "core.bn")?;
        self.tape.relu(y)
    }

    /// Upsample, concat with one skip per branch, two conv + ReLU, batch
    /// norm.
    pub fn decoder_layer(&mut self, x: Var, skips: &[Var], level: usize) -> Result<Var> {
        let up = self.tape.upsample2x(x)?;
        let us = self.tape.shape(up).to_vec();
        for &s in skips {
            let ss = self.tape.shape(s);
            if ss[0] != us[0] || ss[2..] != us[2..] {
                return Err(Error::config(format!(
                    "decoder level {level}: upsampled {us:?} does not match skip {ss:?}"
                )));
            }
        }
        let mut parts = vec![up];
        parts.extend_from_slice(skips);
        let x = self.tape.concat(&parts, 1)?;
        let y = self.conv(x, &format!("dec{level}.conv1"), 1)?;
        let y = self.tape.relu(y)?;
        let y = self.conv(y, &format!("dec{level}.conv2"), 1)?;
        let y = self.tape.relu(y)?;
        self.norm(y, &format!("dec{level}.bn"))
    }

    /// 1x1 conv to one channel; hardtanh for masks, ReLU for direct
    /// magnitude estimates.
    pub fn head(&mut self, x: Var) -> Result<Var> {
        let y = self.conv(x, "head", 1)?;
        let cfg = &self.model.config;
        let act = if cfg.architecture.outputs_mask() {
            Activation::Hardtanh {
                lo: cfg.hardtanh_lo,
                hi: cfg.hardtanh_hi,
            }
        } else {
            Activation::Relu
        };
        self.tape.activation(y, act)
    }

    pub fn run(&mut self, spectral_input: Var, wave: Var) -> Result<Var> {
        let cfg = self.model.config.clone();
        let mut deepest = Vec::new();
        let mut skips: Vec<Vec<Var>> = Vec::new();
        for branch in cfg.branches() {
            let input = match branch {
                Branch::Spectral => spectral_input,
                Branch::Waveform => {
                    let fb: Vec<(Var, Var)> = (0..cfg.filterbank.kernels_per_group.len())
                        .map(|g| Ok((self.p(&format!("fb.g{g}.weight"))?, self.p(&format!("fb.g{g}.bias"))?)))
                        .collect::<Result<_>>()?;
                    let plane = learnable_spectrogram(self.tape, wave, &fb, &cfg.filterbank)?;
                    let s = self.tape.shape(plane).to_vec();
                    self.tape.reshape(plane, &[s[0], 1, s[1], s[2]])?
                }
            };
            let (x, sk) = self.encoder(input, branch)?;
            deepest.push(x);
            skips.push(sk);
        }
        let mut x = self.core(&deepest)?;
        for level in (1..=cfg.depth).rev() {
            let level_skips: Vec<Var> = skips.iter().map(|s| s[level - 1]).collect();
            x = self.decoder_layer(x, &level_skips, level)?;
        }
        self.head(x)
    }
}

/// Checks that `arch` names match between a layout and a store; used when
/// loading checkpoints.
pub fn check_layout<T: Real>(cfg: &ModelConfig, params: &ParamStore<T>, stats: &StatStore<T>) -> Result<()> {
    let layout = cfg.layout();
    for (name, shape) in &layout.params {
        let p = params
            .get(name)
            .ok_or_else(|| Error::format(format!("missing tensor `{name}` for {}", cfg.architecture)))?;
        if p.value.shape() != shape.as_slice() {
            return Err(Error::format(format!(
                "tensor `{name}` has shape {:?}, config expects {shape:?}",
                p.value.shape()
            )));
        }
    }
    if params.len() != layout.params.len() {
        let extra = params
            .names()
            .iter()
            .find(|n| !layout.params.iter().any(|(m, _)| m == *n))
            .cloned()
            .unwrap_or_default();
        return Err(Error::format(format!(
            "unexpected tensor `{extra}` for {}",
            cfg.architecture
        )));
    }
    for (name, c) in &layout.norms {
        let s = stats
            .get(name)
            .ok_or_else(|| Error::format(format!("missing statistics `{name}`")))?;
        if s.mean.len() != *c || s.var.len() != *c {
            return Err(Error::format(format!("statistics `{name}` have wrong width")));
        }
    }
    if stats.len() != layout.norms.len() {
        return Err(Error::format("unexpected batch-norm statistics in checkpoint"));
    }
    Ok(())
}

impl Architecture {
    pub fn all() -> [Architecture; 3] {
        [Architecture::YNet, Architecture::UNetSpec, Architecture::UNetWave]
    }
}
