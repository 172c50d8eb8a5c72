use log::warn;
use rand::Rng;

use super::kernels::{self, Conv1dGeom, Conv2dGeom};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Elementwise nonlinearities. At a kink the derivative of the flat (or
/// negative) side is used, so `relu'(0) = 0` and `hardtanh'(lo) = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu { slope: f64 },
    Hardtanh { lo: f64, hi: f64 },
}

impl Activation {
    pub fn parse(kind: &str, slope: f64, lo: f64, hi: f64) -> Result<Self> {
        let act = match kind {
            "relu" => Activation::Relu,
            "leaky_relu" | "leaky-relu" => Activation::LeakyRelu { slope },
            "hardtanh" => Activation::Hardtanh { lo, hi },
            other => return Err(Error::config(format!("unknown activation `{other}`"))),
        };
        act.validate()?;
        Ok(act)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Activation::Hardtanh { lo, hi } if lo.partial_cmp(&hi) != Some(std::cmp::Ordering::Less) => {
                Err(Error::config(format!("hardtanh needs lo < hi, got [{lo}, {hi}]")))
            }
            _ => Ok(()),
        }
    }

    pub fn apply<T: Real>(&self, x: T) -> T {
        match *self {
            Activation::Relu => x.max(T::zero()),
            Activation::LeakyRelu { slope } => {
                if x >= T::zero() {
                    x
                } else {
                    x * T::from_f64_lossy(slope)
                }
            }
            Activation::Hardtanh { lo, hi } => {
                x.max(T::from_f64_lossy(lo)).min(T::from_f64_lossy(hi))
            }
        }
    }

    pub fn derivative<T: Real>(&self, x: T) -> T {
        match *self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu { slope } => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::from_f64_lossy(slope)
                }
            }
            Activation::Hardtanh { lo, hi } => {
                if x > T::from_f64_lossy(lo) && x < T::from_f64_lossy(hi) {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running per-channel statistics of a batch-normalisation layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Number of training batches folded into the running estimates.
    pub tracked: u64,
}

impl<T: Real> BatchNormStats<T> {
    pub const MOMENTUM: f64 = 0.1;
    pub const EPS: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        BatchNormStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            tracked: 0,
        }
    }
}

enum Op<T> {
    Leaf,
    Conv1d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: Conv1dGeom,
        batch: usize,
        c_out: usize,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: Conv2dGeom,
        batch: usize,
        c_out: usize,
    },
    MaxPool {
        input: Var,
        argmax: Vec<u32>,
    },
    Upsample {
        input: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Act {
        input: Var,
        act: Activation,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Mul {
        lhs: Var,
        rhs: Var,
    },
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Reshape {
        input: Var,
    },
    Sum {
        input: Var,
    },
    Mse {
        a: Var,
        b: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Records a computation and replays it backwards.
///
/// Leaves that require gradients keep an accumulated gradient across
/// [`Tape::backward`] calls until [`Tape::zero_grads`] is invoked.
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits a shape into (outer, axis extent, inner) around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    // ---- operations -------------------------------------------------------

    /// Strided, dilated 1-D convolution over `[C, L]` or `[N, C, L]`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv1d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        dilation: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let (batch, c_in, len) = match xs.as_slice() {
            [c, l] => (1, *c, *l),
            [n, c, l] => (*n, *c, *l),
            _ => return Err(Error::config(format!("conv1d input must be [C, L] or [N, C, L], got {xs:?}"))),
        };
        let [c_out, wc, k] = ws[..] else {
            return Err(Error::config(format!("conv1d kernels must be [C_out, C_in, K], got {ws:?}")));
        };
        if wc != c_in {
            return Err(Error::config(format!(
                "conv1d kernels expect {wc} input channels, input has {c_in}"
            )));
        }
        if self.shape(bias) != [c_out] {
            return Err(Error::config(format!("conv1d bias must be [{c_out}]")));
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::config("conv1d stride and dilation must be positive"));
        }
        let span = (k - 1) * dilation + 1;
        let padded = len + pad_left + pad_right;
        if padded < span {
            return Err(Error::config(format!(
                "conv1d: padded length {padded} shorter than kernel span {span}"
            )));
        }
        let frames = (padded - span) / stride + 1;
        let geom = Conv1dGeom {
            c_in,
            len,
            k,
            stride,
            dilation,
            pad_left,
            frames,
        };
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let b = self.value(bias).data();
        let mut out = vec![T::zero(); batch * c_out * frames];
        let mut col = vec![T::zero(); geom.col_rows() * frames];
        for n in 0..batch {
            kernels::im2col_1d(&x[n * c_in * len..(n + 1) * c_in * len], geom, &mut col);
            let y = &mut out[n * c_out * frames..(n + 1) * c_out * frames];
            for (o, row) in y.chunks_mut(frames).enumerate() {
                row.fill(b[o]);
            }
            T::gemm(
                c_out,
                geom.col_rows(),
                frames,
                T::one(),
                (w, geom.col_rows(), 1),
                (&col, frames, 1),
                T::one(),
                (y, frames, 1),
            );
        }
        let shape = if xs.len() == 2 {
            vec![c_out, frames]
        } else {
            vec![batch, c_out, frames]
        };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Conv1d {
                input,
                weight,
                bias,
                geom,
                batch,
                c_out,
            },
            &[input, weight, bias],
        ))
    }

    /// "Same" 2-D convolution over `[C, H, W]` or `[N, C, H, W]` with a
    /// square odd kernel (3x3 or 1x1) and `dilation * (k - 1) / 2` zero
    /// padding on each side.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, dilation: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let (batch, c_in, h, w) = match xs.as_slice() {
            [c, h, w] => (1, *c, *h, *w),
            [n, c, h, w] => (*n, *c, *h, *w),
            _ => return Err(Error::config(format!("conv2d input must be rank 3 or 4, got {xs:?}"))),
        };
        let [c_out, wc, kh, kw] = ws[..] else {
            return Err(Error::config(format!("conv2d kernels must be rank 4, got {ws:?}")));
        };
        if wc != c_in {
            return Err(Error::config(format!(
                "conv2d kernels expect {wc} input channels, input has {c_in}"
            )));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::config(format!("conv2d kernel must be square and odd, got {kh}x{kw}")));
        }
        if self.shape(bias) != [c_out] {
            return Err(Error::config(format!("conv2d bias must be [{c_out}]")));
        }
        if dilation == 0 {
            return Err(Error::config("conv2d dilation must be positive"));
        }
        let geom = Conv2dGeom {
            c_in,
            h,
            w,
            k: kh,
            dilation,
        };
        let hw = geom.hw();
        let rows = geom.col_rows();
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let b = self.value(bias).data();
        let mut out = vec![T::zero(); batch * c_out * hw];
        let mut col = if geom.k == 1 {
            Vec::new()
        } else {
            vec![T::zero(); rows * hw]
        };
        for n in 0..batch {
            let xn = &x[n * c_in * hw..(n + 1) * c_in * hw];
            let src: &[T] = if geom.k == 1 {
                xn
            } else {
                kernels::im2col_2d(xn, geom, &mut col);
                &col
            };
            let y = &mut out[n * c_out * hw..(n + 1) * c_out * hw];
            for (o, row) in y.chunks_mut(hw).enumerate() {
                row.fill(b[o]);
            }
            T::gemm(c_out, rows, hw, T::one(), (wt, rows, 1), (src, hw, 1), T::one(), (y, hw, 1));
        }
        let mut shape = xs.clone();
        shape[xs.len() - 3] = c_out;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                batch,
                c_out,
            },
            &[input, weight, bias],
        ))
    }

    /// Non-overlapping 2x2 max pooling over the last two axes.
    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() < 2 {
            return Err(Error::config("maxpool2d needs at least two axes"));
        }
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::config(format!("maxpool2d needs even spatial dims, got {h}x{w}")));
        }
        let planes = self.value(input).numel() / (h * w);
        let plane_out = (h / 2) * (w / 2);
        let x = self.value(input).data();
        let mut out = vec![T::zero(); planes * plane_out];
        let mut argmax = vec![0u32; planes * plane_out];
        for p in 0..planes {
            let o = p * plane_out;
            kernels::maxpool_plane(
                &x[p * h * w..(p + 1) * h * w],
                h,
                w,
                &mut out[o..o + plane_out],
                &mut argmax[o..o + plane_out],
            );
            for a in &mut argmax[o..o + plane_out] {
                *a += (p * h * w) as u32;
            }
        }
        let mut shape = xs;
        let r = shape.len();
        shape[r - 2] = h / 2;
        shape[r - 1] = w / 2;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MaxPool { input, argmax }, &[input]))
    }

    /// Nearest-neighbour 2x upsampling over the last two axes.
    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() < 2 {
            return Err(Error::config("upsample2x needs at least two axes"));
        }
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let planes = self.value(input).numel() / (h * w);
        let x = self.value(input).data();
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); planes * ho * wo];
        for p in 0..planes {
            let src = &x[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..ho {
                let srow = &src[(y / 2) * w..(y / 2 + 1) * w];
                for (xo, d) in dst[y * wo..(y + 1) * wo].iter_mut().enumerate() {
                    *d = srow[xo / 2];
                }
            }
        }
        let mut shape = xs;
        let r = shape.len();
        shape[r - 2] = ho;
        shape[r - 1] = wo;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Upsample { input }, &[input]))
    }

    /// Batch normalisation over `[N, C, H, W]`.
    ///
    /// Train mode normalises with the biased batch variance and folds the
    /// batch moments into `stats` (unbiased variance, momentum 0.1). Eval
    /// mode uses `stats`; if nothing has been recorded yet it falls back to
    /// mean 0 / variance 1.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats<T>,
        mode: Mode,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let [n, c, h, w] = xs[..] else {
            return Err(Error::config(format!("batchnorm2d input must be [N, C, H, W], got {xs:?}")));
        };
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::config(format!("batchnorm2d affine parameters must be [{c}]")));
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::config(format!(
                "batchnorm2d running stats hold {} channels, input has {c}",
                stats.mean.len()
            )));
        }
        let hw = h * w;
        let m = n * hw;
        let eps = T::from_f64_lossy(BatchNormStats::<T>::EPS);
        let x = self.value(input).data();
        let train = mode == Mode::Train;
        let (mean, var): (Vec<T>, Vec<T>) = if train {
            if m < 2 {
                return Err(Error::config(format!(
                    "batchnorm2d in train mode needs at least 2 values per channel, got {m}"
                )));
            }
            let mf = T::from_usize(m).unwrap();
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..n {
                    s += x[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum();
                }
                let mu = s / mf;
                let mut ss = T::zero();
                for b in 0..n {
                    for &v in &x[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                        ss += (v - mu) * (v - mu);
                    }
                }
                mean[ch] = mu;
                var[ch] = ss / mf;
            }
            let mom = T::from_f64_lossy(BatchNormStats::<T>::MOMENTUM);
            let unbias = mf / (mf - T::one());
            for ch in 0..c {
                stats.mean[ch] = (T::one() - mom) * stats.mean[ch] + mom * mean[ch];
                stats.var[ch] = (T::one() - mom) * stats.var[ch] + mom * var[ch] * unbias;
            }
            stats.tracked += 1;
            (mean, var)
        } else if stats.tracked == 0 {
            warn!("batchnorm2d in eval mode without recorded statistics; using mean 0, variance 1");
            (vec![T::zero(); c], vec![T::one(); c])
        } else {
            (stats.mean.clone(), stats.var.clone())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                let scale = g[ch] * inv_std[ch];
                let shift = bt[ch] - mean[ch] * scale;
                for (o, &v) in out[r.clone()].iter_mut().zip(&x[r]) {
                    *o = v * scale + shift;
                }
            }
        }
        let value = Tensor::new(xs, out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            },
            &[input, gamma, beta],
        ))
    }

    pub fn activation(&mut self, input: Var, act: Activation) -> Result<Var> {
        act.validate()?;
        let x = self.value(input);
        let data = x.data().iter().map(|&v| act.apply(v)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Act { input, act }, &[input]))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Relu)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(Error::config("concat of zero tensors"));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::config(format!("concat axis {axis} out of range for rank {}", base.len())));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let agrees = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !agrees {
                return Err(Error::config(format!(
                    "concat along axis {axis}: shape {s:?} incompatible with {base:?}"
                )));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let block = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    pub fn slice(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if axis >= xs.len() || len == 0 || start + len > xs[axis] {
            return Err(Error::config(format!(
                "slice [{start}, {}) along axis {axis} out of range for {xs:?}",
                start + len
            )));
        }
        let (outer, extent, inner) = split_axis(&xs, axis);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * extent * inner + start * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Slice { input, axis, start }, &[input]))
    }

    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        if self.shape(lhs) != self.shape(rhs) {
            return Err(Error::config(format!(
                "mul shape mismatch: {:?} vs {:?}",
                self.shape(lhs),
                self.shape(rhs)
            )));
        }
        let a = self.value(lhs);
        let data = a.data().iter().zip(self.value(rhs).data()).map(|(x, y)| *x * *y).collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul { lhs, rhs }, &[lhs, rhs]))
    }

    /// Inverted dropout: kept elements are scaled by `1 / (1 - rate)`.
    /// Identity in eval mode or at rate 0.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(input);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let x = self.value(input);
        let mask: Vec<T> = (0..x.numel())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(v, m)| *v * *m).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { input, mask }, &[input]))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape { input }, &[input]))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(input).sum());
        Ok(self.push(value, Op::Sum { input }, &[input]))
    }

    /// Mean over all elements of `(a - b)^2`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::config(format!(
                "mse shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let x = self.value(a).data();
        let y = self.value(b).data();
        let s: T = x.iter().zip(y).map(|(p, q)| (*p - *q) * (*p - *q)).sum();
        let value = Tensor::scalar(s / T::from_usize(x.len()).unwrap());
        Ok(self.push(value, Op::Mse { a, b }, &[a, b]))
    }

    // ---- reverse pass -----------------------------------------------------

    /// Propagates d(loss)/d(node) back to every leaf that requires a
    /// gradient, adding onto whatever those leaves already hold.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                    slot => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &self.nodes[i].op {
            Op::Leaf => unreachable!(),
            Op::Conv1d {
                input,
                weight,
                bias,
                geom,
                batch,
                c_out,
            } => {
                let (geom, batch, c_out) = (*geom, *batch, *c_out);
                let frames = geom.frames;
                let rows = geom.col_rows();
                let x = self.value(*input).data();
                let w = self.value(*weight).data();
                let in_len = geom.c_in * geom.len;
                if self.needs(*bias) {
                    let db = accumulate(grads, *bias, c_out);
                    for n in 0..batch {
                        for o in 0..c_out {
                            let off = (n * c_out + o) * frames;
                            db[o] += g[off..off + frames].iter().copied().sum();
                        }
                    }
                }
                let mut col = vec![T::zero(); rows * frames];
                if self.needs(*weight) {
                    let mut dw = grads[weight.0].take().unwrap_or_else(|| vec![T::zero(); c_out * rows]);
                    for n in 0..batch {
                        kernels::im2col_1d(&x[n * in_len..(n + 1) * in_len], geom, &mut col);
                        let gn = &g[n * c_out * frames..(n + 1) * c_out * frames];
                        T::gemm(c_out, frames, rows, T::one(), (gn, frames, 1), (&col, 1, frames), T::one(), (&mut dw, rows, 1));
                    }
                    grads[weight.0] = Some(dw);
                }
                if self.needs(*input) {
                    let mut dx = grads[input.0].take().unwrap_or_else(|| vec![T::zero(); batch * in_len]);
                    for n in 0..batch {
                        let gn = &g[n * c_out * frames..(n + 1) * c_out * frames];
                        T::gemm(rows, c_out, frames, T::one(), (w, 1, rows), (gn, frames, 1), T::zero(), (&mut col, frames, 1));
                        kernels::col2im_1d(&col, geom, &mut dx[n * in_len..(n + 1) * in_len]);
                    }
                    grads[input.0] = Some(dx);
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                batch,
                c_out,
            } => {
                let (geom, batch, c_out) = (*geom, *batch, *c_out);
                let hw = geom.hw();
                let rows = geom.col_rows();
                let in_len = geom.c_in * hw;
                let x = self.value(*input).data();
                let w = self.value(*weight).data();
                if self.needs(*bias) {
                    let db = accumulate(grads, *bias, c_out);
                    for n in 0..batch {
                        for o in 0..c_out {
                            let off = (n * c_out + o) * hw;
                            db[o] += g[off..off + hw].iter().copied().sum();
                        }
                    }
                }
                let mut col = if geom.k == 1 { Vec::new() } else { vec![T::zero(); rows * hw] };
                if self.needs(*weight) {
                    let mut dw = grads[weight.0].take().unwrap_or_else(|| vec![T::zero(); c_out * rows]);
                    for n in 0..batch {
                        let xn = &x[n * in_len..(n + 1) * in_len];
                        let src: &[T] = if geom.k == 1 {
                            xn
                        } else {
                            kernels::im2col_2d(xn, geom, &mut col);
                            &col
                        };
                        let gn = &g[n * c_out * hw..(n + 1) * c_out * hw];
                        T::gemm(c_out, hw, rows, T::one(), (gn, hw, 1), (src, 1, hw), T::one(), (&mut dw, rows, 1));
                    }
                    grads[weight.0] = Some(dw);
                }
                if self.needs(*input) {
                    let mut dx = grads[input.0].take().unwrap_or_else(|| vec![T::zero(); batch * in_len]);
                    for n in 0..batch {
                        let gn = &g[n * c_out * hw..(n + 1) * c_out * hw];
                        let dxn = &mut dx[n * in_len..(n + 1) * in_len];
                        if geom.k == 1 {
                            T::gemm(rows, c_out, hw, T::one(), (w, 1, rows), (gn, hw, 1), T::one(), (dxn, hw, 1));
                        } else {
                            T::gemm(rows, c_out, hw, T::one(), (w, 1, rows), (gn, hw, 1), T::zero(), (&mut col, hw, 1));
                            kernels::col2im_2d(&col, geom, dxn);
                        }
                    }
                    grads[input.0] = Some(dx);
                }
            }
            Op::MaxPool { input, argmax } => {
                if self.needs(*input) {
                    let n = self.value(*input).numel();
                    let dx = accumulate(grads, *input, n);
                    for (&a, &gv) in argmax.iter().zip(g) {
                        dx[a as usize] += gv;
                    }
                }
            }
            Op::Upsample { input } => {
                if self.needs(*input) {
                    let xs = self.shape(*input);
                    let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
                    let n = self.value(*input).numel();
                    let planes = n / (h * w);
                    let dx = accumulate(grads, *input, n);
                    let wo = 2 * w;
                    for p in 0..planes {
                        let src = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                        let dst = &mut dx[p * h * w..(p + 1) * h * w];
                        for y in 0..2 * h {
                            for xo in 0..wo {
                                dst[(y / 2) * w + xo / 2] += src[y * wo + xo];
                            }
                        }
                    }
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            } => {
                let xs = self.shape(*input);
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let x = self.value(*input).data();
                let gm = self.value(*gamma).data();
                let mf = T::from_usize(n * hw).unwrap();
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                        for (&dy, &v) in g[r.clone()].iter().zip(&x[r]) {
                            sum_dy[ch] += dy;
                            sum_dy_xhat[ch] += dy * (v - mean[ch]) * inv_std[ch];
                        }
                    }
                }
                if self.needs(*gamma) {
                    let dg = accumulate(grads, *gamma, c);
                    dg.iter_mut().zip(&sum_dy_xhat).for_each(|(a, b)| *a += *b);
                }
                if self.needs(*beta) {
                    let db = accumulate(grads, *beta, c);
                    db.iter_mut().zip(&sum_dy).for_each(|(a, b)| *a += *b);
                }
                if self.needs(*input) {
                    let dx = accumulate(grads, *input, x.len());
                    for b in 0..n {
                        for ch in 0..c {
                            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                            let k = gm[ch] * inv_std[ch];
                            if *train {
                                let mean_dy = sum_dy[ch] / mf;
                                let mean_dy_xhat = sum_dy_xhat[ch] / mf;
                                for ((d, &dy), &v) in dx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&x[r]) {
                                    let xhat = (v - mean[ch]) * inv_std[ch];
                                    *d += k * (dy - mean_dy - xhat * mean_dy_xhat);
                                }
                            } else {
                                for (d, &dy) in dx[r.clone()].iter_mut().zip(&g[r]) {
                                    *d += k * dy;
                                }
                            }
                        }
                    }
                }
            }
            Op::Act { input, act } => {
                if self.needs(*input) {
                    let x = self.value(*input).data();
                    let dx = accumulate(grads, *input, x.len());
                    for ((d, &v), &gv) in dx.iter_mut().zip(x).zip(g) {
                        *d += gv * act.derivative(v);
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let out_shape = self.nodes[i].value.shape();
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let extent = self.shape(v)[*axis];
                    if self.needs(v) {
                        let dv = accumulate(grads, v, outer * extent * inner);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + extent) * inner];
                            let dst = &mut dv[o * extent * inner..(o + 1) * extent * inner];
                            dst.iter_mut().zip(src).for_each(|(a, b)| *a += *b);
                        }
                    }
                    offset += extent;
                }
            }
            Op::Slice { input, axis, start } => {
                if self.needs(*input) {
                    let xs = self.shape(*input);
                    let (outer, extent, inner) = split_axis(xs, *axis);
                    let len = self.nodes[i].value.shape()[*axis];
                    let dx = accumulate(grads, *input, outer * extent * inner);
                    for o in 0..outer {
                        let base = o * extent * inner + start * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        dx[base..base + len * inner].iter_mut().zip(src).for_each(|(a, b)| *a += *b);
                    }
                }
            }
            Op::Mul { lhs, rhs } => {
                for (target, other) in [(*lhs, *rhs), (*rhs, *lhs)] {
                    if self.needs(target) {
                        let o = self.value(other).data();
                        let d = accumulate(grads, target, o.len());
                        for ((a, &b), &gv) in d.iter_mut().zip(o).zip(g) {
                            *a += gv * b;
                        }
                    }
                }
            }
            Op::Dropout { input, mask } => {
                if self.needs(*input) {
                    let dx = accumulate(grads, *input, mask.len());
                    for ((d, &m), &gv) in dx.iter_mut().zip(mask).zip(g) {
                        *d += gv * m;
                    }
                }
            }
            Op::Reshape { input } => {
                if self.needs(*input) {
                    let dx = accumulate(grads, *input, g.len());
                    dx.iter_mut().zip(g).for_each(|(a, b)| *a += *b);
                }
            }
            Op::Sum { input } => {
                if self.needs(*input) {
                    let n = self.value(*input).numel();
                    let dx = accumulate(grads, *input, n);
                    dx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Mse { a, b } => {
                let x = self.value(*a).data();
                let y = self.value(*b).data();
                let scale = T::from_f64_lossy(2.0) * g[0] / T::from_usize(x.len()).unwrap();
                if self.needs(*a) {
                    let d = accumulate(grads, *a, x.len());
                    for ((dv, &p), &q) in d.iter_mut().zip(x).zip(y) {
                        *dv += scale * (p - q);
                    }
                }
                if self.needs(*b) {
                    let d = accumulate(grads, *b, x.len());
                    for ((dv, &p), &q) in d.iter_mut().zip(x).zip(y) {
                        *dv -= scale * (p - q);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn conv1d_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 4], &[1., 2., 3., 4.]));
        let id = tape.constant(t(&[1, 1, 1], &[1.]));
        let pair = tape.constant(t(&[1, 1, 2], &[1., 1.]));
        let b = tape.constant(t(&[1], &[0.]));
        let y = tape.conv1d(x, id, b, 1, 1, 0, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[1., 2., 3., 4.]);
        let y = tape.conv1d(x, pair, b, 1, 1, 0, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[3., 5., 7.]);
        let x5 = tape.constant(t(&[1, 5], &[1., 2., 3., 4., 5.]));
        let y = tape.conv1d(x5, pair, b, 1, 2, 0, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[4., 6., 8.]);
    }

    #[test]
    fn conv1d_rejects_bad_geometry() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 3], &[0.; 6]));
        let w = tape.constant(t(&[1, 1, 2], &[1., 1.]));
        let b = tape.constant(t(&[1], &[0.]));
        assert!(matches!(tape.conv1d(x, w, b, 1, 1, 0, 0), Err(Error::Config(_))));
        let x = tape.constant(t(&[1, 3], &[0.; 3]));
        assert!(matches!(tape.conv1d(x, w, b, 1, 4, 0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn conv2d_padding_pattern() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 3, 3], &[1.; 9]));
        let w = tape.constant(t(&[1, 1, 3, 3], &[1.; 9]));
        let b = tape.constant(t(&[1], &[0.]));
        let y = tape.conv2d(x, w, b, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[4., 6., 4., 6., 9., 6., 4., 6., 4.]);
    }

    #[test]
    fn conv2d_zero_kernels_give_bias() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 4, 2], &(0..16).map(|i| i as f64).collect::<Vec<_>>()));
        let w = tape.constant(Tensor::zeros(vec![3, 2, 3, 3]));
        let b = tape.constant(t(&[3], &[0.5, -1., 2.]));
        let y = tape.conv2d(x, w, b, 2).unwrap();
        let out = tape.value(y).data();
        for (c, bias) in [0.5, -1., 2.].iter().enumerate() {
            assert!(out[c * 8..(c + 1) * 8].iter().all(|v| v == bias));
        }
        let w_bad = tape.constant(Tensor::zeros(vec![3, 5, 3, 3]));
        assert!(tape.conv2d(x, w_bad, b, 1).is_err());
    }

    #[test]
    fn maxpool_and_upsample() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 2, 2], &[1., 2., 3., 4.]));
        let p = tape.maxpool2d(x).unwrap();
        assert_eq!(tape.value(p).data(), &[4.]);
        let five = tape.constant(t(&[1, 1, 1], &[5.]));
        let u = tape.upsample2x(five).unwrap();
        assert_eq!(tape.value(u).data(), &[5.; 4]);
        assert_eq!(tape.shape(u), &[1, 2, 2]);
        let c = tape.constant(Tensor::full(vec![2, 4, 6], 1.5));
        let p = tape.maxpool2d(c).unwrap();
        assert_eq!(tape.shape(p), &[2, 2, 3]);
        assert!(tape.value(p).data().iter().all(|&v| v == 1.5));
        let u = tape.upsample2x(p).unwrap();
        assert_eq!(tape.shape(u), &[2, 4, 6]);
        let odd = tape.constant(Tensor::zeros(vec![1, 3, 2]));
        assert!(tape.maxpool2d(odd).is_err());
    }

    #[test]
    fn maxpool_ties_route_to_first() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[1, 2, 2], &[7., 7., 7., 7.]));
        let p = tape.maxpool2d(x).unwrap();
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1., 0., 0., 0.]);
    }

    #[test]
    fn activations() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[-1., 0., 2.]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0., 0., 2.]);
        let x = tape.constant(t(&[2], &[-2., 3.]));
        let y = tape.activation(x, Activation::LeakyRelu { slope: 0.01 }).unwrap();
        assert!((tape.value(y).data()[0] + 0.02).abs() < 1e-15);
        assert_eq!(tape.value(y).data()[1], 3.);
        let x = tape.constant(t(&[3], &[-5., 0.3, 5.]));
        let y = tape.activation(x, Activation::Hardtanh { lo: 0., hi: 1. }).unwrap();
        assert_eq!(tape.value(y).data(), &[0., 0.3, 1.]);
        assert!(Activation::parse("swish", 0., 0., 1.).is_err());
        assert!(Activation::parse("hardtanh", 0., 1., 1.).is_err());
        assert_eq!(Activation::Relu.derivative(0.0f64), 0.0);
    }

    #[test]
    fn concat_and_slice() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 1], &[1., 2.]));
        let b = tape.constant(t(&[1, 1], &[3.]));
        let c = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.value(c).data(), &[1., 2., 3.]);
        assert_eq!(tape.shape(c), &[3, 1]);
        let x = tape.constant(Tensor::zeros(vec![256, 4, 32]));
        let y = tape.constant(Tensor::zeros(vec![256, 4, 32]));
        let z = tape.concat(&[x, y], 0).unwrap();
        assert_eq!(tape.shape(z), &[512, 4, 32]);
        let bad = tape.constant(Tensor::zeros(vec![256, 5, 32]));
        assert!(tape.concat(&[x, bad], 0).is_err());
    }

    #[test]
    fn mse_examples() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(t(&[2], &[0., 0.]));
        let b = tape.constant(t(&[2], &[1., 3.]));
        let l = tape.mse(a, b).unwrap();
        assert_eq!(tape.value(l).data(), &[5.]);
        let same = tape.mse(b, b).unwrap();
        assert_eq!(tape.value(same).data(), &[0.]);
        let c = tape.constant(t(&[3], &[0.; 3]));
        assert!(tape.mse(a, c).is_err());
        // grad = 2 (a - t) / n
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[-1., -3.]);
    }

    #[test]
    fn mse_stationary_point() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(t(&[3], &[1., -2., 4.]));
        let b = tape.constant(t(&[3], &[1., -2., 4.]));
        let l = tape.mse(a, b).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(a).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_linear_and_accumulation() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t(&[3], &[0.1, 0.2, 0.3]));
        let x = tape.constant(t(&[3], &[4., -5., 6.]));
        let wx = tape.mul(w, x).unwrap();
        let loss = tape.sum(wx).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[4., -5., 6.]);
        assert!(tape.grad(x).is_none());
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[8., -10., 12.]);
        tape.zero_grads();
        assert!(tape.grad(w).is_none());
        let nonscalar = wx;
        assert!(matches!(tape.backward(nonscalar), Err(Error::Usage(_))));
    }

    #[test]
    fn batchnorm_train_normalises() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..2 * 3 * 4 * 5).map(|i| ((i * 37) % 11) as f64 * 0.7 - 2.0).collect();
        let x = tape.constant(t(&[2, 3, 4, 5], &data));
        let g = tape.param(t(&[3], &[1.; 3]));
        let b = tape.param(t(&[3], &[0.; 3]));
        let mut stats = BatchNormStats::new(3);
        let y = tape.batchnorm2d(x, g, b, &mut stats, Mode::Train).unwrap();
        let out = tape.value(y).data();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|n| out[(n * 3 + ch) * 20..(n * 3 + ch + 1) * 20].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / 40.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 40.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-4);
        }
        assert_eq!(stats.tracked, 1);

        let g0 = tape.constant(t(&[3], &[0.; 3]));
        let beta = tape.constant(t(&[3], &[0.5, -1., 2.]));
        let y = tape.batchnorm2d(x, g0, beta, &mut stats, Mode::Train).unwrap();
        let out = tape.value(y).data();
        for n in 0..2 {
            for (ch, bv) in [0.5, -1., 2.].iter().enumerate() {
                assert!(out[(n * 3 + ch) * 20..(n * 3 + ch + 1) * 20].iter().all(|v| v == bv));
            }
        }
    }

    #[test]
    fn batchnorm_eval_without_stats_is_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 1, 1, 2], &[3., -4.]));
        let g = tape.constant(t(&[1], &[1.]));
        let b = tape.constant(t(&[1], &[0.]));
        let mut stats = BatchNormStats::new(1);
        let y = tape.batchnorm2d(x, g, b, &mut stats, Mode::Eval).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] - 3.0).abs() < 1e-4 && (out[1] + 4.0).abs() < 1e-4);
        let single = tape.constant(t(&[1, 1, 1, 1], &[1.]));
        assert!(tape.batchnorm2d(single, g, b, &mut stats, Mode::Train).is_err());
    }

    #[test]
    fn dropout_eval_is_identity() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[4], &[1., 2., 3., 4.]));
        let y = tape.dropout(x, 0.5, Mode::Eval, &mut rng).unwrap();
        assert_eq!(x, y);
        let y = tape.dropout(x, 0.5, Mode::Train, &mut rng).unwrap();
        for (o, i) in tape.value(y).data().iter().zip([1., 2., 3., 4.]) {
            assert!(*o == 0.0 || *o == 2.0 * i);
        }
    }
}
