//! Differentiable operations recorded on a [`Tape`].
//!
//! Feature maps are `[n, c, h, w]`; matrices are `[rows, cols]`.

use crate::error::{Error, Result};
use crate::kernels::{self, bilinear_taps, ConvGeom};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Backward rule for [`Tape::custom`]: maps the output gradient and the
/// input values to one gradient per input.
pub type CustomVjp = Box<dyn Fn(&Tensor, &[&Tensor]) -> Vec<Tensor>>;

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    DivBy(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    MatMul(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool(Var),
    Upsample(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    SliceFirst {
        x: Var,
        index: usize,
    },
    AddRowBias(Var, Var),
    Sum(Var),
    Mean(Var),
    Bce {
        pred: Var,
        target: Tensor,
        eps: f64,
    },
    Custom {
        inputs: Vec<Var>,
        vjp: CustomVjp,
    },
}

/// Batch statistics produced by a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running-statistics updates.
    pub var: Vec<f64>,
}

/// How [`Tape::batch_norm`] normalizes.
#[derive(Clone, Copy, Debug)]
pub enum NormMode<'a> {
    Train,
    Eval { mean: &'a [f64], var: &'a [f64] },
}

pub const BN_EPS: f64 = 1e-5;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("zip_map shape")
}

fn transpose_data(src: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    out
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("add", x, y)?;
        let v = zip_map(x, y, |p, q| p + q);
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("sub", x, y)?;
        let v = zip_map(x, y, |p, q| p - q);
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("mul", x, y)?;
        let v = zip_map(x, y, |p, q| p * q);
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x).map(|p| p * factor);
        self.push(Op::Scale(x, factor), v)
    }

    /// `x · s` for a one-element `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let s_val = self.value(s).item()?;
        let v = self.value(x).map(|p| p * s_val);
        Ok(self.push(Op::ScaleBy(x, s), v))
    }

    /// `x / s` for a one-element `s`.
    pub fn div_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let s_val = self.value(s).item()?;
        if s_val == 0.0 {
            return Err(Error::InvalidArgument("division by zero scalar".into()));
        }
        let v = self.value(x).map(|p| p / s_val);
        Ok(self.push(Op::DivBy(x, s), v))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|p| p.max(0.0));
        self.push(Op::Relu(x), v)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(Op::Sigmoid(x), v)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::exp);
        self.push(Op::Exp(x), v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let (m, k) = x.dims2("matmul")?;
        let (k2, n) = y.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: {:?} x {:?}", x.shape(), y.shape()),
            ));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(x.data(), y.data(), &mut out, m, k, n);
        let v = Tensor::new(&[m, n], out)?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2("transpose")?;
        let v = Tensor::new(&[c, r], transpose_data(t.data(), r, c))?;
        Ok(self.push(Op::Transpose(x), v))
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2("softmax_rows")?;
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let v = Tensor::new(&[r, c], out)?;
        Ok(self.push(Op::SoftmaxRows(x), v))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(Op::Reshape(x), v))
    }

    /// Cross-correlation with "same" padding (`out = ⌈in / stride⌉`).
    ///
    /// `x` is `[n, c_in, h, w]`, `w` is `[c_out, c_in, k, k]`, `b` is `[c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, dilation: usize) -> Result<Var> {
        let xt = self.value(x);
        let wt = self.value(w);
        let (n, c_in, h, wd) = xt.dims4("conv2d")?;
        let (c_out, wc_in, k, k2) = wt.dims4("conv2d")?;
        if wc_in != c_in || k != k2 {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} incompatible with weight {:?}", xt.shape(), wt.shape()),
            ));
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::InvalidArgument("conv2d stride and dilation must be >= 1".into()));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [c_out] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} does not match {c_out} output channels", self.value(b).shape()),
                ));
            }
        }
        let geom = ConvGeom::same(c_in, c_out, k, stride, dilation, h, wd);
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![0.0; n * c_out * cols_n];
        let mut cols = vec![0.0; rows * cols_n];
        for i in 0..n {
            let xi = &xt.data()[i * c_in * h * wd..(i + 1) * c_in * h * wd];
            kernels::im2col(xi, &geom, &mut cols);
            let oi = &mut out[i * c_out * cols_n..(i + 1) * c_out * cols_n];
            kernels::gemm(wt.data(), &cols, oi, c_out, rows, cols_n);
            if let Some(b) = b {
                for (co, &bv) in self.value(b).data().iter().enumerate() {
                    for o in &mut oi[co * cols_n..(co + 1) * cols_n] {
                        *o += bv;
                    }
                }
            }
        }
        let v = Tensor::new(&[n, c_out, geom.out_h, geom.out_w], out)?;
        Ok(self.push(Op::Conv2d { x, w, b, geom }, v))
    }

    /// Floor-mode max pooling without padding; ties go to the lowest flat index.
    pub fn max_pool(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4("max_pool")?;
        let (oh, ow) = pooled_dims("max_pool", h, w, kernel, stride)?;
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        let d = t.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                            if d[idx] > d[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        let v = Tensor::new(&[n, c, oh, ow], out)?;
        Ok(self.push(Op::MaxPool { x, argmax }, v))
    }

    /// Floor-mode average pooling without padding.
    pub fn avg_pool(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4("avg_pool")?;
        let (oh, ow) = pooled_dims("avg_pool", h, w, kernel, stride)?;
        let norm = 1.0 / (kernel * kernel) as f64;
        let d = t.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            acc += d[base + (oy * stride + ky) * w + ox * stride + kx];
                        }
                    }
                    out.push(acc * norm);
                }
            }
        }
        let v = Tensor::new(&[n, c, oh, ow], out)?;
        Ok(self.push(Op::AvgPool { x, kernel, stride }, v))
    }

    /// Collapses each `h×w` plane to its mean, giving `[n, c, 1, 1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4("global_avg_pool")?;
        let out = t.data().chunks(h * w).map(|p| p.iter().sum::<f64>() / (h * w) as f64).collect();
        let v = Tensor::new(&[n, c, 1, 1], out)?;
        Ok(self.push(Op::GlobalAvgPool(x), v))
    }

    /// Bilinear resize with align-corners = false.
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::InvalidArgument("upsample target must be at least 1x1".into()));
        }
        let t = self.value(x);
        let (n, c, h, w) = t.dims4("upsample_bilinear")?;
        let mut out = Vec::with_capacity(n * c * out_h * out_w);
        for plane in t.data().chunks(h * w) {
            out.extend(kernels::resize_bilinear_plane(plane, h, w, out_h, out_w));
        }
        let v = Tensor::new(&[n, c, out_h, out_w], out)?;
        Ok(self.push(Op::Upsample(x), v))
    }

    /// Per-channel batch normalization over batch and spatial dimensions.
    ///
    /// In training mode the batch statistics are returned so the caller can
    /// update its running estimates.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: NormMode<'_>) -> Result<(Var, Option<BatchStats>)> {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4("batch_norm")?;
        if n == 0 {
            return Err(Error::shape("batch_norm", "empty batch"));
        }
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.value(p).shape() != [c] {
                return Err(Error::shape(
                    "batch_norm",
                    format!("{name} {:?} does not match {c} channels", self.value(p).shape()),
                ));
            }
        }
        let hw = h * w;
        let count = (n * hw) as f64;
        let d = t.data();
        let plane = |i: usize, ch: usize| &d[(i * c + ch) * hw..(i * c + ch + 1) * hw];

        let (mean, var, stats) = match mode {
            NormMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let s: f64 = (0..n).map(|i| plane(i, ch).iter().sum::<f64>()).sum();
                    mean[ch] = s / count;
                    let ss: f64 = (0..n)
                        .map(|i| plane(i, ch).iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>())
                        .sum();
                    var[ch] = ss / count;
                }
                let unbiased = if count > 1.0 {
                    var.iter().map(|v| v * count / (count - 1.0)).collect()
                } else {
                    var.clone()
                };
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            NormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", "running statistics do not match channels"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; d.len()];
        let mut out = vec![0.0; d.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * hw;
                for j in 0..hw {
                    let xh = (d[off + j] - mean[ch]) * inv_std[ch];
                    xhat[off + j] = xh;
                    out[off + j] = g[ch] * xh + b[ch];
                }
            }
        }
        let v = Tensor::new(&[n, c, h, w], out)?;
        let training = matches!(mode, NormMode::Train);
        let var_out = self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
            v,
        );
        Ok((var_out, stats))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("cannot concatenate {s:?} with {base:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            v,
        ))
    }

    /// Selects `x[index]` along the first dimension, keeping it with size 1.
    pub fn slice_first(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        let n = t.shape()[0];
        if index >= n {
            return Err(Error::shape(
                "slice_first",
                format!("index {index} out of range for {:?}", t.shape()),
            ));
        }
        let inner = t.numel() / n;
        let mut shape = t.shape().to_vec();
        shape[0] = 1;
        let v = Tensor::new(&shape, t.data()[index * inner..(index + 1) * inner].to_vec())?;
        Ok(self.push(Op::SliceFirst { x, index }, v))
    }

    /// `x[m×n] + b[n]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let t = self.value(x);
        let (_, n) = t.dims2("add_row_bias")?;
        let bt = self.value(b);
        if bt.shape() != [n] {
            return Err(Error::shape(
                "add_row_bias",
                format!("bias {:?} does not match {:?}", bt.shape(), t.shape()),
            ));
        }
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(bt.data()) {
                *o += bv;
            }
        }
        let v = Tensor::new(t.shape(), out)?;
        Ok(self.push(Op::AddRowBias(x, b), v))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum(x), v)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(Op::Mean(x), v)
    }

    /// Pixel-averaged binary cross-entropy with the log arguments clamped to
    /// `[eps, 1 - eps]`.
    pub fn bce(&mut self, pred: Var, target: &Tensor, eps: f64) -> Result<Var> {
        let p = self.value(pred);
        same_shape("bce", p, target)?;
        let n = p.numel() as f64;
        let total: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let q = p.clamp(eps, 1.0 - eps);
                -(t * q.ln() + (1.0 - t) * (1.0 - q).ln())
            })
            .sum();
        let v = Tensor::scalar(total / n);
        Ok(self.push(
            Op::Bce {
                pred,
                target: target.clone(),
                eps,
            },
            v,
        ))
    }

    /// Records an arbitrary forward value with a caller-supplied VJP.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, vjp: CustomVjp) -> Var {
        self.push(
            Op::Custom {
                inputs: inputs.to_vec(),
                vjp,
            },
            value,
        )
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn pooled_dims(op: &'static str, h: usize, w: usize, kernel: usize, stride: usize) -> Result<(usize, usize)> {
    if kernel == 0 || stride == 0 {
        return Err(Error::InvalidArgument(format!("{op}: kernel and stride must be >= 1")));
    }
    if kernel > h || kernel > w {
        return Err(Error::shape(op, format!("kernel {kernel} larger than input {h}x{w}")));
    }
    Ok(((h - kernel) / stride + 1, (w - kernel) / stride + 1))
}

impl Op {
    /// Input gradients for this node given its output value and gradient.
    pub(crate) fn vjp(&self, out: &Tensor, g: &Tensor, tape: &Tape) -> Vec<(Var, Tensor)> {
        let val = |v: Var| tape.value(v);
        match self {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => vec![(*a, zip_map(g, val(*b), |p, q| p * q)), (*b, zip_map(g, val(*a), |p, q| p * q))],
            Op::Scale(x, f) => vec![(*x, g.map(|p| p * f))],
            Op::ScaleBy(x, s) => {
                let sv = val(*s).data()[0];
                let ds: f64 = g.data().iter().zip(val(*x).data()).map(|(p, q)| p * q).sum();
                vec![(*x, g.map(|p| p * sv)), (*s, Tensor::full(val(*s).shape(), ds))]
            }
            Op::DivBy(x, s) => {
                let sv = val(*s).data()[0];
                let ds: f64 = -g.data().iter().zip(val(*x).data()).map(|(p, q)| p * q).sum::<f64>() / (sv * sv);
                vec![(*x, g.map(|p| p / sv)), (*s, Tensor::full(val(*s).shape(), ds))]
            }
            Op::Relu(x) => vec![(*x, zip_map(g, val(*x), |p, q| if q > 0.0 { p } else { 0.0 }))],
            Op::Sigmoid(x) => vec![(*x, zip_map(g, out, |p, y| p * y * (1.0 - y)))],
            Op::Exp(x) => vec![(*x, zip_map(g, out, |p, y| p * y))],
            Op::MatMul(a, b) => {
                let (at, bt) = (val(*a), val(*b));
                let (m, k) = (at.shape()[0], at.shape()[1]);
                let n = bt.shape()[1];
                let mut da = vec![0.0; m * k];
                kernels::gemm_a_bt(g.data(), bt.data(), &mut da, m, n, k);
                let mut db = vec![0.0; k * n];
                kernels::gemm_at_b(at.data(), g.data(), &mut db, k, m, n);
                vec![
                    (*a, Tensor::new(&[m, k], da).expect("matmul vjp")),
                    (*b, Tensor::new(&[k, n], db).expect("matmul vjp")),
                ]
            }
            Op::Transpose(x) => {
                let (r, c) = (g.shape()[0], g.shape()[1]);
                vec![(*x, Tensor::new(&[c, r], transpose_data(g.data(), r, c)).expect("transpose vjp"))]
            }
            Op::SoftmaxRows(x) => {
                let c = out.shape()[1];
                let mut dx = vec![0.0; out.numel()];
                for ((dr, yr), gr) in dx.chunks_mut(c).zip(out.data().chunks(c)).zip(g.data().chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, gg)| y * gg).sum();
                    for ((d, y), gg) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = y * (gg - dot);
                    }
                }
                vec![(*x, Tensor::new(out.shape(), dx).expect("softmax vjp"))]
            }
            Op::Reshape(x) => vec![(*x, g.reshape(val(*x).shape()).expect("reshape vjp"))],
            Op::Conv2d { x, w, b, geom } => conv2d_vjp(*x, *w, *b, geom, g, tape),
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(val(*x).shape());
                let d = dx.data_mut();
                for (&idx, &gv) in argmax.iter().zip(g.data()) {
                    d[idx] += gv;
                }
                vec![(*x, dx)]
            }
            Op::AvgPool { x, kernel, stride } => {
                let xs = val(*x).shape();
                let (h, w) = (xs[2], xs[3]);
                let (oh, ow) = (g.shape()[2], g.shape()[3]);
                let norm = 1.0 / (kernel * kernel) as f64;
                let mut dx = Tensor::zeros(xs);
                let d = dx.data_mut();
                for (plane, gp) in g.data().chunks(oh * ow).enumerate() {
                    let base = plane * h * w;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = gp[oy * ow + ox] * norm;
                            for ky in 0..*kernel {
                                for kx in 0..*kernel {
                                    d[base + (oy * stride + ky) * w + ox * stride + kx] += gv;
                                }
                            }
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::GlobalAvgPool(x) => {
                let xs = val(*x).shape();
                let hw = xs[2] * xs[3];
                let mut dx = Tensor::zeros(xs);
                for (dp, gv) in dx.data_mut().chunks_mut(hw).zip(g.data()) {
                    dp.fill(gv / hw as f64);
                }
                vec![(*x, dx)]
            }
            Op::Upsample(x) => {
                let xs = val(*x).shape();
                let (h, w) = (xs[2], xs[3]);
                let (oh, ow) = (g.shape()[2], g.shape()[3]);
                let ty = bilinear_taps(h, oh);
                let tx = bilinear_taps(w, ow);
                let mut dx = Tensor::zeros(xs);
                for (dp, gp) in dx.data_mut().chunks_mut(h * w).zip(g.data().chunks(oh * ow)) {
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let gv = gp[oy * ow + ox];
                            dp[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                            dp[y0 * w + x1] += gv * (1.0 - fy) * fx;
                            dp[y1 * w + x0] += gv * fy * (1.0 - fx);
                            dp[y1 * w + x1] += gv * fy * fx;
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let xs = val(*x).shape();
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let count = (n * hw) as f64;
                let gam = val(*gamma).data();
                let gd = g.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let off = (i * c + ch) * hw;
                        for j in off..off + hw {
                            dgamma[ch] += gd[j] * xhat[j];
                            dbeta[ch] += gd[j];
                        }
                    }
                }
                let mut dx = vec![0.0; gd.len()];
                for ch in 0..c {
                    let scale = gam[ch] * inv_std[ch];
                    for i in 0..n {
                        let off = (i * c + ch) * hw;
                        for j in off..off + hw {
                            dx[j] = if *training {
                                scale * (gd[j] - dbeta[ch] / count - xhat[j] * dgamma[ch] / count)
                            } else {
                                scale * gd[j]
                            };
                        }
                    }
                }
                vec![
                    (*x, Tensor::new(xs, dx).expect("bn vjp")),
                    (*gamma, Tensor::new(&[c], dgamma).expect("bn vjp")),
                    (*beta, Tensor::new(&[c], dbeta).expect("bn vjp")),
                ]
            }
            Op::Concat { inputs, axis } => {
                let shape = g.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                inputs
                    .iter()
                    .map(|&v| {
                        let s = val(v).shape();
                        let chunk = s[*axis] * inner;
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let start = o * total + offset;
                            d.extend_from_slice(&g.data()[start..start + chunk]);
                        }
                        offset += chunk;
                        (v, Tensor::new(s, d).expect("concat vjp"))
                    })
                    .collect()
            }
            Op::SliceFirst { x, index } => {
                let mut dx = Tensor::zeros(val(*x).shape());
                let inner = g.numel();
                dx.data_mut()[index * inner..(index + 1) * inner].copy_from_slice(g.data());
                vec![(*x, dx)]
            }
            Op::AddRowBias(x, b) => {
                let n = val(*b).numel();
                let mut db = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (d, gv) in db.iter_mut().zip(row) {
                        *d += gv;
                    }
                }
                vec![(*x, g.clone()), (*b, Tensor::new(&[n], db).expect("bias vjp"))]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), g.data()[0]))],
            Op::Mean(x) => {
                let t = val(*x);
                vec![(*x, Tensor::full(t.shape(), g.data()[0] / t.numel() as f64))]
            }
            Op::Bce { pred, target, eps } => {
                let p = val(*pred);
                let scale = g.data()[0] / p.numel() as f64;
                let d = zip_map(p, target, |p, t| {
                    if p < *eps || p > 1.0 - eps {
                        0.0
                    } else {
                        scale * ((1.0 - t) / (1.0 - p) - t / p)
                    }
                });
                vec![(*pred, d)]
            }
            Op::Custom { inputs, vjp } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                inputs.iter().copied().zip(vjp(g, &values)).collect()
            }
        }
    }
}

fn conv2d_vjp(x: Var, w: Var, b: Option<Var>, geom: &ConvGeom, g: &Tensor, tape: &Tape) -> Vec<(Var, Tensor)> {
    let xt = tape.value(x);
    let wt = tape.value(w);
    let n = xt.shape()[0];
    let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
    let in_plane = geom.in_channels * geom.in_h * geom.in_w;
    let out_plane = geom.out_channels * cols_n;
    let mut dx = vec![0.0; xt.numel()];
    let mut dw = vec![0.0; wt.numel()];
    let mut cols = vec![0.0; rows * cols_n];
    let mut dcols = vec![0.0; rows * cols_n];
    for i in 0..n {
        let gi = &g.data()[i * out_plane..(i + 1) * out_plane];
        kernels::im2col(&xt.data()[i * in_plane..(i + 1) * in_plane], geom, &mut cols);
        kernels::gemm_a_bt(gi, &cols, &mut dw, geom.out_channels, cols_n, rows);
        dcols.fill(0.0);
        kernels::gemm_at_b(wt.data(), gi, &mut dcols, rows, geom.out_channels, cols_n);
        kernels::col2im(&dcols, geom, &mut dx[i * in_plane..(i + 1) * in_plane]);
    }
    let mut grads = vec![
        (x, Tensor::new(xt.shape(), dx).expect("conv vjp")),
        (w, Tensor::new(wt.shape(), dw).expect("conv vjp")),
    ];
    if let Some(b) = b {
        let mut db = vec![0.0; geom.out_channels];
        for gi in g.data().chunks(out_plane) {
            for (co, d) in db.iter_mut().enumerate() {
                *d += gi[co * cols_n..(co + 1) * cols_n].iter().sum::<f64>();
            }
        }
        grads.push((b, Tensor::new(&[geom.out_channels], db).expect("conv vjp")));
    }
    grads
}
