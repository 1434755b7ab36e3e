//! Record-on-forward tape for reverse-mode differentiation.
//!
//! Every primitive evaluates eagerly and pushes a node holding its value and
//! the inputs its backward rule needs. [`Graph::backward`] walks the tape in
//! reverse from a scalar loss.

use std::collections::HashMap;

use super::kernels::{self, conv_out_len, conv_transpose_out_len, Window};
use super::params::{Gradients, ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Backward rule for [`Graph::custom`]: `(input values, output value, output
/// grad) -> one gradient per input`.
pub type CustomBackward = Box<dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor> + Send + Sync>;

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// Cached `tanh` of the inner polynomial, kept for the backward pass.
    Gelu(Var, Vec<f64>),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    SliceLast(Var, usize),
    ConcatLast(Vec<Var>),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        win: Window,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        win: Window,
    },
    Depthwise1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        pad_left: usize,
    },
    Upsample(Var, usize),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    Custom(Vec<Var>, CustomBackward),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Dynamic computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    matmul_macs: u64,
}

/// Result of [`Graph::backward`].
pub struct Backward {
    params: Gradients,
    leaves: HashMap<usize, Tensor>,
}

impl Backward {
    pub fn params(&self) -> &Gradients {
        &self.params
    }

    pub fn into_params(self) -> Gradients {
        self.params
    }

    /// Gradient with respect to a leaf created by [`Graph::input`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    let c = t.last_dim();
    (t.numel() / c, c)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Multiply-accumulates performed by forward [`Graph::matmul`] calls so far.
    pub fn matmul_macs(&self) -> u64 {
        self.matmul_macs
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Parameters brought onto this tape, in id order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<_> = self.params.keys().copied().collect();
        ids.sort();
        ids
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Backward::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Bring a parameter onto the tape. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    /// `x (…, k) · w (k, n) -> (…, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rank() != 2 || av.last_dim() != bv.shape()[0] {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let (m, k) = dims2(av);
        let n = bv.shape()[1];
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.matmul_macs += (m * k * n) as u64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), rg))
    }

    /// `x (…, d) + bias (d)` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.numel() != xv.last_dim() {
            return Err(Error::shape("add_row", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        let d = bv.numel();
        for row in out.data_mut().chunks_exact_mut(d) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(name, av.shape(), bv.shape()));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| f(*v)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.map(x, |v| v + s, Op::AddScalar(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let t: Vec<f64> = xv.data().iter().map(|&v| gelu_tanh(v)).collect();
        let data = xv
            .data()
            .iter()
            .zip(&t)
            .map(|(&v, &t)| 0.5 * v * (1.0 + t))
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x, if rg { t } else { Vec::new() }), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let d = xv.last_dim();
        for row in out.data_mut().chunks_exact_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Softmax(x), rg)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let d = xv.last_dim();
        for row in out.data_mut().chunks_exact_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::LogSoftmax(x), rg)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        for p in [gamma, beta] {
            if self.value(p).numel() != d {
                return Err(Error::shape(
                    "layer_norm",
                    xv.shape(),
                    self.value(p).shape(),
                ));
            }
        }
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.numel() / d;
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gv[c] + bv[c];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let out = self.value(x).permute(axes)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Permute(x, axes.to_vec()), rg))
    }

    /// 2D transpose of the last two axes of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    /// `out[i] = x[index[i]]` along the first axis. Gradients scatter back.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let rows = xv.shape()[0];
        if index.is_empty() || index.iter().any(|&i| i >= rows) {
            return Err(Error::shape("gather_rows", xv.shape(), &[index.len()]));
        }
        let w = xv.numel() / rows;
        let mut data = Vec::with_capacity(index.len() * w);
        for &i in index {
            data.extend_from_slice(&xv.data()[i * w..(i + 1) * w]);
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = index.len();
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::GatherRows(x, index.to_vec()), rg))
    }

    /// Columns `start..start + width` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if width == 0 || start + width > d {
            return Err(Error::shape("slice_last", xv.shape(), &[start, width]));
        }
        let data = xv
            .rows()
            .flat_map(|r| r[start..start + width].iter().copied())
            .collect();
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = width;
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceLast(x, start), rg))
    }

    /// Concatenate along the last axis; leading dims must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidTensor("concat of zero tensors".into()))?;
        let lead = &self.shape(*first)[..self.shape(*first).len() - 1];
        for p in parts {
            let s = self.shape(*p);
            if &s[..s.len() - 1] != lead {
                return Err(Error::shape("concat_last", self.shape(*first), s));
            }
        }
        let rows = self.value(*first).numel() / self.value(*first).last_dim();
        let total: usize = parts.iter().map(|p| self.value(*p).last_dim()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let v = self.value(*p);
                let d = v.last_dim();
                data.extend_from_slice(&v.data()[r * d..(r + 1) * d]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let out = Tensor::new(shape, data)?;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(out, Op::ConcatLast(parts.to_vec()), rg))
    }

    /// 1D convolution of a `(len, c_in)` sequence with a `(k, c_in, c_out)`
    /// kernel, full channel mixing, symmetric zero padding.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 3 || ws[1] != xs[1] {
            return Err(Error::shape("conv1d", &xs, &ws));
        }
        let out_len = conv_out_len(xs[0], ws[0], stride, 2 * pad)
            .ok_or_else(|| Error::shape("conv1d", &xs, &ws))?;
        let win = Window {
            img_h: 1,
            img_w: xs[0],
            channels: xs[1],
            kh: 1,
            kw: ws[0],
            sh: 1,
            sw: stride,
            ph: 0,
            pw: pad,
            pos_h: 1,
            pos_w: out_len,
        };
        self.conv_impl("conv1d", x, w, b, win, vec![out_len, ws[2]])
    }

    /// 2D convolution of a channel-last `(h, w, c_in)` map with a
    /// `(k, k, c_in, c_out)` kernel.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 4 || ws[2] != xs[2] {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        let oh = conv_out_len(xs[0], ws[0], stride, 2 * pad);
        let ow = conv_out_len(xs[1], ws[1], stride, 2 * pad);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::shape("conv2d", &xs, &ws));
        };
        let win = Window {
            img_h: xs[0],
            img_w: xs[1],
            channels: xs[2],
            kh: ws[0],
            kw: ws[1],
            sh: stride,
            sw: stride,
            ph: pad,
            pw: pad,
            pos_h: oh,
            pos_w: ow,
        };
        self.conv_impl("conv2d", x, w, b, win, vec![oh, ow, ws[3]])
    }

    fn conv_impl(
        &mut self,
        name: &'static str,
        x: Var,
        w: Var,
        b: Option<Var>,
        win: Window,
        out_shape: Vec<usize>,
    ) -> Result<Var> {
        let c_out = *out_shape.last().unwrap();
        if let Some(b) = b {
            if self.value(b).numel() != c_out {
                return Err(Error::shape(name, self.shape(w), self.shape(b)));
            }
        }
        let cols = win.im2col(self.value(x).data());
        let mut out = vec![0.0; win.positions() * c_out];
        kernels::gemm(
            win.positions(),
            win.patch_len(),
            c_out,
            &cols,
            false,
            self.value(w).data(),
            false,
            &mut out,
            false,
        );
        if let Some(b) = b {
            add_bias(&mut out, self.value(b).data());
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Conv { x, w, b, win }, rg))
    }

    /// Transposed 2D convolution of a channel-last `(h, w, c_in)` map with a
    /// `(c_in, k, k, c_out)` kernel. Output side is `(h − 1)·stride − 2·pad + k`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 4 || ws[0] != xs[2] {
            return Err(Error::shape("conv_transpose2d", &xs, &ws));
        }
        let oh = conv_transpose_out_len(xs[0], ws[1], stride, pad);
        let ow = conv_transpose_out_len(xs[1], ws[2], stride, pad);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::shape("conv_transpose2d", &xs, &ws));
        };
        let c_out = ws[3];
        if let Some(b) = b {
            if self.value(b).numel() != c_out {
                return Err(Error::shape("conv_transpose2d", &ws, self.shape(b)));
            }
        }
        let win = Window {
            img_h: oh,
            img_w: ow,
            channels: c_out,
            kh: ws[1],
            kw: ws[2],
            sh: stride,
            sw: stride,
            ph: pad,
            pw: pad,
            pos_h: xs[0],
            pos_w: xs[1],
        };
        let mut cols = vec![0.0; win.positions() * win.patch_len()];
        kernels::gemm(
            win.positions(),
            xs[2],
            win.patch_len(),
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut cols,
            false,
        );
        let mut out = vec![0.0; oh * ow * c_out];
        win.col2im(&cols, &mut out);
        if let Some(b) = b {
            add_bias(&mut out, self.value(b).data());
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(vec![oh, ow, c_out], out)?,
            Op::ConvTranspose { x, w, b, win },
            rg,
        ))
    }

    /// Per-channel 1D convolution of a `(len, c)` sequence with a `(c, k)`
    /// kernel; output length equals input length when
    /// `pad_left + pad_right == k − 1`, where `pad_right` is implied.
    pub fn depthwise_conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        pad_left: usize,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || ws[0] != xs[1] || pad_left >= ws[1] {
            return Err(Error::shape("depthwise_conv1d", &xs, &ws));
        }
        if let Some(b) = b {
            if self.value(b).numel() != xs[1] {
                return Err(Error::shape("depthwise_conv1d", &ws, self.shape(b)));
            }
        }
        let (len, c, k) = (xs[0], xs[1], ws[1]);
        let mut out = vec![0.0; len * c];
        kernels::depthwise1d(
            self.value(x).data(),
            len,
            c,
            self.value(w).data(),
            k,
            pad_left,
            &mut out,
        );
        if let Some(b) = b {
            add_bias(&mut out, self.value(b).data());
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(xs, out)?,
            Op::Depthwise1d { x, w, b, pad_left },
            rg,
        ))
    }

    /// Nearest-neighbour upsampling of a `(h, w, c)` map by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || factor == 0 {
            return Err(Error::shape("upsample_nearest", &xs, &[factor]));
        }
        let (h, w, c) = (xs[0], xs[1], xs[2]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(h * w * c * factor * factor);
        for y in 0..h * factor {
            for xx in 0..w * factor {
                let off = ((y / factor) * w + xx / factor) * c;
                out.extend_from_slice(&src[off..off + c]);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![h * factor, w * factor, c], out)?,
            Op::Upsample(x, factor),
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Sum over every axis but the last: `(…, c) -> (c)`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let c = v.last_dim();
        let mut out = vec![0.0; c];
        for row in v.rows() {
            for (o, r) in out.iter_mut().zip(row) {
                *o += r;
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![c], out).unwrap(), Op::SumRows(x), rg)
    }

    /// User-defined primitive with an explicit backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: CustomBackward) -> Var {
        let rg = inputs.iter().any(|v| self.rg(*v));
        self.push(value, Op::Custom(inputs.to_vec(), backward), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Backward> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut params: Vec<(ParamId, Tensor)> = Vec::new();
        let mut leaves = HashMap::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Param(id) => {
                    params.push((*id, Tensor::new(node.value.shape().to_vec(), g)?));
                }
                Op::Leaf => {
                    leaves.insert(i, Tensor::new(node.value.shape().to_vec(), g)?);
                }
                _ => self.backprop(i, &g, &mut grads),
            }
        }
        params.sort_by_key(|(id, _)| *id);
        Ok(Backward {
            params: Gradients::from_sorted(params),
            leaves,
        })
    }

    /// Accumulate into `grads[v]` (allocating zeros) when `v` needs gradient.
    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    /// Add `g` into `grads[v]`, copying instead of zero-filling on first use.
    fn acc_add(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(d) => add_into(d, g),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = dims2(av);
                let n = bv.shape()[1];
                if let Some(da) = self.acc(grads, *a) {
                    kernels::gemm(m, n, k, g, false, bv.data(), true, da, true);
                }
                if let Some(db) = self.acc(grads, *b) {
                    kernels::gemm(k, m, n, av.data(), true, g, false, db, true);
                }
            }
            Op::AddRow(x, b) => {
                self.acc_add(grads, *x, g);
                if let Some(db) = self.acc(grads, *b) {
                    let d = db.len();
                    for row in g.chunks_exact(d) {
                        add_into(db, row);
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc_add(grads, *a, g);
                self.acc_add(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.acc_add(grads, *a, g);
                if let Some(db) = self.acc(grads, *b) {
                    for (d, gv) in db.iter_mut().zip(g) {
                        *d -= gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.acc(grads, *a) {
                    for ((d, gv), y) in da.iter_mut().zip(g).zip(bv) {
                        *d += gv * y;
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for ((d, gv), x) in db.iter_mut().zip(g).zip(av) {
                        *d += gv * x;
                    }
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.acc(grads, *a) {
                    for ((d, gv), y) in da.iter_mut().zip(g).zip(bv) {
                        *d += gv / y;
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for (((d, gv), x), y) in db.iter_mut().zip(g).zip(av).zip(bv) {
                        *d -= gv * x / (y * y);
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(dx) = self.acc(grads, *x) {
                    for (d, gv) in dx.iter_mut().zip(g) {
                        *d += gv * s;
                    }
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                self.acc_add(grads, *x, g);
            }
            Op::Gelu(x, t) => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.acc(grads, *x) {
                    for (((d, gv), v), t) in dx.iter_mut().zip(g).zip(xv).zip(t) {
                        *d += gv * gelu_grad_with(*v, *t);
                    }
                }
            }
            Op::Softmax(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    let c = out.last_dim();
                    for ((dr, gr), yr) in dx
                        .chunks_exact_mut(c)
                        .zip(g.chunks_exact(c))
                        .zip(out.rows())
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, gv), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += y * (gv - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    let c = out.last_dim();
                    for ((dr, gr), yr) in dx
                        .chunks_exact_mut(c)
                        .zip(g.chunks_exact(c))
                        .zip(out.rows())
                    {
                        let total: f64 = gr.iter().sum();
                        for ((d, gv), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += gv - y.exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = out.last_dim();
                let gv = self.value(*gamma).data();
                if let Some(dg) = self.acc(grads, *gamma) {
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for ((o, a), b) in dg.iter_mut().zip(gr).zip(hr) {
                            *o += a * b;
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *beta) {
                    for gr in g.chunks_exact(d) {
                        add_into(db, gr);
                    }
                }
                if let Some(dx) = self.acc(grads, *x) {
                    let mut dh = vec![0.0; d];
                    for (r, ((dr, gr), hr)) in dx
                        .chunks_exact_mut(d)
                        .zip(g.chunks_exact(d))
                        .zip(xhat.chunks_exact(d))
                        .enumerate()
                    {
                        for c in 0..d {
                            dh[c] = gr[c] * gv[c];
                        }
                        let s1: f64 = dh.iter().sum();
                        let s2: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let k = inv_std[r] / d as f64;
                        for c in 0..d {
                            dr[c] += k * (d as f64 * dh[c] - s1 - hr[c] * s2);
                        }
                    }
                }
            }
            Op::Permute(x, axes) => {
                if let Some(dx) = self.acc(grads, *x) {
                    let map = super::dense::permute_index_map(self.shape(*x), axes)
                        .expect("validated on forward");
                    for (dst, src) in map.iter().enumerate() {
                        dx[*src] += g[dst];
                    }
                }
            }
            Op::GatherRows(x, index) => {
                if let Some(dx) = self.acc(grads, *x) {
                    let w = out.numel() / index.len();
                    for (r, &src) in index.iter().enumerate() {
                        add_into(&mut dx[src * w..(src + 1) * w], &g[r * w..(r + 1) * w]);
                    }
                }
            }
            Op::SliceLast(x, start) => {
                let d = self.value(*x).last_dim();
                let width = out.last_dim();
                if let Some(dx) = self.acc(grads, *x) {
                    for (dr, gr) in dx.chunks_exact_mut(d).zip(g.chunks_exact(width)) {
                        add_into(&mut dr[*start..start + width], gr);
                    }
                }
            }
            Op::ConcatLast(parts) => {
                let total = out.last_dim();
                let mut offset = 0;
                for p in parts {
                    let d = self.value(*p).last_dim();
                    if let Some(dp) = self.acc(grads, *p) {
                        for (dr, gr) in dp.chunks_exact_mut(d).zip(g.chunks_exact(total)) {
                            add_into(dr, &gr[offset..offset + d]);
                        }
                    }
                    offset += d;
                }
            }
            Op::Conv { x, w, b, win } => {
                let c_out = out.last_dim();
                let (p, k) = (win.positions(), win.patch_len());
                if let Some(b) = b {
                    if let Some(db) = self.acc(grads, *b) {
                        for row in g.chunks_exact(c_out) {
                            add_into(db, row);
                        }
                    }
                }
                if self.rg(*w) {
                    let cols = win.im2col(self.value(*x).data());
                    let dw = self.acc(grads, *w).unwrap();
                    kernels::gemm(k, p, c_out, &cols, true, g, false, dw, true);
                }
                if self.rg(*x) {
                    let mut dcols = vec![0.0; p * k];
                    kernels::gemm(
                        p,
                        c_out,
                        k,
                        g,
                        false,
                        self.value(*w).data(),
                        true,
                        &mut dcols,
                        false,
                    );
                    let dx = self.acc(grads, *x).unwrap();
                    win.col2im(&dcols, dx);
                }
            }
            Op::ConvTranspose { x, w, b, win } => {
                let c_in = self.value(*x).last_dim();
                let (p, k) = (win.positions(), win.patch_len());
                if let Some(b) = b {
                    if let Some(db) = self.acc(grads, *b) {
                        for row in g.chunks_exact(win.channels) {
                            add_into(db, row);
                        }
                    }
                }
                let dcols = win.im2col(g);
                if let Some(dw) = self.acc(grads, *w) {
                    kernels::gemm(
                        c_in,
                        p,
                        k,
                        self.value(*x).data(),
                        true,
                        &dcols,
                        false,
                        dw,
                        true,
                    );
                }
                if let Some(dx) = self.acc(grads, *x) {
                    kernels::gemm(
                        p,
                        k,
                        c_in,
                        &dcols,
                        false,
                        self.value(*w).data(),
                        true,
                        dx,
                        true,
                    );
                }
            }
            Op::Depthwise1d { x, w, b, pad_left } => {
                let xs = self.shape(*x);
                let (len, c) = (xs[0], xs[1]);
                let k = self.value(*w).last_dim();
                if let Some(b) = b {
                    if let Some(db) = self.acc(grads, *b) {
                        for row in g.chunks_exact(c) {
                            add_into(db, row);
                        }
                    }
                }
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                if let Some(dw) = self.acc(grads, *w) {
                    for i in 0..len {
                        for tap in 0..k {
                            let src = i as isize + tap as isize - *pad_left as isize;
                            if src < 0 || src as usize >= len {
                                continue;
                            }
                            let s = src as usize;
                            for ch in 0..c {
                                dw[ch * k + tap] += g[i * c + ch] * xv[s * c + ch];
                            }
                        }
                    }
                }
                if let Some(dx) = self.acc(grads, *x) {
                    for i in 0..len {
                        for tap in 0..k {
                            let src = i as isize + tap as isize - *pad_left as isize;
                            if src < 0 || src as usize >= len {
                                continue;
                            }
                            let s = src as usize;
                            for ch in 0..c {
                                dx[s * c + ch] += g[i * c + ch] * wv[ch * k + tap];
                            }
                        }
                    }
                }
            }
            Op::Upsample(x, factor) => {
                let xs = self.shape(*x);
                let (w, c) = (xs[1], xs[2]);
                let ow = w * factor;
                if let Some(dx) = self.acc(grads, *x) {
                    for (pix, gr) in g.chunks_exact(c).enumerate() {
                        let (y, xx) = (pix / ow, pix % ow);
                        let off = ((y / factor) * w + xx / factor) * c;
                        add_into(&mut dx[off..off + c], gr);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    let s = g[0] / dx.len() as f64;
                    dx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::SumRows(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    for row in dx.chunks_exact_mut(g.len()) {
                        add_into(row, g);
                    }
                }
            }
            Op::Custom(inputs, rule) => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let gt = Tensor::new(out.shape().to_vec(), g.to_vec()).expect("same shape");
                let local = rule(&vals, out, &gt);
                for (v, lg) in inputs.iter().zip(local) {
                    if let Some(dv) = self.acc(grads, *v) {
                        add_into(dv, lg.data());
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn add_bias(out: &mut [f64], bias: &[f64]) {
    for row in out.chunks_exact_mut(bias.len()) {
        add_into(row, bias);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_tanh(x: f64) -> f64 {
    (GELU_C * (x + 0.044715 * x * x * x)).tanh()
}

#[cfg(test)]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + gelu_tanh(x))
}

fn gelu_grad_with(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, GradCheckOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Grad-check `op` on parameters of the given shapes, contracting the
    /// output against a fixed random tensor so every output element matters.
    fn check(shapes: &[&[usize]], op: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let ids: Vec<ParamId> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| store.add(format!("p{i}"), rand_tensor(s, &mut rng)))
            .collect();
        let probe = {
            let mut g = Graph::new();
            let vs: Vec<Var> = ids.iter().map(|&id| g.param(&store, id)).collect();
            let out = op(&mut g, &vs).unwrap();
            g.value(out).shape().to_vec()
        };
        let weights = rand_tensor(&probe, &mut rng);
        let report = grad_check(
            |g, s| {
                let vs: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
                let out = op(g, &vs)?;
                let w = g.constant(weights.clone());
                let m = g.mul(out, w)?;
                Ok(g.sum(m))
            },
            &store,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed, "{:?}", report.params);
    }

    #[test]
    fn grad_elementwise() {
        check(&[&[3, 4], &[3, 4]], |g, v| g.add(v[0], v[1]));
        check(&[&[3, 4], &[3, 4]], |g, v| g.sub(v[0], v[1]));
        check(&[&[3, 4], &[3, 4]], |g, v| g.mul(v[0], v[1]));
        check(&[&[3, 4], &[3, 4]], |g, v| {
            let d = g.add_scalar(v[1], 3.0);
            g.div(v[0], d)
        });
        check(&[&[5]], |g, v| Ok(g.scale(v[0], -2.5)));
        check(&[&[2, 5]], |g, v| Ok(g.gelu(v[0])));
    }

    #[test]
    fn grad_matmul_and_bias() {
        check(&[&[2, 3, 4], &[4, 5]], |g, v| g.matmul(v[0], v[1]));
        check(&[&[3, 4], &[4]], |g, v| g.add_row(v[0], v[1]));
    }

    #[test]
    fn grad_softmax_family() {
        check(&[&[3, 5]], |g, v| Ok(g.softmax(v[0])));
        check(&[&[3, 5]], |g, v| Ok(g.log_softmax(v[0])));
        check(&[&[4, 6], &[6], &[6]], |g, v| {
            g.layer_norm(v[0], v[1], v[2], 1e-5)
        });
    }

    #[test]
    fn grad_shape_ops() {
        check(&[&[2, 3, 4]], |g, v| g.permute(v[0], &[2, 0, 1]));
        check(&[&[2, 6]], |g, v| g.reshape(v[0], &[3, 4]));
        check(&[&[4, 3]], |g, v| g.gather_rows(v[0], &[3, 1, 1, 0]));
        check(&[&[3, 5]], |g, v| g.slice_last(v[0], 1, 3));
        check(&[&[3, 2], &[3, 4]], |g, v| {
            g.concat_last(&[v[0], v[1], v[0]])
        });
        check(&[&[2, 3, 2]], |g, v| g.upsample_nearest(v[0], 2));
    }

    #[test]
    fn grad_reductions() {
        check(&[&[3, 4]], |g, v| {
            let s = g.sum(v[0]);
            let m = g.mean(v[0]);
            g.mul(s, m)
        });
        check(&[&[3, 4]], |g, v| Ok(g.sum_rows(v[0])));
    }

    #[test]
    fn grad_convolutions() {
        check(&[&[9, 3], &[3, 3, 2], &[2]], |g, v| {
            g.conv1d(v[0], v[1], Some(v[2]), 2, 1)
        });
        check(&[&[6, 5, 2], &[3, 3, 2, 3], &[3]], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 2, 1)
        });
        check(&[&[3, 4, 2], &[2, 4, 4, 3], &[3]], |g, v| {
            g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1)
        });
        check(&[&[7, 3], &[3, 4], &[3]], |g, v| {
            g.depthwise_conv1d(v[0], v[1], Some(v[2]), 2)
        });
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (h, w, ci, co, k, s, p) = (5, 6, 2, 3, 3, 2, 1);
        let x = rand_tensor(&[h, w, ci], &mut rng);
        let wt = rand_tensor(&[k, k, ci, co], &mut rng);
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(wt.clone()));
        let y = g.conv2d(xv, wv, None, s, p).unwrap();
        let ys = g.shape(y).to_vec();
        assert_eq!(ys, vec![3, 3, co]);
        for oy in 0..ys[0] {
            for ox in 0..ys[1] {
                for o in 0..co {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * s + ky) as isize - p as isize;
                            let ix = (ox * s + kx) as isize - p as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for c in 0..ci {
                                acc += x.data()[(iy as usize * w + ix as usize) * ci + c]
                                    * wt.data()[((ky * k + kx) * ci + c) * co + o];
                            }
                        }
                    }
                    let got = g.value(y).data()[(oy * ys[1] + ox) * co + o];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn transposed_conv_doubles_size() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[8, 8, 2]));
        let w = g.constant(Tensor::zeros(&[2, 4, 4, 3]));
        let y = g.conv_transpose2d(x, w, None, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[16, 16, 3]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[20, 7], |_| rng.random_range(-30.0..30.0)));
        let y = g.softmax(x);
        for row in g.value(y).rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[3], 2.0));
        let c = g.constant(Tensor::full(&[3], 5.0));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y);
        let b = g.backward(s).unwrap();
        assert_eq!(b.wrt(x).unwrap().data(), &[5.0; 3]);
        assert!(b.wrt(c).is_none());
    }
}
