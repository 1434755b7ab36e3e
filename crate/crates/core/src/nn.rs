//! Parameterized layers built on the tape primitives.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

fn bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// `x · W + b` with `W: (d_in, d_out)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let b = bound(d_in);
        Self {
            weight: store.add_uniform(format!("{name}.weight"), &[d_in, d_out], b, rng),
            bias: store.add_uniform(format!("{name}.bias"), &[d_out], b, rng),
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    /// Set weight and bias to zero.
    pub fn zero(&self, store: &mut ParamStore) {
        for id in [self.weight, self.bias] {
            store.get_mut(id).value.data_mut().fill(0.0);
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d])),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

/// Full channel-mixing 1D convolution over a `(len, c_in)` sequence.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let b = bound(c_in * kernel);
        Self {
            weight: store.add_uniform(format!("{name}.weight"), &[kernel, c_in, c_out], b, rng),
            bias: store.add_uniform(format!("{name}.bias"), &[c_out], b, rng),
            kernel,
            stride,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv1d(x, w, Some(b), self.stride, 0)
    }
}

/// Channel-last 2D convolution.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let b = bound(c_in * kernel * kernel);
        Self {
            weight: store.add_uniform(
                format!("{name}.weight"),
                &[kernel, kernel, c_in, c_out],
                b,
                rng,
            ),
            bias: store.add_uniform(format!("{name}.bias"), &[c_out], b, rng),
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Channel-last transposed 2D convolution.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        // each output cell sees about (kernel/stride)^2 taps per input channel
        let taps = (kernel / stride.max(1)).max(1);
        let b = bound(c_in * taps * taps);
        Self {
            weight: store.add_uniform(
                format!("{name}.weight"),
                &[c_in, kernel, kernel, c_out],
                b,
                rng,
            ),
            bias: store.add_uniform(format!("{name}.bias"), &[c_out], b, rng),
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv_transpose2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Per-channel 1D convolution with "same" zero padding; the extra pad for
/// even kernels goes on the left.
#[derive(Clone, Debug)]
pub struct DepthwiseConv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
}

impl DepthwiseConv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let b = bound(kernel);
        Self {
            weight: store.add_uniform(format!("{name}.weight"), &[channels, kernel], b, rng),
            bias: store.add_uniform(format!("{name}.bias"), &[channels], b, rng),
            kernel,
        }
    }

    /// Left padding `⌈(k − 1)/2⌉`; right padding is the remaining `⌊(k − 1)/2⌋`.
    pub fn pad_left(&self) -> usize {
        self.kernel / 2
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.depthwise_conv1d(x, w, Some(b), self.pad_left())
    }

    /// Centre tap 1, others 0, bias 0: the layer becomes the identity.
    pub fn set_delta(&self, store: &mut ParamStore) {
        let k = self.kernel;
        let centre = self.pad_left();
        let w = &mut store.get_mut(self.weight).value;
        for (i, v) in w.data_mut().iter_mut().enumerate() {
            *v = if i % k == centre { 1.0 } else { 0.0 };
        }
        store.get_mut(self.bias).value.data_mut().fill(0.0);
    }
}
