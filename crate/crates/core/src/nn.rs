//! Forward context and the small set of layers the network is built from.

use rand::Rng;

use crate::error::Result;
use crate::ops::NormMode;
use crate::param::{BufferId, ParamId, ParamStore};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward/backward pass over a [`ParamStore`].
///
/// Each parameter is placed on the tape at most once per context, so its
/// gradient is the sum over all of its uses.
pub struct Ctx<'s> {
    pub tape: Tape,
    store: &'s mut ParamStore,
    mode: Mode,
    bound: Vec<Option<Var>>,
}

impl<'s> Ctx<'s> {
    pub fn new(store: &'s mut ParamStore, mode: Mode) -> Self {
        let bound = vec![None; store.params().len()];
        Self {
            tape: Tape::new(),
            store,
            mode,
            bound,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.param_leaf(id, self.store.get(id).value.clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.tape.leaf(value)
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.tape.leaf(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Runs the reverse sweep and adds parameter gradients into the store.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let grads = self.tape.backward(loss)?;
        for (id, g) in grads.params(&self.tape) {
            self.store.get_mut(id).grad.add_assign(g);
        }
        Ok(grads)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl Conv2d {
    /// Fan-in uniform weights; the bias, when present, starts at zero.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_fan_in(
            format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            in_channels * kernel * kernel,
            rng,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels])));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            dilation,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.conv2d(x, w, b, self.stride, self.dilation)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels])),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = ctx.tape.batch_norm(x, gamma, beta, NormMode::Train)?;
                if let Some(stats) = stats {
                    for (id, batch) in [(self.running_mean, &stats.mean), (self.running_var, &stats.var)] {
                        for (r, b) in ctx.store.buffer_mut(id).value.data_mut().iter_mut().zip(batch) {
                            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                        }
                    }
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = ctx.store.buffer(self.running_mean).value.data().to_vec();
                let var = ctx.store.buffer(self.running_var).value.data().to_vec();
                let (y, _) = ctx.tape.batch_norm(x, gamma, beta, NormMode::Eval { mean: &mean, var: &var })?;
                Ok(y)
            }
        }
    }
}

/// 3×3 (or 1×1) convolution without bias, batch norm, ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv2d::new(
                store,
                &format!("{name}.conv"),
                in_channels,
                out_channels,
                kernel,
                stride,
                dilation,
                false,
                rng,
            ),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), out_channels),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        Ok(ctx.tape.relu(y))
    }
}

/// Fully connected layer on `[n, in]` rows: `x·W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_features: usize, out_features: usize, rng: &mut R) -> Self {
        Self {
            weight: store.add_fan_in(format!("{name}.weight"), &[in_features, out_features], in_features, rng),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_features])),
            in_features,
            out_features,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        let y = ctx.tape.matmul(x, w)?;
        ctx.tape.add_row_bias(y, b)
    }
}
