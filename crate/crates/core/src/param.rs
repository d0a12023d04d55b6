//! Learnable parameters and non-learnable buffers.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BufferId(pub(crate) usize);

/// A learnable tensor with its gradient accumulator and momentum buffer.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub momentum_buf: Tensor,
}

impl Parameter {
    fn new(name: String, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        let momentum_buf = Tensor::zeros(value.shape());
        Self {
            name,
            value,
            grad,
            momentum_buf,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }
}

/// Non-learnable state such as batch-norm running statistics.
#[derive(Clone, Debug)]
pub struct Buffer {
    pub name: String,
    pub value: Tensor,
}

/// Owns every parameter and buffer of a model, in creation order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    buffers: Vec<Buffer>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Parameter::new(name.into(), value));
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> BufferId {
        self.buffers.push(Buffer { name: name.into(), value });
        BufferId(self.buffers.len() - 1)
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn add_fan_in<R: Rng + ?Sized>(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut R) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.add(name, Tensor::uniform(shape, -bound, bound, rng))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Buffer {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Buffer {
        &mut self.buffers[id.0]
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer] {
        &mut self.buffers
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                "set_value",
                format!("{}: expected {:?}, got {:?}", p.name, p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}
