//! Learnable parameters: a value tensor plus a same-shape gradient
//! accumulator, owned by a [`ParamStore`] and addressed by [`ParamId`].

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ParamKind {
    /// Convolution kernel; initialized uniform in +-sqrt(6/fan_in).
    Kernel,
    /// Bias vector; zero-initialized.
    Bias,
    /// Norm gain; ones.
    Gain,
    /// Norm shift; zeros.
    Shift,
    /// Free scalar (e.g. an attention temperature exponent).
    Scalar,
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Flat set of named parameters. Creation order is deterministic and is the
/// order used by the checkpoint format and the optimizer.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn register(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name,
            kind,
            value,
            grad,
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.grad.shape() != grad.shape() {
            return Err(Error::ShapeMismatch {
                context: "parameter gradient",
                lhs: p.grad.shape().to_string(),
                rhs: grad.shape().to_string(),
            });
        }
        for (g, d) in p.grad.data_mut().iter_mut().zip(grad.data()) {
            *g += d;
        }
        Ok(())
    }
}

/// Zero-mean uniform fan-in init: every entry drawn from
/// U(-sqrt(6/fan_in), sqrt(6/fan_in)), fan_in = in_channels * kh * kw.
pub fn uniform_fan_in(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    let fan_in = (shape.c * shape.h * shape.w).max(1);
    uniform_bounded(shape, (6.0 / fan_in as f32).sqrt(), rng)
}

/// Contractive init for recurrent channel mixes: U(-0.4/sqrt(C), ..) keeps
/// the recurrence matrix spectral norm well below 1, so directional scans
/// stay stable over long rows/columns. Always within the fan-in bound.
pub fn uniform_recurrent(channels: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let shape = Shape::new(channels, channels, 1, 1);
    uniform_bounded(shape, 0.4 / (channels.max(1) as f32).sqrt(), rng)
}

pub fn uniform_bounded(shape: Shape, bound: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-bound..=bound);
    }
    t
}
