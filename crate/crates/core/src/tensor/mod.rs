//! Dense f32 tensors and trainable parameters.
//!
//! Values are stored in 32-bit floats; the tape ([`tape::Tape`]) carries its
//! working values and gradient accumulators in 64-bit to keep finite-difference
//! checks tight.

pub mod grad_check;
pub mod nn;
pub mod tape;

use crate::error::{Error, Result};

/// Dense row-major tensor of 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
            requires_grad: false,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::ShapeMismatch {
                context: "tensor construction".into(),
                expected: shape.to_vec(),
                got: vec![data.len()],
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("tensor data", "non-finite value"));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
        })
    }

    pub fn scalar(v: f32) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Stable identifier for a trainable parameter. Ids index gradient
/// accumulators and optimizer state, so they must be allocated once per
/// model bundle via [`ParamIds`].
pub type ParamId = usize;

/// Trainable tensor with a stable id.
#[derive(Debug, Clone)]
pub struct Param {
    pub id: ParamId,
    pub value: Tensor,
}

impl Param {
    pub fn new(ids: &mut ParamIds, mut value: Tensor) -> Param {
        value.requires_grad = true;
        Param {
            id: ids.alloc(),
            value,
        }
    }
}

/// Allocator for parameter ids, shared across every net in one model bundle.
#[derive(Debug, Default)]
pub struct ParamIds {
    next: ParamId,
}

impl ParamIds {
    pub fn new() -> ParamIds {
        ParamIds::default()
    }

    pub fn alloc(&mut self) -> ParamId {
        let id = self.next;
        self.next += 1;
        id
    }

    pub fn count(&self) -> usize {
        self.next
    }
}

/// Named-parameter traversal, used by the optimizer, checkpoints and
/// gradient checks. Implementations must visit in a stable order.
pub trait HasParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, p| n += p.value.numel());
        n
    }

    /// Concatenate all parameter values in visit order.
    fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::new();
        self.visit(&mut |_, p| out.extend_from_slice(&p.value.data));
        out
    }

    /// Overwrite all parameter values from a flat slice in visit order.
    fn load_flat(&mut self, flat: &[f32]) {
        let mut off = 0;
        self.visit_mut(&mut |_, p| {
            let n = p.value.numel();
            p.value.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        });
        assert_eq!(off, flat.len(), "flat parameter vector length mismatch");
    }
}
