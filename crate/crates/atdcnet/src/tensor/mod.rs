//! Minimal reverse-mode automatic differentiation engine.
//!
//! A [`Tape`] records every operation of a forward pass in topological
//! order; [`Tape::backward`] replays the record once in reverse and
//! accumulates gradients into the leaf tensors that requested them.
//! The op vocabulary is exactly what the enhancement network and its
//! losses need; there is no general broadcasting and no graph rewriting.
//!
//! The engine is generic over [`Elem`] (`f32` by default, `f64` for
//! finite-difference gradient verification) and fully deterministic:
//! fixed loop order, no atomics, reductions always in the same sequence.

mod adam;
mod conv;
mod elem;
mod params;
mod tape;

pub mod gradcheck;

#[cfg(test)]
mod tests;

pub use adam::{adam_step, AdamParams, AdamState};
pub use elem::Elem;
pub use params::{BoundParams, ParamEntry, ParamKind, ParamStore};
pub use tape::{BnMode, Tape, TensorId};

/// Tensor extents, outermost first ([N,C,H,W] for feature maps).
pub type Shape = Vec<usize>;

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward target must be a scalar, got {numel} elements")]
    NotScalar { numel: usize },
    #[error("tensor does not belong to this tape")]
    DetachedGraph,
    #[error("batch norm in train mode needs at least 2 values per channel")]
    DegenerateBatch,
}

pub(crate) fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}
