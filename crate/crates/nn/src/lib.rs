//! Minimal differentiable-computation substrate: a reverse-mode graph over
//! dense matrices, the layers the voice-conversion models need, a
//! multi-group Adam optimizer, the `ACEVC1` checkpoint container and a
//! finite-difference gradient checker.

pub mod adam;
pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;
mod real;
mod tensor;

pub use adam::Adam;
pub use checkpoint::{Container, EntryData};
pub use error::NnError;
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{CustomBackward, Gradients, Graph, NodeId};
pub use layers::Builder;
pub use params::{Bound, ParamGroup, ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;

/// Fails with the term's name when a loss value is NaN or infinite.
pub fn ensure_finite(name: &str, value: f64) -> Result<f64, NnError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(NnError::NonFinite(name.to_string()))
    }
}
