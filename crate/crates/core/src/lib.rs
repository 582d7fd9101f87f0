//! Invariant integration over rotation-equivariant convolutional features.
//!
//! The crate is organized bottom-up: [`tensor`] and [`sampling`] provide
//! arrays and bilinear sampling, [`monomial`] the monomial algebra and input
//! shift, [`iil`] the invariant integration layer, [`backbone`] the `C_N`
//! equivariant convolutions, [`network`] the assembled classifiers,
//! [`selection`] closed-form monomial selection, and [`harness`] data,
//! configuration and the two-phase training procedure.

pub mod backbone;
pub mod error;
pub mod harness;
pub mod iil;
pub mod monomial;
pub mod network;
pub mod sampling;
pub mod selection;
pub mod tensor;

pub use error::{Error, Result};
pub use iil::{ii_backward, ii_forward, IILayerState, RotationGroupSampling};
pub use monomial::{Factor, Monomial, ShiftStats};
pub use network::{Head, Network};
pub use sampling::{BoundaryPolicy, SampleCoord};
pub use tensor::Tensor;
