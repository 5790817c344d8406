//! Lattice-symmetry attention masks and the models that learn them.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod autodiff;
pub mod dft;
pub mod error;
pub mod harness;
pub mod experts;
pub mod lattice;
pub mod mask;
pub mod matrix;
pub mod model;
pub mod smoothing;
pub mod taskgen;
pub mod train;

pub use error::{Error, Result};
pub use experts::{ExpertFamily, ExpertStack, GateVector};
pub use lattice::{apply_action, LatticeAction, LatticeShape, ReflectAxis, ScaleDirection};
pub use mask::{AttentionMask, ShiftVector};
pub use matrix::DenseMatrix;
