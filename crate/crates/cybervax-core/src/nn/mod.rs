//! A small reverse-mode autodiff engine sized for this project.
//!
//! Networks are built define-by-run on a [`graph::Graph`] tape whose values
//! are dense `N×C×H×W` arrays. The engine is generic over the element type
//! so the exact code that trains in f32 can be checked against f64
//! finite-difference oracles in tests.

pub mod adam;
pub mod archive;
pub mod conv;
pub mod graph;
pub mod params;

pub use adam::{Adam, AdamConfig};
pub use graph::{Graph, NodeId, PadMode};
pub use params::{GraphParams, ParamStore};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

/// Element type the engine runs on. `f32` is the training dtype; `f64`
/// exists so gradient checks can run the identical code path at a
/// precision where finite differences are trustworthy.
pub trait Scalar:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    fn of_f32(v: f32) -> Self;
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn as_f32(self) -> f32 {
        self.as_f64() as f32
    }
}

impl Scalar for f32 {
    fn of_f32(v: f32) -> Self {
        v
    }
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of_f32(v: f32) -> Self {
        v as f64
    }
    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}
