//! SIM(3)-equivariant point-cloud completion.
//!
//! The library is organized around a small set of building blocks:
//!
//! - [`geometry`]: the SIM(3) similarity group (scale, rotation, translation),
//!   its action on point clouds and vector features, and transform sampling.
//! - [`tensor`] / [`tape`]: a minimal dense tensor and a reverse-mode
//!   autodiff tape that every layer forward is written against.
//! - [`vn`]: vector-neuron primitives (VN-Linear with the row-sum constraint,
//!   VN-ReLU / VN-LeakyReLU, VN-Max).
//! - [`blocks`]: the canonicalize -> attend -> restore transformer block that
//!   keeps features equivariant end to end.
//! - [`extract`]: farthest-point sampling, k-NN graphs, and the VN edge
//!   convolution used for patch embedding.
//! - [`model`]: the full coarse-to-fine completion network, plus a
//!   deliberately non-equivariant scalar control network for protocol
//!   comparisons.
//! - [`train`]: Chamfer losses, Adam with decoupled weight decay, and the
//!   training loop; [`toy`] generates synthetic shape/crop datasets.
//! - [`metrics`]: CD-l1, F-score, Fidelity, MMD, and the de-biased
//!   evaluation protocol; [`audit`] measures empirical equivariance error.
//!
//! All numeric code is generic over the scalar type through [`Real`];
//! concrete `f64` aliases are exported at the crate root since that is the
//! precision the CLI and the test suites run at.

pub mod audit;
pub mod blocks;
pub mod control;
pub mod extract;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn_search;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod toy;
pub mod train;
pub mod vn;

use std::fmt;

/// Scalar abstraction for all numeric code: `f32` or `f64`.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + num_traits::NumAssign
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`, used for literals and RNG draws.
    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to any Real")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Default scalar for the CLI and test suites.
pub type Scalar = f64;

pub type PointCloud = geometry::PointCloud<Scalar>;
pub type Sim3Transform = geometry::Sim3Transform<Scalar>;
pub type Tensor = tensor::Tensor<Scalar>;
pub type Tape = tape::Tape<Scalar>;
pub type ParamStore = params::ParamStore<Scalar>;
pub type CompletionModel = model::CompletionModel<Scalar>;
pub type ScalarControlModel = control::ScalarControlModel<Scalar>;
