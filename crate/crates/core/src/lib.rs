//! Correspondence-free rotational registration of point clouds.
//!
//! An SO(3)-equivariant vector-neuron encoder maps a cloud `P` to a global
//! feature `Q = f(P)` with `f(P R) = f(P) R`. Two clouds are registered by
//! solving the orthogonal Procrustes problem between their features, so the
//! estimate does not depend on the initial pose. An occupancy decoder trains
//! the encoder to describe shape before the joint registration stage.

pub mod cloud_io;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod geom3;
pub mod model;
pub mod register;
pub mod rng;
pub mod selfcheck;
pub mod shapes;
pub mod train;
pub mod vn;

pub use error::{Error, Result};
pub use exec::Exec;
pub use geom3::{Point3, Rotation};
pub use model::{ModelConfig, ModelParams};
pub use rng::RandomStream;
pub use vn::VnFeature;
