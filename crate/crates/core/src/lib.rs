//! Divergence-free per-particle velocity fields learned from trajectories.
//!
//! The math modules ([`geometry`], [`velocity_field`], [`networks`],
//! [`transport`]) are generic over [`Scalar`]; training, scene generation,
//! segmentation and file I/O run in `f64`.

pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod networks;
pub mod optim;
pub mod scalar;
pub mod scenegen;
pub mod segmentation;
pub mod training;
pub mod transport;
pub mod velocity_field;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Vec3 = geometry::Vector3<f64>;
pub type Mat3 = geometry::Matrix3<f64>;
pub type Quat = geometry::UnitQuaternion<f64>;
pub type Kernel = transport::Kernel<f64>;
pub type KernelSet = transport::KernelSet<f64>;
pub type Networks = networks::Networks<f64>;
pub type Gradients = networks::Gradients<f64>;
