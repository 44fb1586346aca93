//! Debiased preference alignment on finite synthetic preference worlds.
//!
//! Everything is generic over the scalar type; the aliases below fix it to
//! `f64` or `f32`.

pub mod bench;
pub mod ddpo;
pub mod dipo;
pub mod error;
pub mod oracle;
pub mod policy;
pub mod rng;
pub mod scalar;
pub mod semipar;
pub mod stats;
pub mod world;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type World64 = world::World<f64>;
pub type World32 = world::World<f32>;
pub type PolicyTable64 = policy::PolicyTable<f64>;
pub type PolicyTable32 = policy::PolicyTable<f32>;
pub type LogLinearPolicy64 = policy::LogLinearPolicy<f64>;
pub type LogLinearPolicy32 = policy::LogLinearPolicy<f32>;
pub type PrefTable64 = world::PrefTable<f64>;
pub type PrefTable32 = world::PrefTable<f32>;
