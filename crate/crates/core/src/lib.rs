//! Terrain-aware vehicle kinodynamics at desk scale: a procedural rock-bed
//! simulator, a sliced-distance patch autoencoder, a masked transformer
//! context encoder, downstream task heads, and an experiment harness.

pub mod ad;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod context;
pub mod data;
pub mod e2e;
pub mod harness;
pub mod heads;
pub mod nn;
pub mod error;
pub mod rng;
pub mod sim;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default scalar for training and inference.
pub type Real = f32;
/// Wide scalar for gradient verification and the vehicle oracle.
pub type Wide = f64;
