pub mod baselines;
pub mod checkpoint;
pub mod equivariance;
pub mod error;
pub mod eval;
pub mod field;
pub mod fitting;
pub mod geometry;
pub mod gradcheck;
pub mod hdr_io;
pub mod inverse_render;
pub mod losses;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
