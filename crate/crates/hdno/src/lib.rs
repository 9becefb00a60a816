pub mod checkpoint;
pub mod decode;
pub mod disc;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod latent;
pub mod model;
pub mod nets;
pub mod rng;
pub mod sim;
pub mod trainer;
pub mod vocab;

pub use error::{HdnoError, Result};
