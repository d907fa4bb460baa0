//! Few-shot anomaly detection with a hierarchy of per-scale patch GANs whose
//! discriminators also classify which geometric transformation was applied.

pub mod checkpoint;
pub mod error;
pub mod evalharness;
pub mod imgpipe;
pub mod nets;
pub mod real;
pub mod scorer;
pub mod trainer;
pub mod transforms;

pub use error::{Error, Result};
