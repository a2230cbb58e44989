pub mod arraysim;
pub mod beamform;
pub mod combinator;
pub mod error;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod segeval;
pub mod seqmodel;
pub mod signal;
pub mod spectral;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
