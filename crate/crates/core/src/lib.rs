pub mod checkpoint;
pub mod ctc;
pub mod decode;
pub mod data;
pub mod error;
pub mod fusion;
pub mod lm;
pub mod model;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod s2s;
pub mod score;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
