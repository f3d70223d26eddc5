pub mod checkpoint;
pub mod error;
pub mod flops;
pub mod kernel;
pub mod mex;
pub mod network;
pub mod pretrain;
pub mod selftest;
pub mod similarity;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
