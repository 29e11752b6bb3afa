pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod math;
pub mod model;
pub mod nn;
pub mod rl;
pub mod rng;
pub mod run;
pub mod scan;
pub mod ssm;
pub mod tensor;

pub use autodiff::{Activation, Elementwise, Reduce, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
