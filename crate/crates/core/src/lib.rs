pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod harness;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod training;

pub use autograd::{Grads, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Real, Tensor};
