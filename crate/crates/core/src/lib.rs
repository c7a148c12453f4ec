pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod inspect;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod rru;
pub mod stim;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
