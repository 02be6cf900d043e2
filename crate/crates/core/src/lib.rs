//! Operator-learning surrogates for stiff chemical kinetics.

pub mod autodiff;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod kinetics;
pub mod losses;
pub mod massmap;
pub mod networks;
pub mod operator;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
