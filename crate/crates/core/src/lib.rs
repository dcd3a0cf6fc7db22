pub mod autodiff;
pub mod compare;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod exec;
pub mod losses;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod trials;

pub use autodiff::{finite_difference_check, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use losses::{LossTerms, Mode};
pub use model::{Checkpoint, ModelBundle, ModelConfig, ParamGroup};
pub use tensor::Tensor;
