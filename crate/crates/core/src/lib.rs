pub mod autodiff;
pub mod encoders;
pub mod error;
pub mod evaluator;
pub mod matching;
pub mod model;
pub mod objectives;
pub mod synthcorpus;
pub mod tensor;
pub mod tensorfile;
pub mod trainer;
pub mod uncertainty;
pub mod verify;

pub use autodiff::{Graph, GraphError, Var};
pub use error::{Error, FormatError, Result};
pub use model::{Modality, ModelConfig, ModelParams};
pub use tensor::{DType, Scalar, Tensor};
