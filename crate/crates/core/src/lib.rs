pub mod autograd;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod data;
pub mod distillation;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod masking;
pub mod matching;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod training;

pub use config::MalmConfig;
pub use error::{MalmError, Result};
pub use model::Malm;
