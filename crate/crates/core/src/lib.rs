pub mod adversarial;
pub mod autograd;
pub mod backbone;
pub mod cluster;
pub mod cmoe;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod transfer;

pub use autograd::{Gradients, Tape, Var};
pub use config::ExperimentConfig;
pub use error::{AcktError, Result};
pub use metrics::EvalReport;
pub use optim::Adam;
pub use params::ParamStore;
pub use tensor::Tensor;
