//! Configuration, model assembly, training, evaluation and verification.

pub mod config;
pub mod eval;
pub mod model;
pub mod train;
pub mod verify;

pub use config::ExperimentConfig;
pub use eval::{evaluate, evaluate_checkpoint, write_eval, EvalReport};
pub use model::Model;
pub use train::{train, TrainReport, Trainer};
pub use verify::{verify, VerifyReport, SUITES};
