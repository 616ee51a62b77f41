//! Siamese 3D convolutional network for scan temporal order (STO) and
//! relative interval (RISI) classification, trained on CPU.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod model;
pub mod real;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{Architecture, EncoderConfig, StageConfig, TensorSpec, N_CATEGORIES, N_OUTPUTS};
pub use error::{NetError, Result};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, ParamSet};
pub use loss::{risi_loss, sto_loss, total_loss, ActivationVector, LossWeights};
pub use model::{LossGrad, Mode, Model, QuadTargets};
pub use real::Real;
pub use train::{history_csv, train, EpochRecord, TrainConfig, TrainOutcome, Trainer, ValidationSet};
