//! The distillation model: shared point encoder, per-teacher projector
//! heads, losses, optimizer, pretraining and render-and-distill adaptation.

pub mod adapt;
pub mod encoder;
pub mod head;
pub mod loss;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pretrain;
pub mod schedule;

pub use adapt::{AdaptConfig, AdaptReport, Adaptation};
pub use encoder::{Encoder, EncoderConfig, EncoderInput, InputMode};
pub use head::ProjectorHead;
pub use loss::{info_nce, loss_match, ContrastiveKind, LossOutput, LossWeights};
pub use model::{DistillModel, ModelConfig, ModelGrad, TeacherDim};
pub use nn::Parameters;
pub use optim::{cosine_lr, Adam, OptimConfig};
pub use pretrain::{pretrain, LossHistory, LossRecord, PretrainConfig, TrainScene};
pub use schedule::{loss_total, TeacherEntry, TeacherLoss, TeacherSchedule};
