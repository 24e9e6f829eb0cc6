//! Training, checkpoints, decoding and tag cleaning.

pub mod checkpoint;
pub mod decode;
pub mod tagclean;
pub mod train;

pub use decode::{
    argmax, beam_search, decode_ids, greedy, BeamConfig, DecodeConfig, DecodeMode, Hypothesis, ModelCaptioner,
    ModelStepper, StepModel,
};
pub use checkpoint::{Checkpoint, CheckpointHeader, ParamEntry, Progress};
pub use tagclean::{pick_entity, tag_clean, TagCleanOutput};
pub use train::{derive_seed, log_hash, per_token_loss, teacher_forced_loss, LogRecord, StopReason, TrainConfig, TrainOutcome, Trainer};
