//! Two-stage progressive distillation of a conditional rectified-flow model
//! on a synthetic sequence-generation task: a many-step flow-matching teacher
//! is compressed into a 4-step student by distribution matching, then into a
//! single-step generator by staged adversarial distillation with dynamic
//! timestep sampling and self-compare regularization.

pub mod condnet;
pub mod dmd;
pub mod error;
pub mod flowcore;
pub mod metrics;
pub mod pad;
pub mod params;
pub mod rng;
pub mod tape;
pub mod toydata;

pub use condnet::{build_context, CondTokens, ContextConfig, ModelDims, NetConfig, VelocityField, VelocityNet};
pub use dmd::{run_dmd, x0_from_v, DmdConfig, DmdOutput};
pub use error::{Error, Result, TrainEnd};
pub use flowcore::{
    forward_diffuse, sample, sample_final_step_grad, train_teacher, NfeCounter, Schedule,
    TeacherConfig, Timestep,
};
pub use metrics::{energy_distance, frechet_distance, measure, sync_correlation, GaussianFit, MetricsReport};
pub use pad::{
    adv_losses, dynamic_sample, gen_reference, reg_penalty, run_progressive, run_stage,
    DiscriminatorState, LossKind, PadOutput, RefGenerator, StageArtifact, StageConfig,
};
pub use params::{Adam, Params};
pub use toydata::{frame_align, generate, read_dataset, synthesize_sample, write_dataset, DataSpec, Dataset, Sample};
