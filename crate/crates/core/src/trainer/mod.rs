//! End-to-end training of the graph encoder against a frozen LM, evaluation,
//! the gradient-check suite and the ablation runner.

mod ablate;
mod config;
mod gradcheck;
mod model;
mod train;

pub use ablate::{ablate, summarize, AblationTable, ArmResult, ArmRow, Preset, FIG4_TOKENS};
pub use config::{Fusion, Readout, RunConfig};
pub use gradcheck::{
    first_failure, gradient_check_suite, tiny_config, CoordCheck, GroupCheck, COORDS_PER_GROUP,
    PIPELINE_TOLERANCE,
};
pub use model::{count_encoder_ops, GraphPromptModel, Prepared};
pub use train::{
    answers_match, evaluate, exact_match_accuracy, prepare, train, EvalPoint, RunReport,
    TrainOutcome,
};
