//! Losses, the staged training pipeline, and subject-level evaluation.

mod eval;
mod loss;
mod pipeline;

pub use eval::{
    evaluate, experiment_split, filter_visits, run_experiment, summarize, synthesis_fidelity, EvalReport,
    ExperimentResult, GroupMetrics, MeanStd, SeedSummary,
};
pub use loss::{classification_loss, combined_loss, ClsLoss, PROB_EPS};
pub use pipeline::{
    normalized_visits, stage_classifier, stage_diffusion, synthesize, task_cohort, train_pipeline, ClassifierConfig,
    ClassifierOutput, DiffusionConfig, EpochLog, LossConfig, PipelineConfig, PipelineOutput, TrainingLog,
};
