//! Synthetic two-stage few-shot protocol: data generation, base training,
//! fine-tuning, evaluation and experiment grids.

mod grid;
mod model;
mod synth;
mod train;

pub use grid::{
    evaluate_model, expand_grid, run_cell, run_experiment_grid, seeded_spec, CellMetrics,
    CellOutput, CellSink, EvalSummary, GridAxis, GridCell, GridOptions, GridResults, ResultRecord,
};
pub use model::{
    ClassifierKind, Head, HeadParams, ModelSnapshot, Objective, ParamGroup, PipelineGrads,
    TrainingStage, MODEL_FORMAT_VERSION,
};
pub use synth::{
    generate_dataset, DatasetSnapshot, SimilarPair, Split, SynthSpec, DATASET_FORMAT_VERSION,
};
pub use train::{
    finetune_novel, finetune_split, train_base, ExperimentConfig, ModuleToggles, TrainReport,
};
