//! Accuracy, confusion, compactness and ablation reporting.

mod ablation;
mod metrics;

pub use ablation::{ablation_grid, AblationCell, AblationRow, AblationTable, GridSpec};
pub use metrics::{
    classify, compactness, dump_embeddings, evaluate, mean_compactness, predict, Compactness, CompactnessRow,
    EvalReport, LanguageAccuracy, Prediction, SplitReport,
};
