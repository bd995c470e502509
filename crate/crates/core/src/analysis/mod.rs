//! Comparisons between an original and an erased encoder: representation
//! shift, top-k unit overlap, 2-D projection, and sweeps over supervision
//! point, seed and coefficient.

mod jaccard;
mod pca;
mod report;
mod shift;
mod sweep;

pub use jaccard::{jaccard_index, jaccard_probes, jaccard_topk, neuron_scores, top_k_indices, JaccardEntry, DEFAULT_TOP_K};
pub use pca::{pca_project_2d, prompt_embedding, ProjectedPoint, Projection};
pub use report::{analyze, to_csv, to_jsonl, AnalysisReport, CsvRecord, ToRecords};
pub use shift::{
    final_probe, representation_shift, shift_probes, token_mean_distances, PromptRole, ShiftEntry,
    ShiftReport,
};
pub use sweep::{
    default_grid, layer_grid, run_setting, summarize, sweep, SweepAxis, SweepBase, SweepOutcome,
    SweepPrompts, SweepResult, SweepRow, SweepSetting, COEFFICIENT_GRID, SEED_GRID,
};
