//! Detection metrics, perturbations and latent-space diagnostics.

pub mod analysis;
pub mod latent;
pub mod metrics;
pub mod perturb;

pub use analysis::{analyze_latent, default_suite, embed_items, score_items, AnalysisItem, FamilyMpd, LatentReport};
pub use latent::{
    centroid_axis, dim_std, heatmap_plot, mpd, ordering_along, ordering_statistic, ordering_statistic_with, pd_per_item, perturbed_distance,
    scatter_plot, spearman, write_points_csv, EmbeddingDump, EmbeddingRow, PdForm, DUMP_VERSION,
};
pub use metrics::{auc, detection_metrics, eer, roc_points, video_auc, DetectionMetrics, ScoreSet, ScoredItem};
pub use perturb::{perturb, PerturbationFamily, PerturbationSpec};
