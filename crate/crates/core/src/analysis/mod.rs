//! Evaluation and downstream analysis: per-class metrics, k-means, PCA,
//! cluster-by-class enrichment and partition agreement.

mod cluster;
mod export;
mod metrics;
mod pca;

pub use cluster::{adjusted_rand_index, kmeans_cluster, kmeans_restarts, niche_enrichment, ClusterResult, EnrichmentTable};
pub use export::{enrichment_csv, metrics_csv, projection_csv, MetricsSummary, METRICS_HEADER};
pub use metrics::{
    confusion_matrix, default_class_names, f1_score, macro_f1, precision_recall_f1, ClassMetric, ClassMetrics,
    ConfusionMatrix,
};
pub use pca::{pca_project, PcaResult};

/// Default cluster count for latent-space clustering.
pub const DEFAULT_K: usize = 6;
pub const DEFAULT_N_INIT: usize = 10;
