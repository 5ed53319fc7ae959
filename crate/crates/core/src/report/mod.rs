//! Evaluation metrics, uncertainty histograms, embedding export and
//! multi-seed aggregation.

mod export;
mod metrics;
mod uncertainty;

use serde::{Deserialize, Serialize};

pub use export::{embed_dataset, export_embeddings, pca_2d, save_embeddings, Embeddings, Pca};
pub use metrics::{binary_auc, compute_metrics, macro_f1, MetricsReport};
pub use uncertainty::{uncertainty_summary, uncertainty_summary_with_bins, UncertaintySummary, DEFAULT_BINS};

/// Mean and sample standard deviation of one metric across runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl MeanSd {
    /// `None` for an empty slice; `sd` is 0 for a single value.
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, sd, n })
    }
}

impl std::fmt::Display for MeanSd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.sd)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub runs: usize,
    pub accuracy: MeanSd,
    pub macro_f1: MeanSd,
    /// Over the runs where AUC was defined.
    pub auc: Option<MeanSd>,
}

pub fn aggregate_reports(reports: &[MetricsReport]) -> Option<AggregateReport> {
    let col = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).collect::<Vec<_>>();
    let aucs: Vec<f64> = reports.iter().filter_map(|r| r.auc).collect();
    Some(AggregateReport {
        runs: reports.len(),
        accuracy: MeanSd::of(&col(|r| r.accuracy))?,
        macro_f1: MeanSd::of(&col(|r| r.macro_f1))?,
        auc: MeanSd::of(&aucs),
    })
}
