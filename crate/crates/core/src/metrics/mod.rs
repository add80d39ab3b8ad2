//! Evaluation metrics for multi-label predictions.

mod classification;
mod ecology;
mod report;

pub use classification::{
    auc, auc_per_label, classification_report, default_grid, f1_scores, hamming_accuracy,
    select_threshold, select_thresholds, AucSummary, ClassificationReport, F1Scores,
    ThresholdMetric, Thresholds,
};
pub use ecology::{
    average_ranks, baselga, community_metrics, eco_report, occurrence_metrics, percentile,
    richness_metrics, sample_matrix, sample_pairs, spearman, species_calibration,
    CommunityReport, Dissimilarity, EcoReport, Quad, SamplingConfig, CALIBRATION_BINS,
    PAIR_STREAM,
};
pub use report::MetricReport;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Probabilities and binary truth of the same `[N, L]` shape, optionally
/// with a thresholded copy of the probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub probabilities: Tensor,
    pub truth: Tensor,
    pub thresholded: Option<Tensor>,
}

impl PredictionSet {
    pub fn new(probabilities: Tensor, truth: Tensor) -> Result<Self> {
        if probabilities.shape() != truth.shape() || truth.rank() != 2 {
            return Err(Error::shape("prediction set", probabilities.shape(), truth.shape()));
        }
        if truth.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Validation("truth must be binary".into()));
        }
        if probabilities.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation("probabilities must lie in [0, 1]".into()));
        }
        Ok(Self {
            probabilities,
            truth,
            thresholded: None,
        })
    }

    /// Copy with `thresholded = probabilities >= tau`.
    pub fn with_threshold(&self, tau: f64) -> Self {
        let data = self
            .probabilities
            .data()
            .iter()
            .map(|&p| if p >= tau { 1.0 } else { 0.0 })
            .collect();
        let t = Tensor::new(self.probabilities.shape().to_vec(), data).expect("same shape");
        Self {
            probabilities: self.probabilities.clone(),
            truth: self.truth.clone(),
            thresholded: Some(t),
        }
    }

    /// Uses an already binary prediction matrix.
    pub fn with_binary(mut self, predicted: Tensor) -> Result<Self> {
        if predicted.shape() != self.truth.shape() {
            return Err(Error::shape("prediction set", predicted.shape(), self.truth.shape()));
        }
        self.thresholded = Some(predicted);
        Ok(self)
    }

    pub fn samples(&self) -> usize {
        self.truth.shape()[0]
    }

    pub fn labels(&self) -> usize {
        self.truth.shape()[1]
    }
}

#[cfg(test)]
mod tests;
