use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{kernels, Exec, Tensor};

use super::PredictionSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub eb_f1: f64,
    pub mi_f1: f64,
    pub ma_f1: f64,
}

/// `2 tp / (2 tp + fp + fn)`, with the empty-vs-empty case scored 1.
fn f1_ratio(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        1.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

fn binary_pair(p: &PredictionSet) -> Result<(&Tensor, &Tensor)> {
    let pred = p
        .thresholded
        .as_ref()
        .ok_or_else(|| Error::Contract("predictions have not been thresholded".into()))?;
    Ok((&p.truth, pred))
}

pub fn f1_scores(p: &PredictionSet) -> Result<F1Scores> {
    let (truth, pred) = binary_pair(p)?;
    let (n, l) = (truth.shape()[0], truth.shape()[1]);
    if n == 0 || l == 0 {
        return Err(Error::EmptyAxis { op: "f1_scores" });
    }
    let mut eb = 0.0;
    let (mut tp, mut fp, mut fn_) = (vec![0usize; l], vec![0usize; l], vec![0usize; l]);
    for i in 0..n {
        let (y, yh) = (truth.row(i), pred.row(i));
        let (mut t, mut f, mut m) = (0, 0, 0);
        for j in 0..l {
            match (y[j] > 0.5, yh[j] > 0.5) {
                (true, true) => {
                    t += 1;
                    tp[j] += 1;
                }
                (false, true) => {
                    f += 1;
                    fp[j] += 1;
                }
                (true, false) => {
                    m += 1;
                    fn_[j] += 1;
                }
                (false, false) => {}
            }
        }
        eb += f1_ratio(t, f, m);
    }
    let sum = |v: &[usize]| v.iter().sum::<usize>();
    let mi = f1_ratio(sum(&tp), sum(&fp), sum(&fn_));
    let ma = (0..l).map(|j| f1_ratio(tp[j], fp[j], fn_[j])).sum::<f64>() / l as f64;
    Ok(F1Scores {
        eb_f1: eb / n as f64,
        mi_f1: mi,
        ma_f1: ma,
    })
}

/// Fraction of cells where the thresholded prediction equals the truth.
pub fn hamming_accuracy(p: &PredictionSet) -> Result<f64> {
    let (truth, pred) = binary_pair(p)?;
    if truth.is_empty() {
        return Err(Error::EmptyAxis { op: "hamming_accuracy" });
    }
    let agree = truth
        .data()
        .iter()
        .zip(pred.data())
        .filter(|(a, b)| (**a > 0.5) == (**b > 0.5))
        .count();
    Ok(agree as f64 / truth.len() as f64)
}

/// Mann-Whitney AUC of one score column. Ties count one half. Returns
/// `None` when the column has no positives or no negatives.
pub fn auc(scores: &[f64], truth: &[f64]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // wins2 = 2 * (positive > negative pairs) + (tied pairs)
    let (mut wins2, mut neg_below, mut pos_total) = (0u128, 0u128, 0u128);
    let mut g = 0;
    while g < order.len() {
        let mut end = g;
        let (mut gp, mut gn) = (0u128, 0u128);
        while end < order.len() && scores[order[end]] == scores[order[g]] {
            if truth[order[end]] > 0.5 {
                gp += 1;
            } else {
                gn += 1;
            }
            end += 1;
        }
        wins2 += 2 * gp * neg_below + gp * gn;
        neg_below += gn;
        pos_total += gp;
        g = end;
    }
    let pairs = pos_total * neg_below;
    if pairs == 0 {
        return None;
    }
    Some(wins2 as f64 / (2 * pairs) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucSummary {
    /// One entry per label; `None` marks a label skipped for lacking
    /// positives or negatives.
    pub per_label: Vec<Option<f64>>,
    pub median: f64,
}

impl AucSummary {
    pub fn skipped(&self) -> Vec<usize> {
        (0..self.per_label.len()).filter(|&j| self.per_label[j].is_none()).collect()
    }
}

pub(crate) fn column(t: &Tensor, j: usize) -> Vec<f64> {
    (0..t.shape()[0]).map(|i| t.get2(i, j)).collect()
}

pub fn auc_per_label(p: &PredictionSet) -> Result<AucSummary> {
    let l = p.truth.shape()[1];
    let per_label = kernels::map_indices(Exec::default(), l, |j| {
        auc(&column(&p.probabilities, j), &column(&p.truth, j))
    });
    let mut valid: Vec<f64> = per_label.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(Error::MetricUnavailable(
            "every label lacks either positives or negatives".into(),
        ));
    }
    Ok(AucSummary {
        per_label,
        median: crate::data::median(&mut valid),
    })
}

/// Metrics that need a decision threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMetric {
    EbF1,
    MiF1,
    MaF1,
    Hamming,
}

impl ThresholdMetric {
    pub const ALL: [ThresholdMetric; 4] = [
        ThresholdMetric::EbF1,
        ThresholdMetric::MiF1,
        ThresholdMetric::MaF1,
        ThresholdMetric::Hamming,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ThresholdMetric::EbF1 => "ebF1",
            ThresholdMetric::MiF1 => "miF1",
            ThresholdMetric::MaF1 => "maF1",
            ThresholdMetric::Hamming => "HA",
        }
    }

    pub fn evaluate(self, p: &PredictionSet) -> Result<f64> {
        Ok(match self {
            ThresholdMetric::Hamming => hamming_accuracy(p)?,
            m => {
                let f = f1_scores(p)?;
                match m {
                    ThresholdMetric::EbF1 => f.eb_f1,
                    ThresholdMetric::MiF1 => f.mi_f1,
                    _ => f.ma_f1,
                }
            }
        })
    }
}

/// `{0.05, 0.10, ..., 0.95}`.
pub fn default_grid() -> Vec<f64> {
    (1..20).map(|i| i as f64 / 20.0).collect()
}

/// The grid value maximizing `metric`; ties go to the smaller threshold.
pub fn select_threshold(p: &PredictionSet, metric: ThresholdMetric, grid: &[f64]) -> Result<(f64, f64)> {
    if grid.is_empty() {
        return Err(Error::Parameter("threshold grid is empty".into()));
    }
    let mut best: Option<(f64, f64)> = None;
    for &tau in grid {
        let v = metric.evaluate(&p.with_threshold(tau))?;
        best = match best {
            Some((bt, bv)) if bv > v || (bv == v && bt <= tau) => Some((bt, bv)),
            _ => Some((tau, v)),
        };
    }
    Ok(best.expect("grid nonempty"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub eb_f1: f64,
    pub mi_f1: f64,
    pub ma_f1: f64,
    pub hamming: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            eb_f1: 0.5,
            mi_f1: 0.5,
            ma_f1: 0.5,
            hamming: 0.5,
        }
    }
}

impl Thresholds {
    pub fn get(&self, m: ThresholdMetric) -> f64 {
        match m {
            ThresholdMetric::EbF1 => self.eb_f1,
            ThresholdMetric::MiF1 => self.mi_f1,
            ThresholdMetric::MaF1 => self.ma_f1,
            ThresholdMetric::Hamming => self.hamming,
        }
    }

    fn set(&mut self, m: ThresholdMetric, tau: f64) {
        match m {
            ThresholdMetric::EbF1 => self.eb_f1 = tau,
            ThresholdMetric::MiF1 => self.mi_f1 = tau,
            ThresholdMetric::MaF1 => self.ma_f1 = tau,
            ThresholdMetric::Hamming => self.hamming = tau,
        }
    }
}

/// Picks one threshold per metric on validation predictions.
pub fn select_thresholds(p: &PredictionSet, grid: &[f64]) -> Result<Thresholds> {
    let mut t = Thresholds::default();
    for m in ThresholdMetric::ALL {
        t.set(m, select_threshold(p, m, grid)?.0);
    }
    Ok(t)
}

/// The thresholded classification metrics, each at its own threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub eb_f1: f64,
    pub mi_f1: f64,
    pub ma_f1: f64,
    pub hamming: f64,
    pub auc: Option<AucSummary>,
    pub thresholds: Thresholds,
}

pub fn classification_report(p: &PredictionSet, thresholds: &Thresholds) -> Result<ClassificationReport> {
    let at = |m: ThresholdMetric| m.evaluate(&p.with_threshold(thresholds.get(m)));
    let auc = match auc_per_label(p) {
        Ok(a) => Some(a),
        Err(Error::MetricUnavailable(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(ClassificationReport {
        eb_f1: at(ThresholdMetric::EbF1)?,
        mi_f1: at(ThresholdMetric::MiF1)?,
        ma_f1: at(ThresholdMetric::MaF1)?,
        hamming: at(ThresholdMetric::Hamming)?,
        auc,
        thresholds: *thresholds,
    })
}
