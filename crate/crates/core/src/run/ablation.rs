//! Depth and graph ablations. Each configuration trains and evaluates
//! independently with the same seed; rows come back in a fixed order no
//! matter how the runs were scheduled.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::Result;
use crate::label_decoder::GraphMode;
use crate::numerics::{kernels, Exec};

use super::checkpoint::{self, CheckpointMeta};
use super::config::RunConfig;
use super::train::{evaluate, train, Prepared};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// Decoder depth or graph mode.
    pub setting: String,
    pub value: Option<f64>,
    /// `ok`, or `failed:<category>` when the run errored.
    pub status: String,
    pub checkpoint: Option<PathBuf>,
}

fn run_one(cfg: &RunConfig, prepared: &Prepared, metric: &str, dir: Option<&Path>) -> Result<(f64, Option<PathBuf>)> {
    let outcome = train(cfg, prepared)?;
    let eval = evaluate(&outcome.best, prepared, Split::Test, cfg)?;
    let saved = match dir {
        Some(d) => {
            let meta = CheckpointMeta {
                epoch: outcome.best_epoch,
                standardizer: prepared.standardizer.clone(),
                thresholds: Some(eval.thresholds),
                feature_names: prepared.dataset.feature_names.clone(),
                label_names: prepared.dataset.label_names.clone(),
            };
            checkpoint::save(d, &outcome.best, cfg, meta)?;
            Some(d.to_path_buf())
        }
        None => None,
    };
    let value = eval
        .report
        .get(metric)
        .ok_or_else(|| crate::Error::MetricUnavailable(format!("{metric} was not computed")))?;
    Ok((value, saved))
}

fn row(setting: String, r: Result<(f64, Option<PathBuf>)>) -> AblationRow {
    match r {
        Ok((v, ck)) => AblationRow {
            setting,
            value: Some(v),
            status: "ok".into(),
            checkpoint: ck,
        },
        Err(e) => AblationRow {
            setting,
            value: None,
            status: format!("failed:{}", e.category()),
            checkpoint: None,
        },
    }
}

/// Test maF1 for each decoder depth, rows in ascending depth. Checkpoints
/// go to `save_root/depth_<n>` when a root is given.
pub fn ablate_depth(cfg: &RunConfig, prepared: &Prepared, save_root: Option<&Path>) -> Vec<AblationRow> {
    let mut depths = cfg.depths.clone();
    depths.sort_unstable();
    depths.dedup();
    kernels::map_indices(Exec::default(), depths.len(), |i| {
        let n = depths[i];
        let mut c = cfg.clone();
        c.n = n;
        let dir = save_root.map(|r| r.join(format!("depth_{n}")));
        row(n.to_string(), run_one(&c, prepared, "maF1", dir.as_deref()))
    })
}

pub const GRAPH_MODES: [GraphMode; 2] = [GraphMode::Complete, GraphMode::Prior];

/// Test medianAUC on the complete and the prior label graph.
pub fn ablate_graph(cfg: &RunConfig, prepared: &Prepared, save_root: Option<&Path>) -> Vec<AblationRow> {
    kernels::map_indices(Exec::default(), GRAPH_MODES.len(), |i| {
        let mode = GRAPH_MODES[i];
        let mut c = cfg.clone();
        c.graph = mode;
        let dir = save_root.map(|r| r.join(format!("graph_{mode}")));
        row(mode.to_string(), run_one(&c, prepared, "medianAUC", dir.as_deref()))
    })
}

pub fn ablation_csv(key: &str, metric: &str, rows: &[AblationRow]) -> String {
    let mut s = format!("{key},{metric},status\n");
    for r in rows {
        let v = r.value.map_or("NA".to_string(), |v| format!("{v:?}"));
        s.push_str(&format!("{},{v},{}\n", r.setting, r.status));
    }
    s
}
