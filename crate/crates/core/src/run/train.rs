use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, Split, SplitSpec, Standardizer};
use crate::error::{Error, Result};
use crate::label_decoder::{build_prior_graph, GraphMode, LabelGraph};
use crate::losses::LossBreakdown;
use crate::metrics::{
    classification_report, eco_report, select_threshold, select_thresholds, MetricReport,
    PredictionSet, ThresholdMetric, Thresholds,
};
use crate::numerics::{AdamConfig, AdamState, Exec, Tape, Tensor};

use super::config::{DataFormat, RunConfig};
use super::model::{HotVae, ModelSpec};

/// Random streams derived from the run seed.
pub const INIT_STREAM: u64 = 0;
pub const SHUFFLE_STREAM: u64 = 1;
pub const NOISE_STREAM: u64 = 2;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// A split, standardized dataset ready for training.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: Dataset,
    pub standardizer: Option<Standardizer>,
}

impl Prepared {
    pub fn part(&self, split: Split) -> (Tensor, Tensor) {
        self.dataset.subset(split)
    }
}

pub fn load_configured(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg
        .data
        .as_ref()
        .ok_or_else(|| Error::Parameter("no data path configured".into()))?;
    let format = match cfg.format {
        DataFormat::Auto => data::format_for(path, cfg.num_labels)?,
        DataFormat::Csv => data::Format::Csv,
        DataFormat::Arff => data::Format::Arff {
            num_labels: cfg
                .num_labels
                .ok_or_else(|| Error::Parameter("ARFF input requires num_labels".into()))?,
        },
    };
    data::load_dataset(path, format)
}

pub fn split_spec(cfg: &RunConfig) -> Result<SplitSpec> {
    match (&cfg.train_idx, &cfg.val_idx, &cfg.test_idx) {
        (None, None, None) => Ok(SplitSpec::Ratios {
            train: cfg.split[0],
            val: cfg.split[1],
            test: cfg.split[2],
        }),
        (Some(a), Some(b), Some(c)) => Ok(SplitSpec::Indices {
            train: data::read_index_file(a)?,
            val: data::read_index_file(b)?,
            test: data::read_index_file(c)?,
        }),
        _ => Err(Error::Parameter("give all three split index files or none".into())),
    }
}

/// Splits and standardizes an in-memory dataset per `cfg`.
pub fn prepare_dataset(ds: Dataset, cfg: &RunConfig) -> Result<Prepared> {
    let ds = data::make_splits(ds, &split_spec(cfg)?, cfg.seed_or_default())?;
    if ds.indices(Split::Train).is_empty() {
        return Err(Error::Validation("training split is empty".into()));
    }
    if cfg.standardize {
        let (ds, st) = data::standardize(&ds)?;
        Ok(Prepared {
            dataset: ds,
            standardizer: Some(st),
        })
    } else {
        Ok(Prepared {
            dataset: ds,
            standardizer: None,
        })
    }
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    prepare_dataset(load_configured(cfg)?, cfg)
}

/// Label graph for `mode`; the prior graph uses training labels only.
pub fn label_graph(prepared: &Prepared, mode: GraphMode) -> Result<LabelGraph> {
    match mode {
        GraphMode::Complete => Ok(LabelGraph::complete(prepared.dataset.num_labels())),
        GraphMode::Prior => build_prior_graph(&prepared.part(Split::Train).1),
    }
}

pub fn model_spec(cfg: &RunConfig, input_dim: usize, labels: usize) -> ModelSpec {
    ModelSpec {
        input_dim,
        labels,
        dim: cfg.d,
        heads: cfg.effective_heads(),
        layers: cfg.n,
        hidden: cfg.hidden.clone(),
        inject: cfg.inject,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    /// Loss terms averaged over the epoch's training samples.
    pub loss: LossBreakdown,
    /// Validation maF1 at its best grid threshold; `None` without a
    /// validation split.
    pub val_ma_f1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the highest validation maF1, or the
    /// last epoch when there is no validation split.
    pub best: HotVae,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
    pub steps: usize,
}

/// Validation maF1 maximized over the threshold grid.
pub fn validation_ma_f1(model: &HotVae, x: &Tensor, y: &Tensor, grid: &[f64]) -> Result<Option<f64>> {
    if x.shape()[0] == 0 {
        return Ok(None);
    }
    let p = PredictionSet::new(model.predict(x)?, y.clone())?;
    Ok(Some(select_threshold(&p, ThresholdMetric::MaF1, grid)?.1))
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged {
            epoch,
            term: op.to_string(),
        },
        other => other,
    }
}

fn check_finite(epoch: usize, b: &LossBreakdown) -> Result<()> {
    for (name, v) in [("bce", b.bce), ("int", b.int), ("rank", b.rank), ("kl", b.kl), ("total", b.total)] {
        if !v.is_finite() {
            return Err(Error::Diverged {
                epoch,
                term: name.into(),
            });
        }
    }
    Ok(())
}

pub fn train(cfg: &RunConfig, prepared: &Prepared) -> Result<TrainOutcome> {
    train_with(cfg, prepared, Exec::default(), |_| {})
}

/// Trains a fresh model, calling `on_epoch` after every epoch.
pub fn train_with(
    cfg: &RunConfig,
    prepared: &Prepared,
    exec: Exec,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let seed = cfg.seed_or_default();
    let ds = &prepared.dataset;
    let graph = label_graph(prepared, cfg.graph)?;
    let spec = model_spec(cfg, ds.num_features(), ds.num_labels());
    let mut model = HotVae::new(spec, graph, seed)?.with_exec(exec);
    let weights = cfg.weights();
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), &model.store);
    let mut shuffle_rng = stream_rng(seed, SHUFFLE_STREAM);
    let mut noise_rng = stream_rng(seed, NOISE_STREAM);

    let mut train_rows = ds.indices(Split::Train);
    let (val_x, val_y) = prepared.part(Split::Val);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, HotVae)> = None;
    let mut steps = 0;

    for epoch in 1..=cfg.epochs {
        train_rows.shuffle(&mut shuffle_rng);
        let mut sum = LossBreakdown::default();
        let mut seen = 0usize;
        for batch in train_rows.chunks(cfg.batch_size) {
            let (x, y) = ds.gather(batch);
            let mut tape = Tape::with_exec(exec);
            let fwd = model
                .forward_train(&mut tape, &x, &y, &weights, cfg.dropout, &mut noise_rng)
                .map_err(|e| diverged(epoch, e))?;
            let b = fwd.loss.breakdown(&tape);
            check_finite(epoch, &b)?;
            tape.backward(fwd.loss.total).map_err(|e| diverged(epoch, e))?;
            model.store.zero_grads();
            model.store.accumulate_grads(&tape);
            adam.step(&mut model.store)?;
            if model.store.iter().any(|p| !p.value.all_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    term: "parameters".into(),
                });
            }
            let w = batch.len() as f64;
            sum.bce += w * b.bce;
            sum.int += w * b.int;
            sum.rank += w * b.rank;
            sum.kl += w * b.kl;
            sum.total += w * b.total;
            seen += batch.len();
            steps += 1;
            if cfg.max_steps > 0 && steps >= cfg.max_steps {
                break;
            }
        }
        let n = seen.max(1) as f64;
        let loss = LossBreakdown {
            bce: sum.bce / n,
            int: sum.int / n,
            rank: sum.rank / n,
            kl: sum.kl / n,
            total: sum.total / n,
        };
        let val_ma_f1 = validation_ma_f1(&model, &val_x, &val_y, &cfg.thresholds)?;
        let rec = EpochRecord {
            epoch,
            steps,
            loss,
            val_ma_f1,
        };
        on_epoch(&rec);
        log.push(rec);
        let improved = match (&best, val_ma_f1) {
            (None, _) => true,
            (Some((bv, _, _)), Some(v)) => v > *bv,
            (Some(_), None) => true,
        };
        if improved {
            best = Some((val_ma_f1.unwrap_or(f64::NEG_INFINITY), epoch, model.clone()));
        }
        if cfg.max_steps > 0 && steps >= cfg.max_steps {
            break;
        }
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        log,
        steps,
    })
}

pub fn loss_log_csv(log: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,steps,bce,int,rank,kl,total,val_maF1\n");
    for r in log {
        let v = r.val_ma_f1.map_or("NA".to_string(), |v| format!("{v:?}"));
        s.push_str(&format!(
            "{},{},{:?},{:?},{:?},{:?},{:?},{v}\n",
            r.epoch, r.steps, r.loss.bce, r.loss.int, r.loss.rank, r.loss.kl, r.loss.total
        ));
    }
    s
}

/// Output of [`evaluate`]: the flat report plus the pieces it was built from.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricReport,
    pub thresholds: Thresholds,
    pub predictions: PredictionSet,
}

/// Selects per-metric thresholds on the validation split, applies them to
/// `split`, and adds the ecological suite when `cfg.eco` is set.
pub fn evaluate(model: &HotVae, prepared: &Prepared, split: Split, cfg: &RunConfig) -> Result<Evaluation> {
    let (vx, vy) = prepared.part(Split::Val);
    let thresholds = if vx.shape()[0] == 0 {
        Thresholds::default()
    } else {
        select_thresholds(&PredictionSet::new(model.predict(&vx)?, vy)?, &cfg.thresholds)?
    };
    let (x, y) = prepared.part(split);
    if x.shape()[0] == 0 {
        return Err(Error::Validation(format!("{} split is empty", split.name())));
    }
    let predictions = PredictionSet::new(model.predict(&x)?, y)?;
    let mut report = MetricReport::default();
    report.add_classification(&classification_report(&predictions, &thresholds)?);
    if cfg.eco {
        report.add_eco(&eco_report(&predictions, &cfg.sampling()?)?);
    }
    Ok(Evaluation {
        report,
        thresholds,
        predictions,
    })
}
