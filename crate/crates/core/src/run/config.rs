use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label_decoder::{default_heads, GraphMode, Injection};
use crate::losses::LossWeights;
use crate::metrics::{default_grid, SamplingConfig};

/// Hyperparameter sets explored by the published grid search.
pub mod grid {
    pub const LEARNING_RATE: [f64; 3] = [2e-4, 3e-4, 7.5e-4];
    pub const LAMBDA0: [f64; 1] = [1.0];
    pub const LAMBDA1: [f64; 3] = [0.1, 0.2, 0.3];
    pub const LAMBDA2: [f64; 3] = [1.0, 100.0, 1000.0];
    pub const BETA: [f64; 3] = [1e-5, 1e-4, 0.0];
    pub const EMBEDDING_DIM: [usize; 3] = [100, 200, 512];
    pub const DECODER_LAYERS: [usize; 4] = [2, 3, 4, 5];
    pub const DROPOUT: [f64; 4] = [0.0, 0.1, 0.2, 0.5];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Auto,
    Csv,
    Arff,
}

/// Everything a run needs. Parsed from `key = value` text; every key can
/// also be set with [`RunConfig::set`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub format: DataFormat,
    pub num_labels: Option<usize>,
    pub split: [f64; 3],
    pub train_idx: Option<PathBuf>,
    pub val_idx: Option<PathBuf>,
    pub test_idx: Option<PathBuf>,
    pub standardize: bool,
    pub encoder: String,
    pub hidden: Vec<usize>,
    pub d: usize,
    pub n: usize,
    /// 0 selects the default for `d`.
    pub heads: usize,
    pub lr: f64,
    pub lambda0: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub beta: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many optimizer steps; 0 means no limit.
    pub max_steps: usize,
    pub seed: Option<u64>,
    pub graph: GraphMode,
    pub inject: Injection,
    pub thresholds: Vec<f64>,
    pub eco: bool,
    pub draws: usize,
    pub pairs: usize,
    pub depths: Vec<usize>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            format: DataFormat::Auto,
            num_labels: None,
            split: [0.8, 0.1, 0.1],
            train_idx: None,
            val_idx: None,
            test_idx: None,
            standardize: true,
            encoder: "mlp".into(),
            hidden: vec![256, 512],
            d: 100,
            n: 2,
            heads: 0,
            lr: 7.5e-4,
            lambda0: 1.0,
            lambda1: 0.1,
            lambda2: 1.0,
            beta: 1e-4,
            dropout: 0.1,
            epochs: 200,
            batch_size: 128,
            max_steps: 0,
            seed: None,
            graph: GraphMode::Prior,
            inject: Injection::PerLayer,
            thresholds: default_grid(),
            eco: false,
            draws: 100,
            pairs: 300,
            depths: vec![1, 2, 3, 4, 5],
            out: PathBuf::from("out"),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Parameter(format!("{key}: cannot parse {v:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(Error::Parameter(format!("{key}: expected a boolean, got {other:?}"))),
    }
}

fn opt_path(v: &str) -> Option<PathBuf> {
    let v = v.trim();
    (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Every accepted key, in the order [`RunConfig::to_kv`] writes them.
    pub const KEYS: &'static [&'static str] = &[
        "data", "format", "num_labels", "split", "train_idx", "val_idx", "test_idx", "standardize",
        "encoder", "hidden", "d", "n", "heads", "lr", "lambda0", "lambda1", "lambda2", "beta",
        "dropout", "epochs", "batch_size", "max_steps", "seed", "graph", "inject", "thresholds",
        "eco", "draws", "pairs", "depths", "out",
    ];

    /// Sets one key. Hyphens in `key` are read as underscores.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let k = key.as_str();
        let v = value.trim();
        match k {
            "data" => self.data = opt_path(v),
            "format" => {
                self.format = match v {
                    "auto" => DataFormat::Auto,
                    "csv" => DataFormat::Csv,
                    "arff" | "arff-sparse" => DataFormat::Arff,
                    _ => return Err(Error::Parameter(format!("format: unknown {v:?}"))),
                }
            }
            "num_labels" => self.num_labels = Some(parse_num(k, v)?),
            "split" => {
                let r: Vec<f64> = parse_list(k, v)?;
                self.split = r
                    .try_into()
                    .map_err(|_| Error::Parameter("split: expected three ratios".into()))?;
            }
            "train_idx" => self.train_idx = opt_path(v),
            "val_idx" => self.val_idx = opt_path(v),
            "test_idx" => self.test_idx = opt_path(v),
            "standardize" => self.standardize = parse_bool(k, v)?,
            "encoder" => self.encoder = v.to_string(),
            "hidden" => self.hidden = parse_list(k, v)?,
            "d" | "dim" => self.d = parse_num(k, v)?,
            "n" | "layers" => self.n = parse_num(k, v)?,
            "heads" | "h" => self.heads = parse_num(k, v)?,
            "lr" | "learning_rate" => self.lr = parse_num(k, v)?,
            "lambda0" => self.lambda0 = parse_num(k, v)?,
            "lambda1" => self.lambda1 = parse_num(k, v)?,
            "lambda2" => self.lambda2 = parse_num(k, v)?,
            "beta" => self.beta = parse_num(k, v)?,
            "dropout" => self.dropout = parse_num(k, v)?,
            "epochs" => self.epochs = parse_num(k, v)?,
            "batch_size" | "batch" => self.batch_size = parse_num(k, v)?,
            "max_steps" => self.max_steps = parse_num(k, v)?,
            "seed" => self.seed = if v == "none" { None } else { Some(parse_num(k, v)?) },
            "graph" => self.graph = v.parse()?,
            "inject" => self.inject = v.parse()?,
            "thresholds" => {
                self.thresholds = if v == "default" { default_grid() } else { parse_list(k, v)? }
            }
            "eco" => self.eco = parse_bool(k, v)?,
            "draws" => self.draws = parse_num(k, v)?,
            "pairs" => self.pairs = parse_num(k, v)?,
            "depths" => self.depths = parse_list(k, v)?,
            "out" => self.out = PathBuf::from(v),
            _ => return Err(Error::Parameter(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            cfg.set(k, v).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn with_overrides<'a>(mut self, overrides: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        for (k, v) in overrides {
            self.set(k, v)?;
        }
        Ok(self)
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let p = |o: &Option<PathBuf>| o.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        Ok(match key {
            "data" => p(&self.data),
            "format" => match self.format {
                DataFormat::Auto => "auto",
                DataFormat::Csv => "csv",
                DataFormat::Arff => "arff",
            }
            .to_string(),
            "num_labels" => self.num_labels.map_or("none".into(), |n| n.to_string()),
            "split" => join(&self.split),
            "train_idx" => p(&self.train_idx),
            "val_idx" => p(&self.val_idx),
            "test_idx" => p(&self.test_idx),
            "standardize" => self.standardize.to_string(),
            "encoder" => self.encoder.clone(),
            "hidden" => join(&self.hidden),
            "d" => self.d.to_string(),
            "n" => self.n.to_string(),
            "heads" => self.heads.to_string(),
            "lr" => self.lr.to_string(),
            "lambda0" => self.lambda0.to_string(),
            "lambda1" => self.lambda1.to_string(),
            "lambda2" => self.lambda2.to_string(),
            "beta" => self.beta.to_string(),
            "dropout" => self.dropout.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "max_steps" => self.max_steps.to_string(),
            "seed" => self.seed.map_or("none".into(), |s| s.to_string()),
            "graph" => self.graph.to_string(),
            "inject" => self.inject.to_string(),
            "thresholds" => join(&self.thresholds),
            "eco" => self.eco.to_string(),
            "draws" => self.draws.to_string(),
            "pairs" => self.pairs.to_string(),
            "depths" => join(&self.depths),
            "out" => self.out.display().to_string(),
            _ => return Err(Error::Parameter(format!("unknown config key {key:?}"))),
        })
    }

    /// Serializes to the `key = value` format [`RunConfig::parse`] reads.
    pub fn to_kv(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("known key")))
            .collect()
    }

    pub fn effective_heads(&self) -> usize {
        if self.heads == 0 {
            default_heads(self.d)
        } else {
            self.heads
        }
    }

    pub fn seed_or_default(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda0: self.lambda0,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            beta: self.beta,
        }
    }

    /// Sampling settings for the ecological metrics. These need an explicit
    /// seed.
    pub fn sampling(&self) -> Result<SamplingConfig> {
        let seed = self
            .seed
            .ok_or_else(|| Error::Parameter("ecological metrics need an explicit --seed".into()))?;
        Ok(SamplingConfig {
            seed,
            draws: self.draws,
            pairs: self.pairs,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.encoder != "mlp" {
            return bad(format!("encoder {:?} is not supported; only mlp", self.encoder));
        }
        if self.d == 0 || !self.d.is_multiple_of(self.effective_heads()) {
            return bad(format!("d={} must be a positive multiple of heads={}", self.d, self.effective_heads()));
        }
        if self.n == 0 {
            return bad("n must be >= 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("lr must be >= 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        if self.thresholds.is_empty() {
            return bad("threshold grid is empty".into());
        }
        if self.depths.contains(&0) {
            return bad("depths must be >= 1".into());
        }
        if self.eco {
            self.sampling()?;
        }
        self.weights().validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_grid_choice() {
        let c = RunConfig::default();
        assert_eq!((c.lr, c.lambda0, c.lambda1, c.lambda2, c.beta), (7.5e-4, 1.0, 0.1, 1.0, 1e-4));
        assert_eq!((c.d, c.n, c.dropout, c.epochs, c.batch_size), (100, 2, 0.1, 200, 128));
        assert!(grid::LEARNING_RATE.contains(&c.lr));
        assert_eq!(c.effective_heads(), 4);
        c.validate().unwrap();
    }

    #[test]
    fn parse_and_override() {
        let c = RunConfig::parse("# comment\nd = 8\nheads=2\ngraph = complete # trailing\n").unwrap();
        assert_eq!((c.d, c.heads, c.graph), (8, 2, GraphMode::Complete));
        let c = c.with_overrides([("batch-size", "16"), ("seed", "3")]).unwrap();
        assert_eq!((c.batch_size, c.seed), (16, Some(3)));
        assert!(matches!(RunConfig::parse("d 8"), Err(Error::Parse { line: 1, .. })));
        assert!(RunConfig::default().with_overrides([("bogus", "1")]).is_err());
    }

    #[test]
    fn kv_round_trip() {
        let mut c = RunConfig::default();
        c.set("data", "x/y.arff").unwrap();
        c.set("num_labels", "14").unwrap();
        c.set("seed", "5").unwrap();
        c.set("lr", "0.0003").unwrap();
        assert_eq!(RunConfig::parse(&c.to_kv()).unwrap(), c);
    }

    #[test]
    fn validation_rejects_bad_heads() {
        let c = RunConfig::default().with_overrides([("d", "10"), ("heads", "4")]).unwrap();
        assert!(c.validate().is_err());
        let c = RunConfig::default().with_overrides([("n", "0")]).unwrap();
        assert!(c.validate().is_err());
    }
}
