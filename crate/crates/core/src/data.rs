//! Dataset loading, splitting, standardization and label statistics.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Header prefix marking a CSV column as a label.
pub const LABEL_PREFIX: &str = "label:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Parameter(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    /// MULAN-style ARFF. Data rows may be sparse `{index value, ...}` or
    /// dense comma-separated; the last `num_labels` attributes are labels.
    Arff { num_labels: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub features: Tensor,
    pub labels: Tensor,
    pub feature_names: Vec<String>,
    pub label_names: Vec<String>,
    /// One entry per sample. Every sample starts in `Train` until
    /// [`make_splits`] assigns otherwise.
    pub split: Vec<Split>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        features: Tensor,
        labels: Tensor,
        feature_names: Vec<String>,
        label_names: Vec<String>,
    ) -> Result<Self> {
        let (fs_, ls) = (features.shape(), labels.shape());
        if fs_.len() != 2 || ls.len() != 2 || fs_[0] != ls[0] {
            return Err(Error::shape("dataset", fs_, ls));
        }
        if feature_names.len() != fs_[1] || label_names.len() != ls[1] {
            return Err(Error::Validation("column names do not match matrix widths".into()));
        }
        if !features.all_finite() {
            return Err(Error::Validation("non-finite feature value".into()));
        }
        if let Some(pos) = labels.data().iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Validation(format!(
                "label value {} at sample {} is not binary",
                labels.data()[pos],
                pos / ls[1].max(1)
            )));
        }
        let n = fs_[0];
        Ok(Self {
            name: name.into(),
            features,
            labels,
            feature_names,
            label_names,
            split: vec![Split::Train; n],
        })
    }

    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_features(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn num_labels(&self) -> usize {
        self.labels.shape()[1]
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    /// Gathers `(features, labels)` rows in the given order.
    pub fn gather(&self, rows: &[usize]) -> (Tensor, Tensor) {
        (gather_rows(&self.features, rows), gather_rows(&self.labels, rows))
    }

    pub fn subset(&self, split: Split) -> (Tensor, Tensor) {
        self.gather(&self.indices(split))
    }
}

pub fn gather_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let w = t.shape()[1];
    let mut data = Vec::with_capacity(rows.len() * w);
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    Tensor::new(vec![rows.len(), w], data).expect("row width preserved")
}

pub fn load_dataset(path: &Path, format: Format) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    match format {
        Format::Csv => parse_csv(&name, &text),
        Format::Arff { num_labels } => parse_arff(&name, &text, num_labels),
    }
}

/// Picks the format from the file extension.
pub fn format_for(path: &Path, num_labels: Option<usize>) -> Result<Format> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => Ok(Format::Csv),
        Some("arff") => num_labels
            .map(|num_labels| Format::Arff { num_labels })
            .ok_or_else(|| Error::Parameter("ARFF input requires num_labels".into())),
        other => Err(Error::Parameter(format!("unsupported data extension {other:?}"))),
    }
}

fn parse_value(raw: &str, line: usize) -> Result<f64> {
    let t = raw.trim();
    let v: f64 = t.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("not a number: {t:?}"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            msg: format!("non-finite value {t:?}"),
        });
    }
    Ok(v)
}

pub fn parse_csv(name: &str, text: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?
        .clone();
    let mut feat_cols = Vec::new();
    let mut label_cols = Vec::new();
    for (i, h) in header.iter().enumerate() {
        match h.strip_prefix(LABEL_PREFIX) {
            Some(l) => label_cols.push((i, l.to_string())),
            None => feat_cols.push((i, h.to_string())),
        }
    }
    if label_cols.is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: format!("no column carries the {LABEL_PREFIX:?} prefix"),
        });
    }
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut n = 0;
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(n + 2);
        if record.len() != header.len() {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        for &(i, _) in &feat_cols {
            x.push(parse_value(&record[i], line)?);
        }
        for &(i, _) in &label_cols {
            y.push(parse_value(&record[i], line)?);
        }
        n += 1;
    }
    let features = Tensor::new(vec![n, feat_cols.len()], x)?;
    let labels = Tensor::new(vec![n, label_cols.len()], y)?;
    Dataset::new(
        name,
        features,
        labels,
        feat_cols.into_iter().map(|c| c.1).collect(),
        label_cols.into_iter().map(|c| c.1).collect(),
    )
}

/// Splits an `@attribute` line into its name, honoring quotes.
fn attribute_name(rest: &str, line: usize) -> Result<String> {
    let rest = rest.trim_start();
    let mut chars = rest.chars();
    match chars.next() {
        Some(q @ ('\'' | '"')) => {
            let body: String = chars.as_str().to_string();
            let end = body.find(q).ok_or_else(|| Error::Parse {
                line,
                msg: "unterminated quoted attribute name".into(),
            })?;
            Ok(body[..end].to_string())
        }
        Some(_) => Ok(rest.split_whitespace().next().unwrap_or_default().to_string()),
        None => Err(Error::Parse {
            line,
            msg: "attribute without a name".into(),
        }),
    }
}

pub fn parse_arff(name: &str, text: &str, num_labels: usize) -> Result<Dataset> {
    let mut attributes = Vec::new();
    let mut relation = name.to_string();
    let mut in_data = false;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let s = raw.trim();
        if s.is_empty() || s.starts_with('%') {
            continue;
        }
        if !in_data {
            let lower = s.to_ascii_lowercase();
            if lower.starts_with("@relation") {
                let r = attribute_name(&s["@relation".len()..], line)?;
                relation = r.split(':').next().unwrap_or(&r).to_string();
            } else if lower.starts_with("@attribute") {
                attributes.push(attribute_name(&s["@attribute".len()..], line)?);
            } else if lower.starts_with("@data") {
                in_data = true;
            } else {
                return Err(Error::Parse {
                    line,
                    msg: format!("unexpected header line {s:?}"),
                });
            }
            continue;
        }
        let width = attributes.len();
        let mut row = vec![0.0; width];
        if let Some(body) = s.strip_prefix('{') {
            let body = body.strip_suffix('}').ok_or_else(|| Error::Parse {
                line,
                msg: "sparse row missing closing brace".into(),
            })?;
            for entry in body.split(',').map(str::trim).filter(|e| !e.is_empty()) {
                let mut parts = entry.split_whitespace();
                let (Some(i), Some(v), None) = (parts.next(), parts.next(), parts.next()) else {
                    return Err(Error::Parse {
                        line,
                        msg: format!("malformed sparse entry {entry:?}"),
                    });
                };
                let i: usize = i.parse().map_err(|_| Error::Parse {
                    line,
                    msg: format!("bad sparse index {i:?}"),
                })?;
                if i >= width {
                    return Err(Error::Parse {
                        line,
                        msg: format!("sparse index {i} out of range for {width} attributes"),
                    });
                }
                row[i] = parse_value(v, line)?;
            }
        } else {
            let fields: Vec<&str> = s.split(',').collect();
            if fields.len() != width {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected {width} fields, found {}", fields.len()),
                });
            }
            for (slot, f) in row.iter_mut().zip(fields) {
                *slot = parse_value(f, line)?;
            }
        }
        rows.push(row);
    }
    if num_labels == 0 || num_labels > attributes.len() {
        return Err(Error::Parameter(format!(
            "num_labels {num_labels} invalid for {} attributes",
            attributes.len()
        )));
    }
    let s = attributes.len() - num_labels;
    let n = rows.len();
    let mut x = Vec::with_capacity(n * s);
    let mut y = Vec::with_capacity(n * num_labels);
    for r in &rows {
        x.extend_from_slice(&r[..s]);
        y.extend_from_slice(&r[s..]);
    }
    let label_names = attributes.split_off(s);
    Dataset::new(
        relation,
        Tensor::new(vec![n, s], x)?,
        Tensor::new(vec![n, num_labels], y)?,
        attributes,
        label_names,
    )
}

/// Writes the dataset as CSV in the format [`parse_csv`] reads. Values use
/// the shortest representation that parses back to the same `f64`.
pub fn write_csv<W: Write>(ds: &Dataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let header: Vec<String> = ds
        .feature_names
        .iter()
        .cloned()
        .chain(ds.label_names.iter().map(|l| format!("{LABEL_PREFIX}{l}")))
        .collect();
    let csv_err = |e: csv::Error| Error::Validation(e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..ds.len() {
        let rec: Vec<String> = ds
            .features
            .row(i)
            .iter()
            .chain(ds.labels.row(i))
            .map(|v| format!("{v:?}"))
            .collect();
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// How samples are assigned to train, validation and test.
#[derive(Debug, Clone, PartialEq)]
pub enum SplitSpec {
    Ratios { train: f64, val: f64, test: f64 },
    Indices { train: Vec<usize>, val: Vec<usize>, test: Vec<usize> },
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Ratios {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

/// Reads a split index file: one 0-based index per line, blank lines ignored.
pub fn read_index_file(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, l) in text.lines().enumerate() {
        let t = l.trim();
        if t.is_empty() {
            continue;
        }
        out.push(t.parse().map_err(|_| Error::Parse {
            line: i + 1,
            msg: format!("bad index {t:?}"),
        })?);
    }
    Ok(out)
}

pub fn write_index_file(path: &Path, indices: &[usize]) -> Result<()> {
    let mut s = String::with_capacity(indices.len() * 6);
    for i in indices {
        s.push_str(&i.to_string());
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

/// Assigns every sample to a split. Ratio splits shuffle with a seeded
/// ChaCha8 generator; explicit index lists must partition `0..N`.
pub fn make_splits(mut ds: Dataset, spec: &SplitSpec, seed: u64) -> Result<Dataset> {
    let n = ds.len();
    match spec {
        SplitSpec::Ratios { train, val, test } => {
            let r = [*train, *val, *test];
            if r.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Parameter(format!("split ratios {r:?} must be >= 0 and sum to 1")));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let n_train = ((train * n as f64).round() as usize).min(n);
            let n_val = ((val * n as f64).round() as usize).min(n - n_train);
            for (pos, &i) in order.iter().enumerate() {
                ds.split[i] = if pos < n_train {
                    Split::Train
                } else if pos < n_train + n_val {
                    Split::Val
                } else {
                    Split::Test
                };
            }
        }
        SplitSpec::Indices { train, val, test } => {
            let mut assigned: Vec<Option<Split>> = vec![None; n];
            for (split, list) in [(Split::Train, train), (Split::Val, val), (Split::Test, test)] {
                for &i in list {
                    if i >= n {
                        return Err(Error::Validation(format!("split index {i} out of range for {n} samples")));
                    }
                    if let Some(prev) = assigned[i] {
                        return Err(Error::Validation(format!(
                            "sample {i} appears in both {} and {}",
                            prev.name(),
                            split.name()
                        )));
                    }
                    assigned[i] = Some(split);
                }
            }
            if let Some(i) = assigned.iter().position(Option::is_none) {
                return Err(Error::Validation(format!("sample {i} is not assigned to any split")));
            }
            ds.split = assigned.into_iter().map(|s| s.expect("checked")).collect();
        }
    }
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Binary,
    Constant,
    Real,
}

/// Per-column transform fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub kind: Vec<ColumnKind>,
}

const STD_FLOOR: f64 = 1e-12;

impl Standardizer {
    pub fn fit(ds: &Dataset) -> Result<Self> {
        let rows = ds.indices(Split::Train);
        if rows.is_empty() {
            return Err(Error::Validation("training split is empty".into()));
        }
        let s = ds.num_features();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; s];
        let mut std = vec![0.0; s];
        let mut kind = vec![ColumnKind::Real; s];
        for j in 0..s {
            let col = || rows.iter().map(|&i| ds.features.get2(i, j));
            if col().all(|v| v == 0.0 || v == 1.0) {
                kind[j] = ColumnKind::Binary;
                continue;
            }
            let m = col().sum::<f64>() / n;
            let var = col().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            mean[j] = m;
            std[j] = var.sqrt();
            if std[j] < STD_FLOOR {
                kind[j] = ColumnKind::Constant;
            }
        }
        Ok(Self { mean, std, kind })
    }

    pub fn apply(&self, features: &Tensor) -> Result<Tensor> {
        let s = self.mean.len();
        if features.rank() != 2 || features.shape()[1] != s {
            return Err(Error::shape("standardize", features.shape(), &[s]));
        }
        let mut out = features.clone();
        for row in out.data_mut().chunks_mut(s) {
            for (j, v) in row.iter_mut().enumerate() {
                match self.kind[j] {
                    ColumnKind::Binary => {}
                    ColumnKind::Constant => *v -= self.mean[j],
                    ColumnKind::Real => *v = (*v - self.mean[j]) / self.std[j],
                }
            }
        }
        Ok(out)
    }
}

/// Z-scores real-valued columns with training-split statistics.
pub fn standardize(ds: &Dataset) -> Result<(Dataset, Standardizer)> {
    let st = Standardizer::fit(ds)?;
    let mut out = ds.clone();
    out.features = st.apply(&ds.features)?;
    Ok((out, st))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub labels_per_sample_mean: f64,
    pub labels_per_sample_median: f64,
    pub labels_per_sample_max: f64,
    pub samples_per_label_mean: f64,
    pub samples_per_label_median: f64,
    pub samples_per_label_max: f64,
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn summarize(mut counts: Vec<f64>) -> (f64, f64, f64) {
    if counts.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let mean = counts.iter().sum::<f64>() / counts.len() as f64;
    let max = counts.iter().copied().fold(0.0, f64::max);
    (mean, median(&mut counts), max)
}

/// Label statistics over the whole dataset.
pub fn label_stats(ds: &Dataset) -> LabelStats {
    let (n, l) = (ds.len(), ds.num_labels());
    let per_sample: Vec<f64> = (0..n).map(|i| ds.labels.row(i).iter().sum()).collect();
    let per_label: Vec<f64> = (0..l)
        .map(|j| (0..n).map(|i| ds.labels.get2(i, j)).sum())
        .collect();
    let (a, b, c) = summarize(per_sample);
    let (d, e, f) = summarize(per_label);
    LabelStats {
        labels_per_sample_mean: a,
        labels_per_sample_median: b,
        labels_per_sample_max: c,
        samples_per_label_mean: d,
        samples_per_label_median: e,
        samples_per_label_max: f,
    }
}

/// Seeded synthetic multi-label data with correlated labels.
///
/// Features are standard normal. A small set of latent factors drives both
/// the features and the labels, so labels co-occur and are predictable from
/// the features. Intercepts are spread so label frequencies vary.
pub fn synthetic(name: &str, n: usize, s: usize, l: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || s == 0 || l == 0 {
        return Err(Error::Parameter("synthetic dataset needs n, s, l > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = (l / 2).clamp(2, 8);
    let mut gauss = || -> f64 { StandardNormal.sample(&mut rng) };
    let load_x: Vec<f64> = (0..k * s).map(|_| gauss()).collect();
    let load_y: Vec<f64> = (0..k * l).map(|_| 1.5 * gauss()).collect();
    let intercept: Vec<f64> = (0..l)
        .map(|j| -1.5 + 2.0 * j as f64 / l.max(2).saturating_sub(1).max(1) as f64)
        .collect();
    let mut x = Vec::with_capacity(n * s);
    let mut y = Vec::with_capacity(n * l);
    for _ in 0..n {
        let f: Vec<f64> = (0..k).map(|_| gauss()).collect();
        for j in 0..s {
            let signal: f64 = (0..k).map(|c| f[c] * load_x[c * s + j]).sum::<f64>() / (k as f64).sqrt();
            x.push(0.8 * signal + 0.6 * gauss());
        }
        for j in 0..l {
            let logit: f64 =
                intercept[j] + (0..k).map(|c| f[c] * load_y[c * l + j]).sum::<f64>() / (k as f64).sqrt();
            y.push(if logit + 0.5 * gauss() > 0.0 { 1.0 } else { 0.0 });
        }
    }
    Dataset::new(
        name,
        Tensor::new(vec![n, s], x)?,
        Tensor::new(vec![n, l], y)?,
        (0..s).map(|j| format!("x{j}")).collect(),
        (0..l).map(|j| format!("y{j}")).collect(),
    )
}
