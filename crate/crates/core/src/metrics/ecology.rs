//! Ecological evaluation at three levels: species occurrence, per-location
//! richness and pairwise community composition.
//!
//! Sampling metrics draw Bernoulli matrices from the predicted probabilities.
//! Draw `d` uses `ChaCha8Rng::seed_from_u64(seed)` on stream `d`, visiting
//! locations in order and species within each location, with a species
//! present when a uniform `[0, 1)` draw falls below its probability. The
//! community pairs use the same seed on stream [`PAIR_STREAM`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{kernels, Exec, Tensor};

use super::classification::{auc, column};
use super::PredictionSet;

pub const PAIR_STREAM: u64 = u64::MAX;
pub const CALIBRATION_BINS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub seed: u64,
    pub draws: usize,
    pub pairs: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            draws: 100,
            pairs: 300,
        }
    }
}

/// The four summary statistics reported at each level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quad {
    pub accuracy: f64,
    /// `None` when undefined (no scorable species, or a constant vector
    /// under rank correlation).
    pub discrimination: Option<f64>,
    pub calibration: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dissimilarity {
    pub sor: f64,
    pub sim: f64,
    pub nes: f64,
}

/// Baselga's Sorensen dissimilarity and its turnover/nestedness parts from
/// the shared count `a` and the unique counts `b`, `c`. Returns `None` when
/// both sites are empty.
///
/// Turnover and nestedness are each one correctly rounded integer ratio and
/// the Sorensen value is their sum, so the decomposition holds exactly.
pub fn baselga(a: usize, b: usize, c: usize) -> Option<Dissimilarity> {
    let total = 2 * a + b + c;
    if total == 0 {
        return None;
    }
    let (lo, hi) = (b.min(c), b.max(c));
    let (sim, nes) = if a + lo == 0 {
        // a = 0 and one site empty: the other site is all unique species.
        (0.0, 1.0)
    } else {
        // Single integer ratios, so equal fractions give equal floats.
        let sim = lo as f64 / (a + lo) as f64;
        let nes = ((hi - lo) * a) as f64 / (total * (a + lo)) as f64;
        (sim, nes)
    };
    Some(Dissimilarity {
        sor: sim + nes,
        sim,
        nes,
    })
}

fn site_counts(x: &[bool], y: &[bool]) -> (usize, usize, usize) {
    let (mut a, mut b, mut c) = (0, 0, 0);
    for (&p, &q) in x.iter().zip(y) {
        match (p, q) {
            (true, true) => a += 1,
            (true, false) => b += 1,
            (false, true) => c += 1,
            (false, false) => {}
        }
    }
    (a, b, c)
}

/// One sampled presence/absence matrix, row-major `[N, L]`.
pub fn sample_matrix(probs: &Tensor, seed: u64, draw: usize) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(draw as u64);
    probs.data().iter().map(|&p| rng.random::<f64>() < p).collect()
}

/// The location pairs used by [`community_metrics`].
pub fn sample_pairs(n: usize, count: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if n < 2 {
        return Err(Error::Parameter("community metrics need at least two locations".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(PAIR_STREAM);
    Ok((0..count)
        .map(|_| {
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            (i, j)
        })
        .collect())
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Average ranks, 1-based, ties sharing the mean of their positions.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut g = 0;
    while g < order.len() {
        let mut end = g;
        while end < order.len() && v[order[end]] == v[order[g]] {
            end += 1;
        }
        let r = (g + end + 1) as f64 / 2.0;
        for &i in &order[g..end] {
            ranks[i] = r;
        }
        g = end;
    }
    ranks
}

/// Spearman rank correlation; `None` if either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Summary of sampled quantities against the truth. `samples[u]` holds the
/// draws for unit `u` (a location or a location pair).
fn summarize_samples(truth: &[f64], samples: &[Vec<f64>]) -> Quad {
    let n = truth.len();
    let means: Vec<f64> = samples
        .iter()
        .map(|s| s.iter().sum::<f64>() / s.len() as f64)
        .collect();
    let mse = truth.iter().zip(&means).map(|(t, m)| (t - m) * (t - m)).sum::<f64>() / n as f64;
    let mut inside = 0usize;
    let mut spread = 0.0;
    for (u, s) in samples.iter().enumerate() {
        let mut sorted = s.clone();
        sorted.sort_by(f64::total_cmp);
        let (lo, hi) = (percentile(&sorted, 0.25), percentile(&sorted, 0.75));
        if truth[u] >= lo && truth[u] <= hi {
            inside += 1;
        }
        let var = s.iter().map(|v| (v - means[u]) * (v - means[u])).sum::<f64>() / (s.len() - 1) as f64;
        spread += var.sqrt();
    }
    Quad {
        accuracy: mse.sqrt(),
        discrimination: spearman(&means, truth),
        calibration: (inside as f64 / n as f64 - 0.5).abs(),
        precision: spread / n as f64,
    }
}

/// Mean absolute bin-mean gap over equal-count probability bins of one
/// species. Bin `b` covers sorted positions `floor(b N / 10)` up to
/// `floor((b + 1) N / 10)`; empty bins are skipped.
pub fn species_calibration(probs: &[f64], truth: &[f64]) -> f64 {
    let n = probs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]));
    let mut total = 0.0;
    let mut bins = 0;
    for b in 0..CALIBRATION_BINS {
        let (lo, hi) = (b * n / CALIBRATION_BINS, (b + 1) * n / CALIBRATION_BINS);
        if hi == lo {
            continue;
        }
        let k = (hi - lo) as f64;
        let mp = order[lo..hi].iter().map(|&i| probs[i]).sum::<f64>() / k;
        let mt = order[lo..hi].iter().map(|&i| truth[i]).sum::<f64>() / k;
        total += (mp - mt).abs();
        bins += 1;
    }
    total / bins as f64
}

pub fn occurrence_metrics(p: &PredictionSet) -> Result<Quad> {
    let (n, l) = (p.truth.shape()[0], p.truth.shape()[1]);
    if n == 0 || l == 0 {
        return Err(Error::EmptyAxis { op: "occurrence_metrics" });
    }
    let cells = (n * l) as f64;
    let pd = p.probabilities.data();
    let accuracy = pd.iter().zip(p.truth.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / cells;
    let precision = pd.iter().map(|&v| (v * (1.0 - v)).sqrt()).sum::<f64>() / cells;
    let per_species = kernels::map_indices(Exec::default(), l, |j| {
        let (pj, tj) = (column(&p.probabilities, j), column(&p.truth, j));
        (auc(&pj, &tj), species_calibration(&pj, &tj))
    });
    let aucs: Vec<f64> = per_species.iter().filter_map(|x| x.0).collect();
    let discrimination = (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64);
    let calibration = per_species.iter().map(|x| x.1).sum::<f64>() / l as f64;
    Ok(Quad {
        accuracy,
        discrimination,
        calibration,
        precision,
    })
}

fn draws_of(p: &PredictionSet, cfg: &SamplingConfig) -> Result<Vec<Vec<bool>>> {
    if cfg.draws < 2 {
        return Err(Error::Parameter("sampling metrics need at least two draws".into()));
    }
    Ok(kernels::map_indices(Exec::default(), cfg.draws, |d| {
        sample_matrix(&p.probabilities, cfg.seed, d)
    }))
}

fn richness_from_draws(p: &PredictionSet, draws: &[Vec<bool>]) -> Quad {
    let (n, l) = (p.truth.shape()[0], p.truth.shape()[1]);
    let truth: Vec<f64> = (0..n).map(|i| p.truth.row(i).iter().sum()).collect();
    let samples: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            draws
                .iter()
                .map(|m| m[i * l..(i + 1) * l].iter().filter(|&&b| b).count() as f64)
                .collect()
        })
        .collect();
    summarize_samples(&truth, &samples)
}

pub fn richness_metrics(p: &PredictionSet, cfg: &SamplingConfig) -> Result<Quad> {
    if p.truth.shape()[0] == 0 {
        return Err(Error::EmptyAxis { op: "richness_metrics" });
    }
    Ok(richness_from_draws(p, &draws_of(p, cfg)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommunityReport {
    pub sor: Quad,
    pub sim: Quad,
    pub nes: Quad,
    /// Sampled pairs whose true communities are both empty.
    pub empty_pairs: usize,
}

fn pair_dissimilarity(m: &[bool], l: usize, i: usize, j: usize) -> (Dissimilarity, bool) {
    let (a, b, c) = site_counts(&m[i * l..(i + 1) * l], &m[j * l..(j + 1) * l]);
    match baselga(a, b, c) {
        Some(d) => (d, false),
        None => (
            Dissimilarity {
                sor: 0.0,
                sim: 0.0,
                nes: 0.0,
            },
            true,
        ),
    }
}

fn community_from_draws(p: &PredictionSet, draws: &[Vec<bool>], pairs: &[(usize, usize)]) -> CommunityReport {
    let l = p.truth.shape()[1];
    let truth_m: Vec<bool> = p.truth.data().iter().map(|&v| v > 0.5).collect();
    let truth: Vec<(Dissimilarity, bool)> =
        pairs.iter().map(|&(i, j)| pair_dissimilarity(&truth_m, l, i, j)).collect();
    let sampled: Vec<Vec<Dissimilarity>> = kernels::map_indices(Exec::default(), pairs.len(), |k| {
        let (i, j) = pairs[k];
        draws.iter().map(|m| pair_dissimilarity(m, l, i, j).0).collect()
    });
    let part = |f: fn(&Dissimilarity) -> f64| {
        let t: Vec<f64> = truth.iter().map(|x| f(&x.0)).collect();
        let s: Vec<Vec<f64>> = sampled.iter().map(|v| v.iter().map(f).collect()).collect();
        summarize_samples(&t, &s)
    };
    CommunityReport {
        sor: part(|d| d.sor),
        sim: part(|d| d.sim),
        nes: part(|d| d.nes),
        empty_pairs: truth.iter().filter(|x| x.1).count(),
    }
}

pub fn community_metrics(p: &PredictionSet, cfg: &SamplingConfig) -> Result<CommunityReport> {
    let pairs = sample_pairs(p.truth.shape()[0], cfg.pairs, cfg.seed)?;
    if pairs.is_empty() {
        return Err(Error::Parameter("community metrics need at least one pair".into()));
    }
    Ok(community_from_draws(p, &draws_of(p, cfg)?, &pairs))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EcoReport {
    pub occurrence: Quad,
    pub richness: Quad,
    pub community: CommunityReport,
}

/// All twelve ecological metrics, sharing one set of sampled matrices
/// between richness and community composition.
pub fn eco_report(p: &PredictionSet, cfg: &SamplingConfig) -> Result<EcoReport> {
    let occurrence = occurrence_metrics(p)?;
    let pairs = sample_pairs(p.truth.shape()[0], cfg.pairs, cfg.seed)?;
    let draws = draws_of(p, cfg)?;
    Ok(EcoReport {
        occurrence,
        richness: richness_from_draws(p, &draws),
        community: community_from_draws(p, &draws, &pairs),
    })
}
