//! Independent reference implementations used by the integration tests.
//! Everything here is written with plain loops over `Vec`s and never calls
//! the library routine it is checking.

#![allow(dead_code)]

use hotvae::label_decoder::{AttentionBlock, DecoderParams, Injection, LabelGraph};
use hotvae::nn::{Linear, Norm};
use hotvae::numerics::{ParamStore, Tensor, LAYER_NORM_EPS};
use hotvae::vae_align::EncoderParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tensor(rows: &Mat) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

pub fn uniform_mat(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(lo..hi)).collect())
        .collect()
}

pub fn binary_mat(rng: &mut impl Rng, rows: usize, cols: usize, p: f64) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| f64::from(u8::from(rng.random_bool(p)))).collect())
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Dense building blocks

fn param_mat(store: &ParamStore, id: hotvae::numerics::ParamId) -> Mat {
    store.value(id).to_rows()
}

pub fn matmul(a: &Mat, w: &Mat) -> Mat {
    let inner = w.len();
    let cols = w.first().map_or(0, Vec::len);
    a.iter()
        .map(|row| {
            assert_eq!(row.len(), inner);
            (0..cols)
                .map(|c| (0..inner).map(|k| row[k] * w[k][c]).sum())
                .collect()
        })
        .collect()
}

pub fn linear(store: &ParamStore, l: &Linear, x: &Mat) -> Mat {
    let w = param_mat(store, l.weight);
    let b = store.value(l.bias).data();
    matmul(x, &w)
        .into_iter()
        .map(|r| r.iter().zip(b).map(|(v, bb)| v + bb).collect())
        .collect()
}

pub fn relu(x: Mat) -> Mat {
    x.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect()
}

pub fn layer_norm(store: &ParamStore, n: &Norm, x: &Mat) -> Mat {
    let g = store.value(n.gain).data();
    let b = store.value(n.bias).data();
    x.iter()
        .map(|r| {
            let d = r.len() as f64;
            let mean = r.iter().sum::<f64>() / d;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let s = (var + LAYER_NORM_EPS).sqrt();
            r.iter()
                .enumerate()
                .map(|(j, v)| g[j] * (v - mean) / s + b[j])
                .collect()
        })
        .collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ---------------------------------------------------------------------------
// Encoder

/// Mean and variance rows `[B][count * d]` of an MLP encoder.
pub fn encoder_oracle(store: &ParamStore, enc: &EncoderParams, x: &Mat) -> (Mat, Mat) {
    let mut h = x.clone();
    for layer in &enc.hidden {
        h = relu(linear(store, layer, &h));
    }
    let mean = linear(store, &enc.mean_head, &h);
    let var = linear(store, &enc.logvar_head, &h)
        .into_iter()
        .map(|r| r.into_iter().map(f64::exp).collect())
        .collect();
    (mean, var)
}

/// `sum log(vf/vl) - d + sum vl/vf + sum (mf - ml)^2 / vf` for one pair.
pub fn kl_bracket(mf: &[f64], vf: &[f64], ml: &[f64], vl: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..mf.len() {
        s += (vf[k] / vl[k]).ln() - 1.0 + vl[k] / vf[k] + (mf[k] - ml[k]).powi(2) / vf[k];
    }
    s
}

// ---------------------------------------------------------------------------
// Decoder

/// Attention from `q` (M rows) to `k` (P rows) through `block`, with
/// residual and layer norm. Also returns the weights `[head][i][j]`.
pub fn attention_oracle(
    store: &ParamStore,
    block: &AttentionBlock,
    heads: usize,
    q_in: &Mat,
    k_in: &Mat,
    allowed: &dyn Fn(usize, usize) -> bool,
) -> (Mat, Vec<Mat>) {
    let d = q_in[0].len();
    let dh = d / heads;
    let q = matmul(q_in, &param_mat(store, block.query));
    let k = matmul(k_in, &param_mat(store, block.key));
    let v = matmul(k_in, &param_mat(store, block.value));
    let mut concat = vec![vec![0.0; d]; q.len()];
    let mut alphas = Vec::new();
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let mut alpha = vec![vec![0.0; k.len()]; q.len()];
        for i in 0..q.len() {
            let scores: Vec<Option<f64>> = (0..k.len())
                .map(|j| {
                    allowed(i, j).then(|| {
                        cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt()
                    })
                })
                .collect();
            let max = scores.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let z: f64 = scores.iter().flatten().map(|s| (s - max).exp()).sum();
            for j in 0..k.len() {
                alpha[i][j] = scores[j].map_or(0.0, |s| (s - max).exp() / z);
            }
            for c in cols.clone() {
                concat[i][c] = (0..k.len()).map(|j| alpha[i][j] * v[j][c]).sum();
            }
        }
        alphas.push(alpha);
    }
    let proj = matmul(&concat, &param_mat(store, block.output));
    let res: Mat = q_in
        .iter()
        .zip(&proj)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect();
    (layer_norm(store, &block.attn_norm, &res), alphas)
}

pub fn feed_forward_oracle(store: &ParamStore, block: &AttentionBlock, x: &Mat) -> Mat {
    let h = linear(store, &block.ff_out, &relu(linear(store, &block.ff_in, x)));
    let res: Mat = x
        .iter()
        .zip(&h)
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect())
        .collect();
    layer_norm(store, &block.ff_norm, &res)
}

pub fn readout_oracle(store: &ParamStore, params: &DecoderParams, u: &Mat) -> Vec<f64> {
    let w = param_mat(store, params.readout);
    u.iter()
        .zip(&w)
        .map(|(ui, wi)| sigmoid(ui.iter().zip(wi).map(|(a, b)| a * b).sum()))
        .collect()
}

/// Node states after every layer and the per-layer probabilities for one
/// sample with latent rows `z` (J x d).
pub struct DecoderOracle {
    pub states: Vec<Mat>,
    pub probs: Vec<Vec<f64>>,
    pub attention: Vec<Vec<Mat>>,
}

pub fn decoder_oracle(
    store: &ParamStore,
    params: &DecoderParams,
    graph: &LabelGraph,
    inject: Injection,
    z: &Mat,
) -> DecoderOracle {
    let l = params.labels;
    let allowed = |i: usize, j: usize| {
        graph.has_edge(i, j) || (i == j && (0..l).all(|k| !graph.has_edge(i, k)))
    };
    let mut u = param_mat(store, params.label_embedding);
    let mut out = DecoderOracle {
        states: Vec::new(),
        probs: Vec::new(),
        attention: Vec::new(),
    };
    for (t, layer) in params.layers.iter().enumerate() {
        if t == 0 || inject == Injection::PerLayer {
            let fy = &layer.feature_to_label;
            let (m, _) = attention_oracle(store, fy, params.heads, &u, z, &|_, _| true);
            u = feed_forward_oracle(store, fy, &m);
        }
        let yy = &layer.label_to_label;
        let (m, alpha) = attention_oracle(store, yy, params.heads, &u, &u, &allowed);
        u = feed_forward_oracle(store, yy, &m);
        out.probs.push(readout_oracle(store, params, &u));
        out.states.push(u.clone());
        out.attention.push(alpha);
    }
    out
}

// ---------------------------------------------------------------------------
// Losses

pub fn bce_oracle(y: &[f64], p: &[f64]) -> f64 {
    let eps = 1e-7;
    -y.iter()
        .zip(p)
        .map(|(&t, &q)| {
            let q = q.clamp(eps, 1.0 - eps);
            t * q.ln() + (1.0 - t) * (1.0 - q).ln()
        })
        .sum::<f64>()
        / y.len() as f64
}

pub fn ranking_oracle(y: &[f64], p: &[f64]) -> f64 {
    let pos: Vec<usize> = (0..y.len()).filter(|&r| y[r] == 1.0).collect();
    let neg: Vec<usize> = (0..y.len()).filter(|&s| y[s] == 0.0).collect();
    if pos.is_empty() || neg.is_empty() {
        return 0.0;
    }
    let mut s = 0.0;
    for &r in &pos {
        for &t in &neg {
            s += (-(p[r] - p[t])).exp();
        }
    }
    s / (pos.len() * neg.len()) as f64
}

// ---------------------------------------------------------------------------
// Classification metrics

fn f1_of(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp + fp + fn_ == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// `(ebF1, miF1, maF1, HA)` from set definitions.
pub fn naive_classification(truth: &Mat, pred: &Mat) -> (f64, f64, f64, f64) {
    let n = truth.len();
    let l = truth[0].len();
    let set = |r: &Vec<f64>| -> Vec<usize> { (0..l).filter(|&j| r[j] == 1.0).collect() };
    let mut eb = 0.0;
    for i in 0..n {
        let (y, yh) = (set(&truth[i]), set(&pred[i]));
        let inter = y.iter().filter(|j| yh.contains(j)).count();
        eb += f1_of(inter, yh.len() - inter, y.len() - inter);
    }
    let count = |j: usize, a: f64, b: f64| (0..n).filter(|&i| truth[i][j] == a && pred[i][j] == b).count();
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let mut ma = 0.0;
    for j in 0..l {
        let (t, f, m) = (count(j, 1.0, 1.0), count(j, 0.0, 1.0), count(j, 1.0, 0.0));
        tp += t;
        fp += f;
        fn_ += m;
        ma += f1_of(t, f, m);
    }
    let agree = (0..n)
        .flat_map(|i| (0..l).map(move |j| (i, j)))
        .filter(|&(i, j)| truth[i][j] == pred[i][j])
        .count();
    (eb / n as f64, f1_of(tp, fp, fn_), ma / l as f64, agree as f64 / (n * l) as f64)
}

/// AUC by enumerating every (positive, negative) pair.
pub fn naive_auc(scores: &[f64], truth: &[f64]) -> Option<f64> {
    let (mut wins2, mut pairs) = (0u64, 0u64);
    for (a, &ta) in truth.iter().enumerate() {
        for (b, &tb) in truth.iter().enumerate() {
            if ta == 1.0 && tb == 0.0 {
                pairs += 1;
                if scores[a] > scores[b] {
                    wins2 += 2;
                } else if scores[a] == scores[b] {
                    wins2 += 1;
                }
            }
        }
    }
    (pairs > 0).then(|| wins2 as f64 / (2 * pairs) as f64)
}

/// `(SOR, SIM, NES)` of two sites from set sizes; `None` if both are empty.
/// SOR and SIM are the plain ratios; NES is the exact rational SOR - SIM
/// rounded once.
pub fn naive_baselga(x: &[bool], y: &[bool]) -> Option<(f64, f64, f64)> {
    let a = x.iter().zip(y).filter(|(p, q)| **p && **q).count() as i128;
    let b = x.iter().zip(y).filter(|(p, q)| **p && !**q).count() as i128;
    let c = x.iter().zip(y).filter(|(p, q)| !**p && **q).count() as i128;
    if a + b + c == 0 {
        return None;
    }
    let m = b.min(c);
    let sor = (b + c) as f64 / (2 * a + b + c) as f64;
    if a + m == 0 {
        return Some((sor, 0.0, sor));
    }
    let sim = m as f64 / (a + m) as f64;
    let num = (b + c) * (a + m) - m * (2 * a + b + c);
    let nes = num as f64 / ((2 * a + b + c) * (a + m)) as f64;
    Some((sor, sim, nes))
}

// ---------------------------------------------------------------------------
// Ecological metrics

pub fn naive_percentile(v: &[f64], q: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = (s.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if frac == 0.0 {
        s[lo]
    } else {
        s[lo] + frac * (s[lo + 1] - s[lo])
    }
}

/// `1 + #smaller + (#equal - 1) / 2` for each entry.
pub fn naive_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&x| {
            let less = v.iter().filter(|&&y| y < x).count() as f64;
            let eq = v.iter().filter(|&&y| y == x).count() as f64;
            1.0 + less + (eq - 1.0) / 2.0
        })
        .collect()
}

pub fn naive_spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    let (rx, ry) = (naive_ranks(x), naive_ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}

pub fn sample_std(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// `(accuracy, discrimination, calibration, precision)` of sampled values
/// per unit against the truth.
pub fn naive_summary(truth: &[f64], samples: &[Vec<f64>]) -> [Option<f64>; 4] {
    let n = truth.len() as f64;
    let means: Vec<f64> = samples.iter().map(|s| s.iter().sum::<f64>() / s.len() as f64).collect();
    let rmse = (truth.iter().zip(&means).map(|(t, m)| (t - m).powi(2)).sum::<f64>() / n).sqrt();
    let inside = truth
        .iter()
        .zip(samples)
        .filter(|(t, s)| **t >= naive_percentile(s, 0.25) && **t <= naive_percentile(s, 0.75))
        .count() as f64;
    let precision = samples.iter().map(|s| sample_std(s)).sum::<f64>() / n;
    [
        Some(rmse),
        naive_spearman(&means, truth),
        Some((inside / n - 0.5).abs()),
        Some(precision),
    ]
}

pub fn naive_draw(probs: &Mat, seed: u64, draw: u64) -> Vec<Vec<bool>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(draw);
    probs
        .iter()
        .map(|row| row.iter().map(|&p| r.random::<f64>() < p).collect())
        .collect()
}

pub fn naive_pairs(n: usize, count: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(u64::MAX);
    (0..count)
        .map(|_| {
            let i = r.random_range(0..n);
            let j = r.random_range(0..n - 1);
            (i, if j >= i { j + 1 } else { j })
        })
        .collect()
}

fn naive_calibration(p: &[f64], t: &[f64]) -> f64 {
    let n = p.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap());
    let mut gaps = Vec::new();
    for b in 0..10 {
        let bin: Vec<usize> = idx[b * n / 10..(b + 1) * n / 10].to_vec();
        if bin.is_empty() {
            continue;
        }
        let k = bin.len() as f64;
        let mp: f64 = bin.iter().map(|&i| p[i]).sum::<f64>() / k;
        let mt: f64 = bin.iter().map(|&i| t[i]).sum::<f64>() / k;
        gaps.push((mp - mt).abs());
    }
    gaps.iter().sum::<f64>() / gaps.len() as f64
}

/// All twelve ecological metrics in report order: occurrence, richness,
/// then community SOR, SIM, NES; four values each.
pub fn naive_eco(probs: &Mat, truth: &Mat, seed: u64, draws: usize, pairs: usize) -> Vec<Option<f64>> {
    let n = probs.len();
    let l = probs[0].len();
    let cells = (n * l) as f64;
    let mut out = Vec::new();

    let mut acc = 0.0;
    let mut prec = 0.0;
    for i in 0..n {
        for j in 0..l {
            acc += (probs[i][j] - truth[i][j]).abs();
            prec += (probs[i][j] * (1.0 - probs[i][j])).sqrt();
        }
    }
    let col = |m: &Mat, j: usize| -> Vec<f64> { m.iter().map(|r| r[j]).collect() };
    let aucs: Vec<f64> = (0..l).filter_map(|j| naive_auc(&col(probs, j), &col(truth, j))).collect();
    let cal = (0..l).map(|j| naive_calibration(&col(probs, j), &col(truth, j))).sum::<f64>() / l as f64;
    out.extend([
        Some(acc / cells),
        (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
        Some(cal),
        Some(prec / cells),
    ]);

    let mats: Vec<Vec<Vec<bool>>> = (0..draws as u64).map(|d| naive_draw(probs, seed, d)).collect();
    let true_rich: Vec<f64> = truth.iter().map(|r| r.iter().sum()).collect();
    let rich: Vec<Vec<f64>> = (0..n)
        .map(|i| mats.iter().map(|m| m[i].iter().filter(|&&b| b).count() as f64).collect())
        .collect();
    out.extend(naive_summary(&true_rich, &rich));

    let tb: Vec<Vec<bool>> = truth.iter().map(|r| r.iter().map(|&v| v == 1.0).collect()).collect();
    let pr = naive_pairs(n, pairs, seed);
    // Sorensen is reported as turnover plus nestedness so the decomposition
    // is exact.
    let dis = |x: &[bool], y: &[bool]| {
        naive_baselga(x, y).map_or((0.0, 0.0, 0.0), |(_, sim, nes)| (sim + nes, sim, nes))
    };
    for part in 0..3 {
        let pick = |d: (f64, f64, f64)| [d.0, d.1, d.2][part];
        let t: Vec<f64> = pr.iter().map(|&(i, j)| pick(dis(&tb[i], &tb[j]))).collect();
        let s: Vec<Vec<f64>> = pr
            .iter()
            .map(|&(i, j)| mats.iter().map(|m| pick(dis(&m[i], &m[j]))).collect())
            .collect();
        out.extend(naive_summary(&t, &s));
    }
    out
}

pub const ECO_ROWS: [&str; 4] = ["accuracy", "discrimination", "calibration", "precision"];

/// Report row names in the order produced by [`naive_eco`].
pub fn eco_row_names() -> Vec<String> {
    let mut v = Vec::new();
    for level in ["occurrence", "richness", "community_sor", "community_sim", "community_nes"] {
        for m in ECO_ROWS {
            v.push(format!("{level}_{m}"));
        }
    }
    v
}
