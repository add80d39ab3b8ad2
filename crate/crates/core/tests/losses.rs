mod common;

use common::*;
use hotvae::label_decoder::DecoderTrace;
use hotvae::losses::{bce, loss_bce, loss_int, ranking_loss, ranking_weights, total_loss, LossWeights};
use hotvae::numerics::{Tape, Tensor, Var};
use proptest::prelude::*;

fn probs(r: &mut rand_chacha::ChaCha8Rng, b: usize, l: usize) -> Mat {
    uniform_mat(r, b, l, 1e-3, 1.0 - 1e-3)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn value(tape: &Tape, v: Var) -> f64 {
    tape.value(v).item()
}

fn loss_bce_oracle(y: &Mat, pf: &Mat, pl: &Mat) -> f64 {
    mean((0..y.len()).map(|i| bce_oracle(&y[i], &pf[i]) + bce_oracle(&y[i], &pl[i])))
}

fn rank_oracle(y: &Mat, p: &Mat) -> f64 {
    mean((0..y.len()).map(|i| ranking_oracle(&y[i], &p[i])))
}

/// A branch trace with `n` layers; attention weights are placeholders
/// because only the readouts enter the loss.
fn trace(tape: &mut Tape, layers: &[Mat]) -> DecoderTrace {
    let vars: Vec<Var> = layers.iter().map(|m| tape.constant(tensor(m))).collect();
    DecoderTrace {
        probs: *vars.last().unwrap(),
        intermediates: vars[..vars.len() - 1].to_vec(),
        attention: (0..layers.len()).map(|_| tape.constant(Tensor::scalar(0.0))).collect(),
    }
}

#[test]
fn per_sample_bce_matches_loop() {
    let mut r = rng(1);
    let y = binary_mat(&mut r, 6, 9, 0.4);
    let p = probs(&mut r, 6, 9);
    let mut tape = Tape::new();
    let (yv, pv) = (tape.constant(tensor(&y)), tape.constant(tensor(&p)));
    let b = bce(&mut tape, yv, pv).unwrap();
    for i in 0..6 {
        assert!((tape.value(b).data()[i] - bce_oracle(&y[i], &p[i])).abs() < 1e-14);
    }
    let both = loss_bce(&mut tape, yv, pv, pv).unwrap();
    assert!((value(&tape, both) - loss_bce_oracle(&y, &p, &p)).abs() < 1e-13);
}

#[test]
fn intermediate_loss_with_four_layers_matches_loop() {
    let mut r = rng(2);
    let (b, l, n) = (5, 7, 4);
    let y = binary_mat(&mut r, b, l, 0.5);
    let f: Vec<Mat> = (0..n - 1).map(|_| probs(&mut r, b, l)).collect();
    let g: Vec<Mat> = (0..n - 1).map(|_| probs(&mut r, b, l)).collect();
    let mut tape = Tape::new();
    let yv = tape.constant(tensor(&y));
    let fv: Vec<Var> = f.iter().map(|m| tape.constant(tensor(m))).collect();
    let gv: Vec<Var> = g.iter().map(|m| tape.constant(tensor(m))).collect();
    let got = loss_int(&mut tape, yv, &fv, &gv, n).unwrap();
    let want: f64 = (0..n - 1).map(|t| loss_bce_oracle(&y, &f[t], &g[t])).sum();
    assert!((value(&tape, got) - want).abs() < 1e-13);
    assert!(loss_int(&mut tape, yv, &fv[..2], &gv, n).is_err());
    let none = loss_int(&mut tape, yv, &[], &[], 1).unwrap();
    assert_eq!(value(&tape, none), 0.0);
}

#[test]
fn total_loss_matches_component_oracle() {
    let mut r = rng(3);
    let (b, l, n) = (6, 5, 3);
    let mut y = binary_mat(&mut r, b, l, 0.5);
    y[0] = vec![0.0; l];
    y[1] = vec![1.0; l];
    let fl: Vec<Mat> = (0..n).map(|_| probs(&mut r, b, l)).collect();
    let ll: Vec<Mat> = (0..n).map(|_| probs(&mut r, b, l)).collect();
    let kl: Vec<f64> = uniform_mat(&mut r, 1, b, 0.0, 40.0).concat();
    let w = LossWeights::new(1.0, 0.2, 100.0, 1e-4).unwrap();

    let mut tape = Tape::new();
    let yv = tape.constant(tensor(&y));
    let tf = trace(&mut tape, &fl);
    let tl = trace(&mut tape, &ll);
    let kv = tape.constant(Tensor::new(vec![b], kl.clone()).unwrap());
    let terms = total_loss(&mut tape, yv, &tf, &tl, kv, &w).unwrap();
    let got = terms.breakdown(&tape);

    let want_bce = loss_bce_oracle(&y, &fl[n - 1], &ll[n - 1]);
    let want_int: f64 = (0..n - 1).map(|t| loss_bce_oracle(&y, &fl[t], &ll[t])).sum();
    let want_rank = rank_oracle(&y, &fl[n - 1]) + rank_oracle(&y, &ll[n - 1]);
    let want_kl = mean(kl.iter().copied());
    let want_total = want_bce + 0.2 * want_int + 100.0 * want_rank + 1e-4 * want_kl;
    for (g, w) in [
        (got.bce, want_bce),
        (got.int, want_int),
        (got.rank, want_rank),
        (got.kl, want_kl),
        (got.total, want_total),
    ] {
        assert!((g - w).abs() < 1e-10, "{g} vs {w}");
    }
    let recombined = got.bce + 0.2 * got.int + 100.0 * got.rank + 1e-4 * got.kl;
    assert!((got.total - recombined).abs() <= 1e-12 * got.total.abs().max(1.0));
}

#[test]
fn ranking_loss_ignores_one_sided_rows() {
    let y = tensor(&vec![vec![0.0; 4], vec![1.0; 4], vec![1.0, 0.0, 0.0, 0.0]]);
    let w = ranking_weights(&y).unwrap();
    assert!(w.data()[..32].iter().all(|&v| v == 0.0));
    let third = &w.data()[32..];
    assert_eq!(third.iter().filter(|&&v| v != 0.0).count(), 3);
    assert!(third[1..4].iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn ranking_loss_gradient_pushes_positives_up() {
    let y = vec![vec![1.0, 0.0, 1.0, 0.0]];
    let mut tape = Tape::new();
    let yv = tape.constant(tensor(&y));
    let pv = tape.leaf(tensor(&vec![vec![0.4, 0.6, 0.5, 0.2]]));
    let loss = ranking_loss(&mut tape, yv, pv).unwrap();
    tape.backward(loss).unwrap();
    let g = tape.grad(pv).unwrap();
    assert!(g[0] < 0.0 && g[2] < 0.0 && g[1] > 0.0 && g[3] > 0.0);
    assert!((g.iter().sum::<f64>()).abs() < 1e-15);
}

fn rows_and_probs() -> impl Strategy<Value = (Mat, Mat, Mat)> {
    (1usize..5, 2usize..7).prop_flat_map(|(b, l)| {
        let m = move |lo: f64, hi: f64| prop::collection::vec(prop::collection::vec(lo..hi, l), b);
        let y = prop::collection::vec(prop::collection::vec(prop::bool::ANY.prop_map(|v| f64::from(u8::from(v))), l), b);
        (y, m(0.0, 1.0), m(0.0, 1.0))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn losses_are_label_permutation_invariant((y, pf, pl) in rows_and_probs(), seed in any::<u64>()) {
        let l = y[0].len();
        let mut perm: Vec<usize> = (0..l).collect();
        let mut r = rng(seed);
        use rand::seq::SliceRandom;
        perm.shuffle(&mut r);
        let apply = |m: &Mat| -> Mat { m.iter().map(|row| perm.iter().map(|&k| row[k]).collect()).collect() };
        let eval = |y: &Mat, pf: &Mat, pl: &Mat| {
            let mut tape = Tape::new();
            let yv = tape.constant(tensor(y));
            let fv = tape.constant(tensor(pf));
            let lv = tape.constant(tensor(pl));
            let b = loss_bce(&mut tape, yv, fv, lv).unwrap();
            let rk = ranking_loss(&mut tape, yv, fv).unwrap();
            (value(&tape, b), value(&tape, rk))
        };
        let (b0, r0) = eval(&y, &pf, &pl);
        let (b1, r1) = eval(&apply(&y), &apply(&pf), &apply(&pl));
        prop_assert!((b0 - b1).abs() < 1e-12);
        prop_assert!((r0 - r1).abs() < 1e-12);
    }

    #[test]
    fn components_are_nonnegative_and_total_is_weighted_sum(
        (y, pf, pl) in rows_and_probs(),
        lam in prop::collection::vec(0.0f64..10.0, 4),
        kl in 0.0f64..50.0,
    ) {
        let b = y.len();
        let w = LossWeights::new(lam[0], lam[1], lam[2], lam[3]).unwrap();
        let mut tape = Tape::new();
        let yv = tape.constant(tensor(&y));
        let tf = trace(&mut tape, &[pl.clone(), pf.clone()]);
        let tl = trace(&mut tape, &[pf.clone(), pl.clone()]);
        let kv = tape.constant(Tensor::full(&[b], kl));
        let got = total_loss(&mut tape, yv, &tf, &tl, kv, &w).unwrap().breakdown(&tape);
        prop_assert!(got.bce >= 0.0 && got.int >= 0.0 && got.rank >= 0.0 && got.kl >= 0.0);
        let sum = lam[0] * got.bce + lam[1] * got.int + lam[2] * got.rank + lam[3] * got.kl;
        prop_assert!((got.total - sum).abs() <= 1e-12 * sum.abs().max(1.0));
    }

    #[test]
    fn ranking_loss_decreases_as_a_positive_rises(l in 2usize..7, seed in any::<u64>(), bump in 1e-3f64..0.5) {
        let mut r = rng(seed);
        let mut y = binary_mat(&mut r, 1, l, 0.5);
        y[0][0] = 1.0;
        y[0][1] = 0.0;
        let p = probs(&mut r, 1, l);
        let mut up = p.clone();
        up[0][0] += bump;
        let eval = |p: &Mat| {
            let mut tape = Tape::new();
            let yv = tape.constant(tensor(&y));
            let pv = tape.constant(tensor(p));
            let v = ranking_loss(&mut tape, yv, pv).unwrap();
            value(&tape, v)
        };
        prop_assert!(eval(&up) < eval(&p));
        prop_assert!((eval(&p) - rank_oracle(&y, &p)).abs() < 1e-13);
    }
}

#[test]
fn weights_reject_negative_or_non_finite() {
    assert!(LossWeights::new(-1.0, 0.0, 0.0, 0.0).is_err());
    assert!(LossWeights::new(1.0, f64::NAN, 0.0, 0.0).is_err());
    assert!(LossWeights::new(1.0, 0.0, f64::INFINITY, 0.0).is_err());
    assert!(LossWeights::new(0.0, 0.0, 0.0, 0.0).is_ok());
}
