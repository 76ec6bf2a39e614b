use proptest::prelude::*;

use tips_core::backtest::{portfolio_returns, select_top_k};
use tips_core::data::features::{make_label, rolling_zscore};
use tips_core::data::{synth_market, Regime, SynthSpec};
use tips_core::diagnostics::alignment_from_vectors;
use tips_core::objectives::{ensemble_target, smooth_target};
use tips_core::priors::{alibi_bias, alibi_slopes, fixed_periodic_bias, periodic_value, PriorKind};
use tips_core::stats::cosine;

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

proptest! {
    #[test]
    fn periodic_value_is_symmetric_and_bounded(d in 0usize..200, p in 1usize..40) {
        let v = periodic_value(d, p);
        prop_assert!(v >= 0.0 && v <= p as f64 / 2.0);
        prop_assert_eq!(v, periodic_value(d + p, p));
        // Distance d and p - d are equally far from a multiple of p.
        prop_assert_eq!(v, periodic_value((p - d % p) % p, p));
    }

    #[test]
    fn fixed_periodic_bias_is_symmetric(t in 1usize..24, periods in prop::collection::vec(1usize..25, 1..5)) {
        let b = fixed_periodic_bias(t, &periods).unwrap();
        for h in 0..periods.len() {
            for i in 0..t {
                for j in 0..t {
                    prop_assert_eq!(b.at(&[h, i, j]), b.at(&[h, j, i]));
                }
            }
        }
    }

    #[test]
    fn alibi_is_symmetric_nonpositive_and_decays(t in 2usize..24, heads in 1usize..9) {
        let slopes = alibi_slopes(heads);
        prop_assert!(slopes.windows(2).all(|w| w[0] < w[1]));
        let b = alibi_bias(t, &slopes);
        for h in 0..heads {
            for i in 0..t {
                prop_assert_eq!(b.at(&[h, i, i]), 0.0);
                for j in 0..t {
                    prop_assert!(b.at(&[h, i, j]) <= 0.0);
                    prop_assert_eq!(b.at(&[h, i, j]), b.at(&[h, j, i]));
                    if j + 1 < t && j >= i {
                        prop_assert!(b.at(&[h, i, j + 1]) < b.at(&[h, i, j]));
                    }
                }
            }
        }
    }

    #[test]
    fn smoothing_keeps_argmax_and_mass(logits in prop::collection::vec(-5.0f64..5.0, 2..30), eps in 0.0f64..0.99) {
        let p = ensemble_target(&[logits.clone()], 1.0).unwrap();
        let s = smooth_target(&p, eps).unwrap();
        prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(s.iter().all(|v| *v > 0.0));
        let top = argmax(&p);
        prop_assert!(s.iter().all(|v| *v <= s[top] + 1e-15));
    }

    #[test]
    fn ensemble_target_ignores_logit_shifts(
        teachers in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 8), 1..8),
        shift in -50.0f64..50.0,
        tau in 0.05f64..5.0,
    ) {
        let a = ensemble_target(&teachers, tau).unwrap();
        let shifted: Vec<Vec<f64>> = teachers.iter().map(|t| t.iter().map(|v| v + shift).collect()).collect();
        let b = ensemble_target(&shifted, tau).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_ignores_positive_scale(
        v in prop::collection::vec(-2.0f64..2.0, 2..20),
        w in prop::collection::vec(-2.0f64..2.0, 2..20),
        c in 0.01f64..100.0,
    ) {
        let n = v.len().min(w.len());
        let (v, w) = (&v[..n], &w[..n]);
        let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
        match (cosine(v, w), cosine(&scaled, w)) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-9),
            (a, b) => prop_assert_eq!(a.is_some(), b.is_some()),
        }
    }

    #[test]
    fn alignment_ignores_rescaled_attention(seed in 0u64..500, c in 0.1f64..10.0) {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut vecs = |n: usize| -> Vec<Vec<f64>> { (0..n).map(|_| (0..6).map(|_| r.random_range(0.0..1.0)).collect()).collect() };
        let student = vecs(5);
        let teachers: Vec<(PriorKind, Vec<Vec<f64>>)> = PriorKind::ALL.iter().map(|&k| (k, vecs(5))).collect();
        let base = alignment_from_vectors(&student, &teachers).unwrap();
        let scaled: Vec<Vec<f64>> = student.iter().map(|v| v.iter().map(|x| x * c).collect()).collect();
        let again = alignment_from_vectors(&scaled, &teachers).unwrap();
        prop_assert_eq!(&base.fractions, &again.fractions);
        prop_assert!((base.fractions.values().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn portfolio_weights_form_a_simplex(pred in prop::collection::vec(-10.0f64..10.0, 1..40), k in 1usize..40) {
        let k = k.min(pred.len());
        let (sel, w) = select_top_k(&pred, k);
        prop_assert_eq!(sel.len(), k);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|x| *x >= 0.0));
        let floor = sel.iter().map(|&i| pred[i]).fold(f64::INFINITY, f64::min);
        let outside = (0..pred.len()).filter(|i| !sel.contains(i)).all(|i| pred[i] <= floor);
        prop_assert!(outside);
    }

    #[test]
    fn portfolio_is_shift_invariant(seed in 0u64..300, shift in -20.0f64..20.0, w in 1usize..6) {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let preds: Vec<Vec<f64>> = (0..12).map(|_| (0..9).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let rets: Vec<Vec<f64>> = (0..12).map(|_| (0..9).map(|_| r.random_range(-0.05..0.05)).collect()).collect();
        let moved: Vec<Vec<f64>> = preds.iter().map(|p| p.iter().map(|v| v + shift).collect()).collect();
        let a = portfolio_returns(&preds, &rets, 3, w).unwrap();
        let b = portfolio_returns(&moved, &rets, 3, w).unwrap();
        for (x, y) in a.daily.iter().zip(&b.daily) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zscore_uses_only_the_past(x in prop::collection::vec(-5.0f64..5.0, 30..60), cut in 20usize..29, noise in -3.0f64..3.0) {
        let base = rolling_zscore(&x, 20);
        let mut y = x.clone();
        for v in &mut y[cut + 1..] {
            *v += noise;
        }
        let moved = rolling_zscore(&y, 20);
        prop_assert_eq!(&base.values[..=cut], &moved.values[..=cut]);
    }

    #[test]
    fn label_looks_exactly_q_minus_one_days_ahead(close in prop::collection::vec(1.0f64..100.0, 10..40), q in 1usize..8) {
        let l = make_label(&close, q).unwrap();
        for t in 0..close.len() {
            match l[t] {
                Some(v) => prop_assert_eq!(v, (close[t + q - 1] - close[t]) / close[t]),
                None => prop_assert!(t + q - 1 >= close.len()),
            }
        }
    }
}

#[test]
fn synthetic_market_is_seed_deterministic() {
    let spec = SynthSpec::single(Regime::Momentum { coef: 0.5 }, 120, 10);
    let a = synth_market(&spec, 7).unwrap();
    let b = synth_market(&spec, 7).unwrap();
    let c = synth_market(&spec, 8).unwrap();
    assert!(a.bitwise_eq(&b));
    assert!(!a.bitwise_eq(&c));
}
