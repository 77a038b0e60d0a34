//! Score transform, centred partial sums, count estimation, the global test, the mixture
//! comparator and subgroup stability.

use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use regionsel::randthresh::{
    all_permutations, cond_expectations, d_statistic, estimate_count, eta_profile, expected_score, ggm_fit,
    null_critical_value, stability_over, threshold_stability, threshold_stability_exhaustive, transform, GgmOptions,
    Norm, NullCdf, OrderedSample, ThresholdOptions, Variance, Window,
};

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// n Gaussians, the first `active` shifted by uniform means in [lo, hi].
fn sparse_sample(seed: u64, n: usize, active: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = normals(&mut rng, n);
    for v in y.iter_mut().take(active) {
        *v += rng.random_range(lo..hi);
    }
    y
}

// ----------------------------------------------------------------------------
// transform

#[test]
fn score_reference_values() {
    let os = transform(&[0.0, 1.959964, -1.959964], &NullCdf::standard()).unwrap();
    assert_eq!(os.magnitude, vec![1.959964, 1.959964, 0.0]);
    // ties keep input order
    assert_eq!(os.order, vec![1, 2, 0]);
    assert_relative_eq!(os.scores[0], 20f64.ln(), epsilon = 1e-5);
    assert_relative_eq!(os.scores[0], 2.9957, epsilon = 1e-4);
    assert_eq!(os.scores[2], 0.0);
    assert!(transform(&[1.0, f64::NAN], &NullCdf::standard()).is_err());
}

#[test]
fn null_scores_are_unit_exponential() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let n = 5000;
    for sigma in [1.0, 2.5] {
        let y: Vec<f64> = normals(&mut rng, n).into_iter().map(|v| v * sigma).collect();
        let os = transform(&y, &NullCdf::gaussian(sigma).unwrap()).unwrap();
        let mut x = os.scores.clone();
        x.sort_by(f64::total_cmp);
        let d = x
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let f = 1.0 - (-v).exp();
                (f - i as f64 / n as f64)
                    .abs()
                    .max(((i + 1) as f64 / n as f64 - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(d < 1.6276 / (n as f64).sqrt(), "KS distance {d} at sigma {sigma}");
    }
}

proptest! {
    #[test]
    fn scores_non_increasing(y in prop::collection::vec(-30.0f64..30.0, 1..200)) {
        let os = transform(&y, &NullCdf::standard()).unwrap();
        for w in os.scores.windows(2) {
            prop_assert!(w[0] >= w[1]);
        }
        prop_assert!(os.scores.iter().all(|s| s.is_finite()));
    }
}

// ----------------------------------------------------------------------------
// expectations

#[test]
fn expectation_examples() {
    assert_relative_eq!(expected_score(3, 1), 11.0 / 6.0, epsilon = 1e-15);
    assert_relative_eq!(cond_expectations(3, 0, 1).0, 11.0 / 6.0, epsilon = 1e-15);
    for n in [1, 5, 40] {
        let (e, b) = cond_expectations(n, 0, n);
        assert_relative_eq!(e, n as f64, epsilon = 1e-12);
        assert_relative_eq!(b, 1.0, epsilon = 1e-12);
    }
}

proptest! {
    #[test]
    fn partial_sum_expectation_is_sum_of_order_expectations(n in 2usize..60, k in 0usize..30, j in 1usize..60) {
        prop_assume!(k < n && j <= n - k);
        let m = n - k;
        let direct: f64 = (1..=j).map(|i| expected_score(m, i)).sum();
        let (e, b) = cond_expectations(n, k, j);
        prop_assert!((e - direct).abs() < 1e-10 * direct.max(1.0));
        prop_assert!((b - direct / m as f64).abs() < 1e-12);
    }
}

// ----------------------------------------------------------------------------
// profile

/// η_k computed literally: partial sums, ratio-rule centring, max norm over the window.
fn literal_profile(x: &[f64], window: impl Fn(usize) -> usize, kmax: usize) -> Vec<f64> {
    let n = x.len();
    (0..=kmax)
        .map(|k| {
            let m = n - k;
            let w = window(k);
            let t = |j: usize| x[k..k + j].iter().sum::<f64>();
            let et = |j: usize| (1..=j).map(|i| expected_score(m, i)).sum::<f64>();
            (1..=w).map(|j| (t(j) - et(j) / et(w) * t(w)).abs()).fold(0.0, f64::max) / (w as f64).sqrt()
        })
        .collect()
}

fn sample_from_scores(scores: Vec<f64>) -> OrderedSample {
    let n = scores.len();
    OrderedSample {
        magnitude: scores.clone(),
        order: (0..n).collect(),
        scores,
    }
}

#[test]
fn six_point_hand_profile() {
    let x = vec![4.0, 2.5, 1.2, 0.9, 0.4, 0.1];
    let os = sample_from_scores(x.clone());
    let fixed = eta_profile(&os, Window::Fixed { width: 3 }, Norm::Max).unwrap();
    let want = literal_profile(&x, |_| 3, 3);
    assert_eq!(fixed.len(), 4);
    for (a, b) in fixed.iter().zip(&want) {
        assert_relative_eq!(a, b, epsilon = 1e-12);
    }
    // k = 0 by hand: m = 6, E T_j = j(1 + H_6 - H_j)
    let h6 = 49.0 / 20.0;
    let et: [f64; 3] = [1.0 + h6 - 1.0, 2.0 * (1.0 + h6 - 1.5), 3.0 * (1.0 + h6 - 11.0 / 6.0)];
    let t = [4.0f64, 6.5, 7.7];
    let hand = (0..3).map(|j| (t[j] - et[j] / et[2] * t[2]).abs()).fold(0.0, f64::max) / 3f64.sqrt();
    assert_relative_eq!(fixed[0], hand, epsilon = 1e-12);

    let varying = eta_profile(&os, Window::Varying { kappa: Some(1) }, Norm::Max).unwrap();
    let want = literal_profile(&x, |k| 6 - k, 5);
    for (a, b) in varying.iter().zip(&want) {
        assert_relative_eq!(a, b, epsilon = 1e-12);
    }
}

#[test]
fn expected_scores_give_zero_discrepancy() {
    for n in [10, 100, 1000] {
        let os = sample_from_scores((1..=n).map(|i| expected_score(n, i)).collect());
        let eta = eta_profile(&os, Window::Varying { kappa: None }, Norm::Max).unwrap();
        assert!(eta[0].abs() < 1e-12, "{}", eta[0]);
        let d = d_statistic(&[0.0; 1], &NullCdf::standard()).unwrap();
        assert_eq!(d, 0.0);
    }
}

proptest! {
    #[test]
    fn fixed_and_varying_windows_coincide(seed in any::<u64>(), n in 10usize..80) {
        let y = sparse_sample(seed, n, n / 5, 1.0, 4.0);
        let os = transform(&y, &NullCdf::standard()).unwrap();
        let varying = eta_profile(&os, Window::Varying { kappa: Some(1) }, Norm::Max).unwrap();
        for k in 0..n {
            let fixed = eta_profile(&os, Window::Fixed { width: n - k }, Norm::Max).unwrap();
            prop_assert!((fixed[k] - varying[k]).abs() < 1e-10);
        }
        for p in [1.0, 2.0, 3.5] {
            let vp = eta_profile(&os, Window::Varying { kappa: Some(1) }, Norm::Lp(p)).unwrap();
            let fp = eta_profile(&os, Window::Fixed { width: n }, Norm::Lp(p)).unwrap();
            prop_assert!((vp[0] - fp[0]).abs() < 1e-10);
        }
    }
}

// ----------------------------------------------------------------------------
// count estimation

fn opts(variance: Variance, window: Window, full: bool) -> ThresholdOptions {
    ThresholdOptions {
        variance,
        window,
        norm: Norm::Max,
        full_profile: full,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pruned_search_matches_full_profile(seed in any::<u64>(), n in 40usize..400, frac in 0.0f64..0.4, hi in 1.0f64..8.0) {
        let y = sparse_sample(seed, n, (frac * n as f64) as usize, 0.5, hi);
        for variance in [Variance::Known(1.0), Variance::Unknown] {
            for window in [Window::Varying { kappa: None }, Window::Fixed { width: 10 }] {
                let a = estimate_count(&y, &opts(variance, window, false)).unwrap();
                let b = estimate_count(&y, &opts(variance, window, true)).unwrap();
                prop_assert_eq!(a.count, b.count);
                prop_assert_eq!(&a.selected, &b.selected);
                prop_assert!(b.eta.iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn selection_is_top_k_and_scale_free(seed in any::<u64>(), n in 40usize..300, c in 0.01f64..100.0) {
        let y = sparse_sample(seed, n, n / 4, 2.0, 6.0);
        let r = estimate_count(&y, &ThresholdOptions::default()).unwrap();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| y[b].abs().total_cmp(&y[a].abs()));
        let mut top = idx[..r.count].to_vec();
        top.sort_unstable();
        prop_assert_eq!(&r.selected, &top);
        if r.count > 0 {
            prop_assert_eq!(r.threshold, y[idx[r.count - 1]].abs());
        } else {
            prop_assert!(r.threshold.is_infinite());
        }
        let ys: Vec<f64> = y.iter().map(|v| v * c).collect();
        let rs = estimate_count(&ys, &ThresholdOptions::default()).unwrap();
        prop_assert_eq!(rs.selected, r.selected);
    }
}

#[test]
fn count_does_not_depend_on_kappa_when_minimum_is_in_range() {
    for seed in 0..5 {
        let y = sparse_sample(seed, 5000, 1000, 4.0, 8.0);
        let base = estimate_count(&y, &opts(Variance::Unknown, Window::Varying { kappa: Some(50) }, true)).unwrap();
        for kappa in [100, 250, 1000] {
            let kmax = 5000 - kappa;
            let r = estimate_count(
                &y,
                &opts(Variance::Unknown, Window::Varying { kappa: Some(kappa) }, true),
            )
            .unwrap();
            if base.count <= kmax {
                assert_eq!(r.count, base.count, "seed {seed}, kappa {kappa}");
            }
        }
    }
}

#[test]
fn too_few_observations_or_empty_range_fail() {
    assert!(estimate_count(&[1.0; 9], &ThresholdOptions::default()).is_err());
    assert!(estimate_count(&[1.0; 20], &opts(Variance::Unknown, Window::default(), false)).is_err());
    assert!(estimate_count(
        &[1.0; 20],
        &opts(Variance::Known(1.0), Window::Fixed { width: 21 }, false)
    )
    .is_err());
}

// ----------------------------------------------------------------------------
// global test

#[test]
fn null_test_level_and_power() {
    let n = 100;
    let crit = null_critical_value(n, 0.05, 10_000, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cdf = NullCdf::standard();
    let trials = 1000;
    let rejections = (0..trials)
        .filter(|_| d_statistic(&normals(&mut rng, n), &cdf).unwrap() > crit)
        .count();
    let rate = rejections as f64 / trials as f64;
    let sd = (0.05f64 * 0.95 / trials as f64).sqrt();
    assert!((rate - 0.05).abs() < 3.0 * sd, "rejection rate {rate}");

    let power = (0..100)
        .filter(|_| {
            let mut y = normals(&mut rng, n);
            y[0] += 20.0;
            d_statistic(&y, &cdf).unwrap() > crit
        })
        .count();
    assert!(power >= 99, "power {power}/100");
}

// ----------------------------------------------------------------------------
// mixture comparator

#[test]
fn mixture_on_pure_noise_detects_nothing() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = normals(&mut rng, 50_000);
        let fit = ggm_fit(&y, &GgmOptions::default()).unwrap();
        let max = y.iter().copied().fold(f64::MIN, f64::max);
        assert!(
            fit.positive.weight < 0.05,
            "seed {seed}: weight {}",
            fit.positive.weight
        );
        assert!(
            fit.threshold > max,
            "seed {seed}: threshold {} <= max {max}",
            fit.threshold
        );
        assert!(fit.detections(&y).is_empty());
    }
}

#[test]
fn mixture_recovers_separated_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = Gamma::new(4.0, 2.0).unwrap();
    let y: Vec<f64> = (0..20_000)
        .map(|i| {
            if i % 5 == 0 {
                g.sample(&mut rng)
            } else {
                StandardNormal.sample(&mut rng)
            }
        })
        .collect();
    let fit = ggm_fit(&y, &GgmOptions::default()).unwrap();
    assert!(
        (fit.positive.weight - 0.2).abs() < 0.05,
        "weight {}",
        fit.positive.weight
    );
    assert!((fit.null_weight + fit.positive.weight - 1.0).abs() < 1e-9);
    let p = fit.posterior_active(fit.threshold);
    assert!(p >= 0.5 - 1e-9, "{p}");
}

// ----------------------------------------------------------------------------
// stability

#[test]
fn stability_estimates() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let maps: Vec<Vec<f64>> = (0..12)
        .map(|_| normals(&mut rng, 50).iter().map(|v| v + 3.0).collect())
        .collect();
    let refs: Vec<&[f64]> = maps.iter().map(Vec::as_slice).collect();

    let c = threshold_stability(&refs, |_| Ok(2.5), 5, 100, 1).unwrap();
    assert_eq!((c.mean, c.variance), (2.5, 0.0));

    let first_mean = |g: &[&[f64]]| Ok(g[0].iter().sum::<f64>() / g[0].len() as f64);
    let s = threshold_stability(&refs, first_mean, 6, 2000, 2).unwrap();
    // population mean 3; the statistic has variance 1/50 per subject
    assert!((s.mean - 3.0).abs() < 3.0 * (1.0f64 / 50.0).sqrt(), "{}", s.mean);
    assert!(threshold_stability(&refs, first_mean, 12, 5, 0).is_err());
}

#[test]
fn exhaustive_stability_enumerates_all_24_orders() {
    let maps: Vec<Vec<f64>> = vec![vec![1.0, 2.0], vec![5.0, -1.0], vec![0.5, 0.5], vec![3.0, 9.0]];
    let refs: Vec<&[f64]> = maps.iter().map(Vec::as_slice).collect();
    let stat = |g: &[&[f64]]| Ok(g.iter().map(|m| m[0] * m[1]).sum::<f64>() + g[0][0]);
    let ex = threshold_stability_exhaustive(&refs, stat, 2).unwrap();
    assert_eq!(ex.values.len(), 24);

    // hand-written enumeration of ordered pairs (first two of each permutation)
    let mut vals = Vec::new();
    for a in 0..4 {
        for b in 0..4 {
            if a != b {
                // each ordered pair heads 2 of the 24 permutations
                let v = maps[a][0] * maps[a][1] + maps[b][0] * maps[b][1] + maps[a][0];
                vals.extend([v, v]);
            }
        }
    }
    let mean = vals.iter().sum::<f64>() / 24.0;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 24.0;
    assert_relative_eq!(ex.mean, mean, epsilon = 1e-12);
    assert_relative_eq!(ex.variance, var, epsilon = 1e-12);

    let perms: Vec<Vec<usize>> = all_permutations(4).collect();
    let mut sorted = perms.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), 24);
    let mc = stability_over(&refs, stat, 2, perms).unwrap();
    assert_eq!(mc, ex);
}
