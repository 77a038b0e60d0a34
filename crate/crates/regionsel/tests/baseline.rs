//! t maps, p-value adjustment, sign-flip maxT and cluster-size calibration.

use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use regionsel::baseline::{
    adjust_pvalues, all_sign_patterns, cluster_size_test, clusters_above, max_t_null, permutation_max_t, t_map,
    Adjustment,
};
use regionsel::volume::{ScalarMap, SubjectData, VoxelGrid};
use statrs::distribution::{ContinuousCDF, StudentsT};

mod common;
use common::{bh_count_brute, bonferroni_brute};

fn subjects(grid: &VoxelGrid, rows: &[Vec<f64>]) -> Vec<SubjectData> {
    rows.iter()
        .map(|r| {
            SubjectData::new(
                ScalarMap::new(grid.clone(), r.clone()).unwrap(),
                ScalarMap::zeros(grid.clone()),
            )
            .unwrap()
        })
        .collect()
}

fn noise_rows(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect()
}

/// t at one voxel straight from the definition.
fn t_oracle(col: &[f64]) -> f64 {
    let n = col.len() as f64;
    let m = col.iter().sum::<f64>() / n;
    let sd = (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
    m / (sd / (n - 1.0).sqrt())
}

// ----------------------------------------------------------------------------
// t map

#[test]
fn t_map_examples() {
    let g = VoxelGrid::new(&[3]).unwrap();
    let t = t_map(&subjects(
        &g,
        &[vec![1.0, -1.0, 0.0], vec![2.0, 1.0, 0.0], vec![3.0, 0.0, 0.0]],
    ))
    .unwrap();
    assert_relative_eq!(t.values[0], 2.0 * 3f64.sqrt(), epsilon = 1e-12);
    assert_relative_eq!(t.values[0], 3.4641, epsilon = 1e-4);
    assert_eq!(t.values[1], 0.0);
    assert!(!t.is_defined(2));
    assert_eq!(t.df, 2);
    assert!(t_map(&subjects(&g, &[vec![1.0; 3]])).is_err());
}

proptest! {
    #[test]
    fn t_map_matches_definition_after_shift(seed in any::<u64>(), c in -5.0f64..5.0) {
        let g = VoxelGrid::new(&[7]).unwrap();
        let rows: Vec<Vec<f64>> = noise_rows(seed, 6, 7).into_iter().map(|r| r.into_iter().map(|v| v + c).collect()).collect();
        let t = t_map(&subjects(&g, &rows)).unwrap();
        for k in 0..7 {
            let col: Vec<f64> = rows.iter().map(|r| r[k]).collect();
            prop_assert!((t.values[k] - t_oracle(&col)).abs() < 1e-9 * (1.0 + t.values[k].abs()));
        }
    }
}

// ----------------------------------------------------------------------------
// adjustment

#[test]
fn adjustment_examples() {
    let b = adjust_pvalues(&[0.001, 0.04], Adjustment::Bonferroni, 0.05).unwrap();
    assert_eq!(b.rejected, vec![0]);
    assert_eq!(b.threshold, 0.025);
    let h = adjust_pvalues(&[0.01, 0.02, 0.9], Adjustment::Bh, 0.05).unwrap();
    assert_eq!(h.rejected, vec![0, 1]);
    for m in [Adjustment::Bonferroni, Adjustment::Bh] {
        assert!(adjust_pvalues(&[1.0; 5], m, 0.05).unwrap().rejected.is_empty());
    }
    assert!(adjust_pvalues(&[1.2], Adjustment::Bh, 0.05).is_err());
}

proptest! {
    #[test]
    fn adjustments_match_brute_force(p in prop::collection::vec(0.0f64..1.0, 1..40), alpha in 0.001f64..0.3) {
        let d = p.len();
        let bon = adjust_pvalues(&p, Adjustment::Bonferroni, alpha).unwrap();
        prop_assert_eq!(&bon.rejected, &bonferroni_brute(&p, alpha));
        let kstar = bh_count_brute(&p, alpha);
        let bh = adjust_pvalues(&p, Adjustment::Bh, alpha).unwrap();
        prop_assert_eq!(bh.rejected.len(), kstar);
        if kstar > 0 {
            let cut = kstar as f64 * alpha / d as f64;
            prop_assert!(bh.rejected.iter().all(|&k| p[k] <= cut));
        }
        prop_assert!(bon.rejected.iter().all(|k| bh.rejected.contains(k)));
    }
}

// ----------------------------------------------------------------------------
// maxT

#[test]
fn all_zero_data_rejects_nothing() {
    let g = VoxelGrid::new(&[5]).unwrap();
    let r = permutation_max_t(&subjects(&g, &vec![vec![0.0; 5]; 4]), 0.05, 200, 1).unwrap();
    assert!(r.rejected.is_empty());
    assert_eq!(r.threshold, 0.0);
}

#[test]
fn exhaustive_sign_flips_on_four_subjects() {
    let g = VoxelGrid::new(&[6]).unwrap();
    let rows = noise_rows(5, 4, 6);
    let null = max_t_null(&subjects(&g, &rows), all_sign_patterns(4)).unwrap();
    assert_eq!(null.len(), 16);
    let mut seen = Vec::new();
    for mask in 0..16u32 {
        let flipped: Vec<Vec<f64>> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| r.iter().map(|v| if mask >> i & 1 == 1 { -v } else { *v }).collect())
            .collect();
        let m = (0..6)
            .map(|k| t_oracle(&flipped.iter().map(|r| r[k]).collect::<Vec<_>>()))
            .fold(f64::NEG_INFINITY, f64::max);
        seen.push(m);
    }
    for (a, b) in null.iter().zip(&seen) {
        assert_relative_eq!(a, b, epsilon = 1e-10);
    }
    // subject order does not matter: same multiset of null maxima
    let mut rev = rows.clone();
    rev.reverse();
    let mut a = max_t_null(&subjects(&g, &rev), all_sign_patterns(4)).unwrap();
    let mut b = null.clone();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    for (x, y) in a.iter().zip(&b) {
        assert_relative_eq!(x, y, epsilon = 1e-10);
    }
}

#[test]
fn max_t_controls_familywise_error() {
    let g = VoxelGrid::new(&[40]).unwrap();
    let trials = 500;
    let mut hits = 0;
    for s in 0..trials {
        let data = subjects(&g, &noise_rows(1000 + s, 10, 40));
        let r = permutation_max_t(&data, 0.05, 200, s).unwrap();
        hits += usize::from(!r.rejected.is_empty());
    }
    let rate = hits as f64 / trials as f64;
    let sd = (0.05f64 * 0.95 / trials as f64).sqrt();
    assert!((rate - 0.05).abs() < 3.0 * sd, "familywise error rate {rate}");
}

#[test]
fn max_t_threshold_dominates_pointwise_quantile() {
    let g = VoxelGrid::new(&[50]).unwrap();
    let q = StudentsT::new(0.0, 1.0, 9.0).unwrap().inverse_cdf(0.95);
    for s in 0..10 {
        let data = subjects(&g, &noise_rows(s, 10, 50));
        let r = permutation_max_t(&data, 0.05, 500, s).unwrap();
        assert!(r.threshold >= q, "seed {s}: {} < {q}", r.threshold);
        assert_eq!(r, permutation_max_t(&data, 0.05, 500, s).unwrap());
    }
}

// ----------------------------------------------------------------------------
// clusters

/// 1D rows smoothed by a moving average, so null clusters span several voxels.
fn smooth_rows(seed: u64, n: usize, d: usize, width: usize) -> Vec<Vec<f64>> {
    noise_rows(seed, n, d + width)
        .into_iter()
        .map(|r| {
            (0..d)
                .map(|k| r[k..k + width].iter().sum::<f64>() / (width as f64).sqrt())
                .collect()
        })
        .collect()
}

#[test]
fn isolated_voxel_does_not_survive_a_larger_critical_size() {
    let g = VoxelGrid::new(&[60]).unwrap();
    let mut rows = smooth_rows(3, 12, 60, 6);
    // one voxel far above its neighbours
    for (i, r) in rows.iter_mut().enumerate() {
        r[30] = 8.0 + 0.1 * i as f64;
        r[29] = -r[29].abs();
        r[31] = -r[31].abs();
    }
    let data = subjects(&g, &rows);
    let r = cluster_size_test(&data, 0.01, 0.05, 500, 4).unwrap();
    let critical = r.critical_size.unwrap();
    assert!(critical >= 2, "critical size {critical}");
    let t = t_map(&data).unwrap();
    let single = clusters_above(&t, r.threshold)
        .into_iter()
        .find(|c| c.voxels.contains(&30))
        .unwrap();
    assert_eq!(single.size(), 1);
    assert!(!r.rejected.contains(&30));
    assert!(r.clusters.iter().all(|c| c.size() > critical));
    assert_eq!(r, cluster_size_test(&data, 0.01, 0.05, 500, 4).unwrap());
}

#[test]
fn looser_forming_level_does_not_separate_blobs() {
    let g = VoxelGrid::new(&[24, 24]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let centres = [(8.0, 8.0), (8.0, 15.0)];
    let rows: Vec<Vec<f64>> = (0..15)
        .map(|_| {
            (0..576)
                .map(|k| {
                    let (r, c) = ((k / 24) as f64, (k % 24) as f64);
                    let signal: f64 = centres
                        .iter()
                        .map(|(a, b)| 1.5 * (-((r - a).powi(2) + (c - b).powi(2)) / 8.0).exp())
                        .sum();
                    signal + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                })
                .collect()
        })
        .collect();
    let data = subjects(&g, &rows);
    let strict = cluster_size_test(&data, 1e-4, 0.05, 300, 1).unwrap();
    let loose = cluster_size_test(&data, 1e-2, 0.05, 300, 1).unwrap();
    assert!(
        loose.clusters.len() <= strict.clusters.len(),
        "{} clusters at 1e-2, {} at 1e-4",
        loose.clusters.len(),
        strict.clusters.len()
    );
    assert!(loose.threshold < strict.threshold);
}
