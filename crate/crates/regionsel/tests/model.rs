//! Block likelihood, data likelihood, priors and sufficient statistics against direct
//! constructions.

use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regionsel::deform::{build_lattice, displace_index, interpolate_field, DisplacementSet};
use regionsel::model::density::{ln_inv_gamma, ln_normal};
use regionsel::model::{
    block_loglik, data_loglik_given_w, log_complete, log_prior, neg_log_complete_from_stats, sufficient_stats,
    GroupParams, Hyperparams, LatentState, Network, Observations,
};
use regionsel::volume::{Parcellation, ScalarMap, SubjectData, VoxelGrid};
use regionsel::Error;

mod common;
use common::dense_loglik;

#[test]
fn block_matches_dense_on_1000_random_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..=20);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let s2: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
        let eta = rng.random_range(-5.0..5.0);
        let nu2 = rng.random_range(0.01..10.0);
        let sigma2 = rng.random_range(0.05..5.0);
        let a = block_loglik(&y, &s2, eta, nu2, sigma2);
        let b = dense_loglik(&y, &s2, eta, nu2, sigma2);
        worst = worst.max((a - b).abs());
    }
    assert!(worst <= 1e-8, "largest deviation {worst}");
}

#[test]
fn block_scalar_case() {
    let v = block_loglik(&[0.0], &[1.0], 0.0, 1.0, 1.0);
    assert_relative_eq!(v, -0.5 * (2.0 * std::f64::consts::PI * 3.0).ln(), epsilon = 1e-14);
    assert_relative_eq!(v, -1.46824, epsilon = 1e-5);
}

#[test]
fn block_without_between_variance_is_independent() {
    let y = [0.3, -1.2, 2.5];
    let s2 = [0.5, 1.0, 0.0];
    let direct: f64 = y.iter().zip(&s2).map(|(y, s)| ln_normal(*y, 1.0, 2.0 + s)).sum();
    assert_relative_eq!(block_loglik(&y, &s2, 1.0, 0.0, 2.0), direct, epsilon = 1e-12);
}

// ----------------------------------------------------------------------------
// data likelihood given displacements

fn subjects_on(grid: &VoxelGrid, rng: &mut ChaCha8Rng, n: usize) -> Vec<SubjectData> {
    (0..n)
        .map(|_| {
            let y = (0..grid.len()).map(|_| rng.random_range(-3.0..3.0)).collect();
            let s = (0..grid.len()).map(|_| rng.random_range(0.1..2.0)).collect();
            SubjectData::new(
                ScalarMap::new(grid.clone(), y).unwrap(),
                ScalarMap::new(grid.clone(), s).unwrap(),
            )
            .unwrap()
        })
        .collect()
}

/// Group observations by explicitly enumerated displaced voxel, then sum dense blocks.
fn regroup_oracle(data: &[SubjectData], w: &DisplacementSet, theta: &GroupParams, parc: &Parcellation) -> f64 {
    let g = parc.grid();
    let r = g.rank();
    let mut blocks: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); g.len()];
    for (i, s) in data.iter().enumerate() {
        let u = interpolate_field(w, i);
        for l in 0..g.len() {
            let k = displace_index(g, l, &u[l * r..l * r + r]);
            blocks[k].0.push(s.effects().values()[l]);
            blocks[k].1.push(s.variances().values()[l]);
        }
    }
    blocks
        .iter()
        .enumerate()
        .filter(|(_, b)| !b.0.is_empty())
        .map(|(k, b)| {
            let j = parc.label(k);
            dense_loglik(&b.0, &b.1, theta.eta[j], theta.nu2[j], theta.sigma2[j])
        })
        .sum()
}

#[test]
fn data_loglik_matches_regrouping_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let grid = VoxelGrid::new(&[4]).unwrap();
    let parc = Parcellation::new(grid.clone(), vec![0, 0, 1, 1], 2).unwrap();
    let theta = GroupParams {
        eta: vec![0.5, -1.0],
        nu2: vec![1.5, 0.7],
        sigma2: vec![0.8, 1.3],
        sigma_s2: 1.0,
    };
    let lat = regionsel::deform::ControlLattice::new(grid.clone(), vec![[1, 0, 0], [3, 0, 0]], 1.5).unwrap();
    for _ in 0..50 {
        let data = subjects_on(&grid, &mut rng, 2);
        let w: Vec<f64> = (0..4).map(|_| rng.random_range(-1.5..1.5)).collect();
        let ds = DisplacementSet::from_weights(lat.clone(), 2, w).unwrap();
        let a = data_loglik_given_w(&data, &ds, &theta, &parc).unwrap();
        assert_relative_eq!(a, regroup_oracle(&data, &ds, &theta, &parc), epsilon = 1e-9);
    }
}

#[test]
fn data_loglik_single_pair_and_subject_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let grid = VoxelGrid::new(&[1]).unwrap();
    let parc = Parcellation::single(grid.clone());
    let theta = GroupParams::uniform(1, 0.3, 1.2, 0.9, 1.0);
    let data = subjects_on(&grid, &mut rng, 1);
    let ds = DisplacementSet::zeros(build_lattice(&grid, 1.0).unwrap(), 1);
    let v = data_loglik_given_w(&data, &ds, &theta, &parc).unwrap();
    let (y, s) = (data[0].effects().values()[0], data[0].variances().values()[0]);
    assert_relative_eq!(v, block_loglik(&[y], &[s], 0.3, 1.2, 0.9), epsilon = 1e-14);

    let grid = VoxelGrid::new(&[6, 5]).unwrap();
    let parc = Parcellation::single(grid.clone());
    let mut data = subjects_on(&grid, &mut rng, 4);
    let lat = build_lattice(&grid, 1.0).unwrap();
    let b = lat.len();
    let w: Vec<f64> = (0..4 * b * 2).map(|_| rng.random_range(-2.0..2.0)).collect();
    let ds = DisplacementSet::from_weights(lat.clone(), 4, w.clone()).unwrap();
    let before = data_loglik_given_w(&data, &ds, &theta, &parc).unwrap();
    // swap subjects 0 and 3 together with their weights
    data.swap(0, 3);
    let mut w2 = w.clone();
    for q in 0..b * 2 {
        w2.swap(q, 3 * b * 2 + q);
    }
    let ds2 = DisplacementSet::from_weights(lat, 4, w2).unwrap();
    let after = data_loglik_given_w(&data, &ds2, &theta, &parc).unwrap();
    assert_relative_eq!(before, after, epsilon = 1e-10);
}

#[test]
fn mass_univariate_limit_is_heteroscedastic_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let grid = VoxelGrid::new(&[5]).unwrap();
    let parc = Parcellation::new(grid.clone(), (0..5).collect(), 5).unwrap();
    let data = subjects_on(&grid, &mut rng, 3);
    let theta = GroupParams {
        eta: vec![0.1, -0.2, 0.3, 0.0, 1.0],
        nu2: vec![0.0; 5],
        sigma2: vec![0.5, 1.0, 1.5, 2.0, 2.5],
        sigma_s2: 0.0,
    };
    let ds = DisplacementSet::zeros(build_lattice(&grid, 1.0).unwrap(), 3);
    let v = data_loglik_given_w(&data, &ds, &theta, &parc).unwrap();
    let mut direct = 0.0;
    for s in &data {
        for k in 0..5 {
            direct += ln_normal(
                s.effects().values()[k],
                theta.eta[k],
                theta.sigma2[k] + s.variances().values()[k],
            );
        }
    }
    assert_relative_eq!(v, direct, epsilon = 1e-10);
}

// ----------------------------------------------------------------------------
// priors

#[test]
fn default_preset() {
    let h = Hyperparams::preset("reference-defaults").unwrap();
    assert_eq!((h.alpha, h.beta, h.lambda, h.m, h.p), (3.0, 20.0, 1e-3, 0.0, 0.5));
    assert_eq!(h, Hyperparams::default());
    assert!(Hyperparams::preset("flat").is_err());
}

#[test]
fn inverse_gamma_reference_value() {
    let expect = 3.0 * 20f64.ln() - 2f64.ln() - 4.0 * 10f64.ln() - 2.0;
    assert_relative_eq!(ln_inv_gamma(10.0, 3.0, 20.0), expect, epsilon = 1e-13);
}

proptest! {
    #[test]
    fn doubling_beta_shifts_inverse_gamma(z in 0.01f64..50.0, a in 1.1f64..10.0, b in 0.1f64..40.0) {
        let shift = ln_inv_gamma(z, a, 2.0 * b) - ln_inv_gamma(z, a, b);
        prop_assert!((shift - (a * 2f64.ln() - b / z)).abs() < 1e-10);
    }
}

#[test]
fn inactive_region_contributes_only_network_term_for_its_mean() {
    let h = Hyperparams::default();
    let th = GroupParams::uniform(1, 0.0, 2.0, 3.0, 0.0);
    let off = log_prior(&th, &Network::new(vec![false]), &h).unwrap();
    let expect = 0.5f64.ln() + ln_inv_gamma(2.0, 3.0, 20.0) + ln_inv_gamma(3.0, 3.0, 20.0);
    assert_relative_eq!(off, expect, epsilon = 1e-13);
    let bad = GroupParams::uniform(1, 0.4, 2.0, 3.0, 0.0);
    assert!(matches!(
        log_prior(&bad, &Network::new(vec![false]), &h),
        Err(Error::InconsistentState(_))
    ));
}

#[test]
fn prior_is_additive_over_regions_without_spatial_term() {
    let h = Hyperparams::default();
    let th = GroupParams {
        eta: vec![1.0, 0.0, -2.0],
        nu2: vec![1.0, 2.0, 3.0],
        sigma2: vec![0.5, 0.7, 0.9],
        sigma_s2: 0.0,
    };
    let g = Network::new(vec![true, false, true]);
    let total = log_prior(&th, &g, &h).unwrap();
    let parts: f64 = (0..3)
        .map(|j| {
            let t = GroupParams {
                eta: vec![th.eta[j]],
                nu2: vec![th.nu2[j]],
                sigma2: vec![th.sigma2[j]],
                sigma_s2: 0.0,
            };
            log_prior(&t, &Network::new(vec![g.get(j)]), &h).unwrap()
        })
        .sum();
    assert_relative_eq!(total, parts, epsilon = 1e-12);
}

// ----------------------------------------------------------------------------
// sufficient statistics

fn random_state(rng: &mut ChaCha8Rng, grid: &VoxelGrid, n: usize, spatial: bool) -> LatentState {
    let d = grid.len();
    let w = spatial.then(|| {
        let lat = build_lattice(grid, 1.5).unwrap();
        let m = n * lat.len() * grid.rank();
        DisplacementSet::from_weights(lat, n, (0..m).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    });
    LatentState {
        grid: grid.clone(),
        subjects: n,
        x: (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect(),
        mu: (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
        w,
    }
}

#[test]
fn sufficient_statistic_edge_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = Hyperparams::default();
    let grid = VoxelGrid::new(&[6, 6]).unwrap();
    let parc = Parcellation::new(grid.clone(), (0..36).map(|k| u32::from(k >= 18)).collect(), 2).unwrap();
    let g = Network::new(vec![true, false]);
    let mut st = random_state(&mut rng, &grid, 3, false);
    let s = sufficient_stats(&st, &g, &parc, &h);
    assert_eq!(s.spatial, h.beta);
    assert_eq!(s.regions[1][3], 0.0);
    assert!(s.regions[0][3] != 0.0);
    for i in 0..3 {
        st.x[i * 36..(i + 1) * 36].copy_from_slice(&st.mu.clone());
    }
    let s = sufficient_stats(&st, &g, &parc, &h);
    assert_eq!(s.regions[0][1], 0.0);
    assert_eq!(s.regions[1][1], 0.0);
}

#[test]
fn statistic_form_reproduces_complete_likelihood() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let h = Hyperparams::default();
    let grid = VoxelGrid::new(&[7, 6]).unwrap();
    let parc = Parcellation::new(grid.clone(), (0..42).map(|k| (k % 3) as u32).collect(), 3).unwrap();
    let g = Network::new(vec![true, false, true]);
    let data = subjects_on(&grid, &mut rng, 4);
    let obs = Observations::from_subjects(&data).unwrap();
    for spatial in [false, true] {
        let st = random_state(&mut rng, &grid, 4, spatial);
        let s = sufficient_stats(&st, &g, &parc, &h);
        let wc = st.w.as_ref().map_or(0, |w| w.weights().len());
        let mut consts = Vec::new();
        for _ in 0..20 {
            let th = GroupParams {
                eta: (0..3)
                    .map(|j| if g.get(j) { rng.random_range(-3.0..3.0) } else { 0.0 })
                    .collect(),
                nu2: (0..3).map(|_| rng.random_range(0.2..5.0)).collect(),
                sigma2: (0..3).map(|_| rng.random_range(0.2..5.0)).collect(),
                sigma_s2: if spatial { rng.random_range(0.2..5.0) } else { 0.0 },
            };
            let lc = log_complete(&obs, &st, &th, &g, &parc, &h).unwrap();
            consts.push(lc + neg_log_complete_from_stats(&s, &th, &g, &parc, &h, wc));
        }
        for c in &consts[1..] {
            assert_relative_eq!(*c, consts[0], epsilon = 1e-8, max_relative = 1e-12);
        }
    }
}
