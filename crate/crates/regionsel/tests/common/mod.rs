//! Independent oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use regionsel::model::block_loglik;
use regionsel::model::density::{ln_inv_gamma, log_sum_exp, LN_2PI};
use regionsel::model::Hyperparams;
use regionsel::volume::ScalarMap;

// ----------------------------------------------------------------------------
// dense Gaussian oracle

/// log N(y; η1, ν²11' + diag(σ² + s²)) by explicit Cholesky.
pub fn dense_loglik(y: &[f64], s2: &[f64], eta: f64, nu2: f64, sigma2: f64) -> f64 {
    let n = y.len();
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            c[i * n + j] = nu2 + if i == j { sigma2 + s2[i] } else { 0.0 };
        }
    }
    // in-place lower Cholesky
    for j in 0..n {
        let mut d = c[j * n + j];
        for k in 0..j {
            d -= c[j * n + k] * c[j * n + k];
        }
        let d = d.sqrt();
        c[j * n + j] = d;
        for i in j + 1..n {
            let mut v = c[i * n + j];
            for k in 0..j {
                v -= c[i * n + k] * c[j * n + k];
            }
            c[i * n + j] = v / d;
        }
    }
    let mut z = vec![0.0; n];
    for i in 0..n {
        let mut v = y[i] - eta;
        for k in 0..i {
            v -= c[i * n + k] * z[k];
        }
        z[i] = v / c[i * n + i];
    }
    let logdet: f64 = (0..n).map(|i| 2.0 * c[i * n + i].ln()).sum();
    let quad: f64 = z.iter().map(|v| v * v).sum();
    -0.5 * (n as f64 * LN_2PI + logdet + quad)
}

// ----------------------------------------------------------------------------
// quadrature oracle

/// log ∫∫ f(y | 0, ν², σ²) π(ν²) π(σ²) on a log-scale grid.
pub fn quadrature_inactive(blocks: &[(Vec<f64>, Vec<f64>)], h: &Hyperparams) -> f64 {
    let (lo, hi, step) = (-10.0f64, 10.0f64, 0.01f64);
    let m = ((hi - lo) / step) as usize;
    let mut terms = Vec::with_capacity(m * m);
    for a in 0..m {
        let u = lo + (a as f64 + 0.5) * step;
        let nu2 = u.exp();
        let pu = ln_inv_gamma(nu2, h.alpha, h.beta) + u;
        for b in 0..m {
            let v = lo + (b as f64 + 0.5) * step;
            let sig = v.exp();
            let ll: f64 = blocks.iter().map(|(y, s)| block_loglik(y, s, 0.0, nu2, sig)).sum();
            terms.push(ll + pu + ln_inv_gamma(sig, h.alpha, h.beta) + v);
        }
    }
    log_sum_exp(&terms) + 2.0 * step.ln()
}

// ----------------------------------------------------------------------------
// union-find oracle

struct Dsu(Vec<usize>);

impl Dsu {
    fn find(&mut self, x: usize) -> usize {
        let mut r = x;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut c = x;
        while self.0[c] != r {
            let n = self.0[c];
            self.0[c] = r;
            c = n;
        }
        r
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Partition by unions over every pair of face-adjacent suprathreshold voxels, found by
/// comparing coordinates rather than using the grid's neighbour routine.
pub fn components_oracle(map: &ScalarMap, thr: f64) -> Vec<Vec<usize>> {
    let g = map.grid();
    let v = map.values();
    let d = g.len();
    let mut dsu = Dsu((0..d).collect());
    for a in 0..d {
        for b in a + 1..d {
            if v[a] > thr && v[b] > thr {
                let (ca, cb) = (g.coords(a), g.coords(b));
                let l1: usize = (0..3).map(|i| ca[i].abs_diff(cb[i])).sum();
                if l1 == 1 {
                    dsu.union(a, b);
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for k in 0..d {
        if v[k] > thr {
            let r = dsu.find(k);
            groups.entry(r).or_default().push(k);
        }
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    out.sort_by_key(|c| c[0]);
    out
}

// ----------------------------------------------------------------------------
// brute-force adjustments

/// Indices below α/d.
pub fn bonferroni_brute(p: &[f64], alpha: f64) -> Vec<usize> {
    let d = p.len() as f64;
    (0..p.len()).filter(|&k| p[k] < alpha / d).collect()
}

/// Largest k with at least k p-values at or below kα/d, counted directly.
pub fn bh_count_brute(p: &[f64], alpha: f64) -> usize {
    let d = p.len();
    (0..=d)
        .filter(|&k| k == 0 || p.iter().filter(|&&v| v <= k as f64 * alpha / d as f64).count() >= k)
        .max()
        .unwrap()
}
