//! Marginal log-density of the observations landing on one voxel, with the latent
//! subject effects and the voxel template integrated out.
//!
//! Covariance ν²·11' + diag(σ² + s²): log-determinant by the matrix determinant lemma,
//! quadratic form by Sherman-Morrison, both O(n_k).

use super::density::LN_2PI;

/// Log-density of one voxel block with region parameters (η, ν², σ²).
pub fn block_loglik(y: &[f64], s2: &[f64], eta: f64, nu2: f64, sigma2: f64) -> f64 {
    debug_assert_eq!(y.len(), s2.len());
    let mut sa = 0.0;
    let mut sar = 0.0;
    let mut sar2 = 0.0;
    let mut slogv = 0.0;
    for (&yl, &sl) in y.iter().zip(s2) {
        let v = sigma2 + sl;
        let a = 1.0 / v;
        let r = yl - eta;
        sa += a;
        sar += a * r;
        sar2 += a * r * r;
        slogv += v.ln();
    }
    assemble(y.len(), sa, sar, sar2, slogv, nu2)
}

#[inline]
fn assemble(n: usize, sa: f64, sar: f64, sar2: f64, slogv: f64, nu2: f64) -> f64 {
    let logdet = slogv + (nu2 * sa).ln_1p();
    let quad = sar2 - nu2 * sar * sar / (1.0 + nu2 * sa);
    -0.5 * (n as f64 * LN_2PI + logdet + quad)
}

/// Additive per-voxel summary: moving one observation between voxels is O(1).
///
/// The weights a = 1/(σ² + s²) use the variance of the region the voxel belongs to.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BlockAcc {
    pub n: u32,
    pub sa: f64,
    pub say: f64,
    pub say2: f64,
    pub slogv: f64,
}

impl BlockAcc {
    #[inline]
    pub fn add(&mut self, y: f64, s2: f64, sigma2: f64) {
        let v = sigma2 + s2;
        let a = 1.0 / v;
        self.n += 1;
        self.sa += a;
        self.say += a * y;
        self.say2 += a * y * y;
        self.slogv += v.ln();
    }

    #[inline]
    pub fn remove(&mut self, y: f64, s2: f64, sigma2: f64) {
        let v = sigma2 + s2;
        let a = 1.0 / v;
        self.n -= 1;
        if self.n == 0 {
            *self = BlockAcc::default();
            return;
        }
        self.sa -= a;
        self.say -= a * y;
        self.say2 -= a * y * y;
        self.slogv -= v.ln();
    }

    /// Zero for an empty block.
    #[inline]
    pub fn loglik(&self, eta: f64, nu2: f64) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        let sar = self.say - eta * self.sa;
        let sar2 = (self.say2 - 2.0 * eta * self.say + eta * eta * self.sa).max(0.0);
        assemble(self.n as usize, self.sa, sar, sar2, self.slogv, nu2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_case() {
        let v = block_loglik(&[0.0], &[1.0], 0.0, 1.0, 1.0);
        assert!((v - (-0.5 * (2.0 * std::f64::consts::PI * 3.0).ln())).abs() < 1e-12);
    }

    #[test]
    fn zero_between_variance_is_independent() {
        let y = [0.3, -1.2, 2.0];
        let s2 = [0.5, 1.0, 2.0];
        let sigma2 = 0.7;
        let direct: f64 = y
            .iter()
            .zip(&s2)
            .map(|(&yl, &sl)| super::super::density::ln_normal(yl, 0.4, sigma2 + sl))
            .sum();
        assert!((block_loglik(&y, &s2, 0.4, 0.0, sigma2) - direct).abs() < 1e-12);
    }

    #[test]
    fn accumulator_matches_direct() {
        let y = [0.3, -1.2, 2.0, 4.5];
        let s2 = [0.5, 1.0, 2.0, 0.0];
        let mut acc = BlockAcc::default();
        for (&a, &b) in y.iter().zip(&s2) {
            acc.add(a, b, 1.3);
        }
        let d = block_loglik(&y, &s2, 0.7, 2.0, 1.3);
        assert!((acc.loglik(0.7, 2.0) - d).abs() < 1e-10);
        acc.remove(4.5, 0.0, 1.3);
        let d3 = block_loglik(&y[..3], &s2[..3], 0.7, 2.0, 1.3);
        assert!((acc.loglik(0.7, 2.0) - d3).abs() < 1e-10);
    }
}
