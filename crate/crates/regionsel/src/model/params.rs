use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Prior hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Inverse-Gamma shape, shared by every variance prior.
    pub alpha: f64,
    /// Inverse-Gamma scale.
    pub beta: f64,
    /// Prior precision weight of a regional mean relative to ν².
    pub lambda: f64,
    /// Prior regional mean.
    pub m: f64,
    /// Prior involvement probability used for regions without an override.
    pub p: f64,
    /// Optional per-region involvement probabilities.
    #[serde(default)]
    pub p_regions: Vec<f64>,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self::reference_defaults()
    }
}

impl Hyperparams {
    /// α=3, β=20, λ=1e-3, m=0, p=0.5.
    pub fn reference_defaults() -> Self {
        Self {
            alpha: 3.0,
            beta: 20.0,
            lambda: 1e-3,
            m: 0.0,
            p: 0.5,
            p_regions: Vec::new(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "reference-defaults" => Ok(Self::reference_defaults()),
            other => Err(Error::InvalidArgument(format!(
                "unknown hyperparameter preset {other:?}"
            ))),
        }
    }

    pub fn p(&self, j: usize) -> f64 {
        self.p_regions.get(j).copied().unwrap_or(self.p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 1.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha must exceed 1, got {}",
                self.alpha
            )));
        }
        if !(self.beta > 0.0) || !(self.lambda > 0.0) || !self.m.is_finite() {
            return Err(Error::InvalidArgument(
                "beta and lambda must be positive, m finite".into(),
            ));
        }
        let bad_p = |p: f64| !(p > 0.0 && p < 1.0);
        if bad_p(self.p) || self.p_regions.iter().any(|&p| bad_p(p)) {
            return Err(Error::InvalidArgument(
                "inclusion probabilities must lie in (0,1)".into(),
            ));
        }
        Ok(())
    }
}

/// Regional parameters θ = (η, ν², σ², σ_S²).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupParams {
    pub eta: Vec<f64>,
    pub nu2: Vec<f64>,
    pub sigma2: Vec<f64>,
    /// Spatial variance in voxels²; zero means displacements are frozen at 0.
    pub sigma_s2: f64,
}

impl GroupParams {
    pub fn uniform(regions: usize, eta: f64, nu2: f64, sigma2: f64, sigma_s2: f64) -> Self {
        Self {
            eta: vec![eta; regions],
            nu2: vec![nu2; regions],
            sigma2: vec![sigma2; regions],
            sigma_s2,
        }
    }

    pub fn regions(&self) -> usize {
        self.eta.len()
    }

    /// `allow_zero_nu2` enables the mass-univariate limit ν² = 0.
    pub fn validate(&self, gamma: &Network, allow_zero_nu2: bool) -> Result<()> {
        let n = self.eta.len();
        if self.nu2.len() != n || self.sigma2.len() != n || gamma.len() != n {
            return Err(Error::Shape("parameter vectors and network differ in length".into()));
        }
        for j in 0..n {
            let nu_ok = if allow_zero_nu2 {
                self.nu2[j] >= 0.0
            } else {
                self.nu2[j] > 0.0
            };
            if !nu_ok || !(self.sigma2[j] > 0.0) || !self.eta[j].is_finite() {
                return Err(Error::InconsistentState(format!("invalid parameters in region {j}")));
            }
            if !gamma.get(j) && self.eta[j] != 0.0 {
                return Err(Error::InconsistentState(format!(
                    "region {j} is inactive but has nonzero mean {}",
                    self.eta[j]
                )));
            }
        }
        if !(self.sigma_s2 >= 0.0) || !self.sigma_s2.is_finite() {
            return Err(Error::InconsistentState("spatial variance must be >= 0".into()));
        }
        Ok(())
    }
}

/// Involvement indicators γ.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Network {
    pub gamma: Vec<bool>,
}

impl Network {
    pub fn new(gamma: Vec<bool>) -> Self {
        Self { gamma }
    }

    pub fn all(regions: usize, on: bool) -> Self {
        Self {
            gamma: vec![on; regions],
        }
    }

    /// Parse a bit string like "01".
    pub fn parse(s: &str) -> Result<Self> {
        s.chars()
            .filter(|c| !c.is_whitespace() && *c != ',')
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(Error::InvalidArgument(format!("bad network string {s:?}"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self::new)
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    #[inline]
    pub fn get(&self, j: usize) -> bool {
        self.gamma[j]
    }

    pub fn bits(&self) -> String {
        self.gamma.iter().map(|&g| if g { '1' } else { '0' }).collect()
    }
}
