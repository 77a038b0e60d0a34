//! Random-threshold selection of the nonzero means in a large Gaussian sample.
//!
//! Observations are sorted by decreasing magnitude and mapped to scores
//! X = -ln(1 - F(|y|)). Under the null the scores are ordered Exp(1) draws, so the
//! number of nonzero means is estimated as the cut k after which the partial sums of
//! the remaining scores best match their conditional expectations.
//!
//! Also here: the global null test, a Gamma-Gaussian mixture comparator and
//! permutation estimates of a threshold's subgroup stability.

use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use statrs::function::erf::{erf, erfc};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::model::density::log_add_exp;
use crate::samplers::rng_from_seed;

// ----------------------------------------------------------------------------
// Null law of the magnitudes

/// Law of |ε| for ε ~ N(0, σ²).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NullCdf {
    pub sigma: f64,
}

impl NullCdf {
    pub fn standard() -> Self {
        Self { sigma: 1.0 }
    }

    pub fn gaussian(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise scale must be positive, got {sigma}"
            )));
        }
        Ok(Self { sigma })
    }

    /// P(|ε| <= a).
    pub fn cdf(&self, a: f64) -> f64 {
        erf(a.abs() / (self.sigma * std::f64::consts::SQRT_2))
    }

    /// -ln(1 - F(|a|)).
    pub fn score(&self, a: f64) -> f64 {
        tail_score(a.abs() / self.sigma)
    }
}

const TAIL_SWITCH: f64 = 20.0;

/// -ln P(|Z| > z) for standard Gaussian Z and z >= 0, evaluated directly.
pub fn neg_log_tail(z: f64) -> f64 {
    if z < TAIL_SWITCH {
        -erfc(z / std::f64::consts::SQRT_2).ln()
    } else {
        // Mills-ratio expansion; the next term is below 3e-12 at the switch point.
        let r = 1.0 / (z * z);
        let series = 1.0 - r * (1.0 - 3.0 * r * (1.0 - 5.0 * r * (1.0 - 7.0 * r * (1.0 - 9.0 * r))));
        0.5 * z * z + z.ln() - 0.5 * (2.0 / std::f64::consts::PI).ln() - series.ln()
    }
}

// Cubic Hermite table for neg_log_tail on [0, TAIL_SWITCH]; the unknown-variance
// search evaluates it O(n²) times.
const TABLE_STEP: f64 = 1.0 / 256.0;

/// Per-interval cubic coefficients in the local coordinate s ∈ [0, 1).
struct TailTable {
    coef: Vec<[f64; 4]>,
}

fn tail_table() -> &'static TailTable {
    static TABLE: OnceLock<TailTable> = OnceLock::new();
    TABLE.get_or_init(|| {
        let m = (TAIL_SWITCH / TABLE_STEP).round() as usize + 2;
        let c = (2.0 / std::f64::consts::PI).sqrt();
        let node = |i: usize| {
            let z = i as f64 * TABLE_STEP;
            let g = neg_log_tail(z);
            // g' = 2φ(z) / P(|Z| > z) = sqrt(2/π) exp(g - z²/2)
            (g, c * (g - 0.5 * z * z).exp() * TABLE_STEP)
        };
        let coef = (0..m)
            .map(|i| {
                let ((g0, d0), (g1, d1)) = (node(i), node(i + 1));
                [g0, d0, 3.0 * (g1 - g0) - 2.0 * d0 - d1, 2.0 * (g0 - g1) + d0 + d1]
            })
            .collect();
        TailTable { coef }
    })
}

impl TailTable {
    #[inline(always)]
    fn eval(&self, z: f64) -> f64 {
        if !(z < TAIL_SWITCH) {
            return neg_log_tail(z);
        }
        let u = z * (1.0 / TABLE_STEP);
        let i = u as usize;
        let s = u - i as f64;
        let c = &self.coef[i];
        ((c[3] * s + c[2]) * s + c[1]) * s + c[0]
    }
}

/// Table-interpolated [`neg_log_tail`]; absolute error below 1e-11.
#[inline]
pub fn tail_score(z: f64) -> f64 {
    tail_table().eval(z)
}

// ----------------------------------------------------------------------------
// Ordering and scores

/// Magnitudes sorted in decreasing order with their scores.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderedSample {
    /// |y| sorted decreasing.
    pub magnitude: Vec<f64>,
    /// `order[i]` is the original index of `magnitude[i]`.
    pub order: Vec<usize>,
    /// X_(i) = -ln(1 - F(|y|_(i))).
    pub scores: Vec<f64>,
}

impl OrderedSample {
    pub fn len(&self) -> usize {
        self.magnitude.len()
    }

    pub fn is_empty(&self) -> bool {
        self.magnitude.is_empty()
    }
}

/// Stable decreasing sort of |y|.
fn sort_magnitudes(y: &[f64]) -> Result<(Vec<f64>, Vec<usize>)> {
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&a, &b| y[b].abs().total_cmp(&y[a].abs()));
    let magnitude = order.iter().map(|&i| y[i].abs()).collect();
    Ok((magnitude, order))
}

pub fn transform(y: &[f64], cdf: &NullCdf) -> Result<OrderedSample> {
    let (magnitude, order) = sort_magnitudes(y)?;
    let scores = magnitude.iter().map(|&a| cdf.score(a)).collect();
    Ok(OrderedSample {
        magnitude,
        order,
        scores,
    })
}

// ----------------------------------------------------------------------------
// Conditional expectations of ordered Exp(1) partial sums

/// H_0..=H_n.
pub fn harmonic_table(n: usize) -> Vec<f64> {
    let mut h = Vec::with_capacity(n + 1);
    h.push(0.0);
    let mut s = 0.0;
    for l in 1..=n {
        s += 1.0 / l as f64;
        h.push(s);
    }
    h
}

/// E X_(i) = Σ_{ℓ=i}^{n} 1/ℓ for the i-th largest of n Exp(1) draws (1-based).
pub fn expected_score(n: usize, i: usize) -> f64 {
    assert!(1 <= i && i <= n, "order index {i} outside 1..={n}");
    (i..=n).map(|l| 1.0 / l as f64).sum()
}

/// For the n-k null scores after cut k: the expectation of the sum of the j largest,
/// and the ratio B with E(T_j | T_{n-k}) = B T_{n-k}.
pub fn cond_expectations(n: usize, k: usize, j: usize) -> (f64, f64) {
    assert!(
        k < n && 1 <= j && j <= n - k,
        "need 1 <= j <= n-k (n={n}, k={k}, j={j})"
    );
    let m = n - k;
    let tail: f64 = (j + 1..=m).map(|l| 1.0 / l as f64).sum();
    let e = j as f64 * (1.0 + tail);
    (e, e / m as f64)
}

// ----------------------------------------------------------------------------
// Discrepancy profile

/// Norm applied to the centred partial sums.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Norm {
    Max,
    Lp(f64),
}

impl Default for Norm {
    fn default() -> Self {
        Norm::Max
    }
}

/// Number of partial sums compared after each cut.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Window {
    /// A fixed number of partial sums; cuts range over 0..=n-width.
    Fixed { width: usize },
    /// All n-k remaining scores; cuts range over 0..=n-kappa, `None` meaning ⌈0.05 n⌉.
    Varying { kappa: Option<usize> },
}

impl Default for Window {
    fn default() -> Self {
        Window::Varying { kappa: None }
    }
}

pub fn default_kappa(n: usize) -> usize {
    ((0.05 * n as f64).ceil() as usize).max(1)
}

impl Window {
    /// Smallest number of scores that must remain after a cut.
    fn floor(&self, n: usize) -> Result<usize> {
        let f = match *self {
            Window::Fixed { width } => width,
            Window::Varying { kappa } => kappa.unwrap_or_else(|| default_kappa(n)),
        };
        if f == 0 || f > n {
            return Err(Error::EmptyRange(format!("window leaves {f} of {n} observations")));
        }
        Ok(f)
    }

    fn width(&self, n: usize, k: usize) -> usize {
        match *self {
            Window::Fixed { width } => width,
            Window::Varying { .. } => n - k,
        }
    }
}

/// Harmonic numbers and j·H_j, shared by every cut.
struct Centering {
    h: Vec<f64>,
    jh: Vec<f64>,
}

impl Centering {
    fn new(n: usize) -> Self {
        let h = harmonic_table(n);
        let jh = h.iter().enumerate().map(|(j, v)| j as f64 * v).collect();
        Self { h, jh }
    }

    /// Discrepancy after a cut from the partial sums T_j = sums[j-1] - base over the
    /// window, with `m` scores left. E T_j = j(1 + H_m - H_j).
    fn discrepancy(&self, sums: &[f64], base: f64, m: usize, norm: Norm) -> f64 {
        let w = sums.len();
        let c = 1.0 + self.h[m];
        let scale = (sums[w - 1] - base) / (w as f64 * (c - self.h[w]));
        // T_j - Q_j = (sums - base) - j c scale + j H_j scale
        let cs = c * scale;
        let jh = &self.jh[1..=w];
        match norm {
            Norm::Max => {
                let mut best = [0.0f64; 4];
                let mut j = 0;
                while j + 4 <= w {
                    for l in 0..4 {
                        let jf = (j + l + 1) as f64;
                        let d = (sums[j + l] - base - jf * cs + jh[j + l] * scale).abs();
                        if d > best[l] {
                            best[l] = d;
                        }
                    }
                    j += 4;
                }
                for l in j..w {
                    let d = (sums[l] - base - (l + 1) as f64 * cs + jh[l] * scale).abs();
                    if d > best[0] {
                        best[0] = d;
                    }
                }
                best[0].max(best[1]).max(best[2].max(best[3])) / (w as f64).sqrt()
            }
            Norm::Lp(p) => {
                let mut acc = 0.0;
                for l in 0..w {
                    let d = (sums[l] - base - (l + 1) as f64 * cs + jh[l] * scale).abs();
                    acc += if p == 2.0 { d * d } else { d.powf(p) };
                }
                acc * (w as f64).powf(-p / 2.0 - 1.0)
            }
        }
    }
}

fn prefix_sums(x: &[f64]) -> Vec<f64> {
    let mut t = 0.0;
    x.iter()
        .map(|v| {
            t += v;
            t
        })
        .collect()
}

/// Discrepancy of a window of scores (x[0] the largest) with `m` scores left.
fn discrepancy(x: &[f64], m: usize, cen: &Centering, norm: Norm) -> f64 {
    cen.discrepancy(&prefix_sums(x), 0.0, m, norm)
}

fn check_norm(norm: Norm) -> Result<()> {
    match norm {
        Norm::Lp(p) if !(p >= 1.0 && p.is_finite()) => {
            Err(Error::InvalidArgument(format!("norm order must be >= 1, got {p}")))
        }
        _ => Ok(()),
    }
}

/// η_k for k = 0..=n-floor with the sample's own scores.
fn known_profile(x: &[f64], kmax: usize, window: Window, norm: Norm) -> Vec<f64> {
    let n = x.len();
    let cen = Centering::new(n);
    let sums = prefix_sums(x);
    (0..=kmax)
        .map(|k| {
            let w = window.width(n, k);
            let base = if k == 0 { 0.0 } else { sums[k - 1] };
            cen.discrepancy(&sums[k..k + w], base, n - k, norm)
        })
        .collect()
}

pub fn eta_profile(os: &OrderedSample, window: Window, norm: Norm) -> Result<Vec<f64>> {
    check_norm(norm)?;
    let n = os.len();
    let kmax = n - window.floor(n)?;
    Ok(known_profile(&os.scores, kmax, window, norm))
}

// ----------------------------------------------------------------------------
// Count estimation

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variance {
    /// Known noise std.
    Known(f64),
    /// Re-estimated after every cut from the remaining observations.
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdOptions {
    pub variance: Variance,
    pub window: Window,
    pub norm: Norm,
    /// Evaluate η_k at every cut. Otherwise cuts whose lower bound already exceeds
    /// the running minimum are skipped (max norm only); the selected count is the same.
    pub full_profile: bool,
}

impl Default for ThresholdOptions {
    fn default() -> Self {
        Self {
            variance: Variance::Unknown,
            window: Window::default(),
            norm: Norm::Max,
            full_profile: false,
        }
    }
}

/// Observations always left for the variance estimate in unknown-variance mode.
pub const MIN_VARIANCE_SAMPLE: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    /// Estimated number of nonzero means.
    pub count: usize,
    /// Smallest selected magnitude; +∞ when nothing is selected.
    pub threshold: f64,
    /// Original indices of the `count` largest magnitudes, ascending.
    pub selected: Vec<usize>,
    /// η_k for k = 0..=k_max; NaN where a cut was skipped.
    pub eta: Vec<f64>,
    pub window: Window,
    /// Noise std estimate per cut (unknown-variance mode only).
    pub sigma_hat: Option<Vec<f64>>,
}

pub fn estimate_count(y: &[f64], opts: &ThresholdOptions) -> Result<ThresholdResult> {
    let n = y.len();
    if n < 10 {
        return Err(Error::InvalidArgument(format!(
            "need at least 10 observations, got {n}"
        )));
    }
    check_norm(opts.norm)?;
    let (magnitude, order) = sort_magnitudes(y)?;
    let mut floor = opts.window.floor(n)?;
    if opts.variance == Variance::Unknown {
        floor = floor.max(MIN_VARIANCE_SAMPLE);
        if floor > n {
            return Err(Error::EmptyRange(format!(
                "{n} observations leave none for the variance estimate"
            )));
        }
    }
    let kmax = n - floor;

    let sigma: Vec<f64> = match opts.variance {
        Variance::Known(s) => {
            NullCdf::gaussian(s)?;
            vec![s; kmax + 1]
        }
        Variance::Unknown => {
            // mean square of the observations left after each cut
            let mut ss = vec![0.0; n + 1];
            for i in (0..n).rev() {
                ss[i] = ss[i + 1] + magnitude[i] * magnitude[i];
            }
            (0..=kmax).map(|k| (ss[k] / (n - k) as f64).sqrt()).collect()
        }
    };
    let scan = CutScan {
        magnitude: &magnitude,
        sigma: &sigma,
        fixed_scale: matches!(opts.variance, Variance::Known(_)),
        window: opts.window,
        norm: opts.norm,
        cen: Centering::new(n),
        table: tail_table(),
    };
    let eta = if opts.full_profile || opts.norm != Norm::Max {
        scan.full()
    } else {
        scan.pruned()
    };

    let mut count = 0;
    for k in 1..eta.len() {
        if eta[k] < eta[count] || eta[count].is_nan() {
            count = k;
        }
    }
    if !eta[count].is_finite() {
        return Err(Error::InconsistentState("discrepancy profile is not finite".into()));
    }
    let sigma_hat = (opts.variance == Variance::Unknown).then_some(sigma);
    let threshold = if count == 0 {
        f64::INFINITY
    } else {
        magnitude[count - 1]
    };
    let mut selected = order[..count].to_vec();
    selected.sort_unstable();
    Ok(ThresholdResult {
        count,
        threshold,
        selected,
        eta,
        window: opts.window,
        sigma_hat,
    })
}

/// Discrepancy evaluation over the feasible cuts of one sorted sample.
struct CutScan<'a> {
    magnitude: &'a [f64],
    /// Noise scale used after each cut.
    sigma: &'a [f64],
    /// Same scale after every cut (known variance).
    fixed_scale: bool,
    window: Window,
    norm: Norm,
    cen: Centering,
    table: &'static TailTable,
}

/// Relative spacing of the scale grid used for bounds.
const GRID_RATIO: f64 = 1.001;
/// Sampled partial sums per cut when bounding.
const BOUND_POINTS: usize = 512;

/// Prefix sums of scores at a fixed scale, from index `start` on.
struct ScaledPrefix {
    sigma: f64,
    start: usize,
    p: Vec<f64>,
}

impl ScaledPrefix {
    fn empty(sigma: f64) -> Self {
        Self {
            sigma,
            start: 0,
            p: Vec::new(),
        }
    }

    fn new(a: &[f64], start: usize, sigma: f64, table: &TailTable) -> Self {
        let inv = 1.0 / sigma;
        let mut p = Vec::with_capacity(a.len() - start + 1);
        let mut t = 0.0;
        p.push(0.0);
        for &v in &a[start..] {
            t += table.eval(v * inv);
            p.push(t);
        }
        Self { sigma, start, p }
    }

    #[inline]
    fn range(&self, from: usize, to: usize) -> f64 {
        self.p[to - self.start] - self.p[from - self.start]
    }
}

impl CutScan<'_> {
    fn kmax(&self) -> usize {
        self.sigma.len() - 1
    }

    fn exact(&self, k: usize, buf: &mut Vec<f64>) -> f64 {
        let n = self.magnitude.len();
        let s = self.sigma[k];
        if s == 0.0 {
            // every remaining magnitude is zero, so every score is zero
            return 0.0;
        }
        let w = self.window.width(n, k);
        let inv = 1.0 / s;
        buf.clear();
        let mut t = 0.0;
        buf.extend(self.magnitude[k..k + w].iter().map(|&a| {
            t += self.table.eval(a * inv);
            t
        }));
        self.cen.discrepancy(buf, 0.0, n - k, self.norm)
    }

    fn full(&self) -> Vec<f64> {
        let mut buf = Vec::with_capacity(self.magnitude.len());
        (0..=self.kmax()).map(|k| self.exact(k, &mut buf)).collect()
    }

    /// Exact η_k only where a lower bound does not rule k out.
    fn pruned(&self) -> Vec<f64> {
        let lb = self.lower_bounds();
        let mut by_bound: Vec<usize> = (0..lb.len()).collect();
        by_bound.sort_by(|&a, &b| lb[a].total_cmp(&lb[b]).then(a.cmp(&b)));
        let mut eta = vec![f64::NAN; lb.len()];
        let mut best = f64::INFINITY;
        let mut buf = Vec::with_capacity(self.magnitude.len());
        for k in by_bound {
            // slack covers rounding in the prefix differences
            if lb[k] > best + 1e-8 * (1.0 + best) {
                break;
            }
            eta[k] = self.exact(k, &mut buf);
            best = best.min(eta[k]);
        }
        eta
    }

    /// Lower bounds on η_k from sampled partial sums, bracketing each cut's scale
    /// between two points of a geometric grid. Scores decrease in the scale, so the
    /// bracket bounds both the leading and the trailing part of every window.
    fn lower_bounds(&self) -> Vec<f64> {
        let n = self.magnitude.len();
        let a = self.magnitude;
        let top = self.sigma.iter().copied().fold(0.0, f64::max);
        let ln_r = GRID_RATIO.ln();
        let grid = |g: i64| top * (-(g as f64) * ln_r).exp();
        // (upper scale, lower scale) prefixes
        let mut pair: Option<(i64, ScaledPrefix, ScaledPrefix)> = None;
        let mut out = Vec::with_capacity(self.kmax() + 1);
        let mut js = Vec::with_capacity(2 * BOUND_POINTS);
        for k in 0..=self.kmax() {
            let s = self.sigma[k];
            if s == 0.0 {
                out.push(0.0);
                continue;
            }
            let w = self.window.width(n, k);
            let m = n - k;
            let (hi, lo) = if self.fixed_scale {
                let (_, p, _) =
                    pair.get_or_insert_with(|| (0, ScaledPrefix::new(a, 0, s, self.table), ScaledPrefix::empty(s)));
                (&*p, &*p)
            } else {
                let mut g = ((top / s).ln() / ln_r).floor() as i64;
                while grid(g) < s {
                    g -= 1;
                }
                while grid(g + 1) > s {
                    g += 1;
                }
                let stale = match &pair {
                    Some((pg, p, _)) => *pg != g || p.start > k,
                    None => true,
                };
                if stale {
                    let reuse = pair.take().filter(|(pg, _, q)| *pg + 1 == g && q.start <= k);
                    let upper = match reuse {
                        Some((_, _, q)) => q,
                        None => ScaledPrefix::new(a, k, grid(g), self.table),
                    };
                    let lower = ScaledPrefix::new(a, k, grid(g + 1), self.table);
                    pair = Some((g, upper, lower));
                }
                let (_, p, q) = pair.as_ref().unwrap();
                (p, q)
            };
            debug_assert!(hi.sigma >= s && lo.sigma <= s);
            // hi has the larger scale, hence the smaller scores
            let h = &self.cen.h;
            let c = 1.0 + h[m];
            let ew = w as f64 * (c - h[w]);
            js.clear();
            let mut p2 = 1;
            while p2 <= w {
                js.push(p2);
                p2 *= 2;
            }
            let step = w.div_ceil(BOUND_POINTS).max(1);
            js.extend((step..=w).step_by(step));
            let mut best = 0.0f64;
            for &j in &js {
                let b = j as f64 * (c - h[j]) / ew;
                let (t_lo, t_hi) = (hi.range(k, k + j), lo.range(k, k + j));
                let (r_lo, r_hi) = (hi.range(k + j, k + w), lo.range(k + j, k + w));
                let dev_lo = (1.0 - b) * t_lo - b * r_hi;
                let dev_hi = (1.0 - b) * t_hi - b * r_lo;
                best = best.max(dev_lo).max(-dev_hi);
            }
            out.push(best / (w as f64).sqrt());
        }
        out
    }
}

// ----------------------------------------------------------------------------
// Global null test

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NullTest {
    pub statistic: f64,
    pub critical: f64,
    pub reject: bool,
}

/// D_n: the discrepancy of the whole sample with no cut.
pub fn d_statistic(y: &[f64], cdf: &NullCdf) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::InvalidArgument("empty sample".into()));
    }
    let os = transform(y, cdf)?;
    Ok(discrepancy(&os.scores, y.len(), &Centering::new(y.len()), Norm::Max))
}

/// Empirical (1-α) quantile of D_n over `reps` null samples of size n.
pub fn null_critical_value(n: usize, alpha: f64, reps: usize, seed: u64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0,1), got {alpha}")));
    }
    if n == 0 || reps == 0 {
        return Err(Error::InvalidArgument("need n >= 1 and at least one replicate".into()));
    }
    let mut rng = rng_from_seed(seed);
    let cen = Centering::new(n);
    let mut x = vec![0.0f64; n];
    let mut d = Vec::with_capacity(reps);
    for _ in 0..reps {
        for v in x.iter_mut() {
            *v = Exp1.sample(&mut rng);
        }
        x.sort_unstable_by(|a, b| b.total_cmp(a));
        d.push(discrepancy(&x, n, &cen, Norm::Max));
    }
    d.sort_unstable_by(f64::total_cmp);
    let idx = (((1.0 - alpha) * reps as f64).ceil() as usize).clamp(1, reps) - 1;
    Ok(d[idx])
}

pub fn global_null_test(y: &[f64], cdf: &NullCdf, alpha: f64, reps: usize, seed: u64) -> Result<NullTest> {
    let statistic = d_statistic(y, cdf)?;
    let critical = null_critical_value(y.len(), alpha, reps, seed)?;
    Ok(NullTest {
        statistic,
        critical,
        reject: statistic > critical,
    })
}

// ----------------------------------------------------------------------------
// Gamma-Gaussian mixture

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GgmOptions {
    /// Add a mirrored Gamma class on y < 0.
    pub negative_class: bool,
    pub max_iter: usize,
    /// Relative log-likelihood change that stops EM.
    pub tol: f64,
}

impl Default for GgmOptions {
    fn default() -> Self {
        Self {
            negative_class: false,
            max_iter: 5000,
            tol: 1e-9,
        }
    }
}

/// Gamma class on y > 0 (or on -y for the negative class).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaClass {
    pub weight: f64,
    pub shape: f64,
    pub scale: f64,
}

impl GammaClass {
    fn ln_pdf(&self, v: f64) -> f64 {
        if v <= 0.0 || self.weight <= 0.0 {
            return f64::NEG_INFINITY;
        }
        self.weight.ln() + (self.shape - 1.0) * v.ln()
            - v / self.scale
            - ln_gamma(self.shape)
            - self.shape * self.scale.ln()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GgmFit {
    pub null_weight: f64,
    pub null_mean: f64,
    pub null_sd: f64,
    pub positive: GammaClass,
    pub negative: Option<GammaClass>,
    pub loglik: f64,
    pub iterations: usize,
    /// Values at or above this are detected; +∞ when none are.
    pub threshold: f64,
}

impl GgmFit {
    fn class_logs(&self, y: f64) -> [f64; 3] {
        let l0 =
            self.null_weight.ln() + crate::model::density::ln_normal(y, self.null_mean, self.null_sd * self.null_sd);
        let l1 = self.positive.ln_pdf(y);
        let l2 = self.negative.map_or(f64::NEG_INFINITY, |g| g.ln_pdf(-y));
        [l0, l1, l2]
    }

    /// Posterior probability of the positive Gamma class.
    pub fn posterior_active(&self, y: f64) -> f64 {
        let l = self.class_logs(y);
        let tot = log_add_exp(log_add_exp(l[0], l[1]), l[2]);
        (l[1] - tot).exp()
    }

    /// Indices with y >= threshold.
    pub fn detections(&self, y: &[f64]) -> Vec<usize> {
        (0..y.len()).filter(|&i| y[i] >= self.threshold).collect()
    }
}

/// ψ'(x) for x > 0.
pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let r = 1.0 / (x * x);
    acc + 1.0 / x + r / 2.0 + r / x * (1.0 / 6.0 - r * (1.0 / 30.0 - r * (1.0 / 42.0 - r / 30.0)))
}

/// Weighted Gamma MLE from Σr, Σr·v and Σr·ln v; `None` when degenerate.
fn gamma_mle(s0: f64, s1: f64, sl: f64) -> Option<(f64, f64)> {
    if !(s0 > 0.0 && s1 > 0.0) {
        return None;
    }
    let mean = s1 / s0;
    let s = mean.ln() - sl / s0;
    if !(s > 1e-12) {
        return None;
    }
    // solve ln a - ψ(a) = s
    let mut a = (3.0 - s + ((s - 3.0).powi(2) + 24.0 * s).sqrt()) / (12.0 * s);
    for _ in 0..100 {
        let f = a.ln() - digamma(a) - s;
        let df = 1.0 / a - trigamma(a);
        let next = a - f / df;
        let next = if next > 0.0 { next } else { a / 2.0 };
        let done = (next - a).abs() <= 1e-12 * a;
        a = next;
        if done {
            break;
        }
    }
    let a = a.clamp(1e-3, 1e8);
    Some((a, mean / a))
}

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// EM fit of a Gaussian null plus Gamma activation class(es).
pub fn ggm_fit(y: &[f64], opts: &GgmOptions) -> Result<GgmFit> {
    let n = y.len();
    if n < 50 {
        return Err(Error::InvalidArgument(format!(
            "mixture fit needs at least 50 values, got {n}"
        )));
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let mut sorted = y.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let m0 = median_sorted(&sorted);
    let mut dev: Vec<f64> = sorted.iter().map(|v| (v - m0).abs()).collect();
    dev.sort_unstable_by(f64::total_cmp);
    let s0 = (1.4826 * median_sorted(&dev)).max(1e-6);

    let tail_class = |vals: Vec<f64>, weight: f64| -> GammaClass {
        let k = vals.len().max(1) as f64;
        let mean = vals.iter().sum::<f64>() / k;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k;
        let (shape, scale) = if mean > 0.0 && var > 0.0 {
            (mean * mean / var, var / mean)
        } else {
            (2.0, s0)
        };
        GammaClass { weight, shape, scale }
    };
    let cut = m0 + 2.0 * s0;
    let mut up: Vec<f64> = y.iter().copied().filter(|&v| v > cut.max(0.0)).collect();
    if up.len() < 5 {
        up = sorted.iter().rev().take(5).copied().filter(|&v| v > 0.0).collect();
    }
    let mut fit = GgmFit {
        null_weight: if opts.negative_class { 0.8 } else { 0.9 },
        null_mean: m0,
        null_sd: s0,
        positive: tail_class(up, 0.1),
        negative: None,
        loglik: f64::NEG_INFINITY,
        iterations: 0,
        threshold: f64::INFINITY,
    };
    if opts.negative_class {
        let cut = m0 - 2.0 * s0;
        let mut down: Vec<f64> = y.iter().filter(|&&v| v < cut.min(0.0)).map(|v| -v).collect();
        if down.len() < 5 {
            down = sorted.iter().take(5).filter(|&&v| v < 0.0).map(|v| -v).collect();
        }
        fit.negative = Some(tail_class(down, 0.1));
    }

    let var_floor = 1e-6 * s0 * s0;
    let mut prev = f64::NEG_INFINITY;
    let mut converged = false;
    for it in 1..=opts.max_iter {
        // E-step and accumulators
        let mut ll = 0.0;
        let (mut r0, mut r0y, mut r0yy) = (0.0, 0.0, 0.0);
        let mut pos = [0.0f64; 3];
        let mut neg = [0.0f64; 3];
        for &v in y {
            let l = fit.class_logs(v);
            let tot = log_add_exp(log_add_exp(l[0], l[1]), l[2]);
            ll += tot;
            let p0 = (l[0] - tot).exp();
            r0 += p0;
            r0y += p0 * v;
            r0yy += p0 * v * v;
            if v > 0.0 {
                let p1 = (l[1] - tot).exp();
                pos[0] += p1;
                pos[1] += p1 * v;
                pos[2] += p1 * v.ln();
            } else if v < 0.0 && fit.negative.is_some() {
                let p2 = (l[2] - tot).exp();
                neg[0] += p2;
                neg[1] += p2 * -v;
                neg[2] += p2 * (-v).ln();
            }
        }
        if !ll.is_finite() {
            return Err(Error::InconsistentState("mixture log-likelihood is not finite".into()));
        }
        fit.loglik = ll;
        fit.iterations = it;
        if (ll - prev).abs() <= opts.tol * ll.abs() {
            converged = true;
            break;
        }
        prev = ll;

        // M-step
        let nf = n as f64;
        fit.null_weight = r0 / nf;
        if r0 > 0.0 {
            fit.null_mean = r0y / r0;
            fit.null_sd = (r0yy / r0 - fit.null_mean * fit.null_mean).max(var_floor).sqrt();
        }
        fit.positive.weight = pos[0] / nf;
        if let Some((a, b)) = gamma_mle(pos[0], pos[1], pos[2]) {
            fit.positive.shape = a;
            fit.positive.scale = b;
        }
        if let Some(g) = fit.negative.as_mut() {
            g.weight = neg[0] / nf;
            if let Some((a, b)) = gamma_mle(neg[0], neg[1], neg[2]) {
                g.shape = a;
                g.scale = b;
            }
        }
    }
    if !converged {
        return Err(Error::NoConvergence(opts.max_iter));
    }
    // contiguous run of confident values down from the sample maximum
    let mut threshold = f64::INFINITY;
    for &v in sorted.iter().rev() {
        if v <= 0.0 || fit.posterior_active(v) < 0.5 {
            break;
        }
        threshold = v;
    }
    fit.threshold = threshold;
    Ok(fit)
}

// ----------------------------------------------------------------------------
// Subgroup stability

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stability {
    pub mean: f64,
    /// Divides by the number of permutations.
    pub variance: f64,
    pub values: Vec<f64>,
}

/// Mean and variance of `stat` applied to the first `subgroup` subjects of each
/// permutation.
pub fn stability_over<F, I>(maps: &[&[f64]], mut stat: F, subgroup: usize, perms: I) -> Result<Stability>
where
    F: FnMut(&[&[f64]]) -> Result<f64>,
    I: IntoIterator<Item = Vec<usize>>,
{
    if subgroup == 0 || subgroup >= maps.len() {
        return Err(Error::InvalidArgument(format!(
            "subgroup size {subgroup} must lie in 1..{}",
            maps.len()
        )));
    }
    let mut values = Vec::new();
    let mut group: Vec<&[f64]> = Vec::with_capacity(subgroup);
    for p in perms {
        group.clear();
        group.extend(p[..subgroup].iter().map(|&i| maps[i]));
        values.push(stat(&group)?);
    }
    if values.is_empty() {
        return Err(Error::InvalidArgument("no permutations".into()));
    }
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
    Ok(Stability { mean, variance, values })
}

/// Monte-Carlo version over `permutations` seeded random permutations.
pub fn threshold_stability<F>(
    maps: &[&[f64]],
    stat: F,
    subgroup: usize,
    permutations: usize,
    seed: u64,
) -> Result<Stability>
where
    F: FnMut(&[&[f64]]) -> Result<f64>,
{
    let mut rng = rng_from_seed(seed);
    let n = maps.len();
    let perms = (0..permutations).map(move |_| {
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(&mut rng);
        p
    });
    stability_over(maps, stat, subgroup, perms)
}

/// All N! permutations in lexicographic order.
pub fn all_permutations(n: usize) -> impl Iterator<Item = Vec<usize>> {
    let mut next: Option<Vec<usize>> = Some((0..n).collect());
    std::iter::from_fn(move || {
        let cur = next.take()?;
        let mut p = cur.clone();
        // next lexicographic permutation
        if let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) {
            let j = (i..p.len()).rev().find(|&j| p[j] > p[i - 1]).unwrap();
            p.swap(i - 1, j);
            p[i..].reverse();
            next = Some(p);
        }
        Some(cur)
    })
}

pub fn threshold_stability_exhaustive<F>(maps: &[&[f64]], stat: F, subgroup: usize) -> Result<Stability>
where
    F: FnMut(&[&[f64]]) -> Result<f64>,
{
    if maps.len() > 10 {
        return Err(Error::CapExceeded {
            size: maps.len(),
            cap: 10,
        });
    }
    stability_over(maps, stat, subgroup, all_permutations(maps.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_matches_direct_tail() {
        let mut z = 0.0;
        while z < 30.0 {
            let (a, b) = (tail_score(z), neg_log_tail(z));
            assert!((a - b).abs() < 1e-11 * (1.0 + b), "z={z}: {a} vs {b}");
            z += 0.0137;
        }
    }

    #[test]
    fn tail_branches_meet() {
        let below = -erfc(TAIL_SWITCH / std::f64::consts::SQRT_2).ln();
        let above = neg_log_tail(TAIL_SWITCH);
        assert!((below - above).abs() < 1e-9, "{below} vs {above}");
    }

    #[test]
    fn trigamma_values() {
        // ψ'(1) = π²/6, ψ'(1/2) = π²/2
        let pi2 = std::f64::consts::PI.powi(2);
        assert!((trigamma(1.0) - pi2 / 6.0).abs() < 1e-10);
        assert!((trigamma(0.5) - pi2 / 2.0).abs() < 1e-10);
    }

    #[test]
    fn gamma_mle_recovers_moments() {
        // unit weights on an exact sample of a Gamma(3, 2) shape
        let v = [2.0, 4.0, 6.0, 8.0, 10.0];
        let s0 = v.len() as f64;
        let s1: f64 = v.iter().sum();
        let sl: f64 = v.iter().map(|x: &f64| x.ln()).sum();
        let (a, b) = gamma_mle(s0, s1, sl).unwrap();
        assert!((a * b - 6.0).abs() < 1e-9);
        let lhs = a.ln() - digamma(a);
        assert!((lhs - ((s1 / s0).ln() - sl / s0)).abs() < 1e-10);
    }

    #[test]
    fn permutations_enumerate_all() {
        let all: Vec<_> = all_permutations(4).collect();
        assert_eq!(all.len(), 24);
        assert_eq!(all[0], vec![0, 1, 2, 3]);
        assert_eq!(all[23], vec![3, 2, 1, 0]);
    }
}
