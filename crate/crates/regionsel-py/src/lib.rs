//! Python bindings for `regionsel`.
//!
//! Arrays cross the boundary as flat Python lists in row-major voxel order; grids are
//! given by their dimensions.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use regionsel::baseline::{self, Adjustment};
use regionsel::evidence::{self, EvidenceConfig, Mode};
use regionsel::model::{self, Hyperparams};
use regionsel::randthresh::{self, GgmOptions, Norm, ThresholdOptions, Variance, Window};
use regionsel::simulate::{self, PhantomSpec};
use regionsel::volume::{Parcellation, ScalarMap, SubjectData, VoxelGrid};

fn err(e: regionsel::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn subjects(dims: &[usize], effects: Vec<Vec<f64>>, variances: Option<Vec<Vec<f64>>>) -> PyResult<Vec<SubjectData>> {
    let grid = VoxelGrid::new(dims).map_err(err)?;
    let variances = variances.unwrap_or_else(|| vec![vec![0.0; grid.len()]; effects.len()]);
    if variances.len() != effects.len() {
        return Err(PyValueError::new_err("effects and variances differ in subject count"));
    }
    effects
        .into_iter()
        .zip(variances)
        .map(|(y, s2)| {
            SubjectData::new(
                ScalarMap::new(grid.clone(), y).map_err(err)?,
                ScalarMap::new(grid.clone(), s2).map_err(err)?,
            )
            .map_err(err)
        })
        .collect()
}

// ----------------------------------------------------------------------------
// model

/// Log density of one region's data with the subject's template integrated out.
#[pyfunction]
fn block_loglik(y: Vec<f64>, s2: Vec<f64>, eta: f64, nu2: f64, sigma2: f64) -> PyResult<f64> {
    if y.len() != s2.len() {
        return Err(PyValueError::new_err("y and s2 differ in length"));
    }
    Ok(model::block_loglik(&y, &s2, eta, nu2, sigma2))
}

// ----------------------------------------------------------------------------
// simulation

/// Returns `(y, truth)` with the first `active` means uniform on `[low, high]`.
#[pyfunction]
#[pyo3(signature = (n, active, low, high, seed=0))]
fn gen_sparse_means(n: usize, active: usize, low: f64, high: f64, seed: u64) -> PyResult<(Vec<f64>, Vec<bool>)> {
    simulate::gen_sparse_means(n, active, low, high, seed).map_err(err)
}

/// 24×24 disc phantom as a dict of `dims`, `effects`, `variances`, `labels`, `truth_mean`.
#[pyfunction]
#[pyo3(signature = (seed=0, subjects=30))]
fn simulate_disc<'py>(py: Python<'py>, seed: u64, subjects: usize) -> PyResult<Bound<'py, PyDict>> {
    let mut spec = PhantomSpec::disc_2d(seed);
    spec.subjects = subjects;
    let ph = simulate::gen_grid_phantom(&spec).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("dims", spec.dims.clone())?;
    let effects: Vec<Vec<f64>> = ph.subjects.iter().map(|s| s.effects().values().to_vec()).collect();
    let variances: Vec<Vec<f64>> = ph.subjects.iter().map(|s| s.variances().values().to_vec()).collect();
    d.set_item("effects", effects)?;
    d.set_item("variances", variances)?;
    d.set_item("labels", ph.parcellation.labels().to_vec())?;
    d.set_item("truth_mean", ph.truth_mu.values().to_vec())?;
    Ok(d)
}

// ----------------------------------------------------------------------------
// thresholding

/// Random-threshold estimate of the number of nonzero means.
#[pyfunction]
#[pyo3(signature = (y, sigma=None, window="varying", width=None, kappa=None, p=None))]
fn estimate_count<'py>(
    py: Python<'py>,
    y: Vec<f64>,
    sigma: Option<f64>,
    window: &str,
    width: Option<usize>,
    kappa: Option<usize>,
    p: Option<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let window = match window {
        "varying" => Window::Varying { kappa },
        "fixed" => Window::Fixed {
            width: width.ok_or_else(|| PyValueError::new_err("a fixed window needs `width`"))?,
        },
        other => return Err(PyValueError::new_err(format!("unknown window {other:?}"))),
    };
    let opts = ThresholdOptions {
        variance: sigma.map_or(Variance::Unknown, Variance::Known),
        window,
        norm: p.map_or(Norm::Max, Norm::Lp),
        full_profile: false,
    };
    let r = randthresh::estimate_count(&y, &opts).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("count", r.count)?;
    d.set_item("threshold", r.threshold)?;
    d.set_item("selected", r.selected)?;
    d.set_item("eta", r.eta)?;
    Ok(d)
}

/// Gamma-Gaussian mixture fit; `detections` are the indices classified active.
#[pyfunction]
#[pyo3(signature = (y, negative_class=false))]
fn ggm_fit<'py>(py: Python<'py>, y: Vec<f64>, negative_class: bool) -> PyResult<Bound<'py, PyDict>> {
    let opts = GgmOptions {
        negative_class,
        ..GgmOptions::default()
    };
    let fit = randthresh::ggm_fit(&y, &opts).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("null_weight", fit.null_weight)?;
    d.set_item("positive_weight", fit.positive.weight)?;
    d.set_item("threshold", fit.threshold)?;
    d.set_item("detections", fit.detections(&y))?;
    Ok(d)
}

// ----------------------------------------------------------------------------
// mass-univariate baseline

/// One-sample t map; undefined voxels are NaN.
#[pyfunction]
fn t_map(dims: Vec<usize>, effects: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    let data = subjects(&dims, effects, None)?;
    Ok(baseline::t_map(&data).map_err(err)?.values)
}

/// Indices rejected by `"bonferroni"` or `"bh"` at level `alpha`.
#[pyfunction]
#[pyo3(signature = (p, method="bh", alpha=0.05))]
fn adjust_pvalues(p: Vec<f64>, method: &str, alpha: f64) -> PyResult<Vec<usize>> {
    let m = match method {
        "bonferroni" => Adjustment::Bonferroni,
        "bh" => Adjustment::Bh,
        other => return Err(PyValueError::new_err(format!("unknown adjustment {other:?}"))),
    };
    Ok(baseline::adjust_pvalues(&p, m, alpha).map_err(err)?.rejected)
}

// ----------------------------------------------------------------------------
// region selection

/// Per-region Bayes factors under the posterior-mode pipeline.
///
/// Returns one dict per region with `log_m0`, `log_m1`, `lr`, `d`, `b`, `p_tilde`,
/// `eta_hat` and `selected`.
#[pyfunction]
#[pyo3(signature = (dims, effects, variances, labels, mode="posterior-mode-SU", seed=0, penalty=1.0))]
#[allow(clippy::too_many_arguments)]
fn select_regions<'py>(
    py: Python<'py>,
    dims: Vec<usize>,
    effects: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
    labels: Vec<u32>,
    mode: &str,
    seed: u64,
    penalty: f64,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let mode: Mode = mode.parse().map_err(err)?;
    let data = subjects(&dims, effects, Some(variances))?;
    let grid = VoxelGrid::new(&dims).map_err(err)?;
    let parc = Parcellation::from_labels(grid, labels).map_err(err)?;
    let cfg = EvidenceConfig {
        seed,
        penalty,
        ..EvidenceConfig::default()
    };
    let h = Hyperparams::default();
    let r = py
        .detach(|| evidence::posterior_mode_pipeline(&data, &parc, &h, &cfg, mode))
        .map_err(err)?;
    r.regions
        .iter()
        .map(|e| {
            let d = PyDict::new(py);
            d.set_item("region", e.region)?;
            d.set_item("log_m0", e.log_m0)?;
            d.set_item("log_m1", e.log_m1)?;
            d.set_item("lr", e.lr)?;
            d.set_item("d", e.d)?;
            d.set_item("b", e.b)?;
            d.set_item("p_tilde", e.p_tilde)?;
            d.set_item("eta_hat", e.eta_hat)?;
            d.set_item("selected", r.selected.get(e.region))?;
            Ok(d)
        })
        .collect()
}

/// Run the command-line front end in-process; returns the exit status.
#[pyfunction]
fn run_cli(argv: Vec<String>) -> i32 {
    regionsel::cli::run(std::iter::once("regionsel".to_string()).chain(argv))
}

#[pymodule]
fn regionsel_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(block_loglik, m)?)?;
    m.add_function(wrap_pyfunction!(gen_sparse_means, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_disc, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_count, m)?)?;
    m.add_function(wrap_pyfunction!(ggm_fit, m)?)?;
    m.add_function(wrap_pyfunction!(t_map, m)?)?;
    m.add_function(wrap_pyfunction!(adjust_pvalues, m)?)?;
    m.add_function(wrap_pyfunction!(select_regions, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
