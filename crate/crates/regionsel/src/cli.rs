//! Command-line front end.
//!
//! Every subcommand writes its artifacts and a `provenance.json` into `--out`. Errors
//! print one JSON record on stderr and map to exit codes 2 (usage), 3 (data) and
//! 4 (numerical failure).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::baseline::{self, Adjustment, MultipleTestResult};
use crate::config::ConfigFile;
use crate::deform::{write_displacements, DisplacementSet};
use crate::error::{Error, Result};
use crate::evidence::{self, CalibrationItem, EvidenceConfig, Mode};
use crate::model::{GroupParams, Hyperparams, Network, Observations};
use crate::randthresh::{self, GgmOptions, Norm, NullCdf, ThresholdOptions, Variance, Window};
use crate::report::{num, write_json, write_slices, Provenance, Table};
use crate::samplers::{self, ChainConfig, SaemConfig, SpatialConfig};
use crate::simulate::{self, PhantomSpec};
use crate::volume::{read_manifest, read_volume, write_dataset, write_volume, Dataset, ScalarMap, Volume, VoxelGrid};

#[derive(Debug, Parser)]
#[command(
    name = "regionsel",
    version,
    about = "Group-level region selection under spatial uncertainty"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args, Serialize)]
struct Common {
    /// Base random seed (overrides a `seed` key in the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// no-SU, posterior-mode-SU or exact-SU.
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Worker cap; computation currently runs on one thread whatever the value.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// `key = value` settings file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "regionsel-out")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Simulate(SimulateArgs),
    /// SAEM point estimate of the group parameters.
    Fit(ModelArgs),
    /// Gibbs chain for the group model.
    Sample(ModelArgs),
    /// Most probable displacements by SAEM followed by simulated annealing.
    Sa(InputArgs),
    /// Log marginal likelihood of one network.
    Evidence(EvidenceArgs),
    /// Per-region Bayes factors and the selected network.
    Select(InputArgs),
    /// Choose the likelihood-ratio weight from datasets with known truth.
    CalibratePenalty(CalibrateArgs),
    /// Posterior odds between parcellations.
    CompareParcellations(CompareArgs),
    /// Count nonzero means in a scalar map by the random threshold or a GGM.
    Randthresh(RandthreshArgs),
    /// Voxelwise one-sample t tests with multiple-comparison control.
    Baseline(BaselineArgs),
    /// Render a scalar volume as slices and a summary table.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PhantomKind {
    #[value(name = "bumps-1d")]
    Bumps1d,
    #[value(name = "disc-2d")]
    Disc2d,
    #[value(name = "sphere-3d")]
    Sphere3d,
    #[value(name = "two-spheres-3d")]
    TwoSpheres3d,
    SparseMeans,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    phantom: PhantomKind,
    /// Number of subjects (phantoms).
    #[arg(long)]
    subjects: Option<usize>,
    /// Grid side for sphere-3d.
    #[arg(long, default_value_t = 16)]
    side: usize,
    /// Sample size (sparse-means).
    #[arg(long, default_value_t = 50_000)]
    n: usize,
    /// Number of nonzero means (sparse-means).
    #[arg(long, default_value_t = 10_000)]
    active: usize,
    /// Lower end of the nonzero-mean range (sparse-means).
    #[arg(long, default_value_t = 2.0)]
    low: f64,
    /// Upper end of the nonzero-mean range (sparse-means).
    #[arg(long, default_value_t = 6.0)]
    high: f64,
}

#[derive(Debug, Args, Serialize)]
struct InputArgs {
    /// Dataset manifest.
    #[arg(long)]
    input: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct ModelArgs {
    #[arg(long)]
    input: PathBuf,
    /// Network as a bit string, one character per region; all regions on by default.
    #[arg(long)]
    network: Option<String>,
}

#[derive(Debug, Args, Serialize)]
struct EvidenceArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    network: String,
    /// Independent exact-SU estimates.
    #[arg(long, default_value_t = 1)]
    repeats: usize,
}

#[derive(Debug, Args, Serialize)]
struct CalibrateArgs {
    /// Manifests carrying `truth_active`.
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct CompareArgs {
    #[arg(long)]
    input: PathBuf,
    /// Label volumes to compare.
    #[arg(long, num_args = 2.., required = true)]
    parcellations: Vec<PathBuf>,
    /// Condition on displacements read from this file instead of freezing them.
    #[arg(long)]
    displacements: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum WindowKind {
    Fixed,
    Varying,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum NormKind {
    Max,
    Lp,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Method {
    Random,
    Ggm,
}

#[derive(Debug, Args, Serialize)]
struct RandthreshArgs {
    /// Scalar volume; values are pooled regardless of shape.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = Method::Random)]
    method: Method,
    #[arg(long, value_enum, default_value_t = WindowKind::Varying)]
    window: WindowKind,
    /// Width of the fixed window.
    #[arg(long)]
    width: Option<usize>,
    /// Smallest varying-window width; defaults to ceil(0.05 n).
    #[arg(long)]
    kappa: Option<usize>,
    /// Known noise std; estimated per cut when absent.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, value_enum, default_value_t = NormKind::Max)]
    norm: NormKind,
    /// Exponent of the lp norm.
    #[arg(long, default_value_t = 2.0)]
    p: f64,
    /// Evaluate every cut instead of pruning by lower bounds.
    #[arg(long)]
    full_profile: bool,
    /// Also run the global null test at this level.
    #[arg(long)]
    null_test: Option<f64>,
    /// Monte Carlo replicates of the null test.
    #[arg(long, default_value_t = 2000)]
    null_reps: usize,
    /// Add a negative Gamma class to the GGM.
    #[arg(long)]
    negative_class: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ProcedureKind {
    Bonferroni,
    Bh,
    Maxt,
    Cluster,
}

#[derive(Debug, Args, Serialize)]
struct BaselineArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum)]
    procedure: ProcedureKind,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Voxelwise level of the cluster-forming threshold.
    #[arg(long, default_value_t = 0.001)]
    forming_alpha: f64,
    /// Sign-flip replicates.
    #[arg(long, default_value_t = 1000)]
    reps: usize,
}

#[derive(Debug, Args, Serialize)]
struct ReportArgs {
    /// Scalar or label volume.
    #[arg(long)]
    input: PathBuf,
}

// ----------------------------------------------------------------------------
// entry point

/// Parse `argv` (program name first), run, and return the exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.render().to_string();
            emit_error("usage", msg.trim_end(), 2);
            return 2;
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(&cli, &argv) {
        Ok(()) => 0,
        Err(e) => {
            let code = e.exit_code();
            emit_error(e.kind(), &e.to_string(), code);
            code
        }
    }
}

fn emit_error(kind: &str, message: &str, code: i32) {
    let rec = json!({ "error": kind, "message": message, "exit_code": code });
    eprintln!("{rec}");
}

struct Ctx<'a> {
    common: &'a Common,
    argv: &'a [String],
    config: ConfigFile,
    out: PathBuf,
    outputs: Vec<String>,
}

impl Ctx<'_> {
    fn seed(&self) -> Result<u64> {
        match self.common.seed {
            Some(s) => Ok(s),
            None => Ok(self.config.take_as::<u64>("seed")?.unwrap_or(0)),
        }
    }

    fn mode(&self, default: Mode, allowed: &[Mode], command: &str) -> Result<Mode> {
        let m = match &self.common.mode {
            Some(s) => s.parse::<Mode>()?,
            None => default,
        };
        if !allowed.contains(&m) {
            let names: Vec<String> = allowed.iter().map(Mode::to_string).collect();
            return Err(Error::InvalidArgument(format!(
                "{command} does not run in {m} mode (use {})",
                names.join(" or ")
            )));
        }
        Ok(m)
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.out.join(name)
    }

    fn table(&mut self, name: &str, t: &Table) -> Result<()> {
        let p = self.path(name);
        t.write(p)
    }

    fn json<T: Serialize>(&mut self, name: &str, v: &T) -> Result<()> {
        let p = self.path(name);
        write_json(p, v)
    }

    fn volume(&mut self, name: &str, v: &Volume) -> Result<()> {
        let p = self.path(name);
        write_volume(p, v)
    }

    /// Weights volume plus its JSON sidecar.
    fn displacements(&mut self, w: &DisplacementSet) -> Result<()> {
        self.outputs.push("displacements.json".into());
        let p = self.path("displacements.vol");
        write_displacements(p, w)
    }

    fn slices(&mut self, stem: &str, grid: &VoxelGrid, values: &[f64]) -> Result<()> {
        for p in write_slices(&self.out, stem, grid, values)? {
            let name = p
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            self.outputs.push(name);
        }
        Ok(())
    }

    fn evidence_settings(&self) -> Result<(Hyperparams, EvidenceConfig)> {
        let h = self.config.apply(&Hyperparams::default())?;
        let mut cfg = self.config.apply(&EvidenceConfig::default())?;
        cfg.seed = self.seed()?;
        h.validate()?;
        cfg.validate()?;
        Ok((h, cfg))
    }

    fn finish(mut self, command: &str, mode: Option<Mode>, resolved: serde_json::Value) -> Result<()> {
        self.config.finish()?;
        self.outputs.sort();
        let prov = Provenance {
            command: command.to_string(),
            argv: self.argv.to_vec(),
            seed: self.seed()?,
            mode: mode.map(|m| m.to_string()),
            threads: self.common.threads,
            config: json!({ "file": self.config.to_json(), "resolved": resolved }),
            version: env!("CARGO_PKG_VERSION").to_string(),
            outputs: self.outputs.clone(),
        };
        prov.write(&self.out)?;
        Ok(())
    }
}

fn dispatch(cli: &Cli, argv: &[String]) -> Result<()> {
    if cli.common.threads == 0 {
        return Err(Error::InvalidArgument("--threads must be at least 1".into()));
    }
    let config = match &cli.common.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let out = cli.common.out.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let ctx = Ctx {
        common: &cli.common,
        argv,
        config,
        out,
        outputs: Vec::new(),
    };
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(ctx, a),
        Command::Fit(a) => cmd_fit(ctx, a),
        Command::Sample(a) => cmd_sample(ctx, a),
        Command::Sa(a) => cmd_sa(ctx, a),
        Command::Evidence(a) => cmd_evidence(ctx, a),
        Command::Select(a) => cmd_select(ctx, a),
        Command::CalibratePenalty(a) => cmd_calibrate(ctx, a),
        Command::CompareParcellations(a) => cmd_compare(ctx, a),
        Command::Randthresh(a) => cmd_randthresh(ctx, a),
        Command::Baseline(a) => cmd_baseline(ctx, a),
        Command::Report(a) => cmd_report(ctx, a),
    }
}

// ----------------------------------------------------------------------------
// helpers

fn load(path: &Path) -> Result<Dataset> {
    let ds = read_manifest(path)?;
    if ds.subjects.is_empty() {
        return Err(Error::InvalidArgument(format!("{} lists no subjects", path.display())));
    }
    Ok(ds)
}

fn parcellation_of(ds: &Dataset, path: &Path) -> Result<crate::volume::Parcellation> {
    ds.parcellation
        .clone()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no parcellation", path.display())))
}

fn network_for(arg: Option<&str>, regions: usize) -> Result<Network> {
    let g = match arg {
        Some(s) => Network::parse(s)?,
        None => Network::all(regions, true),
    };
    if g.len() != regions {
        return Err(Error::Shape(format!(
            "network has {} entries for {regions} regions",
            g.len()
        )));
    }
    Ok(g)
}

fn theta_table(theta: &GroupParams) -> Result<Table> {
    let mut t = Table::new(["region", "eta", "nu2", "sigma2", "sigma_s2"]);
    for j in 0..theta.regions() {
        t.push(vec![
            j.to_string(),
            num(theta.eta[j]),
            num(theta.nu2[j]),
            num(theta.sigma2[j]),
            num(theta.sigma_s2),
        ])?;
    }
    Ok(t)
}

fn spatial(mode: Mode, cfg: &EvidenceConfig) -> Option<SpatialConfig> {
    (mode != Mode::NoSu).then_some(SpatialConfig {
        omega: cfg.omega,
        sigma_s2: cfg.sigma_s2_init,
    })
}

fn value_name<T: ValueEnum>(v: T) -> String {
    v.to_possible_value()
        .map_or_else(String::new, |p| p.get_name().to_string())
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

/// Non-finite entries become 0 so the map can be stored.
fn storable(grid: &VoxelGrid, v: &[f64]) -> Result<ScalarMap> {
    ScalarMap::new(
        grid.clone(),
        v.iter().map(|&x| if x.is_finite() { x } else { 0.0 }).collect(),
    )
}

fn indicator(grid: &VoxelGrid, on: impl Iterator<Item = usize>) -> Result<ScalarMap> {
    let mut v = vec![0.0; grid.len()];
    for k in on {
        v[k] = 1.0;
    }
    ScalarMap::new(grid.clone(), v)
}

// ----------------------------------------------------------------------------
// subcommands

fn cmd_simulate(mut ctx: Ctx, a: &SimulateArgs) -> Result<()> {
    let seed = ctx.seed()?;
    if let PhantomKind::SparseMeans = a.phantom {
        let n = ctx.config.take_as("n")?.unwrap_or(a.n);
        let active = ctx.config.take_as("active")?.unwrap_or(a.active);
        let low = ctx.config.take_as("low")?.unwrap_or(a.low);
        let high = ctx.config.take_as("high")?.unwrap_or(a.high);
        let (y, truth) = simulate::gen_sparse_means(n, active, low, high, seed)?;
        let grid = VoxelGrid::new(&[n])?;
        ctx.volume("y.vol", &Volume::Scalar(ScalarMap::new(grid.clone(), y)?))?;
        ctx.volume(
            "truth.vol",
            &Volume::Scalar(indicator(&grid, (0..n).filter(|&i| truth[i]))?),
        )?;
        let resolved = json!({ "phantom": value_name(a.phantom), "n": n, "active": active, "low": low, "high": high });
        return ctx.finish("simulate", None, resolved);
    }
    let mut spec = match a.phantom {
        PhantomKind::Bumps1d => PhantomSpec::bumps_1d(seed),
        PhantomKind::Disc2d => PhantomSpec::disc_2d(seed),
        PhantomKind::Sphere3d => PhantomSpec::sphere_3d(a.side, 4.0, 1.0, seed),
        PhantomKind::TwoSpheres3d => PhantomSpec::two_spheres_3d(seed),
        PhantomKind::SparseMeans => unreachable!(),
    };
    spec = ctx.config.apply(&spec)?;
    spec.seed = seed;
    if let Some(n) = a.subjects {
        spec.subjects = n;
    }
    let ph = match a.phantom {
        PhantomKind::Bumps1d => simulate::gen_1d(&spec)?,
        _ => simulate::gen_grid_phantom(&spec)?,
    };
    let active: Vec<usize> = (1..ph.parcellation.region_count()).collect();
    let ds = Dataset {
        subjects: ph.subjects,
        parcellation: Some(ph.parcellation),
        truth_mean: Some(ph.truth_mu.clone()),
        truth_active: Some(active),
    };
    write_dataset(&ctx.out, "data", &ds)?;
    for entry in fs::read_dir(&ctx.out).map_err(|e| Error::io(&ctx.out, e))? {
        let entry = entry.map_err(|e| Error::io(&ctx.out, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with("data") {
            ctx.outputs.push(name);
        }
    }
    let grid = ph.truth_mu.grid().clone();
    ctx.slices("truth_mean", &grid, ph.truth_mu.values())?;
    ctx.finish(
        "simulate",
        None,
        json!({ "phantom": value_name(a.phantom), "spec": to_json(&spec) }),
    )
}

fn cmd_fit(mut ctx: Ctx, a: &ModelArgs) -> Result<()> {
    let mode = ctx.mode(Mode::NoSu, &[Mode::NoSu, Mode::PosteriorModeSu], "fit")?;
    let (h, ecfg) = ctx.evidence_settings()?;
    let ds = load(&a.input)?;
    let parc = parcellation_of(&ds, &a.input)?;
    let gamma = network_for(a.network.as_deref(), parc.region_count())?;
    let cfg = SaemConfig {
        burn_in: ecfg.saem_burn_in,
        iterations: ecfg.saem_iterations,
        rw_sigma: ecfg.rw_sigma,
        target_accept: ecfg.target_accept,
        seed: ecfg.seed,
        spatial: spatial(mode, &ecfg),
    };
    let fit = samplers::saem_fit(&ds.subjects, &parc, &gamma, &h, &cfg)?;
    ctx.table("theta.csv", &theta_table(&fit.theta)?)?;
    let mut series = Table::new(["iteration", "region", "eta", "nu2", "sigma2", "sigma_s2"]);
    for (k, th) in fit.theta_series.iter().enumerate() {
        for j in 0..th.regions() {
            series.push(vec![
                (k + 1).to_string(),
                j.to_string(),
                num(th.eta[j]),
                num(th.nu2[j]),
                num(th.sigma2[j]),
                num(th.sigma_s2),
            ])?;
        }
    }
    ctx.table("theta_series.csv", &series)?;
    let grid = parc.grid().clone();
    ctx.volume(
        "template.vol",
        &Volume::Scalar(ScalarMap::new(grid.clone(), fit.mu.clone())?),
    )?;
    ctx.slices("template", &grid, &fit.mu)?;
    if let Some(w) = &fit.w {
        ctx.displacements(w)?;
    }
    let resolved = json!({ "network": gamma.bits(), "hyper": to_json(&h), "saem": to_json(&cfg) });
    ctx.finish("fit", Some(mode), resolved)
}

fn cmd_sample(mut ctx: Ctx, a: &ModelArgs) -> Result<()> {
    let mode = ctx.mode(Mode::NoSu, &[Mode::NoSu, Mode::PosteriorModeSu], "sample")?;
    let (h, ecfg) = ctx.evidence_settings()?;
    let ds = load(&a.input)?;
    let parc = parcellation_of(&ds, &a.input)?;
    let gamma = network_for(a.network.as_deref(), parc.region_count())?;
    let cfg = ChainConfig {
        burn_in: ecfg.gibbs_burn_in,
        samples: ecfg.gibbs_samples,
        rw_sigma: ecfg.rw_sigma,
        target_accept: ecfg.target_accept,
        seed: ecfg.seed,
        spatial: spatial(mode, &ecfg),
    };
    let tr = samplers::run_chain(&ds.subjects, &parc, &gamma, &h, &cfg)?;
    ctx.table("theta_mean.csv", &theta_table(&tr.mean_theta)?)?;
    let mut trace = Table::new(["sweep", "region", "eta", "nu2", "sigma2", "sigma_s2"]);
    for (g, th) in tr.theta.iter().enumerate() {
        for j in 0..th.regions() {
            trace.push(vec![
                (g + 1).to_string(),
                j.to_string(),
                num(th.eta[j]),
                num(th.nu2[j]),
                num(th.sigma2[j]),
                num(th.sigma_s2),
            ])?;
        }
    }
    ctx.table("theta_trace.csv", &trace)?;
    let grid = parc.grid().clone();
    ctx.volume(
        "template_mean.vol",
        &Volume::Scalar(ScalarMap::new(grid.clone(), tr.mean_mu.clone())?),
    )?;
    ctx.slices("template_mean", &grid, &tr.mean_mu)?;
    let mean_acc = if tr.acceptance.is_empty() {
        None
    } else {
        Some(tr.acceptance.iter().sum::<f64>() / tr.acceptance.len() as f64)
    };
    let mut summary = json!({ "rw_sigma": tr.rw_sigma, "mean_acceptance": mean_acc });
    if let Some(t) = &ds.truth_mean {
        let mse = t
            .values()
            .iter()
            .zip(&tr.mean_mu)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / t.values().len() as f64;
        summary["template_mse"] = json!(mse);
    }
    ctx.json("summary.json", &summary)?;
    let resolved = json!({ "network": gamma.bits(), "hyper": to_json(&h), "chain": to_json(&cfg) });
    ctx.finish("sample", Some(mode), resolved)
}

fn cmd_sa(mut ctx: Ctx, a: &InputArgs) -> Result<()> {
    let mode = ctx.mode(Mode::PosteriorModeSu, &[Mode::PosteriorModeSu], "sa")?;
    let (h, cfg) = ctx.evidence_settings()?;
    let ds = load(&a.input)?;
    let obs = Observations::from_subjects(&ds.subjects)?;
    let fit = evidence::fit_displacements(&obs, &h, &cfg)?;
    ctx.displacements(&fit.w)?;
    ctx.table("theta.csv", &theta_table(&fit.theta)?)?;
    ctx.json(
        "summary.json",
        &json!({ "objective": fit.objective, "rw_sigma": fit.rw_sigma }),
    )?;
    ctx.finish(
        "sa",
        Some(mode),
        json!({ "hyper": to_json(&h), "evidence": to_json(&cfg) }),
    )
}

fn cmd_evidence(mut ctx: Ctx, a: &EvidenceArgs) -> Result<()> {
    let mode = ctx.mode(Mode::NoSu, &[Mode::NoSu, Mode::ExactSu], "evidence")?;
    let (h, cfg) = ctx.evidence_settings()?;
    let ds = load(&a.input)?;
    let parc = parcellation_of(&ds, &a.input)?;
    let gamma = network_for(Some(&a.network), parc.region_count())?;
    let mut t = Table::new(["run", "log_marginal"]);
    let summary = match mode {
        Mode::ExactSu => {
            let s = evidence::chib_exact_su_repeated(&ds.subjects, &parc, &gamma, &h, &cfg, a.repeats)?;
            for (k, r) in s.runs.iter().enumerate() {
                t.push(vec![k.to_string(), num(r.log_marginal)])?;
            }
            json!({ "network": gamma.bits(), "mean": s.mean, "std": s.std, "runs": to_json(&s.runs) })
        }
        _ => {
            let v = evidence::log_marginal_no_su(&ds.subjects, &parc, &gamma, &h, &cfg)?;
            t.push(vec!["0".into(), num(v)])?;
            json!({ "network": gamma.bits(), "mean": v, "std": 0.0 })
        }
    };
    ctx.table("evidence.csv", &t)?;
    ctx.json("summary.json", &summary)?;
    let resolved =
        json!({ "network": gamma.bits(), "repeats": a.repeats, "hyper": to_json(&h), "evidence": to_json(&cfg) });
    ctx.finish("evidence", Some(mode), resolved)
}

fn region_table(r: &evidence::SelectionReport) -> Result<Table> {
    let mut t = Table::new([
        "region",
        "log_m0",
        "log_m1",
        "lr",
        "d",
        "b",
        "b_penalized",
        "p_tilde",
        "eta_hat",
        "selected",
    ]);
    for e in &r.regions {
        t.push(vec![
            e.region.to_string(),
            num(e.log_m0),
            num(e.log_m1),
            num(e.lr),
            num(e.d),
            num(e.b),
            num(e.b_penalized),
            num(e.p_tilde),
            num(e.eta_hat),
            u8::from(r.selected.get(e.region)).to_string(),
        ])?;
    }
    Ok(t)
}

fn cmd_select(mut ctx: Ctx, a: &InputArgs) -> Result<()> {
    let mode = ctx.mode(Mode::PosteriorModeSu, &[Mode::NoSu, Mode::PosteriorModeSu], "select")?;
    let (h, cfg) = ctx.evidence_settings()?;
    let ds = load(&a.input)?;
    let parc = parcellation_of(&ds, &a.input)?;
    let r = evidence::posterior_mode_pipeline(&ds.subjects, &parc, &h, &cfg, mode)?;
    ctx.table("regions.csv", &region_table(&r)?)?;
    ctx.json("selection.json", &r)?;
    let grid = parc.grid().clone();
    let mask = indicator(&grid, (0..grid.len()).filter(|&k| r.selected.get(parc.label(k))))?;
    ctx.slices("selected", &grid, mask.values())?;
    ctx.volume("selected.vol", &Volume::Scalar(mask))?;
    if let Some(w) = &r.w_hat {
        ctx.displacements(w)?;
    }
    ctx.finish(
        "select",
        Some(mode),
        json!({ "hyper": to_json(&h), "evidence": to_json(&cfg) }),
    )
}

fn cmd_calibrate(mut ctx: Ctx, a: &CalibrateArgs) -> Result<()> {
    let mode = ctx.mode(
        Mode::PosteriorModeSu,
        &[Mode::NoSu, Mode::PosteriorModeSu],
        "calibrate-penalty",
    )?;
    let (h, cfg) = ctx.evidence_settings()?;
    let mut items = Vec::with_capacity(a.inputs.len());
    for p in &a.inputs {
        let ds = load(p)?;
        let parc = parcellation_of(&ds, p)?;
        let active = ds
            .truth_active
            .clone()
            .ok_or_else(|| Error::InvalidArgument(format!("{} has no truth_active", p.display())))?;
        let mut truth = vec![false; parc.region_count()];
        for j in active {
            if j >= truth.len() {
                return Err(Error::Shape(format!(
                    "active region {j} out of range in {}",
                    p.display()
                )));
            }
            truth[j] = true;
        }
        let r = evidence::posterior_mode_pipeline(&ds.subjects, &parc, &h, &cfg, mode)?;
        items.push(CalibrationItem::from_report(&r, truth));
    }
    let cal = evidence::calibrate_penalty(&items)?;
    let mut t = Table::new(["c", "misclassified"]);
    for (c, e) in &cal.risk {
        t.push(vec![num(*c), e.to_string()])?;
    }
    ctx.table("risk.csv", &t)?;
    ctx.json("calibration.json", &json!({ "c_star": cal.c_star, "errors_at_c_star": cal.errors_at_c_star, "regions": cal.regions, "items": items }))?;
    ctx.finish(
        "calibrate-penalty",
        Some(mode),
        json!({ "hyper": to_json(&h), "evidence": to_json(&cfg) }),
    )
}

fn cmd_compare(mut ctx: Ctx, a: &CompareArgs) -> Result<()> {
    let mode = ctx.mode(
        Mode::NoSu,
        &[Mode::NoSu, Mode::PosteriorModeSu],
        "compare-parcellations",
    )?;
    let (h, cfg) = ctx.evidence_settings()?;
    let ds = load(&a.input)?;
    let parcs = a
        .parcellations
        .iter()
        .map(|p| read_volume(p)?.into_labels())
        .collect::<Result<Vec<_>>>()?;
    let w = match (mode, &a.displacements) {
        (Mode::NoSu, None) => None,
        (Mode::NoSu, Some(_)) => {
            return Err(Error::InvalidArgument(
                "--displacements needs posterior-mode-SU mode".into(),
            ))
        }
        (_, Some(p)) => Some(crate::deform::read_displacements(p)?),
        (_, None) => {
            let obs = Observations::from_subjects(&ds.subjects)?;
            Some(evidence::fit_displacements(&obs, &h, &cfg)?.w)
        }
    };
    let c = evidence::compare_parcellations(&ds.subjects, &parcs, &h, &cfg, w.as_ref())?;
    let mut t = Table::new(["parcellation", "log_evidence", "posterior"]);
    for (i, p) in a.parcellations.iter().enumerate() {
        t.push(vec![
            p.display().to_string(),
            num(c.log_evidence[i]),
            num(c.posterior[i]),
        ])?;
    }
    ctx.table("comparison.csv", &t)?;
    ctx.json("comparison.json", &c)?;
    ctx.finish(
        "compare-parcellations",
        Some(mode),
        json!({ "hyper": to_json(&h), "evidence": to_json(&cfg) }),
    )
}

fn cmd_randthresh(mut ctx: Ctx, a: &RandthreshArgs) -> Result<()> {
    if ctx.common.mode.is_some() {
        return Err(Error::InvalidArgument("randthresh takes no --mode".into()));
    }
    let seed = ctx.seed()?;
    let map = read_volume(&a.input)?.into_scalar()?;
    let grid = map.grid().clone();
    let y = map.values();
    match a.method {
        Method::Random => {
            let window = match a.window {
                WindowKind::Fixed => Window::Fixed {
                    width: a
                        .width
                        .ok_or_else(|| Error::InvalidArgument("--window fixed needs --width".into()))?,
                },
                WindowKind::Varying => Window::Varying { kappa: a.kappa },
            };
            let norm = match a.norm {
                NormKind::Max => Norm::Max,
                NormKind::Lp => Norm::Lp(a.p),
            };
            let variance = match a.sigma {
                Some(s) => Variance::Known(s),
                None => Variance::Unknown,
            };
            let opts = ThresholdOptions {
                variance,
                window,
                norm,
                full_profile: a.full_profile,
            };
            let r = randthresh::estimate_count(y, &opts)?;
            let mut t = Table::new(["k", "eta", "sigma_hat"]);
            for (k, e) in r.eta.iter().enumerate() {
                let s = r.sigma_hat.as_ref().map_or(String::new(), |s| num(s[k]));
                t.push(vec![k.to_string(), num(*e), s])?;
            }
            ctx.table("eta.csv", &t)?;
            let mut summary = json!({
                "method": "random",
                "n": y.len(),
                "count": r.count,
                "threshold": if r.threshold.is_finite() { json!(r.threshold) } else { json!(null) },
                "window": r.window,
            });
            if let Some(alpha) = a.null_test {
                let cdf = match a.sigma {
                    Some(s) => NullCdf::gaussian(s)?,
                    None => NullCdf::standard(),
                };
                let nt = randthresh::global_null_test(y, &cdf, alpha, a.null_reps, seed)?;
                summary["null_test"] = to_json(&nt);
            }
            ctx.json("summary.json", &summary)?;
            let mask = indicator(&grid, r.selected.iter().copied())?;
            ctx.slices("mask", &grid, mask.values())?;
            ctx.volume("mask.vol", &Volume::Scalar(mask))?;
            ctx.finish(
                "randthresh",
                None,
                json!({ "args": to_json(a), "options": to_json(&opts) }),
            )
        }
        Method::Ggm => {
            let opts = GgmOptions {
                negative_class: a.negative_class,
                ..GgmOptions::default()
            };
            let fit = randthresh::ggm_fit(y, &opts)?;
            let det = fit.detections(y);
            let mut summary = to_json(&fit);
            summary["method"] = json!("ggm");
            summary["count"] = json!(det.len());
            if !fit.threshold.is_finite() {
                summary["threshold"] = json!(null);
            }
            ctx.json("summary.json", &summary)?;
            let mask = indicator(&grid, det.into_iter())?;
            ctx.slices("mask", &grid, mask.values())?;
            ctx.volume("mask.vol", &Volume::Scalar(mask))?;
            ctx.finish(
                "randthresh",
                None,
                json!({ "args": to_json(a), "options": to_json(&opts) }),
            )
        }
    }
}

fn cmd_baseline(mut ctx: Ctx, a: &BaselineArgs) -> Result<()> {
    if ctx.common.mode.is_some() {
        return Err(Error::InvalidArgument("baseline takes no --mode".into()));
    }
    let seed = ctx.seed()?;
    let ds = load(&a.input)?;
    let t = baseline::t_map(&ds.subjects)?;
    let res: MultipleTestResult = match a.procedure {
        ProcedureKind::Bonferroni => baseline::adjust_pvalues(&t.p_values(), Adjustment::Bonferroni, a.alpha)?,
        ProcedureKind::Bh => baseline::adjust_pvalues(&t.p_values(), Adjustment::Bh, a.alpha)?,
        ProcedureKind::Maxt => baseline::permutation_max_t(&ds.subjects, a.alpha, a.reps, seed)?,
        ProcedureKind::Cluster => baseline::cluster_size_test(&ds.subjects, a.forming_alpha, a.alpha, a.reps, seed)?,
    };
    let grid = t.grid.clone();
    ctx.volume("t.vol", &Volume::Scalar(storable(&grid, &t.values)?))?;
    ctx.slices("t", &grid, &t.values)?;
    let mask = indicator(&grid, res.rejected.iter().copied())?;
    ctx.slices("rejected", &grid, mask.values())?;
    ctx.volume("rejected.vol", &Volume::Scalar(mask))?;
    let mut ct = Table::new(["cluster", "size", "peak_value", "peak_voxel"]);
    for c in &res.clusters {
        ct.push(vec![
            c.id.to_string(),
            c.size().to_string(),
            num(c.peak_value),
            c.peak_voxel.to_string(),
        ])?;
    }
    ctx.table("clusters.csv", &ct)?;
    let undefined = t.values.iter().filter(|v| !v.is_finite()).count();
    ctx.json(
        "summary.json",
        &json!({
            "procedure": res.procedure,
            "alpha": res.alpha,
            "threshold": res.threshold,
            "critical_size": res.critical_size,
            "rejected": res.rejected.len(),
            "clusters": res.clusters.len(),
            "df": t.df,
            "non_finite_t": undefined,
        }),
    )?;
    ctx.finish("baseline", None, json!({ "args": to_json(a) }))
}

fn cmd_report(mut ctx: Ctx, a: &ReportArgs) -> Result<()> {
    let (grid, values) = match read_volume(&a.input)? {
        Volume::Scalar(m) => (m.grid().clone(), m.values().to_vec()),
        Volume::Labels(p) => (p.grid().clone(), p.labels().iter().map(|&l| f64::from(l)).collect()),
        Volume::Weights { .. } => return Err(Error::InvalidArgument("report renders scalar or label volumes".into())),
    };
    let stem = a
        .input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "map".into());
    ctx.slices(&stem, &grid, &values)?;
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let mut t = Table::new(["statistic", "value"]);
    t.push(vec!["voxels".into(), values.len().to_string()])?;
    t.push(vec!["dims".into(), format!("{:?}", grid.dims()).replace(", ", "x")])?;
    t.push(vec!["min".into(), num(lo)])?;
    t.push(vec!["max".into(), num(hi)])?;
    t.push(vec!["mean".into(), num(mean)])?;
    t.push(vec![
        "nonzero".into(),
        values.iter().filter(|v| **v != 0.0).count().to_string(),
    ])?;
    ctx.table(&format!("{stem}_summary.csv"), &t)?;
    ctx.finish("report", None, json!({ "input": a.input }))
}
