//! Command-line front end: `capacity`, `simulate`, `sweep` and `verify`, each
//! reading one JSON config and writing results into an output directory.
//!
//! Exit codes: 0 success, 1 failed verification, 2 configuration error,
//! 3 missing certificate.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::analysis::{self, AnalysisError, SweepOptions, VerifyConfig};
use crate::capacity::{self, CapacityError};
use crate::model::{Instance, Violation};
use crate::sched::{SchedError, SchedulerSpec};
use crate::sim::{self, SimConfig, SimError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING_CERTIFICATE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "expertq", version, about = "Capacity and stability of expert information-search queues")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// JSON configuration file.
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overwrite existing output files.
    #[arg(long)]
    force: bool,
    /// Replace the seed (or seed list) from the config.
    #[arg(long)]
    seed_override: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compute lambda* and its certificate; writes capacity.json.
    Capacity(Common),
    /// Run one simulation; writes trace.csv and summary.json.
    Simulate(Common),
    /// Sweep a load grid; writes sweep.csv and bracket.json.
    Sweep(Common),
    /// Run the self-checks; writes report.json.
    Verify(Common),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CapacityMode {
    Single,
    Loss,
    MultiPrimal,
    MultiDual,
}

fn default_resolution() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapacityConfig {
    pub instance: Instance,
    pub mode: CapacityMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default = "default_resolution")]
    pub resolution: f64,
}

/// Load grid for a sweep. With `relative`, the bounds and step are
/// multiples of the analytic boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
    #[serde(default)]
    pub relative: bool,
}

fn default_sweep_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}
fn default_sample_interval() -> u64 {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub instance: Instance,
    pub scheduler: SchedulerSpec,
    pub horizon: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambdas: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    #[serde(default = "default_sweep_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_sample_interval")]
    pub sample_interval: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope_threshold_factor: Option<f64>,
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Violations(Vec<Violation>),
    MissingCertificate(String),
    Exists(PathBuf),
    VerificationFailed,
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::VerificationFailed => EXIT_VERIFY_FAILED,
            CliError::MissingCertificate(_) => EXIT_MISSING_CERTIFICATE,
            _ => EXIT_CONFIG,
        }
    }

    fn report(&self) {
        match self {
            CliError::Config(msg) => eprintln!("error: {msg}"),
            CliError::Violations(vs) => {
                eprintln!("error: invalid instance ({} violations)", vs.len());
                for v in vs {
                    eprintln!("  {v}");
                }
            }
            CliError::MissingCertificate(msg) => eprintln!("error: missing certificate: {msg}"),
            CliError::Exists(p) => eprintln!("error: {} exists; pass --force to overwrite", p.display()),
            CliError::VerificationFailed => eprintln!("verification failed"),
        }
    }
}

impl From<SchedError> for CliError {
    fn from(e: SchedError) -> Self {
        match e {
            SchedError::MissingCertificate(m) => CliError::MissingCertificate(m),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::InvalidInstance(v) => CliError::Violations(v),
            SimError::Scheduler(s) => s.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<CapacityError> for CliError {
    fn from(e: CapacityError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Sim(s) => s.into(),
            AnalysisError::Sched(s) => s.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Capacity(c) => cmd_capacity(&c),
        Command::Simulate(c) => cmd_simulate(&c),
        Command::Sweep(c) => cmd_sweep(&c),
        Command::Verify(c) => cmd_verify(&c),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            e.report();
            e.code()
        }
    }
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn validate(inst: &Instance) -> Result<(), CliError> {
    let v = inst.validate();
    if v.is_empty() {
        Ok(())
    } else {
        Err(CliError::Violations(v))
    }
}

/// Creates the output directory and checks that none of `files` exist
/// unless `force` is set.
fn prepare_out(c: &Common, files: &[&str]) -> Result<Vec<PathBuf>, CliError> {
    fs::create_dir_all(&c.out).map_err(|e| CliError::Config(format!("{}: {e}", c.out.display())))?;
    let paths: Vec<PathBuf> = files.iter().map(|f| c.out.join(f)).collect();
    if !c.force {
        if let Some(p) = paths.iter().find(|p| p.exists()) {
            return Err(CliError::Exists(p.clone()));
        }
    }
    Ok(paths)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn cmd_capacity(c: &Common) -> Result<(), CliError> {
    let cfg: CapacityConfig = read_config(&c.config)?;
    validate(&cfg.instance)?;
    let out = prepare_out(c, &["capacity.json"])?;
    let inst = &cfg.instance;
    let n = inst.n();
    let single_only = |mode: &str| {
        if n == 1 {
            Ok(())
        } else {
            Err(CliError::Config(format!("mode {mode} needs a single-expert instance, got {n} experts")))
        }
    };
    let doc = match cfg.mode {
        CapacityMode::Single => {
            single_only("single")?;
            let r = capacity::single_capacity(&inst.arrivals.pmf[0], inst.experts[0].success_prob());
            json!({ "mode": cfg.mode, "lambda_star": r.lambda_star, "per_expert_lambda_star": r.lambda_star, "certificate": r.certificate })
        }
        CapacityMode::Loss => {
            single_only("loss")?;
            let eps = cfg.epsilon.unwrap_or(0.0);
            let r = capacity::loss_capacity(&inst.arrivals.pmf[0], inst.experts[0].success_prob(), eps)?;
            json!({ "mode": cfg.mode, "epsilon": eps, "lambda_star": r.lambda_star, "per_expert_lambda_star": r.lambda_star, "certificate": r.certificate })
        }
        CapacityMode::MultiPrimal => {
            let p = inst.normalized_merged_pmf();
            let r = capacity::multi_capacity_primal(&p, &inst.experts, cfg.resolution)?;
            json!({ "mode": cfg.mode, "resolution": cfg.resolution, "lambda_star": r.lambda_star, "per_expert_lambda_star": r.per_expert(n), "certificate": r.certificate })
        }
        CapacityMode::MultiDual => {
            let p = inst.normalized_merged_pmf();
            let r = capacity::multi_capacity_dual(&p, &inst.experts)?;
            let mut doc = json!({ "mode": cfg.mode, "lambda_star": r.lambda_star, "per_expert_lambda_star": r.per_expert(n), "certificate": r.certificate });
            if n <= 3 {
                let gap = capacity::duality_gap(&p, &inst.experts, cfg.resolution)?;
                doc["duality_gap"] = json!(gap);
                doc["resolution"] = json!(cfg.resolution);
            }
            doc
        }
    };
    write_json(&out[0], &doc)
}

fn cmd_simulate(c: &Common) -> Result<(), CliError> {
    let mut cfg: SimConfig = read_config(&c.config)?;
    validate(&cfg.instance)?;
    if let Some(seed) = c.seed_override {
        cfg.seed = seed;
    }
    // Build before touching the output directory so certificate errors leave
    // nothing behind.
    cfg.scheduler.build(&cfg.instance)?;
    let out = prepare_out(c, &["trace.csv", "summary.json"])?;
    let stats = sim::run(&cfg)?;
    let file = fs::File::create(&out[0]).map_err(|e| CliError::Config(format!("{}: {e}", out[0].display())))?;
    stats.write_csv(std::io::BufWriter::new(file))?;
    let verdict = analysis::classify_stability(&stats, cfg.instance.lambda(), None);
    let boundary = analysis::analytic_boundary(&cfg.instance, &cfg.scheduler).ok();
    let doc = json!({
        "seed": cfg.seed,
        "scheduler": cfg.scheduler,
        "summary": stats.summary(),
        "stability": verdict,
        "analytic_lambda_star": boundary,
    });
    write_json(&out[1], &doc)
}

/// Expands a grid spec into ascending loads. `scale` multiplies every point.
pub fn expand_grid(g: &GridSpec, scale: f64) -> Result<Vec<f64>, String> {
    if g.step.is_nan() || g.step <= 0.0 || !g.start.is_finite() || !g.stop.is_finite() || g.stop < g.start {
        return Err(format!("bad grid {g:?}"));
    }
    let steps = ((g.stop - g.start) / g.step + 1e-9).floor() as usize;
    if steps > 100_000 {
        return Err("grid has too many points".into());
    }
    Ok((0..=steps).map(|k| (g.start + k as f64 * g.step) * scale).collect())
}

fn cmd_sweep(c: &Common) -> Result<(), CliError> {
    let mut cfg: SweepConfig = read_config(&c.config)?;
    validate(&cfg.instance)?;
    if let Some(seed) = c.seed_override {
        cfg.seeds = vec![seed];
    }
    if cfg.seeds.is_empty() {
        return Err(CliError::Config("seeds must be non-empty".into()));
    }
    cfg.scheduler.build(&cfg.instance)?;
    let analytic = analysis::analytic_boundary(&cfg.instance, &cfg.scheduler)?;
    let (lambdas, step) = match (&cfg.lambdas, &cfg.grid) {
        (Some(l), None) => {
            let step = l.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
            (l.clone(), step)
        }
        (None, Some(g)) => {
            let scale = if g.relative { analytic } else { 1.0 };
            (expand_grid(g, scale).map_err(CliError::Config)?, g.step * scale)
        }
        _ => return Err(CliError::Config("give exactly one of `lambdas` or `grid`".into())),
    };
    let out = prepare_out(c, &["sweep.csv", "bracket.json"])?;
    let opts = SweepOptions {
        horizon: cfg.horizon,
        sample_interval: cfg.sample_interval,
        slope_threshold_factor: cfg.slope_threshold_factor,
    };
    let table = analysis::capacity_boundary_sweep(&cfg.instance, &cfg.scheduler, &lambdas, &cfg.seeds, opts)?;
    let file = fs::File::create(&out[0]).map_err(|e| CliError::Config(format!("{}: {e}", out[0].display())))?;
    table
        .write_csv(std::io::BufWriter::new(file))
        .map_err(|e| CliError::Config(e.to_string()))?;
    // Instability above the boundary is only claimed for a single expert.
    let claimed = if cfg.instance.n() == 1 {
        table.bracket
    } else {
        analysis::Bracket {
            lambda_hi: None,
            ..table.bracket
        }
    };
    let doc = json!({
        "lambda_lo": table.bracket.lambda_lo,
        "lambda_hi": table.bracket.lambda_hi,
        "analytic_lambda_star": analytic,
        "grid_step": step,
        "contains_analytic": claimed.contains(analytic, step),
        "seeds": cfg.seeds,
        "horizon": cfg.horizon,
    });
    write_json(&out[1], &doc)
}

fn cmd_verify(c: &Common) -> Result<(), CliError> {
    let mut cfg: VerifyConfig = read_config(&c.config)?;
    validate(&cfg.instance)?;
    if let Some(seed) = c.seed_override {
        cfg.seed = seed;
    }
    let out = prepare_out(c, &["report.json"])?;
    let report = analysis::run_verification(&cfg)?;
    write_json(&out[0], &report)?;
    if report.all_passed {
        Ok(())
    } else {
        Err(CliError::VerificationFailed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_expansion_includes_endpoint() {
        let g = GridSpec {
            start: 0.5,
            stop: 1.5,
            step: 0.05,
            relative: true,
        };
        let pts = expand_grid(&g, 2.0).unwrap();
        assert_eq!(pts.len(), 21);
        assert!((pts[20] - 3.0).abs() < 1e-12);
        assert!(expand_grid(&GridSpec { step: 0.0, ..g }, 1.0).is_err());
    }

    #[test]
    fn help_exits_zero_and_bad_usage_exits_two() {
        assert_eq!(main_with_args(["expertq", "--help"]), EXIT_OK);
        assert_eq!(main_with_args(["expertq", "frobnicate"]), EXIT_CONFIG);
    }
}
