//! Config-driven command line: runs a pipeline of stages and writes JSON
//! reports, CSV tables and a manifest into one output directory.
//!
//! Reports contain only deterministic content. The wall-clock timestamp
//! and the worker count live in `manifest.json`, so re-running a config
//! reproduces every `<stage>.report.json` byte for byte.

use crate::blocks::{self, BlockPartition};
use crate::error::Error;
use crate::geometry::AlphaNorm;
use crate::independence::{self, TauSpec};
use crate::model::{log_moment_on, CoeffBatch, ContractivityCertificate, LogMoment, Model, ModelSpec};
use crate::moments::{self, Method, ProfileOptions, TailProfile};
use crate::rng::SeedSequence;
use crate::simulate::{self, PoolOptions, SamplePool};
use crate::tails::{self, Histogram, Ladder};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

pub const LOCK_FILE: &str = ".heavytail-sre.lock";
pub const MANIFEST: &str = "manifest.json";
pub const POOL_STEM: &str = "pool";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    /// JSON reports only.
    Json,
    /// JSON reports plus CSV tables.
    Csv,
    #[default]
    Both,
}

impl Format {
    fn csv(self) -> bool {
        self != Format::Json
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveAlphaParams {
    /// Monte Carlo batch for families without closed forms.
    pub n: usize,
    pub tol_closed: f64,
    pub tol_monte_carlo: f64,
}

impl Default for SolveAlphaParams {
    fn default() -> Self {
        Self { n: moments::DEFAULT_BATCH, tol_closed: moments::TOL_CLOSED_FORM, tol_monte_carlo: moments::TOL_MONTE_CARLO }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateParams {
    pub chains: usize,
    pub n_per_chain: usize,
    pub burn_in: Option<usize>,
    pub thin: usize,
    /// Draws used to certify `E log|A_j| < 0`.
    pub certificate_n: usize,
    /// Write `pool.bin` and `pool.meta.json`.
    pub save_pool: bool,
    /// Also export the pool as CSV (large).
    pub pool_csv: bool,
}

impl Default for SimulateParams {
    fn default() -> Self {
        Self {
            chains: 4,
            n_per_chain: 250_000,
            burn_in: None,
            thin: simulate::DEFAULT_THIN,
            certificate_n: 100_000,
            save_pool: true,
            pool_csv: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlocksParams {
    pub n: usize,
    pub tol_rel: f64,
}

impl Default for BlocksParams {
    fn default() -> Self {
        Self { n: 100_000, tol_rel: blocks::DEFAULT_TOL_REL }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct TailsParams {
    pub ladder: Ladder,
    /// Hill order; defaults to `n^0.6` of the positive sample.
    pub hill_k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectralParams {
    pub ladder: Ladder,
    pub bins: usize,
    pub eps: f64,
}

impl Default for SpectralParams {
    fn default() -> Self {
        Self { ladder: Ladder::default(), bins: tails::DEFAULT_BINS, eps: tails::DEFAULT_EPS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndependenceParams {
    /// Thresholds `t` in `|·|_α` units.
    pub ladder: Ladder,
    pub r1: f64,
    pub r2: f64,
    pub tau: TauSpec,
    pub xi: f64,
    pub xi_scan: bool,
    pub gamma_grid: Option<Vec<f64>>,
    /// Coefficient draws for the `γ` bound.
    pub n: usize,
}

impl Default for IndependenceParams {
    fn default() -> Self {
        Self {
            ladder: Ladder::default(),
            r1: 1.0,
            r2: 1.0,
            tau: TauSpec::Log { beta: 1.0 },
            xi: independence::DEFAULT_XI,
            xi_scan: false,
            gamma_grid: None,
            n: 200_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "kebab-case")]
pub enum StageConfig {
    SolveAlpha(SolveAlphaParams),
    Simulate(SimulateParams),
    Blocks(BlocksParams),
    Tails(TailsParams),
    Spectral(SpectralParams),
    Independence(IndependenceParams),
    /// Aggregates every report written so far into `report.json`.
    Report {},
}

impl StageConfig {
    pub fn name(&self) -> &'static str {
        match self {
            StageConfig::SolveAlpha(_) => "solve-alpha",
            StageConfig::Simulate(_) => "simulate",
            StageConfig::Blocks(_) => "blocks",
            StageConfig::Tails(_) => "tails",
            StageConfig::Spectral(_) => "spectral",
            StageConfig::Independence(_) => "independence",
            StageConfig::Report {} => "report",
        }
    }

    fn default_for(name: &str) -> Self {
        match name {
            "solve-alpha" => StageConfig::SolveAlpha(Default::default()),
            "simulate" => StageConfig::Simulate(Default::default()),
            "blocks" => StageConfig::Blocks(Default::default()),
            "tails" => StageConfig::Tails(Default::default()),
            "spectral" => StageConfig::Spectral(Default::default()),
            "independence" => StageConfig::Independence(Default::default()),
            _ => StageConfig::Report {},
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    #[serde(default)]
    pub pipeline: Vec<StageConfig>,
    /// Mandatory; there is no clock-based default.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub format: Format,
    #[serde(default)]
    pub workers: Option<usize>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::validation(None, format!("config: {e}")))
    }

    fn stage(&self, name: &str) -> StageConfig {
        self.pipeline.iter().find(|s| s.name() == name).cloned().unwrap_or_else(|| StageConfig::default_for(name))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Exit code 2.
    Validation,
    /// Exit code 1.
    Stage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub kind: ErrorKind,
    pub stage: Option<String>,
    pub message: String,
}

impl CliError {
    fn validation(stage: Option<&str>, message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Validation, stage: stage.map(str::to_string), message: message.into() }
    }

    fn from_error(stage: &str, err: Error) -> Self {
        let kind = if err.is_validation() { ErrorKind::Validation } else { ErrorKind::Stage };
        Self { kind, stage: Some(stage.to_string()), message: err.to_string() }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Validation => 2,
            ErrorKind::Stage => 1,
        }
    }

    /// Machine-readable diagnostic for stderr.
    pub fn to_json(&self) -> String {
        let kind = match self.kind {
            ErrorKind::Validation => "validation",
            ErrorKind::Stage => "stage-failure",
        };
        json!({ "error": kind, "stage": self.stage, "message": self.message }).to_string()
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.stage {
            Some(s) => write!(f, "{s}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for CliError {}

#[derive(Parser, Debug)]
#[command(name = "heavytail-sre", version, about = "Simulation and tail analysis for diagonal stochastic recurrence equations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Directory holding `pool.bin` and `pool.meta.json` from an earlier run.
    #[arg(long, global = true)]
    pub pool: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Run the configured pipeline.
    Run,
    /// Run the configured pipeline and aggregate all reports into report.json.
    Report,
    SolveAlpha,
    Simulate,
    Blocks,
    Tails,
    Spectral,
    Independence,
}

impl Command {
    fn stage_name(self) -> Option<&'static str> {
        match self {
            Command::Run | Command::Report => None,
            Command::SolveAlpha => Some("solve-alpha"),
            Command::Simulate => Some("simulate"),
            Command::Blocks => Some("blocks"),
            Command::Tails => Some("tails"),
            Command::Spectral => Some("spectral"),
            Command::Independence => Some("independence"),
        }
    }
}

/// Scalar overrides from the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub pool: Option<PathBuf>,
    pub format: Option<Format>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageRecord {
    pub stage: String,
    /// Run only as a prerequisite of a standalone subcommand; no report.
    pub implicit: bool,
    pub report: Option<String>,
    pub csv: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub fingerprint: String,
    pub seed: u64,
    pub format: Format,
    pub workers: Option<usize>,
    pub stages: Vec<StageRecord>,
    pub timestamp_unix: u64,
}

/// Holds the output directory for the lifetime of a run.
struct OutputLock(PathBuf);

impl OutputLock {
    fn acquire(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::validation(
                None,
                format!("{} exists: another run owns this output directory (remove it if stale)", path.display()),
            )),
            Err(e) => Err(CliError::validation(None, format!("cannot lock {}: {e}", dir.display()))),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

struct Context<'a> {
    model: &'a Model,
    seed: u64,
    out: &'a Path,
    format: Format,
    alphas: Option<Vec<f64>>,
    goldie_means: Option<Vec<f64>>,
    pool: Option<SamplePool>,
    partition: Option<BlockPartition>,
    reports: BTreeMap<String, Value>,
}

struct StageOutput {
    report: Value,
    csv: Vec<(String, Vec<u8>)>,
}

fn needs(stage: &str) -> &'static [&'static str] {
    match stage {
        "simulate" | "blocks" => &["solve-alpha"],
        "tails" | "spectral" | "independence" => &["solve-alpha", "simulate"],
        _ => &[],
    }
}

/// Checks that every stage's prerequisites come earlier. An external pool
/// stands in for `simulate`.
fn validate_order(pipeline: &[StageConfig], have_pool: bool) -> Result<(), CliError> {
    let mut seen: Vec<&str> = Vec::new();
    for s in pipeline {
        for dep in needs(s.name()) {
            let ok = seen.contains(dep) || (*dep == "simulate" && have_pool);
            if !ok {
                return Err(CliError::validation(
                    Some(s.name()),
                    format!("stage '{}' needs '{dep}' earlier in the pipeline", s.name()),
                ));
            }
        }
        seen.push(s.name());
    }
    Ok(())
}

fn csv_bytes(write: impl FnOnce(&mut Vec<u8>) -> crate::Result<()>) -> crate::Result<Vec<u8>> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    Ok(buf)
}

fn ladder_csv(rungs: &[tails::Rung]) -> crate::Result<Vec<u8>> {
    csv_bytes(|b| tails::write_ladder_csv(rungs, b))
}

fn alphas_of(ctx: &Context) -> crate::Result<Vec<f64>> {
    ctx.alphas.clone().ok_or_else(|| Error::Precondition("tail indices are not available; run solve-alpha first".into()))
}

fn pool_of<'c>(ctx: &'c Context) -> crate::Result<&'c SamplePool> {
    ctx.pool.as_ref().ok_or_else(|| Error::Precondition("no sample pool; run simulate or pass --pool".into()))
}

/// Uses the detected partition; a one-dimensional model needs none.
fn partition_of(ctx: &Context) -> crate::Result<BlockPartition> {
    match &ctx.partition {
        Some(p) => Ok(p.clone()),
        None if ctx.model.dim() == 1 => Ok(BlockPartition::singletons(1)),
        None => Err(Error::Precondition("no block partition; run the blocks stage first".into())),
    }
}

fn run_solve_alpha(ctx: &mut Context, p: &SolveAlphaParams) -> crate::Result<StageOutput> {
    let batch = CoeffBatch::draw(ctx.model, p.n, &SeedSequence::new(ctx.seed).derive("solve-alpha"));
    let opts = ProfileOptions { tol_closed: p.tol_closed, tol_monte_carlo: p.tol_monte_carlo, ..Default::default() };
    let profile = TailProfile::compute(ctx.model, &batch, &opts)?;
    let log_moments: Vec<LogMoment> = (0..ctx.model.dim()).map(|j| log_moment_on(&batch, j)).collect();
    ctx.alphas = Some(profile.alpha.clone());
    ctx.goldie_means = Some(profile.goldie_mean.iter().map(|e| e.value).collect());
    let report = json!({
        "alpha": profile.alpha,
        "profile": profile,
        "log_moment": log_moments,
        "batch": p.n,
    });
    Ok(StageOutput { report, csv: Vec::new() })
}

fn run_simulate(ctx: &mut Context, p: &SimulateParams) -> crate::Result<StageOutput> {
    let seq = SeedSequence::new(ctx.seed).derive("certificate");
    let batch = CoeffBatch::draw(ctx.model, p.certificate_n, &seq);
    let certificate = ContractivityCertificate::issue(ctx.model, &batch)?;
    let opts = PoolOptions { chains: p.chains, burn_in: p.burn_in, n_per_chain: p.n_per_chain, thin: p.thin };
    let pool = simulate::stationary_pool(ctx.model, &certificate, &opts, ctx.seed)?;
    if p.save_pool {
        pool.save(ctx.out, POOL_STEM)?;
    }
    let mut csv = Vec::new();
    if p.pool_csv && ctx.format.csv() {
        csv.push(("pool".to_string(), csv_bytes(|b| pool.write_csv(b))?));
    }
    let report = json!({
        "meta": pool.meta(),
        "records": pool.len(),
        "certificate": certificate,
        "identity_violations": pool.identity_violations(),
    });
    ctx.pool = Some(pool);
    Ok(StageOutput { report, csv })
}

fn run_blocks(ctx: &mut Context, p: &BlocksParams) -> crate::Result<StageOutput> {
    let alphas = alphas_of(ctx)?;
    let partition =
        blocks::detect_blocks(ctx.model, &alphas, p.n, p.tol_rel, &SeedSequence::new(ctx.seed).derive("blocks-stage"))?;
    let report = serde_json::to_value(&partition)?;
    ctx.partition = Some(partition);
    Ok(StageOutput { report, csv: Vec::new() })
}

fn error_value<T: Serialize>(r: crate::Result<T>) -> Value {
    match r {
        Ok(v) => serde_json::to_value(v).unwrap_or(Value::Null),
        Err(e) => json!({ "error": e.to_string() }),
    }
}

fn run_tails(ctx: &mut Context, p: &TailsParams) -> crate::Result<StageOutput> {
    let alphas = alphas_of(ctx)?;
    let means = ctx.goldie_means.clone().unwrap_or_default();
    let pool = pool_of(ctx)?;
    let mut coords = Vec::new();
    let mut csv = Vec::new();
    for (j, &alpha) in alphas.iter().enumerate() {
        let marginal = tails::empirical_tail_constant(pool, j, alpha, &p.ladder)?;
        let positive: Vec<f64> = pool.x(j).iter().map(|v| v.abs()).filter(|&v| v > 0.0).collect();
        let k = p.hill_k.unwrap_or_else(|| (positive.len() as f64).powf(0.6) as usize);
        let hill = tails::hill_estimate(&positive, k);
        let goldie = match means.get(j) {
            Some(&m) => tails::goldie_constant(pool, j, alpha, m),
            None => Err(Error::Precondition("Goldie mean not available".into())),
        };
        let moments_half = tails::moment_estimate(pool, j, alpha / 2.0)?;
        let moments_double = tails::moment_estimate(pool, j, 2.0 * alpha)?;
        if ctx.format.csv() {
            csv.push((format!("x{j}_total"), ladder_csv(&marginal.total)?));
            csv.push((format!("x{j}_plus"), ladder_csv(&marginal.plus)?));
            csv.push((format!("x{j}_minus"), ladder_csv(&marginal.minus)?));
        }
        coords.push(json!({
            "coord": j,
            "alpha": alpha,
            "c_plus": marginal.c_plus(),
            "c_minus": marginal.c_minus(),
            "c_total": marginal.c_total(),
            "converged": marginal.converged,
            "ladder": marginal,
            "hill": error_value(hill),
            "goldie": error_value(goldie),
            "moment_half_alpha": moments_half,
            "moment_double_alpha": moments_double,
        }));
    }
    let block_tails = match partition_of(ctx) {
        Ok(partition) => {
            let norm = AlphaNorm::new(alphas.clone())?;
            let bt = tails::block_tail_constant(pool, &partition, &norm, &p.ladder)?;
            if ctx.format.csv() {
                csv.push(("c_inf".to_string(), ladder_csv(&bt.full)?));
                for (l, b) in bt.blocks.iter().enumerate() {
                    csv.push((format!("block{l}"), ladder_csv(b)?));
                }
            }
            json!({ "classes": partition.classes, "result": bt })
        }
        Err(e) => json!({ "skipped": e.to_string() }),
    };
    Ok(StageOutput { report: json!({ "coordinates": coords, "blocks": block_tails }), csv })
}

fn run_spectral(ctx: &mut Context, p: &SpectralParams) -> crate::Result<StageOutput> {
    let alphas = alphas_of(ctx)?;
    let pool = pool_of(ctx)?;
    let partition = partition_of(ctx)?;
    let norm = AlphaNorm::new(alphas)?;
    let est = tails::spectral_measure(pool, &partition, &norm, &p.ladder, p.bins, p.eps)?;
    let mut csv = Vec::new();
    if ctx.format.csv() {
        let d = pool.dim();
        let hist = csv_bytes(|buf| {
            let mut w = csv::Writer::from_writer(buf);
            for (r_idx, r) in est.rungs.iter().enumerate() {
                match &r.histogram {
                    Histogram::Product { bins, mass } => {
                        if r_idx == 0 {
                            let mut header = vec!["t".to_string()];
                            header.extend((0..d).map(|j| format!("bin_{j}")));
                            header.push("mass".into());
                            w.write_record(&header)?;
                        }
                        for (cell, &m) in mass.iter().enumerate().filter(|(_, &m)| m > 0.0) {
                            let mut idx = vec![0usize; d];
                            let mut c = cell;
                            for slot in idx.iter_mut().rev() {
                                *slot = c % bins;
                                c /= bins;
                            }
                            let mut row = vec![r.t.to_string()];
                            row.extend(idx.iter().map(usize::to_string));
                            row.push(m.to_string());
                            w.write_record(&row)?;
                        }
                    }
                    Histogram::Marginal { mass, .. } => {
                        if r_idx == 0 {
                            w.write_record(["t", "coord", "bin", "mass"])?;
                        }
                        for (j, col) in mass.iter().enumerate() {
                            for (b, &m) in col.iter().enumerate() {
                                w.write_record([r.t.to_string(), j.to_string(), b.to_string(), m.to_string()])?;
                            }
                        }
                    }
                }
            }
            w.flush()?;
            Ok(())
        })?;
        csv.push(("histogram".to_string(), hist));
        let mass = csv_bytes(|buf| {
            let mut w = csv::Writer::from_writer(buf);
            w.write_record(["t", "block", "estimate", "ci_lo", "ci_hi"])?;
            for r in &est.rungs {
                let total = std::iter::once(("total".to_string(), r.block_mass_total));
                let per = r.block_mass.iter().enumerate().map(|(l, e)| (l.to_string(), *e));
                for (label, e) in per.chain(total) {
                    w.write_record([r.t.to_string(), label, e.value.to_string(), e.ci_lo.to_string(), e.ci_hi.to_string()])?;
                }
            }
            w.flush()?;
            Ok(())
        })?;
        csv.push(("block_mass".to_string(), mass));
    }
    let report = json!({
        "classes": partition.classes,
        "nondecreasing": est.block_mass_nondecreasing(),
        "estimate": est,
    });
    Ok(StageOutput { report, csv })
}

fn run_independence(ctx: &mut Context, p: &IndependenceParams) -> crate::Result<StageOutput> {
    p.tau.validate()?;
    let alphas = alphas_of(ctx)?;
    let pool = pool_of(ctx)?;
    let partition = partition_of(ctx)?;
    if partition.len() < 2 {
        return Err(Error::Precondition("a single block: there is no pair of distinct blocks to compare".into()));
    }
    let norm = AlphaNorm::new(alphas.clone())?;
    let all: Vec<usize> = (0..pool.dim()).collect();
    let mut norms = tails::pool_norms(pool, &norm, &all);
    norms.sort_unstable_by(f64::total_cmp);
    let ladder = p.ladder.resolve(&norms)?;
    let ladder: Vec<f64> = ladder.into_iter().filter(|&t| t > 0.0).fold(Vec::new(), |mut v, t| {
        if v.last().is_none_or(|&last| t > last) {
            v.push(t);
        }
        v
    });
    let batch = CoeffBatch::draw(ctx.model, p.n, &SeedSequence::new(ctx.seed).derive("independence"));
    let grid = p.gamma_grid.clone().unwrap_or_else(independence::default_gamma_grid);
    let mut pairs = Vec::new();
    let mut csv = Vec::new();
    for (l, a) in partition.classes.iter().enumerate() {
        for b in &partition.classes[l + 1..] {
            for &i in a {
                for &j in b {
                    let joint = independence::joint_exceedance(pool, i, j, (alphas[i], alphas[j]), (p.r1, p.r2), &ladder)?;
                    let fit = independence::decay_rate_fit(&joint.rungs);
                    let cross = moments::cross_kappa(ctx.model, i, j, alphas[i], alphas[j], p.xi, Method::Auto(&batch))?;
                    let bound = if p.xi_scan {
                        independence::tau_gamma_scan(ctx.model, i, j, (alphas[i], alphas[j]), &p.tau, &independence::XI_SCAN, &grid, &batch)
                            .map(|(best, _)| best)
                    } else {
                        independence::tau_gamma_bound(ctx.model, i, j, (alphas[i], alphas[j]), &p.tau, p.xi, &grid, &batch)
                    };
                    if ctx.format.csv() {
                        let bytes = csv_bytes(|buf| {
                            let mut w = csv::Writer::from_writer(buf);
                            w.write_record(["t", "estimate", "ci_lo", "ci_hi"])?;
                            for r in &joint.rungs {
                                let e = r.normalized;
                                w.write_record([r.t, e.value, e.ci_lo, e.ci_hi].map(|v| v.to_string()))?;
                            }
                            w.flush()?;
                            Ok(())
                        })?;
                        csv.push((format!("pair{i}_{j}"), bytes));
                    }
                    let beta_hat = fit.as_ref().ok().map(|f| f.beta_hat);
                    let gamma0 = bound.as_ref().ok().map(|b| b.gamma0);
                    pairs.push(json!({
                        "i": i,
                        "j": j,
                        "cross_kappa": cross,
                        "gamma0": gamma0,
                        "tau": p.tau.label(),
                        "xi": p.xi,
                        "ladder": joint,
                        "beta_hat": beta_hat,
                        "decay_fit": error_value(fit),
                        "gamma_bound": error_value(bound),
                    }));
                }
            }
        }
    }
    Ok(StageOutput { report: json!({ "pairs": pairs }), csv })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let write = || -> crate::Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, value)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    };
    write().map_err(|e| CliError { kind: ErrorKind::Stage, stage: None, message: format!("writing {}: {e}", path.display()) })
}

/// Stages to execute, each flagged with whether its report is emitted.
fn plan(config: &RunConfig, command: Command, have_pool: bool) -> Result<Vec<(StageConfig, bool)>, CliError> {
    match command.stage_name() {
        None => {
            validate_order(&config.pipeline, have_pool)?;
            let mut stages: Vec<(StageConfig, bool)> = config.pipeline.iter().cloned().map(|s| (s, true)).collect();
            if command == Command::Report && !stages.iter().any(|(s, _)| s.name() == "report") {
                stages.push((StageConfig::Report {}, true));
            }
            Ok(stages)
        }
        Some(target) => {
            let mut stages = Vec::new();
            for dep in needs(target) {
                if *dep == "simulate" && have_pool {
                    continue;
                }
                if *dep == "simulate" {
                    return Err(CliError::validation(
                        Some(target),
                        "no sample pool: pass --pool <dir> or run the simulate stage first",
                    ));
                }
                stages.push((config.stage(dep), false));
            }
            if matches!(target, "spectral" | "independence" | "tails") && config.model.d > 1 {
                stages.push((config.stage("blocks"), false));
            }
            stages.push((config.stage(target), true));
            Ok(stages)
        }
    }
}

/// Executes `command` and returns the manifest.
pub fn run(config: &RunConfig, command: Command, overrides: &Overrides) -> Result<Manifest, CliError> {
    let mut config = config.clone();
    if let Some(s) = overrides.seed {
        config.seed = Some(s);
    }
    if let Some(o) = &overrides.out {
        config.output_dir = Some(o.clone());
    }
    if let Some(w) = overrides.workers {
        config.workers = Some(w);
    }
    if let Some(f) = overrides.format {
        config.format = f;
    }
    let seed = config.seed.ok_or_else(|| CliError::validation(None, "seed is mandatory (set \"seed\" or pass --seed)"))?;
    let model = Model::new(config.model.clone()).map_err(|e| CliError::validation(None, e.to_string()))?;
    let out = config.output_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    if config.workers == Some(0) {
        return Err(CliError::validation(None, "workers must be positive"));
    }

    let external_pool = match &overrides.pool {
        Some(dir) => {
            let pool = SamplePool::load(dir, POOL_STEM)
                .map_err(|e| CliError::validation(None, format!("cannot read pool from {}: {e}", dir.display())))?;
            if pool.meta().fingerprint != config.model.fingerprint() {
                return Err(CliError::validation(None, "the pool was simulated from a different model"));
            }
            Some(pool)
        }
        None => None,
    };
    let stages = plan(&config, command, external_pool.is_some())?;

    fs::create_dir_all(&out).map_err(|e| CliError::validation(None, format!("cannot create {}: {e}", out.display())))?;
    let _lock = OutputLock::acquire(&out)?;

    let body = || -> Result<Manifest, CliError> {
        let mut ctx = Context {
            model: &model,
            seed,
            out: &out,
            format: config.format,
            alphas: None,
            goldie_means: None,
            pool: external_pool,
            partition: None,
            reports: BTreeMap::new(),
        };
        let mut records = Vec::new();
        for (stage, emit) in &stages {
            let name = stage.name();
            log::info!("stage {name}");
            let output = match stage {
                StageConfig::SolveAlpha(p) => run_solve_alpha(&mut ctx, p),
                StageConfig::Simulate(p) => run_simulate(&mut ctx, p),
                StageConfig::Blocks(p) => run_blocks(&mut ctx, p),
                StageConfig::Tails(p) => run_tails(&mut ctx, p),
                StageConfig::Spectral(p) => run_spectral(&mut ctx, p),
                StageConfig::Independence(p) => run_independence(&mut ctx, p),
                StageConfig::Report {} => {
                    let aggregate = json!({
                        "fingerprint": config.model.fingerprint(),
                        "seed": seed,
                        "stages": ctx.reports,
                    });
                    write_json(&out.join("report.json"), &aggregate)?;
                    records.push(StageRecord { stage: name.into(), implicit: false, report: Some("report.json".into()), csv: vec![] });
                    continue;
                }
            }
            .map_err(|e| CliError::from_error(name, e))?;
            let mut record = StageRecord { stage: name.into(), implicit: !emit, report: None, csv: Vec::new() };
            if *emit {
                let file = format!("{name}.report.json");
                write_json(&out.join(&file), &output.report)?;
                record.report = Some(file);
                for (label, bytes) in &output.csv {
                    let file = format!("{name}.{label}.csv");
                    fs::write(out.join(&file), bytes)
                        .map_err(|e| CliError { kind: ErrorKind::Stage, stage: Some(name.into()), message: e.to_string() })?;
                    record.csv.push(file);
                }
                ctx.reports.insert(name.to_string(), output.report);
            }
            records.push(record);
        }
        let manifest = Manifest {
            tool: "heavytail-sre".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            fingerprint: config.model.fingerprint(),
            seed,
            format: config.format,
            workers: config.workers,
            stages: records,
            timestamp_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        write_json(&out.join(MANIFEST), &manifest)?;
        Ok(manifest)
    };

    match config.workers {
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build()
                .map_err(|e| CliError::validation(None, format!("cannot start {w} workers: {e}")))?;
            pool.install(body)
        }
        None => body(),
    }
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = (|| {
        let path = cli.config.as_ref().ok_or_else(|| CliError::validation(None, "--config is required"))?;
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::validation(None, format!("cannot read {}: {e}", path.display())))?;
        let config = RunConfig::from_json(&text)?;
        let overrides = Overrides {
            seed: cli.seed,
            out: cli.out.clone(),
            workers: cli.workers,
            pool: cli.pool.clone(),
            format: cli.format,
        };
        run(&config, cli.command, &overrides)
    })();
    match result {
        Ok(manifest) => {
            for s in &manifest.stages {
                if let Some(r) = &s.report {
                    println!("{}", r);
                }
            }
            0
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}
