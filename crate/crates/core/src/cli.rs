//! Run configuration, subcommand pipelines and result persistence.
//!
//! A run reads one TOML file, executes a module pipeline and writes
//! `<out>/<subcommand>/<hash>/` with one table per CSV (or JSON) file,
//! `report.json` and `manifest.json`. Everything except the manifest's
//! wall-clock field depends only on the configuration.

use crate::discrete::{self, ChainOptions, Phi3Mode, Side};
use crate::error::{Error, Result};
use crate::mat2;
use crate::model::{self, MgfConfig, MgfFamily, ModelRunConfig, RhoSample};
use crate::oscillatory;
use crate::phase::{self, OperatorParams};
use crate::potential::PotentialSpec;
use crate::stats;
use crate::turning;
use clap::{Args, Parser};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use std::f64::consts::{E, PI};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "wannier-lab", version, about = "Numerical experiments for Stark operators with slowly decaying periodic potentials")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Debug, clap::Subcommand)]
pub enum CliCommand {
    /// Connection matrix S(d): unimodularity, Hermite-vs-ODE oracle, det Ψ± and small-ξ slope.
    ConnectionCheck(RunArgs),
    /// Window integral oracle against its stationary-phase asymptotics.
    StationaryPhase(RunArgs),
    /// Prüfer ODE trace on grid points, compared step by step with the window recursion.
    PruferTrace(RunArgs),
    /// Closed step chain with its phase components.
    Chain(RunArgs),
    /// Lyapunov slopes, Wronskian drift and the envelope constant over a ρ ensemble.
    Lyapunov(RunArgs),
    /// Decaying solution and subordinacy ratios over a ρ ensemble.
    Subordinacy(RunArgs),
    /// Moment generating function bound and tail smallness of Σ₂.
    MixingBound(RunArgs),
    /// κ = 0 stability of the window recursion.
    KappaZero(RunArgs),
}

impl CliCommand {
    pub fn split(&self) -> (Subcommand, &RunArgs) {
        match self {
            Self::ConnectionCheck(a) => (Subcommand::ConnectionCheck, a),
            Self::StationaryPhase(a) => (Subcommand::StationaryPhase, a),
            Self::PruferTrace(a) => (Subcommand::PruferTrace, a),
            Self::Chain(a) => (Subcommand::Chain, a),
            Self::Lyapunov(a) => (Subcommand::Lyapunov, a),
            Self::Subordinacy(a) => (Subcommand::Subordinacy, a),
            Self::MixingBound(a) => (Subcommand::MixingBound, a),
            Self::KappaZero(a) => (Subcommand::KappaZero, a),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Worker threads; defaults to the number of CPUs.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Output root; overrides `output.dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Subcommand {
    ConnectionCheck,
    StationaryPhase,
    PruferTrace,
    Chain,
    Lyapunov,
    Subordinacy,
    MixingBound,
    KappaZero,
}

impl Subcommand {
    pub const ALL: [Subcommand; 8] = [
        Self::ConnectionCheck,
        Self::StationaryPhase,
        Self::PruferTrace,
        Self::Chain,
        Self::Lyapunov,
        Self::Subordinacy,
        Self::MixingBound,
        Self::KappaZero,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::ConnectionCheck => "connection-check",
            Self::StationaryPhase => "stationary-phase",
            Self::PruferTrace => "prufer-trace",
            Self::Chain => "chain",
            Self::Lyapunov => "lyapunov",
            Self::Subordinacy => "subordinacy",
            Self::MixingBound => "mixing-bound",
            Self::KappaZero => "kappa-zero",
        }
    }
}

impl fmt::Display for Subcommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Subcommand {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown subcommand `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorConfig {
    pub p: u64,
    pub q: u64,
    pub kappa: f64,
    pub energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialConfig {
    pub v0: f64,
    pub beta: f64,
    pub n0: u64,
    /// v̂(1), …, v̂(n0 − 1) as [re, im] pairs.
    #[serde(default)]
    pub low_modes: Vec<[f64; 2]>,
}

/// Subcommand settings. Every field has a default, so a config may omit
/// the block entirely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Points of the |d| grid on [0, d_max].
    pub d_points: usize,
    pub d_max: f64,
    /// |d| values for the ODE oracle.
    pub oracle_d: Vec<f64>,
    pub phi0: Vec<f64>,
    /// Ray cutoff Y of the ODE oracle.
    pub big_y: f64,
    pub ode_oracle: bool,
    /// Abscissae for det Ψ±.
    pub det_y: Vec<f64>,
    /// Range of y·‖Ψ⁺ − e^{−π|d|²/8}(2y)^{λσ₃}‖.
    pub asymptotic_y: [f64; 2],
    pub xi_range: [f64; 2],
    pub xi_points: usize,
    pub l_values: Vec<i64>,
    /// Window range [k0, k1] for the ODE trace.
    pub l_range: [u64; 2],
    pub tolerance: f64,
    pub theta0: f64,
    /// [M0, M] for the closed chain.
    pub chain_m_range: [i64; 2],
    pub phi3: Phi3Mode,
    pub eta: f64,
    pub lambda1: Option<f64>,
    /// [M0, M_max] for model runs.
    pub m_range: [i64; 2],
    pub rho: f64,
    /// Left end of the unit ρ interval.
    pub rho_lo: f64,
    pub rho_samples: usize,
    pub mgf_terms: usize,
    /// a(n) = n^{−mgf_decay}.
    pub mgf_decay: f64,
    pub mgf_l: f64,
    pub mgf_t: Vec<f64>,
    pub mgf_nodes: usize,
    pub smallness_m: Vec<i64>,
    pub smallness_samples: usize,
    pub eps0: f64,
    /// Dyadic K₁ values for the κ = 0 scan.
    pub k1: Vec<u64>,
    pub k2_max: u64,
    /// Window index where the two-decade ψ² band starts.
    pub psi_k_start: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            d_points: 50,
            d_max: 3.0,
            oracle_d: vec![0.25, 0.5, 1.0, 2.0],
            phi0: vec![0.0, 0.7, 2.1],
            big_y: 30.0,
            ode_oracle: true,
            det_y: vec![-4.0, 0.0, 4.0],
            asymptotic_y: [10.0, 40.0],
            xi_range: [1e-3, 1e-1],
            xi_points: 21,
            l_values: vec![20, 40, 80, 160],
            l_range: [20, 60],
            tolerance: 1e-6,
            theta0: 0.3,
            chain_m_range: [3, 200],
            phi3: Phi3Mode::Zero,
            eta: phase::DEFAULT_ETA,
            lambda1: None,
            m_range: [3, 20000],
            rho: -1.0,
            rho_lo: -1.5,
            rho_samples: 64,
            mgf_terms: 64,
            mgf_decay: 0.6,
            mgf_l: E,
            mgf_t: vec![0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
            mgf_nodes: 1 << 16,
            smallness_m: vec![64, 128, 256],
            smallness_samples: 256,
            eps0: 0.1,
            k1: vec![16, 32, 64, 128, 256, 512, 1024],
            k2_max: 8192,
            psi_k_start: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub format: OutputFormat,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out"), format: OutputFormat::Csv }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub operator: OperatorConfig,
    pub potential: PotentialConfig,
    pub experiment: ExperimentConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn operator_params(&self) -> Result<OperatorParams> {
        let o = &self.operator;
        OperatorParams::new(o.p, o.q, o.kappa, o.energy)
    }

    pub fn potential_spec(&self) -> Result<PotentialSpec> {
        let p = &self.potential;
        let modes = p.low_modes.iter().map(|m| Complex64::new(m[0], m[1])).collect();
        PotentialSpec::new(p.v0, p.beta, p.n0)?.with_low_modes(modes)
    }

    /// SHA-256 over the subcommand and every setting that can change a
    /// result file.
    pub fn hash(&self, sub: Subcommand) -> String {
        let key = json!({
            "subcommand": sub.name(),
            "operator": self.operator,
            "potential": self.potential,
            "experiment": self.experiment,
            "format": self.output.format,
        });
        format!("{:x}", Sha256::digest(key.to_string().as_bytes()))
    }
}

/// Every problem found in a config, each prefixed by its field path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub items: Vec<String>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid config ({} problem{})", self.items.len(), if self.items.len() == 1 { "" } else { "s" })?;
        for item in &self.items {
            write!(f, "\n  {item}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

impl From<ConfigError> for Error {
    fn from(e: ConfigError) -> Self {
        Error::Config(e.items.join("; "))
    }
}

fn section<T: serde::de::DeserializeOwned>(
    root: &toml::Table,
    name: &str,
    required: bool,
    errs: &mut Vec<String>,
) -> Option<T> {
    let Some(v) = root.get(name) else {
        if required {
            errs.push(format!("{name}: missing required section"));
        }
        return None;
    };
    match serde_path_to_error::deserialize::<_, T>(v.clone()) {
        Ok(t) => Some(t),
        Err(e) => {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let msg = inner.message().trim().to_string();
            if path == "." {
                errs.push(format!("{name}: {msg}"));
            } else {
                errs.push(format!("{name}.{path}: {msg}"));
            }
            None
        }
    }
}

/// Parses and validates a TOML run configuration.
pub fn parse_config(text: &str) -> std::result::Result<RunConfig, ConfigError> {
    let root: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError {
        items: vec![format!("<root>: {}", e.message().trim())],
    })?;
    let mut errs = Vec::new();
    for key in root.keys() {
        if !["operator", "potential", "experiment", "output"].contains(&key.as_str()) {
            errs.push(format!("{key}: unknown section"));
        }
    }
    let operator = section::<OperatorConfig>(&root, "operator", true, &mut errs);
    let potential = section::<PotentialConfig>(&root, "potential", true, &mut errs);
    let experiment = section::<ExperimentConfig>(&root, "experiment", false, &mut errs);
    let output = section::<OutputConfig>(&root, "output", false, &mut errs);
    if let Some(o) = &operator {
        validate_operator(o, &mut errs);
    }
    if let Some(p) = &potential {
        validate_potential(p, &mut errs);
    }
    if let Some(x) = &experiment {
        validate_experiment(x, &mut errs);
    }
    match (operator, potential) {
        (Some(operator), Some(potential)) if errs.is_empty() => Ok(RunConfig {
            operator,
            potential,
            experiment: experiment.unwrap_or_default(),
            output: output.unwrap_or_default(),
        }),
        _ => Err(ConfigError { items: errs }),
    }
}

fn validate_operator(o: &OperatorConfig, errs: &mut Vec<String>) {
    if o.p == 0 {
        errs.push("operator.p: must be at least 1".into());
    }
    if o.q == 0 {
        errs.push("operator.q: must be at least 1".into());
    }
    if !(o.kappa.is_finite() && o.kappa >= 0.0) {
        errs.push(format!("operator.kappa: {} must be finite and non-negative", o.kappa));
    }
    if !o.energy.is_finite() {
        errs.push("operator.energy: must be finite".into());
    }
    if o.p > 0 && o.q > 0 && crate::potential::gcd(o.p, o.q) != 1 {
        errs.push(format!("operator: p = {} and q = {} must be coprime", o.p, o.q));
    }
}

fn validate_potential(p: &PotentialConfig, errs: &mut Vec<String>) {
    if !(p.v0.is_finite() && p.v0 >= 0.0) {
        errs.push(format!("potential.v0: {} must be finite and non-negative", p.v0));
    }
    if !(p.beta > 0.0 && p.beta < 0.5) {
        errs.push(format!("potential.beta: {} outside (0, 1/2)", p.beta));
    }
    if p.n0 < 1 {
        errs.push("potential.n0: must be at least 1".into());
    }
    if p.low_modes.len() as u64 > p.n0.saturating_sub(1) {
        errs.push(format!("potential.low_modes: {} entries but n0 − 1 = {}", p.low_modes.len(), p.n0.saturating_sub(1)));
    }
    for (i, m) in p.low_modes.iter().enumerate() {
        if !(m[0].is_finite() && m[1].is_finite()) {
            errs.push(format!("potential.low_modes[{i}]: must be finite"));
        }
    }
}

fn validate_experiment(x: &ExperimentConfig, errs: &mut Vec<String>) {
    let mut positive = |name: &str, v: f64| {
        if !(v.is_finite() && v > 0.0) {
            errs.push(format!("experiment.{name}: {v} must be positive"));
        }
    };
    positive("d_max", x.d_max);
    positive("big_y", x.big_y);
    positive("tolerance", x.tolerance);
    positive("eta", x.eta);
    positive("mgf_decay", x.mgf_decay);
    positive("eps0", x.eps0);
    if let Some(l1) = x.lambda1 {
        positive("lambda1", l1);
    }
    if !(x.mgf_l > 1.0) {
        errs.push(format!("experiment.mgf_l: {} must exceed 1", x.mgf_l));
    }
    if x.d_points < 2 {
        errs.push("experiment.d_points: need at least 2".into());
    }
    if x.xi_points < 2 {
        errs.push("experiment.xi_points: need at least 2".into());
    }
    if !(x.xi_range[0] > 0.0 && x.xi_range[1] > x.xi_range[0]) {
        errs.push("experiment.xi_range: need 0 < lo < hi".into());
    }
    if !(x.asymptotic_y[0] > 0.0 && x.asymptotic_y[1] > x.asymptotic_y[0]) {
        errs.push("experiment.asymptotic_y: need 0 < lo < hi".into());
    }
    if !(x.l_range[0] >= 1 && x.l_range[1] > x.l_range[0]) {
        errs.push("experiment.l_range: need 1 ≤ k0 < k1".into());
    }
    if !(x.chain_m_range[0] >= 1 && x.chain_m_range[1] > x.chain_m_range[0]) {
        errs.push("experiment.chain_m_range: need 1 ≤ M0 < M".into());
    }
    if !(x.m_range[0] >= 2 && x.m_range[1] > x.m_range[0]) {
        errs.push("experiment.m_range: need 2 ≤ M0 < M_max".into());
    }
    for (name, v) in [("oracle_d", &x.oracle_d), ("phi0", &x.phi0), ("det_y", &x.det_y), ("mgf_t", &x.mgf_t)] {
        if v.is_empty() {
            errs.push(format!("experiment.{name}: must not be empty"));
        }
    }
    if x.l_values.len() < 2 || x.l_values.iter().any(|&l| l < 1) {
        errs.push("experiment.l_values: need at least two windows, all ≥ 1".into());
    }
    if x.k1.len() < 2 || x.k1.iter().any(|&k| k < 1 || k >= x.k2_max) {
        errs.push("experiment.k1: need at least two values in [1, k2_max)".into());
    }
    if x.psi_k_start < 1 || x.psi_k_start.saturating_mul(10) > x.k2_max {
        errs.push("experiment.psi_k_start: need 1 ≤ psi_k_start and 10·psi_k_start ≤ k2_max".into());
    }
    if x.smallness_m.is_empty() || x.smallness_m.iter().any(|&m| m < x.m_range[0]) {
        errs.push("experiment.smallness_m: need values ≥ M0".into());
    }
    for (name, v) in [("rho_samples", x.rho_samples), ("mgf_terms", x.mgf_terms), ("mgf_nodes", x.mgf_nodes), ("smallness_samples", x.smallness_samples)] {
        if v == 0 {
            errs.push(format!("experiment.{name}: must be at least 1"));
        }
    }
    if x.mgf_t.iter().any(|&t| !(t >= 0.0 && t <= 1.0)) {
        errs.push("experiment.mgf_t: every t must lie in [0, 1] so that t·max|a| ≤ 1".into());
    }
}

/// One pass/fail line; `criterion` links it to the numbered acceptance list.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub criterion: Option<u8>,
    pub pass: bool,
    pub value: f64,
    pub threshold: f64,
}

impl Check {
    fn at_most(name: &str, criterion: Option<u8>, value: f64, threshold: f64) -> Self {
        Self { name: name.into(), criterion, pass: value <= threshold, value, threshold }
    }

    fn at_least(name: &str, criterion: Option<u8>, value: f64, threshold: f64) -> Self {
        Self { name: name.into(), criterion, pass: value >= threshold, value, threshold }
    }

    fn flag(name: &str, criterion: Option<u8>, pass: bool) -> Self {
        Self { name: name.into(), criterion, pass, value: if pass { 1.0 } else { 0.0 }, threshold: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    fn new(name: &str, header: &[&str]) -> Self {
        Self { name: name.into(), header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }
}

/// What a pipeline produces before anything touches the disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub checks: Vec<Check>,
    pub tables: Vec<Table>,
    pub report: serde_json::Value,
}

impl Outcome {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config_hash: String,
    pub artifact_version: String,
    pub wall_clock_seconds: f64,
    pub checks: Vec<Check>,
    pub all_pass: bool,
    pub directory: PathBuf,
    pub files: Vec<FileEntry>,
}

/// Runs a pipeline without writing anything.
pub fn execute(sub: Subcommand, cfg: &RunConfig) -> Result<Outcome> {
    match sub {
        Subcommand::ConnectionCheck => connection_check(cfg),
        Subcommand::StationaryPhase => stationary_phase(cfg),
        Subcommand::PruferTrace => prufer_trace(cfg),
        Subcommand::Chain => chain(cfg),
        Subcommand::Lyapunov => {
            let (pr, sp, ens) = ensemble(cfg)?;
            lyapunov_outcome(cfg, &pr, &sp, &ens)
        }
        Subcommand::Subordinacy => {
            let (pr, sp, ens) = ensemble(cfg)?;
            subordinacy_outcome(cfg, &pr, &sp, &ens)
        }
        Subcommand::MixingBound => mixing_bound(cfg),
        Subcommand::KappaZero => kappa_zero(cfg),
    }
}

/// Runs a pipeline and persists its tables, report and manifest under
/// `<out_root>/<subcommand>/<hash prefix>/`.
pub fn run_subcommand(sub: Subcommand, cfg: &RunConfig, out_root: &Path) -> Result<RunManifest> {
    let start = Instant::now();
    let outcome = execute(sub, cfg)?;
    let hash = cfg.hash(sub);
    let dir = out_root.join(sub.name()).join(&hash[..16]);
    std::fs::create_dir_all(&dir)?;
    let mut files = Vec::new();
    for t in &outcome.tables {
        let (name, bytes) = match cfg.output.format {
            OutputFormat::Csv => (format!("{}.csv", t.name), table_csv(t)?),
            OutputFormat::Json => (format!("{}.json", t.name), json_bytes(&json!({"header": t.header, "rows": t.rows}))?),
        };
        files.push(write_file(&dir, &name, &bytes)?);
    }
    let mut report = outcome.report.clone();
    report["checks"] = serde_json::to_value(&outcome.checks).map_err(json_err)?;
    report["config_hash"] = json!(hash);
    files.push(write_file(&dir, "report.json", &json_bytes(&report)?)?);
    files.sort_by(|a, b| a.name.cmp(&b.name));
    let manifest = RunManifest {
        subcommand: sub.name().into(),
        config_hash: hash,
        artifact_version: ARTIFACT_VERSION.into(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        all_pass: outcome.all_pass(),
        checks: outcome.checks,
        directory: dir.clone(),
        files,
    };
    std::fs::write(dir.join("manifest.json"), json_bytes(&manifest)?)?;
    Ok(manifest)
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut b = serde_json::to_vec_pretty(v).map_err(json_err)?;
    b.push(b'\n');
    Ok(b)
}

fn table_csv(t: &Table) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(&t.header).map_err(io)?;
    for row in &t.rows {
        w.write_record(row.iter().map(|v| if v.is_nan() { String::new() } else { v.to_string() })).map_err(io)?;
    }
    w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<FileEntry> {
    std::fs::write(dir.join(name), bytes)?;
    Ok(FileEntry { name: name.into(), sha256: format!("{:x}", Sha256::digest(bytes)), bytes: bytes.len() as u64 })
}

fn base_report(cfg: &RunConfig, sub: Subcommand) -> serde_json::Value {
    json!({
        "subcommand": sub.name(),
        "artifact_version": ARTIFACT_VERSION,
        "params": cfg.operator,
        "spec": cfg.potential,
    })
}

fn max_of(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, f64::max)
}

fn connection_check(cfg: &RunConfig) -> Result<Outcome> {
    let x = &cfg.experiment;
    let mut checks = Vec::new();
    let mut grid = Table::new("connection", &["abs_d", "s", "re_r", "im_r", "unimodularity_residual"]);
    for j in 0..x.d_points {
        let d = x.d_max * j as f64 / (x.d_points - 1) as f64;
        let s = turning::connection_matrix(Complex64::new(d, 0.0));
        grid.rows.push(vec![d, s.s_entry, s.r_entry.re, s.r_entry.im, s.unimodularity_residual()]);
    }
    let unimod = max_of(grid.rows.iter().map(|r| r[4]));
    checks.push(Check::at_most("unimodularity", Some(1), unimod, 1e-9));

    let mut oracle = Table::new("oracle", &["abs_d", "Phi0", "oracle_deviation"]);
    if x.ode_oracle {
        let pts: Vec<(f64, f64)> = x.oracle_d.iter().flat_map(|&d| x.phi0.iter().map(move |&p| (d, p))).collect();
        let devs = pts
            .par_iter()
            .map(|&(d, p)| {
                let dz = Complex64::new(d, 0.0);
                let o = turning::ode_connection_oracle(dz, p, x.big_y, 0.0)?;
                Ok(mat2::max_abs(&mat2::sub(&o, &turning::rotated_connection(dz, p))))
            })
            .collect::<Result<Vec<f64>>>()?;
        for (&(d, p), dev) in pts.iter().zip(devs) {
            oracle.rows.push(vec![d, p, dev]);
        }
        checks.push(Check::at_most("hermite_vs_ode_oracle", Some(2), max_of(oracle.rows.iter().map(|r| r[2])), 1e-5));
    }

    let mut det = Table::new("det", &["abs_d", "y", "det_plus_deviation", "det_minus_deviation"]);
    for &d in &[0.5, 1.0, 2.0] {
        let dz = Complex64::from_polar(d, 1.1);
        let want = (-PI * d * d / 4.0).exp();
        for &y in &x.det_y {
            let (pp, pm) = turning::fundamental_matrices(dz, 0.7, y)?;
            det.rows.push(vec![d, y, (mat2::det(&pp) - want).norm(), (mat2::det(&pm) - want).norm()]);
        }
    }
    let det_dev = max_of(det.rows.iter().flat_map(|r| [r[2], r[3]]));
    checks.push(Check::at_most("det_psi", Some(3), det_dev, 1e-9));

    let mut asym = Table::new("asymptotic", &["abs_d", "y", "scaled_deviation"]);
    let [y_lo, y_hi] = x.asymptotic_y;
    let ys: Vec<f64> = (0..=30).map(|i| y_lo + (y_hi - y_lo) * i as f64 / 30.0).collect();
    let y_mid = 0.5 * (y_lo + y_hi);
    let mut growth = 0.0f64;
    for &d in &[0.5, 1.0, 2.0] {
        let dz = Complex64::new(d, 0.0);
        let lam = turning::turning_order(dz);
        let amp = (-PI * d * d / 8.0).exp();
        let (mut head, mut tail) = (0.0f64, 0.0f64);
        for (&y, psi) in ys.iter().zip(turning::psi_solutions(dz, 0.7, &ys)?) {
            let plus = [[psi[0], psi[1].conj()], [psi[1], psi[0].conj()]];
            let lead = mat2::exp_sigma3(lam * (2.0 * y).ln());
            let scaled = lead.map(|row| row.map(|v| v * amp));
            let dev = y * mat2::max_abs(&mat2::sub(&plus, &scaled));
            asym.rows.push(vec![d, y, dev]);
            if y <= y_mid {
                head = head.max(dev);
            } else {
                tail = tail.max(dev);
            }
        }
        growth = growth.max(tail / head);
    }
    checks.push(Check::at_most("asymptotic_deviation_growth", Some(3), growth, 1.5));

    let mut small = Table::new("small_xi", &["xi", "C"]);
    let [a, b] = x.xi_range;
    let c_lin = Complex64::from_polar(PI.sqrt(), -PI / 4.0);
    for i in 0..x.xi_points {
        let xi = a * (b / a).powf(i as f64 / (x.xi_points - 1) as f64);
        let r = turning::connection_matrix(Complex64::new(xi, 0.0)).r_entry;
        small.rows.push(vec![xi, (r - c_lin * xi).norm() / xi.powi(3)]);
    }
    let cs: Vec<f64> = small.rows.iter().map(|r| r[1]).collect();
    let spread = cs.iter().cloned().fold(0.0, f64::max) / cs.iter().cloned().fold(f64::INFINITY, f64::min);
    checks.push(Check::at_most("small_xi_constant_spread", Some(4), spread, 1.5));

    let mut report = base_report(cfg, Subcommand::ConnectionCheck);
    report["small_xi_constant"] = json!(stats::median(&cs)?);
    Ok(Outcome { checks, tables: vec![grid, oracle, det, asym, small], report })
}

fn stationary_phase(cfg: &RunConfig) -> Result<Outcome> {
    let (pr, sp) = (cfg.operator_params()?, cfg.potential_spec()?);
    let ls = &cfg.experiment.l_values;
    let vals = ls
        .par_iter()
        .map(|&l| {
            let o = oscillatory::window_integral_oracle(&pr, &sp, l)?.value;
            let a = oscillatory::window_sum_asymptotic(&pr, &sp, l)?.total();
            Ok((o, a))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut t = Table::new("stationary_phase", &["l", "oracle_re", "oracle_im", "asympt_re", "asympt_im", "residual"]);
    for (&l, (o, a)) in ls.iter().zip(&vals) {
        t.rows.push(vec![l as f64, o.re, o.im, a.re, a.im, (o - a).norm()]);
    }
    let x: Vec<f64> = t.rows.iter().map(|r| r[0]).collect();
    let y: Vec<f64> = t.rows.iter().map(|r| r[5]).collect();
    let (c, gamma, r2) = stats::power_law_decay(&x, &y)?;
    let checks = vec![
        Check::at_least("residual_decay_rate", Some(5), gamma, f64::MIN_POSITIVE),
        Check::at_least("residual_fit_r_squared", Some(5), r2, 0.9),
    ];
    let mut report = base_report(cfg, Subcommand::StationaryPhase);
    report["fit"] = json!({"c": c, "gamma": gamma, "r_squared": r2});
    Ok(Outcome { checks, tables: vec![t], report })
}

fn prufer_trace(cfg: &RunConfig) -> Result<Outcome> {
    let (pr, sp) = (cfg.operator_params()?, cfg.potential_spec()?);
    let x = &cfg.experiment;
    let rows = discrete::ode_bridge(&pr, &sp, x.l_range[0], x.l_range[1], x.tolerance, x.theta0)?;
    let mut t = Table::new("prufer_trace", &["k", "x", "ln_R", "theta", "phi", "ln_R_error", "phi_error"]);
    for r in &rows {
        t.rows.push(vec![r.k as f64, r.x, r.ln_r, r.theta, r.phi, r.ln_r_error, r.phi_error]);
    }
    let steps = &rows[..rows.len() - 1];
    let ks: Vec<f64> = steps.iter().map(|r| r.k as f64).collect();
    let errs: Vec<f64> = steps.iter().map(|r| r.ln_r_error.max(1e-300)).collect();
    let (c, rate, r2) = stats::power_law_decay(&ks, &errs)?;
    let checks = vec![Check::at_least("recursion_error_decay_rate", Some(10), rate, f64::MIN_POSITIVE)];
    let mut report = base_report(cfg, Subcommand::PruferTrace);
    report["fit"] = json!({"c": c, "rate": rate, "r_squared": r2});
    Ok(Outcome { checks, tables: vec![t], report })
}

fn chain(cfg: &RunConfig) -> Result<Outcome> {
    let (pr, sp) = (cfg.operator_params()?, cfg.potential_spec()?);
    let x = &cfg.experiment;
    let opts = ChainOptions { phi3: x.phi3, lambda1: x.lambda1 };
    let [m0, m1] = x.chain_m_range;
    let recs = discrete::run_closed_chain(&pr, &sp, discrete::spinor(0.0, x.theta0), m0, m1, &opts)?;
    let mut t = Table::new("chain", &["m", "ln_chi", "phase", "Phi1", "Phi2m", "Phi2p", "Phi3m", "Phi3p"]);
    let mut det_dev = 0.0f64;
    for r in &recs {
        let c = r.coeffs;
        let get = |f: fn(&discrete::ClosedStepCoeffs) -> f64| c.as_ref().map_or(f64::NAN, f);
        t.rows.push(vec![
            r.m as f64,
            r.ln_norm,
            r.phase,
            get(|c| c.phi1),
            get(|c| c.phi2_minus),
            get(|c| c.phi2_plus),
            get(|c| c.phi3_minus),
            get(|c| c.phi3_plus),
        ]);
        if let Some(c) = &c {
            det_dev = det_dev.max((mat2::det(&c.matrix()) - 1.0).norm());
        }
    }
    let ms: Vec<i64> = (m0..m1).collect();
    let incs = ms
        .par_iter()
        .map(|&m| {
            let a = discrete::adiabatic_phase_increment(&pr, &sp, None, m, Side::Minus, x.eta)?;
            let b = discrete::adiabatic_phase_increment(&pr, &sp, None, m, Side::Plus, x.eta)?;
            Ok(vec![m as f64, a, b])
        })
        .collect::<Result<Vec<_>>>()?;
    let mut adiabatic = Table::new("adiabatic", &["m", "Delta_minus", "Delta_plus"]);
    adiabatic.rows = incs;
    let checks = vec![Check::at_most("step_unimodularity", None, det_dev, 1e-9)];
    let mut report = base_report(cfg, Subcommand::Chain);
    report["phi3"] = json!(x.phi3);
    report["final_ln_chi"] = json!(recs.last().map(|r| r.ln_norm));
    Ok(Outcome { checks, tables: vec![t, adiabatic], report })
}

/// The ρ ensemble shared by `lyapunov` and `subordinacy`.
pub fn ensemble(cfg: &RunConfig) -> Result<(OperatorParams, PotentialSpec, Vec<RhoSample>)> {
    let (pr, sp) = (cfg.operator_params()?, cfg.potential_spec()?);
    let x = &cfg.experiment;
    let rhos = model::stratified_rhos(x.rho_lo, x.rho_samples);
    let ens = model::rho_ensemble(&pr, &sp, &rhos, x.m_range[0], x.m_range[1])?;
    Ok((pr, sp, ens))
}

/// Wronskian drift, Lyapunov slope and the envelope constant from an
/// ensemble.
pub fn lyapunov_outcome(cfg: &RunConfig, pr: &OperatorParams, sp: &PotentialSpec, ens: &[RhoSample]) -> Result<Outcome> {
    let m0 = cfg.experiment.m_range[0];
    let m_max = cfg.experiment.m_range[1];
    let consts = phase::model_constants(pr, sp)?;
    let slopes: Vec<f64> = ens.iter().flat_map(|s| s.slopes.iter().copied()).collect();
    let fit = model::summarize_slopes(&slopes, consts.r_star)?;
    let wronskian = max_of(ens.iter().map(|s| s.wronskian_deviation));
    let runs: Vec<Vec<f64>> = ens.iter().flat_map(|s| s.ln_r_runs.iter().cloned()).collect();
    let c = model::envelope_constant(&runs, m0, sp.beta, m0 + (m_max - m0) / 2);
    let env_min = model::envelope_minimum(&runs, m0, sp.beta, c);
    let rel = (fit.slope_median - consts.r_star).abs() / consts.r_star;
    let checks = vec![
        Check::at_most("wronskian_drift", Some(7), wronskian, 1e-9),
        Check::at_most("lyapunov_slope_relative_error", Some(8), rel, 0.15),
        Check::at_least("envelope_minimum", Some(15), env_min, -1e-9),
    ];
    let mut t = Table::new("slopes", &["rho", "alpha", "slope"]);
    for s in ens {
        for (&a, &v) in model::ALPHA_GRID.iter().zip(&s.slopes) {
            t.rows.push(vec![s.rho, a, v]);
        }
    }
    let mut env = Table::new("envelope", &["rho", "min_ln_R_plus_C_m"]);
    for s in ens {
        env.rows.push(vec![s.rho, model::envelope_minimum(&s.ln_r_runs, m0, sp.beta, c)]);
    }
    let mut report = base_report(cfg, Subcommand::Lyapunov);
    report["samples"] = json!(fit.samples);
    report["slope_median"] = json!(fit.slope_median);
    report["slope_iqr"] = json!(fit.slope_iqr);
    report["r_star"] = json!(fit.r_star);
    report["envelope_c"] = json!(c);
    report["wronskian_drift"] = json!(wronskian);
    Ok(Outcome { checks, tables: vec![t, env], report })
}

/// Decaying-solution and subordinacy diagnostics from an ensemble.
pub fn subordinacy_outcome(cfg: &RunConfig, pr: &OperatorParams, sp: &PotentialSpec, ens: &[RhoSample]) -> Result<Outcome> {
    let consts = phase::model_constants(pr, sp)?;
    let decaying: Vec<&RhoSample> = ens.iter().filter(|s| s.decay_slope.is_some()).collect();
    let found = decaying.len() as f64 / ens.len() as f64;
    let ds: Vec<f64> = decaying.iter().filter_map(|s| s.decay_slope).collect();
    let decay_median = if ds.is_empty() { f64::NAN } else { stats::median(&ds)? };
    let decay_rel = (decay_median + consts.r_star).abs() / consts.r_star;
    let h_imag = max_of(decaying.iter().filter_map(|s| Some(s.h_imag_residue? / s.h?.abs().max(1.0))));
    let z_sq = max_of(decaying.iter().filter_map(|s| s.z_inf_sq_residual));

    let reports: Vec<&model::SubordinacyReport> =
        ens.iter().filter_map(|s| s.subordinacy.as_ref()).filter(|r| r.subordinate).collect();
    let md: Vec<f64> = reports.iter().map(|r| r.mu_fit_d).collect();
    let mg: Vec<f64> = reports.iter().map(|r| r.mu_fit_g).collect();
    let (mu_d, mu_g) = if reports.is_empty() { (f64::NAN, f64::NAN) } else { (stats::median(&md)?, stats::median(&mg)?) };
    let mu_rel = ((mu_d - consts.mu_star).abs().max((mu_g - consts.mu_star).abs())) / consts.mu_star;
    let strict = reports.iter().filter(|r| r.ratio_strictly_decreasing).count() as f64 / reports.len().max(1) as f64;

    let checks = vec![
        Check::at_least("decaying_solution_found_fraction", Some(9), found, 0.5),
        Check::at_most("decay_slope_relative_error", Some(9), decay_rel, 0.2),
        Check::at_most("h_relative_imaginary_part", Some(9), h_imag, 1e-6),
        Check::at_most("z_inf_squared_residual", Some(9), z_sq, 1e-6),
        Check::at_most("subordinacy_mu_relative_error", Some(14), mu_rel, 0.25),
        Check::at_least("ratio_strictly_decreasing_fraction", Some(14), strict, 1.0),
    ];
    let mut dec = Table::new("decaying", &["rho", "decay_slope", "h", "h_imag_residue", "z_inf_sq_residual"]);
    let mut sub = Table::new("subordinacy", &["rho", "mu_d", "mu_g", "mu_star", "tail_increases"]);
    let mut ratio = Table::new("ratio", &["rho", "ln_N", "ln_Q_d", "ln_Q_g", "ln_ratio"]);
    for s in ens {
        let o = |v: Option<f64>| v.unwrap_or(f64::NAN);
        dec.rows.push(vec![s.rho, o(s.decay_slope), o(s.h), o(s.h_imag_residue), o(s.z_inf_sq_residual)]);
        if let Some(r) = &s.subordinacy {
            sub.rows.push(vec![s.rho, r.mu_fit_d, r.mu_fit_g, r.mu_star, r.tail_increases as f64]);
            for i in 0..r.ln_n.len() {
                ratio.rows.push(vec![s.rho, r.ln_n[i], r.ln_q_d[i], r.ln_q_g[i], r.ln_ratio[i]]);
            }
        }
    }
    let mut report = base_report(cfg, Subcommand::Subordinacy);
    report["samples"] = json!(ens.len());
    report["decay_slope_median"] = json!(decay_median);
    report["r_star"] = json!(consts.r_star);
    report["mu_fit_d_median"] = json!(mu_d);
    report["mu_fit_g_median"] = json!(mu_g);
    report["mu_star"] = json!(consts.mu_star);
    report["decay_failures"] = json!(ens
        .iter()
        .filter_map(|s| s.decay_error.as_ref().map(|e| json!({"rho": s.rho, "error": e})))
        .collect::<Vec<_>>());
    Ok(Outcome { checks, tables: vec![dec, sub, ratio], report })
}

fn mixing_bound(cfg: &RunConfig) -> Result<Outcome> {
    let (pr, sp) = (cfg.operator_params()?, cfg.potential_spec()?);
    let x = &cfg.experiment;
    let m0 = x.m_range[0];
    let run = ModelRunConfig { phi3: Phi3Mode::Zero, ..ModelRunConfig::new(0.0, x.rho, m0, m0 + x.mgf_terms as i64) };
    let traj = model::run_model(&run, &pr, &sp)?;
    let theta: Vec<f64> = traj.phi[..x.mgf_terms].to_vec();
    let f = move |n: usize, y: f64| (theta[n] + 0.5 * y).cos();
    let family = MgfFamily { f: &f, f_prime_sup: vec![0.5; x.mgf_terms] };
    let mgf = MgfConfig {
        a: (1..=x.mgf_terms).map(|n| (n as f64).powf(-x.mgf_decay)).collect(),
        l: x.mgf_l,
        h: 0,
        g_k: 1.0,
        g_b: 0.0,
        t_grid: x.mgf_t.clone(),
        interval_lo: x.rho_lo,
        max_nodes: x.mgf_nodes,
    };
    let rep = model::mgf_bound_test(&mgf, &family)?;
    let rhos = model::stratified_rhos(x.rho_lo, x.smallness_samples);
    let small = model::sum_smallness_stats(&pr, &sp, &x.smallness_m, &rhos, x.eps0, m0)?;
    let largest = small.rows.iter().max_by_key(|r| r.m).expect("validated non-empty");
    let medians_decrease = small.rows.windows(2).all(|w| w[1].median_ratio < w[0].median_ratio);
    let checks = vec![
        Check::at_most("mgf_fitted_b", Some(12), if rep.b_fit.is_finite() { rep.b_fit } else { f64::INFINITY }, 100.0),
        Check::at_most("mgf_holdout_violations", Some(12), rep.violations as f64, 0.0),
        Check::at_most("tail_exceedance_fraction", Some(13), largest.exceed_fraction, 0.0),
        Check::flag("tail_median_ratio_decreasing", Some(13), medians_decrease),
    ];
    let mut t = Table::new("mgf", &["t", "ln_I", "B_t", "holdout"]);
    for r in &rep.rows {
        t.rows.push(vec![r.t, r.ln_integral, r.b_t, if r.holdout { 1.0 } else { 0.0 }]);
    }
    let mut s = Table::new("smallness", &["M", "threshold", "exceed_fraction", "median_ratio"]);
    for r in &small.rows {
        s.rows.push(vec![r.m as f64, r.threshold, r.exceed_fraction, r.median_ratio]);
    }
    let mut report = base_report(cfg, Subcommand::MixingBound);
    report["b_fit"] = json!(rep.b_fit);
    report["a_sq"] = json!(rep.a_sq);
    report["q_n"] = json!(rep.q_n);
    report["nodes"] = json!(rep.nodes);
    report["stratified"] = json!(rep.stratified);
    report["samples"] = json!(small.samples);
    Ok(Outcome { checks, tables: vec![t, s], report })
}

fn kappa_zero(cfg: &RunConfig) -> Result<Outcome> {
    let (pr, sp) = (cfg.operator_params()?, cfg.potential_spec()?);
    if pr.kappa != 0.0 {
        return Err(Error::Config("operator.kappa must be 0 for kappa-zero".into()));
    }
    let x = &cfg.experiment;
    let res = x
        .k1
        .par_iter()
        .map(|&k1| discrete::kappa_zero_check(&pr, &sp, k1, x.k2_max, x.theta0))
        .collect::<Result<Vec<_>>>()?;
    let mut sup = Table::new("sup_ratio", &["K1", "sup_ln_ratio"]);
    for (&k1, r) in x.k1.iter().zip(&res) {
        sup.rows.push(vec![k1 as f64, r.sup_log_ratio]);
    }
    let ks: Vec<f64> = sup.rows.iter().map(|r| r[0]).collect();
    let sups: Vec<f64> = sup.rows.iter().map(|r| r[1].max(1e-300)).collect();
    let (_, rate, _) = stats::power_law_decay(&ks, &sups)?;
    let growth = discrete::psi_sq_growth(&pr, &sp, 10 * x.psi_k_start, x.theta0)?;
    let mut psi = Table::new("psi_sq", &["k", "N", "ratio"]);
    for g in &growth {
        psi.rows.push(vec![g.k as f64, g.n, g.ratio]);
    }
    let n_lo = growth[x.psi_k_start as usize - 1].n;
    let band: Vec<f64> = growth.iter().filter(|g| g.n >= n_lo && g.n <= 100.0 * n_lo).map(|g| g.ratio).collect();
    let spread = band.iter().cloned().fold(0.0, f64::max) / band.iter().cloned().fold(f64::INFINITY, f64::min);
    let checks = vec![
        Check::flag("non_resonant", Some(11), !res[0].resonant),
        Check::at_least("sup_ratio_decay_rate", Some(11), rate, f64::MIN_POSITIVE),
        Check::at_most("psi_sq_band_spread", Some(11), spread, 1.5),
    ];
    let mut report = base_report(cfg, Subcommand::KappaZero);
    report["resonance_distance"] = json!(res[0].resonance_distance);
    report["sup_decay_rate"] = json!(rate);
    report["band_decades"] = json!((band.len() > 1).then(|| (100.0f64).log10()));
    Ok(Outcome { checks, tables: vec![sup, psi], report })
}
