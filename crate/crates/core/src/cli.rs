//! Batch driver: one JSON config in, CSV/JSON/binary reports out.
//!
//! Exit status: 0 when every check of the subcommand passes, 1 when a check
//! fails or a computation errors, 2 for unreadable or invalid configuration.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::carleman::{bump_family, constant_sweep};
use crate::cgo::{amplitude_closed_form, build_cgo, wkb_residual, ComplexPhase};
use crate::error::LabError;
use crate::geometry::{Domain, DomainSpec};
use crate::identity::{discriminate, noise_floor, orthogonality_run, u2_phase, IdentityConfig, IdentityRun};
use crate::io;
use crate::pde::{assemble_dn, Potential, PotentialSpec};
use crate::phases::{check_rank, verify_eikonal_pair, PhaseFamily, ThetaGridSpec};
use crate::reflection::{partial_identity_run, reflected_phase, PartialIdentityRun, WMinus};
use crate::weights::{check_limiting, CarlemanWeight};

#[derive(Parser, Debug)]
#[command(name = "calderon-lab", version, about = "Numerical checks for partial-data inverse problems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Bracket test of a Carleman weight.
    WeightCheck(Common),
    /// Eikonal residuals and ranks over a θ-grid.
    PhaseCheck(Common),
    /// CGO solutions over an h-list, written as binary fixtures.
    CgoBuild(Common),
    /// Empirical Carleman constants over seeded test bumps.
    CarlemanSweep(Common),
    /// Dirichlet-to-Neumann matrix of a potential.
    DnMap(Common),
    /// Green-identity convergence runs.
    IdentityRun(Common),
    /// Nonlinear Fourier scan against the q₁ = q₂ noise floor.
    Discriminate(Common),
    /// Reflected-wave solutions vanishing on part of the back face.
    ReflectDemo(Common),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Caps the worker threads.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::WeightCheck(c)
            | Command::PhaseCheck(c)
            | Command::CgoBuild(c)
            | Command::CarlemanSweep(c)
            | Command::DnMap(c)
            | Command::IdentityRun(c)
            | Command::Discriminate(c)
            | Command::ReflectDemo(c) => c,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Command::WeightCheck(_) => "weight-check",
            Command::PhaseCheck(_) => "phase-check",
            Command::CgoBuild(_) => "cgo-build",
            Command::CarlemanSweep(_) => "carleman-sweep",
            Command::DnMap(_) => "dn-map",
            Command::IdentityRun(_) => "identity-run",
            Command::Discriminate(_) => "discriminate",
            Command::ReflectDemo(_) => "reflect-demo",
        }
    }
}

/// Tolerances of the pass/fail checks.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub bracket: f64,
    pub eikonal: f64,
    pub symmetry: f64,
    /// Allowed `max/min` of the Carleman constants.
    pub variation: f64,
    /// `|limit|` below which q₁ = q₂ runs count as zero.
    pub limit: f64,
    pub green: f64,
    pub trace: f64,
    /// Required ratio of the discrimination maximum to the noise floor.
    pub margin: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            bracket: 1e-8,
            eikonal: 1e-10,
            symmetry: 1e-8,
            variation: 2.0,
            limit: 1e-9,
            green: 1e-8,
            trace: 1e-6,
            margin: 10.0,
        }
    }
}

/// Experiment description shared by all subcommands; each one reads the
/// fields it needs.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// When present it must name the subcommand being run.
    #[serde(default)]
    pub command: Option<String>,
    pub domain: DomainSpec,
    #[serde(default)]
    pub weight: Option<CarlemanWeight>,
    /// Explicit CGO phase; otherwise the `u₂` phase of `theta` is used.
    #[serde(default)]
    pub phase: Option<ComplexPhase>,
    #[serde(default)]
    pub theta: Option<PhaseFamily>,
    #[serde(default)]
    pub theta_grid: Option<ThetaGridSpec>,
    #[serde(default = "unit_lambda")]
    pub lambdas: Vec<f64>,
    #[serde(default)]
    pub h_list: Vec<f64>,
    #[serde(default)]
    pub q: Option<PotentialSpec>,
    #[serde(default)]
    pub q1: Option<PotentialSpec>,
    #[serde(default)]
    pub q2: Option<PotentialSpec>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub seed: u64,
    /// Sample count of the bracket test (default 10⁴).
    #[serde(default)]
    pub samples: Option<usize>,
    /// Whether the weight is expected to pass the bracket test (default: its kind is limiting).
    #[serde(default)]
    pub expect_pass: Option<bool>,
    /// Seeded test bumps of the Carleman sweep (default 20).
    #[serde(default)]
    pub test_count: Option<usize>,
    #[serde(default)]
    pub eps0: Option<f64>,
    #[serde(default)]
    pub c0: Option<f64>,
    #[serde(default)]
    pub w_minus: Option<WMinus>,
    #[serde(default)]
    pub collar_width: Option<f64>,
    /// Expected discrimination verdict, `"distinct"` or `"indistinguishable"`.
    #[serde(default)]
    pub expect_verdict: Option<String>,
}

fn unit_lambda() -> Vec<f64> {
    vec![1.0]
}

/// Why a run did not pass.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Failed(m) => write!(f, "failed: {m}"),
        }
    }
}

impl From<LabError> for CliError {
    fn from(e: LabError) -> Self {
        CliError::Failed(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn need<T: Clone>(v: &Option<T>, name: &str) -> CliResult<T> {
    v.clone().ok_or_else(|| CliError::Config(format!("missing field `{name}`")))
}

/// Parses arguments, runs the subcommand and returns the exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}: {e}", cli.command.name());
            e.exit_code()
        }
    }
}

pub fn load_config(path: &Path) -> CliResult<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn run(command: &Command) -> CliResult<()> {
    let common = command.common();
    let mut config = load_config(&common.config)?;
    if let Some(c) = &config.command {
        if c != command.name() {
            return Err(CliError::Config(format!("config is for `{c}`, not `{}`", command.name())));
        }
    }
    if let Some(s) = common.seed {
        config.seed = s;
    }
    std::fs::create_dir_all(&common.out).map_err(config_err)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(config_err)?;
    let out = common.out.clone();
    pool.install(|| match command {
        Command::WeightCheck(_) => weight_check(&config, &out),
        Command::PhaseCheck(_) => phase_check(&config, &out),
        Command::CgoBuild(_) => cgo_build(&config, &out),
        Command::CarlemanSweep(_) => carleman_sweep(&config, &out),
        Command::DnMap(_) => dn_map(&config, &out),
        Command::IdentityRun(_) => identity_run(&config, &out),
        Command::Discriminate(_) => discriminate_cmd(&config, &out),
        Command::ReflectDemo(_) => reflect_demo(&config, &out),
    })
}

fn domain(config: &ExperimentConfig) -> CliResult<Domain> {
    config.domain.build().map_err(config_err)
}

fn potential(spec: &Option<PotentialSpec>, domain: &Domain) -> CliResult<Potential> {
    spec.clone().unwrap_or(PotentialSpec::Zero).build(domain).map_err(config_err)
}

/// Re-validates a deserialized family (normalizes `y`, checks `ν`).
fn family(t: &PhaseFamily) -> CliResult<PhaseFamily> {
    let mut f = PhaseFamily::new(t.center.clone(), t.y.clone(), t.nu.clone()).map_err(config_err)?;
    f.delta = t.delta;
    Ok(f)
}

fn families(config: &ExperimentConfig) -> CliResult<Vec<PhaseFamily>> {
    match (&config.theta_grid, &config.theta) {
        (Some(g), _) => g.families().map_err(config_err),
        (None, Some(t)) => Ok(vec![family(t)?]),
        (None, None) => Err(CliError::Config("missing field `theta` or `theta_grid`".into())),
    }
}

fn h_list(config: &ExperimentConfig, min_len: usize) -> CliResult<Vec<f64>> {
    if config.h_list.len() < min_len || config.h_list.iter().any(|h| !(*h > 0.0)) {
        return Err(CliError::Config(format!("`h_list` needs at least {min_len} positive values")));
    }
    Ok(config.h_list.clone())
}

fn check(pass: bool, what: impl FnOnce() -> String) -> CliResult<()> {
    if pass {
        Ok(())
    } else {
        Err(CliError::Failed(what()))
    }
}

#[derive(Serialize)]
struct WeightCheckReport {
    report: crate::weights::LimitingReport,
    expected_pass: bool,
    pass: bool,
}

fn weight_check(config: &ExperimentConfig, out: &Path) -> CliResult<()> {
    let d = domain(config)?;
    let weight = need(&config.weight, "weight")?;
    weight.validate_on(&d).map_err(config_err)?;
    let samples = config.samples.unwrap_or(10_000);
    let report = check_limiting(&weight, &d, samples, config.tolerances.bracket, config.seed)?;
    let expected_pass = config.expect_pass.unwrap_or_else(|| weight.is_limiting());
    let pass = report.pass == expected_pass;
    info!("max bracket {:.3e} over {samples} samples", report.max_bracket);
    io::write_json(
        &out.join("weight_check.json"),
        &WeightCheckReport {
            report: report.clone(),
            expected_pass,
            pass,
        },
    )?;
    check(pass, || format!("bracket test gave pass = {}, expected {expected_pass}", report.pass))
}

#[derive(Serialize)]
struct PhaseRow {
    theta_id: usize,
    max_norm_residual: f64,
    max_orthogonality_residual: f64,
    rank_ny: usize,
    rank_full: usize,
    fraction_ok: f64,
}

fn phase_check(config: &ExperimentConfig, out: &Path) -> CliResult<()> {
    let d = domain(config)?;
    let fams = families(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let points: Vec<Vec<f64>> = (0..20)
        .map(|_| {
            (0..d.dim())
                .map(|k| d.lower()[k] + (d.upper()[k] - d.lower()[k]) * rng.gen_range(0.05..0.95))
                .collect()
        })
        .collect();
    let mut w = csv::Writer::from_path(out.join("phase_check.csv")).map_err(LabError::from)?;
    let mut failures = Vec::new();
    for (id, f) in fams.iter().enumerate() {
        f.validate_on(&d).map_err(config_err)?;
        let e = verify_eikonal_pair(f, &d, config.tolerances.eikonal)?;
        let r = check_rank(f, &points)?;
        if !e.pass {
            failures.push(id);
        }
        w.serialize(PhaseRow {
            theta_id: id,
            max_norm_residual: e.max_norm_residual,
            max_orthogonality_residual: e.max_orthogonality_residual,
            rank_ny: r.rank_ny,
            rank_full: r.rank_full,
            fraction_ok: r.fraction_ok,
        })
        .map_err(LabError::from)?;
    }
    w.flush().map_err(LabError::from)?;
    check(failures.is_empty(), || format!("eikonal residual above tolerance for θ ids {failures:?}"))
}

#[derive(Serialize)]
struct CgoRow {
    h: f64,
    remainder_constant: f64,
    pde_residual: f64,
    wkb_norm_ratio: f64,
    condition: f64,
    under_resolved: bool,
}

fn cgo_build(config: &ExperimentConfig, out: &Path) -> CliResult<()> {
    let d = domain(config)?;
    let phase = match (&config.phase, &config.theta) {
        (Some(p), _) => p.clone(),
        (None, Some(t)) => u2_phase(&family(t)?),
        (None, None) => return Err(CliError::Config("missing field `phase` or `theta`".into())),
    };
    phase.validate_on(&d).map_err(config_err)?;
    let q = potential(&config.q, &d)?;
    let hs = h_list(config, 1)?;
    let a = amplitude_closed_form(&phase, &d)?;
    let mut w = csv::Writer::from_path(out.join("cgo.csv")).map_err(LabError::from)?;
    for (k, &h) in hs.iter().enumerate() {
        let wkb = wkb_residual(&phase, &d, &a, h, &q)?;
        let c = build_cgo(&phase, &d, h, &q)?;
        io::write_cgo_fixture(out, &format!("cgo_{k}"), &d, &c)?;
        w.serialize(CgoRow {
            h,
            remainder_constant: c.remainder_constant,
            pde_residual: c.pde_residual,
            wkb_norm_ratio: wkb.norm_ratio,
            condition: c.condition,
            under_resolved: c.under_resolved,
        })
        .map_err(LabError::from)?;
    }
    w.flush().map_err(LabError::from)?;
    Ok(())
}

#[derive(Serialize)]
struct SweepSummary<'a> {
    weight_kind: &'a str,
    h_values: &'a [f64],
    constants: &'a [f64],
    argmax: &'a [usize],
    test_count: usize,
    variation: f64,
    growth_flag: bool,
    seed: u64,
    pass: bool,
}

fn carleman_sweep(config: &ExperimentConfig, out: &Path) -> CliResult<()> {
    let d = domain(config)?;
    let weight = need(&config.weight, "weight")?;
    weight.validate_on(&d).map_err(config_err)?;
    let q = potential(&config.q, &d)?;
    let hs = h_list(config, 3)?;
    let tests = bump_family(&d, config.test_count.unwrap_or(20), config.seed);
    let report = constant_sweep(&weight, &d, &q, &hs, &tests)?;
    io::write_carleman_csv(&out.join("carleman.csv"), &report.records)?;
    let pass = report.variation <= config.tolerances.variation;
    io::write_json(
        &out.join("carleman.json"),
        &SweepSummary {
            weight_kind: &report.weight_kind,
            h_values: &report.h_values,
            constants: &report.constants,
            argmax: &report.argmax,
            test_count: report.test_count,
            variation: report.variation,
            growth_flag: report.growth_flag,
            seed: config.seed,
            pass,
        },
    )?;
    check(pass, || format!("constant variation {:.3} exceeds {}", report.variation, config.tolerances.variation))
}

#[derive(Serialize)]
struct DnSummary {
    boundary_nodes: usize,
    potential_hash: String,
    symmetry_defect: f64,
    adjoint_defect: f64,
    spectral_norm: f64,
    pass: bool,
}

fn dn_map(config: &ExperimentConfig, out: &Path) -> CliResult<()> {
    let d = domain(config)?;
    let q = potential(&config.q, &d)?;
    let dn = assemble_dn(&d, &q)?;
    let conj = if q.is_real() { dn.clone() } else { assemble_dn(&d, &q.conj())? };
    io::write_dn(out, "dn", &d, &dn)?;
    if dn.rows() <= 200 {
        io::write_dn_csv(&out.join("dn.csv"), &dn)?;
    }
    let symmetry_defect = dn.symmetry_defect();
    let adjoint_defect = dn.adjoint_defect(&conj);
    let tol = config.tolerances.symmetry;
    let pass = symmetry_defect <= tol && adjoint_defect <= tol;
    io::write_json(
        &out.join("dn_summary.json"),
        &DnSummary {
            boundary_nodes: dn.rows(),
            potential_hash: dn.potential_hash.clone(),
            symmetry_defect,
            adjoint_defect,
            spectral_norm: dn.spectral_norm(),
            pass,
        },
    )?;
    check(pass, || format!("symmetry {symmetry_defect:.3e} / adjoint {adjoint_defect:.3e} above {tol:e}"))
}

#[derive(Serialize)]
struct Manifest<'a> {
    q1_spec: &'a PotentialSpec,
    q2_spec: &'a PotentialSpec,
    theta_grid: &'a [PhaseFamily],
    lambda_grid: &'a [f64],
    h_list: &'a [f64],
    eps0: Option<f64>,
}

fn identity_inputs(config: &ExperimentConfig) -> CliResult<(PotentialSpec, PotentialSpec)> {
    Ok((need(&config.q1, "q1")?, need(&config.q2, "q2")?))
}

fn identity_run(config: &ExperimentConfig, out: &Path) -> CliResult<()> {
    let d = domain(config)?;
    let (s1, s2) = identity_inputs(config)?;
    let (q1, q2) = (potential(&Some(s1.clone()), &d)?, potential(&Some(s2.clone()), &d)?);
    let fams = families(config)?;
    let hs = h_list(config, 1)?;
    io::write_json(
        &out.join("manifest.json"),
        &Manifest {
            q1_spec: &s1,
            q2_spec: &s2,
            theta_grid: &fams,
            lambda_grid: &config.lambdas,
            h_list: &hs,
            eps0: config.eps0,
        },
    )?;
    let mut runs: Vec<(usize, IdentityRun)> = Vec::new();
    for (id, f) in fams.iter().enumerate() {
        for &lambda in &config.lambdas {
            let cfg = IdentityConfig {
                theta: f.clone(),
                lambda,
                h_list: hs.clone(),
                eps0: config.eps0,
                c0: config.c0.unwrap_or(1.0),
            };
            runs.push((id, orthogonality_run(&d, &q1, &q2, &cfg)?));
        }
    }
    let tol = config.tolerances.limit;
    io::write_identity_csv(&out.join("identity.csv"), &runs, tol)?;
    let records = runs.iter().flat_map(|(_, r)| &r.records);
    let worst_green = records.clone().map(|r| r.green_residual).fold(0.0, f64::max);
    check(worst_green <= config.tolerances.green, || format!("Green residual {worst_green:.3e}"))?;
    if s1 == s2 {
        let worst = records.map(|r| r.limit.norm().max(r.lhs.norm())).fold(0.0, f64::max);
        check(worst <= tol, || format!("q1 = q2 but |limit| or |lhs| reaches {worst:.3e}"))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ScanRow {
    theta_id: usize,
    lambda: f64,
    value_re: f64,
    value_im: f64,
    abs: f64,
}

#[derive(Serialize)]
struct ScanSummary {
    max_abs: f64,
    argmax_theta: usize,
    argmax_lambda: f64,
    noise_floor: f64,
    threshold: f64,
    verdict: String,
}

fn discriminate_cmd(config: &ExperimentConfig, out: &Path) -> CliResult<()> {
    let d = domain(config)?;
    let (s1, s2) = identity_inputs(config)?;
    let (q1, q2) = (potential(&Some(s1.clone()), &d)?, potential(&Some(s2), &d)?);
    // the floor compares q₁ with an independently built copy of itself
    let q1_again = potential(&Some(s1), &d)?;
    let fams = families(config)?;
    let floor = noise_floor(&d, &q1, &q1_again, &fams, &config.lambdas)?;
    let threshold = config.tolerances.margin * floor;
    let r = discriminate(&d, &q1, &q2, &fams, &config.lambdas, threshold)?;
    let mut w = csv::Writer::from_path(out.join("discriminate.csv")).map_err(LabError::from)?;
    for &(t, l, v) in &r.values {
        w.serialize(ScanRow {
            theta_id: t,
            lambda: l,
            value_re: v.re,
            value_im: v.im,
            abs: v.norm(),
        })
        .map_err(LabError::from)?;
    }
    w.flush().map_err(LabError::from)?;
    io::write_json(
        &out.join("discriminate.json"),
        &ScanSummary {
            max_abs: r.max_abs,
            argmax_theta: r.argmax.0,
            argmax_lambda: r.argmax.1,
            noise_floor: floor,
            threshold,
            verdict: r.verdict().into(),
        },
    )?;
    match config.expect_verdict.as_deref() {
        None => Ok(()),
        Some("distinct") => check(r.distinct, || "expected distinct potentials".into()),
        Some("indistinguishable") => check(!r.distinct, || "expected indistinguishable potentials".into()),
        Some(other) => Err(CliError::Config(format!("unknown expected verdict `{other}`"))),
    }
}

#[derive(Serialize)]
struct ReflectSummary {
    damping_constant: f64,
    damping_floor: f64,
    max_trace_residual: f64,
    reflected_abs: Vec<f64>,
    reflected_monotone: bool,
    lhs_order: f64,
    pass: bool,
}

fn reflect_demo(config: &ExperimentConfig, out: &Path) -> CliResult<()> {
    let d = domain(config)?;
    let (s1, s2) = identity_inputs(config)?;
    let (q1, q2) = (potential(&Some(s1), &d)?, potential(&Some(s2), &d)?);
    let theta = family(&need(&config.theta, "theta")?)?;
    let hs = h_list(config, 1)?;
    let patch = config.w_minus.clone().unwrap_or_else(|| WMinus::central(&d, 0, -1));
    patch.validate(&d).map_err(config_err)?;
    let collar = config.collar_width.unwrap_or(0.3);
    let refl = reflected_phase(&u2_phase(&theta), &d, &patch, collar).map_err(config_err)?;
    let mut runs: Vec<(usize, PartialIdentityRun)> = Vec::new();
    for &lambda in &config.lambdas {
        let cfg = IdentityConfig {
            theta: theta.clone(),
            lambda,
            h_list: hs.clone(),
            eps0: config.eps0,
            c0: config.c0.unwrap_or(1.0),
        };
        runs.push((0, partial_identity_run(&d, &q1, &q2, &cfg, &patch, collar)?));
    }
    io::write_reflection_csv(&out.join("reflection.csv"), &runs, config.tolerances.limit)?;
    let first = &runs[0].1;
    let reflected_abs: Vec<f64> = first.reflected_term.iter().map(|t| t.norm()).collect();
    let reflected_monotone = reflected_abs.windows(2).all(|w| w[1] < w[0] || w[0] == 0.0);
    let max_trace = runs
        .iter()
        .flat_map(|(_, r)| r.trace_residual.iter().cloned())
        .fold(0.0, f64::max);
    let pass = refl.damping_constant > 0.0 && max_trace <= config.tolerances.trace && reflected_monotone;
    io::write_json(
        &out.join("reflection.json"),
        &ReflectSummary {
            damping_constant: refl.damping_constant,
            damping_floor: refl.damping_floor,
            max_trace_residual: max_trace,
            reflected_abs,
            reflected_monotone,
            lhs_order: first.run.lhs_order,
            pass,
        },
    )?;
    check(pass, || "damping, trace or reflected-term decay check failed".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    fn args(cmd: &str, config: &Path, out: &Path) -> Vec<String> {
        vec![
            "calderon-lab".into(),
            cmd.into(),
            "--config".into(),
            config.display().to_string(),
            "--out".into(),
            out.display().to_string(),
        ]
    }

    #[test]
    fn malformed_json_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let c = write(dir.path(), "c.json", "{ not json");
        assert_eq!(main_with(args("weight-check", &c, &dir.path().join("o"))), 2);
    }

    #[test]
    fn unknown_command_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let c = write(dir.path(), "c.json", "{}");
        assert_eq!(main_with(args("frobnicate", &c, dir.path())), 2);
    }

    #[test]
    fn mismatched_command_field_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let c = write(
            dir.path(),
            "c.json",
            r#"{"command": "dn-map", "domain": {"dim": 2, "bounds": [[0,1],[0,1]], "points_per_axis": 5}}"#,
        );
        assert_eq!(main_with(args("weight-check", &c, &dir.path().join("o"))), 2);
    }

    #[test]
    fn weight_check_passes_for_log_and_flags_quadratic() {
        let dir = tempfile::tempdir().unwrap();
        let base = r#""domain": {"dim": 3, "bounds": [[0,1],[0,1],[0,1]], "points_per_axis": 5}, "samples": 500"#;
        let log = write(dir.path(), "log.json", &format!(r#"{{{base}, "weight": {{"kind": "log", "center": [-1, 0.5, 0.5]}}}}"#));
        let out = dir.path().join("log");
        assert_eq!(main_with(args("weight-check", &log, &out)), 0);
        let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("weight_check.json")).unwrap()).unwrap();
        assert_eq!(report["pass"], true);
        let quad = write(
            dir.path(),
            "quad.json",
            r#"{"domain": {"dim": 3, "bounds": [[0.5,1.5],[0.5,1.5],[0.5,1.5]], "points_per_axis": 5}, "samples": 500,
                "weight": {"kind": "quadratic", "dim": 3}, "expect_pass": true}"#,
        );
        assert_eq!(main_with(args("weight-check", &quad, &dir.path().join("quad"))), 1);
    }

    #[test]
    fn identity_run_with_equal_potentials_passes() {
        let dir = tempfile::tempdir().unwrap();
        let c = write(
            dir.path(),
            "c.json",
            r#"{
                "domain": {"dim": 3, "bounds": [[0,1],[0,1],[0,1]], "points_per_axis": 7},
                "theta": {"center": [-1, 0.5, 0.5], "y": [0, 1, 0], "nu": [0.6, 0, 0.8]},
                "h_list": [0.4, 0.2],
                "q1": {"type": "ball_bump", "center": [0.5, 0.5, 0.5], "radius": 0.3, "height": 2},
                "q2": {"type": "ball_bump", "center": [0.5, 0.5, 0.5], "radius": 0.3, "height": 2}
            }"#,
        );
        let out = dir.path().join("o");
        assert_eq!(main_with(args("identity-run", &c, &out)), 0);
        let text = std::fs::read_to_string(out.join("identity.csv")).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(out.join("manifest.json").exists());
    }

    #[test]
    fn missing_field_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let c = write(
            dir.path(),
            "c.json",
            r#"{"domain": {"dim": 3, "bounds": [[0,1],[0,1],[0,1]], "points_per_axis": 5}}"#,
        );
        assert_eq!(main_with(args("carleman-sweep", &c, &dir.path().join("o"))), 2);
    }
}
