//! The `dynheat` command line: kernel evaluation, verification suites and
//! the Fujita sweep.
//!
//! Every output starts with the crate version and a SHA-256 hash of the
//! resolved arguments. Exit codes: `0` pass, `1` assertion failure,
//! `2` inconclusive, `64` usage.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::bounds::{baseline, classify, envelope_lower, envelope_upper, sandwich_scan, scan_spec, QuerySampler};
use crate::error::{Error, Result};
use crate::kernel::{
    fundamental_solution, fundamental_solution_at, gamma_difference, h_correction, h_correction_zform, HalfSpacePoint,
    ReducedKernelQuery,
};
use crate::quadrature::{erf, erfc, integrate_with_breaks, QuadratureSpec};
use crate::semigroup::{
    apply, compose_check, contractivity_rows, decay_suite, lower_gaussian_scan, operator_norm_fit, operator_norm_rates,
    random_compact_field, GridSpec, PairedField, LOWER_GAUSSIAN_BASELINES, LOWER_GAUSSIAN_SLACK,
};
use crate::semilinear::{fujita_sweep, Classification, EvolutionTrace, FujitaTemplate};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_INCONCLUSIVE: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

/// Overrides the rayon thread count.
pub const THREADS_ENV: &str = "DYNHEAT_THREADS";

#[derive(Debug, Parser, Serialize)]
#[command(
    name = "dynheat",
    version,
    about = "Half-space heat kernel with a dynamical boundary condition"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum Command {
    /// Kernel evaluation.
    #[command(subcommand)]
    Kernel(KernelCommand),
    /// Run one verification suite and print a JSON report.
    Verify(VerifyArgs),
    /// Sweep the semilinear problem over (p, δ) and print the dichotomy table.
    Fujita(FujitaArgs),
}

#[derive(Debug, Subcommand, Serialize)]
pub enum KernelCommand {
    /// Evaluate G, both forms of H and the envelopes at one query or a CSV batch.
    Eval(KernelEvalArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct KernelEvalArgs {
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub dim: u8,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub rho: f64,
    #[arg(long, allow_negative_numbers = true)]
    pub a: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub b: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub t: Option<f64>,
    /// CSV with columns dim,rho,a,b,t; replaces the single-query flags.
    #[arg(long, conflicts_with_all = ["a", "b", "t"])]
    pub input: Option<PathBuf>,
    /// Add |H_direct − H_zform| and the summed error budget.
    #[arg(long)]
    pub cross_check: bool,
    #[arg(long, default_value_t = 1e-10)]
    pub rel_tol: f64,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Mass,
    Symmetry,
    PdeResidual,
    BoundaryResidual,
    Sandwich,
    Compose,
    Decay,
    Contractivity,
    LowerGaussian,
    OperatorNorm,
}

#[derive(Debug, Args, Serialize)]
pub struct VerifyArgs {
    pub suite: Suite,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub dim: u8,
    /// Random draws for sampling suites.
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Input exponent for decay and operator-norm suites.
    #[arg(long, default_value = "1", value_parser = parse_exponent)]
    #[serde(serialize_with = "serialize_exponent")]
    pub q: f64,
    /// Output exponent for decay and operator-norm suites.
    #[arg(long, default_value = "inf", value_parser = parse_exponent)]
    #[serde(serialize_with = "serialize_exponent")]
    pub r: f64,
    /// Grid spacing for grid-based suites.
    #[arg(long, default_value_t = 0.01)]
    pub h: f64,
    /// Grid truncation `L` for grid-based suites.
    #[arg(long, default_value_t = 40.0)]
    pub truncation: f64,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct FujitaArgs {
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub dim: u8,
    #[arg(long = "p", value_delimiter = ',', required = true, num_args = 1..)]
    pub p: Vec<f64>,
    #[arg(long = "delta", value_delimiter = ',', required = true, num_args = 1..)]
    pub delta: Vec<f64>,
    #[arg(long, default_value_t = 1e3)]
    pub t_max: f64,
    /// Coarsest grid spacing; the ladder halves it.
    #[arg(long, default_value_t = 0.2)]
    pub spacing: f64,
    #[arg(long, default_value_t = 3)]
    pub ladder: usize,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    /// Directory for per-cell time-series CSVs.
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
}

fn parse_exponent(s: &str) -> std::result::Result<f64, String> {
    let v = match s {
        "inf" | "infinity" | "∞" => f64::INFINITY,
        _ => s.parse::<f64>().map_err(|e| e.to_string())?,
    };
    if v >= 1.0 {
        Ok(v)
    } else {
        Err(format!("exponent must be >= 1 or inf, got {s}"))
    }
}

fn serialize_exponent<S: serde::Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

/// Version plus the SHA-256 of the resolved arguments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub version: String,
    pub config_hash: String,
    pub config: Value,
}

impl RunHeader {
    pub fn new<T: Serialize>(config: &T) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        let digest = Sha256::digest(serde_json::to_vec(&config)?);
        Ok(RunHeader {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: digest.iter().map(|b| format!("{b:02x}")).collect(),
            config,
        })
    }

    fn write_csv_comment(&self, out: &mut dyn Write) -> io::Result<()> {
        writeln!(out, "# dynheat {} config {}", self.version, self.config_hash)?;
        writeln!(out, "# {}", self.config)
    }
}

/// Parses `args` (including the program name) and runs the command,
/// writing to stdout and stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let stdout = io::stdout();
    let stderr = io::stderr();
    run_with(args, &mut stdout.lock(), &mut stderr.lock())
}

pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_PASS };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(text.as_bytes())
            } else {
                out.write_all(text.as_bytes())
            };
            return code;
        }
    };
    configure_threads();
    let result = match &cli.command {
        Command::Kernel(KernelCommand::Eval(a)) => cmd_kernel_eval(a, &cli, out),
        Command::Verify(a) => cmd_verify(a, &cli, out, err),
        Command::Fujita(a) => cmd_fujita(a, &cli, out, err),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            match e {
                Error::Io(_) | Error::Csv(_) | Error::Json(_) => EXIT_FAIL,
                _ => EXIT_USAGE,
            }
        }
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        // Fails only if the pool already exists, which keeps the first setting.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn with_output<F>(path: Option<&Path>, out: &mut dyn Write, body: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> Result<()>,
{
    match path {
        Some(p) => {
            let mut file = BufWriter::new(File::create(p)?);
            body(&mut file)?;
            file.flush()?;
            Ok(())
        }
        None => body(out),
    }
}

#[derive(Clone, Copy, Debug, Deserialize)]
struct QueryRecord {
    dim: usize,
    rho: f64,
    a: f64,
    b: f64,
    t: f64,
}

#[derive(Clone, Debug, Serialize)]
struct KernelRow {
    dim: usize,
    rho: f64,
    a: f64,
    b: f64,
    t: f64,
    g: f64,
    h_direct: f64,
    h_zform: f64,
    gamma_difference: f64,
    region: &'static str,
    envelope_upper: f64,
    envelope_lower: f64,
    err_direct: f64,
    err_zform: f64,
    converged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    cross_check_gap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cross_check_budget: Option<f64>,
}

fn kernel_row(q: &ReducedKernelQuery, spec: &QuadratureSpec, cross_check: bool) -> Result<KernelRow> {
    let g = fundamental_solution(q, spec)?;
    let d = h_correction(q, spec)?;
    let z = h_correction_zform(q, spec)?;
    let gap = (d.value - z.value).abs();
    let budget = d.quadrature_error + z.quadrature_error;
    Ok(KernelRow {
        dim: q.dim,
        rho: q.rho,
        a: q.a,
        b: q.b,
        t: q.t,
        g: g.value,
        h_direct: d.value,
        h_zform: z.value,
        gamma_difference: gamma_difference(q),
        region: classify(q).name(),
        envelope_upper: envelope_upper(q),
        envelope_lower: envelope_lower(q),
        err_direct: d.quadrature_error,
        err_zform: z.quadrature_error,
        converged: g.converged && d.converged && z.converged,
        cross_check_gap: cross_check.then_some(gap),
        cross_check_budget: cross_check.then_some(budget),
    })
}

fn read_queries(path: &Path) -> Result<Vec<ReducedKernelQuery>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)?;
    reader
        .deserialize::<QueryRecord>()
        .enumerate()
        .map(|(line, rec)| {
            let r = rec?;
            if !(1..=3).contains(&r.dim) {
                return Err(Error::Domain(format!(
                    "row {}: dim must be 1, 2 or 3, got {}",
                    line + 1,
                    r.dim
                )));
            }
            ReducedKernelQuery::new(r.dim, r.rho, r.a, r.b, r.t)
                .map_err(|e| Error::Domain(format!("row {}: {e}", line + 1)))
        })
        .collect()
}

pub fn cmd_kernel_eval(args: &KernelEvalArgs, cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    let spec = QuadratureSpec::relative(args.rel_tol);
    spec.validate()?;
    let queries = match &args.input {
        Some(path) => read_queries(path)?,
        None => {
            let need = |v: Option<f64>, name: &str| {
                v.ok_or_else(|| Error::Domain(format!("--{name} is required without --input")))
            };
            vec![ReducedKernelQuery::new(
                args.dim as usize,
                args.rho,
                need(args.a, "a")?,
                need(args.b, "b")?,
                need(args.t, "t")?,
            )?]
        }
    };
    let rows: Vec<KernelRow> = queries
        .par_iter()
        .map(|q| kernel_row(q, &spec, args.cross_check))
        .collect::<Result<_>>()?;
    let header = RunHeader::new(cli)?;
    with_output(args.output.as_deref(), out, |w| {
        header.write_csv_comment(w)?;
        let mut csv = csv::Writer::from_writer(w);
        for row in &rows {
            csv.serialize(row)?;
        }
        csv.flush()?;
        Ok(())
    })?;
    let failed = args.cross_check && rows.iter().any(|r| r.cross_check_gap > r.cross_check_budget);
    Ok(if failed { EXIT_FAIL } else { EXIT_PASS })
}

/// One checked quantity of a suite.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Assertion {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub passed: bool,
    /// The worst offending input, when there is one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub at: Option<Value>,
}

impl Assertion {
    fn at_most(name: impl Into<String>, value: f64, limit: f64, at: Option<Value>) -> Self {
        Assertion {
            name: name.into(),
            value,
            limit,
            passed: value <= limit,
            at,
        }
    }

    fn at_least(name: impl Into<String>, value: f64, limit: f64, at: Option<Value>) -> Self {
        Assertion {
            name: name.into(),
            value,
            limit,
            passed: value >= limit,
            at,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    #[serde(flatten)]
    pub header: RunHeader,
    pub suite: Suite,
    pub dim: usize,
    pub passed: bool,
    pub assertions: Vec<Assertion>,
    pub details: Value,
}

fn tight() -> QuadratureSpec {
    QuadratureSpec {
        abs_tol: 1e-13,
        rel_tol: 1e-12,
        ..QuadratureSpec::default()
    }
}

fn require_dim1(dim: usize, suite: &str) -> Result<()> {
    if dim == 1 {
        Ok(())
    } else {
        Err(Error::Unsupported(format!(
            "the {suite} suite runs on the half-line (--dim 1)"
        )))
    }
}

/// `∫_0^∞ f` for an integrand of width `√t` near `b`.
fn half_line(f: impl FnMut(f64) -> f64, b: f64, t: f64, spec: &QuadratureSpec) -> Result<f64> {
    let w = t.sqrt();
    let mut breaks = vec![0.0];
    for k in [-4.0, -1.0, 0.0, 1.0, 4.0] {
        let x = b + k * w;
        if x > breaks[breaks.len() - 1] {
            breaks.push(x);
        }
    }
    breaks.push(b + 40.0 * w);
    Ok(integrate_with_breaks(f, &breaks, spec)?.value)
}

type SuiteResult = Result<(Vec<Assertion>, Value)>;

fn suite_mass(dim: usize) -> SuiteResult {
    require_dim1(dim, "mass")?;
    let s = tight();
    let g = |x: f64, y: f64, t: f64| -> Result<f64> {
        Ok(fundamental_solution(&ReducedKernelQuery::new(1, 0.0, x, y, t)?, &s)?.value)
    };
    let (mut total, mut split) = ((0.0f64, Value::Null), (0.0f64, Value::Null));
    for y in [0.0, 0.5, 2.0] {
        for t in [0.1, 1.0, 10.0] {
            let mut failure = None;
            let interior = half_line(
                |x| {
                    g(x, y, t).unwrap_or_else(|e| {
                        failure.get_or_insert(e);
                        0.0
                    })
                },
                y,
                t,
                &s,
            )?;
            if let Some(e) = failure {
                return Err(e);
            }
            let boundary = g(0.0, y, t)?;
            let d = (interior + boundary - 1.0).abs();
            if d >= total.0 {
                total = (d, json!({"y": y, "t": t}));
            }
            let arg = y / (2.0 * t.sqrt());
            let dipole = half_line(
                |x| {
                    gamma_difference(&ReducedKernelQuery {
                        dim: 1,
                        rho: 0.0,
                        a: x,
                        b: y,
                        t,
                    })
                },
                y,
                t,
                &s,
            )?;
            let d = (dipole - erf(arg))
                .abs()
                .max((interior - dipole + boundary - erfc(arg)).abs());
            if d >= split.0 {
                split = (d, json!({"y": y, "t": t}));
            }
        }
    }
    Ok((
        vec![
            Assertion::at_most("total mass defect", total.0, 1e-8, Some(total.1)),
            Assertion::at_most("erf/erfc split defect", split.0, 1e-8, Some(split.1)),
        ],
        Value::Null,
    ))
}

fn random_point(dim: usize, rng: &mut ChaCha8Rng) -> Result<HalfSpacePoint> {
    let tangential = (0..dim - 1).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let height = if rng.gen_bool(0.1) {
        0.0
    } else {
        rng.gen_range(0.0..3.0)
    };
    HalfSpacePoint::new(tangential, height)
}

fn suite_symmetry(dim: usize, samples: usize, seed: u64) -> SuiteResult {
    let s = QuadratureSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = (0.0f64, None);
    for _ in 0..samples {
        let x = random_point(dim, &mut rng)?;
        let y = random_point(dim, &mut rng)?;
        let t = 10f64.powf(rng.gen_range(-2.0..2.0));
        let q = ReducedKernelQuery::from_points(&x, &y, t)?;
        let reduced = fundamental_solution(&q, &s)?.value - fundamental_solution(&q.swapped(), &s)?.value;
        let full = fundamental_solution_at(&x, &y, t, &s)?.value - fundamental_solution_at(&y, &x, t, &s)?.value;
        let d = reduced.abs().max(full.abs());
        if d > worst.0 || worst.1.is_none() {
            worst = (d, Some(json!({"x": x, "y": y, "t": t})));
        }
    }
    Ok((
        vec![Assertion::at_most("symmetry defect", worst.0, 0.0, worst.1)],
        json!({"pairs": samples}),
    ))
}

const FD_STEP: f64 = 1e-3;
const RESIDUAL_LIMIT: f64 = 1e-3;

fn residual_probes(dim: usize) -> Vec<(f64, f64, f64, f64)> {
    let rho = if dim == 1 { 0.0 } else { 0.5 };
    let mut out = Vec::new();
    for a in [0.0, 1.0] {
        for b in [0.0, 0.5] {
            for t in [0.5, 1.0, 2.0] {
                out.push((rho, a, b, t));
            }
        }
    }
    out
}

/// `∂_t G − Δ_x G` at interior probes and `∂_t G − ∂_{x_N} G` on the boundary.
fn residuals(dim: usize, boundary: bool) -> Result<(f64, Value)> {
    let s = tight();
    let e = FD_STEP;
    let g = |rho: f64, a: f64, b: f64, t: f64| -> Result<f64> {
        Ok(fundamental_solution(&ReducedKernelQuery::new(dim, rho, a, b, t)?, &s)?.value)
    };
    let mut worst = (0.0f64, Value::Null);
    for (rho, a, b, t) in residual_probes(dim) {
        if boundary && a != 0.0 {
            continue;
        }
        let gt = (g(rho, a, b, t + e)? - g(rho, a, b, t - e)?) / (2.0 * e);
        let r = if boundary {
            let ga = (-3.0 * g(rho, 0.0, b, t)? + 4.0 * g(rho, e, b, t)? - g(rho, 2.0 * e, b, t)?) / (2.0 * e);
            gt - ga
        } else {
            let gaa = if a == 0.0 {
                (2.0 * g(rho, 0.0, b, t)? - 5.0 * g(rho, e, b, t)? + 4.0 * g(rho, 2.0 * e, b, t)?
                    - g(rho, 3.0 * e, b, t)?)
                    / (e * e)
            } else {
                (g(rho, a + e, b, t)? - 2.0 * g(rho, a, b, t)? + g(rho, a - e, b, t)?) / (e * e)
            };
            let tangential = if dim == 1 {
                0.0
            } else {
                let (gp, g0, gm) = (g(rho + e, a, b, t)?, g(rho, a, b, t)?, g(rho - e, a, b, t)?);
                (gp - 2.0 * g0 + gm) / (e * e) + (dim as f64 - 2.0) / rho * (gp - gm) / (2.0 * e)
            };
            gt - gaa - tangential
        };
        if r.abs() >= worst.0 {
            worst = (r.abs(), json!({"rho": rho, "a": a, "b": b, "t": t}));
        }
    }
    Ok(worst)
}

fn suite_residual(dim: usize, boundary: bool) -> SuiteResult {
    let (value, at) = residuals(dim, boundary)?;
    let name = if boundary { "boundary residual" } else { "PDE residual" };
    Ok((
        vec![Assertion::at_most(name, value, RESIDUAL_LIMIT, Some(at))],
        json!({"fd_step": FD_STEP}),
    ))
}

const SANDWICH_SLACK: f64 = 1.1;

fn suite_sandwich(dim: usize, samples: usize, seed: u64) -> SuiteResult {
    let report = sandwich_scan(&QuerySampler::standard(dim), samples, seed, &scan_spec())?;
    let b = baseline(dim).ok_or_else(|| Error::Unsupported(format!("no sandwich baseline for dim {dim}")))?;
    Ok((
        vec![
            Assertion::at_most(
                "max H/H_upper",
                report.max_upper_ratio,
                SANDWICH_SLACK * b.max_upper_ratio,
                Some(serde_json::to_value(report.worst_query_upper)?),
            ),
            Assertion::at_least(
                "min H/H_lower",
                report.min_lower_ratio,
                b.min_lower_ratio / SANDWICH_SLACK,
                Some(serde_json::to_value(report.worst_query_lower)?),
            ),
            Assertion::at_most("unconverged queries", report.skipped as f64, 0.0, None),
        ],
        serde_json::to_value(&report)?,
    ))
}

fn suite_compose(dim: usize, h: f64, truncation: f64) -> SuiteResult {
    require_dim1(dim, "compose")?;
    let grid = GridSpec::new(1, truncation, h)?;
    let spec = QuadratureSpec::relative(1e-13);
    let x = HalfSpacePoint::on_axis(1, 1.0)?;
    let y = HalfSpacePoint::on_axis(1, 0.0)?;
    let coarse = compose_check(0.5, 0.5, &y, &x, &grid, &spec)?;
    let fine = compose_check(0.5, 0.5, &y, &x, &grid.refined()?, &spec)?;
    Ok((
        vec![
            Assertion::at_most("composition defect", coarse.defect, 1e-4, None),
            Assertion::at_least(
                "defect reduction under h -> h/2",
                coarse.defect / fine.defect,
                3.0,
                None,
            ),
        ],
        json!({"coarse": coarse, "fine": fine}),
    ))
}

fn suite_fields(grid: &GridSpec, seed: u64, count: usize) -> Vec<PairedField> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| random_compact_field(grid, 5.0, false, &mut rng))
        .collect()
}

fn suite_decay(args: &VerifyArgs) -> SuiteResult {
    require_dim1(args.dim as usize, "decay")?;
    let grid = GridSpec::new(1, args.truncation, args.h)?;
    let spec = QuadratureSpec::default();
    let mut worst = (0.0f64, 0.0f64);
    let mut tables = Vec::new();
    for phi in suite_fields(&grid, args.seed, 5) {
        let table = decay_suite(&phi, args.q, args.r, &[0.1, 1.0, 10.0], &grid, &spec)?;
        let baseline = table
            .baseline
            .ok_or_else(|| Error::Unsupported(format!("no committed decay constant for q={}, r={}", args.q, args.r)))?;
        if table.max_ratio >= worst.0 {
            worst = (table.max_ratio, baseline);
        }
        tables.push(table);
    }
    Ok((
        vec![Assertion::at_most(
            "max norm/envelope",
            worst.0,
            worst.1 * crate::semigroup::DECAY_SLACK,
            None,
        )],
        serde_json::to_value(&tables)?,
    ))
}

fn suite_contractivity(args: &VerifyArgs) -> SuiteResult {
    require_dim1(args.dim as usize, "contractivity")?;
    let grid = GridSpec::new(1, args.truncation, args.h)?;
    let spec = QuadratureSpec::default();
    let qs = [1.0, 2.0, f64::INFINITY];
    let times = [0.1, 1.0, 10.0];
    let mut worst = [(0.0f64, Value::Null), (0.0, Value::Null), (0.0, Value::Null)];
    let mut product = 0.0f64;
    let mut max_norm = 0.0f64;
    let product_norm = |f: &PairedField| (f.interior_norm(&grid, 2.0).powi(2) + f.boundary_norm(2.0).powi(2)).sqrt();
    for (k, phi) in suite_fields(&grid, args.seed, 20).iter().enumerate() {
        for row in contractivity_rows(phi, &qs, &times, &grid, &spec)? {
            let i = qs.iter().position(|q| *q == row.q).expect("q from the list");
            if row.ratio >= worst[i].0 {
                worst[i] = (row.ratio, json!({"field": k, "t": row.t}));
            }
        }
        for t in times {
            let out = apply(t, phi, &grid, &spec)?.field;
            product = product.max(product_norm(&out) / product_norm(phi));
            max_norm = max_norm.max(out.sup() / phi.sup());
        }
    }
    let limit = 1.0 + 1e-6;
    let mut assertions: Vec<Assertion> = qs
        .iter()
        .zip(worst)
        .map(|(q, (v, at))| Assertion::at_most(format!("sum norm ratio q={q}"), v, limit, Some(at)))
        .collect();
    assertions.push(Assertion::at_most("product L2 norm ratio", product, limit, None));
    assertions.push(Assertion::at_most("max norm ratio", max_norm, limit, None));
    Ok((assertions, json!({"fields": 20, "times": times})))
}

fn suite_lower_gaussian(dim: usize, samples: usize, seed: u64) -> SuiteResult {
    let (c, q) = lower_gaussian_scan(dim, samples, seed, &QuadratureSpec::relative(1e-9))?;
    let limit = LOWER_GAUSSIAN_BASELINES[dim - 1] / LOWER_GAUSSIAN_SLACK;
    Ok((
        vec![Assertion::at_least(
            "min G / lower Gaussian",
            c,
            limit,
            Some(serde_json::to_value(q)?),
        )],
        json!({"baseline": LOWER_GAUSSIAN_BASELINES[dim - 1], "slack": LOWER_GAUSSIAN_SLACK}),
    ))
}

fn suite_operator_norm(args: &VerifyArgs) -> SuiteResult {
    let dim = args.dim as usize;
    let spec = QuadratureSpec::relative(1e-9);
    let times: Vec<f64> = (0..=8)
        .map(|k| 10f64.powf(-3.0 + 0.25 * k as f64))
        .chain((0..=8).map(|k| 10f64.powf(1.0 + 0.25 * k as f64)))
        .collect();
    let fit = operator_norm_fit(dim, args.q, args.r, &times, &spec)?;
    let (small, large) = operator_norm_rates(dim, args.q, args.r);
    let tol = if args.q == args.r { 0.05 } else { 0.1 };
    Ok((
        vec![
            Assertion::at_most(
                "small-t slope deviation",
                (fit.small_t_slope - small).abs(),
                tol,
                Some(json!({"expected": small, "fitted": fit.small_t_slope})),
            ),
            Assertion::at_most(
                "large-t slope deviation",
                (fit.large_t_slope - large).abs(),
                tol,
                Some(json!({"expected": large, "fitted": fit.large_t_slope})),
            ),
        ],
        serde_json::to_value(&fit)?,
    ))
}

pub fn cmd_verify(args: &VerifyArgs, cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let dim = args.dim as usize;
    if args.samples == 0 {
        return Err(Error::Domain("--samples must be >= 1".into()));
    }
    let (assertions, details) = match args.suite {
        Suite::Mass => suite_mass(dim)?,
        Suite::Symmetry => suite_symmetry(dim, args.samples, args.seed)?,
        Suite::PdeResidual => suite_residual(dim, false)?,
        Suite::BoundaryResidual => suite_residual(dim, true)?,
        Suite::Sandwich => suite_sandwich(dim, args.samples, args.seed)?,
        Suite::Compose => suite_compose(dim, args.h, args.truncation)?,
        Suite::Decay => suite_decay(args)?,
        Suite::Contractivity => suite_contractivity(args)?,
        Suite::LowerGaussian => suite_lower_gaussian(dim, args.samples, args.seed)?,
        Suite::OperatorNorm => suite_operator_norm(args)?,
    };
    let passed = assertions.iter().all(|a| a.passed);
    let report = SuiteReport {
        header: RunHeader::new(cli)?,
        suite: args.suite,
        dim,
        passed,
        assertions,
        details,
    };
    with_output(args.output.as_deref(), out, |w| {
        serde_json::to_writer_pretty(&mut *w, &report)?;
        writeln!(w)?;
        Ok(())
    })?;
    if let Some(worst) = report.assertions.iter().find(|a| !a.passed) {
        writeln!(
            err,
            "failed: {} = {:e} (limit {:e}) at {}",
            worst.name,
            worst.value,
            worst.limit,
            worst.at.clone().unwrap_or(Value::Null)
        )?;
    }
    Ok(if passed { EXIT_PASS } else { EXIT_FAIL })
}

#[derive(Serialize)]
struct DichotomyRow {
    p: f64,
    delta: f64,
    outcome: Classification,
    t_event: Option<f64>,
    certificate_n: Option<u32>,
    t_max: f64,
    ladder_invariant: bool,
    ball_ratio: f64,
    calibrated_delta: Option<f64>,
}

#[derive(Serialize)]
struct TraceRow {
    t: f64,
    sup: f64,
    l1: f64,
    weighted_sup: f64,
    x_norm: f64,
}

fn write_trace(path: &Path, header: &RunHeader, trace: &EvolutionTrace) -> Result<()> {
    let mut file = BufWriter::new(File::create(path)?);
    header.write_csv_comment(&mut file)?;
    let mut csv = csv::Writer::from_writer(file);
    for k in 0..trace.times.len() {
        csv.serialize(TraceRow {
            t: trace.times[k],
            sup: trace.sup_norms[k],
            l1: trace.l1_norms[k],
            weighted_sup: trace.weighted_sup[k],
            x_norm: trace.x_norm[k],
        })?;
    }
    csv.flush()?;
    Ok(())
}

pub fn cmd_fujita(args: &FujitaArgs, cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    if args.p.is_empty() || args.delta.is_empty() {
        return Err(Error::Domain("--p and --delta need at least one value".into()));
    }
    let template = FujitaTemplate {
        dim: args.dim as usize,
        t_max: args.t_max,
        spacing: args.spacing,
        ladder: args.ladder,
        ..FujitaTemplate::canonical()
    };
    let (table, traces) = fujita_sweep(&args.p, &args.delta, &template)?;
    let header = RunHeader::new(cli)?;
    with_output(args.output.as_deref(), out, |w| {
        header.write_csv_comment(w)?;
        let mut csv = csv::Writer::from_writer(w);
        for c in &table.cells {
            csv.serialize(DichotomyRow {
                p: c.p,
                delta: c.delta,
                outcome: c.classification,
                t_event: c.t_event,
                certificate_n: c.certificate_n,
                t_max: c.t_max,
                ladder_invariant: c.ladder_invariant,
                ball_ratio: c.ladder[0].ball_ratio,
                calibrated_delta: c.calibrated_delta,
            })?;
        }
        csv.flush()?;
        Ok(())
    })?;
    if let Some(dir) = &args.trace_out {
        fs::create_dir_all(dir)?;
        for (c, trace) in table.cells.iter().zip(&traces) {
            write_trace(
                &dir.join(format!("trace_p{}_delta{:e}.csv", c.p, c.delta)),
                &header,
                trace,
            )?;
        }
    }
    if table.pattern_holds {
        return Ok(EXIT_PASS);
    }
    if !table.inconclusive.is_empty() {
        let cells: Vec<String> = table
            .inconclusive
            .iter()
            .map(|(p, d)| format!("(p={p}, delta={d:e})"))
            .collect();
        writeln!(err, "inconclusive cells: {}", cells.join(", "))?;
        return Ok(EXIT_INCONCLUSIVE);
    }
    writeln!(err, "the blow-up/global pattern does not hold")?;
    Ok(EXIT_FAIL)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run_with(
            std::iter::once("dynheat").chain(args.iter().copied()),
            &mut out,
            &mut err,
        );
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    fn data_lines(s: &str) -> Vec<&str> {
        s.lines().filter(|l| !l.starts_with('#')).collect()
    }

    #[test]
    fn kernel_eval_single_query() {
        let (code, out, _) = run_capture(&[
            "kernel", "eval", "--dim", "1", "--rho", "0", "--a", "0", "--b", "0", "--t", "1",
        ]);
        assert_eq!(code, EXIT_PASS);
        assert!(out.starts_with(&format!("# dynheat {} config ", env!("CARGO_PKG_VERSION"))));
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(out.as_bytes());
        let headers = reader.headers().unwrap().clone();
        let row = reader.records().next().unwrap().unwrap();
        let get = |k: &str| {
            row.get(headers.iter().position(|h| h == k).unwrap())
                .unwrap()
                .to_string()
        };
        let g: f64 = get("g").parse().unwrap();
        let h: f64 = get("h_direct").parse().unwrap();
        assert_eq!(g, h);
        assert_eq!(get("region"), "D1");
        assert_eq!(get("envelope_upper").parse::<f64>().unwrap(), 1.0);
        assert_eq!(get("envelope_lower").parse::<f64>().unwrap(), 1.0);
    }

    #[test]
    fn kernel_eval_rejects_invalid_queries() {
        let (code, _, err) = run_capture(&["kernel", "eval", "--a", "-1", "--b", "0", "--t", "1"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("a must be finite and >= 0"), "{err}");
        let (code, _, err) = run_capture(&["kernel", "eval", "--a", "1", "--b", "0"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("--t"), "{err}");
    }

    #[test]
    fn kernel_eval_batch_preserves_order() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("queries.csv");
        let output = dir.path().join("out.csv");
        let queries = QuerySampler::standard(2).draw(1000, 11);
        let mut w = csv::Writer::from_path(&input).unwrap();
        w.write_record(["dim", "rho", "a", "b", "t"]).unwrap();
        for q in &queries {
            w.serialize((q.dim, q.rho, q.a, q.b, q.t)).unwrap();
        }
        w.flush().unwrap();
        let (code, _, err) = run_capture(&[
            "kernel",
            "eval",
            "--input",
            input.to_str().unwrap(),
            "--cross-check",
            "--output",
            output.to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_PASS, "{err}");
        let text = fs::read_to_string(&output).unwrap();
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let headers = reader.headers().unwrap().clone();
        let col = |k: &str| headers.iter().position(|h| h == k).unwrap();
        let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 1000);
        for (row, q) in rows.iter().zip(&queries) {
            assert_eq!(row[col("t")].parse::<f64>().unwrap(), q.t);
            assert_eq!(row[col("a")].parse::<f64>().unwrap(), q.a);
            let gap: f64 = row[col("cross_check_gap")].parse().unwrap();
            let budget: f64 = row[col("cross_check_budget")].parse().unwrap();
            assert!(gap <= budget);
        }
    }

    #[test]
    fn outputs_are_deterministic_and_hashed() {
        let args = ["verify", "symmetry", "--dim", "2", "--samples", "50", "--seed", "9"];
        let (c1, a, _) = run_capture(&args);
        let (c2, b, _) = run_capture(&args);
        assert_eq!((c1, c2), (EXIT_PASS, EXIT_PASS));
        assert_eq!(a, b);
        let report: Value = serde_json::from_str(&a).unwrap();
        assert_eq!(report["config_hash"].as_str().unwrap().len(), 64);
        assert_eq!(report["config"]["command"]["Verify"]["seed"], 9);
        let (_, other, _) = run_capture(&["verify", "symmetry", "--dim", "2", "--samples", "50", "--seed", "10"]);
        let other: Value = serde_json::from_str(&other).unwrap();
        assert_ne!(report["config_hash"], other["config_hash"]);
    }

    #[test]
    fn verify_suites_pass() {
        for args in [
            vec!["verify", "mass", "--dim", "1"],
            vec!["verify", "pde-residual", "--dim", "1"],
            vec!["verify", "boundary-residual", "--dim", "2"],
            vec!["verify", "pde-residual", "--dim", "3"],
            vec!["verify", "sandwich", "--dim", "1", "--samples", "200"],
            vec!["verify", "lower-gaussian", "--dim", "1", "--samples", "200"],
            vec!["verify", "decay", "--q", "1", "--r", "inf"],
        ] {
            let (code, out, err) = run_capture(&args);
            assert_eq!(code, EXIT_PASS, "{args:?}: {err}\n{out}");
            let report: Value = serde_json::from_str(&out).unwrap();
            assert_eq!(report["passed"], true);
        }
    }

    #[test]
    fn contractivity_reports_the_sum_norm_failure() {
        let (code, out, err) = run_capture(&["verify", "contractivity"]);
        assert_eq!(code, EXIT_FAIL);
        assert!(err.contains("sum norm ratio q=2"), "{err}");
        let report: Value = serde_json::from_str(&out).unwrap();
        let names: Vec<(&str, bool)> = report["assertions"]
            .as_array()
            .unwrap()
            .iter()
            .map(|a| (a["name"].as_str().unwrap(), a["passed"].as_bool().unwrap()))
            .collect();
        assert!(names.contains(&("sum norm ratio q=1", true)));
        assert!(names.contains(&("product L2 norm ratio", true)));
        assert!(names.contains(&("max norm ratio", true)));
    }

    #[test]
    fn grid_suites_need_the_half_line() {
        let (code, _, err) = run_capture(&["verify", "compose", "--dim", "2"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("--dim 1"), "{err}");
    }

    #[test]
    fn usage_errors() {
        assert_eq!(run_capture(&["fujita", "--delta", "1e-2"]).0, EXIT_USAGE);
        assert_eq!(run_capture(&["fujita", "--p", "", "--delta", "1e-2"]).0, EXIT_USAGE);
        assert_eq!(run_capture(&["verify", "nonsense"]).0, EXIT_USAGE);
        assert_eq!(run_capture(&["verify", "decay", "--q", "0.5"]).0, EXIT_USAGE);
        assert_eq!(
            run_capture(&["kernel", "eval", "--dim", "4", "--a", "0", "--b", "0", "--t", "1"]).0,
            EXIT_USAGE
        );
        assert_eq!(run_capture(&["--help"]).0, EXIT_PASS);
    }

    #[test]
    fn fujita_writes_table_and_traces() {
        let dir = tempfile::tempdir().unwrap();
        let traces = dir.path().join("traces");
        let (code, out, err) = run_capture(&[
            "fujita",
            "--dim",
            "1",
            "--p",
            "2,4",
            "--delta",
            "1e-2",
            "--t-max",
            "20",
            "--ladder",
            "1",
            "--trace-out",
            traces.to_str().unwrap(),
        ]);
        assert!(
            code == EXIT_FAIL || code == EXIT_INCONCLUSIVE || code == EXIT_PASS,
            "{err}"
        );
        let rows = data_lines(&out);
        assert_eq!(
            rows[0],
            "p,delta,outcome,t_event,certificate_n,t_max,ladder_invariant,ball_ratio,calibrated_delta"
        );
        assert_eq!(rows.len(), 3);
        assert!(rows[2].starts_with("4.0,0.01,global,"), "{}", rows[2]);
        let mut names: Vec<String> = fs::read_dir(&traces)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert_eq!(names, ["trace_p2_delta1e-2.csv", "trace_p4_delta1e-2.csv"]);
        let trace = fs::read_to_string(traces.join("trace_p4_delta1e-2.csv")).unwrap();
        assert!(trace.starts_with("# dynheat "));
        assert_eq!(data_lines(&trace)[0], "t,sup,l1,weighted_sup,x_norm");
    }

    #[test]
    fn fujita_blowup_row() {
        let (code, out, _) = run_capture(&["fujita", "--p", "2,4", "--delta", "2", "--t-max", "20", "--ladder", "2"]);
        let rows = data_lines(&out);
        assert!(rows[1].starts_with("2.0,2.0,blowup,"), "{}", rows[1]);
        assert!(rows[2].starts_with("4.0,2.0,inconclusive,"), "{}", rows[2]);
        assert_eq!(code, EXIT_INCONCLUSIVE);
    }
}
