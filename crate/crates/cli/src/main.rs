//! Command line front end: built-in example specs, ergodicity certificates,
//! trajectory sampling, pair couplings, and exact transport distances.
//!
//! All randomness flows from `--seed`; repeated invocations with the same
//! flags produce byte-identical artifacts regardless of `--jobs`.

// Parse gates are written `!(x > 0.0)` on purpose: NaN must be rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use switching::certify::run_all;
use switching::coupling::{
    couple_constant, couple_uniformized, couple_with_dominating, wasserstein_decay_curve,
    CoupleMode, CoupleOptions, CoupledRun,
};
use switching::model::{validate_spec, MetricSpec, RateModel, SwitchingSpec};
use switching::presets;
use switching::sim::{simulate_path, SeedSpec, SimOptions, Trajectory};
use switching::transport::{ot_exact, EmpiricalMeasure, OtRoute, TransportCost};

#[derive(Parser)]
#[command(
    name = "switching",
    version,
    about = "Simulation, coupling, and ergodicity certificates for Markov processes with random regime switching"
)]
struct Cli {
    /// Worker threads for Monte Carlo fan-out (default: all cores). Output
    /// bytes do not depend on this.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a built-in example spec as JSON.
    Example(ExampleCmd),
    /// Run every applicable ergodicity criterion and emit certificates.
    ///
    /// Exit code 0 when at least one certificate passes, 1 when none does,
    /// 2 on a malformed spec.
    Certify(CertifyCmd),
    /// Sample trajectories on a time grid (CSV: path,t,i,x_1..x_d).
    Simulate(SimulateCmd),
    /// Run coupled pairs: one annotated run (--paths 1) or a distance
    /// decay curve.
    Couple(CoupleCmd),
    /// Exact transport distance between two sample files
    /// (rows: i,x_1..x_d).
    Wasserstein(WassersteinCmd),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ExampleTag {
    /// Planar contraction toward two switching anchors.
    IntroPlane,
    /// Scalar two-regime dilation with rates a1, am1.
    Elementary,
    /// Three scalar dilations on a one-way ring.
    DilationChain,
    /// Two rotated spiral sinks under symmetric switching.
    Spiral,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Constant,
    Uniformized,
    Dominating,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CostArg {
    /// d(x, y)^q, regimes ignored.
    Power,
    /// 1 across regimes, min(d^q, 1) within one.
    TruncD,
    /// Reweighted contracting cost with scale delta.
    Tilde,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

/// Where the spec comes from, plus rate overrides applied after loading.
#[derive(Args)]
struct SpecSource {
    /// Spec file (JSON); alternatively use --example.
    #[arg(
        value_name = "SPEC",
        conflicts_with = "example",
        required_unless_present = "example"
    )]
    spec: Option<PathBuf>,
    /// Built-in example instead of a spec file.
    #[arg(long, value_enum)]
    example: Option<ExampleTag>,
    /// Jump rate out of the expanding regime (two-regime constant-rate
    /// specs).
    #[arg(long)]
    a1: Option<f64>,
    /// Jump rate out of the contracting regime.
    #[arg(long)]
    am1: Option<f64>,
    /// Set every positive jump rate to this value (constant-rate specs).
    #[arg(long)]
    rate: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    /// RNG seed; the only source of randomness.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Time horizon (ignored when --grid is given).
    #[arg(long = "T", default_value_t = 20.0)]
    t_end: f64,
    /// Sampling grid start:end:steps (default 0:T:200).
    #[arg(long)]
    grid: Option<String>,
    /// Event-rate override for the thinning kernel.
    #[arg(long)]
    r: Option<f64>,
    /// Output file (default: stdout).
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Args)]
struct ExampleCmd {
    #[arg(value_enum)]
    tag: ExampleTag,
    #[arg(long)]
    a1: Option<f64>,
    #[arg(long)]
    am1: Option<f64>,
    #[arg(long)]
    rate: Option<f64>,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct CertifyCmd {
    #[command(flatten)]
    source: SpecSource,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateCmd {
    #[command(flatten)]
    source: SpecSource,
    #[command(flatten)]
    run: RunArgs,
    /// Number of independent paths.
    #[arg(long, default_value_t = 1)]
    paths: usize,
    /// Initial state, comma-separated (default: all ones).
    #[arg(long, allow_hyphen_values = true)]
    x0: Option<String>,
    /// Initial regime.
    #[arg(long, default_value_t = 0)]
    i0: usize,
}

#[derive(Args)]
struct CoupleCmd {
    #[command(flatten)]
    source: SpecSource,
    #[command(flatten)]
    run: RunArgs,
    /// Coupling construction.
    #[arg(long, value_enum, default_value_t = ModeArg::Constant)]
    mode: ModeArg,
    /// Coupled pairs; 1 emits the annotated run, more emit the decay
    /// curve.
    #[arg(long, default_value_t = 1000)]
    paths: usize,
    /// Cost exponent (default: the spec metric's q).
    #[arg(long)]
    q: Option<f64>,
    /// Scale of the reweighted contracting cost.
    #[arg(long, default_value_t = 1.0)]
    delta: f64,
    /// First initial state, comma-separated (default: all ones).
    #[arg(long, allow_hyphen_values = true)]
    x0: Option<String>,
    /// Second initial state (default: negated x0).
    #[arg(long, allow_hyphen_values = true)]
    y0: Option<String>,
    /// First initial regime.
    #[arg(long, default_value_t = 0)]
    i0: usize,
    /// Second initial regime (default: the last regime).
    #[arg(long)]
    j0: Option<usize>,
    /// Initial level of the dominating chain.
    #[arg(long, default_value_t = 0)]
    l0: usize,
}

#[derive(Args)]
struct WassersteinCmd {
    /// First sample file (CSV rows: i,x_1..x_d).
    a: PathBuf,
    /// Second sample file.
    b: PathBuf,
    #[arg(long, value_enum, default_value_t = CostArg::TruncD)]
    cost: CostArg,
    /// Cost exponent in (0, 1].
    #[arg(long, default_value_t = 0.5)]
    q: f64,
    /// Scale of the reweighted contracting cost.
    #[arg(long, default_value_t = 1.0)]
    delta: f64,
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let outcome = match cli.cmd {
        Cmd::Example(c) => cmd_example(c),
        Cmd::Certify(c) => cmd_certify(c),
        Cmd::Simulate(c) => cmd_simulate(c),
        Cmd::Couple(c) => cmd_couple(c),
        Cmd::Wasserstein(c) => cmd_wasserstein(c),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn build_example(tag: ExampleTag) -> SwitchingSpec {
    match tag {
        ExampleTag::IntroPlane => presets::intro_plane(),
        ExampleTag::Elementary => presets::elementary(2.0, 1.0),
        ExampleTag::DilationChain => presets::dilation_chain(),
        ExampleTag::Spiral => presets::spiral(10.0),
    }
}

fn apply_overrides(
    spec: &mut SwitchingSpec,
    a1: Option<f64>,
    am1: Option<f64>,
    rate: Option<f64>,
) -> Result<()> {
    if a1.is_none() && am1.is_none() && rate.is_none() {
        return Ok(());
    }
    let RateModel::Constant { matrix } = &mut spec.rates else {
        bail!("rate overrides apply to constant-rate specs only");
    };
    if a1.is_some() || am1.is_some() {
        if matrix.nrows() != 2 {
            bail!("--a1/--am1 apply to two-regime specs only");
        }
        if let Some(v) = a1 {
            matrix[(1, 0)] = v;
        }
        if let Some(v) = am1 {
            matrix[(0, 1)] = v;
        }
    }
    if let Some(v) = rate {
        let n = matrix.nrows();
        for i in 0..n {
            for j in 0..n {
                if i != j && matrix[(i, j)] > 0.0 {
                    matrix[(i, j)] = v;
                }
            }
        }
    }
    Ok(())
}

/// Load and validate the requested spec. Errors here mean a malformed spec
/// (CLI exit code 2), not a runtime failure.
fn load_spec(source: &SpecSource) -> Result<SwitchingSpec> {
    let mut spec = match (&source.spec, source.example) {
        (Some(path), None) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            SwitchingSpec::from_json(&text)
                .with_context(|| format!("parsing {}", path.display()))?
                .0
        }
        (None, Some(tag)) => build_example(tag),
        _ => unreachable!("clap enforces exactly one spec source"),
    };
    apply_overrides(&mut spec, source.a1, source.am1, source.rate)?;
    validate_spec(&spec)?;
    Ok(spec)
}

fn write_output(path: Option<&Path>, content: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, content).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn parse_vector(text: &str, dim: usize, what: &str) -> Result<DVector<f64>> {
    let vals: Vec<f64> = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .with_context(|| format!("{what}: bad component {s:?}"))
        })
        .collect::<Result<_>>()?;
    if vals.len() != dim {
        bail!(
            "{what} has {} components, the spec has dimension {dim}",
            vals.len()
        );
    }
    Ok(DVector::from_vec(vals))
}

/// `start:end:steps` into `steps + 1` equally spaced times.
fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    let [start, end, steps] = parts.as_slice() else {
        bail!("grid must be start:end:steps, got {text:?}");
    };
    let start: f64 = start.trim().parse().context("grid start")?;
    let end: f64 = end.trim().parse().context("grid end")?;
    let steps: usize = steps.trim().parse().context("grid steps")?;
    if !(end > start) || start < 0.0 || steps == 0 {
        bail!("grid needs 0 <= start < end and at least one step");
    }
    Ok((0..=steps)
        .map(|k| start + (end - start) * k as f64 / steps as f64)
        .collect())
}

/// The effective grid and horizon: an explicit grid wins over --T.
fn resolve_grid(run: &RunArgs) -> Result<(Vec<f64>, f64)> {
    match &run.grid {
        Some(text) => {
            let grid = parse_grid(text)?;
            let t_end = *grid.last().unwrap();
            Ok((grid, t_end))
        }
        None => {
            if !(run.t_end > 0.0) {
                bail!("time horizon must be positive");
            }
            let grid = (0..=200).map(|k| run.t_end * k as f64 / 200.0).collect();
            Ok((grid, run.t_end))
        }
    }
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn cmd_example(cmd: ExampleCmd) -> Result<u8> {
    let mut spec = build_example(cmd.tag);
    apply_overrides(&mut spec, cmd.a1, cmd.am1, cmd.rate)?;
    validate_spec(&spec)?;
    let mut json = spec.to_json()?;
    json.push('\n');
    write_output(cmd.output.as_deref(), &json)?;
    Ok(0)
}

fn cmd_certify(cmd: CertifyCmd) -> Result<u8> {
    let spec = match load_spec(&cmd.source) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e:#}");
            return Ok(2);
        }
    };
    let set = match run_all(&spec) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e:#}");
            return Ok(2);
        }
    };
    let mut json = serde_json::to_string_pretty(&set)?;
    json.push('\n');
    write_output(cmd.output.as_deref(), &json)?;
    for cert in &set.certificates {
        eprintln!(
            "{}: {} (value {})",
            cert.theorem,
            cert.verdict,
            fmt(cert.value)
        );
    }
    for s in &set.skipped {
        eprintln!("{}: skipped ({})", s.theorem, s.reason);
    }
    Ok(if set.any_pass() { 0 } else { 1 })
}

fn cmd_simulate(cmd: SimulateCmd) -> Result<u8> {
    let spec = match load_spec(&cmd.source) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e:#}");
            return Ok(2);
        }
    };
    if cmd.paths == 0 {
        bail!("need at least one path");
    }
    let (grid, t_end) = resolve_grid(&cmd.run)?;
    let x0 = match &cmd.x0 {
        Some(text) => parse_vector(text, spec.dim, "--x0")?,
        None => DVector::from_element(spec.dim, 1.0),
    };
    let opts = SimOptions {
        r: cmd.run.r,
        grid,
        ..SimOptions::default()
    };
    let trajectories: Vec<Trajectory> = (0..cmd.paths)
        .into_par_iter()
        .map(|p| {
            simulate_path(
                &spec,
                &x0,
                cmd.i0,
                t_end,
                SeedSpec::new(cmd.run.seed).with_stream(p as u64),
                &opts,
            )
        })
        .collect::<switching::Result<_>>()?;

    let content = match cmd.run.format {
        Format::Csv => {
            let mut out = String::from("path,t,i");
            for k in 1..=spec.dim {
                out.push_str(&format!(",x_{k}"));
            }
            out.push('\n');
            for (p, traj) in trajectories.iter().enumerate() {
                for s in &traj.samples {
                    out.push_str(&format!("{p},{},{}", fmt(s.t), s.regime));
                    for v in s.state.iter() {
                        out.push_str(&format!(",{}", fmt(*v)));
                    }
                    out.push('\n');
                }
                if let Some(tb) = traj.blowup {
                    eprintln!("path {p} left the blow-up guard at t = {}", fmt(tb));
                }
            }
            out
        }
        Format::Json => {
            let mut json =
                serde_json::to_string_pretty(&serde_json::json!({ "paths": trajectories }))?;
            json.push('\n');
            json
        }
    };
    write_output(cmd.run.output.as_deref(), &content)?;
    Ok(0)
}

fn pair_csv(run: &CoupledRun, dim: usize) -> String {
    let mut out = String::from("t,i,j,l");
    for k in 1..=dim {
        out.push_str(&format!(",x_{k}"));
    }
    for k in 1..=dim {
        out.push_str(&format!(",y_{k}"));
    }
    out.push_str(",dist\n");
    for s in &run.samples {
        out.push_str(&format!("{},{}", fmt(s.t), s.i));
        match s.j {
            Some(j) => out.push_str(&format!(",{j}")),
            None => out.push(','),
        }
        match s.l {
            Some(l) => out.push_str(&format!(",{l}")),
            None => out.push(','),
        }
        for v in s.x.iter() {
            out.push_str(&format!(",{}", fmt(*v)));
        }
        match &s.y {
            Some(y) => {
                for v in y.iter() {
                    out.push_str(&format!(",{}", fmt(*v)));
                }
            }
            None => out.push_str(&",".repeat(dim)),
        }
        match s.dist {
            Some(d) => out.push_str(&format!(",{}\n", fmt(d))),
            None => out.push_str(",\n"),
        }
    }
    out
}

fn cmd_couple(cmd: CoupleCmd) -> Result<u8> {
    let spec = match load_spec(&cmd.source) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e:#}");
            return Ok(2);
        }
    };
    let (grid, t_end) = resolve_grid(&cmd.run)?;
    let q = cmd.q.unwrap_or(spec.metric.q);
    let x0 = match &cmd.x0 {
        Some(text) => parse_vector(text, spec.dim, "--x0")?,
        None => DVector::from_element(spec.dim, 1.0),
    };
    let y0 = match &cmd.y0 {
        Some(text) => parse_vector(text, spec.dim, "--y0")?,
        None => -&x0,
    };
    let j0 = cmd.j0.unwrap_or(spec.n_regimes() - 1);
    let opts = CoupleOptions {
        r: cmd.run.r,
        grid,
        delta: cmd.delta,
        l0: cmd.l0,
        ..CoupleOptions::default()
    };
    let seed = SeedSpec::new(cmd.run.seed);

    if cmd.paths == 1 {
        let run = match cmd.mode {
            ModeArg::Constant => couple_constant(&spec, &x0, &y0, cmd.i0, j0, t_end, seed, &opts)?,
            ModeArg::Uniformized => {
                couple_uniformized(&spec, &x0, &y0, cmd.i0, j0, t_end, seed, &opts)?
            }
            ModeArg::Dominating => {
                let Some(partition) = spec.partition.clone() else {
                    bail!("the dominating coupling needs a partition on the spec");
                };
                couple_with_dominating(&spec, &partition, &x0, cmd.i0, t_end, seed, &opts)?
            }
        };
        let content = match cmd.run.format {
            Format::Csv => pair_csv(&run, spec.dim),
            Format::Json => {
                let mut json = serde_json::to_string_pretty(&run)?;
                json.push('\n');
                json
            }
        };
        if let Some(t) = run.t_meet {
            eprintln!("regimes met at t = {}", fmt(t));
        }
        write_output(cmd.run.output.as_deref(), &content)?;
        return Ok(0);
    }

    let mode = match cmd.mode {
        ModeArg::Constant => CoupleMode::Constant,
        ModeArg::Uniformized => CoupleMode::Uniformized,
        ModeArg::Dominating => CoupleMode::Dominating,
    };
    let curve = wasserstein_decay_curve(
        &spec, &x0, &y0, cmd.i0, j0, &opts.grid, cmd.paths, q, mode, seed, &opts,
    )?;
    match (curve.fitted_rate, curve.fitted_rate_se) {
        (Some(rate), Some(se)) => {
            eprintln!("fitted decay rate = {} +/- {}", fmt(rate), fmt(se))
        }
        (Some(rate), None) => eprintln!("fitted decay rate = {}", fmt(rate)),
        _ => eprintln!("no exponential tail fit (nonpositive tail means)"),
    }
    let content = match cmd.run.format {
        Format::Csv => {
            let mut out = String::from("t,mean,stderr\n");
            for (k, &t) in curve.grid.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{}\n",
                    fmt(t),
                    fmt(curve.mean_trunc[k]),
                    fmt(curve.stderr_trunc[k])
                ));
            }
            out
        }
        Format::Json => {
            let mut json = serde_json::to_string_pretty(&curve)?;
            json.push('\n');
            json
        }
    };
    write_output(cmd.run.output.as_deref(), &content)?;
    Ok(0)
}

/// Sample file: CSV rows `i,x_1,...,x_d`, one point per row, uniform
/// weights. A non-numeric first line is treated as a header.
fn read_samples(path: &Path) -> Result<Vec<(usize, DVector<f64>)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut points = Vec::new();
    let mut dim: Option<usize> = None;
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: Option<Vec<f64>> = cells.iter().map(|c| c.parse::<f64>().ok()).collect();
        let Some(vals) = parsed else {
            if points.is_empty() && ln == 0 {
                continue;
            }
            bail!("{}:{}: non-numeric row", path.display(), ln + 1);
        };
        if vals.len() < 2 {
            bail!(
                "{}:{}: need a regime and at least one coordinate",
                path.display(),
                ln + 1
            );
        }
        let regime = vals[0];
        if regime < 0.0 || regime.fract() != 0.0 {
            bail!(
                "{}:{}: regime must be a nonnegative integer",
                path.display(),
                ln + 1
            );
        }
        let coords = DVector::from_vec(vals[1..].to_vec());
        match dim {
            None => dim = Some(coords.len()),
            Some(d) if d != coords.len() => {
                bail!("{}:{}: inconsistent dimension", path.display(), ln + 1)
            }
            _ => {}
        }
        points.push((regime as usize, coords));
    }
    if points.is_empty() {
        bail!("{}: no sample rows", path.display());
    }
    Ok(points)
}

fn cmd_wasserstein(cmd: WassersteinCmd) -> Result<u8> {
    if !(cmd.q > 0.0 && cmd.q <= 1.0) {
        bail!("cost exponent q must lie in (0, 1]");
    }
    let a = read_samples(&cmd.a)?;
    let b = read_samples(&cmd.b)?;
    let dim = a[0].1.len();
    if b[0].1.len() != dim {
        bail!("sample files have different dimensions");
    }
    let mu = EmpiricalMeasure::uniform(a)?;
    let nu = EmpiricalMeasure::uniform(b)?;
    let metric = MetricSpec {
        m: DMatrix::identity(dim, dim),
        q: cmd.q,
        x0: DVector::zeros(dim),
        trunc: true,
    };
    let cost = match cmd.cost {
        CostArg::Power => TransportCost::PowerMetric,
        CostArg::TruncD => TransportCost::TruncatedD,
        CostArg::Tilde => TransportCost::WeightedTilde { delta: cmd.delta },
    };
    let sol = ot_exact(&mu, &nu, &cost, &metric)?;
    let route = match sol.route {
        OtRoute::Assignment => "assignment",
        OtRoute::Simplex => "simplex",
    };
    let content = match cmd.format {
        Format::Csv => format!("{}\n", fmt(sol.value)),
        Format::Json => {
            let mut json = serde_json::to_string_pretty(&serde_json::json!({
                "value": sol.value,
                "route": route,
                "atoms": [mu.len(), nu.len()],
            }))?;
            json.push('\n');
            json
        }
    };
    write_output(cmd.output.as_deref(), &content)?;
    Ok(0)
}
