//! Command-line front end: problem ingestion, the synthesis pipeline, trade-off
//! sweeps, Monte Carlo validation and the spacecraft demonstration.
//!
//! Exit codes: 0 success, 1 I/O or internal failure, 2 invalid input or
//! mismatched artifacts, 3 solver did not converge.

pub mod artifacts;

use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use infolqg::maxdet::{default_epsilon, SolveError, SolverSettings};
use infolqg::model::{CovarianceSchedule, ModelError, RiccatiTables, SensorPolicy};
use infolqg::oracle::{grid_search_schedule, GridSpec};
use infolqg::simulate::{self, Baseline, SimConfig};
use infolqg::spacecraft::{self, SpacecraftParams};
use infolqg::synthesis::round_trip_errors;
use infolqg::{assemble_policy, riccati_backward, ProblemSpec, RankTolerance};
use rayon::prelude::*;
use serde::Serialize;

use artifacts::{
    nats_to_bits, num, spec_hash, PolicyArtifact, ReportArtifact, RunManifest, ScheduleArtifact, SynthesisSettings,
    SCHEMA_VERSION,
};

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn invalid(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn mismatch(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self { code: 1, message: format!("{}: {e}", path.display()) }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<SolveError> for CliError {
    fn from(e: SolveError) -> Self {
        match &e {
            SolveError::MaxIterations(s) => {
                let d = &s.diagnostics;
                Self {
                    code: 3,
                    message: format!(
                        "{e}\n  iterations: {}\n  outer iterations: {}\n  gap bound: {:.3e}\n  feasibility residual: {:.3e}\n  barrier parameter: {:.3e}",
                        d.iterations, d.outer_iterations, d.optimality_residual, d.feasibility_residual, d.barrier_parameter
                    ),
                }
            }
            SolveError::Settings(_) | SolveError::IncreasingGamma { .. } => Self::invalid(e.to_string()),
            _ => Self::internal(e.to_string()),
        }
    }
}

impl From<simulate::SimError> for CliError {
    fn from(e: simulate::SimError) -> Self {
        match e {
            simulate::SimError::Horizon { .. } | simulate::SimError::Dimension { .. } | simulate::SimError::NoTrials => {
                Self::mismatch(e.to_string())
            }
            _ => Self::internal(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "infolqg", version, about = "Joint sensor, Kalman filter and controller synthesis with an information price")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Backward Riccati recursion; writes riccati.csv.
    Riccati {
        problem: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Full synthesis; writes riccati.csv, schedule.json, policy.json.
    Synthesize {
        problem: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[command(flatten)]
        synth: SynthArgs,
    },
    /// Monte Carlo evaluation of a synthesized policy.
    Simulate(SimulateArgs),
    /// Information/control trade-off over scalings of the information price.
    Sweep {
        problem: PathBuf,
        /// Comma-separated positive scale factors.
        #[arg(long)]
        scales: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[command(flatten)]
        synth: SynthArgs,
    },
    /// Built-in demonstrations.
    Example {
        #[command(subcommand)]
        which: Example,
    },
    /// Brute-force grid search on a scalar problem (debugging aid).
    #[command(hide = true)]
    Oracle {
        problem: PathBuf,
        #[arg(long, default_value_t = 400)]
        points: usize,
        #[arg(long, default_value_t = 3)]
        rounds: usize,
    },
}

#[derive(Subcommand, Debug)]
pub enum Example {
    /// Magnetically actuated nadir-pointing spacecraft.
    Satellite {
        /// Parameter file; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the information price of every step.
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long, default_value = "satellite-out")]
        out: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "traj-samples", default_value_t = 1)]
        traj_samples: usize,
    },
}

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    /// Multiplies every information price.
    #[arg(long = "gamma-scale", default_value_t = 1.0)]
    pub gamma_scale: f64,
    #[arg(long = "tol-feasibility", default_value_t = 1e-8)]
    pub tol_feasibility: f64,
    #[arg(long = "tol-optimality", default_value_t = 1e-7)]
    pub tol_optimality: f64,
    #[arg(long = "max-iterations", default_value_t = 200)]
    pub max_iterations: usize,
    /// Lower bound shift on Π_t; defaults to 1e-9·tr(P_init)/n.
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long = "rank-rel", default_value_t = 1e-7)]
    pub rank_rel: f64,
    #[arg(long = "rank-abs", default_value_t = 1e-12)]
    pub rank_abs: f64,
}

impl Default for SynthArgs {
    fn default() -> Self {
        let s = SolverSettings::default();
        let r = RankTolerance::default();
        Self {
            gamma_scale: 1.0,
            tol_feasibility: s.tol_feasibility,
            tol_optimality: s.tol_optimality,
            max_iterations: s.max_iterations,
            epsilon: s.epsilon,
            rank_rel: r.rel_threshold,
            rank_abs: r.abs_floor,
        }
    }
}

impl SynthArgs {
    fn solver(&self) -> SolverSettings {
        SolverSettings {
            tol_feasibility: self.tol_feasibility,
            tol_optimality: self.tol_optimality,
            max_iterations: self.max_iterations,
            epsilon: self.epsilon,
            ..SolverSettings::default()
        }
    }

    fn rank(&self) -> RankTolerance {
        RankTolerance { rel_threshold: self.rank_rel, abs_floor: self.rank_abs }
    }
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Problem file the policy was synthesized from.
    #[arg(long)]
    pub problem: PathBuf,
    /// policy.json, or the directory holding it.
    #[arg(long)]
    pub policy: PathBuf,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = BaselineArg::None)]
    pub baseline: BaselineArg,
    /// Number of leading trials written to trajectories.csv.
    #[arg(long = "traj-samples", default_value_t = 1)]
    pub traj_samples: usize,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineArg {
    None,
    Lqr,
}

pub fn load_problem(path: &Path) -> Result<ProblemSpec, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    ProblemSpec::from_json_str(&text).map_err(|e| match e {
        ModelError::Invalid(v) => CliError::invalid(format!(
            "{}: validation failed\n{}",
            path.display(),
            v.iter().map(|x| format!("  {x}")).collect::<Vec<_>>().join("\n")
        )),
        other => CliError::invalid(format!("{}: {other}", path.display())),
    })
}

fn check_scale(scale: f64) -> Result<(), CliError> {
    if scale > 0.0 && scale.is_finite() {
        Ok(())
    } else {
        Err(CliError::invalid(format!("gamma scale must be positive and finite, got {scale}")))
    }
}

/// Result of Steps 1–5 on one instance.
pub struct Synthesis {
    pub spec: ProblemSpec,
    pub tables: RiccatiTables,
    pub schedule: CovarianceSchedule,
    pub policy: SensorPolicy,
    pub round_trip: Vec<f64>,
}

pub fn synthesize(spec: &ProblemSpec, args: &SynthArgs) -> Result<Synthesis, CliError> {
    check_scale(args.gamma_scale)?;
    let spec = spec.with_gamma_scale(args.gamma_scale);
    let settings = args.solver();
    let (tables, _, schedule) = infolqg::maxdet::schedule_for(&spec, &settings)?;
    let policy = assemble_policy(&spec, &tables, &schedule, args.rank())
        .map_err(|e| CliError::internal(format!("sensor synthesis failed: {e}")))?;
    let round_trip = round_trip_errors(&spec, &policy, &schedule);
    let worst = round_trip.iter().copied().fold(0.0, f64::max);
    if worst > 1e-6 {
        log::warn!("realized posterior covariances deviate from the schedule by {worst:.2e} (relative)");
    }
    Ok(Synthesis { spec, tables, schedule, policy, round_trip })
}

fn write_synthesis(manifest: &mut RunManifest, out: &Path, s: &Synthesis, args: &SynthArgs) -> Result<(), CliError> {
    let hash = spec_hash(&s.spec);
    manifest.spec_hash = Some(hash.clone());
    manifest.write_output(out, "riccati.csv", artifacts::riccati_csv(&s.tables).as_bytes())?;
    let schedule = ScheduleArtifact {
        schema_version: SCHEMA_VERSION.into(),
        spec_hash: hash.clone(),
        gamma_scale: args.gamma_scale,
        info_cost_bits: nats_to_bits(s.schedule.info_cost),
        schedule: s.schedule.clone(),
    };
    manifest.write_json_output(out, "schedule.json", &schedule)?;
    let policy = PolicyArtifact {
        schema_version: SCHEMA_VERSION.into(),
        spec_hash: hash,
        gamma_scale: args.gamma_scale,
        rank_tolerance: args.rank(),
        policy: s.policy.clone(),
    };
    manifest.write_json_output(out, "policy.json", &policy)
}

fn settings_value(args: &SynthArgs) -> serde_json::Value {
    let solver = args.solver();
    serde_json::to_value(SynthesisSettings { solver: &solver, rank_tolerance: args.rank(), gamma_scale: args.gamma_scale })
        .expect("settings serialize")
}

pub fn cmd_riccati(problem: &Path, out: &Path) -> Result<(), CliError> {
    let mut manifest = RunManifest::new("riccati", Some(problem), out);
    let spec = manifest.time("load", || load_problem(problem))?;
    manifest.spec_hash = Some(spec_hash(&spec));
    let tables = manifest
        .time("riccati", || riccati_backward(&spec))
        .map_err(|e| CliError::internal(e.to_string()))?;
    manifest.write_output(out, "riccati.csv", artifacts::riccati_csv(&tables).as_bytes())?;
    manifest.finish(out)
}

pub fn cmd_synthesize(problem: &Path, out: &Path, args: &SynthArgs) -> Result<(), CliError> {
    let mut manifest = RunManifest::new("synthesize", Some(problem), out);
    manifest.settings = settings_value(args);
    let spec = manifest.time("load", || load_problem(problem))?;
    let s = manifest.time("synthesize", || synthesize(&spec, args))?;
    write_synthesis(&mut manifest, out, &s, args)?;
    manifest.finish(out)
}

fn policy_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("policy.json")
    } else {
        p.to_path_buf()
    }
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let out = &args.out;
    let mut manifest = RunManifest::new("simulate", Some(&args.problem), out);
    let base = load_problem(&args.problem)?;
    let path = policy_path(&args.policy);
    let artifact: PolicyArtifact = artifacts::read_json(&path)?;
    artifacts::check_schema(&artifact.schema_version, &path.display().to_string())?;
    check_scale(artifact.gamma_scale)?;
    let spec = base.with_gamma_scale(artifact.gamma_scale);
    let hash = spec_hash(&spec);
    if hash != artifact.spec_hash {
        return Err(CliError::mismatch(format!(
            "{} was synthesized for a different problem (spec hash {} vs {})",
            path.display(),
            artifact.spec_hash,
            hash
        )));
    }
    manifest.spec_hash = Some(hash.clone());
    let config = SimConfig {
        num_trials: args.trials,
        master_seed: args.seed,
        record_trajectories: args.traj_samples,
        baseline: match args.baseline {
            BaselineArg::None => Baseline::None,
            BaselineArg::Lqr => Baseline::FullObservationLqr,
        },
        threads: None,
    };
    manifest.settings = serde_json::to_value(&config).expect("config serializes");
    let report = manifest.time("simulate", || simulate::estimate_costs(&spec, &artifact.policy, &config))?;
    let baseline = match config.baseline {
        Baseline::None => None,
        Baseline::FullObservationLqr => Some(manifest.time("baseline", || simulate::lqr_baseline(&spec, &config))?),
    };
    write_report(&mut manifest, out, hash, args.seed, report, baseline)?;
    manifest.finish(out)
}

fn write_report(
    manifest: &mut RunManifest,
    out: &Path,
    hash: String,
    seed: u64,
    mut report: infolqg::SimulationReport,
    mut baseline: Option<infolqg::SimulationReport>,
) -> Result<(), CliError> {
    manifest.write_output(out, "trajectories.csv", artifacts::trajectories_csv(&report.trajectories).as_bytes())?;
    if let Some(b) = &baseline {
        manifest.write_output(out, "baseline_trajectories.csv", artifacts::trajectories_csv(&b.trajectories).as_bytes())?;
    }
    report.trajectories.clear();
    if let Some(b) = baseline.as_mut() {
        b.trajectories.clear();
    }
    let z = if report.standard_error > 0.0 {
        (report.empirical_control_cost - report.predicted_control_cost).abs() / report.standard_error
    } else {
        (report.empirical_control_cost - report.predicted_control_cost).abs() * f64::INFINITY
    };
    let z = if z.is_nan() { 0.0 } else { z };
    let artifact = ReportArtifact {
        schema_version: SCHEMA_VERSION.into(),
        spec_hash: hash,
        master_seed: seed,
        total_info_cost_bits: nats_to_bits(report.total_info_cost),
        z_score: z,
        within_3_se: z <= 3.0,
        policy: report,
        baseline,
    };
    manifest.write_json_output(out, "report.json", &artifact)
}

/// One row of the trade-off table. `info_nats` is `Σ γ_t I_t` at the base
/// prices of the problem file; the row minimizes `J_cont + scale · info_nats`.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub scale: f64,
    pub info_nats: f64,
    pub control_predicted: f64,
    pub status: String,
}

impl SweepRow {
    /// The optimized objective `J_cont + scale · J_info`.
    pub fn total(&self) -> f64 {
        self.scale * self.info_nats + self.control_predicted
    }
}

pub fn parse_scales(text: &str) -> Result<Vec<f64>, CliError> {
    let mut scales = Vec::new();
    for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let x: f64 = item.parse().map_err(|_| CliError::invalid(format!("bad scale `{item}`")))?;
        check_scale(x)?;
        scales.push(x);
    }
    if scales.is_empty() {
        return Err(CliError::invalid("no gamma scales given"));
    }
    scales.sort_by(f64::total_cmp);
    scales.dedup();
    Ok(scales)
}

pub fn sweep_rows(spec: &ProblemSpec, scales: &[f64], args: &SynthArgs) -> Result<Vec<SweepRow>, CliError> {
    simulate::with_threads(None, || {
        scales
            .par_iter()
            .map(|&scale| {
                let row_args = SynthArgs { gamma_scale: scale, ..args.clone() };
                match synthesize(spec, &row_args) {
                    Ok(s) => SweepRow {
                        scale,
                        info_nats: s.schedule.info_cost / scale,
                        control_predicted: s.schedule.control_cost_predicted,
                        status: "ok".into(),
                    },
                    Err(e) => SweepRow {
                        scale,
                        info_nats: f64::NAN,
                        control_predicted: f64::NAN,
                        status: format!("failed (exit {}): {}", e.code, e.message.lines().next().unwrap_or("")),
                    },
                }
            })
            .collect()
    })
    .map_err(CliError::from)
}

/// `J_info` nonincreasing and `J_cont` nondecreasing along the converged rows,
/// up to `tol` relative.
pub fn sweep_is_monotone(rows: &[SweepRow], tol: f64) -> bool {
    let ok: Vec<&SweepRow> = rows.iter().filter(|r| r.status == "ok").collect();
    ok.windows(2).all(|w| {
        let slack = |a: f64, b: f64| tol * a.abs().max(b.abs()).max(1.0);
        w[1].info_nats <= w[0].info_nats + slack(w[0].info_nats, w[1].info_nats)
            && w[1].control_predicted >= w[0].control_predicted - slack(w[0].control_predicted, w[1].control_predicted)
    })
}

fn field(x: f64) -> String {
    if x.is_finite() {
        num(x)
    } else {
        String::new()
    }
}

pub fn tradeoff_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("scale,J_info_nats,J_cont_predicted,total,J_info_bits,status\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            num(r.scale),
            field(r.info_nats),
            field(r.control_predicted),
            field(r.total()),
            field(nats_to_bits(r.info_nats)),
            r.status.replace([',', '\n'], ";")
        ));
    }
    out
}

pub fn cmd_sweep(problem: &Path, scales: &str, out: &Path, args: &SynthArgs) -> Result<(), CliError> {
    let mut manifest = RunManifest::new("sweep", Some(problem), out);
    let scales = parse_scales(scales)?;
    let spec = manifest.time("load", || load_problem(problem))?;
    manifest.spec_hash = Some(spec_hash(&spec));
    let rows = manifest.time("sweep", || sweep_rows(&spec, &scales, args))?;
    let monotone = sweep_is_monotone(&rows, 1e-6);
    if !monotone {
        log::warn!("trade-off curve is not monotone in the gamma scale");
    }
    let mut settings = settings_value(args);
    settings["scales"] = serde_json::json!(scales);
    settings["monotone"] = serde_json::json!(monotone);
    manifest.settings = settings;
    manifest.write_output(out, "tradeoff.csv", tradeoff_csv(&rows).as_bytes())?;
    manifest.finish(out)
}

fn rates_csv(rates: &[f64], ranks: &[usize], gamma: &[f64]) -> String {
    let mut out = String::from("t,rate_nats,rate_bits,gamma,rank\n");
    for (t, ((r, k), g)) in rates.iter().zip(ranks).zip(gamma).enumerate() {
        out.push_str(&format!("{},{},{},{},{}\n", t + 1, num(*r), num(nats_to_bits(*r)), num(*g), k));
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_example_satellite(
    config: Option<&Path>,
    gamma: Option<f64>,
    out: &Path,
    trials: usize,
    seed: u64,
    traj_samples: usize,
) -> Result<(), CliError> {
    let mut manifest = RunManifest::new("example satellite", config, out);
    let mut params = match config {
        Some(p) => artifacts::read_json::<SpacecraftParams>(p)?,
        None => SpacecraftParams::default(),
    };
    if let Some(g) = gamma {
        check_scale(g)?;
        params.gamma = vec![g];
    }
    let spec = manifest
        .time("discretize", || spacecraft::discretize_zoh(&params))
        .map_err(|e| CliError::invalid(e.to_string()))?;
    manifest.write_json_output(out, "problem.json", &spec.to_json_value())?;
    let args = SynthArgs::default();
    let s = manifest.time("synthesize", || synthesize(&spec, &args))?;
    write_synthesis(&mut manifest, out, &s, &args)?;

    let sim = SimConfig {
        num_trials: trials,
        master_seed: seed,
        record_trajectories: traj_samples,
        baseline: Baseline::FullObservationLqr,
        threads: None,
    };
    let report = manifest.time("simulate", || simulate::estimate_costs(&s.spec, &s.policy, &sim))?;
    let baseline = manifest.time("baseline", || simulate::lqr_baseline(&s.spec, &sim))?;
    manifest.write_output(out, "rates.csv", rates_csv(&report.info_rates, &s.policy.r, &s.spec.gamma).as_bytes())?;
    let hash = spec_hash(&s.spec);
    println!(
        "J_cont = {:.6} (predicted {:.6}), J_info = {:.6} nats ({:.6} bits); LQR baseline J_cont = {:.6}",
        report.empirical_control_cost,
        report.predicted_control_cost,
        report.total_info_cost,
        nats_to_bits(report.total_info_cost),
        baseline.empirical_control_cost
    );
    manifest.settings = serde_json::json!({ "spacecraft": params, "synthesis": settings_value(&args), "simulation": sim });
    write_report(&mut manifest, out, hash, seed, report, Some(baseline))?;
    manifest.finish(out)
}

pub fn cmd_oracle(problem: &Path, points: usize, rounds: usize) -> Result<(), CliError> {
    let spec = load_problem(problem)?;
    if spec.state_dims.iter().any(|&n| n != 1) {
        return Err(CliError::invalid("the grid oracle handles scalar problems only"));
    }
    if points < 10 {
        return Err(CliError::invalid("--points must be at least 10"));
    }
    let eps = default_epsilon(&spec);
    let grid = grid_search_schedule(&spec, GridSpec { points_per_dim: points, refinement_rounds: rounds }, eps);
    let solved = infolqg::maxdet::schedule_for(&spec, &SolverSettings::default())
        .map(|(_, _, s)| s.objective_value)
        .ok();
    let doc = serde_json::json!({ "grid": grid, "maxdet_objective": solved });
    let text = serde_json::to_string_pretty(&doc).expect("serializes");
    // A closed pipe (e.g. `| head`) is not an error worth reporting.
    let _ = writeln!(std::io::stdout(), "{text}");
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Riccati { problem, out } => cmd_riccati(&problem, &out),
        Command::Synthesize { problem, out, synth } => cmd_synthesize(&problem, &out, &synth),
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Sweep { problem, scales, out, synth } => cmd_sweep(&problem, &scales, &out, &synth),
        Command::Example { which: Example::Satellite { config, gamma, out, trials, seed, traj_samples } } => {
            cmd_example_satellite(config.as_deref(), gamma, &out, trials, seed, traj_samples)
        }
        Command::Oracle { problem, points, rounds } => cmd_oracle(&problem, points, rounds),
    }
}
