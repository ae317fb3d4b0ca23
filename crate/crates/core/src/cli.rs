//! Command-line front end.
//!
//! Exit codes: 0 success, 2 input error, 3 non-convergence, 4 size cap.
//! Every command writes a [`RunManifest`] that `rsmpi rerun` can replay.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::approx::{run_approx_mpi, ApproxConfig};
use crate::error::{Error, Result};
use crate::io::{read_model, write_model, write_trace_file, RunManifest};
use crate::model::{generate_random, DeterministicPolicy, RiskParams};
use crate::mpi::{run_mpi, MSchedule, MpiConfig};
use crate::operators::PositiveValueVector;
use crate::oracles::{brute_force_optimal, evaluate_policy, PerronConfig};
use crate::transform::{invert_cost, transform};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NONCONVERGENCE: i32 = 3;
pub const EXIT_SIZE_CAP: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "rsmpi", version, about = "Risk-sensitive modified policy iteration")]
pub struct Cli {
    /// Where to write the run manifest (defaults next to the main output).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Write a seeded random model.
    Generate(GenerateArgs),
    /// Check a model file and list every violated invariant.
    Validate(ModelArg),
    /// Solve with (approximate) modified policy iteration.
    Solve(SolveArgs),
    /// Evaluate every deterministic policy.
    Brute(BruteArgs),
    /// Evaluate one policy.
    Eval(EvalArgs),
    /// Replay a previous run from its manifest.
    Rerun(RerunArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub m: usize,
    #[arg(long, default_value_t = 0.0)]
    pub cost_lo: f64,
    #[arg(long, default_value_t = 1.0)]
    pub cost_hi: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ModelArg {
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct RiskArgs {
    #[arg(long)]
    pub alpha: f64,
    #[arg(long, default_value_t = RiskParams::DEFAULT_KAPPA)]
    pub kappa: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Exact,
    Approx,
}

#[derive(Debug, Args, Serialize)]
pub struct SolveArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub risk: RiskArgs,
    /// Constant evaluation depth.
    #[arg(long, default_value_t = 5)]
    pub m: u32,
    /// Cyclic depths, comma separated; overrides --m.
    #[arg(long, value_delimiter = ',')]
    pub m_cycle: Option<Vec<u32>>,
    /// Depth cap C; defaults to the largest depth.
    #[arg(long)]
    pub m_cap: Option<u32>,
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    #[arg(long, default_value_t = 10_000)]
    pub max_outer: usize,
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Mode::Exact)]
    pub mode: Mode,
    #[arg(long, default_value_t = 1.0)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 1.0)]
    pub delta1: f64,
    #[arg(long, default_value_t = 1.0)]
    pub delta2: f64,
    /// Seed of the error-injection generator.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Evaluate each iterate's policy exactly.
    #[arg(long)]
    pub diagnostics: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct BruteArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub risk: RiskArgs,
    #[arg(long, default_value_t = crate::oracles::DEFAULT_POLICY_CAP)]
    pub cap: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub risk: RiskArgs,
    /// Dash-joined action indices, e.g. 0-2-1.
    #[arg(long)]
    pub policy: String,
}

#[derive(Debug, Args, Serialize)]
pub struct RerunArgs {
    #[arg(long = "from")]
    pub from: PathBuf,
}

/// Maps an error to the stable exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonConvergence { .. } => EXIT_NONCONVERGENCE,
        Error::SizeCap { .. } => EXIT_SIZE_CAP,
        _ => EXIT_INPUT,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    let recorded: Vec<String> = args
        .iter()
        .skip(1)
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    match execute(&cli, &recorded) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

struct Outcome {
    code: i32,
    model_path: Option<String>,
    params: Option<RiskParams>,
    seed: Option<u64>,
    outputs: Vec<PathBuf>,
    default_manifest: PathBuf,
}

fn execute(cli: &Cli, args: &[String]) -> Result<i32> {
    let outcome = match &cli.command {
        Command::Generate(a) => cmd_generate(a)?,
        Command::Validate(a) => cmd_validate(a)?,
        Command::Solve(a) => cmd_solve(a)?,
        Command::Brute(a) => cmd_brute(a)?,
        Command::Eval(a) => cmd_eval(a)?,
        Command::Rerun(a) => return cmd_rerun(a),
    };
    let manifest = RunManifest {
        command: command_name(&cli.command).to_string(),
        model_path: outcome.model_path,
        params: outcome.params,
        config: serde_json::to_value(&cli.command)?,
        seed: outcome.seed,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        timestamp: chrono::Utc::now().to_rfc3339(),
        cwd: std::env::current_dir()?.to_string_lossy().into_owned(),
        args: args.to_vec(),
        outputs: outcome
            .outputs
            .iter()
            .map(|p| p.to_string_lossy().into_owned())
            .collect(),
    };
    let path = cli.manifest.clone().unwrap_or(outcome.default_manifest);
    manifest.write(&path)?;
    Ok(outcome.code)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Generate(_) => "generate",
        Command::Validate(_) => "validate",
        Command::Solve(_) => "solve",
        Command::Brute(_) => "brute",
        Command::Eval(_) => "eval",
        Command::Rerun(_) => "rerun",
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn params(r: &RiskArgs) -> Result<RiskParams> {
    RiskParams::new(r.alpha, r.kappa)
}

fn cmd_generate(a: &GenerateArgs) -> Result<Outcome> {
    let model = generate_random(a.seed, a.n, a.m, (a.cost_lo, a.cost_hi))?;
    write_model(&model, &a.out)?;
    println!("wrote {} ({} states, {} actions)", a.out.display(), a.n, a.m);
    Ok(Outcome {
        code: EXIT_OK,
        model_path: Some(a.out.to_string_lossy().into_owned()),
        params: None,
        seed: Some(a.seed),
        outputs: vec![a.out.clone()],
        default_manifest: with_suffix(&a.out, ".manifest.json"),
    })
}

fn cmd_validate(a: &ModelArg) -> Result<Outcome> {
    let model = read_model(&a.model)?;
    let report = model.validate();
    if !report.is_valid() {
        return Err(Error::InvalidModel(report));
    }
    println!(
        "valid: {} states, {} actions, digest {}",
        model.n_states(),
        model.n_actions(),
        model.digest()
    );
    Ok(Outcome {
        code: EXIT_OK,
        model_path: Some(a.model.to_string_lossy().into_owned()),
        params: None,
        seed: None,
        outputs: vec![],
        default_manifest: with_suffix(&a.model, ".validate.manifest.json"),
    })
}

fn mpi_config(a: &SolveArgs) -> MpiConfig {
    let schedule = match &a.m_cycle {
        Some(c) => MSchedule::Cycle(c.clone()),
        None => MSchedule::Constant(a.m),
    };
    MpiConfig {
        m_cap: a.m_cap.unwrap_or_else(|| schedule.max_depth()),
        schedule,
        tol: a.tol,
        max_outer: a.max_outer,
        diagnostics: a.diagnostics,
        ..MpiConfig::default()
    }
}

fn cmd_solve(a: &SolveArgs) -> Result<Outcome> {
    let model = read_model(&a.model)?;
    let p = params(&a.risk)?;
    let tmdp = transform(&model, &p)?;
    let config = mpi_config(a);
    let init = PositiveValueVector::uniform(tmdp.n_states());
    let trace = match a.mode {
        Mode::Exact => run_mpi(&tmdp, &config, &init)?,
        Mode::Approx => {
            let approx = ApproxConfig::new(a.epsilon, a.delta1, a.delta2, a.seed)?;
            run_approx_mpi(&tmdp, &config, &approx, &init)?
        }
    };
    let last = trace.last();
    println!("policy: {}", trace.final_policy);
    println!(
        "lambda_tilde: {:.12e} (growth {:.12e} +/- {:.3e})",
        trace.final_lambda_tilde,
        0.5 * (last.u + last.l),
        trace.half_width
    );
    match invert_cost(trace.final_lambda_tilde, p.kappa()) {
        Ok(l) => println!("lambda: {l:.12e}"),
        Err(e) => eprintln!("warning: {e}"),
    }
    println!("iterations: {}, converged: {}", trace.records.len(), trace.converged);
    let mut outputs = vec![];
    if let Some(path) = &a.trace_out {
        write_trace_file(&trace, path)?;
        outputs.push(path.clone());
    }
    let default_manifest = match &a.trace_out {
        Some(t) => with_suffix(t, ".manifest.json"),
        None => with_suffix(&a.model, ".solve.manifest.json"),
    };
    Ok(Outcome {
        code: if trace.converged { EXIT_OK } else { EXIT_NONCONVERGENCE },
        model_path: Some(a.model.to_string_lossy().into_owned()),
        params: Some(p),
        seed: (a.mode == Mode::Approx).then_some(a.seed),
        outputs,
        default_manifest,
    })
}

fn cmd_brute(a: &BruteArgs) -> Result<Outcome> {
    let model = read_model(&a.model)?;
    let p = params(&a.risk)?;
    let tmdp = transform(&model, &p)?;
    let brute = brute_force_optimal(&tmdp, &PerronConfig::default(), a.cap)?;
    for (f, lt) in &brute.per_policy {
        let mark = if brute.is_optimal(f) { " *" } else { "" };
        println!("{f}\t{lt:.12e}{mark}");
    }
    let best: Vec<String> = brute.optimal_policies.iter().map(|f| f.to_string()).collect();
    println!("optimal: {}", best.join(" "));
    println!("lambda_tilde: {:.12e}", brute.optimal_lambda_tilde);
    println!("lambda: {:.12e}", invert_cost(brute.optimal_lambda_tilde, p.kappa())?);
    Ok(Outcome {
        code: EXIT_OK,
        model_path: Some(a.model.to_string_lossy().into_owned()),
        params: Some(p),
        seed: None,
        outputs: vec![],
        default_manifest: with_suffix(&a.model, ".brute.manifest.json"),
    })
}

fn cmd_eval(a: &EvalArgs) -> Result<Outcome> {
    let model = read_model(&a.model)?;
    let p = params(&a.risk)?;
    let tmdp = transform(&model, &p)?;
    let policy = DeterministicPolicy::parse(&a.policy)?;
    policy.check(tmdp.n_states(), tmdp.n_actions())?;
    let e = evaluate_policy(&tmdp, &policy, &PerronConfig::default())?;
    println!("lambda_tilde: {:.12e}", e.lambda_tilde);
    println!("lambda: {:.12e}", invert_cost(e.lambda_tilde, p.kappa())?);
    let v: Vec<String> = e.value.weights().iter().map(|x| format!("{x:.12e}")).collect();
    println!("value: {}", v.join(" "));
    println!("residual: {:.3e}", e.residual);
    Ok(Outcome {
        code: EXIT_OK,
        model_path: Some(a.model.to_string_lossy().into_owned()),
        params: Some(p),
        seed: None,
        outputs: vec![],
        default_manifest: with_suffix(&a.model, ".eval.manifest.json"),
    })
}

fn cmd_rerun(a: &RerunArgs) -> Result<i32> {
    let manifest = RunManifest::read(&a.from)?;
    if manifest.command == "rerun" {
        return Err(Error::param("manifest records a rerun; refusing to recurse"));
    }
    std::env::set_current_dir(&manifest.cwd)?;
    let mut args = vec!["rsmpi".to_string()];
    args.extend(manifest.args);
    let cli = Cli::try_parse_from(&args)
        .map_err(|e| Error::param(format!("manifest arguments no longer parse: {e}")))?;
    execute(&cli, &args[1..])
}
