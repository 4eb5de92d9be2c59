use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use maic::data::{load_agd, load_ipd, pooled_target_moments, AgdStudy, ColumnMapping, IpdStudy};
use maic::estimators::{Method, Scale};
use maic::inference::{compare, negative_control_test, CompareConfig};
use maic::simulation::{run_study, ScenarioConfig};
use maic::variance::Strategy;
use maic::weighting::{
    balance_check, overlap_diagnostics, solve_weights, MomentSpec, SolverConfig,
};
use maic::MaicError;
use serde::Serialize;

mod manifest;

use manifest::RunManifest;

#[derive(Parser)]
#[command(
    name = "maic",
    version,
    about = "Matching-adjusted indirect comparisons"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit trial-selection weights and write balance diagnostics.
    Fit(FitArgs),
    /// Estimate the indirect comparison with every requested method and SE.
    Compare(CompareArgs),
    /// Compare the weighted IPD comparator arm with the AGD comparator arm.
    Negcontrol(NegcontrolArgs),
    /// Run a Monte Carlo study from a scenario file.
    Simulate(SimulateArgs),
}

#[derive(Args, Clone, Serialize)]
struct InputArgs {
    /// IPD as CSV with a header row.
    #[arg(long)]
    ipd: PathBuf,
    /// AGD as JSON.
    #[arg(long)]
    agd: PathBuf,
    #[arg(long, default_value = "y")]
    outcome_col: String,
    #[arg(long, default_value = "z")]
    arm_col: String,
    /// IPD covariate columns; defaults to the AGD covariate names.
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
    /// Directory for all outputs.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone, Serialize)]
struct SolverArgs {
    /// Moments to balance: `first` or `first+second`.
    #[arg(long, default_value = "first", value_parser = parse_moments)]
    moments: MomentSpec,
    #[arg(long, default_value_t = SolverConfig::default().grad_tol)]
    grad_tol: f64,
    #[arg(long, default_value_t = SolverConfig::default().max_iter)]
    max_iter: usize,
    #[arg(long, default_value_t = SolverConfig::default().step_halvings_max)]
    step_halvings_max: usize,
    #[arg(long, default_value_t = SolverConfig::default().weight_cap_warn)]
    weight_cap_warn: f64,
}

impl SolverArgs {
    fn config(&self) -> SolverConfig {
        SolverConfig {
            grad_tol: self.grad_tol,
            max_iter: self.max_iter,
            step_halvings_max: self.step_halvings_max,
            weight_cap_warn: self.weight_cap_warn,
        }
    }
}

#[derive(Args, Serialize)]
struct FitArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args, Serialize)]
struct CompareArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    solver: SolverArgs,
    /// Comma-separated: naive, maic-nab, maic-acb, bucher, stc.
    #[arg(long, value_delimiter = ',', default_value = "naive,maic-nab,stc", value_parser = parse_method)]
    methods: Vec<Method>,
    #[arg(long, default_value = "identity", value_parser = parse_scale)]
    scale: Scale,
    /// Comma-separated strategies (fo, po, cs, sw) or `all`.
    #[arg(long, default_value = "fo")]
    se: String,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
}

#[derive(Args, Serialize)]
struct NegcontrolArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long, default_value = "identity", value_parser = parse_scale)]
    scale: Scale,
    /// Test size.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
}

#[derive(Args, Serialize)]
struct SimulateArgs {
    /// Scenario configuration as JSON.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, env = "MAIC_THREADS")]
    threads: Option<usize>,
}

fn parse_moments(s: &str) -> Result<MomentSpec, String> {
    MomentSpec::parse(s)
        .ok_or_else(|| format!("unknown moment spec `{s}` (expected first or first+second)"))
}

fn parse_scale(s: &str) -> Result<Scale, String> {
    Scale::parse(s).ok_or_else(|| format!("unknown scale `{s}` (expected identity or logit)"))
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::parse(s).ok_or_else(|| format!("unknown method `{s}`"))
}

fn parse_strategies(s: &str) -> anyhow::Result<Vec<Strategy>> {
    if s == "all" {
        return Ok(Strategy::FEASIBLE.to_vec());
    }
    s.split(',')
        .map(|t| match Strategy::parse(t.trim()) {
            Some(Strategy::Full) => {
                bail!("the full strategy needs AGD patient data and is simulation-only")
            }
            Some(st) => Ok(st),
            None => bail!("unknown SE strategy `{t}`"),
        })
        .collect()
}

fn load_inputs(args: &InputArgs) -> anyhow::Result<(IpdStudy, AgdStudy)> {
    let agd = load_agd(&args.agd).with_context(|| format!("reading {}", args.agd.display()))?;
    let covariates = args
        .covariates
        .clone()
        .unwrap_or_else(|| agd.covariate_names.clone());
    let mapping = ColumnMapping::new(&args.outcome_col, &args.arm_col, &covariates);
    let ipd =
        load_ipd(&args.ipd, &mapping).with_context(|| format!("reading {}", args.ipd.display()))?;
    agd.check_alignment(&ipd)?;
    Ok((ipd, agd))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(dir, name, &text)
}

fn write_file(dir: &Path, name: &str, text: &str) -> anyhow::Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn prepare_out(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

#[derive(Serialize)]
struct FitOutput<'a> {
    model: &'a maic::weighting::WeightModel,
    balance: maic::weighting::BalanceReport,
    overlap: maic::weighting::OverlapReport,
}

fn cmd_fit(args: &FitArgs) -> anyhow::Result<()> {
    let (ipd, agd) = load_inputs(&args.input)?;
    let target = pooled_target_moments(&agd, args.solver.moments)?;
    let cfg = args.solver.config();
    let model = solve_weights(&ipd, &target, args.solver.moments, &cfg)?;
    let out = FitOutput {
        balance: balance_check(&model, &ipd, &target),
        overlap: overlap_diagnostics(&model, ipd.p(), cfg.weight_cap_warn, 5),
        model: &model,
    };
    if out.overlap.flagged() {
        log::warn!("weights indicate poor overlap between the trial populations");
    }
    let dir = &args.input.out;
    prepare_out(dir)?;
    write_json(dir, "model.json", &out)?;
    write_file(dir, "weights.csv", &model.weights_csv(&ipd))?;
    let manifest = RunManifest::new("fit", args, &[&args.input.ipd, &args.input.agd], None)?;
    write_json(dir, "manifest.json", &manifest)
}

fn cmd_compare(args: &CompareArgs) -> anyhow::Result<()> {
    let (ipd, agd) = load_inputs(&args.input)?;
    let cfg = CompareConfig {
        methods: args.methods.clone(),
        scale: args.scale,
        strategies: parse_strategies(&args.se)?,
        level: args.level,
        moments: args.solver.moments,
        solver: args.solver.config(),
        negative_control: true,
        alpha_level: 0.05,
    };
    let report = compare(&ipd, &agd, &cfg)?;
    for row in &report.results {
        if let Some(e) = &row.error {
            log::warn!("{}: {e}", row.method);
        }
    }
    let dir = &args.input.out;
    prepare_out(dir)?;
    write_json(dir, "report.json", &report)?;
    write_file(dir, "report.csv", &report.to_csv()?)?;
    let manifest = RunManifest::new("compare", &cfg, &[&args.input.ipd, &args.input.agd], None)?;
    write_json(dir, "manifest.json", &manifest)
}

fn cmd_negcontrol(args: &NegcontrolArgs) -> anyhow::Result<()> {
    let (ipd, agd) = load_inputs(&args.input)?;
    if agd.comparator_arm.is_none() {
        return Err(MaicError::NoComparatorArm("AGD").into());
    }
    if !ipd.has_comparator() {
        return Err(MaicError::NoComparatorArm("IPD").into());
    }
    let target = pooled_target_moments(&agd, args.solver.moments)?;
    let model = solve_weights(&ipd, &target, args.solver.moments, &args.solver.config())?;
    let result = negative_control_test(&ipd, &agd, &model, args.scale, args.alpha)?;
    let dir = &args.input.out;
    prepare_out(dir)?;
    write_json(dir, "negcontrol.json", &result)?;
    let manifest = RunManifest::new(
        "negcontrol",
        args,
        &[&args.input.ipd, &args.input.agd],
        None,
    )?;
    write_json(dir, "manifest.json", &manifest)
}

fn cmd_simulate(args: &SimulateArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let mut cfg = ScenarioConfig::from_json_str(&text)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let report = match args.threads {
        Some(0) => bail!("--threads must be at least 1"),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()?
            .install(|| run_study(&cfg))?,
        None => run_study(&cfg)?,
    };
    let dir = &args.out;
    prepare_out(dir)?;
    write_json(dir, "report.json", &report)?;
    write_file(dir, "report.csv", &report.to_tidy_csv()?)?;
    let manifest = RunManifest::new("simulate", &cfg, &[&args.config], Some(cfg.seed))?;
    write_json(dir, "manifest.json", &manifest)
}

/// 1 for bad input, 2 for numerical failure.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<MaicError>() {
        Some(e) if e.is_numerical() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Negcontrol(a) => cmd_negcontrol(a),
        Command::Simulate(a) => cmd_simulate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
