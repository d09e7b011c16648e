use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::Deserialize;

use twinopt::cohort::{filter_plausible, generate_cohort, load_cohort, save_cohort, PlausibilityBound, SpreadSpec};
use twinopt::model::ModelDefinition;
use twinopt::monitor::{load_properties, PropertySet};
use twinopt::records::{apply_exclusion, ingest, save_records, synthesise_record, ExclusionCriteria, SynthSpec};
use twinopt::search::{optimise, DecisionOrder, DoseMenu, Robustness, SearchConfig, SearchStatus};
use twinopt::sim::{simulate, DoseEvent, SimError, SimulationConfig};
use twinopt::trial::{run_trial, write_report, TrialConfig};
use twinopt::twin::{compute_twins, read_twin_report, write_twin_report, MatchConfig};

/// Directory searched for relative config paths not found from the working directory.
const CONFIG_DIR_ENV: &str = "TWINOPT_CONFIG_DIR";

#[derive(Parser)]
#[command(name = "twinopt", version, about = "Digital-twin treatment optimisation and in-silico trials")]
struct Cli {
    /// Log filter: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    log_level: log::LevelFilter,
    /// Seed for every stochastic step (default 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Fallback directory for relative config paths.
    #[arg(long, global = true, env = CONFIG_DIR_ENV)]
    config_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one parameterisation and write its trajectory CSV.
    Simulate(SimulateArgs),
    /// Generate or filter virtual-patient cohorts.
    #[command(subcommand)]
    Cohort(CohortCommand),
    /// Validate or synthesise clinical records.
    #[command(subcommand)]
    Records(RecordsCommand),
    /// Rank cohort members against each clinical record.
    Twins(TwinsArgs),
    /// Search the optimal dosing plan for one patient's twins.
    Optimize(OptimizeArgs),
    /// Run in-silico clinical trials.
    #[command(subcommand)]
    Trial(TrialCommand),
}

#[derive(Args)]
struct SimulateArgs {
    /// Built-in model name or model file.
    #[arg(long, default_value = "surrogate")]
    model: String,
    /// Simulated days.
    #[arg(long)]
    horizon: f64,
    #[arg(long)]
    out: PathBuf,
    /// Dose as TIME:DRUG:AMOUNT; repeatable.
    #[arg(long = "dose", value_parser = parse_dose)]
    doses: Vec<DoseEvent>,
    /// Simulation settings file.
    #[arg(long)]
    sim: Option<PathBuf>,
}

#[derive(Subcommand)]
enum CohortCommand {
    /// Draw a cohort around the model's reference parameters.
    Gen {
        #[arg(long, default_value = "surrogate")]
        model: String,
        #[arg(long)]
        n: usize,
        /// Spread file with a default half-width and per-parameter overrides.
        #[arg(long)]
        spread: Option<PathBuf>,
        /// Uniform relative half-width used without a spread file.
        #[arg(long, default_value_t = 0.2, conflicts_with = "spread")]
        spread_default: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keep the members whose drug-free observables stay within bounds.
    Filter {
        #[arg(long, default_value = "surrogate")]
        model: String,
        #[arg(long)]
        cohort: PathBuf,
        /// Bounds file with `[[bound]]` entries.
        #[arg(long)]
        bounds: PathBuf,
        #[arg(long, default_value_t = 30.0)]
        horizon: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum RecordsCommand {
    /// Parse a record CSV and report exclusions.
    Validate {
        #[arg(long)]
        records: PathBuf,
        #[arg(long, default_value = "surrogate")]
        model: String,
        /// Exclusion criteria file.
        #[arg(long)]
        exclusion: Option<PathBuf>,
    },
    /// Sample a record from one cohort member.
    Synth {
        #[arg(long, default_value = "surrogate")]
        model: String,
        #[arg(long)]
        vp: String,
        #[arg(long)]
        cohort: PathBuf,
        /// File of sample times in days, separated by commas or whitespace.
        #[arg(long)]
        times: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Observable to sample; repeatable, all when omitted.
        #[arg(long = "observable")]
        observables: Vec<String>,
        /// Dose received while measured, as TIME:DRUG:AMOUNT; repeatable.
        #[arg(long = "dose", value_parser = parse_dose)]
        doses: Vec<DoseEvent>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TwinsArgs {
    #[arg(long, default_value = "surrogate")]
    model: String,
    #[arg(long)]
    cohort: PathBuf,
    #[arg(long)]
    records: PathBuf,
    /// Matching configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum RobustArg {
    Best,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum OrderArg {
    Descending,
    Ascending,
}

#[derive(Args)]
struct OptimizeArgs {
    #[arg(long, default_value = "surrogate")]
    model: String,
    /// Twin report as written by `twins`.
    #[arg(long)]
    twin_set: PathBuf,
    /// Cohort the twin report refers to.
    #[arg(long)]
    cohort: PathBuf,
    /// Patient to optimise for; required when the report holds several.
    #[arg(long)]
    patient: Option<String>,
    #[arg(long)]
    properties: PathBuf,
    #[arg(long)]
    menu: PathBuf,
    #[arg(long)]
    horizon: u32,
    /// Plan must hold on the best twin or on all accepted twins.
    #[arg(long, value_enum, default_value = "best")]
    robust: RobustArg,
    #[arg(long, default_value_t = 1_000_000)]
    budget: u64,
    #[arg(long, value_enum, default_value = "descending")]
    order: OrderArg,
    /// Disable conflict-directed backjumping.
    #[arg(long)]
    chronological: bool,
    /// Simulation settings file.
    #[arg(long)]
    sim: Option<PathBuf>,
    /// Plan CSV destination; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum TrialCommand {
    /// Run a trial described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; overrides the config value.
        #[arg(long)]
        workers: Option<usize>,
    },
}

/// Failure classes mapped onto exit codes.
enum Failure {
    Validation(anyhow::Error),
    Negative(String),
    Internal(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Negative(_) => 2,
            Failure::Internal(_) => 3,
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Validation(e.into())
    }
}

type Outcome = Result<u8, Failure>;

/// Feasible plan found but optimality unproven when the budget ran out.
const EXIT_FEASIBLE_UNPROVEN: u8 = 4;

fn internal(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Internal(e.into())
}

fn parse_dose(s: &str) -> Result<DoseEvent, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [time, drug, amount] = parts[..] else {
        return Err(format!("expected TIME:DRUG:AMOUNT, got '{s}'"));
    };
    let time = time.parse().map_err(|_| format!("bad dose time '{time}'"))?;
    let amount = amount.parse().map_err(|_| format!("bad dose amount '{amount}'"))?;
    Ok(DoseEvent::new(time, drug, amount))
}

struct Ctx {
    seed: u64,
    config_dir: Option<PathBuf>,
}

impl Ctx {
    /// Resolves an input path, falling back to the config directory.
    fn input(&self, path: &Path) -> Result<PathBuf, Failure> {
        if path.exists() {
            return Ok(path.to_path_buf());
        }
        if let Some(dir) = self.config_dir.as_ref().filter(|_| path.is_relative()) {
            let candidate = dir.join(path);
            if candidate.exists() {
                return Ok(candidate);
            }
        }
        Err(anyhow!("input file '{}' does not exist", path.display()).into())
    }

    fn model(&self, name: &str) -> Result<ModelDefinition, Failure> {
        if name == "surrogate" {
            return Ok(ModelDefinition::surrogate());
        }
        let path = self.input(Path::new(name))?;
        Ok(ModelDefinition::from_file(path)?)
    }

    fn sim(&self, path: Option<&Path>) -> Result<SimulationConfig, Failure> {
        match path {
            None => Ok(SimulationConfig::default()),
            Some(p) => {
                let text = read(&self.input(p)?)?;
                let cfg: SimulationConfig = toml::from_str(&text).with_context(|| format!("{}", p.display()))?;
                cfg.validate()?;
                Ok(cfg)
            }
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    Ok(std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?)
}

/// Rejects outputs whose parent directory is missing, before any work starts.
fn output(path: &Path) -> Result<(), Failure> {
    match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(dir) if !dir.is_dir() => Err(anyhow!("output directory '{}' does not exist", dir.display()).into()),
        _ => Ok(()),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).with_context(|| format!("creating {}", path.display())).map_err(internal)
}

fn run_simulate(ctx: &Ctx, a: SimulateArgs) -> Outcome {
    let model = ctx.model(&a.model)?;
    let sim = ctx.sim(a.sim.as_deref())?;
    output(&a.out)?;
    let traj = match simulate(&model, &model.default_params(), &model.initial_state(), &a.doses, a.horizon, &sim) {
        Ok(t) => t,
        Err(e @ SimError::Diverged { .. }) => return Err(Failure::Negative(e.to_string())),
        Err(e) => return Err(e.into()),
    };
    let mut out = create(&a.out)?;
    traj.write_csv(&model, &mut out).and_then(|_| out.flush()).map_err(internal)?;
    info!("wrote {} samples to {}", traj.len(), a.out.display());
    Ok(0)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BoundsFile {
    #[serde(default)]
    bound: Vec<PlausibilityBound>,
}

fn run_cohort(ctx: &Ctx, cmd: CohortCommand) -> Outcome {
    match cmd {
        CohortCommand::Gen { model, n, spread, spread_default, out } => {
            let model = ctx.model(&model)?;
            let spec = match spread {
                Some(p) => {
                    let text = read(&ctx.input(&p)?)?;
                    toml::from_str::<SpreadSpec>(&text).with_context(|| format!("{}", p.display()))?
                }
                None => SpreadSpec::uniform(spread_default),
            };
            output(&out)?;
            let spread = spec.resolve(&model)?;
            let cohort = generate_cohort(&model, &model.default_params(), &spread, n, ctx.seed)?;
            save_cohort(&out, &cohort).map_err(internal)?;
            info!("generated {n} virtual patients into {}", out.display());
        }
        CohortCommand::Filter { model, cohort, bounds, horizon, out } => {
            let model = ctx.model(&model)?;
            let cohort = load_cohort(ctx.input(&cohort)?, &model)?;
            let p = ctx.input(&bounds)?;
            let file: BoundsFile = toml::from_str(&read(&p)?).with_context(|| format!("{}", p.display()))?;
            output(&out)?;
            let outcome = filter_plausible(&cohort, &model, &file.bound, horizon, &SimulationConfig::default())?;
            save_cohort(&out, &outcome.cohort).map_err(internal)?;
            info!(
                "kept {} of {} members ({} diverged)",
                outcome.cohort.len(),
                cohort.len(),
                outcome.diverged.len()
            );
        }
    }
    Ok(0)
}

fn parse_times(text: &str) -> Result<Vec<f64>, Failure> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| anyhow!("bad sample time '{s}'").into()))
        .collect()
}

fn run_records(ctx: &Ctx, cmd: RecordsCommand) -> Outcome {
    match cmd {
        RecordsCommand::Validate { records, model, exclusion } => {
            let model = ctx.model(&model)?;
            let records = ingest(ctx.input(&records)?, Some(&model))?;
            let criteria = match exclusion {
                Some(p) => {
                    let p = ctx.input(&p)?;
                    toml::from_str::<ExclusionCriteria>(&read(&p)?).with_context(|| format!("{}", p.display()))?
                }
                None => ExclusionCriteria::default(),
            };
            criteria.validate()?;
            let outcome = apply_exclusion(&records, &criteria);
            let stdout = std::io::stdout();
            let mut out = stdout.lock();
            let measurements: usize = records.iter().map(|r| r.measurements.len()).sum();
            writeln!(out, "records = {}", records.len()).map_err(internal)?;
            writeln!(out, "measurements = {measurements}").map_err(internal)?;
            writeln!(out, "kept = {}", outcome.kept.len()).map_err(internal)?;
            for (record, reason) in &outcome.excluded {
                writeln!(out, "excluded {} {}", record.patient_id, reason.as_str()).map_err(internal)?;
            }
        }
        RecordsCommand::Synth { model, vp, cohort, times, noise, observables, doses, out } => {
            let model = ctx.model(&model)?;
            let cohort = load_cohort(ctx.input(&cohort)?, &model)?;
            let times = parse_times(&read(&ctx.input(&times)?)?)?;
            output(&out)?;
            let member = cohort.get(&vp).ok_or_else(|| anyhow!("cohort has no member '{vp}'"))?;
            let mut spec = SynthSpec::new(times, noise, ctx.seed);
            spec.observables = observables;
            spec.doses = doses;
            let record = synthesise_record(member, &model, &spec)?;
            save_records(&out, &[record]).map_err(internal)?;
        }
    }
    Ok(0)
}

fn run_twins(ctx: &Ctx, a: TwinsArgs) -> Outcome {
    let model = ctx.model(&a.model)?;
    let cohort = load_cohort(ctx.input(&a.cohort)?, &model)?;
    let records = ingest(ctx.input(&a.records)?, Some(&model))?;
    let cfg = match &a.config {
        Some(p) => {
            let p = ctx.input(p)?;
            toml::from_str::<MatchConfig>(&read(&p)?).with_context(|| format!("{}", p.display()))?
        }
        None => MatchConfig::default(),
    };
    output(&a.out)?;
    let sets = records.iter().map(|r| compute_twins(&cohort, r, &model, &cfg)).collect::<Result<Vec<_>, _>>()?;
    for set in sets.iter().filter(|s| !s.has_twin()) {
        warn!("patient {} has no digital twin", set.patient_id);
    }
    let mut out = create(&a.out)?;
    write_twin_report(&sets, &mut out).and_then(|_| out.flush()).map_err(internal)?;
    Ok(0)
}

fn run_optimize(ctx: &Ctx, a: OptimizeArgs) -> Outcome {
    let model = ctx.model(&a.model)?;
    let sets = read_twin_report(&read(&ctx.input(&a.twin_set)?)?)?;
    let cohort = load_cohort(ctx.input(&a.cohort)?, &model)?;
    let props = PropertySet::new(&model, load_properties(ctx.input(&a.properties)?)?)?;
    let menu = DoseMenu::load(&model, ctx.input(&a.menu)?)?;
    let sim = ctx.sim(a.sim.as_deref())?;
    if let Some(out) = &a.out {
        output(out)?;
    }
    let set = match &a.patient {
        Some(id) => sets.iter().find(|s| &s.patient_id == id).ok_or_else(|| anyhow!("no twin set for patient '{id}'"))?,
        None if sets.len() == 1 => &sets[0],
        None => return Err(anyhow!("twin report holds {} patients; pass --patient", sets.len()).into()),
    };
    if !set.has_twin() {
        return Err(Failure::Negative(format!("patient {} has no digital twin", set.patient_id)));
    }
    let twins = set
        .accepted
        .iter()
        .map(|t| cohort.get(&t.vp_id).map(|vp| vp.params.clone()).ok_or_else(|| anyhow!("cohort has no member '{}'", t.vp_id)))
        .collect::<Result<Vec<_>, _>>()?;
    let cfg = SearchConfig {
        horizon: a.horizon,
        robustness: match a.robust {
            RobustArg::Best => Robustness::BestTwin,
            RobustArg::All => Robustness::AllAccepted,
        },
        budget: a.budget,
        order: match a.order {
            OrderArg::Descending => DecisionOrder::Descending,
            OrderArg::Ascending => DecisionOrder::Ascending,
        },
        backjumping: !a.chronological,
        sim,
    };
    let result = optimise(&model, &twins, &props, &menu, &cfg)?;
    let s = &result.stats;
    eprintln!(
        "status {} cost {} nodes {} prunes {} backjumps {}",
        result.status.as_str(),
        result.cost,
        s.nodes_expanded,
        s.prunes,
        s.backjumps
    );
    if let Some(plan) = &result.plan {
        match &a.out {
            Some(p) => {
                let mut out = create(p)?;
                plan.write_csv(&model, &mut out).and_then(|_| out.flush()).map_err(internal)?;
            }
            None => plan.write_csv(&model, std::io::stdout().lock()).map_err(internal)?,
        }
    }
    Ok(match result.status {
        SearchStatus::Optimal => 0,
        SearchStatus::FeasibleBudgetExhausted => EXIT_FEASIBLE_UNPROVEN,
        SearchStatus::Infeasible | SearchStatus::InfeasibleBudgetExhausted => 2,
    })
}

fn run_trial_cmd(ctx: &Ctx, explicit_seed: bool, cmd: TrialCommand) -> Outcome {
    let TrialCommand::Run { config, out, workers } = cmd;
    let (cfg, base) = TrialConfig::load(ctx.input(&config)?)?;
    let mut trial = cfg.into_trial(&base)?;
    if explicit_seed {
        trial.seed = ctx.seed;
    }
    if let Some(w) = workers {
        trial.workers = w;
    }
    info!("trial seed {} on {} workers", trial.seed, trial.workers);
    let report = run_trial(&trial)?;
    let files = write_report(&report, &trial.model, &out).map_err(internal)?;
    for a in &report.aggregates {
        eprintln!("{}: {}/{} successes", a.arm, a.successes, a.n);
    }
    info!("wrote {} files under {}", files.len(), out.display());
    Ok(0)
}

fn dispatch(cli: Cli) -> Outcome {
    let ctx = Ctx { seed: cli.seed.unwrap_or(0), config_dir: cli.config_dir };
    info!("seed {}{}", ctx.seed, if cli.seed.is_none() { " (default)" } else { "" });
    match cli.command {
        Command::Simulate(a) => run_simulate(&ctx, a),
        Command::Cohort(c) => run_cohort(&ctx, c),
        Command::Records(c) => run_records(&ctx, c),
        Command::Twins(a) => run_twins(&ctx, a),
        Command::Optimize(a) => run_optimize(&ctx, a),
        Command::Trial(c) => run_trial_cmd(&ctx, cli.seed.is_some(), c),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new().filter_level(cli.log_level).format_timestamp(None).init();
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| dispatch(cli))) {
        Ok(Ok(code)) => ExitCode::from(code),
        Ok(Err(f)) => {
            match &f {
                Failure::Validation(e) | Failure::Internal(e) => eprintln!("error: {e:#}"),
                Failure::Negative(msg) => eprintln!("{msg}"),
            }
            ExitCode::from(f.code())
        }
        Err(_) => ExitCode::from(3),
    }
}
