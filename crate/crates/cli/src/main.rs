mod output;

use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sockopt_core::catalogue::{generate_catalogue, CatalogueSpec, FeatureSampling};
use sockopt_core::config::{CatalogueSource, Resolved, RunConfig};
use sockopt_core::environment::{self, LaundryTrigger, SimConfig};
use sockopt_core::error::Error;
use sockopt_core::estimation::{
    self, fit_respondents, stimulus_catalogue, summary_statistics, synthesize_respondents, write_results, BundleDesign,
    ChoiceData, ParamDist, SynthesisSpec, TrialDesign, DEFAULT_RIDGE,
};
use sockopt_core::experiments::{
    default_tau_grid, experiment_grid, experiment_reference, experiment_tradeoff, knee_point, panel_series, pareto_front,
    standard_policies, GridSpec, TradeOffPoint,
};
use sockopt_core::metrics::{RunMetrics, Summary};
use sockopt_core::oracle::{self, InstanceFile, KnapsackInstance, ReductionVariant};
use sockopt_core::policies::{Policy, PolicyKind};
use sockopt_core::rng;

use output::{csv_bytes, json_bytes, OutputSet, RunManifest};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Guard(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Guard(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Guard(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::InvalidInput(_) | Error::Config(_) => CliError::Usage(msg),
            Error::GuardExceeded(_) => CliError::Guard(msg),
            Error::Parse { .. } | Error::Io { .. } | Error::Csv(_) => CliError::Data(msg),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "sockopt", version, about = "Sock ownership simulation, estimation and exact oracles")]
struct Cli {
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, env = "SOCKOPT_JOBS")]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic catalogue CSV.
    GenCatalogue(GenCatalogueArgs),
    /// Run replications of one policy (or `all` four) and write per-run and summary metrics.
    Simulate(SimulateArgs),
    /// Loss-and-wear grid over d and theta.
    Sweep(SweepArgs),
    /// Threshold sweep against the Purist baseline.
    Tradeoff(TradeoffArgs),
    /// Synthesize choice data or fit sensitivity and diversity preference.
    #[command(subcommand)]
    Estimate(EstimateCommand),
    /// Exact solvers and the knapsack reduction check.
    #[command(subcommand)]
    Oracle(OracleCommand),
    /// Rerun the command recorded in a manifest and compare output digests.
    Replay(ReplayArgs),
}

#[derive(Args, Debug)]
struct GenCatalogueArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [32u32, 13, 3])]
    features: Vec<u32>,
    #[arg(long, default_value_t = 5)]
    price_min: u64,
    #[arg(long, default_value_t = 15)]
    price_max: u64,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Run settings; any flag given here overrides the config file.
#[derive(Args, Debug, Clone, Default)]
struct ConfigFlags {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    tau_eta: Option<f64>,
    #[arg(long)]
    tau_xi: Option<f64>,
    #[arg(long)]
    horizon: Option<u32>,
    #[arg(long)]
    kappa: Option<usize>,
    #[arg(long)]
    budget: Option<u64>,
    #[arg(long)]
    theta: Option<u32>,
    #[arg(long = "d")]
    d: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    chi: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    replenishment: Option<bool>,
    #[arg(long, value_enum)]
    laundry: Option<LaundryArg>,
    #[arg(long)]
    catalogue: Option<PathBuf>,
    #[arg(long)]
    catalogue_seed: Option<u64>,
    #[arg(long)]
    n_designs: Option<usize>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum LaundryArg {
    Capacity,
    CapacityOrStockout,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    cfg: ConfigFlags,
    #[arg(long, default_value_t = 60)]
    reps: usize,
    /// Also write one per-day trace CSV per policy and replication.
    #[arg(long)]
    trace: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigFlags,
    /// Named grid; only `default` exists.
    #[arg(long, default_value = "default")]
    grid: String,
    #[arg(long, value_delimiter = ',')]
    d_values: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    theta_values: Option<Vec<u32>>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TradeoffArgs {
    #[command(flatten)]
    cfg: ConfigFlags,
    #[arg(long, value_delimiter = ',')]
    taus: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', default_values_t = ["threshold_mix".to_string(), "orphan_rescue".to_string()])]
    families: Vec<String>,
    #[arg(long, default_value_t = 60)]
    reps: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum EstimateCommand {
    /// Simulated respondents answering both tasks.
    Synthesize(SynthesizeArgs),
    /// Fit both parameters per respondent.
    Fit(FitArgs),
    /// Fit sensitivity from pairwise trials only.
    Chi(SingleFitArgs),
    /// Fit diversity preference from bundle choices only.
    Delta(SingleFitArgs),
}

#[derive(Args, Debug)]
struct SynthesizeArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 500)]
    trials: usize,
    #[arg(long, default_value_t = 200)]
    sets: usize,
    /// Mean of a log-normal sensitivity; the study spread is used when absent.
    #[arg(long, requires = "chi_sigma")]
    chi_mean: Option<f64>,
    #[arg(long, requires = "chi_mean")]
    chi_sigma: Option<f64>,
    #[arg(long, requires = "delta_sigma")]
    delta_mean: Option<f64>,
    #[arg(long, requires = "delta_mean")]
    delta_sigma: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_RIDGE)]
    ridge: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    trials: Option<PathBuf>,
    #[arg(long)]
    bundles: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_RIDGE)]
    ridge: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SingleFitArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = DEFAULT_RIDGE)]
    ridge: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum OracleCommand {
    /// Check that knapsack answers survive the reduction.
    Verify(VerifyArgs),
    /// Solve one instance file exactly.
    Solve(SolveArgs),
}

#[derive(ValueEnum, Debug, Clone, Copy, Default)]
enum VariantArg {
    #[default]
    Repaired,
    AsPublished,
}

impl From<VariantArg> for ReductionVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Repaired => ReductionVariant::Repaired,
            VariantArg::AsPublished => ReductionVariant::AsPublished,
        }
    }
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Random sweep settings as `key=value`: n (max items), trials, seed.
    #[arg(long, num_args = 1.., conflicts_with = "instance")]
    random: Option<Vec<String>>,
    /// Knapsack instance file.
    #[arg(long)]
    instance: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value_t)]
    variant: VariantArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SolveArgs {
    #[arg(long)]
    instance: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    variant: VariantArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let recorded = recordable_args(std::env::args().skip(1));
    match run(cli, recorded) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

// Drop the flags that do not affect outputs.
fn recordable_args(args: impl Iterator<Item = String>) -> Vec<String> {
    let mut out = Vec::new();
    let mut skip = false;
    for a in args {
        if skip {
            skip = false;
            continue;
        }
        match a.as_str() {
            "--out" | "--jobs" => skip = true,
            s if s.starts_with("--out=") || s.starts_with("--jobs=") => {}
            _ => out.push(a),
        }
    }
    out
}

fn run(cli: Cli, recorded: Vec<String>) -> CliResult<()> {
    let jobs = match cli.jobs {
        Some(0) => return Err(CliError::Usage("--jobs must be at least 1".into())),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("--jobs: {e}")))?;
    pool.install(|| dispatch(cli.command, recorded))
}

fn dispatch(command: Command, recorded: Vec<String>) -> CliResult<()> {
    match command {
        Command::GenCatalogue(a) => gen_catalogue(a, recorded),
        Command::Simulate(a) => simulate(a, recorded),
        Command::Sweep(a) => sweep(a, recorded),
        Command::Tradeoff(a) => tradeoff(a, recorded),
        Command::Estimate(c) => estimate(c, recorded),
        Command::Oracle(c) => oracle_cmd(c, recorded),
        Command::Replay(a) => replay(a),
    }
}

fn num(x: f64) -> String {
    // Adding +0 turns -0 into 0.
    format!("{}", x + 0.0)
}

fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn gen_catalogue(a: GenCatalogueArgs, recorded: Vec<String>) -> CliResult<()> {
    let spec = CatalogueSpec {
        n_designs: a.n,
        feature_sizes: a.features,
        price_min: a.price_min,
        price_max: a.price_max,
        alpha: a.alpha,
        seed: a.seed,
        sampling: FeatureSampling::Auto,
    };
    let cat = generate_catalogue(&spec)?;
    let mut bytes = Vec::new();
    cat.write_csv(&mut bytes)?;
    let mut out = OutputSet::default();
    out.seed = Some(a.seed);
    out.add("catalogue.csv", bytes);
    out.add("catalogue_spec.json", json_bytes(&spec));
    out.commit(&a.out, recorded)?;
    println!("wrote {} designs to {}", cat.designs().len(), a.out.join("catalogue.csv").display());
    Ok(())
}

impl ConfigFlags {
    fn overrides(&self) -> RunConfig {
        RunConfig {
            horizon: self.horizon,
            kappa: self.kappa,
            b: self.budget,
            theta: self.theta,
            d: self.d,
            rho: self.rho,
            chi: self.chi,
            gamma: self.gamma,
            alpha: self.alpha,
            delta: self.delta,
            lambda: self.lambda,
            policy: self.policy.clone(),
            tau_eta: self.tau_eta,
            tau_xi: self.tau_xi,
            replenishment: self.replenishment,
            seed: self.seed,
            catalogue: self.catalogue.clone(),
            n_designs: self.n_designs,
            catalogue_seed: self.catalogue_seed,
            laundry: self.laundry.map(|l| match l {
                LaundryArg::Capacity => LaundryTrigger::Capacity,
                LaundryArg::CapacityOrStockout => LaundryTrigger::CapacityOrStockout,
            }),
            ..RunConfig::default()
        }
    }
}

struct Setup {
    merged: RunConfig,
    resolved: Resolved,
    out: OutputSet,
}

// Config file under flags; `policy = "all"` is left for the caller.
fn setup(flags: &ConfigFlags) -> CliResult<Setup> {
    if let Some(p) = flags.policy.as_deref().filter(|&p| p != "all") {
        p.parse::<PolicyKind>().map_err(|e| CliError::Usage(format!("--policy: {e}")))?;
    }
    let mut out = OutputSet::default();
    let base = match &flags.config {
        Some(path) => {
            out.input(path);
            RunConfig::load(path).map_err(|e| CliError::Usage(e.to_string()))?
        }
        None => RunConfig::default(),
    };
    let merged = base.merge(flags.overrides());
    let mut resolvable = merged.clone();
    if resolvable.policy.as_deref() == Some("all") {
        resolvable.policy = None;
    }
    let resolved = resolvable
        .resolve()
        .map_err(|e| CliError::Usage(format!("{e}; pass --seed or set `seed` in the config")))?;
    if let CatalogueSource::File { path, .. } = &resolved.source {
        out.input(path);
    }
    out.seed = Some(resolved.sim.seed);
    let mut snapshot = resolved.snapshot();
    snapshot.policy = merged.policy.clone().or(snapshot.policy);
    snapshot.tau_xi = merged.tau_xi.or(snapshot.tau_xi);
    out.config = Some(snapshot);
    Ok(Setup { merged, resolved, out })
}

fn four_policies(merged: &RunConfig) -> CliResult<Vec<Policy>> {
    let tau_xi = merged
        .tau_xi
        .ok_or_else(|| CliError::Usage("--tau-xi (or `tau_xi` in the config) is required for the mixing policies".into()))?;
    let policies = standard_policies(merged.tau_eta.unwrap_or(0.0), tau_xi);
    for p in &policies {
        Policy::from_parts(p.kind(), p.tau_eta(), p.tau_xi())?;
    }
    Ok(policies)
}

const METRIC_HEADER: [&str; 7] = ["n_socks", "cost_money", "cost_eco", "cost_soc", "infeasible_days", "stranded", "stranded_loss"];

fn metric_row(m: &RunMetrics) -> Vec<String> {
    vec![
        m.socks_purchased.to_string(),
        num(m.money),
        num(m.eco),
        num(m.social),
        m.infeasible_days.to_string(),
        num(m.stranded),
        num(m.stranded_loss),
        num(m.stranded_terminal),
        m.total_wears.to_string(),
        num(m.reward_total),
    ]
}

fn simulate(a: SimulateArgs, recorded: Vec<String>) -> CliResult<()> {
    if a.reps == 0 {
        return Err(CliError::Usage("--reps must be at least 1".into()));
    }
    let Setup { merged, resolved, mut out } = setup(&a.cfg)?;
    let policies = if merged.policy.as_deref() == Some("all") {
        four_policies(&merged)?
    } else {
        vec![resolved.sim.policy]
    };
    let shop = resolved.source.load()?;
    let results = experiment_reference(&resolved.sim, &shop, &policies, a.reps)?;

    let mut header = vec!["replication", "policy"];
    header.extend(METRIC_HEADER);
    header.extend(["stranded_terminal", "total_wears", "reward"]);
    let mut rows = Vec::new();
    for res in &results {
        for (r, m) in res.runs.iter().enumerate() {
            let mut row = vec![r.to_string(), res.policy.kind().slug().to_string()];
            row.extend(metric_row(m));
            rows.push(row);
        }
    }
    out.add("runs.csv", csv_bytes(&header, rows)?);

    let pair = |s: &Summary| [num(s.mean), opt_num(s.ci_half_width)];
    let summary_rows = results.iter().map(|res| {
        let s = &res.summary;
        let mut row = vec![res.policy.kind().slug().to_string()];
        for x in [&s.socks_purchased, &s.money, &s.eco, &s.social, &s.infeasible_days, &s.stranded] {
            row.extend(pair(x));
        }
        row
    });
    out.add(
        "summary.csv",
        csv_bytes(
            &[
                "policy",
                "n_socks",
                "n_socks_ci",
                "cost_money",
                "cost_money_ci",
                "cost_eco",
                "cost_eco_ci",
                "cost_soc",
                "cost_soc_ci",
                "infeasible_days",
                "infeasible_days_ci",
                "stranded",
                "stranded_ci",
            ],
            summary_rows,
        )?,
    );

    if a.trace {
        for &policy in &policies {
            let cfg = SimConfig {
                policy,
                ..resolved.sim.clone()
            };
            for r in 0..a.reps as u64 {
                let trace = environment::run_replication(&cfg, &shop, r)?;
                let rows = trace.days.iter().map(|d| {
                    let (s1, s2) = d.pair.map_or((String::new(), String::new()), |(x, y)| (x.to_string(), y.to_string()));
                    vec![
                        d.day.to_string(),
                        u8::from(d.exposed).to_string(),
                        u8::from(d.feasible).to_string(),
                        s1,
                        s2,
                        opt_num(d.eta),
                        num(d.social_cost),
                        d.washed.to_string(),
                        d.lost.to_string(),
                    ]
                });
                let name = format!("trace_{}_{r:04}.csv", policy.kind().slug());
                out.add(
                    name,
                    csv_bytes(&["day", "Z", "feasible", "sock1", "sock2", "eta", "soc_cost", "washed", "lost"], rows)?,
                );
            }
        }
    }
    out.commit(&a.out, recorded)?;
    for res in &results {
        let s = &res.summary;
        println!(
            "{:<14} socks {:>6.1}  money {:>7.1}  soc {:>7.2}  infeasible {:>6.1}  stranded {:>7.1}",
            res.policy.kind().slug(),
            s.socks_purchased.mean,
            s.money.mean,
            s.social.mean,
            s.infeasible_days.mean,
            s.stranded.mean
        );
    }
    Ok(())
}

fn sweep(a: SweepArgs, recorded: Vec<String>) -> CliResult<()> {
    if a.grid != "default" {
        return Err(CliError::Usage(format!("--grid: unknown grid `{}` (expected default)", a.grid)));
    }
    let Setup { merged, resolved, mut out } = setup(&a.cfg)?;
    let mut grid = GridSpec::default();
    if let Some(d) = a.d_values {
        grid.d_values = d;
    }
    if let Some(t) = a.theta_values {
        grid.theta_values = t;
    }
    if let Some(r) = a.reps {
        grid.replications = r;
    }
    let policies = four_policies(&merged)?;
    let shop = resolved.source.load()?;
    let cells = experiment_grid(&grid, &resolved.sim, &shop, &policies)?;

    let rows = cells.iter().map(|c| {
        let s = &c.summary;
        vec![
            c.theta.to_string(),
            num(c.d),
            c.policy.kind().slug().to_string(),
            num(s.socks_purchased.mean),
            num(s.money.mean),
            num(s.eco.mean),
            num(s.social.mean),
            num(s.infeasible_days.mean),
            num(s.stranded.mean),
            num(s.stranded_loss.mean),
            num(s.stranded_terminal.mean),
            num(c.runs.iter().map(|r| r.money).fold(0.0, f64::max)),
        ]
    });
    out.add(
        "grid.csv",
        csv_bytes(
            &[
                "theta",
                "d",
                "policy",
                "n_socks",
                "cost_money",
                "cost_eco",
                "cost_soc",
                "infeasible_days",
                "stranded",
                "stranded_loss",
                "stranded_terminal",
                "cost_money_max",
            ],
            rows,
        )?,
    );
    for panel in panel_series(&cells) {
        let mut header = vec!["theta".to_string(), "d".to_string()];
        header.extend(panel.policies.iter().map(|p| p.slug().to_string()));
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows = panel.rows.iter().map(|(theta, d, values)| {
            let mut row = vec![theta.to_string(), num(*d)];
            row.extend(values.iter().map(|&v| num(v)));
            row
        });
        out.add(format!("panel_{}.csv", panel.name), csv_bytes(&header, rows)?);
    }
    out.commit(&a.out, recorded)?;
    println!("{} grid rows written to {}", cells.len(), a.out.join("grid.csv").display());
    Ok(())
}

#[derive(Serialize)]
struct Annotated {
    policy: String,
    tau_xi: f64,
    d_soc: f64,
    savings: f64,
}

#[derive(Serialize)]
struct FamilyAnnotations {
    policy: String,
    knee: Option<Annotated>,
    pareto: Vec<Annotated>,
}

#[derive(Serialize)]
struct TradeoffSidecar {
    sign_convention: &'static str,
    families: Vec<FamilyAnnotations>,
    overall: FamilyAnnotations,
}

fn annotate(name: &str, points: &[&TradeOffPoint]) -> FamilyAnnotations {
    let pairs: Vec<(f64, f64)> = points.iter().map(|p| (p.delta_soc, p.savings())).collect();
    let note = |i: usize| Annotated {
        policy: points[i].policy.slug().to_string(),
        tau_xi: points[i].tau_xi,
        d_soc: points[i].delta_soc,
        savings: points[i].savings(),
    };
    FamilyAnnotations {
        policy: name.to_string(),
        knee: knee_point(&pairs).map(note),
        pareto: pareto_front(&pairs).into_iter().map(note).collect(),
    }
}

fn tradeoff(a: TradeoffArgs, recorded: Vec<String>) -> CliResult<()> {
    let Setup { resolved, mut out, .. } = setup(&a.cfg)?;
    let families = a
        .families
        .iter()
        .map(|f| f.parse::<PolicyKind>().map_err(|e| CliError::Usage(format!("--families: {e}"))))
        .collect::<CliResult<Vec<_>>>()?;
    let taus = a.taus.unwrap_or_else(default_tau_grid);
    let shop = resolved.source.load()?;
    let points = experiment_tradeoff(&taus, &resolved.sim, &shop, a.reps, &families)?;

    let rows = points.iter().map(|p| {
        vec![
            p.policy.slug().to_string(),
            num(p.tau_xi),
            num(p.delta_soc),
            num(p.delta_money),
            num(p.delta_eco),
        ]
    });
    out.add("tradeoff.csv", csv_bytes(&["policy", "tau_xi", "d_soc", "d_money", "d_eco"], rows)?);
    let sidecar = TradeoffSidecar {
        sign_convention: "each d_* is the policy mean minus the Purist mean over paired replications; \
                          positive d_soc is added social cost and savings = -d_money",
        families: families
            .iter()
            .map(|&f| annotate(f.slug(), &points.iter().filter(|p| p.policy == f).collect::<Vec<_>>()))
            .collect(),
        overall: annotate("all", &points.iter().collect::<Vec<_>>()),
    };
    out.add("tradeoff.json", json_bytes(&sidecar));
    out.commit(&a.out, recorded)?;
    for p in &points {
        println!(
            "{:<14} tau_xi {:.2}  d_soc {:>8.3}  d_money {:>8.3}",
            p.policy.slug(),
            p.tau_xi,
            p.delta_soc,
            p.delta_money
        );
    }
    Ok(())
}

fn estimate(c: EstimateCommand, recorded: Vec<String>) -> CliResult<()> {
    match c {
        EstimateCommand::Synthesize(a) => synthesize(a, recorded),
        EstimateCommand::Fit(a) => fit(a.trials.as_deref(), a.bundles.as_deref(), a.ridge, &a.out, recorded),
        EstimateCommand::Chi(a) => fit(Some(&a.input), None, a.ridge, &a.out, recorded),
        EstimateCommand::Delta(a) => fit(None, Some(&a.input), a.ridge, &a.out, recorded),
    }
}

fn synthesize(a: SynthesizeArgs, recorded: Vec<String>) -> CliResult<()> {
    let chi = match (a.chi_mean, a.chi_sigma) {
        (Some(m), Some(s)) => ParamDist::around(m, s),
        _ => ParamDist::study_chi(),
    };
    let delta = match (a.delta_mean, a.delta_sigma) {
        (Some(m), Some(s)) => ParamDist::around(m, s),
        _ => ParamDist::study_delta(),
    };
    let spec = SynthesisSpec {
        n: a.n,
        chi,
        delta,
        trials: TrialDesign::new(a.trials),
        bundles: (a.sets > 0).then(|| BundleDesign::new(a.sets, rng::child_seed(a.seed, 0, "bundle_regime"))),
        ridge: a.ridge,
        seed: a.seed,
    };
    let stimuli = stimulus_catalogue(3, 3)?;
    let data = synthesize_respondents(&spec, &stimuli)?;
    let mut out = OutputSet::default();
    out.seed = Some(a.seed);
    let mut trials = Vec::new();
    data.write_trials(&mut trials)?;
    out.add("trials.csv", trials);
    if a.sets > 0 {
        let mut bundles = Vec::new();
        data.write_bundles(&mut bundles)?;
        out.add("bundles.csv", bundles);
    }
    let truth = data.respondents.iter().map(|r| vec![r.id.clone(), opt_num(r.chi_true), opt_num(r.delta_true)]);
    out.add("truth.csv", csv_bytes(&["respondent_id", "chi_true", "delta_true"], truth)?);
    out.commit(&a.out, recorded)?;
    println!("synthesized {} respondents into {}", data.respondents.len(), a.out.display());
    Ok(())
}

fn open(path: &Path) -> CliResult<File> {
    File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn fit(trials: Option<&Path>, bundles: Option<&Path>, ridge: f64, dir: &Path, recorded: Vec<String>) -> CliResult<()> {
    if trials.is_none() && bundles.is_none() {
        return Err(CliError::Usage("give --trials, --bundles or both".into()));
    }
    let mut out = OutputSet::default();
    let t = trials.map(|p| open(p).map(|f| (f, p))).transpose()?;
    let b = bundles.map(|p| open(p).map(|f| (f, p))).transpose()?;
    for p in trials.into_iter().chain(bundles) {
        out.input(p);
    }
    let data = ChoiceData::read(t, b)?;
    let observations: usize = data.respondents.iter().map(|r| r.trials.len() + r.bundle_sets.len()).sum();
    if observations == 0 {
        return Err(CliError::Data("no observations in the input files".into()));
    }
    let fits = fit_respondents(&data, ridge)?;
    let mut results = Vec::new();
    write_results(&fits, &mut results)?;
    out.add("results.csv", results);

    let chi: Vec<f64> = fits.iter().filter_map(|f| f.chi.map(|r| r.estimate)).collect();
    let delta: Vec<f64> = fits.iter().filter_map(|f| f.delta.map(|r| r.estimate)).collect();
    if !chi.is_empty() && chi.len() == fits.len() && delta.len() == fits.len() {
        out.add("summary.json", json_bytes(&summary_statistics(&chi, &delta, None)?));
    }
    out.commit(dir, recorded)?;
    let unconverged = fits
        .iter()
        .flat_map(|f| [f.chi, f.delta])
        .flatten()
        .filter(|r| r.status != estimation::FitStatus::Converged)
        .count();
    println!("fitted {} respondents ({unconverged} fits not converged)", fits.len());
    Ok(())
}

fn oracle_cmd(c: OracleCommand, recorded: Vec<String>) -> CliResult<()> {
    match c {
        OracleCommand::Verify(a) => verify(a, recorded),
        OracleCommand::Solve(a) => solve(a, recorded),
    }
}

fn read_instance(path: &Path) -> CliResult<InstanceFile> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    InstanceFile::parse(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct VerifyReport {
    variant: ReductionVariant,
    trials: usize,
    equivalent: usize,
}

fn verify(a: VerifyArgs, recorded: Vec<String>) -> CliResult<()> {
    let variant: ReductionVariant = a.variant.into();
    let mut out = OutputSet::default();
    let instances: Vec<KnapsackInstance> = match (&a.random, &a.instance) {
        (Some(tokens), None) => {
            let (mut n, mut trials, mut seed) = (6usize, 50usize, a.seed);
            for tok in tokens {
                let (k, v) = tok
                    .split_once('=')
                    .ok_or_else(|| CliError::Usage(format!("--random: expected key=value, got `{tok}`")))?;
                let bad = |_| CliError::Usage(format!("--random: bad value in `{tok}`"));
                match k {
                    "n" => n = v.parse().map_err(bad)?,
                    "trials" => trials = v.parse().map_err(bad)?,
                    "seed" => seed = Some(v.parse().map_err(bad)?),
                    _ => return Err(CliError::Usage(format!("--random: unknown key `{k}`"))),
                }
            }
            let seed = seed.ok_or_else(|| CliError::Usage("a seed is required (--seed or seed=...)".into()))?;
            out.seed = Some(seed);
            (0..trials as u64)
                .map(|i| oracle::random_knapsack(&mut rng::stream(seed, i, "knapsack"), n))
                .collect()
        }
        (None, Some(path)) => match read_instance(path)? {
            InstanceFile::Knapsack { items, capacity, target } => {
                out.input(path);
                vec![KnapsackInstance { items, capacity, target }]
            }
            _ => return Err(CliError::Data(format!("{}: verify needs a knapsack instance", path.display()))),
        },
        _ => return Err(CliError::Usage("give exactly one of --random or --instance".into())),
    };

    use rayon::prelude::*;
    let checks = instances
        .par_iter()
        .map(|k| oracle::check_reduction(k, variant))
        .collect::<Result<Vec<_>, _>>()?;
    let equivalent = checks.iter().filter(|c| c.equivalent()).count();
    println!("{equivalent}/{} equivalent", checks.len());
    if let Some(dir) = &a.out {
        let rows = instances.iter().zip(&checks).enumerate().map(|(i, (k, c))| {
            let items: Vec<String> = k.items.iter().map(|(w, v)| format!("{w}:{v}")).collect();
            vec![
                i.to_string(),
                items.join(" "),
                k.capacity.to_string(),
                k.target.to_string(),
                c.knapsack_optimum.to_string(),
                c.plan.value.to_string(),
                c.knapsack_yes.to_string(),
                c.plan_yes.to_string(),
                c.equivalent().to_string(),
            ]
        });
        out.add(
            "verify.csv",
            csv_bytes(
                &["trial", "items", "capacity", "target", "knapsack_opt", "plan_value", "knapsack_yes", "plan_yes", "equivalent"],
                rows,
            )?,
        );
        out.add(
            "verify.json",
            json_bytes(&VerifyReport {
                variant,
                trials: checks.len(),
                equivalent,
            }),
        );
        out.commit(dir, recorded)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct PlanReport {
    value: String,
    value_approx: f64,
    meets_threshold: Option<bool>,
    purchase: Vec<String>,
    schedule: Vec<Option<(String, String)>>,
}

fn solve(a: SolveArgs, recorded: Vec<String>) -> CliResult<()> {
    let file = read_instance(&a.instance)?;
    let report = match &file {
        InstanceFile::Knapsack { items, capacity, target } => {
            let k = KnapsackInstance {
                items: items.clone(),
                capacity: *capacity,
                target: *target,
            };
            let check = oracle::check_reduction(&k, a.variant.into())?;
            serde_json::json!({
                "knapsack_optimum": check.knapsack_optimum,
                "knapsack_yes": check.knapsack_yes,
                "plan_value": check.plan.value.to_string(),
                "plan_yes": check.plan_yes,
                "equivalent": check.equivalent(),
            })
        }
        InstanceFile::SockPlan { .. } => {
            let inst = file.plan().map_err(|e| CliError::Data(format!("{}: {e}", a.instance.display())))?;
            let sol = oracle::brute_force_sockplan(&inst)?;
            let label = |i: usize| inst.socks[i].label.clone();
            serde_json::to_value(PlanReport {
                value: sol.value.to_string(),
                value_approx: *sol.value.numer() as f64 / *sol.value.denom() as f64,
                meets_threshold: inst.threshold.map(|t| sol.value >= t),
                purchase: sol.purchase.iter().map(|&i| label(i)).collect(),
                schedule: sol.schedule.iter().map(|e| e.map(|(x, y)| (label(x), label(y)))).collect(),
            })
            .expect("report serializes")
        }
        InstanceFile::Coverage(c) => {
            let inst = oracle::CoverageInstance::new(c.weights.clone(), c.sets.clone(), c.costs.clone(), c.budget)
                .map_err(|e| CliError::Data(format!("{}: {e}", a.instance.display())))?;
            let greedy = oracle::sock_design_greedy(&inst);
            let exact = oracle::brute_force_coverage(&inst)?;
            serde_json::json!({
                "greedy": {"selection": greedy.selection, "value": greedy.value},
                "optimum": {"selection": exact.selection, "value": exact.value},
            })
        }
    };
    println!("{}", serde_json::to_string_pretty(&report).expect("json"));
    if let Some(dir) = &a.out {
        let mut out = OutputSet::default();
        out.input(&a.instance);
        out.add("solution.json", json_bytes(&report));
        out.commit(dir, recorded)?;
    }
    Ok(())
}

fn replay(a: ReplayArgs) -> CliResult<()> {
    let manifest = RunManifest::load(&a.manifest)?;
    for input in &manifest.inputs {
        let now = output::digest_file(Path::new(&input.path))?;
        if now.sha256 != input.sha256 {
            return Err(CliError::Data(format!("input {} changed since the manifest was written", input.path)));
        }
    }
    if manifest.command.first().is_some_and(|c| c == "replay") {
        return Err(CliError::Usage("manifest records a replay".into()));
    }
    let mut argv = vec!["sockopt".to_string()];
    argv.extend(manifest.command.iter().cloned());
    argv.push("--out".into());
    argv.push(a.out.display().to_string());
    let cli = Cli::try_parse_from(&argv).map_err(|e| CliError::Usage(format!("manifest command: {e}")))?;
    dispatch(cli.command, manifest.command.clone())?;

    let fresh = RunManifest::load(&a.out.join(output::MANIFEST))?;
    if fresh.outputs == manifest.outputs {
        println!("identical: {} files", fresh.outputs.len());
        Ok(())
    } else {
        let differing: Vec<&str> = fresh
            .outputs
            .iter()
            .filter(|f| !manifest.outputs.contains(f))
            .map(|f| f.path.as_str())
            .collect();
        Err(CliError::Data(format!("outputs differ from the manifest: {}", differing.join(", "))))
    }
}
