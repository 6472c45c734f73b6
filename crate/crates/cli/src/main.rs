use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use mpr_estimation::channel::{action_space, arrival_distribution, closed_form_available, Action, ArrivalTable};
use mpr_estimation::estimator::{psi_all, Covariance};
use mpr_estimation::policy::{
    discretize_seeded, finite_horizon_dp, greedy_index, thresholds, value_iteration, PolicyTable, SolverConfig,
};
use mpr_estimation::scenario::{Scenario, PRESETS};
use mpr_estimation::simulator::{self, curves_csv, sweep_mu, trace_csv, CurveKind, CurveSpec, Policy};
use mpr_estimation::stability::{best_subset, check_lemma};
use mpr_estimation::{ArrivalOptions, ChannelParams, Error, Receiver, SystemModel};

#[derive(Parser, Debug)]
#[command(name = "mpr", version, about = "Power allocation for remote estimation over a multi-packet reception channel")]
struct Cli {
    /// Scenario file (TOML).
    #[arg(long, global = true, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in scenario.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Overrides the solver and simulation seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Monte Carlo samples for arrival distributions without a closed form.
    #[arg(long, global = true)]
    samples: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Arrival distribution of every action, one CSV per action.
    Probs,
    /// Discretize the covariance space and solve the discounted problem.
    Solve(SolveArgs),
    /// Simulate one policy and write metrics (and optionally the per-step trace).
    Simulate(SimulateArgs),
    /// Mean power versus mean trace curves over a grid of power prices.
    Sweep(SweepArgs),
    /// Sufficient stability conditions and the modified Riccati check.
    Stability(StabilityArgs),
    /// Threshold-region map over a grid of per-subsystem covariance traces.
    Regions(RegionsArgs),
}

#[derive(Args, Debug)]
struct SolveArgs {
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    centroids: Option<usize>,
    /// Output file, relative to the output directory.
    #[arg(long, default_value = "policy.tbl")]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum PolicyChoice {
    Greedy,
    Table,
    Finite,
    SimpleTx,
    SimpleRc,
    Fixed,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, value_enum, default_value = "greedy")]
    policy: PolicyChoice,
    /// Policy table written by `solve` (for `--policy table`).
    #[arg(long)]
    table: Option<PathBuf>,
    /// Level indices of a fixed action, e.g. `3,3`.
    #[arg(long, value_delimiter = ',')]
    action: Option<Vec<usize>>,
    #[arg(long)]
    mu: Option<f64>,
    /// Stages of the finite-horizon plan.
    #[arg(long, default_value_t = 10)]
    stages: usize,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    /// Also write the per-step trace of the first run.
    #[arg(long)]
    trace: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_value = "0,0.01,0.02,0.05,0.1,0.2,0.5,1,2,5,10")]
    mu: Vec<f64>,
    /// Curves: `simple_tx`, `simple_rc`, `sic_mM`, `nosic_mM`, with an optional
    /// `vi_` (discounted) or `fhK_` (K-stage) prefix.
    #[arg(long, value_delimiter = ',', default_value = "simple_tx,simple_rc,sic_m4")]
    policies: Vec<String>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
}

#[derive(Args, Debug)]
struct StabilityArgs {
    /// Sensor subset; the subset with the largest joint success probability when omitted.
    #[arg(long, value_delimiter = ',')]
    subset: Option<Vec<usize>>,
    /// Also write the modified Riccati trace trajectory as CSV.
    #[arg(long)]
    trace_csv: bool,
}

#[derive(Args, Debug)]
struct RegionsArgs {
    #[arg(long, default_value_t = 0.1)]
    mu: f64,
    #[arg(long, default_value_t = 40)]
    grid: usize,
    /// Largest per-subsystem trace on each axis.
    #[arg(long, default_value_t = 4.0)]
    max_trace: f64,
}

/// Failure classes mapped to distinct exit codes.
#[derive(Debug)]
enum Failure {
    Config(String),
    NotConverged(String),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<Error>() {
            Some(Error::Config { .. }) => Failure::Config(format!("{e:#}")),
            _ => Failure::Other(e),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::NotConverged(msg)) => {
            eprintln!("solver did not converge: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_scenario(cli: &Cli) -> Result<Scenario, Failure> {
    let mut scenario = match (&cli.config, &cli.preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Scenario::from_toml(&text).map_err(|e| Failure::Config(e.to_string()))?
        }
        (None, Some(name)) => Scenario::preset(name).map_err(|e| Failure::Config(e.to_string()))?,
        (None, None) => {
            return Err(Failure::Config(format!("pass --config FILE or --preset {{{}}}", PRESETS.join("|"))))
        }
    };
    if let Some(seed) = cli.seed {
        scenario.solver.seed = seed;
        scenario.sim.seed = seed;
    }
    if let Some(samples) = cli.samples {
        scenario.channel.mc_samples = samples;
    }
    scenario.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(scenario)
}

fn write_out(dir: &Path, name: &Path, contents: &str) -> anyhow::Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    info!("wrote {}", path.display());
    Ok(path)
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    let scenario = load_scenario(cli)?;
    let model = scenario.model().map_err(anyhow::Error::from)?;
    let channel = scenario.channel().map_err(anyhow::Error::from)?;
    let opts = scenario.channel.arrival_options();
    let ctx = Ctx { cli, scenario: &scenario, model: &model, channel: &channel, opts };
    match &cli.command {
        Command::Probs => ctx.probs().map_err(Failure::from),
        Command::Solve(args) => ctx.solve(args),
        Command::Simulate(args) => ctx.simulate(args).map_err(Failure::from),
        Command::Sweep(args) => ctx.sweep(args).map_err(Failure::from),
        Command::Stability(args) => ctx.stability(args).map_err(Failure::from),
        Command::Regions(args) => ctx.regions(args).map_err(Failure::from),
    }
}

struct Ctx<'a> {
    cli: &'a Cli,
    scenario: &'a Scenario,
    model: &'a SystemModel,
    channel: &'a ChannelParams,
    opts: ArrivalOptions,
}

fn levels_label(a: &Action) -> String {
    a.levels().iter().map(|l| l.to_string()).collect::<Vec<_>>().join("-")
}

impl Ctx<'_> {
    fn probs(&self) -> anyhow::Result<()> {
        let mut all = String::from("action,gamma_bits,probability\n");
        for action in action_space(self.channel) {
            let dist = arrival_distribution(&action, self.channel, self.opts);
            let mut csv = String::from("gamma_bits,probability\n");
            for (o, p) in dist.iter() {
                writeln!(csv, "{},{p}", o.to_bit_string())?;
                writeln!(all, "{},{},{p}", levels_label(&action), o.to_bit_string())?;
            }
            let method = if closed_form_available(&action, self.channel) { "closed form" } else { "monte carlo" };
            info!("action {} via {method}", levels_label(&action));
            write_out(&self.cli.out_dir, &PathBuf::from(format!("probs/{}.csv", levels_label(&action))), &csv)?;
        }
        print!("{all}");
        Ok(())
    }

    fn solver_config(&self, mu: Option<f64>) -> SolverConfig {
        SolverConfig { mu: mu.unwrap_or(self.scenario.solver.mu), ..self.scenario.solver.clone() }
    }

    fn solve(&self, args: &SolveArgs) -> Result<(), Failure> {
        let mut cfg = self.solver_config(args.mu);
        if let Some(d) = args.centroids {
            cfg.centroids = d;
        }
        cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
        let table = ArrivalTable::full(self.channel.clone(), self.opts);
        let disc = discretize_seeded(self.model, &table, &cfg).map_err(anyhow::Error::from)?;
        info!("{} centroids from {} pooled covariances", disc.centroids.len(), disc.pool_size);
        let policy = value_iteration(&disc.centroids, self.model, &table, &cfg).map_err(anyhow::Error::from)?;
        write_out(&self.cli.out_dir, &args.out, &policy.serialize())?;
        if !policy.info.converged {
            return Err(Failure::NotConverged(format!(
                "{} sweeps, final delta {:e}",
                policy.info.iterations, policy.info.final_delta
            )));
        }
        println!("iterations={} final_delta={:e}", policy.info.iterations, policy.info.final_delta);
        Ok(())
    }

    fn build_policy(&self, args: &SimulateArgs) -> anyhow::Result<Policy> {
        let mu = args.mu.unwrap_or(self.scenario.solver.mu);
        let full = || ArrivalTable::full(self.channel.clone(), self.opts);
        Ok(match args.policy {
            PolicyChoice::Greedy => Policy::greedy(full(), mu),
            PolicyChoice::SimpleTx => Policy::simple_tx(self.channel, mu, self.opts),
            PolicyChoice::SimpleRc => Policy::simple_rc(self.channel, mu, self.opts),
            PolicyChoice::Table => {
                let path = args.table.as_ref().ok_or_else(|| anyhow!("--policy table needs --table FILE"))?;
                let text = fs::read_to_string(path).with_context(|| format!("reading policy file {}", path.display()))?;
                let table = PolicyTable::parse(&text)?;
                let arrivals = ArrivalTable::full(table.channel.clone(), self.opts);
                Policy::from_table(table, arrivals)?
            }
            PolicyChoice::Finite => {
                let cfg = self.solver_config(Some(mu));
                let table = full();
                let disc = discretize_seeded(self.model, &table, &cfg)?;
                let plan = finite_horizon_dp(&disc.centroids, args.stages, self.model, &table, &cfg)?;
                Policy::finite_horizon(plan, table)
            }
            PolicyChoice::Fixed => {
                let levels = args.action.as_ref().ok_or_else(|| anyhow!("--policy fixed needs --action L1,L2,..."))?;
                let action = Action::from_levels(levels, self.channel)?;
                Policy::fixed(&action, full())?
            }
        })
    }

    fn sim_config(&self, horizon: Option<usize>, runs: Option<usize>, trace: bool) -> simulator::SimConfig {
        let base = &self.scenario.sim;
        simulator::SimConfig {
            horizon: horizon.unwrap_or(base.horizon),
            runs: runs.unwrap_or(base.runs),
            record_trace: trace || base.record_trace,
            ..base.clone()
        }
    }

    fn simulate(&self, args: &SimulateArgs) -> anyhow::Result<()> {
        let policy = self.build_policy(args)?;
        let cfg = self.sim_config(args.horizon, args.runs, args.trace);
        let metrics = simulator::run(self.model, &policy, &cfg)?;
        if metrics.divergent_runs > 0 {
            warn!("{} of {} runs diverged", metrics.divergent_runs, metrics.runs);
        }
        let text = metrics.to_key_values();
        write_out(&self.cli.out_dir, Path::new("metrics.txt"), &text)?;
        if let Some(rows) = &metrics.trace {
            write_out(&self.cli.out_dir, Path::new("trace.csv"), &trace_csv(rows))?;
        }
        print!("{text}");
        Ok(())
    }

    fn curve(&self, name: &str) -> anyhow::Result<CurveSpec> {
        let bad = || anyhow!(Error::Config { field: "policies".into(), reason: format!("unknown curve `{name}`") });
        let base = |receiver| self.channel.with_receiver(receiver);
        match name {
            "simple_tx" => return Ok(CurveSpec { label: name.into(), channel: base(Receiver::Simple), kind: CurveKind::SimpleTx }),
            "simple_rc" => return Ok(CurveSpec { label: name.into(), channel: base(Receiver::Simple), kind: CurveKind::SimpleRc }),
            _ => {}
        }
        let (prefix, rest) = match name.split_once('_') {
            Some((p, r)) if p == "vi" || p.starts_with("fh") => (Some(p), r),
            _ => (None, name),
        };
        let (rx, levels) = rest.split_once("_m").ok_or_else(bad)?;
        let receiver = match rx {
            "sic" => Receiver::Sic,
            "nosic" => Receiver::Simple,
            _ => return Err(bad()),
        };
        let levels: usize = levels.parse().map_err(|_| bad())?;
        let p_max = self.channel.reference_power();
        let channel = ChannelParams::new(
            self.channel.gains.clone(),
            (0..self.channel.n_sensors())
                .map(|_| (0..levels).map(|k| p_max * k as f64 / (levels.max(2) - 1) as f64).collect())
                .collect(),
            self.channel.sigma2,
            self.channel.alpha,
            receiver,
        )?;
        let solver = self.scenario.solver.clone();
        let kind = match prefix {
            None => CurveKind::Greedy,
            Some("vi") => CurveKind::Infinite(solver),
            Some(p) => {
                let horizon: usize = p[2..].parse().map_err(|_| bad())?;
                CurveKind::FiniteHorizon { horizon, solver }
            }
        };
        Ok(CurveSpec { label: name.into(), channel, kind })
    }

    fn sweep(&self, args: &SweepArgs) -> anyhow::Result<()> {
        let specs = args.policies.iter().map(|p| self.curve(p)).collect::<anyhow::Result<Vec<_>>>()?;
        let cfg = self.sim_config(args.horizon, args.runs, false);
        let curves = sweep_mu(self.model, &specs, &args.mu, &cfg, self.opts)?;
        for c in &curves {
            for p in &c.points {
                if let Err(e) = &p.result {
                    warn!("{} at mu={}: {e}", c.label, p.mu);
                }
            }
        }
        let csv = curves_csv(&curves);
        write_out(&self.cli.out_dir, Path::new("sweep.csv"), &csv)?;
        print!("{csv}");
        Ok(())
    }

    fn stability(&self, args: &StabilityArgs) -> anyhow::Result<()> {
        let report = match &args.subset {
            Some(subset) => check_lemma(subset, self.model, self.channel, self.opts)?,
            None => best_subset(self.model, self.channel, self.opts)?,
        };
        let text = report.to_text();
        write_out(&self.cli.out_dir, Path::new("stability.txt"), &text)?;
        if args.trace_csv {
            let mut csv = String::from("k,trace\n");
            for (k, t) in report.riccati.traces.iter().enumerate() {
                writeln!(csv, "{},{t}", k + 1)?;
            }
            write_out(&self.cli.out_dir, Path::new("riccati.csv"), &csv)?;
        }
        print!("{text}");
        Ok(())
    }

    fn regions(&self, args: &RegionsArgs) -> anyhow::Result<()> {
        if self.model.n_sensors() != 2 || !self.model.is_decoupled() {
            bail!(Error::Config { field: "system".into(), reason: "regions need two decoupled subsystems".into() });
        }
        if args.grid < 2 {
            bail!(Error::Config { field: "grid".into(), reason: "must be at least 2".into() });
        }
        let two = self.channel.two_level();
        let th = thresholds(&two, args.mu, self.opts)?;
        let table = ArrivalTable::full(two, self.opts);
        let sizes = self.model.blocks().expect("decoupled").to_vec();
        let mut csv = String::from("trace_p1,trace_p2,psi1,psi2,region,greedy\n");
        for i in 1..=args.grid {
            for j in 1..=args.grid {
                let t1 = args.max_trace * i as f64 / args.grid as f64;
                let t2 = args.max_trace * j as f64 / args.grid as f64;
                let diag: Vec<f64> = sizes
                    .iter()
                    .zip([t1, t2])
                    .flat_map(|(&s, t)| std::iter::repeat_n(t / s as f64, s))
                    .collect();
                let p = Covariance::from_diagonal(&diag)?;
                let psi = psi_all(&p, self.model)?;
                let region = th.classify(psi[0], psi[1]);
                let g = &table.actions[greedy_index(&p, self.model, &table, args.mu)?];
                writeln!(csv, "{t1},{t2},{},{},{region},{}", psi[0], psi[1], levels_label(g))?;
            }
        }
        println!("M1={} M2={} p_e={} (mu={}, receiver={})", th.m1, th.m2, th.p_e, args.mu, self.channel.receiver);
        write_out(&self.cli.out_dir, Path::new("regions.csv"), &csv)?;
        Ok(())
    }
}
