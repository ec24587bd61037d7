use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use evsched::neural::Checkpoint;
use evsched::runner::{evaluate, make_policy, write_report_table, EpisodeOptions, EvRouter, EvalJob, PolicyKind, RouterKind};
use evsched::scenario::{greenwave_tradeoff_scenario, synthetic_scenario, SyntheticConfig};
use evsched::trainer::{train_from, write_curve};
use evsched::{Config, Error, FlowSpec, RoadGraph, Scenario, VehicleClass, VehicleId};

#[derive(Parser)]
#[command(name = "evsched", version, about = "Emergency-vehicle aware signal control: generate, train, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a generated scenario file.
    Generate(GenerateArgs),
    /// Train the shared Q-network and write checkpoint, curve and resolved config.
    Train(TrainArgs),
    /// Evaluate a policy over seeds and write the report table.
    Eval(EvalArgs),
    /// Export one EV's trajectory and the phase bands along its route.
    Spacetime(SpacetimeArgs),
}

#[derive(Args)]
struct Common {
    /// Flat TOML config; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenerateArgs {
    /// synthetic6x6, grid(R,C) or greenwave-tradeoff
    kind: GenKind,
    #[arg(long)]
    out: PathBuf,
    /// Demand horizon in seconds.
    #[arg(long, default_value_t = 3600)]
    horizon: u32,
    /// Corridor length for greenwave-tradeoff.
    #[arg(long, default_value_t = 6)]
    length: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    /// Learned policy whose router is used during training.
    #[arg(long, default_value = "levid-dy")]
    policy: PolicyKind,
    #[arg(long)]
    router: Option<RouterKind>,
    /// Continue from an existing checkpoint.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args)]
struct PolicyArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    policy: PolicyKind,
    /// Defaults to the policy's own router.
    #[arg(long)]
    router: Option<RouterKind>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Mark this share of vehicles as EVs, drawn per seed.
    #[arg(long)]
    ev_share: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: PolicyArgs,
    /// Comma-separated evaluation seeds; defaults to --seed or the config seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SpacetimeArgs {
    #[command(flatten)]
    run: PolicyArgs,
    #[arg(long = "ev")]
    ev_id: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum GenKind {
    Synthetic6x6,
    Grid(usize, usize),
    GreenwaveTradeoff,
}

impl FromStr for GenKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "synthetic6x6" => return Ok(GenKind::Synthetic6x6),
            "greenwave-tradeoff" => return Ok(GenKind::GreenwaveTradeoff),
            _ => {}
        }
        let dims = s
            .strip_prefix("grid(")
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(|| format!("unknown scenario kind {s:?}"))?;
        let parts: Vec<_> = dims.split(',').map(|p| p.trim().parse::<usize>()).collect();
        match parts.as_slice() {
            [Ok(r), Ok(c)] if *r > 0 && *c > 0 => Ok(GenKind::Grid(*r, *c)),
            _ => Err(format!("expected grid(ROWS,COLS) with positive sizes, got {s:?}")),
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) => 1,
        Error::Parse(_)
        | Error::Io(_)
        | Error::UnknownId { .. }
        | Error::InvalidArgument(_)
        | Error::Invariant { .. }
        | Error::Routing(_) => 2,
        Error::Shape(_) | Error::Query(_) | Error::Simulation { .. } => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Generate(a) => generate(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Spacetime(a) => spacetime(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn resolve_config(common: &Common) -> evsched::Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => with_path(p, Config::load(p))?,
        None => Config::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn with_path<T>(path: &Path, r: evsched::Result<T>) -> evsched::Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        e => e,
    })
}

fn load(path: &Path) -> evsched::Result<(Arc<RoadGraph>, FlowSpec)> {
    let s = with_path(path, Scenario::load(path))?;
    Ok((Arc::new(s.graph), s.flows))
}

fn create(path: &Path) -> evsched::Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn generate(a: &GenerateArgs) -> evsched::Result<()> {
    let scenario = match a.kind {
        GenKind::Synthetic6x6 => synthetic_scenario(&SyntheticConfig { horizon_s: a.horizon, ..SyntheticConfig::synthetic6x6() })?,
        GenKind::Grid(r, c) => synthetic_scenario(&SyntheticConfig { horizon_s: a.horizon, ..SyntheticConfig::grid(r, c) })?,
        GenKind::GreenwaveTradeoff => greenwave_tradeoff_scenario(a.length, a.horizon)?,
    };
    create(&a.out)?.write_all(scenario.to_json_string().as_bytes())?;
    log::info!(
        "wrote {} intersections and {} vehicles to {}",
        scenario.graph.intersections().len(),
        scenario.flows.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: &TrainArgs) -> evsched::Result<()> {
    if !a.policy.is_learned() {
        return Err(Error::Usage(format!("policy {} is not trainable", a.policy)));
    }
    let cfg = resolve_config(&a.common)?;
    let (graph, flows) = load(&a.scenario)?;
    let init = a.init.as_deref().map(|p| with_path(p, Checkpoint::load(p))).transpose()?.map(|c| c.params);
    let router = a.router.unwrap_or(a.policy.default_router());
    fs::create_dir_all(&a.out)?;
    cfg.save(a.out.join("config.toml"))?;
    let outcome = train_from(graph, &flows, &cfg, router, init)?;
    Checkpoint::new(outcome.params).save(a.out.join("checkpoint.json"))?;
    write_curve(create(&a.out.join("curve.csv"))?, &outcome.curve)?;
    if let Some(last) = outcome.curve.last() {
        log::info!("episode {}: ov {:?} ev {:?} loss {:?}", last.episode, last.avg_tt_ov, last.avg_tt_ev, last.mean_loss);
    }
    Ok(())
}

struct Loaded {
    cfg: Config,
    graph: Arc<RoadGraph>,
    flows: FlowSpec,
    router: RouterKind,
    params: Option<evsched::neural::QNetworkParams>,
}

impl PolicyArgs {
    fn load(&self) -> evsched::Result<Loaded> {
        let cfg = resolve_config(&self.common)?;
        let params = match (&self.checkpoint, self.policy.is_learned()) {
            (Some(p), _) => Some(with_path(p, Checkpoint::load(p))?.params),
            (None, true) => return Err(Error::Usage(format!("policy {} needs --checkpoint", self.policy))),
            (None, false) => None,
        };
        let (graph, flows) = load(&self.scenario)?;
        let router = self.router.unwrap_or(self.policy.default_router());
        Ok(Loaded { cfg, graph, flows, router, params })
    }
}

impl Loaded {
    fn job<'a>(&'a self, run: &PolicyArgs) -> EvalJob<'a> {
        EvalJob {
            graph: self.graph.clone(),
            flows: &self.flows,
            cfg: &self.cfg,
            policy: run.policy,
            router: self.router,
            params: self.params.as_ref(),
            ev_share: run.ev_share,
        }
    }
}

fn eval(a: &EvalArgs) -> evsched::Result<()> {
    let l = a.run.load()?;
    let seeds = if a.seeds.is_empty() { vec![l.cfg.seed] } else { a.seeds.clone() };
    let reports = evaluate(&l.job(&a.run), &seeds)?;
    for r in &reports {
        if r.ov.total + r.ev.total == 0 {
            log::warn!("seed {}: scenario has no vehicles", r.seed);
        }
        if r.ov.not_arrived + r.ev.not_arrived > 0 {
            log::warn!("seed {}: {} OV and {} EV did not arrive", r.seed, r.ov.not_arrived, r.ev.not_arrived);
        }
    }
    fs::create_dir_all(&a.out)?;
    l.cfg.save(a.out.join("config.toml"))?;
    let mut table = Vec::new();
    write_report_table(&mut table, &reports)?;
    fs::write(a.out.join("report.csv"), &table)?;
    io::stdout().write_all(&table)?;
    Ok(())
}

fn spacetime(a: &SpacetimeArgs) -> evsched::Result<()> {
    let l = a.run.load()?;
    let job = l.job(&a.run);
    let flows = job.flows_for(l.cfg.seed)?;
    let id = VehicleId(a.ev_id);
    let flow = flows
        .flows()
        .iter()
        .find(|f| f.id == id)
        .ok_or(Error::UnknownId { kind: evsched::EntityKind::Vehicle, id: id.into() })?;
    if flow.class != VehicleClass::Ev {
        log::warn!("vehicle {id} is not an EV");
    }
    let opts = EpisodeOptions { trace_vehicle: Some(id), trace_phases: true, ..EpisodeOptions::new(l.cfg.max_ticks) };
    let mut policy = make_policy(a.run.policy, &l.cfg, l.params.as_ref())?;
    let mut router = EvRouter::new(l.router, l.cfg.planner())?;
    let ep = evsched::runner::run_episode(l.graph.clone(), &flows, l.cfg.sim(), policy.as_mut(), &mut router, &opts)?;
    let route = match ep.state.vehicle(id) {
        Ok(v) => v.route.nodes().to_vec(),
        Err(_) => flow.route.nodes().to_vec(),
    };

    fs::create_dir_all(&a.out)?;
    l.cfg.save(a.out.join("config.toml"))?;
    let mut w = create(&a.out.join("trajectory.csv"))?;
    writeln!(w, "tick,distance_m")?;
    for (t, d) in &ep.trace.trajectory {
        writeln!(w, "{t},{d}")?;
    }
    w.flush()?;
    let mut w = create(&a.out.join("phases.csv"))?;
    writeln!(w, "tick,intersection,phase")?;
    for (t, v, p) in ep.trace.phases.iter().filter(|(_, v, _)| route.contains(v)) {
        writeln!(w, "{t},{},{}", v.0, p.0)?;
    }
    w.flush()?;
    Ok(())
}
