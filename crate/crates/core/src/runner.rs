//! Episode driver shared by evaluation, training and trace export.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::{agent_inputs, observe, AgentConfig};
use crate::baselines::{fixed_time, green_wave, max_pressure, BaselineConfig};
use crate::config::Config;
use crate::error::{EntityKind, Error, Result};
use crate::network::{IntersectionId, PhaseId, RoadGraph, SegmentId};
use crate::neural::{forward_network, QNetworkParams};
use crate::planner::{dijkstra_route_avoiding, plan_next, PlanDecision, PlannerConfig};
use crate::scenario::{FlowSpec, VehicleClass, VehicleId};
use crate::sim::{csv_err, event_log_hash, EventKind, SimConfig, SimEvent, SimState, Vehicle};
use crate::trainer::greedy_action;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    FixedTime,
    MaxPressure,
    GreenWave,
    Levid,
    LevidDy,
    LevidApf,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 6] = [
        PolicyKind::FixedTime,
        PolicyKind::MaxPressure,
        PolicyKind::GreenWave,
        PolicyKind::Levid,
        PolicyKind::LevidDy,
        PolicyKind::LevidApf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::FixedTime => "fixedtime",
            PolicyKind::MaxPressure => "maxpressure",
            PolicyKind::GreenWave => "greenwave",
            PolicyKind::Levid => "levid",
            PolicyKind::LevidDy => "levid-dy",
            PolicyKind::LevidApf => "levid-apf",
        }
    }

    pub fn is_learned(self) -> bool {
        matches!(self, PolicyKind::Levid | PolicyKind::LevidDy | PolicyKind::LevidApf)
    }

    /// EV router paired with the policy when none is requested explicitly.
    pub fn default_router(self) -> RouterKind {
        match self {
            PolicyKind::Levid => RouterKind::ApfLongterm,
            PolicyKind::LevidApf => RouterKind::Apf,
            _ => RouterKind::None,
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown policy '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RouterKind {
    None,
    StaticDijkstra,
    /// Immediate potential field, one hop of lookahead.
    Apf,
    ApfLongterm,
}

impl RouterKind {
    pub const ALL: [RouterKind; 4] = [RouterKind::None, RouterKind::StaticDijkstra, RouterKind::Apf, RouterKind::ApfLongterm];

    pub fn name(self) -> &'static str {
        match self {
            RouterKind::None => "none",
            RouterKind::StaticDijkstra => "static-dijkstra",
            RouterKind::Apf => "apf",
            RouterKind::ApfLongterm => "apf-longterm",
        }
    }
}

impl fmt::Display for RouterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RouterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RouterKind::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown router '{s}'")))
    }
}

/// Chooses one phase per intersection for the coming tick.
pub trait SignalPolicy {
    fn actions(&mut self, state: &SimState) -> Result<Vec<PhaseId>>;
}

pub struct FixedTimePolicy(pub BaselineConfig);

impl SignalPolicy for FixedTimePolicy {
    fn actions(&mut self, state: &SimState) -> Result<Vec<PhaseId>> {
        Ok(vec![fixed_time(state.clock(), &self.0); state.graph().intersection_count()])
    }
}

pub struct MaxPressurePolicy(pub BaselineConfig);

impl SignalPolicy for MaxPressurePolicy {
    fn actions(&mut self, state: &SimState) -> Result<Vec<PhaseId>> {
        state
            .graph()
            .intersections()
            .iter()
            .map(|v| max_pressure(state, v.id, &observe(state, v.id)?, &self.0))
            .collect()
    }
}

pub struct GreenWavePolicy(pub BaselineConfig);

impl SignalPolicy for GreenWavePolicy {
    fn actions(&mut self, state: &SimState) -> Result<Vec<PhaseId>> {
        let fallback = fixed_time(state.clock(), &self.0);
        state
            .graph()
            .intersections()
            .iter()
            .map(|v| green_wave(state, v.id, &self.0, fallback))
            .collect()
    }
}

/// Greedy shared-network control, re-decided every action interval.
pub struct GreedyPolicy {
    pub params: QNetworkParams,
    pub agent: AgentConfig,
    current: Vec<PhaseId>,
}

impl GreedyPolicy {
    pub fn new(params: QNetworkParams, agent: AgentConfig) -> Result<Self> {
        agent.validate()?;
        Ok(GreedyPolicy { params, agent, current: Vec::new() })
    }
}

impl SignalPolicy for GreedyPolicy {
    fn actions(&mut self, state: &SimState) -> Result<Vec<PhaseId>> {
        if self.current.is_empty() || state.clock() % state.config().action_interval_s == 0 {
            let inputs = agent_inputs(state, &self.agent)?;
            let q = forward_network(&inputs.matrix, &inputs.neighborhoods, &self.params)?;
            self.current = q.iter().map(|q| PhaseId(greedy_action(q) as u32)).collect();
        }
        Ok(self.current.clone())
    }
}

pub fn make_policy(kind: PolicyKind, cfg: &Config, params: Option<&QNetworkParams>) -> Result<Box<dyn SignalPolicy + Send>> {
    Ok(match kind {
        PolicyKind::FixedTime => Box::new(FixedTimePolicy(cfg.baseline())),
        PolicyKind::MaxPressure => Box::new(MaxPressurePolicy(cfg.baseline())),
        PolicyKind::GreenWave => Box::new(GreenWavePolicy(cfg.baseline())),
        _ => {
            let params = params.ok_or_else(|| Error::Usage(format!("policy {kind} needs a checkpoint")))?;
            Box::new(GreedyPolicy::new(params.clone(), cfg.agent())?)
        }
    })
}

/// Re-routes planner-controlled EVs.
#[derive(Debug, Clone)]
pub struct EvRouter {
    kind: RouterKind,
    cfg: PlannerConfig,
    pending: BTreeMap<VehicleId, Vec<IntersectionId>>,
    settled: HashSet<VehicleId>,
    pub decisions: Vec<PlanDecision>,
}

/// Outgoing segment of a vehicle's next intersection that leads straight back.
fn back_segment(state: &SimState, v: &Vehicle) -> Option<SegmentId> {
    let node = state.graph().intersection(v.next_intersection()).ok()?;
    let side = node.side_of_incoming(v.segment())?;
    node.approaches[side.index()].outgoing
}

impl EvRouter {
    pub fn new(kind: RouterKind, mut cfg: PlannerConfig) -> Result<Self> {
        if kind == RouterKind::Apf {
            cfg.depth = 1;
        }
        cfg.validate()?;
        Ok(EvRouter { kind, cfg, pending: BTreeMap::new(), settled: HashSet::new(), decisions: Vec::new() })
    }

    pub fn kind(&self) -> RouterKind {
        self.kind
    }

    pub fn update(&mut self, state: &mut SimState) -> Result<()> {
        match self.kind {
            RouterKind::None => Ok(()),
            RouterKind::StaticDijkstra => self.update_static(state),
            RouterKind::Apf | RouterKind::ApfLongterm => {
                if state.clock() % self.cfg.replan_interval_s == 0 {
                    self.update_field(state)?;
                }
                Ok(())
            }
        }
    }

    fn controlled(state: &SimState) -> Vec<(VehicleId, IntersectionId, Option<IntersectionId>, IntersectionId)> {
        state
            .active_vehicles()
            .filter(|v| v.class == VehicleClass::Ev && v.planner_controlled)
            .map(|v| {
                let prev = state.graph().segments()[v.segment().index()].from.node();
                (v.id, v.next_intersection(), prev, v.destination)
            })
            .collect()
    }

    fn apply(state: &mut SimState, id: VehicleId, route: &[IntersectionId]) -> Result<bool> {
        match state.reroute(id, route) {
            Err(Error::Routing(msg)) => {
                log::warn!("keeping route of vehicle {id}: {msg}");
                Ok(false)
            }
            other => other,
        }
    }

    /// One route per EV, computed on its first tick in the network.
    fn update_static(&mut self, state: &mut SimState) -> Result<()> {
        for (id, vc, _, vd) in Self::controlled(state) {
            if self.settled.contains(&id) {
                continue;
            }
            if !self.pending.contains_key(&id) {
                let back = back_segment(state, state.vehicle(id)?);
                let route = dijkstra_route_avoiding(state, vc, vd, back)?;
                self.pending.insert(id, route.0);
            }
            let route = &self.pending[&id];
            if route[0] != vc || Self::apply(state, id, route)? {
                self.pending.remove(&id);
                self.settled.insert(id);
            }
        }
        Ok(())
    }

    fn update_field(&mut self, state: &mut SimState) -> Result<()> {
        for (id, vc, prev, vd) in Self::controlled(state) {
            if vc == vd {
                continue;
            }
            let plan = plan_next(state, vc, prev, vd, &self.cfg)?;
            self.decisions.push(PlanDecision {
                tick: state.clock(),
                ev_id: id,
                v_c: vc,
                chosen_next: plan.route.nodes()[1],
                samples: plan.samples,
            });
            Self::apply(state, id, plan.route.nodes())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeOptions {
    pub max_ticks: u32,
    pub trace_vehicle: Option<VehicleId>,
    pub trace_phases: bool,
}

impl EpisodeOptions {
    pub fn new(max_ticks: u32) -> Self {
        EpisodeOptions { max_ticks, trace_vehicle: None, trace_phases: false }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    /// (tick, cumulative distance) of the traced vehicle.
    pub trajectory: Vec<(u32, f64)>,
    /// (tick, intersection, phase) for every intersection and tick.
    pub phases: Vec<(u32, IntersectionId, PhaseId)>,
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub state: SimState,
    pub events: Vec<SimEvent>,
    pub decisions: Vec<PlanDecision>,
    pub trace: Trace,
}

/// Steps until every vehicle has arrived or `max_ticks` is reached.
pub fn run_episode(
    graph: Arc<RoadGraph>,
    flows: &FlowSpec,
    sim: SimConfig,
    policy: &mut dyn SignalPolicy,
    router: &mut EvRouter,
    opts: &EpisodeOptions,
) -> Result<Episode> {
    let mut state = SimState::new(graph, flows, sim)?;
    if let Some(id) = opts.trace_vehicle {
        if !flows.flows().iter().any(|f| f.id == id) {
            return Err(Error::unknown(EntityKind::Vehicle, id));
        }
    }
    let mut events = Vec::new();
    let mut trace = Trace::default();
    while !state.is_finished() && state.clock() < opts.max_ticks {
        router.update(&mut state)?;
        let actions = policy.actions(&state)?;
        let clock = state.clock();
        if opts.trace_phases {
            trace.phases.extend(actions.iter().enumerate().map(|(i, &p)| (clock, IntersectionId(i as u32), p)));
        }
        if let Some(v) = opts.trace_vehicle.and_then(|id| state.vehicle(id).ok()) {
            if v.in_network() {
                trace.trajectory.push((clock, v.distance_m));
            }
        }
        events.extend(state.step(&actions)?);
    }
    if let Some(v) = opts.trace_vehicle.and_then(|id| state.vehicle(id).ok()) {
        if let Some(t) = v.arrival_time {
            trace.trajectory.push((t, v.distance_m));
        }
    }
    if opts.trace_vehicle.is_some() && trace.trajectory.is_empty() {
        trace.trajectory.push((0, 0.0));
    }
    Ok(Episode { state, events, decisions: std::mem::take(&mut router.decisions), trace })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ClassStats {
    pub total: usize,
    pub arrived: usize,
    pub not_arrived: usize,
    /// Mean over arrived vehicles only.
    pub avg_travel_time_s: Option<f64>,
}

impl ClassStats {
    fn from_times(total: usize, times: &[u32]) -> Self {
        let avg = (!times.is_empty()).then(|| times.iter().map(|&t| t as f64).sum::<f64>() / times.len() as f64);
        ClassStats { total, arrived: times.len(), not_arrived: total - times.len(), avg_travel_time_s: avg }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub policy: String,
    pub router: String,
    pub seed: u64,
    pub ticks: u32,
    pub ov: ClassStats,
    pub ev: ClassStats,
    pub event_log_sha256: String,
    #[serde(skip)]
    pub wall_clock_s: f64,
}

fn class_times(flows: &FlowSpec, arrivals: impl Iterator<Item = (VehicleId, u32)>) -> (ClassStats, ClassStats) {
    let class: HashMap<_, _> = flows.flows().iter().map(|f| (f.id, f.class)).collect();
    let (mut ov, mut ev) = (Vec::new(), Vec::new());
    for (id, t) in arrivals {
        match class[&id] {
            VehicleClass::Ov => ov.push(t),
            VehicleClass::Ev => ev.push(t),
        }
    }
    (
        ClassStats::from_times(flows.count(VehicleClass::Ov), &ov),
        ClassStats::from_times(flows.count(VehicleClass::Ev), &ev),
    )
}

/// Per-class travel times rebuilt from spawn and arrive events alone.
pub fn stats_from_events(flows: &FlowSpec, events: &[SimEvent]) -> (ClassStats, ClassStats) {
    let mut spawn = HashMap::new();
    let mut arrivals = Vec::new();
    for e in events {
        match e.event {
            EventKind::Spawn => {
                spawn.insert(e.vehicle_id, e.tick);
            }
            EventKind::Arrive => arrivals.push((e.vehicle_id, e.tick + 1 - spawn[&e.vehicle_id])),
            _ => {}
        }
    }
    class_times(flows, arrivals.into_iter())
}

/// Builds the report from vehicle records and checks it against the event log.
pub fn report(flows: &FlowSpec, episode: &Episode, policy: &str, router: &str, seed: u64) -> Result<RunReport> {
    let arrivals = episode
        .state
        .vehicles()
        .iter()
        .filter_map(|v| v.arrival_time.map(|t| (v.id, t - v.depart_time)));
    let (ov, ev) = class_times(flows, arrivals);
    if (ov, ev) != stats_from_events(flows, &episode.events) {
        return Err(Error::Simulation {
            tick: episode.state.clock(),
            reason: "travel times disagree with the event log".into(),
        });
    }
    Ok(RunReport {
        policy: policy.to_string(),
        router: router.to_string(),
        seed,
        ticks: episode.state.clock(),
        ov,
        ev,
        event_log_sha256: event_log_hash(&episode.events),
        wall_clock_s: 0.0,
    })
}

/// What to evaluate; the seed picks which vehicles are EVs when `ev_share` is set.
#[derive(Debug, Clone)]
pub struct EvalJob<'a> {
    pub graph: Arc<RoadGraph>,
    pub flows: &'a FlowSpec,
    pub cfg: &'a Config,
    pub policy: PolicyKind,
    pub router: RouterKind,
    pub params: Option<&'a QNetworkParams>,
    pub ev_share: Option<f64>,
}

impl EvalJob<'_> {
    pub fn flows_for(&self, seed: u64) -> Result<FlowSpec> {
        match self.ev_share {
            Some(share) => self.flows.with_ev_share(share, seed),
            None => Ok(self.flows.clone()),
        }
    }

    pub fn run(&self, seed: u64, opts: &EpisodeOptions) -> Result<(RunReport, Episode)> {
        let start = Instant::now();
        let flows = self.flows_for(seed)?;
        let mut policy = make_policy(self.policy, self.cfg, self.params)?;
        let mut router = EvRouter::new(self.router, self.cfg.planner())?;
        let episode = run_episode(self.graph.clone(), &flows, self.cfg.sim(), policy.as_mut(), &mut router, opts)?;
        let mut rep = report(&flows, &episode, self.policy.name(), self.router.name(), seed)?;
        rep.wall_clock_s = start.elapsed().as_secs_f64();
        Ok((rep, episode))
    }
}

/// One report per seed, in seed order; seeds run in parallel.
pub fn evaluate(job: &EvalJob<'_>, seeds: &[u64]) -> Result<Vec<RunReport>> {
    let opts = EpisodeOptions::new(job.cfg.max_ticks);
    seeds.par_iter().map(|&s| job.run(s, &opts).map(|(r, _)| r)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Mean and population standard deviation over the values that exist.
pub fn mean_std(values: impl IntoIterator<Item = Option<f64>>) -> Option<MeanStd> {
    let xs: Vec<f64> = values.into_iter().flatten().collect();
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Some(MeanStd { mean, std: var.sqrt(), n: xs.len() })
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.3}")).unwrap_or_default()
}

/// Per-seed rows followed by `mean` and `std` rows.
pub fn write_report_table<W: Write>(out: W, reports: &[RunReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "policy", "router", "seed", "ticks", "ov_avg_tt_s", "ev_avg_tt_s", "ov_arrived", "ev_arrived", "ov_not_arrived",
        "ev_not_arrived", "event_log_sha256",
    ])
    .map_err(csv_err)?;
    for r in reports {
        w.write_record([
            r.policy.clone(),
            r.router.clone(),
            r.seed.to_string(),
            r.ticks.to_string(),
            fmt_opt(r.ov.avg_travel_time_s),
            fmt_opt(r.ev.avg_travel_time_s),
            r.ov.arrived.to_string(),
            r.ev.arrived.to_string(),
            r.ov.not_arrived.to_string(),
            r.ev.not_arrived.to_string(),
            r.event_log_sha256.clone(),
        ])
        .map_err(csv_err)?;
    }
    if let Some(first) = reports.first() {
        let ov = mean_std(reports.iter().map(|r| r.ov.avg_travel_time_s));
        let ev = mean_std(reports.iter().map(|r| r.ev.avg_travel_time_s));
        for (label, pick) in [("mean", (|m: MeanStd| m.mean) as fn(MeanStd) -> f64), ("std", |m: MeanStd| m.std)] {
            let row = [
                first.policy.clone(),
                first.router.clone(),
                label.to_string(),
                String::new(),
                fmt_opt(ov.map(pick)),
                fmt_opt(ev.map(pick)),
            ];
            w.write_record(row.iter().map(String::as_str).chain(std::iter::repeat_n("", 5))).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}
