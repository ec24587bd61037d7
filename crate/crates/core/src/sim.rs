//! One-second tick simulation of point queues at stop lines.
//!
//! Each lane holds its vehicles front to back. A step applies the signal
//! actions, discharges queue heads, inserts due vehicles, then advances
//! everyone along their segment.

use std::collections::{HashMap, VecDeque};
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{EntityKind, Error, Result};
use crate::network::{
    lane_id, lane_segment, lane_turn, IntersectionId, LaneId, PhaseId, RoadGraph, Route, SegmentId, Side, Turn,
    PHASE_COUNT,
};
use crate::scenario::{exit_for_arrival, Flow, FlowSpec, VehicleClass, VehicleId};

const EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub action_interval_s: u32,
    pub saturation_headway_s: u32,
    pub vehicle_length_m: f64,
    pub speed_window_ticks: usize,
    /// Lower bound on reported average speeds so travel-time estimates stay finite.
    pub min_avg_speed_mps: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            action_interval_s: 10,
            saturation_headway_s: 2,
            vehicle_length_m: 7.5,
            speed_window_ticks: 30,
            min_avg_speed_mps: 1.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.action_interval_s == 0 {
            return Err(Error::invalid("action interval must be >= 1 s"));
        }
        if self.saturation_headway_s == 0 {
            return Err(Error::invalid("saturation headway must be >= 1 s"));
        }
        if !(self.vehicle_length_m > 0.0) {
            return Err(Error::invalid("vehicle length must be > 0"));
        }
        if self.speed_window_ticks == 0 {
            return Err(Error::invalid("speed window must be >= 1 tick"));
        }
        if !(self.min_avg_speed_mps > 0.0) {
            return Err(Error::invalid("minimum average speed must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VehicleStatus {
    Driving,
    Queued,
    Arrived,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vehicle {
    pub id: VehicleId,
    pub class: VehicleClass,
    pub planner_controlled: bool,
    pub route: Route,
    /// Index into `route` of the next intersection to cross.
    pub route_index: usize,
    pub entry: Side,
    pub exit: Side,
    preferred_exit: Side,
    pub destination: IntersectionId,
    pub lane: LaneId,
    pub offset_m: f64,
    pub speed_mps: f64,
    pub status: VehicleStatus,
    pub scheduled_depart: u32,
    pub depart_time: u32,
    pub arrival_time: Option<u32>,
    /// Distance driven since insertion.
    pub distance_m: f64,
    /// Ticks spent moving on each traversed segment.
    pub segment_times: Vec<(SegmentId, u32)>,
    /// Ticks spent stationary or crossing at each intersection.
    pub waiting_times: Vec<(IntersectionId, u32)>,
    queued_since: u32,
    crossed_at: Option<u32>,
}

impl Vehicle {
    pub fn segment(&self) -> SegmentId {
        lane_segment(self.lane)
    }

    pub fn next_intersection(&self) -> IntersectionId {
        self.route.0[self.route_index]
    }

    pub fn in_network(&self) -> bool {
        self.status != VehicleStatus::Arrived
    }

    /// Remaining route from the next intersection to the destination.
    pub fn remaining_route(&self) -> &[IntersectionId] {
        &self.route.0[self.route_index..]
    }
}

/// `arrival_time - depart_time` for an arrived vehicle.
pub fn travel_time(v: &Vehicle) -> Result<u32> {
    match v.arrival_time {
        Some(t) => Ok(t - v.depart_time),
        None => Err(Error::Query(format!("vehicle {} has not arrived", v.id))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneMetrics {
    pub queue_length_count: usize,
    pub queue_length_m: f64,
    pub avg_speed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Spawn,
    Defer,
    Cross,
    Arrive,
}

impl EventKind {
    pub fn name(self) -> &'static str {
        match self {
            EventKind::Spawn => "spawn",
            EventKind::Defer => "defer",
            EventKind::Cross => "cross",
            EventKind::Arrive => "arrive",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimEvent {
    pub tick: u32,
    pub event: EventKind,
    pub vehicle_id: VehicleId,
    pub intersection_id: IntersectionId,
    pub lane_id: LaneId,
}

pub fn write_event_log<W: Write>(out: W, events: &[SimEvent]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["tick", "event", "vehicle_id", "intersection_id", "lane_id"])
        .map_err(csv_err)?;
    for e in events {
        w.write_record([
            e.tick.to_string(),
            e.event.name().to_string(),
            e.vehicle_id.to_string(),
            e.intersection_id.to_string(),
            e.lane_id.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse(format!("{other:?}")),
    }
}

/// SHA-256 of the CSV rendering of an event log.
pub fn event_log_hash(events: &[SimEvent]) -> String {
    let mut buf = Vec::new();
    write_event_log(&mut buf, events).expect("in-memory write");
    hex_digest(&buf)
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Default)]
struct LaneState {
    vehicles: VecDeque<usize>,
    next_discharge: u32,
    /// Per tick (speed sum, sample count).
    history: VecDeque<(f64, u32)>,
}

#[derive(Debug, Clone)]
pub struct SimState {
    graph: Arc<RoadGraph>,
    cfg: SimConfig,
    clock: u32,
    vehicles: Vec<Vehicle>,
    index: HashMap<VehicleId, usize>,
    lanes: Vec<LaneState>,
    phase: Vec<PhaseId>,
    phase_since: Vec<u32>,
    pending: VecDeque<Flow>,
    deferred: VecDeque<Flow>,
    spawned: usize,
    arrived: usize,
}

impl SimState {
    pub fn new(graph: Arc<RoadGraph>, flows: &FlowSpec, cfg: SimConfig) -> Result<SimState> {
        cfg.validate()?;
        let mut pending: Vec<Flow> = flows.flows().to_vec();
        pending.sort_by_key(|f| (f.depart_time_s, f.id));
        for f in &pending {
            f.route.validate(&graph)?;
            turn_at(&graph, f.route.nodes(), 0, f.entry, f.exit)
                .map_err(|e| Error::invariant(EntityKind::Vehicle, f.id, e.to_string()))?;
        }
        let n = graph.intersection_count();
        Ok(SimState {
            lanes: vec![LaneState::default(); graph.lane_count()],
            graph,
            cfg,
            clock: 0,
            vehicles: Vec::new(),
            index: HashMap::new(),
            phase: vec![PhaseId(0); n],
            phase_since: vec![0; n],
            pending: pending.into(),
            deferred: VecDeque::new(),
            spawned: 0,
            arrived: 0,
        })
    }

    pub fn graph(&self) -> &Arc<RoadGraph> {
        &self.graph
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn clock(&self) -> u32 {
        self.clock
    }

    /// Every vehicle inserted so far, in insertion order.
    pub fn vehicles(&self) -> &[Vehicle] {
        &self.vehicles
    }

    pub fn vehicle(&self, id: VehicleId) -> Result<&Vehicle> {
        self.index
            .get(&id)
            .map(|&i| &self.vehicles[i])
            .ok_or_else(|| Error::unknown(EntityKind::Vehicle, id))
    }

    pub fn spawned_count(&self) -> usize {
        self.spawned
    }

    pub fn arrived_count(&self) -> usize {
        self.arrived
    }

    pub fn in_network_count(&self) -> usize {
        self.lanes.iter().map(|l| l.vehicles.len()).sum()
    }

    /// Vehicles not yet inserted, including deferred ones.
    pub fn pending_count(&self) -> usize {
        self.pending.len() + self.deferred.len()
    }

    pub fn is_finished(&self) -> bool {
        self.pending_count() == 0 && self.in_network_count() == 0
    }

    pub fn current_phase(&self, v: IntersectionId) -> PhaseId {
        self.phase[v.index()]
    }

    pub fn phases(&self) -> &[PhaseId] {
        &self.phase
    }

    /// Ticks since the later of the last phase change and the last decision boundary.
    pub fn time_in_phase(&self, v: IntersectionId) -> u32 {
        let boundary = self.clock - self.clock % self.cfg.action_interval_s;
        self.clock - self.phase_since[v.index()].max(boundary)
    }

    /// Ticks since the phase of `v` last changed.
    pub fn phase_age(&self, v: IntersectionId) -> u32 {
        self.clock - self.phase_since[v.index()]
    }

    pub fn lane_vehicles(&self, lane: LaneId) -> impl Iterator<Item = &Vehicle> + '_ {
        self.lanes[lane.index()].vehicles.iter().map(move |&i| &self.vehicles[i])
    }

    /// Vehicles on a lane by class, as (OV count, EV count).
    pub fn lane_counts(&self, lane: LaneId) -> (usize, usize) {
        self.lane_vehicles(lane).fold((0, 0), |(o, e), v| match v.class {
            VehicleClass::Ov => (o + 1, e),
            VehicleClass::Ev => (o, e + 1),
        })
    }

    /// Vehicles currently in the network, in insertion order.
    pub fn active_vehicles(&self) -> impl Iterator<Item = &Vehicle> + '_ {
        self.vehicles.iter().filter(|v| v.in_network())
    }

    fn history_speed(&self, lanes: &[LaneId], limit: f64) -> f64 {
        let (sum, n) = lanes
            .iter()
            .flat_map(|l| self.lanes[l.index()].history.iter())
            .fold((0.0, 0u32), |(s, n), &(ls, ln)| (s + ls, n + ln));
        if n == 0 {
            return limit;
        }
        (sum / n as f64).clamp(self.cfg.min_avg_speed_mps.min(limit), limit)
    }

    pub fn lane_metrics(&self, lane: LaneId) -> Result<LaneMetrics> {
        self.graph.check_lane(lane)?;
        let limit = self.graph.segments()[lane_segment(lane).index()].speed_limit_mps;
        let queued = self.lane_vehicles(lane).filter(|v| v.status == VehicleStatus::Queued).count();
        Ok(LaneMetrics {
            queue_length_count: queued,
            queue_length_m: queued as f64 * self.cfg.vehicle_length_m,
            avg_speed: self.history_speed(&[lane], limit),
        })
    }

    /// Segment-level view: the longest lane queue and the speed averaged over all lanes.
    pub fn segment_metrics(&self, seg: SegmentId) -> Result<LaneMetrics> {
        let s = self.graph.segment(seg)?;
        let lanes = s.lanes();
        let queued = lanes
            .iter()
            .map(|&l| self.lane_vehicles(l).filter(|v| v.status == VehicleStatus::Queued).count())
            .max()
            .unwrap_or(0);
        Ok(LaneMetrics {
            queue_length_count: queued,
            queue_length_m: queued as f64 * self.cfg.vehicle_length_m,
            avg_speed: self.history_speed(&lanes, s.speed_limit_mps),
        })
    }

    /// Advances the clock by one tick under `actions` (one phase per intersection).
    pub fn step(&mut self, actions: &[PhaseId]) -> Result<Vec<SimEvent>> {
        if actions.len() != self.graph.intersection_count() {
            return Err(Error::invalid(format!(
                "expected {} phase actions, got {}",
                self.graph.intersection_count(),
                actions.len()
            )));
        }
        for (i, &p) in actions.iter().enumerate() {
            if p.index() >= PHASE_COUNT {
                return Err(Error::invariant(EntityKind::Intersection, i as u32, format!("illegal phase id {p}")));
            }
        }
        for (i, &p) in actions.iter().enumerate() {
            if self.phase[i] != p {
                self.phase[i] = p;
                self.phase_since[i] = self.clock;
            }
        }
        let mut events = Vec::new();
        self.discharge(&mut events)?;
        self.spawn_into(&mut events)?;
        self.advance();
        self.clock += 1;
        if self.spawned != self.arrived + self.in_network_count() {
            return Err(Error::Simulation {
                tick: self.clock,
                reason: format!(
                    "conservation broken: spawned {} != arrived {} + in network {}",
                    self.spawned,
                    self.arrived,
                    self.in_network_count()
                ),
            });
        }
        Ok(events)
    }

    /// Inserts every due vehicle at the current clock; returns how many entered.
    pub fn spawn_pending(&mut self) -> Result<usize> {
        let mut events = Vec::new();
        self.spawn_into(&mut events)?;
        Ok(events.iter().filter(|e| e.event == EventKind::Spawn).count())
    }

    fn lane_has_room(&self, lane: LaneId) -> bool {
        match self.lanes[lane.index()].vehicles.back() {
            None => true,
            Some(&i) => self.vehicles[i].offset_m + EPS >= self.cfg.vehicle_length_m,
        }
    }

    fn discharge(&mut self, events: &mut Vec<SimEvent>) -> Result<()> {
        let graph = Arc::clone(&self.graph);
        let headway = self.cfg.saturation_headway_s;
        for node in graph.intersections() {
            let phase = &node.phases[self.phase[node.id.index()].index()];
            for lane in node.incoming_lanes() {
                let Some(&vi) = self.lanes[lane.index()].vehicles.front() else { continue };
                if self.clock < self.lanes[lane.index()].next_discharge {
                    continue;
                }
                let v = &self.vehicles[vi];
                let seg = &graph.segments()[lane_segment(lane).index()];
                if v.status != VehicleStatus::Queued || v.offset_m + EPS < seg.length_m {
                    continue;
                }
                let side = node.side_of_incoming(seg.id).expect("incoming lane has a side");
                let turn = lane_turn(lane);
                let green = turn == Turn::Right || phase.allows(side, turn);
                let exempt = v.class == VehicleClass::Ev && self.clock >= v.queued_since + headway;
                if !(green || exempt) {
                    continue;
                }
                let last = v.route_index + 1 == v.route.len();
                let target = if last {
                    None
                } else {
                    let next = v.route.0[v.route_index + 1];
                    let out = graph
                        .segment_between(node.id, next)
                        .ok_or_else(|| Error::Simulation { tick: self.clock, reason: format!("vehicle {} has no segment {} -> {next}", v.id, node.id) })?;
                    let t = turn_at(&graph, v.route.nodes(), v.route_index + 1, v.entry, v.exit)?;
                    let target = lane_id(out, t);
                    if !self.lane_has_room(target) {
                        continue;
                    }
                    Some((target, next))
                };

                self.lanes[lane.index()].vehicles.pop_front();
                self.lanes[lane.index()].next_discharge = self.clock + headway;
                let v = &mut self.vehicles[vi];
                if let Some(w) = v.waiting_times.last_mut() {
                    w.1 += 1;
                }
                v.crossed_at = Some(self.clock);
                let (tick, vehicle_id) = (self.clock, v.id);
                let ev = |event| SimEvent { tick, event, vehicle_id, intersection_id: node.id, lane_id: lane };
                events.push(ev(EventKind::Cross));
                match target {
                    None => {
                        events.push(ev(EventKind::Arrive));
                        v.status = VehicleStatus::Arrived;
                        v.arrival_time = Some(self.clock + 1);
                        v.speed_mps = 0.0;
                        self.arrived += 1;
                    }
                    Some((target, next)) => {
                        v.status = VehicleStatus::Driving;
                        v.lane = target;
                        v.offset_m = 0.0;
                        v.speed_mps = 0.0;
                        v.route_index += 1;
                        v.segment_times.push((lane_segment(target), 0));
                        v.waiting_times.push((next, 0));
                        self.lanes[target.index()].vehicles.push_back(vi);
                    }
                }
            }
        }
        Ok(())
    }

    fn spawn_into(&mut self, events: &mut Vec<SimEvent>) -> Result<()> {
        let mut due: Vec<Flow> = self.deferred.drain(..).collect();
        while self.pending.front().is_some_and(|f| f.depart_time_s <= self.clock) {
            due.push(self.pending.pop_front().unwrap());
        }
        for f in due {
            let node = self.graph.intersection(f.origin)?;
            let seg = node.approaches[f.entry.index()].incoming.ok_or_else(|| {
                Error::invariant(EntityKind::Vehicle, f.id, format!("origin {} has no entry on its {} side", f.origin, f.entry.name()))
            })?;
            let turn = turn_at(&self.graph, f.route.nodes(), 0, f.entry, f.exit)?;
            let lane = lane_id(seg, turn);
            let (tick, vehicle_id, origin) = (self.clock, f.id, f.origin);
            let ev = |event| SimEvent { tick, event, vehicle_id, intersection_id: origin, lane_id: lane };
            if !self.lane_has_room(lane) {
                events.push(ev(EventKind::Defer));
                self.deferred.push_back(f);
                continue;
            }
            if self.index.contains_key(&f.id) {
                return Err(Error::invariant(EntityKind::Vehicle, f.id, "duplicate vehicle id"));
            }
            events.push(ev(EventKind::Spawn));
            let vi = self.vehicles.len();
            self.index.insert(f.id, vi);
            self.vehicles.push(Vehicle {
                id: f.id,
                class: f.class,
                planner_controlled: f.planner_controlled,
                route: f.route,
                route_index: 0,
                entry: f.entry,
                exit: f.exit,
                preferred_exit: f.exit,
                destination: f.destination,
                lane,
                offset_m: 0.0,
                speed_mps: 0.0,
                status: VehicleStatus::Driving,
                scheduled_depart: f.depart_time_s,
                depart_time: self.clock,
                arrival_time: None,
                distance_m: 0.0,
                segment_times: vec![(seg, 0)],
                waiting_times: vec![(f.origin, 0)],
                queued_since: self.clock,
                crossed_at: None,
            });
            self.lanes[lane.index()].vehicles.push_back(vi);
            self.spawned += 1;
        }
        Ok(())
    }

    fn advance(&mut self) {
        let gap = self.cfg.vehicle_length_m;
        let window = self.cfg.speed_window_ticks;
        for (li, lane) in self.lanes.iter_mut().enumerate() {
            if lane.vehicles.is_empty() && lane.history.is_empty() {
                continue;
            }
            let seg = &self.graph.segments()[lane_segment(LaneId(li as u32)).index()];
            let mut limit = seg.length_m;
            let mut leader_queued = true;
            let (mut sum, mut count) = (0.0, 0u32);
            for &vi in &lane.vehicles {
                let v = &mut self.vehicles[vi];
                if v.crossed_at == Some(self.clock) {
                    limit = v.offset_m - gap;
                    leader_queued = false;
                    continue;
                }
                let target = (v.offset_m + seg.speed_limit_mps).min(limit).max(v.offset_m);
                let moved = target - v.offset_m;
                v.offset_m = target;
                v.speed_mps = moved;
                v.distance_m += moved;
                let queued = target + EPS >= limit && leader_queued;
                if queued && v.status != VehicleStatus::Queued {
                    v.queued_since = self.clock;
                }
                v.status = if queued { VehicleStatus::Queued } else { VehicleStatus::Driving };
                if moved > 0.0 {
                    v.segment_times.last_mut().expect("segment entry").1 += 1;
                } else {
                    v.waiting_times.last_mut().expect("waiting entry").1 += 1;
                }
                sum += moved;
                count += 1;
                limit = v.offset_m - gap;
                leader_queued = queued;
            }
            lane.history.push_back((sum, count));
            while lane.history.len() > window {
                lane.history.pop_front();
            }
        }
    }

    /// Replaces the route of an in-network vehicle from its next intersection on.
    /// Returns `Ok(false)` when the change needs a lane switch that is not possible now.
    pub fn reroute(&mut self, id: VehicleId, suffix: &[IntersectionId]) -> Result<bool> {
        let vi = *self.index.get(&id).ok_or_else(|| Error::unknown(EntityKind::Vehicle, id))?;
        let v = &self.vehicles[vi];
        if !v.in_network() {
            return Err(Error::Query(format!("vehicle {id} has already arrived")));
        }
        let vc = v.next_intersection();
        if suffix.first() != Some(&vc) {
            return Err(Error::Routing(format!("new route for vehicle {id} must start at {vc}")));
        }
        if suffix.last() != Some(&v.destination) {
            return Err(Error::Routing(format!("new route for vehicle {id} must end at {}", v.destination)));
        }
        let mut nodes = v.route.0[..v.route_index].to_vec();
        nodes.extend_from_slice(suffix);
        let route = Route(nodes);
        route.validate(&self.graph)?;
        let arrival = arrival_side(&self.graph, route.nodes(), route.len() - 1, v.entry)?;
        let exit = exit_for_arrival(&self.graph, v.destination, arrival, Some(v.preferred_exit))
            .ok_or_else(|| Error::Routing(format!("no exit at {} for vehicle {id}", v.destination)))?;
        let turn = turn_at(&self.graph, route.nodes(), v.route_index, v.entry, exit)?;
        if turn != lane_turn(v.lane) {
            if v.status != VehicleStatus::Driving || v.crossed_at == Some(self.clock) {
                return Ok(false);
            }
            let new_lane = lane_id(v.segment(), turn);
            let offset = v.offset_m;
            let gap = self.cfg.vehicle_length_m;
            let target = &self.lanes[new_lane.index()].vehicles;
            if target.iter().any(|&o| (self.vehicles[o].offset_m - offset).abs() + EPS < gap) {
                return Ok(false);
            }
            let pos = target.iter().position(|&o| self.vehicles[o].offset_m < offset).unwrap_or(target.len());
            let old = &mut self.lanes[v.lane.index()].vehicles;
            let at = old.iter().position(|&o| o == vi).expect("vehicle is on its lane");
            old.remove(at);
            self.lanes[new_lane.index()].vehicles.insert(pos, vi);
            self.vehicles[vi].lane = new_lane;
        }
        let v = &mut self.vehicles[vi];
        v.route = route;
        v.exit = exit;
        Ok(true)
    }

    /// Structural self-check used by tests: every in-network vehicle sits in exactly
    /// one lane, lanes are ordered front to back with at least one vehicle length apart,
    /// and offsets stay within their segment.
    pub fn check_invariants(&self) -> Result<()> {
        let fail = |reason: String| Err(Error::Simulation { tick: self.clock, reason });
        let mut seen = vec![false; self.vehicles.len()];
        for (li, lane) in self.lanes.iter().enumerate() {
            let len = self.graph.segments()[lane_segment(LaneId(li as u32)).index()].length_m;
            let mut prev: Option<f64> = None;
            for &vi in &lane.vehicles {
                let v = &self.vehicles[vi];
                if std::mem::replace(&mut seen[vi], true) {
                    return fail(format!("vehicle {} appears in two lanes", v.id));
                }
                if v.lane.index() != li || !v.in_network() {
                    return fail(format!("vehicle {} lane bookkeeping is stale", v.id));
                }
                if v.offset_m < -EPS || v.offset_m > len + EPS {
                    return fail(format!("vehicle {} offset {} outside segment", v.id, v.offset_m));
                }
                if let Some(p) = prev {
                    if p - v.offset_m + EPS < self.cfg.vehicle_length_m {
                        return fail(format!("vehicle {} closer than one vehicle length to its leader", v.id));
                    }
                }
                prev = Some(v.offset_m);
            }
        }
        for (vi, v) in self.vehicles.iter().enumerate() {
            if v.in_network() != seen[vi] {
                return fail(format!("vehicle {} missing from lanes", v.id));
            }
            if v.arrival_time.is_some() != (v.status == VehicleStatus::Arrived) {
                return fail(format!("vehicle {} arrival time inconsistent with status", v.id));
            }
        }
        if self.spawned != self.arrived + self.in_network_count() {
            return fail("conservation broken".into());
        }
        Ok(())
    }
}

fn arrival_side(graph: &RoadGraph, nodes: &[IntersectionId], k: usize, entry: Side) -> Result<Side> {
    if k == 0 {
        return Ok(entry);
    }
    let seg = graph
        .segment_between(nodes[k - 1], nodes[k])
        .ok_or_else(|| Error::Routing(format!("no segment {} -> {}", nodes[k - 1], nodes[k])))?;
    Ok(graph.intersection(nodes[k])?.side_of_incoming(seg).expect("segment enters on a side"))
}

/// Turn made at `nodes[k]` given the route's entry side at the origin and exit side at the destination.
pub(crate) fn turn_at(graph: &RoadGraph, nodes: &[IntersectionId], k: usize, entry: Side, exit: Side) -> Result<Turn> {
    let from = arrival_side(graph, nodes, k, entry)?;
    let to = if k + 1 == nodes.len() {
        exit
    } else {
        let seg = graph
            .segment_between(nodes[k], nodes[k + 1])
            .ok_or_else(|| Error::Routing(format!("no segment {} -> {}", nodes[k], nodes[k + 1])))?;
        graph.intersection(nodes[k])?.side_of_outgoing(seg).expect("segment leaves on a side")
    };
    Turn::between(from, to).ok_or_else(|| Error::Routing(format!("route makes a U-turn at {}", nodes[k])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::build_grid;

    fn ov(id: u32, t: u32, nodes: &[u32], entry: Side, exit: Side) -> Flow {
        let route = Route(nodes.iter().map(|&v| IntersectionId(v)).collect());
        Flow {
            id: VehicleId(id),
            class: VehicleClass::Ov,
            depart_time_s: t,
            origin: route.0[0],
            destination: *route.0.last().unwrap(),
            route,
            planner_controlled: false,
            entry,
            exit,
        }
    }

    fn sim(rows: usize, cols: usize, len: f64, speed: f64, flows: Vec<Flow>) -> SimState {
        let g = Arc::new(build_grid(rows, cols, len, speed).unwrap());
        SimState::new(g, &FlowSpec::new(flows), SimConfig::default()).unwrap()
    }

    // Phase 0 is east-west straight.
    const EW: PhaseId = PhaseId(0);
    const NS: PhaseId = PhaseId(1);

    #[test]
    fn empty_network_only_advances_clock() {
        let mut s = sim(2, 2, 100.0, 10.0, vec![]);
        let ev = s.step(&[EW; 4]).unwrap();
        assert!(ev.is_empty());
        assert_eq!(s.clock(), 1);
    }

    #[test]
    fn free_flow_advance() {
        let mut s = sim(1, 1, 300.0, 10.0, vec![ov(0, 0, &[0], Side::West, Side::East)]);
        s.step(&[EW]).unwrap();
        assert_eq!(s.vehicles()[0].offset_m, 10.0);
        s.step(&[EW]).unwrap();
        assert_eq!(s.vehicles()[0].offset_m, 20.0);
    }

    #[test]
    fn uninterrupted_travel_time() {
        let mut s = sim(1, 1, 300.0, 10.0, vec![ov(0, 0, &[0], Side::West, Side::East)]);
        while !s.is_finished() {
            s.step(&[EW]).unwrap();
        }
        let v = &s.vehicles()[0];
        assert_eq!(travel_time(v).unwrap(), 31);
        assert_eq!(v.segment_times, vec![(v.segment_times[0].0, 30)]);
        assert_eq!(v.waiting_times, vec![(IntersectionId(0), 1)]);
    }

    #[test]
    fn red_adds_waiting_time() {
        let mut s = sim(1, 1, 300.0, 10.0, vec![ov(0, 0, &[0], Side::West, Side::East)]);
        // Arrives at the stop line during tick 29; hold red for 40 more ticks.
        for _ in 0..70 {
            s.step(&[NS]).unwrap();
        }
        while !s.is_finished() {
            s.step(&[EW]).unwrap();
        }
        assert_eq!(travel_time(&s.vehicles()[0]).unwrap(), 31 + 40);
    }

    #[test]
    fn three_queued_discharge_within_six_ticks() {
        let flows = (0..3).map(|i| ov(i, i * 2, &[0], Side::West, Side::East)).collect();
        let mut s = sim(1, 1, 100.0, 10.0, flows);
        for _ in 0..60 {
            s.step(&[NS]).unwrap();
        }
        assert_eq!(
            s.lane_vehicles(s.vehicles()[0].lane).filter(|v| v.status == VehicleStatus::Queued).count(),
            3
        );
        let mut crossed = 0;
        for _ in 0..6 {
            crossed += s.step(&[EW]).unwrap().iter().filter(|e| e.event == EventKind::Cross).count();
        }
        assert_eq!(crossed, 3);
        assert_eq!(s.arrived_count(), 3);
    }

    #[test]
    fn ev_crosses_red_at_queue_head() {
        let mut f = ov(0, 0, &[0], Side::West, Side::East);
        f.class = VehicleClass::Ev;
        let mut s = sim(1, 1, 100.0, 10.0, vec![f]);
        for _ in 0..20 {
            s.step(&[NS]).unwrap();
        }
        assert_eq!(s.arrived_count(), 1);
    }

    #[test]
    fn same_tick_same_lane_defers_one() {
        let flows = vec![
            ov(0, 5, &[0], Side::West, Side::East),
            ov(1, 5, &[0], Side::West, Side::East),
        ];
        let mut s = sim(1, 1, 300.0, 10.0, flows);
        for _ in 0..5 {
            s.step(&[EW]).unwrap();
        }
        let ev = s.step(&[EW]).unwrap();
        let kinds: Vec<_> = ev.iter().map(|e| e.event).collect();
        assert_eq!(kinds, vec![EventKind::Spawn, EventKind::Defer]);
        let ev = s.step(&[EW]).unwrap();
        assert_eq!(ev[0].event, EventKind::Spawn);
        assert_eq!(s.vehicles()[1].scheduled_depart, 5);
        assert_eq!(s.vehicles()[1].depart_time, 6);
    }

    #[test]
    fn lane_metrics_rules() {
        let flows = (0..4).map(|i| ov(i, i * 2, &[0], Side::West, Side::East)).collect();
        let mut s = sim(1, 1, 100.0, 10.0, flows);
        let lane = {
            let g = s.graph().clone();
            let seg = g.intersections()[0].approaches[Side::West.index()].incoming.unwrap();
            lane_id(seg, Turn::Straight)
        };
        let m = s.lane_metrics(lane).unwrap();
        assert_eq!((m.queue_length_count, m.avg_speed), (0, 10.0));
        for _ in 0..60 {
            s.step(&[NS]).unwrap();
        }
        let m = s.lane_metrics(lane).unwrap();
        assert_eq!(m.queue_length_count, 4);
        assert_eq!(m.queue_length_m, 30.0);
        assert_eq!(m.avg_speed, 1.0);
        assert!(s.lane_metrics(LaneId(10_000)).is_err());
    }

    #[test]
    fn uniform_speed_average() {
        let mut s = sim(1, 1, 300.0, 5.0, vec![ov(0, 0, &[0], Side::West, Side::East)]);
        for _ in 0..10 {
            s.step(&[EW]).unwrap();
        }
        assert_eq!(s.lane_metrics(s.vehicles()[0].lane).unwrap().avg_speed, 5.0);
    }

    #[test]
    fn illegal_phase_rejected() {
        let mut s = sim(1, 1, 300.0, 5.0, vec![]);
        assert!(matches!(s.step(&[PhaseId(4)]), Err(Error::Invariant { .. })));
        assert!(matches!(s.step(&[]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn travel_time_requires_arrival() {
        let mut s = sim(1, 1, 300.0, 5.0, vec![ov(0, 0, &[0], Side::West, Side::East)]);
        s.step(&[EW]).unwrap();
        assert!(matches!(travel_time(&s.vehicles()[0]), Err(Error::Query(_))));
    }

    #[test]
    fn reroute_switches_lane_while_driving() {
        // 2x2 grid: 0 1 / 2 3. Start at 2 heading east to 3, then north to 1.
        let mut f = ov(0, 0, &[2, 3, 1], Side::West, Side::North);
        f.class = VehicleClass::Ev;
        f.planner_controlled = true;
        let mut s = sim(2, 2, 300.0, 10.0, vec![f]);
        for _ in 0..40 {
            s.step(&[EW; 4]).unwrap();
        }
        let v = s.vehicle(VehicleId(0)).unwrap();
        assert_eq!(v.next_intersection(), IntersectionId(3));
        assert_eq!(lane_turn(v.lane), Turn::Left);
        // Destination 1 cannot change; keep the same path but it must still be accepted.
        assert!(s.reroute(VehicleId(0), &[IntersectionId(3), IntersectionId(1)]).unwrap());
        assert!(s.reroute(VehicleId(0), &[IntersectionId(3), IntersectionId(2)]).is_err());
        s.check_invariants().unwrap();
    }
}
