//! Scenario files: a road network plus timed vehicle insertions.
//!
//! ```json
//! {
//!   "version": 1,
//!   "boundary_length_m": 300.0,
//!   "boundary_speed_limit_mps": 11.11,
//!   "intersections": [
//!     {"id": 0, "position": [0.0, 0.0],
//!      "approaches": {"east": {"in": 1, "out": 0}, "west": {"in": "boundary", "out": "boundary"}}}
//!   ],
//!   "segments": [{"id": 0, "from": 0, "to": 1, "length_m": 300.0, "speed_limit_mps": 11.11}],
//!   "flows": [
//!     {"id": 0, "class": "ov", "depart_time_s": 0, "route": [0, 1], "entry": "west", "exit": "east"},
//!     {"id": 1, "class": "ev", "depart_time_s": 5, "route": "auto", "origin": 0, "destination": 1}
//!   ]
//! }
//! ```
//!
//! Approach sides are explicit; `position` is only used for rendering.
//! `entry`/`exit` are optional and default to straight-through movements.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EntityKind, Error, Result};
use crate::network::{
    build_grid, Endpoint, GraphBuilder, IntersectionId, RoadGraph, Route, SegmentId, Side, Turn,
};

pub const SCENARIO_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VehicleId(pub u32);

impl std::fmt::Display for VehicleId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<VehicleId> for u64 {
    fn from(v: VehicleId) -> u64 {
        v.0 as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VehicleClass {
    Ov,
    Ev,
}

/// One timed vehicle insertion.
#[derive(Debug, Clone, PartialEq)]
pub struct Flow {
    pub id: VehicleId,
    pub class: VehicleClass,
    pub depart_time_s: u32,
    /// Initial route; for planner-controlled vehicles this is only the starting plan.
    pub route: Route,
    /// Route chosen at run time by the EV router.
    pub planner_controlled: bool,
    pub origin: IntersectionId,
    pub destination: IntersectionId,
    pub entry: Side,
    pub exit: Side,
}

/// Timed insertions ordered by `(depart_time_s, id)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlowSpec(pub Vec<Flow>);

impl FlowSpec {
    pub fn new(mut flows: Vec<Flow>) -> Self {
        flows.sort_by_key(|f| (f.depart_time_s, f.id));
        FlowSpec(flows)
    }

    pub fn flows(&self) -> &[Flow] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Re-designates `round(share * N)` vehicles, chosen by `seed`, as planner-controlled EVs;
    /// every other vehicle becomes an OV on its fixed route.
    pub fn with_ev_share(&self, share: f64, seed: u64) -> Result<FlowSpec> {
        if !(0.0..=1.0).contains(&share) {
            return Err(Error::invalid(format!("EV share must lie in [0, 1], got {share}")));
        }
        let n = self.0.len();
        let k = ((share * n as f64).round() as usize).min(n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chosen: HashSet<usize> = sample(&mut rng, n, k).into_iter().collect();
        let flows = self
            .0
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let ev = chosen.contains(&i);
                Flow {
                    class: if ev { VehicleClass::Ev } else { VehicleClass::Ov },
                    planner_controlled: ev,
                    ..f.clone()
                }
            })
            .collect();
        Ok(FlowSpec(flows))
    }

    pub fn count(&self, class: VehicleClass) -> usize {
        self.0.iter().filter(|f| f.class == class).count()
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub graph: RoadGraph,
    pub flows: FlowSpec,
    pub boundary_length_m: f64,
    pub boundary_speed_limit_mps: f64,
}

// ---- wire format --------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum BoundaryTag {
    Boundary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
enum LinkRef {
    Segment(u32),
    Boundary(BoundaryTag),
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ApproachDoc {
    #[serde(rename = "in", default, skip_serializing_if = "Option::is_none")]
    incoming: Option<LinkRef>,
    #[serde(rename = "out", default, skip_serializing_if = "Option::is_none")]
    outgoing: Option<LinkRef>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IntersectionDoc {
    id: u32,
    position: [f64; 2],
    #[serde(default)]
    approaches: BTreeMap<Side, ApproachDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SegmentDoc {
    id: u32,
    from: u32,
    to: u32,
    length_m: f64,
    speed_limit_mps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum AutoTag {
    Auto,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
enum RouteDoc {
    Nodes(Vec<u32>),
    Auto(AutoTag),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlowDoc {
    id: u32,
    class: VehicleClass,
    depart_time_s: u32,
    route: RouteDoc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    origin: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    destination: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    entry: Option<Side>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    exit: Option<Side>,
}

fn default_version() -> u32 {
    SCENARIO_VERSION
}

fn default_boundary_length() -> f64 {
    300.0
}

fn default_boundary_speed() -> f64 {
    11.11
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioDoc {
    #[serde(default = "default_version")]
    version: u32,
    #[serde(default = "default_boundary_length")]
    boundary_length_m: f64,
    #[serde(default = "default_boundary_speed")]
    boundary_speed_limit_mps: f64,
    intersections: Vec<IntersectionDoc>,
    segments: Vec<SegmentDoc>,
    #[serde(default)]
    flows: Vec<FlowDoc>,
}

impl Scenario {
    pub fn from_json_str(text: &str) -> Result<Scenario> {
        let doc: ScenarioDoc = serde_json::from_str(text).map_err(|e| {
            Error::Parse(format!("line {} column {}: {e}", e.line(), e.column()))
        })?;
        Scenario::from_doc(doc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Scenario> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Scenario::from_json_str(&text).map_err(|e| match e {
            Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json_string())?;
        Ok(())
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_doc()).expect("scenario serializes");
        s.push('\n');
        s
    }

    fn from_doc(doc: ScenarioDoc) -> Result<Scenario> {
        if doc.version != SCENARIO_VERSION {
            return Err(Error::Parse(format!(
                "unsupported scenario version {} (expected {SCENARIO_VERSION})",
                doc.version
            )));
        }
        if !(doc.boundary_length_m > 0.0 && doc.boundary_speed_limit_mps > 0.0) {
            return Err(Error::invalid("boundary length and speed limit must be > 0"));
        }
        let n = doc.intersections.len();
        for (i, node) in doc.intersections.iter().enumerate() {
            if node.id as usize != i {
                return Err(Error::invariant(
                    EntityKind::Intersection,
                    node.id,
                    format!("intersection ids must be dense and ordered; expected {i}"),
                ));
            }
        }
        for (i, seg) in doc.segments.iter().enumerate() {
            if seg.id as usize != i {
                return Err(Error::invariant(
                    EntityKind::Segment,
                    seg.id,
                    format!("segment ids must be dense and ordered; expected {i}"),
                ));
            }
            for end in [seg.from, seg.to] {
                if end as usize >= n {
                    return Err(Error::invariant(
                        EntityKind::Segment,
                        seg.id,
                        format!("references unknown intersection {end}"),
                    ));
                }
            }
            if !(seg.length_m > 0.0) || !seg.length_m.is_finite() {
                return Err(Error::invariant(EntityKind::Segment, seg.id, "length must be > 0"));
            }
            if !(seg.speed_limit_mps > 0.0) || !seg.speed_limit_mps.is_finite() {
                return Err(Error::invariant(EntityKind::Segment, seg.id, "speed limit must be > 0"));
            }
        }

        // Side assignment of each internal segment at both ends.
        let mut from_side: Vec<Option<Side>> = vec![None; doc.segments.len()];
        let mut to_side: Vec<Option<Side>> = vec![None; doc.segments.len()];
        for node in &doc.intersections {
            for (&side, a) in &node.approaches {
                if let Some(LinkRef::Segment(s)) = a.incoming {
                    let seg = doc.segments.get(s as usize).ok_or_else(|| {
                        Error::invariant(EntityKind::Intersection, node.id, format!("approach references unknown segment {s}"))
                    })?;
                    if seg.to != node.id || to_side[s as usize].replace(side).is_some() {
                        return Err(Error::invariant(
                            EntityKind::Segment,
                            s,
                            format!("incoming approach at intersection {} is inconsistent", node.id),
                        ));
                    }
                }
                if let Some(LinkRef::Segment(s)) = a.outgoing {
                    let seg = doc.segments.get(s as usize).ok_or_else(|| {
                        Error::invariant(EntityKind::Intersection, node.id, format!("approach references unknown segment {s}"))
                    })?;
                    if seg.from != node.id || from_side[s as usize].replace(side).is_some() {
                        return Err(Error::invariant(
                            EntityKind::Segment,
                            s,
                            format!("outgoing approach at intersection {} is inconsistent", node.id),
                        ));
                    }
                }
            }
        }

        let mut b = GraphBuilder::new();
        for node in &doc.intersections {
            b.add_intersection(node.position);
        }
        for seg in &doc.segments {
            let (Some(fs), Some(ts)) = (from_side[seg.id as usize], to_side[seg.id as usize]) else {
                return Err(Error::invariant(
                    EntityKind::Segment,
                    seg.id,
                    "segment is not attached to an approach at both ends",
                ));
            };
            b.add_segment(
                IntersectionId(seg.from),
                fs,
                IntersectionId(seg.to),
                ts,
                seg.length_m,
                seg.speed_limit_mps,
            )?;
        }
        for node in &doc.intersections {
            for (&side, a) in &node.approaches {
                if a.incoming == Some(LinkRef::Boundary(BoundaryTag::Boundary)) {
                    b.add_boundary_entry(IntersectionId(node.id), side, doc.boundary_length_m, doc.boundary_speed_limit_mps)?;
                }
                if a.outgoing == Some(LinkRef::Boundary(BoundaryTag::Boundary)) {
                    b.add_boundary_exit(IntersectionId(node.id), side, doc.boundary_length_m, doc.boundary_speed_limit_mps)?;
                }
            }
        }
        let graph = b.build()?;

        let mut seen = HashSet::new();
        let mut flows = Vec::with_capacity(doc.flows.len());
        for f in doc.flows {
            if !seen.insert(f.id) {
                return Err(Error::invariant(EntityKind::Flow, f.id, "duplicate vehicle id"));
            }
            flows.push(resolve_flow(&graph, f)?);
        }
        Ok(Scenario {
            graph,
            flows: FlowSpec::new(flows),
            boundary_length_m: doc.boundary_length_m,
            boundary_speed_limit_mps: doc.boundary_speed_limit_mps,
        })
    }

    fn to_doc(&self) -> ScenarioDoc {
        let g = &self.graph;
        let link = |s: Option<SegmentId>| {
            s.map(|s| {
                if g.segments()[s.index()].is_internal() {
                    LinkRef::Segment(s.0)
                } else {
                    LinkRef::Boundary(BoundaryTag::Boundary)
                }
            })
        };
        let intersections = g
            .intersections()
            .iter()
            .map(|node| IntersectionDoc {
                id: node.id.0,
                position: node.position,
                approaches: Side::ALL
                    .into_iter()
                    .filter_map(|side| {
                        let a = node.approaches[side.index()];
                        let doc = ApproachDoc { incoming: link(a.incoming), outgoing: link(a.outgoing) };
                        (doc.incoming.is_some() || doc.outgoing.is_some()).then_some((side, doc))
                    })
                    .collect(),
            })
            .collect();
        // Internal segments are renumbered densely; boundary roads are implied by approaches.
        let internal: Vec<_> = g.segments().iter().filter(|s| s.is_internal()).collect();
        debug_assert!(internal.iter().enumerate().all(|(i, s)| s.id.index() == i));
        let segments = internal
            .iter()
            .map(|s| SegmentDoc {
                id: s.id.0,
                from: s.from.node().unwrap().0,
                to: s.to.node().unwrap().0,
                length_m: s.length_m,
                speed_limit_mps: s.speed_limit_mps,
            })
            .collect();
        let flows = self
            .flows
            .flows()
            .iter()
            .map(|f| {
                if f.planner_controlled {
                    FlowDoc {
                        id: f.id.0,
                        class: f.class,
                        depart_time_s: f.depart_time_s,
                        route: RouteDoc::Auto(AutoTag::Auto),
                        origin: Some(f.origin.0),
                        destination: Some(f.destination.0),
                        entry: Some(f.entry),
                        exit: Some(f.exit),
                    }
                } else {
                    FlowDoc {
                        id: f.id.0,
                        class: f.class,
                        depart_time_s: f.depart_time_s,
                        route: RouteDoc::Nodes(f.route.nodes().iter().map(|v| v.0).collect()),
                        origin: None,
                        destination: None,
                        entry: Some(f.entry),
                        exit: Some(f.exit),
                    }
                }
            })
            .collect();
        ScenarioDoc {
            version: SCENARIO_VERSION,
            boundary_length_m: self.boundary_length_m,
            boundary_speed_limit_mps: self.boundary_speed_limit_mps,
            intersections,
            segments,
            flows,
        }
    }
}

/// Loads a scenario file, returning the network and its flow specification.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<(RoadGraph, FlowSpec)> {
    let s = Scenario::load(path)?;
    Ok((s.graph, s.flows))
}

fn resolve_flow(graph: &RoadGraph, f: FlowDoc) -> Result<Flow> {
    let check_node = |v: u32| -> Result<IntersectionId> {
        if (v as usize) < graph.intersection_count() {
            Ok(IntersectionId(v))
        } else {
            Err(Error::invariant(EntityKind::Flow, f.id, format!("references unknown intersection {v}")))
        }
    };
    let (route, planner_controlled, origin, destination) = match &f.route {
        RouteDoc::Nodes(nodes) => {
            if nodes.is_empty() {
                return Err(Error::invariant(EntityKind::Flow, f.id, "route is empty"));
            }
            let nodes: Vec<_> = nodes.iter().map(|&v| check_node(v)).collect::<Result<_>>()?;
            let route = Route(nodes);
            route
                .validate(graph)
                .map_err(|e| Error::invariant(EntityKind::Flow, f.id, e.to_string()))?;
            let (o, d) = (route.0[0], *route.0.last().unwrap());
            (route, false, o, d)
        }
        RouteDoc::Auto(_) => {
            let o = f.origin.ok_or_else(|| Error::invariant(EntityKind::Flow, f.id, "auto route needs an origin"))?;
            let d = f.destination.ok_or_else(|| Error::invariant(EntityKind::Flow, f.id, "auto route needs a destination"))?;
            let (o, d) = (check_node(o)?, check_node(d)?);
            (Route(vec![o]), true, o, d)
        }
    };
    let mut flow = Flow {
        id: VehicleId(f.id),
        class: f.class,
        depart_time_s: f.depart_time_s,
        route,
        planner_controlled,
        origin,
        destination,
        entry: Side::North,
        exit: Side::North,
    };
    flow.entry = match f.entry {
        Some(s) => s,
        None => default_entry(graph, &flow).ok_or_else(|| {
            Error::invariant(EntityKind::Flow, f.id, format!("origin {origin} has no usable entry road"))
        })?,
    };
    if planner_controlled {
        flow.route = initial_route(graph, origin, destination, flow.entry).ok_or_else(|| {
            Error::invariant(EntityKind::Flow, f.id, format!("destination {destination} unreachable from {origin}"))
        })?;
    }
    flow.exit = match f.exit {
        Some(s) => s,
        None => default_exit(graph, &flow.route, flow.entry).ok_or_else(|| {
            Error::invariant(EntityKind::Flow, f.id, format!("destination {destination} has no usable exit road"))
        })?,
    };
    check_flow(graph, &flow)?;
    Ok(flow)
}

/// Entry side making the first movement straight where possible.
fn default_entry(graph: &RoadGraph, flow: &Flow) -> Option<Side> {
    let node = graph.intersection(flow.origin).ok()?;
    let first_out = flow
        .route
        .nodes()
        .get(1)
        .and_then(|&next| graph.segment_between(flow.origin, next))
        .and_then(|s| node.side_of_outgoing(s));
    if let Some(out) = first_out {
        let straight = out.opposite();
        if node.approaches[straight.index()].incoming.is_some() {
            return Some(straight);
        }
        return Side::ALL
            .into_iter()
            .find(|&s| s != out && node.approaches[s.index()].incoming.is_some());
    }
    // Prefer a boundary entry for single-node or planner routes.
    let is_boundary = |s: Side| {
        node.approaches[s.index()]
            .incoming
            .map(|seg| graph.segments()[seg.index()].from == Endpoint::Boundary)
            .unwrap_or(false)
    };
    Side::ALL
        .into_iter()
        .find(|&s| is_boundary(s))
        .or_else(|| Side::ALL.into_iter().find(|&s| node.approaches[s.index()].incoming.is_some()))
}

/// Exit side continuing straight through the destination where possible.
pub(crate) fn default_exit(graph: &RoadGraph, route: &Route, entry: Side) -> Option<Side> {
    let nodes = route.nodes();
    let dest = *nodes.last()?;
    let node = graph.intersection(dest).ok()?;
    let arrival = if nodes.len() >= 2 {
        let seg = graph.segment_between(nodes[nodes.len() - 2], dest)?;
        node.side_of_incoming(seg)?
    } else {
        entry
    };
    exit_for_arrival(graph, dest, arrival, None)
}

/// Exit used at `dest` when arriving from `arrival`: the preferred side unless it would be a
/// U-turn or missing, then straight, right, left.
pub(crate) fn exit_for_arrival(
    graph: &RoadGraph,
    dest: IntersectionId,
    arrival: Side,
    preferred: Option<Side>,
) -> Option<Side> {
    let node = graph.intersection(dest).ok()?;
    let has_out = |s: Side| node.approaches[s.index()].outgoing.is_some();
    if let Some(p) = preferred {
        if p != arrival && has_out(p) {
            return Some(p);
        }
    }
    [Turn::Straight, Turn::Right, Turn::Left]
        .into_iter()
        .map(|t| t.exit_side(arrival))
        .find(|&s| has_out(s))
}

/// Static shortest-distance route that does not start with a U-turn from `entry`.
pub(crate) fn initial_route(graph: &RoadGraph, origin: IntersectionId, destination: IntersectionId, entry: Side) -> Option<Route> {
    let node = graph.intersection(origin).ok()?;
    let banned = node.approaches[entry.index()].outgoing;
    let tree = crate::network::shortest_path_tree(graph, origin, |s| s.length_m, banned);
    tree.path_to(destination)
        .or_else(|| crate::network::shortest_path_tree(graph, origin, |s| s.length_m, None).path_to(destination))
}

fn check_flow(graph: &RoadGraph, flow: &Flow) -> Result<()> {
    let id = flow.id.0;
    let origin = graph.intersection(flow.origin)?;
    if origin.approaches[flow.entry.index()].incoming.is_none() {
        return Err(Error::invariant(
            EntityKind::Flow,
            id,
            format!("origin {} has no incoming road on its {} side", flow.origin, flow.entry.name()),
        ));
    }
    if let Some(&next) = flow.route.nodes().get(1) {
        let seg = graph.segment_between(flow.origin, next).unwrap();
        if origin.side_of_outgoing(seg) == Some(flow.entry) {
            return Err(Error::invariant(EntityKind::Flow, id, "first movement is a U-turn"));
        }
    }
    let dest = graph.intersection(flow.destination)?;
    if dest.approaches[flow.exit.index()].outgoing.is_none() {
        return Err(Error::invariant(
            EntityKind::Flow,
            id,
            format!("destination {} has no outgoing road on its {} side", flow.destination, flow.exit.name()),
        ));
    }
    if flow.route.nodes().len() == 1 && flow.entry == flow.exit {
        return Err(Error::invariant(EntityKind::Flow, id, "single-node route makes a U-turn"));
    }
    Ok(())
}

// ---- generators ----------------------------------------------------------

/// Parameters of the synthetic arterial grid demand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub rows: usize,
    pub cols: usize,
    pub segment_length_m: f64,
    pub speed_limit_mps: f64,
    pub horizon_s: u32,
    /// Vehicles per hour on each east-west arterial entry lane.
    pub ew_rate_vph: f64,
    /// Vehicles per hour on each north-south arterial entry lane.
    pub ns_rate_vph: f64,
}

impl SyntheticConfig {
    /// The 6x6, 300 m, 300/90 veh/lane/h grid.
    pub fn synthetic6x6() -> Self {
        SyntheticConfig {
            rows: 6,
            cols: 6,
            segment_length_m: 300.0,
            speed_limit_mps: 11.11,
            horizon_s: 3600,
            ew_rate_vph: 300.0,
            ns_rate_vph: 90.0,
        }
    }

    pub fn grid(rows: usize, cols: usize) -> Self {
        SyntheticConfig { rows, cols, ..Self::synthetic6x6() }
    }

    /// Number of arterial entry lanes carrying demand, as (east-west, north-south).
    /// Every odd row and odd column is an arterial; each feeds one straight-through lane.
    pub fn entry_lanes(&self) -> (usize, usize) {
        (self.rows / 2, self.cols / 2)
    }

    /// Network-wide insertion rate in vehicles per 300 s.
    pub fn arrivals_per_300s(&self) -> f64 {
        let (ew, ns) = self.entry_lanes();
        (ew as f64 * self.ew_rate_vph + ns as f64 * self.ns_rate_vph) * 300.0 / 3600.0
    }
}

/// Uniform straight-through arterial demand on a grid. Odd rows carry east-west
/// traffic (alternating west-to-east and east-to-west), odd columns carry
/// north-south traffic (alternating south-to-north and north-to-south).
pub fn synthetic_scenario(cfg: &SyntheticConfig) -> Result<Scenario> {
    let graph = build_grid(cfg.rows, cfg.cols, cfg.segment_length_m, cfg.speed_limit_mps)?;
    let (rows, cols) = (cfg.rows, cfg.cols);
    let id = |r: usize, c: usize| IntersectionId((r * cols + c) as u32);

    struct Lane {
        nodes: Vec<IntersectionId>,
        entry: Side,
        exit: Side,
        headway_s: f64,
    }
    let mut lanes = Vec::new();
    for (k, r) in (1..rows).step_by(2).enumerate() {
        let mut nodes: Vec<_> = (0..cols).map(|c| id(r, c)).collect();
        let (entry, exit) = if k % 2 == 0 {
            (Side::West, Side::East)
        } else {
            nodes.reverse();
            (Side::East, Side::West)
        };
        if cfg.ew_rate_vph > 0.0 {
            lanes.push(Lane { nodes, entry, exit, headway_s: 3600.0 / cfg.ew_rate_vph });
        }
    }
    for (k, c) in (1..cols).step_by(2).enumerate() {
        let mut nodes: Vec<_> = (0..rows).map(|r| id(r, c)).collect();
        let (entry, exit) = if k % 2 == 0 {
            nodes.reverse();
            (Side::South, Side::North)
        } else {
            (Side::North, Side::South)
        };
        if cfg.ns_rate_vph > 0.0 {
            lanes.push(Lane { nodes, entry, exit, headway_s: 3600.0 / cfg.ns_rate_vph });
        }
    }

    let mut timed = Vec::new();
    for (li, lane) in lanes.iter().enumerate() {
        let mut k = 0u32;
        loop {
            let t = (k as f64 * lane.headway_s).round() as u32;
            if t >= cfg.horizon_s {
                break;
            }
            timed.push((t, li));
            k += 1;
        }
    }
    timed.sort();
    let flows = timed
        .into_iter()
        .enumerate()
        .map(|(i, (t, li))| {
            let lane = &lanes[li];
            Flow {
                id: VehicleId(i as u32),
                class: VehicleClass::Ov,
                depart_time_s: t,
                route: Route(lane.nodes.clone()),
                planner_controlled: false,
                origin: lane.nodes[0],
                destination: *lane.nodes.last().unwrap(),
                entry: lane.entry,
                exit: lane.exit,
            }
        })
        .collect();
    Ok(Scenario {
        graph,
        flows: FlowSpec::new(flows),
        boundary_length_m: cfg.segment_length_m,
        boundary_speed_limit_mps: cfg.speed_limit_mps,
    })
}

/// Corridor for the preemption threshold trade-off: a light west-to-east
/// arterial through `length` intersections whose every tenth vehicle is an EV,
/// crossed at each intersection by heavy north-to-south traffic.
pub fn greenwave_tradeoff_scenario(length: usize, horizon_s: u32) -> Result<Scenario> {
    let length = length.max(1);
    let graph = build_grid(1, length, 300.0, 11.11)?;
    let mut flows = Vec::new();
    let mut next_id = 0u32;
    let arterial: Vec<_> = (0..length as u32).map(IntersectionId).collect();
    let mut t = 0;
    let mut k = 0;
    while t < horizon_s {
        let ev = k % 10 == 5;
        flows.push(Flow {
            id: VehicleId(next_id),
            class: if ev { VehicleClass::Ev } else { VehicleClass::Ov },
            depart_time_s: t,
            route: Route(arterial.clone()),
            planner_controlled: false,
            origin: arterial[0],
            destination: *arterial.last().unwrap(),
            entry: Side::West,
            exit: Side::East,
        });
        next_id += 1;
        k += 1;
        t += 30;
    }
    for &v in &arterial {
        let mut t = 0;
        while t < horizon_s {
            flows.push(Flow {
                id: VehicleId(next_id),
                class: VehicleClass::Ov,
                depart_time_s: t,
                route: Route(vec![v]),
                planner_controlled: false,
                origin: v,
                destination: v,
                entry: Side::North,
                exit: Side::South,
            });
            next_id += 1;
            t += 6;
        }
    }
    Ok(Scenario {
        graph,
        flows: FlowSpec::new(flows),
        boundary_length_m: 300.0,
        boundary_speed_limit_mps: 11.11,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_rates() {
        let cfg = SyntheticConfig::synthetic6x6();
        assert_eq!(cfg.entry_lanes(), (3, 3));
        assert!((cfg.arrivals_per_300s() - 97.5).abs() < 1e-9);
        let s = synthetic_scenario(&cfg).unwrap();
        assert_eq!(s.graph.intersection_count(), 36);
        // 3 lanes x 300 + 3 lanes x 90 over one hour.
        assert_eq!(s.flows.len(), 3 * 300 + 3 * 90);
        let per_300s = s.flows.len() as f64 / 12.0;
        assert!((per_300s - 97.5).abs() < 1e-9);
    }

    #[test]
    fn one_by_one_grid_has_no_flows() {
        let s = synthetic_scenario(&SyntheticConfig::grid(1, 1)).unwrap();
        assert_eq!(s.graph.intersection_count(), 1);
        assert!(s.flows.is_empty());
    }

    #[test]
    fn ev_share_is_deterministic_and_exact() {
        let s = synthetic_scenario(&SyntheticConfig::synthetic6x6()).unwrap();
        let a = s.flows.with_ev_share(0.01, 3).unwrap();
        let b = s.flows.with_ev_share(0.01, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.count(VehicleClass::Ev), 12);
        let c = s.flows.with_ev_share(0.01, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn json_round_trip_preserves_scenario() {
        let mut s = synthetic_scenario(&SyntheticConfig::grid(3, 3)).unwrap();
        s.flows = s.flows.with_ev_share(0.05, 1).unwrap();
        let text = s.to_json_string();
        let back = Scenario::from_json_str(&text).unwrap();
        assert_eq!(back.graph.intersection_count(), 9);
        assert_eq!(back.graph.segments(), s.graph.segments());
        assert_eq!(back.flows, s.flows);
    }

    #[test]
    fn empty_flow_list_is_valid() {
        let s = synthetic_scenario(&SyntheticConfig::grid(2, 2)).unwrap();
        let mut doc = s.to_doc();
        doc.flows.clear();
        let text = serde_json::to_string(&doc).unwrap();
        let back = Scenario::from_json_str(&text).unwrap();
        assert!(back.flows.is_empty());
    }

    #[test]
    fn unknown_intersection_is_named() {
        let s = synthetic_scenario(&SyntheticConfig::grid(2, 2)).unwrap();
        let mut doc = s.to_doc();
        doc.segments[0].to = 77;
        let err = Scenario::from_json_str(&serde_json::to_string(&doc).unwrap()).unwrap_err();
        assert!(err.to_string().contains("77"), "{err}");

        let mut doc = s.to_doc();
        doc.flows = vec![FlowDoc {
            id: 9,
            class: VehicleClass::Ov,
            depart_time_s: 0,
            route: RouteDoc::Nodes(vec![0, 42]),
            origin: None,
            destination: None,
            entry: None,
            exit: None,
        }];
        let err = Scenario::from_json_str(&serde_json::to_string(&doc).unwrap()).unwrap_err();
        assert!(err.to_string().contains("42"), "{err}");
    }

    #[test]
    fn parse_error_reports_line() {
        let err = Scenario::from_json_str("{\n  \"intersections\": [\n  oops\n]}").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn auto_route_defaults() {
        let text = r#"{
            "intersections": [
                {"id": 0, "position": [0, 0], "approaches": {"west": {"in": "boundary"}, "east": {"out": 0, "in": 1}}},
                {"id": 1, "position": [300, 0], "approaches": {"west": {"in": 0, "out": 1}, "east": {"out": "boundary"}}}
            ],
            "segments": [
                {"id": 0, "from": 0, "to": 1, "length_m": 300, "speed_limit_mps": 10},
                {"id": 1, "from": 1, "to": 0, "length_m": 300, "speed_limit_mps": 10}
            ],
            "flows": [{"id": 4, "class": "ev", "depart_time_s": 3, "route": "auto", "origin": 0, "destination": 1}]
        }"#;
        let s = Scenario::from_json_str(text).unwrap();
        let f = &s.flows.flows()[0];
        assert!(f.planner_controlled);
        assert_eq!(f.entry, Side::West);
        assert_eq!(f.exit, Side::East);
        assert_eq!(f.route.nodes(), &[IntersectionId(0), IntersectionId(1)]);
    }
}
