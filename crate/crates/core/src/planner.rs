//! Potential-field next-hop selection for emergency vehicles.
//!
//! Gravity rewards progress towards the destination, repulsion estimates the
//! time to clear a road, and the long-term term looks a few hops ahead with
//! discounting.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{shortest_path_tree, IntersectionId, RoadGraph, Route, SegmentId};
use crate::scenario::VehicleId;
use crate::sim::{csv_err, LaneMetrics, SimState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub lambda: f64,
    pub depth: usize,
    pub replan_interval_s: u32,
    pub crossing_speed_mps: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig { lambda: 0.8, depth: 4, replan_interval_s: 10, crossing_speed_mps: 5.0 }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::invalid(format!("lambda must lie in (0, 1], got {}", self.lambda)));
        }
        if self.depth == 0 {
            return Err(Error::invalid("planner depth must be >= 1"));
        }
        if self.replan_interval_s == 0 {
            return Err(Error::invalid("replan interval must be >= 1 s"));
        }
        if !(self.crossing_speed_mps > 0.0) {
            return Err(Error::invalid("crossing speed must be > 0"));
        }
        Ok(())
    }
}

/// Read-only traffic snapshot the planner evaluates against.
pub trait TrafficView {
    fn graph(&self) -> &RoadGraph;
    /// Queue length and average speed on a segment.
    fn segment_state(&self, seg: SegmentId) -> LaneMetrics;
}

impl TrafficView for SimState {
    fn graph(&self) -> &RoadGraph {
        SimState::graph(self)
    }

    fn segment_state(&self, seg: SegmentId) -> LaneMetrics {
        self.segment_metrics(seg).expect("segment exists")
    }
}

/// Fixed per-segment metrics; an empty network when built with [`StaticView::free_flow`].
#[derive(Debug, Clone)]
pub struct StaticView<'a> {
    pub graph: &'a RoadGraph,
    pub metrics: Vec<LaneMetrics>,
}

impl<'a> StaticView<'a> {
    pub fn free_flow(graph: &'a RoadGraph) -> Self {
        let metrics = graph
            .segments()
            .iter()
            .map(|s| LaneMetrics { queue_length_count: 0, queue_length_m: 0.0, avg_speed: s.speed_limit_mps })
            .collect();
        StaticView { graph, metrics }
    }
}

impl TrafficView for StaticView<'_> {
    fn graph(&self) -> &RoadGraph {
        self.graph
    }

    fn segment_state(&self, seg: SegmentId) -> LaneMetrics {
        self.metrics[seg.index()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldSample {
    pub neighbor: IntersectionId,
    pub gravity: f64,
    pub repulsion: f64,
    pub long_term_repulsion: f64,
    pub benefit: f64,
}

fn edge(graph: &RoadGraph, a: IntersectionId, b: IntersectionId) -> Result<SegmentId> {
    graph
        .segment_between(a, b)
        .ok_or_else(|| Error::Routing(format!("{b} is not a neighbour of {a}")))
}

/// Progress rate towards `vd` when moving from `vc` to `vi`; negative infinity if
/// `vd` cannot be reached from `vi`.
pub fn gravity(view: &impl TrafficView, vc: IntersectionId, vi: IntersectionId, vd: IntersectionId) -> Result<f64> {
    let g = view.graph();
    let seg = edge(g, vc, vi)?;
    let d_i = g.network_distance(vi, vd)?;
    if d_i.is_infinite() {
        return Ok(f64::NEG_INFINITY);
    }
    let d_c = g.network_distance(vc, vd)?;
    Ok((d_c - d_i) / view.segment_state(seg).avg_speed)
}

/// Time to drive the free part of the road plus the time to clear its queue.
pub fn immediate_repulsion(view: &impl TrafficView, vc: IntersectionId, vi: IntersectionId, cfg: &PlannerConfig) -> Result<f64> {
    let g = view.graph();
    let seg = edge(g, vc, vi)?;
    Ok(repulsion_of(view, seg, cfg))
}

fn repulsion_of(view: &impl TrafficView, seg: SegmentId, cfg: &PlannerConfig) -> f64 {
    let dis = view.graph().segments()[seg.index()].length_m;
    let m = view.segment_state(seg);
    let queue = m.queue_length_m.min(dis);
    (dis - queue) / m.avg_speed + queue / cfg.crossing_speed_mps
}

/// Depth-limited discounted repulsion over simple paths starting `vc -> vi`.
/// Extensions never revisit a node already on the path; a dead end contributes nothing.
pub fn long_term_repulsion_with(
    graph: &RoadGraph,
    vc: IntersectionId,
    vi: IntersectionId,
    depth: usize,
    lambda: f64,
    fr: &impl Fn(IntersectionId, IntersectionId) -> f64,
) -> f64 {
    let mut visited = vec![false; graph.intersection_count()];
    visited[vc.index()] = true;
    recurse(graph, vc, vi, 1, depth, lambda, fr, &mut visited)
}

#[allow(clippy::too_many_arguments)]
fn recurse(
    graph: &RoadGraph,
    a: IntersectionId,
    b: IntersectionId,
    level: usize,
    depth: usize,
    lambda: f64,
    fr: &impl Fn(IntersectionId, IntersectionId) -> f64,
    visited: &mut [bool],
) -> f64 {
    let here = fr(a, b);
    if level >= depth {
        return here;
    }
    visited[b.index()] = true;
    let mut best = f64::INFINITY;
    for next in graph.neighbors(b) {
        if !visited[next.index()] {
            best = best.min(recurse(graph, b, next, level + 1, depth, lambda, fr, visited));
        }
    }
    visited[b.index()] = false;
    if best.is_finite() {
        here + lambda * best
    } else {
        here
    }
}

pub fn long_term_repulsion(view: &impl TrafficView, vc: IntersectionId, vi: IntersectionId, cfg: &PlannerConfig) -> Result<f64> {
    let g = view.graph();
    edge(g, vc, vi)?;
    let fr = |a, b| repulsion_of(view, g.segment_between(a, b).expect("neighbour edge"), cfg);
    Ok(long_term_repulsion_with(g, vc, vi, cfg.depth, cfg.lambda, &fr))
}

pub fn field_sample(
    view: &impl TrafficView,
    vc: IntersectionId,
    vi: IntersectionId,
    vd: IntersectionId,
    cfg: &PlannerConfig,
) -> Result<FieldSample> {
    let gravity = gravity(view, vc, vi, vd)?;
    let repulsion = immediate_repulsion(view, vc, vi, cfg)?;
    let long_term_repulsion = long_term_repulsion(view, vc, vi, cfg)?;
    Ok(FieldSample { neighbor: vi, gravity, repulsion, long_term_repulsion, benefit: gravity - long_term_repulsion })
}

/// Samples every admissible neighbour of `vc`, excluding `prev` unless it is the only way on.
pub fn field_samples(
    view: &impl TrafficView,
    vc: IntersectionId,
    prev: Option<IntersectionId>,
    vd: IntersectionId,
    cfg: &PlannerConfig,
) -> Result<Vec<FieldSample>> {
    let g = view.graph();
    let mut cands: Vec<_> = g.neighbors(vc).into_iter().filter(|&v| Some(v) != prev).collect();
    if cands.is_empty() {
        cands = g.neighbors(vc);
    }
    cands.into_iter().map(|v| field_sample(view, vc, v, vd, cfg)).collect()
}

fn best_of(samples: &[FieldSample]) -> Option<FieldSample> {
    let mut best: Option<FieldSample> = None;
    for s in samples.iter().filter(|s| s.gravity.is_finite()) {
        // Neighbours are scanned in ascending id, so strict improvement keeps the lower id on ties.
        if best.is_none_or(|b| s.benefit > b.benefit) {
            best = Some(*s);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub route: Route,
    pub samples: Vec<FieldSample>,
}

/// Route from `vc` to `vd` whose first hop maximises the long-term benefit.
/// The next `depth - 1` hops follow the same rule without revisiting nodes, and
/// the remainder is the static shortest path.
pub fn plan_next(
    view: &impl TrafficView,
    vc: IntersectionId,
    prev: Option<IntersectionId>,
    vd: IntersectionId,
    cfg: &PlannerConfig,
) -> Result<Plan> {
    cfg.validate()?;
    let g = view.graph();
    g.intersection(vc)?;
    g.intersection(vd)?;
    if vc == vd {
        return Ok(Plan { route: Route(vec![vc]), samples: Vec::new() });
    }
    let samples = field_samples(view, vc, prev, vd, cfg)?;
    let first = best_of(&samples)
        .ok_or_else(|| Error::Routing(format!("destination {vd} unreachable from {vc}")))?;
    let mut nodes = vec![vc, first.neighbor];
    let mut visited = vec![false; g.intersection_count()];
    visited[vc.index()] = true;
    visited[first.neighbor.index()] = true;
    while nodes.len() <= cfg.depth && *nodes.last().unwrap() != vd {
        let cur = *nodes.last().unwrap();
        let options: Vec<_> = g
            .neighbors(cur)
            .into_iter()
            .filter(|v| !visited[v.index()])
            .map(|v| field_sample(view, cur, v, vd, cfg))
            .collect::<Result<_>>()?;
        let Some(next) = best_of(&options) else { break };
        visited[next.neighbor.index()] = true;
        nodes.push(next.neighbor);
    }
    let cur = *nodes.last().unwrap();
    if cur != vd {
        let back = nodes[nodes.len() - 2];
        let tail = shortest_path_tree(g, cur, |s| s.length_m, g.segment_between(cur, back))
            .path_to(vd)
            .or_else(|| shortest_path_tree(g, cur, |s| s.length_m, None).path_to(vd))
            .ok_or_else(|| Error::Routing(format!("destination {vd} unreachable from {cur}")))?;
        nodes.extend_from_slice(&tail.nodes()[1..]);
    }
    Ok(Plan { route: Route(nodes), samples })
}

/// Minimum travel-time route using current average speeds as edge costs.
/// `vo == vd` yields the single-node route.
pub fn dijkstra_route(view: &impl TrafficView, vo: IntersectionId, vd: IntersectionId) -> Result<Route> {
    let g = view.graph();
    g.intersection(vo)?;
    g.intersection(vd)?;
    let tree = shortest_path_tree(g, vo, |s| s.length_m / view.segment_state(s.id).avg_speed, None);
    tree.path_to(vd)
        .ok_or_else(|| Error::Routing(format!("destination {vd} unreachable from {vo}")))
}

/// Like [`dijkstra_route`] but never leaves `vo` through `banned` unless that is the only way.
pub(crate) fn dijkstra_route_avoiding(
    view: &impl TrafficView,
    vo: IntersectionId,
    vd: IntersectionId,
    banned: Option<SegmentId>,
) -> Result<Route> {
    let g = view.graph();
    let cost = |s: &crate::network::RoadSegment| s.length_m / view.segment_state(s.id).avg_speed;
    shortest_path_tree(g, vo, cost, banned)
        .path_to(vd)
        .or_else(|| shortest_path_tree(g, vo, cost, None).path_to(vd))
        .ok_or_else(|| Error::Routing(format!("destination {vd} unreachable from {vo}")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanDecision {
    pub tick: u32,
    pub ev_id: VehicleId,
    pub v_c: IntersectionId,
    pub chosen_next: IntersectionId,
    pub samples: Vec<FieldSample>,
}

/// CSV audit log; benefits are rendered as `neighbour:value` pairs joined by `;`.
pub fn write_decision_log<W: Write>(out: W, decisions: &[PlanDecision]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["tick", "ev_id", "v_c", "chosen_next", "benefits"]).map_err(csv_err)?;
    for d in decisions {
        let benefits: Vec<String> = d.samples.iter().map(|s| format!("{}:{}", s.neighbor, s.benefit)).collect();
        w.write_record([
            d.tick.to_string(),
            d.ev_id.to_string(),
            d.v_c.to_string(),
            d.chosen_next.to_string(),
            benefits.join(";"),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_grid, GraphBuilder, Side};

    fn chain() -> RoadGraph {
        // 0 -> 1 -> 2, 300 m each.
        let mut b = GraphBuilder::new();
        for i in 0..3 {
            b.add_intersection([i as f64 * 300.0, 0.0]);
        }
        b.add_segment(IntersectionId(0), Side::East, IntersectionId(1), Side::West, 300.0, 10.0).unwrap();
        b.add_segment(IntersectionId(1), Side::East, IntersectionId(2), Side::West, 300.0, 10.0).unwrap();
        b.build().unwrap()
    }

    const A: IntersectionId = IntersectionId(0);
    const B: IntersectionId = IntersectionId(1);
    const C: IntersectionId = IntersectionId(2);

    #[test]
    fn gravity_cases() {
        let g = chain();
        let v = StaticView::free_flow(&g);
        // dis(a,c) = 600, dis(b,c) = 300, S = 10.
        assert_eq!(gravity(&v, A, B, C).unwrap(), 30.0);
        assert_eq!(gravity(&v, B, C, C).unwrap(), 30.0);
        // c cannot reach a.
        assert_eq!(gravity(&v, B, C, A).unwrap(), f64::NEG_INFINITY);
        assert!(gravity(&v, A, C, C).is_err());
    }

    #[test]
    fn gravity_negative_when_leading_away() {
        let g = build_grid(1, 3, 300.0, 10.0).unwrap();
        let v = StaticView::free_flow(&g);
        assert_eq!(gravity(&v, B, A, C).unwrap(), -30.0);
        assert_eq!(gravity(&v, A, B, A).unwrap(), -30.0);
    }

    #[test]
    fn repulsion_cases() {
        let g = chain();
        let cfg = PlannerConfig::default();
        let mut v = StaticView::free_flow(&g);
        assert_eq!(immediate_repulsion(&v, A, B, &cfg).unwrap(), 30.0);
        v.metrics[0].queue_length_m = 60.0;
        assert_eq!(immediate_repulsion(&v, A, B, &cfg).unwrap(), 36.0);
        v.metrics[0].queue_length_m = 300.0;
        assert_eq!(immediate_repulsion(&v, A, B, &cfg).unwrap(), 60.0);
    }

    #[test]
    fn long_term_chain() {
        let g = chain();
        let fr = |a: IntersectionId, _b: IntersectionId| if a == A { 10.0 } else { 20.0 };
        assert_eq!(long_term_repulsion_with(&g, A, B, 2, 0.8, &fr), 26.0);
        assert_eq!(long_term_repulsion_with(&g, A, B, 1, 0.8, &fr), 10.0);
        // Dead end after c.
        assert_eq!(long_term_repulsion_with(&g, A, B, 4, 0.8, &fr), 26.0);
    }

    #[test]
    fn single_edge_route() {
        let g = chain();
        let v = StaticView::free_flow(&g);
        let plan = plan_next(&v, B, Some(A), C, &PlannerConfig::default()).unwrap();
        assert_eq!(plan.route.nodes(), &[B, C]);
    }

    #[test]
    fn congested_direct_edge_loses_to_detour() {
        // 1x2 grid plus a second row: 0 1 / 2 3. From 0 to 1, direct edge 0->1 is jammed.
        let g = build_grid(2, 2, 300.0, 20.0).unwrap();
        let mut v = StaticView::free_flow(&g);
        let direct = g.segment_between(A, B).unwrap();
        v.metrics[direct.index()].queue_length_m = 300.0;
        let cfg = PlannerConfig::default();
        let direct_b = field_sample(&v, A, B, B, &cfg).unwrap().benefit;
        let detour_b = field_sample(&v, A, C, B, &cfg).unwrap().benefit;
        assert!(detour_b > direct_b, "{detour_b} <= {direct_b}");
        let plan = plan_next(&v, A, None, B, &cfg).unwrap();
        assert_eq!(plan.route.nodes(), &[A, C, IntersectionId(3), B]);
    }

    #[test]
    fn same_node_is_zero_hop() {
        let g = chain();
        let v = StaticView::free_flow(&g);
        assert_eq!(dijkstra_route(&v, B, B).unwrap().nodes(), &[B]);
        assert!(dijkstra_route(&v, C, A).is_err());
        assert!(plan_next(&v, C, None, A, &PlannerConfig::default()).is_err());
    }

    #[test]
    fn decision_log_format() {
        let d = PlanDecision {
            tick: 10,
            ev_id: VehicleId(3),
            v_c: A,
            chosen_next: B,
            samples: vec![FieldSample { neighbor: B, gravity: 1.0, repulsion: 0.5, long_term_repulsion: 0.5, benefit: 0.5 }],
        };
        let mut buf = Vec::new();
        write_decision_log(&mut buf, &[d]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "tick,ev_id,v_c,chosen_next,benefits\n10,3,0,1,1:0.5\n");
    }
}
