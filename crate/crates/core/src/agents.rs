//! Per-intersection agent view: observations, pressure, reward and the
//! route-aware neighbourhood each agent attends over.

use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{
    lane_turn, IntersectionId, RoadGraph, Route, LANES_PER_INTERSECTION, LANES_PER_SEGMENT, PHASE_COUNT,
};
use crate::neural::Tensor;
use crate::scenario::VehicleClass;
use crate::sim::SimState;

pub const OBS_WIDTH: usize = PHASE_COUNT + 4 * LANES_PER_INTERSECTION;

const OV_IN: usize = PHASE_COUNT;
const OV_OUT: usize = OV_IN + LANES_PER_INTERSECTION;
const EV_IN: usize = OV_OUT + LANES_PER_INTERSECTION;
const EV_OUT: usize = EV_IN + LANES_PER_INTERSECTION;

/// Fixed 52-wide feature vector: phase one-hot, then OV in/out and EV in/out
/// counts per lane slot (`side * 3 + lane`). Absent lanes stay zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub intersection: IntersectionId,
    pub values: [f64; OBS_WIDTH],
    /// Movements as (incoming slot, outgoing slot).
    pub movements: Vec<(u8, u8)>,
}

impl Observation {
    pub fn empty(intersection: IntersectionId, phase: usize) -> Self {
        let mut values = [0.0; OBS_WIDTH];
        values[phase] = 1.0;
        Observation { intersection, values, movements: Vec::new() }
    }

    pub fn phase_onehot(&self) -> &[f64] {
        &self.values[..PHASE_COUNT]
    }

    pub fn x_o_in(&self) -> &[f64] {
        &self.values[OV_IN..OV_OUT]
    }

    pub fn x_o_out(&self) -> &[f64] {
        &self.values[OV_OUT..EV_IN]
    }

    pub fn x_e_in(&self) -> &[f64] {
        &self.values[EV_IN..EV_OUT]
    }

    pub fn x_e_out(&self) -> &[f64] {
        &self.values[EV_OUT..]
    }

    pub fn set_ov(&mut self, incoming: bool, slot: usize, count: f64) {
        self.values[if incoming { OV_IN } else { OV_OUT } + slot] = count;
    }

    pub fn set_ev(&mut self, incoming: bool, slot: usize, count: f64) {
        self.values[if incoming { EV_IN } else { EV_OUT } + slot] = count;
    }
}

pub fn observe(state: &SimState, v: IntersectionId) -> Result<Observation> {
    let graph = state.graph();
    let node = graph.intersection(v)?;
    let mut obs = Observation::empty(v, state.current_phase(v).index());
    for (side_idx, a) in node.approaches.iter().enumerate() {
        for (incoming, seg) in [(true, a.incoming), (false, a.outgoing)] {
            let Some(seg) = seg else { continue };
            for lane in graph.segments()[seg.index()].lanes() {
                let slot = side_idx * LANES_PER_SEGMENT + lane_turn(lane).index();
                let (ov, ev) = state.lane_counts(lane);
                obs.set_ov(incoming, slot, ov as f64);
                obs.set_ev(incoming, slot, ev as f64);
            }
        }
    }
    obs.movements = node.movements.iter().map(|m| (m.in_slot() as u8, m.out_slot)).collect();
    Ok(obs)
}

/// Sum over movements of the absolute OV count difference between the two lanes.
pub fn pressure(obs: &Observation) -> f64 {
    let (xi, xo) = (obs.x_o_in(), obs.x_o_out());
    obs.movements
        .iter()
        .map(|&(i, o)| (xi[i as usize] - xo[o as usize]).abs())
        .sum()
}

/// EVs waiting to enter the intersection.
pub fn ev_load(obs: &Observation) -> f64 {
    obs.x_e_in().iter().sum()
}

pub fn reward(obs: &Observation, eta: f64) -> Result<f64> {
    reward_terms(ev_load(obs), pressure(obs), eta)
}

pub fn reward_terms(l_e: f64, p_o: f64, eta: f64) -> Result<f64> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::invalid(format!("eta must lie in (0, 1), got {eta}")));
    }
    Ok(-l_e / eta - p_o / (1.0 - eta))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub delta: f64,
    pub k: usize,
    pub eta: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig { delta: 0.5, k: 6, eta: 0.01 }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::invalid(format!("delta must lie in (0, 1], got {}", self.delta)));
        }
        if self.k == 0 {
            return Err(Error::invalid("K must be >= 1"));
        }
        reward_terms(0.0, 0.0, self.eta).map(|_| ())
    }
}

/// Everything the shared network needs for one decision round.
#[derive(Debug, Clone)]
pub struct AgentInputs {
    pub observations: Vec<Observation>,
    pub sets: Vec<NeighborSet>,
    /// One observation row per intersection, in id order.
    pub matrix: Tensor,
    /// Row indices of each agent's neighbour set, target first.
    pub neighborhoods: Vec<Vec<usize>>,
}

impl AgentInputs {
    /// Observation rows of agent `i`'s neighbour set, the same rows the shared forward pass sees.
    pub fn agent_matrix(&self, i: usize) -> Tensor {
        let rows = self.sets[i].ids.len();
        Tensor::from_vec(rows, OBS_WIDTH, gather(&self.observations, &self.sets[i], rows)).expect("gather shape")
    }
}

pub fn agent_inputs(state: &SimState, cfg: &AgentConfig) -> Result<AgentInputs> {
    let graph = state.graph();
    let n = graph.intersection_count();
    let dg = relational_distances(graph, &active_ev_routes(state), cfg.delta)?;
    let k = cfg.k.min(n);
    let mut observations = Vec::with_capacity(n);
    let mut sets = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * OBS_WIDTH);
    for v in graph.intersections() {
        let obs = observe(state, v.id)?;
        data.extend_from_slice(&obs.values);
        observations.push(obs);
        sets.push(dg.top_k(v.id, k)?);
    }
    let neighborhoods = sets.iter().map(|s| s.ids.iter().map(|v| v.index()).collect()).collect();
    Ok(AgentInputs { observations, sets, matrix: Tensor::from_vec(n, OBS_WIDTH, data)?, neighborhoods })
}

/// Road graph with segment weights shortened by `delta` along active EV routes.
#[derive(Debug, Clone)]
pub struct DynamicGraph<'a> {
    graph: &'a RoadGraph,
    pub delta: f64,
    /// Weight per segment id; boundary roads are never traversed.
    pub weights: Vec<f64>,
}

/// Reweights every directed segment on any of `routes` by `delta`.
pub fn relational_distances<'a>(graph: &'a RoadGraph, routes: &[Route], delta: f64) -> Result<DynamicGraph<'a>> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::invalid(format!("delta must lie in (0, 1], got {delta}")));
    }
    let mut weights: Vec<f64> = graph.segments().iter().map(|s| s.length_m).collect();
    let mut discounted = vec![false; weights.len()];
    for r in routes {
        for s in r.segments(graph)? {
            if !std::mem::replace(&mut discounted[s.index()], true) {
                weights[s.index()] *= delta;
            }
        }
    }
    Ok(DynamicGraph { graph, delta, weights })
}

/// Routes still ahead of every in-network EV, starting at the node it last left.
pub fn active_ev_routes(state: &SimState) -> Vec<Route> {
    let graph = state.graph();
    state
        .active_vehicles()
        .filter(|v| v.class == VehicleClass::Ev)
        .map(|v| {
            let mut nodes = Vec::with_capacity(v.route.len() - v.route_index + 1);
            if let Some(prev) = graph.segments()[v.segment().index()].from.node() {
                nodes.push(prev);
            }
            nodes.extend_from_slice(v.remaining_route());
            Route(nodes)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry(f64, IntersectionId);

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        o.0.total_cmp(&self.0).then_with(|| o.1.cmp(&self.1))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborSet {
    pub target: IntersectionId,
    /// Ascending by (relational distance, id); the target comes first.
    pub ids: Vec<IntersectionId>,
    pub distances: Vec<f64>,
    /// False when the bounded search may have missed a nearer node.
    pub exact: bool,
}

impl DynamicGraph<'_> {
    pub fn graph(&self) -> &RoadGraph {
        self.graph
    }

    /// Relational distance from every node to `target` (travel direction towards it).
    pub fn distances_to(&self, target: IntersectionId) -> Vec<f64> {
        let mut dist = vec![f64::INFINITY; self.graph.intersection_count()];
        let mut heap = BinaryHeap::new();
        dist[target.index()] = 0.0;
        heap.push(Entry(0.0, target));
        while let Some(Entry(d, v)) = heap.pop() {
            if d > dist[v.index()] {
                continue;
            }
            for &s in self.graph.incoming(v) {
                let Some(u) = self.graph.segments()[s.index()].from.node() else { continue };
                let nd = d + self.weights[s.index()];
                if nd < dist[u.index()] {
                    dist[u.index()] = nd;
                    heap.push(Entry(nd, u));
                }
            }
        }
        dist
    }

    /// K nearest intersections to `target` by relational distance, searching at most 2K nodes.
    pub fn top_k(&self, target: IntersectionId, k: usize) -> Result<NeighborSet> {
        let n = self.graph.intersection_count();
        self.graph.intersection(target)?;
        if k == 0 {
            return Err(Error::invalid("K must be >= 1"));
        }
        let k = if k > n {
            log::warn!("K = {k} exceeds the {n} intersections; clamping");
            n
        } else {
            k
        };
        let budget = 2 * k;
        let mut dist = vec![f64::INFINITY; n];
        let mut discovered = 1;
        let mut refused_bound = f64::INFINITY;
        let mut settled = Vec::with_capacity(budget);
        let mut heap = BinaryHeap::new();
        dist[target.index()] = 0.0;
        heap.push(Entry(0.0, target));
        while let Some(Entry(d, v)) = heap.pop() {
            if d > dist[v.index()] {
                continue;
            }
            settled.push((d, v));
            for &s in self.graph.incoming(v) {
                let Some(u) = self.graph.segments()[s.index()].from.node() else { continue };
                let nd = d + self.weights[s.index()];
                if dist[u.index()].is_infinite() {
                    if discovered >= budget {
                        refused_bound = refused_bound.min(nd);
                        continue;
                    }
                    discovered += 1;
                }
                if nd < dist[u.index()] {
                    dist[u.index()] = nd;
                    heap.push(Entry(nd, u));
                }
            }
        }
        settled.truncate(k);
        let exact = if settled.len() < k {
            refused_bound.is_infinite()
        } else {
            refused_bound > settled[k - 1].0
        };
        Ok(NeighborSet {
            target,
            ids: settled.iter().map(|&(_, v)| v).collect(),
            distances: settled.iter().map(|&(d, _)| d).collect(),
            exact,
        })
    }

    /// Reference answer: sort every reachable node by (distance, id).
    pub fn top_k_exhaustive(&self, target: IntersectionId, k: usize) -> Vec<IntersectionId> {
        let dist = self.distances_to(target);
        let mut all: Vec<_> = (0..dist.len())
            .filter(|&i| dist[i].is_finite())
            .map(|i| (dist[i], IntersectionId(i as u32)))
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        all.into_iter().take(k).map(|(_, v)| v).collect()
    }
}

/// Stacks the observations of a neighbour set into a row-major `K x 52` matrix.
/// Rows are zero-padded when the set is shorter than `k`.
pub fn gather(observations: &[Observation], set: &NeighborSet, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * OBS_WIDTH];
    for (row, v) in set.ids.iter().take(k).enumerate() {
        out[row * OBS_WIDTH..(row + 1) * OBS_WIDTH].copy_from_slice(&observations[v.index()].values);
    }
    out
}
