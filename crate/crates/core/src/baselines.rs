//! Rule-based signal policies used for comparison.

use serde::{Deserialize, Serialize};

use crate::agents::Observation;
use crate::error::{Error, Result};
use crate::network::{Intersection, IntersectionId, PhaseId, Turn, PHASE_COUNT};
use crate::scenario::VehicleClass;
use crate::sim::{turn_at, SimState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub fixed_phase_duration_s: u32,
    pub greenwave_threshold_m: f64,
    pub maxpressure_min_phase_s: u32,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig { fixed_phase_duration_s: 30, greenwave_threshold_m: 200.0, maxpressure_min_phase_s: 10 }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fixed_phase_duration_s == 0 || self.maxpressure_min_phase_s == 0 || !(self.greenwave_threshold_m > 0.0) {
            return Err(Error::invalid("baseline durations and threshold must be positive"));
        }
        Ok(())
    }
}

/// Global cyclic schedule: every intersection shows the same phase.
pub fn fixed_time(clock: u32, cfg: &BaselineConfig) -> PhaseId {
    PhaseId((clock / cfg.fixed_phase_duration_s) % PHASE_COUNT as u32)
}

/// Signed movement pressure summed per phase.
pub fn phase_pressures(node: &Intersection, obs: &Observation) -> [f64; PHASE_COUNT] {
    let (xi, xo) = (obs.x_o_in(), obs.x_o_out());
    let mut out = [0.0; PHASE_COUNT];
    for (p, phase) in node.phases.iter().enumerate() {
        out[p] = phase
            .green_movements
            .iter()
            .map(|m| xi[m.in_slot()] - xo[m.out_slot as usize])
            .sum();
    }
    out
}

/// Phase with the largest pressure, lowest index on ties.
pub fn max_pressure_phase(node: &Intersection, obs: &Observation) -> PhaseId {
    let pr = phase_pressures(node, obs);
    let mut best = 0;
    for p in 1..PHASE_COUNT {
        if pr[p] > pr[best] {
            best = p;
        }
    }
    PhaseId(best as u32)
}

/// Max-pressure choice, holding the current phase until it has run `min_phase_s`.
pub fn max_pressure(state: &SimState, v: IntersectionId, obs: &Observation, cfg: &BaselineConfig) -> Result<PhaseId> {
    let node = state.graph().intersection(v)?;
    if state.clock() > 0 && state.phase_age(v) < cfg.maxpressure_min_phase_s {
        return Ok(state.current_phase(v));
    }
    Ok(max_pressure_phase(node, obs))
}

/// Phase serving the nearest EV within the threshold upstream of `v`, if any.
pub fn green_wave_preemption(state: &SimState, v: IntersectionId, cfg: &BaselineConfig) -> Result<Option<PhaseId>> {
    let graph = state.graph();
    let node = graph.intersection(v)?;
    let mut best: Option<(f64, u32, Option<PhaseId>)> = None;
    for ev in state.active_vehicles().filter(|x| x.class == VehicleClass::Ev) {
        let nodes = ev.route.nodes();
        let mut dist = graph.segments()[ev.segment().index()].length_m - ev.offset_m;
        let mut k = ev.route_index;
        while nodes[k] != v {
            if k + 1 >= nodes.len() || dist > cfg.greenwave_threshold_m {
                break;
            }
            let seg = graph.segment_between(nodes[k], nodes[k + 1]).expect("valid route");
            dist += graph.segments()[seg.index()].length_m;
            k += 1;
        }
        if nodes[k] != v || dist > cfg.greenwave_threshold_m {
            continue;
        }
        let turn = turn_at(graph, nodes, k, ev.entry, ev.exit)?;
        let side = if k == ev.route_index {
            node.side_of_incoming(ev.segment()).expect("lane enters v")
        } else {
            let seg = graph.segment_between(nodes[k - 1], v).expect("valid route");
            node.side_of_incoming(seg).expect("segment enters v")
        };
        let phase = if turn == Turn::Right {
            None
        } else {
            node.phases.iter().position(|p| p.allows(side, turn)).map(|p| PhaseId(p as u32))
        };
        let key = (dist, ev.id.0);
        if best.is_none_or(|(d, id, _)| key < (d, id)) {
            best = Some((dist, ev.id.0, phase));
        }
    }
    Ok(best.and_then(|(_, _, p)| p))
}

/// Threshold preemption on top of the fixed-time schedule.
pub fn green_wave(state: &SimState, v: IntersectionId, cfg: &BaselineConfig, fallback: PhaseId) -> Result<PhaseId> {
    Ok(green_wave_preemption(state, v, cfg)?.unwrap_or(fallback))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_grid, Route, Side};
    use crate::scenario::{Flow, FlowSpec, VehicleId};
    use crate::sim::SimConfig;
    use std::sync::Arc;

    #[test]
    fn fixed_time_schedule() {
        let cfg = BaselineConfig::default();
        assert_eq!(fixed_time(65, &cfg), PhaseId(2));
        assert_eq!(fixed_time(0, &cfg), PhaseId(0));
        assert_eq!(fixed_time(125, &cfg), PhaseId(0));
    }

    fn one_node() -> Intersection {
        build_grid(1, 1, 300.0, 10.0).unwrap().intersections()[0].clone()
    }

    #[test]
    fn max_pressure_cases() {
        let node = one_node();
        let mut obs = crate::agents::Observation::empty(IntersectionId(0), 0);
        obs.movements = node.movements.iter().map(|m| (m.in_slot() as u8, m.out_slot)).collect();
        assert_eq!(max_pressure_phase(&node, &obs), PhaseId(0));
        // North approach, left-turn lane.
        obs.set_ov(true, Side::North.index() * 3 + Turn::Left.index(), 10.0);
        assert_eq!(max_pressure_phase(&node, &obs), PhaseId(3));
        let pr = phase_pressures(&node, &obs);
        assert!(pr.iter().all(|&x| x <= pr[3]));
    }

    fn ev_flow(id: u32, t: u32, entry: Side, exit: Side) -> Flow {
        Flow {
            id: VehicleId(id),
            class: VehicleClass::Ev,
            depart_time_s: t,
            route: Route(vec![IntersectionId(0)]),
            planner_controlled: false,
            origin: IntersectionId(0),
            destination: IntersectionId(0),
            entry,
            exit,
        }
    }

    #[test]
    fn green_wave_cases() {
        let g = Arc::new(build_grid(1, 1, 300.0, 10.0).unwrap());
        let cfg = BaselineConfig::default();
        let empty = SimState::new(g.clone(), &FlowSpec::default(), SimConfig::default()).unwrap();
        assert_eq!(green_wave(&empty, IntersectionId(0), &cfg, PhaseId(2)).unwrap(), PhaseId(2));

        // 300 m approach at 10 m/s.
        let flows = FlowSpec::new(vec![ev_flow(0, 0, Side::North, Side::South)]);
        let mut s = SimState::new(g.clone(), &flows, SimConfig::default()).unwrap();
        for _ in 0..5 {
            s.step(&[PhaseId(0)]).unwrap();
        }
        assert_eq!(green_wave(&s, IntersectionId(0), &cfg, PhaseId(0)).unwrap(), PhaseId(0));
        for _ in 0..10 {
            s.step(&[PhaseId(0)]).unwrap();
        }
        assert_eq!(green_wave(&s, IntersectionId(0), &cfg, PhaseId(0)).unwrap(), PhaseId(1));

        // Conflicting EVs, east-west nearer than the north-east left turn.
        let flows = FlowSpec::new(vec![ev_flow(0, 0, Side::West, Side::East), ev_flow(1, 13, Side::North, Side::East)]);
        let mut s = SimState::new(g, &flows, SimConfig::default()).unwrap();
        for _ in 0..25 {
            s.step(&[PhaseId(1)]).unwrap();
        }
        let d0 = 300.0 - s.vehicle(VehicleId(0)).unwrap().offset_m;
        let d1 = 300.0 - s.vehicle(VehicleId(1)).unwrap().offset_m;
        assert!(d0 < d1 && d1 <= 200.0, "{d0} {d1}");
        assert_eq!(green_wave(&s, IntersectionId(0), &cfg, PhaseId(1)).unwrap(), PhaseId(0));
    }
}
