use std::sync::Arc;

use evsched::agents::{observe, pressure, relational_distances, reward_terms, Observation, OBS_WIDTH};
use evsched::baselines::{fixed_time, green_wave, max_pressure_phase, phase_pressures, BaselineConfig};
use evsched::network::{lane_segment, random_graph, shortest_path_tree, Turn, LANES_PER_SEGMENT};
use evsched::runner::{FixedTimePolicy, SignalPolicy};
use evsched::neural::{attention_weights, Checkpoint, NetConfig, QNetworkParams};
use evsched::scenario::{synthetic_scenario, Scenario, SyntheticConfig};
use evsched::sim::{event_log_hash, SimConfig, SimState};
use evsched::trainer::{discounted_return, td_target, Experience, ReplayBuffer};
use evsched::{build_grid, IntersectionId, PhaseId, Route, VehicleClass};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_scenario(rows: usize, cols: usize, rate: f64, horizon: u32) -> Scenario {
    let cfg = SyntheticConfig { rows, cols, horizon_s: horizon, ew_rate_vph: rate, ns_rate_vph: rate / 2.0, ..SyntheticConfig::grid(rows, cols) };
    synthetic_scenario(&cfg).unwrap()
}

fn run_random(s: &Scenario, ev_seed: u64, action_seed: u64, ticks: u32) -> (String, Vec<Vec<f64>>) {
    let flows = s.flows.with_ev_share(0.2, ev_seed).unwrap();
    let mut state = SimState::new(Arc::new(s.graph.clone()), &flows, SimConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(action_seed);
    let n = s.graph.intersection_count();
    let mut events = Vec::new();
    let mut distances = Vec::new();
    for _ in 0..ticks {
        let actions: Vec<PhaseId> = (0..n).map(|_| PhaseId(rng.gen_range(0..4))).collect();
        events.extend(state.step(&actions).unwrap());
        assert_eq!(state.spawned_count(), state.arrived_count() + state.in_network_count());
        state.check_invariants().unwrap();
        distances.push(state.vehicles().iter().map(|v| v.distance_m).collect());
    }
    (event_log_hash(&events), distances)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn grid_counts(rows in 1usize..7, cols in 1usize..7) {
        let g = build_grid(rows, cols, 100.0, 10.0).unwrap();
        prop_assert_eq!(g.intersection_count(), rows * cols);
        prop_assert_eq!(g.internal_segment_count(), 2 * (rows * (cols - 1) + cols * (rows - 1)));
        prop_assert_eq!(g.lane_count(), g.segments().len() * LANES_PER_SEGMENT);
        g.validate().unwrap();
    }

    #[test]
    fn movements_join_own_lanes_without_u_turns(seed in any::<u64>(), n in 1usize..9) {
        let g = random_graph(n, 0.5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for v in g.intersections() {
            let (ins, outs) = (v.incoming_lanes(), v.outgoing_lanes());
            for m in &v.movements {
                prop_assert!(ins.contains(&m.from_lane));
                prop_assert!(outs.contains(&m.to_lane));
                let out_side = v.side_of_outgoing(lane_segment(m.to_lane)).unwrap();
                prop_assert_eq!(v.side_of_incoming(lane_segment(m.from_lane)), Some(m.side));
                prop_assert!(out_side != m.side);
                prop_assert_eq!(Turn::between(m.side, out_side), Some(m.turn));
            }
        }
    }

    #[test]
    fn network_distance_triangle(seed in any::<u64>(), n in 2usize..9) {
        let g = random_graph(n, 0.5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    let d = |x: usize, y: usize| g.distances_from(IntersectionId(x as u32))[y];
                    prop_assert!(d(a, c) <= d(a, b) + d(b, c) + 1e-9);
                }
            }
        }
    }

    #[test]
    fn conservation_determinism_and_monotone_offsets(rows in 1usize..4, cols in 1usize..4, seed in any::<u64>()) {
        let s = small_scenario(rows.max(2), cols.max(2), 900.0, 300);
        let (h1, d1) = run_random(&s, seed, seed ^ 7, 200);
        let (h2, _) = run_random(&s, seed, seed ^ 7, 200);
        prop_assert_eq!(h1, h2);
        for w in d1.windows(2) {
            for (a, b) in w[0].iter().zip(&w[1]) {
                prop_assert!(b >= a);
            }
        }
    }

    #[test]
    fn softmax_sums_to_one_and_ignores_shifts(
        e in prop::collection::vec(-30.0f64..30.0, 1..10),
        c in -100.0f64..100.0,
        mu in 0.05f64..10.0,
    ) {
        let a = attention_weights(&e, mu).unwrap();
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        let shifted: Vec<f64> = e.iter().map(|x| x + c).collect();
        for (x, y) in a.iter().zip(attention_weights(&shifted, mu).unwrap()) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn pressure_ignores_evs_and_reward_is_monotone(
        ov in prop::collection::vec(0u8..20, 24),
        ev in prop::collection::vec(0u8..3, 24),
        l_e in 0.0f64..5.0,
        p_o in 0.0f64..50.0,
        eta in 0.001f64..0.999,
    ) {
        let node = build_grid(1, 1, 100.0, 10.0).unwrap().intersections()[0].clone();
        let mut obs = Observation::empty(IntersectionId(0), 0);
        obs.movements = node.movements.iter().map(|m| (m.in_slot() as u8, m.out_slot)).collect();
        for (i, &x) in ov.iter().enumerate() {
            obs.set_ov(i < 12, i % 12, x as f64);
        }
        let before = pressure(&obs);
        for (i, &x) in ev.iter().enumerate() {
            obs.set_ev(i < 12, i % 12, x as f64);
        }
        prop_assert_eq!(pressure(&obs), before);
        let r = reward_terms(l_e, p_o, eta).unwrap();
        prop_assert!(reward_terms(l_e + 1.0, p_o, eta).unwrap() < r);
        prop_assert!(reward_terms(l_e, p_o + 1.0, eta).unwrap() < r);
    }

    #[test]
    fn max_pressure_is_argmax_and_scale_free(ov in prop::collection::vec(0u8..20, 24), scale in 1u8..5) {
        let node = build_grid(1, 1, 100.0, 10.0).unwrap().intersections()[0].clone();
        let mut obs = Observation::empty(IntersectionId(0), 0);
        let mut scaled = obs.clone();
        for (i, &x) in ov.iter().enumerate() {
            obs.set_ov(i < 12, i % 12, x as f64);
            scaled.set_ov(i < 12, i % 12, (x * scale) as f64);
        }
        let chosen = max_pressure_phase(&node, &obs);
        let pr = phase_pressures(&node, &obs);
        prop_assert!(pr.iter().all(|&p| p <= pr[chosen.index()]));
        prop_assert_eq!(max_pressure_phase(&node, &scaled), chosen);
    }

    #[test]
    fn green_wave_without_evs_is_fixed_time(seed in any::<u64>(), ticks in 1u32..400) {
        let s = small_scenario(3, 3, 600.0, 400);
        let flows = s.flows.with_ev_share(0.0, seed).unwrap();
        prop_assert_eq!(flows.count(VehicleClass::Ev), 0);
        let cfg = BaselineConfig::default();
        let mut state = SimState::new(Arc::new(s.graph.clone()), &flows, SimConfig::default()).unwrap();
        for _ in 0..ticks {
            let ft = fixed_time(state.clock(), &cfg);
            for v in s.graph.intersections() {
                prop_assert_eq!(green_wave(&state, v.id, &cfg, ft).unwrap(), ft);
            }
            state.step(&vec![ft; s.graph.intersection_count()]).unwrap();
        }
    }

    #[test]
    fn unit_delta_neighbourhoods_ignore_routes(seed in any::<u64>(), k in 1usize..10) {
        let g = build_grid(4, 4, 1.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = IntersectionId(rng.gen_range(0..16));
        let b = IntersectionId(rng.gen_range(0..16));
        let route = shortest_path_tree(&g, a, |s| s.length_m, None).path_to(b).unwrap();
        let with = relational_distances(&g, &[route], 1.0).unwrap();
        let without = relational_distances(&g, &[], 1.0).unwrap();
        for v in g.intersections() {
            prop_assert_eq!(with.top_k(v.id, k).unwrap(), without.top_k(v.id, k).unwrap());
        }
    }

    #[test]
    fn exact_top_k_matches_exhaustive(seed in any::<u64>(), n in 1usize..10, k in 1usize..6, delta in 0.1f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(n, 0.5, &mut rng).unwrap();
        let a = IntersectionId(rng.gen_range(0..n as u32));
        let b = IntersectionId(rng.gen_range(0..n as u32));
        let routes: Vec<Route> = shortest_path_tree(&g, a, |s| s.length_m, None).path_to(b).into_iter().collect();
        let dg = relational_distances(&g, &routes, delta).unwrap();
        for v in g.intersections() {
            let set = dg.top_k(v.id, k).unwrap();
            prop_assert_eq!(set.ids[0], v.id);
            if set.exact {
                prop_assert_eq!(&set.ids, &dg.top_k_exhaustive(v.id, k.min(n)));
            }
        }
    }

    #[test]
    fn fixed_time_is_state_independent(seed in any::<u64>(), ticks in 1u32..300) {
        let s = small_scenario(2, 2, 900.0, 300);
        let cfg = BaselineConfig::default();
        let flows = s.flows.with_ev_share(0.5, seed).unwrap();
        let mut busy = SimState::new(Arc::new(s.graph.clone()), &flows, SimConfig::default()).unwrap();
        let mut empty = SimState::new(Arc::new(s.graph.clone()), &Default::default(), SimConfig::default()).unwrap();
        let mut a = FixedTimePolicy(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..ticks {
            let x = a.actions(&busy).unwrap();
            prop_assert_eq!(&x, &a.actions(&empty).unwrap());
            prop_assert!(x.iter().all(|&p| p == PhaseId((busy.clock() / 30) % 4)));
            let noise: Vec<PhaseId> = (0..4).map(|_| PhaseId(rng.gen_range(0..4))).collect();
            busy.step(&noise).unwrap();
            empty.step(&x).unwrap();
        }
    }

    #[test]
    fn scenario_json_round_trips(rows in 1usize..4, cols in 1usize..4, rate in 0.0f64..600.0, seed in any::<u64>()) {
        let mut s = small_scenario(rows, cols, rate, 300);
        s.flows = s.flows.with_ev_share(0.3, seed).unwrap();
        let text = s.to_json_string();
        let back = Scenario::from_json_str(&text).unwrap();
        prop_assert_eq!(back.to_json_string(), text);
        prop_assert_eq!(back.flows.flows(), s.flows.flows());
    }

    #[test]
    fn checkpoint_round_trips_bit_exact(seed in any::<u64>(), heads in 1usize..4) {
        let cfg = NetConfig { hidden: 4 * heads, heads, ..NetConfig::default() };
        let p = QNetworkParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let back = Checkpoint::from_json_str(&Checkpoint::new(p.clone()).to_json_string()).unwrap();
        prop_assert_eq!(back.params, p);
    }

    #[test]
    fn replay_buffer_stays_bounded(cap in 1usize..20, pushes in 0usize..60) {
        let row = evsched::neural::Tensor::zeros(1, OBS_WIDTH);
        let mut b = ReplayBuffer::new(cap);
        for i in 0..pushes {
            b.push(Experience { obs: row.clone(), action: 0, reward: i as f64, next_obs: row.clone(), terminal: false });
            prop_assert!(b.len() <= cap);
        }
        let first = pushes.saturating_sub(cap) as f64;
        prop_assert_eq!(b.iter().next().map(|e| e.reward), (pushes > 0).then_some(first));
    }

    #[test]
    fn td_and_returns(r in -10.0f64..10.0, q in prop::collection::vec(-10.0f64..10.0, 1..5), gamma in 0.0f64..0.99) {
        prop_assert_eq!(td_target(r, &q, gamma, true), r);
        prop_assert_eq!(td_target(r, &q, 0.0, false), r);
        prop_assert_eq!(discounted_return(&[r], gamma), r);
    }
}

#[test]
fn observation_counts_match_lane_contents() {
    let s = small_scenario(3, 3, 1200.0, 600);
    let flows = s.flows.with_ev_share(0.2, 3).unwrap();
    let mut state = SimState::new(Arc::new(s.graph.clone()), &flows, SimConfig::default()).unwrap();
    for _ in 0..300 {
        state.step(&vec![PhaseId(1); 9]).unwrap();
    }
    for v in s.graph.intersections() {
        let obs = observe(&state, v.id).unwrap();
        let total: f64 = obs.x_o_in().iter().chain(obs.x_e_in()).sum();
        let lanes: usize = v.incoming_lanes().iter().map(|&l| state.lane_vehicles(l).count()).sum();
        assert_eq!(total as usize, lanes);
    }
}
