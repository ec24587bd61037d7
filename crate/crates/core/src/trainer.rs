//! Deep Q-learning over one parameter store shared by every intersection.

use std::collections::VecDeque;
use std::io::Write;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{agent_inputs, reward, AgentInputs};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::network::{PhaseId, RoadGraph};
use crate::neural::{clip_grad_norm, forward, forward_network, QNetworkParams, Recorder, Tensor};
use crate::runner::{EvRouter, RouterKind};
use crate::scenario::{FlowSpec, VehicleClass};
use crate::sim::{csv_err, travel_time, SimState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub gamma: f64,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Share of the episodes over which epsilon decays linearly.
    pub epsilon_decay_fraction: f64,
    pub target_sync_episodes: usize,
    pub episodes: usize,
    pub episode_length_s: u32,
    pub ev_share: f64,
    /// Multiplies every reward before it enters the buffer.
    pub reward_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.95,
            learning_rate: 1e-3,
            grad_clip: 5.0,
            batch_size: 32,
            buffer_capacity: 10_000,
            epsilon_start: 0.8,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.7,
            target_sync_episodes: 5,
            episodes: 100,
            episode_length_s: 3600,
            ev_share: 0.01,
            reward_scale: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::invalid(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        for (name, e) in [("epsilon_start", self.epsilon_start), ("epsilon_end", self.epsilon_end)] {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1], got {e}")));
            }
        }
        if !(0.0..=1.0).contains(&self.epsilon_decay_fraction) || !(0.0..=1.0).contains(&self.ev_share) {
            return Err(Error::invalid("epsilon_decay_fraction and ev_share must lie in [0, 1]"));
        }
        if !(self.learning_rate > 0.0) || !(self.grad_clip > 0.0) || !(self.reward_scale > 0.0) {
            return Err(Error::invalid("learning rate, gradient clip and reward scale must be > 0"));
        }
        if self.batch_size == 0 || self.buffer_capacity < self.batch_size || self.target_sync_episodes == 0 {
            return Err(Error::invalid("need batch >= 1, buffer >= batch and target sync >= 1"));
        }
        if self.episode_length_s == 0 {
            return Err(Error::invalid("episode length must be >= 1 s"));
        }
        Ok(())
    }

    /// Linear decay from start to end over the first `epsilon_decay_fraction` of episodes.
    pub fn epsilon(&self, episode: usize) -> f64 {
        let span = (self.epsilon_decay_fraction * self.episodes as f64).round();
        if span < 1.0 || episode as f64 >= span {
            return self.epsilon_end;
        }
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * episode as f64 / span
    }
}

/// One agent's transition over an action interval.
#[derive(Debug, Clone, PartialEq)]
pub struct Experience {
    pub obs: Tensor,
    pub action: usize,
    pub reward: f64,
    pub next_obs: Tensor,
    pub terminal: bool,
}

/// FIFO replay memory shared by all agents.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Experience>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { capacity, items: VecDeque::with_capacity(capacity.min(1 << 16)) }
    }

    pub fn push(&mut self, e: Experience) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(e);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Experience> {
        self.items.iter()
    }

    /// Uniform sample without replacement.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<Vec<&Experience>> {
        if n > self.items.len() {
            return Err(Error::invalid(format!("cannot sample {n} from {} experiences", self.items.len())));
        }
        Ok(sample(rng, self.items.len(), n).into_iter().map(|i| &self.items[i]).collect())
    }
}

/// Index of the largest value, lowest index on ties.
pub fn greedy_action(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in q.iter().enumerate().skip(1) {
        if x > q[best] {
            best = i;
        }
    }
    best
}

pub fn select_action(q: &[f64], epsilon: f64, rng: &mut impl Rng) -> usize {
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        rng.gen_range(0..q.len())
    } else {
        greedy_action(q)
    }
}

pub fn td_target(r: f64, next_q: &[f64], gamma: f64, terminal: bool) -> f64 {
    if terminal {
        return r;
    }
    r + gamma * next_q.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    rewards.iter().rev().fold(0.0, |acc, r| r + gamma * acc)
}

/// Mean squared error between `Q(o, a)` and the fixed targets.
pub fn batch_loss(batch: &[&Experience], targets: &[f64], params: &QNetworkParams) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if batch.len() != targets.len() {
        return Err(Error::Shape(format!("{} experiences but {} targets", batch.len(), targets.len())));
    }
    let mut sum = 0.0;
    for (e, &y) in batch.iter().zip(targets) {
        let q = forward(&e.obs, params)?.q;
        sum += (q[e.action] - y).powi(2);
    }
    Ok(sum / batch.len() as f64)
}

/// Targets from the frozen network.
pub fn batch_targets(batch: &[&Experience], target: &QNetworkParams, gamma: f64) -> Result<Vec<f64>> {
    batch
        .iter()
        .map(|e| {
            let next = if e.terminal { Vec::new() } else { forward(&e.next_obs, target)?.q };
            Ok(td_target(e.reward, &next, gamma, e.terminal))
        })
        .collect()
}

/// One clipped SGD step on the batch; returns the loss before the update.
pub fn sgd_step(
    params: &mut QNetworkParams,
    target: &QNetworkParams,
    batch: &[&Experience],
    cfg: &TrainConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let ys = batch_targets(batch, target, cfg.gamma)?;
    let mut rec = Recorder::new();
    let scale = 2.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut dq = Vec::with_capacity(batch.len());
    for (e, &y) in batch.iter().zip(&ys) {
        let q = rec.forward(&e.obs, params)?;
        let err = q[e.action] - y;
        loss += err * err;
        let mut d = vec![0.0; q.len()];
        d[e.action] = scale * err;
        dq.push(d);
    }
    let mut grads = rec.backward(&dq, params)?;
    clip_grad_norm(&mut grads, cfg.grad_clip);
    params.add_scaled(&grads, -cfg.learning_rate);
    Ok(loss / batch.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurveRow {
    pub episode: usize,
    pub avg_tt_ov: Option<f64>,
    pub avg_tt_ev: Option<f64>,
    pub mean_loss: Option<f64>,
    pub epsilon: f64,
}

pub fn write_curve<W: Write>(out: W, rows: &[CurveRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["episode", "avg_tt_ov", "avg_tt_ev", "mean_loss", "epsilon"]).map_err(csv_err)?;
    let f = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([r.episode.to_string(), f(r.avg_tt_ov), f(r.avg_tt_ev), f(r.mean_loss), r.epsilon.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: QNetworkParams,
    pub curve: Vec<CurveRow>,
}

struct Trainer<'a> {
    cfg: &'a Config,
    tc: TrainConfig,
    params: QNetworkParams,
    target: QNetworkParams,
    buffer: ReplayBuffer,
    rng: ChaCha8Rng,
}

impl Trainer<'_> {
    fn push_transitions(&mut self, prev: (Vec<Tensor>, Vec<usize>), next: &AgentInputs, terminal: bool) -> Result<()> {
        let eta = self.cfg.agent().eta;
        for (i, (obs, action)) in prev.0.into_iter().zip(prev.1).enumerate() {
            let r = reward(&next.observations[i], eta)? * self.tc.reward_scale;
            self.buffer.push(Experience { obs, action, reward: r, next_obs: next.agent_matrix(i), terminal });
        }
        Ok(())
    }

    fn episode(&mut self, graph: &Arc<RoadGraph>, flows: &FlowSpec, router: RouterKind, ep: usize) -> Result<CurveRow> {
        let epsilon = self.tc.epsilon(ep);
        let flows = flows.with_ev_share(self.tc.ev_share, self.cfg.seed.wrapping_add(ep as u64))?;
        let mut state = SimState::new(graph.clone(), &flows, self.cfg.sim())?;
        let mut router = EvRouter::new(router, self.cfg.planner())?;
        let agent = self.cfg.agent();
        let interval = self.cfg.action_interval_s;
        let mut prev: Option<(Vec<Tensor>, Vec<usize>)> = None;
        let mut losses = Vec::new();
        while state.clock() < self.tc.episode_length_s {
            let inputs = agent_inputs(&state, &agent)?;
            if let Some(p) = prev.take() {
                self.push_transitions(p, &inputs, false)?;
            }
            let checksum = cfg!(debug_assertions).then(|| self.params.checksum());
            let q = forward_network(&inputs.matrix, &inputs.neighborhoods, &self.params)?;
            debug_assert_eq!(checksum, Some(self.params.checksum()));
            let actions: Vec<usize> = q.iter().map(|q| select_action(q, epsilon, &mut self.rng)).collect();
            let phases: Vec<PhaseId> = actions.iter().map(|&a| PhaseId(a as u32)).collect();
            for _ in 0..interval {
                if state.clock() >= self.tc.episode_length_s {
                    break;
                }
                router.update(&mut state)?;
                state.step(&phases)?;
            }
            let mats = (0..actions.len()).map(|i| inputs.agent_matrix(i)).collect();
            prev = Some((mats, actions));
            if self.buffer.len() >= self.tc.batch_size {
                let batch = self.buffer.sample(self.tc.batch_size, &mut self.rng)?;
                losses.push(sgd_step(&mut self.params, &self.target, &batch, &self.tc)?);
            }
        }
        if let Some(p) = prev.take() {
            let inputs = agent_inputs(&state, &agent)?;
            self.push_transitions(p, &inputs, true)?;
        }
        let avg = |class| {
            let t: Vec<f64> = state
                .vehicles()
                .iter()
                .filter(|v| v.class == class)
                .filter_map(|v| travel_time(v).ok())
                .map(f64::from)
                .collect();
            (!t.is_empty()).then(|| t.iter().sum::<f64>() / t.len() as f64)
        };
        let mean_loss = (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64);
        Ok(CurveRow { episode: ep, avg_tt_ov: avg(VehicleClass::Ov), avg_tt_ev: avg(VehicleClass::Ev), mean_loss, epsilon })
    }
}

/// Trains the shared network on `flows`, re-drawing the EV subset every episode.
pub fn train(graph: Arc<RoadGraph>, flows: &FlowSpec, cfg: &Config, router: RouterKind) -> Result<TrainOutcome> {
    train_from(graph, flows, cfg, router, None)
}

/// Like [`train`], optionally continuing from existing parameters.
pub fn train_from(
    graph: Arc<RoadGraph>,
    flows: &FlowSpec,
    cfg: &Config,
    router: RouterKind,
    init: Option<QNetworkParams>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let tc = cfg.train();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = match init {
        Some(p) => p,
        None => QNetworkParams::init(cfg.net(), &mut rng)?,
    };
    let mut t = Trainer {
        cfg,
        tc,
        target: params.clone(),
        params,
        buffer: ReplayBuffer::new(tc.buffer_capacity),
        rng,
    };
    let mut curve = Vec::with_capacity(tc.episodes);
    for ep in 0..tc.episodes {
        if ep % tc.target_sync_episodes == 0 {
            t.target = t.params.clone();
        }
        let row = t.episode(&graph, flows, router, ep)?;
        log::info!(
            "episode {ep}: ov {:?} ev {:?} loss {:?} eps {:.3}",
            row.avg_tt_ov,
            row.avg_tt_ev,
            row.mean_loss,
            row.epsilon
        );
        curve.push(row);
    }
    Ok(TrainOutcome { params: t.params, curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::NetConfig;
    use crate::scenario::{synthetic_scenario, SyntheticConfig};

    #[test]
    fn action_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(select_action(&[1.0, 5.0, 2.0, 0.0], 0.0, &mut rng), 1);
        assert_eq!(select_action(&[3.0, 3.0, 1.0, 1.0], 0.0, &mut rng), 0);
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            counts[select_action(&[0.0, 9.0, 0.0, 0.0], 1.0, &mut rng)] += 1;
        }
        // Binomial(10^4, 1/4): sigma is about 43.3.
        for c in counts {
            assert!((c as f64 - 2500.0).abs() < 3.0 * 43.3, "{counts:?}");
        }
    }

    #[test]
    fn targets_and_returns() {
        assert_eq!(td_target(-2.0, &[1.0, 3.0], 0.9, true), -2.0);
        assert!((td_target(-2.0, &[1.0, 3.0], 0.9, false) - 0.7).abs() < 1e-12);
        assert_eq!(td_target(4.0, &[10.0], 0.0, false), 4.0);
        assert_eq!(discounted_return(&[0.0; 5], 0.9), 0.0);
        assert_eq!(discounted_return(&[1.0, 1.0, 1.0], 0.5), 1.75);
        assert_eq!(discounted_return(&[3.0, 7.0], 0.0), 3.0);
    }

    #[test]
    fn epsilon_schedule() {
        let tc = TrainConfig::default();
        assert_eq!(tc.epsilon(0), 0.8);
        assert!((tc.epsilon(35) - 0.425).abs() < 1e-12);
        assert_eq!(tc.epsilon(70), 0.05);
        assert_eq!(tc.epsilon(99), 0.05);
    }

    fn experience(p: &QNetworkParams, seed: u64) -> Experience {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obs = Tensor::from_vec(3, p.config.obs_width, (0..3 * p.config.obs_width).map(|_| rng.gen_range(0.0..4.0)).collect())
            .unwrap();
        Experience { next_obs: obs.clone(), obs, action: (seed % 4) as usize, reward: -1.0, terminal: false }
    }

    #[test]
    fn loss_cases() {
        let p = QNetworkParams::init(NetConfig::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let e = experience(&p, 1);
        let q = forward(&e.obs, &p).unwrap().q;
        assert_eq!(batch_loss(&[&e], &[q[e.action]], &p).unwrap(), 0.0);
        assert!((batch_loss(&[&e], &[q[e.action] + 3.0], &p).unwrap() - 9.0).abs() < 1e-9);
        assert!(matches!(batch_loss(&[], &[], &p), Err(Error::InvalidArgument(_))));
        let f = experience(&p, 2);
        let single = batch_loss(&[&e, &f], &[0.5, 1.5], &p).unwrap();
        let doubled = batch_loss(&[&e, &f, &e, &f], &[0.5, 1.5, 0.5, 1.5], &p).unwrap();
        assert!((single - doubled).abs() < 1e-12);
    }

    #[test]
    fn sgd_reduces_loss_on_fixed_batch() {
        let mut p = QNetworkParams::init(NetConfig::default(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let batch: Vec<_> = (0..8).map(|s| Experience { terminal: true, ..experience(&p, s) }).collect();
        let refs: Vec<_> = batch.iter().collect();
        let tc = TrainConfig { learning_rate: 1e-2, ..TrainConfig::default() };
        let target = p.clone();
        let first = sgd_step(&mut p, &target, &refs, &tc).unwrap();
        for _ in 0..50 {
            sgd_step(&mut p, &target, &refs, &tc).unwrap();
        }
        let ys = batch_targets(&refs, &target, tc.gamma).unwrap();
        assert!(batch_loss(&refs, &ys, &p).unwrap() < first);
    }

    #[test]
    fn buffer_is_fifo_and_bounded() {
        let p = QNetworkParams::init(NetConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut b = ReplayBuffer::new(3);
        for s in 0..5 {
            b.push(Experience { reward: s as f64, ..experience(&p, s) });
            assert!(b.len() <= 3);
        }
        let rewards: Vec<f64> = b.iter().map(|e| e.reward).collect();
        assert_eq!(rewards, vec![2.0, 3.0, 4.0]);
        assert!(b.sample(4, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    fn tiny() -> (Arc<RoadGraph>, FlowSpec, Config) {
        let mut sc = SyntheticConfig::grid(2, 2);
        sc.horizon_s = 300;
        let s = synthetic_scenario(&sc).unwrap();
        let cfg = Config { episodes: 2, episode_length_s: 200, batch_size: 8, ev_share: 0.1, seed: 4, ..Config::default() };
        (Arc::new(s.graph), s.flows, cfg)
    }

    #[test]
    fn zero_episodes_leave_initial_params() {
        let (g, flows, mut cfg) = tiny();
        cfg.episodes = 0;
        let out = train(g, &flows, &cfg, RouterKind::None).unwrap();
        assert!(out.curve.is_empty());
        let init = QNetworkParams::init(cfg.net(), &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
        assert_eq!(out.params, init);
    }

    #[test]
    fn training_is_reproducible() {
        let (g, flows, cfg) = tiny();
        let a = train(g.clone(), &flows, &cfg, RouterKind::ApfLongterm).unwrap();
        let b = train(g, &flows, &cfg, RouterKind::ApfLongterm).unwrap();
        assert_eq!(a.params.checksum(), b.params.checksum());
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.curve.len(), 2);
        assert!(a.curve[1].mean_loss.is_some());
    }
}
