//! Flat key-value configuration covering every tunable default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agents::AgentConfig;
use crate::baselines::BaselineConfig;
use crate::error::{Error, Result};
use crate::neural::NetConfig;
use crate::planner::PlannerConfig;
use crate::sim::SimConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,

    pub action_interval_s: u32,
    pub saturation_headway_s: u32,
    pub vehicle_length_m: f64,
    pub speed_window_ticks: usize,
    pub min_avg_speed_mps: f64,
    pub max_ticks: u32,

    pub lambda: f64,
    pub depth: usize,
    pub crossing_speed_mps: f64,

    pub delta: f64,
    pub k: usize,
    pub eta: f64,

    pub hidden: usize,
    pub heads: usize,
    pub temperature: f64,

    pub gamma: f64,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay_fraction: f64,
    pub target_sync_episodes: usize,
    pub episodes: usize,
    pub episode_length_s: u32,
    pub ev_share: f64,
    pub reward_scale: f64,

    pub fixed_phase_duration_s: u32,
    pub greenwave_threshold_m: f64,
    pub maxpressure_min_phase_s: u32,
}

impl Default for Config {
    fn default() -> Self {
        let (sim, pl, ag, net, tr, bl) = (
            SimConfig::default(),
            PlannerConfig::default(),
            AgentConfig::default(),
            NetConfig::default(),
            TrainConfig::default(),
            BaselineConfig::default(),
        );
        Config {
            seed: 0,
            action_interval_s: sim.action_interval_s,
            saturation_headway_s: sim.saturation_headway_s,
            vehicle_length_m: sim.vehicle_length_m,
            speed_window_ticks: sim.speed_window_ticks,
            min_avg_speed_mps: sim.min_avg_speed_mps,
            max_ticks: 7200,
            lambda: pl.lambda,
            depth: pl.depth,
            crossing_speed_mps: pl.crossing_speed_mps,
            delta: ag.delta,
            k: ag.k,
            eta: ag.eta,
            hidden: net.hidden,
            heads: net.heads,
            temperature: net.temperature,
            gamma: tr.gamma,
            learning_rate: tr.learning_rate,
            grad_clip: tr.grad_clip,
            batch_size: tr.batch_size,
            buffer_capacity: tr.buffer_capacity,
            epsilon_start: tr.epsilon_start,
            epsilon_end: tr.epsilon_end,
            epsilon_decay_fraction: tr.epsilon_decay_fraction,
            target_sync_episodes: tr.target_sync_episodes,
            episodes: tr.episodes,
            episode_length_s: tr.episode_length_s,
            ev_share: tr.ev_share,
            reward_scale: tr.reward_scale,
            fixed_phase_duration_s: bl.fixed_phase_duration_s,
            greenwave_threshold_m: bl.greenwave_threshold_m,
            maxpressure_min_phase_s: bl.maxpressure_min_phase_s,
        }
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Config> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Parse(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Config> {
        Config::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml_string())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.sim().validate()?;
        self.planner().validate()?;
        self.agent().validate()?;
        self.net().validate()?;
        self.train().validate()?;
        self.baseline().validate()?;
        if self.max_ticks == 0 {
            return Err(Error::invalid("max_ticks must be >= 1"));
        }
        Ok(())
    }

    pub fn sim(&self) -> SimConfig {
        SimConfig {
            action_interval_s: self.action_interval_s,
            saturation_headway_s: self.saturation_headway_s,
            vehicle_length_m: self.vehicle_length_m,
            speed_window_ticks: self.speed_window_ticks,
            min_avg_speed_mps: self.min_avg_speed_mps,
        }
    }

    pub fn planner(&self) -> PlannerConfig {
        PlannerConfig {
            lambda: self.lambda,
            depth: self.depth,
            replan_interval_s: self.action_interval_s,
            crossing_speed_mps: self.crossing_speed_mps,
        }
    }

    pub fn agent(&self) -> AgentConfig {
        AgentConfig { delta: self.delta, k: self.k, eta: self.eta }
    }

    pub fn net(&self) -> NetConfig {
        NetConfig { hidden: self.hidden, heads: self.heads, temperature: self.temperature, ..NetConfig::default() }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            gamma: self.gamma,
            learning_rate: self.learning_rate,
            grad_clip: self.grad_clip,
            batch_size: self.batch_size,
            buffer_capacity: self.buffer_capacity,
            epsilon_start: self.epsilon_start,
            epsilon_end: self.epsilon_end,
            epsilon_decay_fraction: self.epsilon_decay_fraction,
            target_sync_episodes: self.target_sync_episodes,
            episodes: self.episodes,
            episode_length_s: self.episode_length_s,
            ev_share: self.ev_share,
            reward_scale: self.reward_scale,
        }
    }

    pub fn baseline(&self) -> BaselineConfig {
        BaselineConfig {
            fixed_phase_duration_s: self.fixed_phase_duration_s,
            greenwave_threshold_m: self.greenwave_threshold_m,
            maxpressure_min_phase_s: self.maxpressure_min_phase_s,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        assert_eq!(Config::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
        assert_eq!(Config::from_toml_str("").unwrap(), cfg);
    }

    #[test]
    fn overrides_and_rejections() {
        let cfg = Config::from_toml_str("k = 3\ndelta = 1.0\nseed = 9\n").unwrap();
        assert_eq!((cfg.k, cfg.delta, cfg.seed), (3, 1.0, 9));
        assert!(matches!(Config::from_toml_str("bogus = 1"), Err(Error::Parse(_))));
        assert!(matches!(Config::from_toml_str("k = \"six\""), Err(Error::Parse(_))));
        assert!(matches!(Config::from_toml_str("gamma = 1.0"), Err(Error::InvalidArgument(_))));
        assert!(matches!(Config::from_toml_str("heads = 5"), Err(Error::InvalidArgument(_))));
    }
}
