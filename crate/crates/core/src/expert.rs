//! Scripted demonstrator: a saturated PD guidance law plus a chattering
//! variant used as the rough baseline.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Action, ChaserState, InitMode, Observation, SimConfig};
use crate::error::{Error, Result};
use crate::eval::{rollout, Controller, Episode, Scenario};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpertConfig {
    /// Position gain, 1/s².
    pub kp_pos: f64,
    /// Velocity-tracking gain, 1/s.
    pub kd_pos: f64,
    /// Attitude gain, 1/s².
    pub kp_att: f64,
    /// Rate damping, 1/s.
    pub kd_att: f64,
    /// Approach speed per metre of range, 1/s.
    pub v_profile: f64,
    /// Approach speed ceiling, m/s.
    pub v_max: f64,
    /// Chatter amplitude as a fraction of the actuator bounds.
    pub chatter_amplitude: f64,
    pub chatter_enabled: bool,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            kp_pos: 0.002,
            kd_pos: 0.4,
            kp_att: 0.2,
            kd_att: 0.9,
            v_profile: 0.065,
            v_max: 0.7,
            chatter_amplitude: 0.3,
            chatter_enabled: false,
        }
    }
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, x) in [
            ("kp_pos", self.kp_pos),
            ("kd_pos", self.kd_pos),
            ("kp_att", self.kp_att),
            ("kd_att", self.kd_att),
            ("v_profile", self.v_profile),
            ("v_max", self.v_max),
        ] {
            if !(x >= 0.0) || !x.is_finite() {
                return Err(Error::config(format!("expert.{name}"), format!("must be a finite value >= 0, got {x}")));
            }
        }
        if !(0.0..=1.0).contains(&self.chatter_amplitude) {
            return Err(Error::config(
                "expert.chatter_amplitude",
                format!("must lie in [0, 1], got {}", self.chatter_amplitude),
            ));
        }
        Ok(())
    }
}

/// Commanded approach velocity in LVLH: straight at the port, with speed
/// proportional to range and capped at `v_max`.
pub fn approach_velocity(r: &Vector3<f64>, cfg: &ExpertConfig) -> Vector3<f64> {
    let rho = r.norm();
    if rho == 0.0 {
        return Vector3::zeros();
    }
    -r / rho * (cfg.v_profile * rho).min(cfg.v_max)
}

/// PD thrust toward the port along the approach profile, and attitude PD
/// holding the boresight on the port; both saturated at the actuator bounds.
pub fn expert_action(state: &ChaserState, cfg: &ExpertConfig, sim: &SimConfig) -> Action {
    let v_des = approach_velocity(&state.r, cfg);
    let accel = cfg.kp_pos * (-state.r) + cfg.kd_pos * (v_des - state.v);
    let thrust = state.q.inverse_transform_vector(&(sim.mass * accel));

    let rho = state.r.norm();
    let err = if rho > 0.0 {
        let target_body = state.q.inverse_transform_vector(&(-state.r / rho));
        Vector3::z().cross(&target_body)
    } else {
        Vector3::zeros()
    };
    let torque = sim.inertia_matrix() * (cfg.kp_att * err - cfg.kd_att * state.w);

    Action { thrust, torque }.saturate(sim.thrust_max, sim.torque_max)
}

/// Add `(−1)^step · amplitude · bound` to every component and re-saturate.
pub fn chatterize(action: &Action, step: usize, cfg: &ExpertConfig, sim: &SimConfig) -> Action {
    let sign = if step % 2 == 0 { 1.0 } else { -1.0 };
    let dt = sign * cfg.chatter_amplitude * sim.thrust_max;
    let dl = sign * cfg.chatter_amplitude * sim.torque_max;
    Action {
        thrust: action.thrust.add_scalar(dt),
        torque: action.torque.add_scalar(dl),
    }
    .saturate(sim.thrust_max, sim.torque_max)
}

/// The expert as a rollout controller; chatters when `cfg.chatter_enabled`.
#[derive(Debug, Clone)]
pub struct ExpertController {
    pub cfg: ExpertConfig,
    pub sim: SimConfig,
}

impl Controller for ExpertController {
    fn tag(&self) -> String {
        if self.cfg.chatter_enabled { "chatter" } else { "expert" }.into()
    }

    fn act(&mut self, step: usize, obs: &Observation) -> Result<Action> {
        if !obs.state.is_finite() {
            return Err(Error::Propagation("expert received a non-finite state".into()));
        }
        let a = expert_action(&obs.state, &self.cfg, &self.sim);
        Ok(if self.cfg.chatter_enabled { chatterize(&a, step, &self.cfg, &self.sim) } else { a })
    }
}

/// Roll out `n` expert episodes (ids `0..n`). Chatter follows
/// `cfg.chatter_enabled`. Any failed episode aborts generation.
pub fn generate_demos(
    n: usize,
    mode: InitMode,
    seed: u64,
    cfg: &ExpertConfig,
    scenario: &Scenario,
) -> Result<Vec<Episode>> {
    if n == 0 {
        return Err(Error::Usage("generate_demos needs n >= 1".into()));
    }
    cfg.validate()?;
    scenario.sim.validate()?;
    let episodes: Vec<Episode> = (0..n as u64)
        .into_par_iter()
        .map(|id| {
            let mut ctrl = ExpertController { cfg: *cfg, sim: scenario.sim.clone() };
            rollout(&mut ctrl, scenario, mode, seed, id)
        })
        .collect();
    if let Some(bad) = episodes.iter().find(|e| e.failure.is_some()) {
        return Err(Error::Propagation(format!(
            "demonstration episode {} failed: {}",
            bad.id,
            bad.failure.as_deref().unwrap_or_default()
        )));
    }
    Ok(episodes)
}

/// Total number of executed steps across a dataset.
pub fn interaction_count(episodes: &[Episode]) -> usize {
    episodes.iter().map(Episode::len).sum()
}
