//! Whole-run configuration loaded from JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::{InitMode, SimConfig};
use crate::error::{Error, Result};
use crate::eval::{GridSpec, Scenario};
use crate::expert::ExpertConfig;
use crate::policy::PolicyConfig;
use crate::render::{CameraModel, Marker};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub mode: InitMode,
    /// Decay `m` of the temporal ensemble weights.
    pub ensemble_decay: f64,
    /// Success radii in metres.
    pub radii: Vec<f64>,
    pub grid: GridSpec,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 100,
            mode: InitMode::Same,
            ensemble_decay: 0.01,
            radii: vec![0.8, 1.0],
            grid: GridSpec::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::config("eval.episodes", "must be >= 1"));
        }
        if !(self.ensemble_decay >= 0.0) || !self.ensemble_decay.is_finite() {
            return Err(Error::config("eval.ensemble_decay", format!("must be finite and >= 0, got {}", self.ensemble_decay)));
        }
        if let Some(r) = self.radii.iter().find(|r| !(**r > 0.0) || !r.is_finite()) {
            return Err(Error::config("eval.radii", format!("radii must be positive, got {r}")));
        }
        self.grid.validate().map_err(|e| match e {
            Error::Config { field, msg } => Error::config(field.replace("heatmap.", "eval.grid."), msg),
            other => other,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Global seed every random stream derives from.
    pub seed: u64,
    pub sim: SimConfig,
    pub camera: CameraModel,
    pub marker: Marker,
    pub expert: ExpertConfig,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            sim: SimConfig::default(),
            camera: CameraModel::default(),
            marker: Marker::default(),
            expert: ExpertConfig::default(),
            policy: PolicyConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.camera.validate()?;
        self.expert.validate()?;
        self.policy.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        let p = &self.policy;
        if p.image_h != self.camera.h || p.image_w != self.camera.w {
            return Err(Error::config(
                "policy.image_h",
                format!("policy expects {}x{} images, camera renders {}x{}", p.image_h, p.image_w, self.camera.h, self.camera.w),
            ));
        }
        if p.cameras != 1 {
            return Err(Error::config("policy.cameras", "the simulator renders a single camera"));
        }
        if p.thrust_max != self.sim.thrust_max {
            return Err(Error::config("policy.thrust_max", "must equal sim.thrust_max"));
        }
        if p.torque_max != self.sim.torque_max {
            return Err(Error::config("policy.torque_max", "must equal sim.torque_max"));
        }
        Ok(())
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_string(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn scenario(&self) -> Scenario {
        Scenario { sim: self.sim.clone(), camera: self.camera, marker: self.marker }
    }
}
