//! Closed-loop rollouts and the evaluation quantities computed from them:
//! terminal distance/velocity statistics, action smoothness, success rates
//! and trajectory-visitation heatmaps.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{sample_dt, sample_initial, step, Action, ChaserState, InitMode, Observation, SimConfig};
use crate::error::{Error, Result};
use crate::render::{render, CameraModel, Marker};

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Anything that maps observations to actions inside a rollout.
pub trait Controller {
    /// Label recorded in every episode this controller produces.
    fn tag(&self) -> String;

    /// Whether observations must carry rendered images.
    fn needs_image(&self) -> bool {
        false
    }

    /// Called once before each episode.
    fn reset(&mut self) {}

    fn act(&mut self, step: usize, obs: &Observation) -> Result<Action>;
}

/// One executed step: the state the action was computed from, the action and
/// the step length it was held for.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub dt: f64,
    pub state: ChaserState,
    pub action: Action,
    pub image_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub id: u64,
    pub seed: u64,
    pub policy: String,
    pub records: Vec<StepRecord>,
    /// State after the last recorded step.
    pub final_state: ChaserState,
    /// Set when the rollout stopped on an error rather than on docking or
    /// the horizon.
    pub failure: Option<String>,
}

impl Episode {
    /// Terminal distance to the port, m.
    pub fn r_k(&self) -> f64 {
        self.final_state.r.norm()
    }

    /// Terminal speed, m/s.
    pub fn v_k(&self) -> f64 {
        self.final_state.v.norm()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn actions(&self) -> impl Iterator<Item = &Action> {
        self.records.iter().map(|r| &r.action)
    }

    /// Every visited position: the state before each step plus the final one.
    pub fn positions(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.records
            .iter()
            .map(|r| &r.state)
            .chain(std::iter::once(&self.final_state))
            .map(|s| [s.r.x, s.r.y, s.r.z])
    }
}

/// Simulator, camera and target bundled for rollouts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Scenario {
    pub sim: SimConfig,
    pub camera: CameraModel,
    pub marker: Marker,
}

impl Scenario {
    pub fn observe(&self, state: &ChaserState, with_image: bool) -> Observation {
        let images = if with_image {
            vec![render(state, &self.camera, &self.marker)]
        } else {
            Vec::new()
        };
        Observation { images, state: *state }
    }
}

/// Random stream owned by one episode: seeded from the run seed, with the
/// episode index selecting the stream.
pub fn episode_rng(seed: u64, episode: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(episode);
    rng
}

/// Run one episode until the chaser is within the docking radius or the
/// horizon is reached. Errors from the controller or the integrator end the
/// episode early and are recorded in [`Episode::failure`].
pub fn rollout<C: Controller + ?Sized>(
    ctrl: &mut C,
    scenario: &Scenario,
    mode: InitMode,
    seed: u64,
    episode: u64,
) -> Episode {
    let sim = &scenario.sim;
    let mut rng = episode_rng(seed, episode);
    ctrl.reset();
    let mut state = sample_initial(mode, &mut rng);
    let mut records = Vec::with_capacity(sim.horizon);
    let mut failure = None;
    for t in 0..sim.horizon {
        if state.r.norm() < sim.dock_radius {
            break;
        }
        let obs = scenario.observe(&state, ctrl.needs_image());
        let action = match ctrl.act(t, &obs) {
            Ok(a) => a,
            Err(e) => {
                failure = Some(format!("step {t}: controller: {e}"));
                break;
            }
        };
        let dt = sample_dt(sim, &mut rng);
        match step(&state, &action, dt, sim) {
            Ok(next) => {
                records.push(StepRecord { t, dt, state, action, image_ref: None });
                state = next;
            }
            Err(e) => {
                failure = Some(format!("step {t}: {e}"));
                break;
            }
        }
    }
    Episode {
        id: episode,
        seed,
        policy: ctrl.tag(),
        records,
        final_state: state,
        failure,
    }
}

/// Roll out episodes `0..n` in parallel, each with a fresh controller from
/// `make`. Returns episodes in id order together with the controllers that
/// produced them.
pub fn evaluate_with<C, F>(
    make: F,
    scenario: &Scenario,
    n: usize,
    mode: InitMode,
    seed: u64,
) -> Vec<(Episode, C)>
where
    C: Controller + Send,
    F: Fn() -> C + Sync,
{
    (0..n as u64)
        .into_par_iter()
        .map(|id| {
            let mut ctrl = make();
            let ep = rollout(&mut ctrl, scenario, mode, seed, id);
            (ep, ctrl)
        })
        .collect()
}

pub fn evaluate<C, F>(make: F, scenario: &Scenario, n: usize, mode: InitMode, seed: u64) -> Vec<Episode>
where
    C: Controller + Send,
    F: Fn() -> C + Sync,
{
    evaluate_with(make, scenario, n, mode, seed).into_iter().map(|(ep, _)| ep).collect()
}

/// Mean L2 norm of successive action differences.
pub fn smoothness(episode: &Episode) -> Result<f64> {
    action_smoothness(&episode.actions().copied().collect::<Vec<_>>())
}

pub fn action_smoothness(actions: &[Action]) -> Result<f64> {
    if actions.len() < 2 {
        return Err(Error::Degenerate(format!(
            "smoothness needs at least two actions, got {}",
            actions.len()
        )));
    }
    let total: f64 = actions
        .windows(2)
        .map(|w| {
            let (a, b) = (w[0].to_array(), w[1].to_array());
            a.iter().zip(&b).map(|(x, y)| (y - x) * (y - x)).sum::<f64>().sqrt()
        })
        .sum();
    Ok(total / (actions.len() - 1) as f64)
}

/// Nearest-rank percentile: the `ceil(p/100 · N)`-th smallest value.
pub fn nearest_rank(sorted: &[f64], percent: u32) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::Usage("percentile of an empty sample".into()));
    }
    if percent == 0 || percent > 100 {
        return Err(Error::Range(format!("percentile must be in 1..=100, got {percent}")));
    }
    let n = sorted.len();
    let rank = (percent as usize * n).div_ceil(100);
    Ok(sorted[rank.max(1) - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub p75: f64,
    pub p95: f64,
    pub p99: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Usage("summary of an empty sample".into()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Self {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            p75: nearest_rank(&sorted, 75)?,
            p95: nearest_rank(&sorted, 95)?,
            p99: nearest_rank(&sorted, 99)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessRate {
    pub radius: f64,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub policy: String,
    pub episodes: usize,
    pub failed: usize,
    pub r_k: Summary,
    pub v_k: Summary,
    /// Per-episode smoothness in episode-id order. Episodes with fewer than
    /// two actions are skipped.
    pub smoothness: Vec<f64>,
    pub smoothness_mean: f64,
    pub success: Vec<SuccessRate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub policies: Vec<PolicyReport>,
}

/// Aggregate episodes per policy tag. Episodes are sorted by id first, so the
/// result does not depend on input order.
pub fn terminal_report(episodes: &[Episode], radii: &[f64]) -> Result<EvalReport> {
    if episodes.is_empty() {
        return Err(Error::Usage("terminal_report needs at least one episode".into()));
    }
    let mut groups: BTreeMap<&str, Vec<&Episode>> = BTreeMap::new();
    for ep in episodes {
        groups.entry(ep.policy.as_str()).or_default().push(ep);
    }
    let mut policies = Vec::with_capacity(groups.len());
    for (policy, mut eps) in groups {
        eps.sort_by_key(|e| e.id);
        let r: Vec<f64> = eps.iter().map(|e| e.r_k()).collect();
        let v: Vec<f64> = eps.iter().map(|e| e.v_k()).collect();
        let smooth: Vec<f64> = eps.iter().filter_map(|e| smoothness(e).ok()).collect();
        let smoothness_mean = if smooth.is_empty() {
            f64::NAN
        } else {
            smooth.iter().sum::<f64>() / smooth.len() as f64
        };
        let success = radii
            .iter()
            .map(|&radius| SuccessRate {
                radius,
                rate: r.iter().filter(|&&x| x < radius).count() as f64 / r.len() as f64,
            })
            .collect();
        policies.push(PolicyReport {
            policy: policy.to_string(),
            episodes: eps.len(),
            failed: eps.iter().filter(|e| e.failure.is_some()).count(),
            r_k: Summary::of(&r)?,
            v_k: Summary::of(&v)?,
            smoothness: smooth,
            smoothness_mean,
            success,
        });
    }
    Ok(EvalReport { format_version: REPORT_FORMAT_VERSION, policies })
}

impl EvalReport {
    /// Markdown table with mean and percentile columns for `‖r_K‖` and
    /// `‖v_K‖`, three decimals.
    pub fn to_table(&self) -> String {
        let mut out = String::from("| policy | metric | mean | 75% | 95% | 99% |\n|---|---|---|---|---|---|\n");
        for p in &self.policies {
            for (label, s) in [("‖r_K‖ [m]", &p.r_k), ("‖v_K‖ [m/s]", &p.v_k)] {
                out.push_str(&format!(
                    "| {} | {} | {:.3} | {:.3} | {:.3} | {:.3} |\n",
                    p.policy, label, s.mean, s.p75, s.p95, s.p99
                ));
            }
        }
        out
    }
}

/// Projection plane for visitation heatmaps. The vertical axis is always
/// the along-track y coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    Xy,
    Zy,
}

impl std::str::FromStr for Plane {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "xy" => Ok(Plane::Xy),
            "zy" => Ok(Plane::Zy),
            other => Err(Error::Usage(format!("unknown plane '{other}' (expected xy|zy)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub h_min: f64,
    pub h_max: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub cell: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { h_min: -5.0, h_max: 5.0, v_min: -30.0, v_max: 5.0, cell: 0.1 }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.cell > 0.0) || !self.cell.is_finite() {
            return Err(Error::config("heatmap.cell", format!("must be positive, got {}", self.cell)));
        }
        if !(self.h_max > self.h_min) {
            return Err(Error::config("heatmap.h_max", "must exceed h_min"));
        }
        if !(self.v_max > self.v_min) {
            return Err(Error::config("heatmap.v_max", "must exceed v_min"));
        }
        Ok(())
    }

    pub fn cols(&self) -> usize {
        (((self.h_max - self.h_min) / self.cell).round() as usize).max(1)
    }

    pub fn rows(&self) -> usize {
        (((self.v_max - self.v_min) / self.cell).round() as usize).max(1)
    }

    /// Cell of a point; points outside the grid land in the nearest border
    /// cell.
    pub fn cell_of(&self, h: f64, v: f64) -> (usize, usize) {
        let idx = |x: f64, lo: f64, n: usize| {
            let i = ((x - lo) / self.cell).floor();
            if i.is_nan() || i < 0.0 {
                0
            } else {
                (i as usize).min(n - 1)
            }
        };
        (idx(v, self.v_min, self.rows()), idx(h, self.h_min, self.cols()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub plane: Plane,
    pub spec: GridSpec,
    pub rows: usize,
    pub cols: usize,
    /// Row-major counts; row index follows y, column index follows x or z.
    pub counts: Vec<u64>,
}

impl Heatmap {
    pub fn get(&self, row: usize, col: usize) -> u64 {
        self.counts[row * self.cols + col]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

pub fn heatmap(episodes: &[Episode], plane: Plane, spec: &GridSpec) -> Result<Heatmap> {
    spec.validate()?;
    let (rows, cols) = (spec.rows(), spec.cols());
    let mut counts = vec![0u64; rows * cols];
    for ep in episodes {
        for [x, y, z] in ep.positions() {
            let h = match plane {
                Plane::Xy => x,
                Plane::Zy => z,
            };
            let (r, c) = spec.cell_of(h, y);
            counts[r * cols + c] += 1;
        }
    }
    Ok(Heatmap { plane, spec: *spec, rows, cols, counts })
}
