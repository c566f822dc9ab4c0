//! Behavioural cloning of action chunks from demonstration episodes.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{Action, ChaserState, STATE_DIM};
use crate::error::{Error, Result};
use crate::eval::{Episode, Scenario};
use crate::policy::{ActPolicy, TrainBatch, TRAINING_PREFIX};
use crate::tensor::{checkpoint, AdamConfig, Graph, Parameter, TensorError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the KL term.
    pub beta: f64,
    pub seed: u64,
    /// Write a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: usize,
    /// Decay of the running average of the weights that becomes the trained
    /// policy; 0 keeps the raw optimiser weights.
    pub ema_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            batch_size: 8,
            learning_rate: 3e-4,
            beta: 10.0,
            seed: 0,
            checkpoint_every: 5_000,
            ema_decay: 0.999,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("train.iterations", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("train.learning_rate", format!("must be positive, got {}", self.learning_rate)));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::config("train.beta", format!("must be finite and >= 0, got {}", self.beta)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::config("train.ema_decay", format!("must lie in [0, 1), got {}", self.ema_decay)));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.learning_rate, ..AdamConfig::default() }
    }
}

/// One draw from the dataset: the state at step `t` of an episode and the
/// following `k` actions, padded with the last action past the episode end.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub episode: usize,
    pub t: usize,
    pub state: ChaserState,
    pub actions: Vec<Action>,
    pub valid: Vec<bool>,
}

/// Flat index over every `(episode, t)` pair of a dataset.
#[derive(Debug, Clone)]
pub struct StepIndex {
    /// Cumulative step counts, `offsets[e]` = steps before episode `e`.
    offsets: Vec<usize>,
    total: usize,
}

impl StepIndex {
    pub fn new(episodes: &[Episode]) -> Result<Self> {
        if episodes.is_empty() {
            return Err(Error::Usage("training needs at least one episode".into()));
        }
        let mut offsets = Vec::with_capacity(episodes.len());
        let mut total = 0;
        for (i, e) in episodes.iter().enumerate() {
            if e.is_empty() {
                return Err(Error::Usage(format!("episode {} (position {i}) has no steps", e.id)));
            }
            offsets.push(total);
            total += e.len();
        }
        Ok(Self { offsets, total })
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn locate(&self, flat: usize) -> (usize, usize) {
        let e = self.offsets.partition_point(|&o| o <= flat) - 1;
        (e, flat - self.offsets[e])
    }
}

/// Target chunk starting at step `t` of `episode`.
pub fn chunk_at(episode: &Episode, t: usize, k: usize) -> (Vec<Action>, Vec<bool>) {
    let n = episode.len();
    let last = episode.records[n - 1].action;
    (0..k)
        .map(|j| match episode.records.get(t + j) {
            Some(r) => (r.action, true),
            None => (last, false),
        })
        .unzip()
}

/// Draw one `(episode, t)` uniformly over all recorded steps.
pub fn sample_chunk<R: Rng + ?Sized>(episodes: &[Episode], index: &StepIndex, k: usize, rng: &mut R) -> Sample {
    let (e, t) = index.locate(rng.random_range(0..index.total()));
    let ep = &episodes[e];
    let (actions, valid) = chunk_at(ep, t, k);
    Sample { episode: e, t, state: ep.records[t].state, actions, valid }
}

/// Per-component mean and standard deviation of every recorded state.
pub fn state_statistics(episodes: &[Episode]) -> ([f64; STATE_DIM], [f64; STATE_DIM]) {
    let states: Vec<[f64; STATE_DIM]> =
        episodes.iter().flat_map(|e| e.records.iter().map(|r| r.state.to_array())).collect();
    let n = states.len().max(1) as f64;
    let mut mean = [0.0; STATE_DIM];
    for s in &states {
        mean.iter_mut().zip(s).for_each(|(m, x)| *m += x / n);
    }
    let mut var = [0.0; STATE_DIM];
    for s in &states {
        var.iter_mut().zip(s).zip(&mean).for_each(|((v, x), m)| *v += (x - m).powi(2) / n);
    }
    (mean, var.map(f64::sqrt))
}

/// Loss terms of one iteration, as written to the loss curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub l1: f64,
    pub kl: f64,
    pub total: f64,
}

pub fn write_loss_curve(path: &Path, curve: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for r in curve {
        w.serialize(r).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
struct RngState {
    seed: u64,
    stream: u64,
    /// `u128` does not survive JSON numbers, so it travels as a string.
    word_pos: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainerMeta {
    iteration: usize,
    train: TrainConfig,
    rng: RngState,
}

/// Optimisation state: policy, optimiser moments, weight average, sampler
/// RNG and the loss history so far. Images are re-rendered from recorded
/// states.
pub struct Trainer<'a> {
    /// Weights Adam updates.
    policy: ActPolicy,
    /// Running average of `policy`, present when `ema_decay > 0`.
    average: Option<ActPolicy>,
    cfg: TrainConfig,
    episodes: &'a [Episode],
    index: StepIndex,
    scenario: Scenario,
    rng: ChaCha8Rng,
    iteration: usize,
    curve: Vec<LossRecord>,
}

impl<'a> Trainer<'a> {
    /// Start from a freshly initialised policy; state normalisation is fitted
    /// to the dataset.
    pub fn new(mut policy: ActPolicy, cfg: TrainConfig, episodes: &'a [Episode], scenario: Scenario) -> Result<Self> {
        cfg.validate()?;
        let index = StepIndex::new(episodes)?;
        let (mean, std) = state_statistics(episodes);
        policy.set_state_normalization(&mean, &std)?;
        let average = (cfg.ema_decay > 0.0).then(|| policy.clone());
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self { policy, average, cfg, episodes, index, scenario, rng, iteration: 0, curve: Vec::new() })
    }

    /// Continue from a checkpoint written by [`Trainer::save_checkpoint`].
    /// The iteration budget may be raised through `iterations`.
    pub fn resume(path: &Path, episodes: &'a [Episode], scenario: Scenario, iterations: Option<usize>) -> Result<Self> {
        let (mut params, meta) = checkpoint::load(path)?;
        let step = params.step();
        let training: Vec<String> =
            params.iter().map(|(n, _)| n.clone()).filter(|n| n.starts_with(TRAINING_PREFIX)).collect();
        let raw: Vec<(String, Parameter)> = training
            .iter()
            .map(|n| (n[TRAINING_PREFIX.len()..].to_string(), params.remove(n).expect("listed above")))
            .collect();
        let (mut stored, extra) = ActPolicy::from_checkpoint(params, meta)?;
        let meta: TrainerMeta = serde_json::from_value(extra)
            .map_err(|e| Error::Format(format!("{}: not a training checkpoint: {e}", path.display())))?;
        let mut cfg = meta.train;
        if let Some(n) = iterations {
            cfg.iterations = n;
        }
        cfg.validate()?;
        let word_pos: u128 = meta
            .rng
            .word_pos
            .parse()
            .map_err(|e| Error::Format(format!("{}: rng word_pos: {e}", path.display())))?;
        let mut rng = ChaCha8Rng::seed_from_u64(meta.rng.seed);
        rng.set_stream(meta.rng.stream);
        rng.set_word_pos(word_pos);
        let (policy, average) = if cfg.ema_decay > 0.0 {
            if raw.is_empty() {
                return Err(Error::Format(format!("{}: checkpoint lacks the raw training weights", path.display())));
            }
            let mut policy = stored.clone();
            for (name, p) in raw {
                let slot = policy
                    .params_mut()
                    .get_mut(&name)
                    .filter(|q| q.trainable && q.value.shape() == p.value.shape())
                    .ok_or_else(|| Error::Format(format!("{}: stray training tensor '{name}'", path.display())))?;
                *slot = p;
            }
            stored.params_mut().set_step(0);
            (policy, Some(stored))
        } else {
            (stored, None)
        };
        debug_assert_eq!(policy.params().step(), step);
        let index = StepIndex::new(episodes)?;
        Ok(Self { policy, average, cfg, episodes, index, scenario, rng, iteration: meta.iteration, curve: Vec::new() })
    }

    /// The trained policy: the weight average when enabled, otherwise the
    /// raw weights.
    pub fn policy(&self) -> &ActPolicy {
        self.average.as_ref().unwrap_or(&self.policy)
    }

    /// The weights Adam updates.
    pub fn raw_policy(&self) -> &ActPolicy {
        &self.policy
    }

    pub fn into_policy(self) -> ActPolicy {
        self.average.unwrap_or(self.policy)
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn curve(&self) -> &[LossRecord] {
        &self.curve
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.cfg.iterations
    }

    fn draw_batch(&mut self) -> (TrainBatch, Vec<f64>) {
        let pc = self.policy.config().clone();
        let b = self.cfg.batch_size;
        let mut batch = TrainBatch {
            obs: Vec::with_capacity(b),
            targets: Vec::with_capacity(b * pc.k * 6),
            valid: Vec::with_capacity(b * pc.k),
        };
        for _ in 0..b {
            let s = sample_chunk(self.episodes, &self.index, pc.k, &mut self.rng);
            batch.obs.push(self.scenario.observe(&s.state, true));
            batch.targets.extend(s.actions.iter().flat_map(|a| pc.normalize_action(a)));
            batch.valid.extend(s.valid);
        }
        let eps = (0..b * pc.d_z).map(|_| StandardNormal.sample(&mut self.rng)).collect();
        (batch, eps)
    }

    /// One sample → forward → backward → Adam update.
    pub fn step(&mut self) -> Result<LossRecord> {
        let (batch, eps) = self.draw_batch();
        let mut g = Graph::new();
        let iteration = self.iteration;
        let non_finite = |e: Error| match e {
            Error::Tensor(TensorError::NonFinite { op }) => Error::NonFiniteLoss { iteration, during: op.into() },
            other => other,
        };
        let loss = self.policy.forward_loss(&mut g, &batch, &eps, self.cfg.beta).map_err(non_finite)?;
        let value = |v| g.value(v).data()[0];
        let rec = LossRecord {
            iteration: self.iteration,
            l1: value(loss.l1),
            kl: value(loss.kl),
            total: value(loss.total),
        };
        if !rec.total.is_finite() {
            return Err(Error::NonFiniteLoss { iteration, during: "loss".into() });
        }
        g.backward(loss.total).map_err(|e| non_finite(e.into()))?;
        let params = self.policy.params_mut();
        params.zero_grad();
        g.accumulate_param_grads(params)?;
        params.adam_step(&self.cfg.adam());
        if let Some(avg) = &mut self.average {
            let d = self.cfg.ema_decay;
            for (name, p) in self.policy.params().iter().filter(|(_, p)| p.trainable) {
                let a = avg.params_mut().get_mut(name).expect("average mirrors the policy");
                for (x, &y) in a.value.data_mut().iter_mut().zip(p.value.data()) {
                    *x = d * *x + (1.0 - d) * y;
                }
            }
        }
        self.iteration += 1;
        self.curve.push(rec);
        Ok(rec)
    }

    /// Train to the configured budget. `on_checkpoint` fires every
    /// `checkpoint_every` iterations.
    pub fn run(&mut self, mut on_checkpoint: impl FnMut(&Self) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            self.step()?;
            let every = self.cfg.checkpoint_every;
            if every > 0 && self.iteration % every == 0 {
                on_checkpoint(self)?;
            }
        }
        Ok(())
    }

    /// Policy, optimiser moments, iteration counter and sampler RNG
    /// position; enough to continue bit-identically. With averaging on, the
    /// averaged weights are the checkpoint's policy and the raw weights ride
    /// along under [`TRAINING_PREFIX`].
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let meta = TrainerMeta {
            iteration: self.iteration,
            train: self.cfg.clone(),
            rng: RngState {
                seed: self.cfg.seed,
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos().to_string(),
            },
        };
        let extra = serde_json::to_value(meta).map_err(|e| Error::Format(e.to_string()))?;
        let Some(avg) = &self.average else {
            return self.policy.save(path, extra);
        };
        let mut params = avg.params().clone();
        for (name, p) in self.policy.params().iter().filter(|(_, p)| p.trainable) {
            params.insert_parameter(format!("{TRAINING_PREFIX}{name}"), p.clone())?;
        }
        params.set_step(self.policy.params().step());
        checkpoint::save(path, &params, &avg.checkpoint_meta(extra))?;
        Ok(())
    }

    pub fn write_curve(&self, path: &Path) -> Result<()> {
        write_loss_curve(path, &self.curve)
    }
}

/// Masked L1 and KL for explicit values, without building a graph. The
/// latent (`mu`, `log_sigma`) belongs to a single sample.
pub fn loss_value(pred: &[f64], target: &[f64], valid: &[bool], mu: &[f64], log_sigma: &[f64], beta: f64) -> Result<(f64, f64, f64)> {
    let width = if valid.is_empty() { 0 } else { pred.len() / valid.len() };
    if pred.len() != target.len() || width * valid.len() != pred.len() || mu.len() != log_sigma.len() {
        return Err(Error::Usage("loss_value: inconsistent shapes".into()));
    }
    let n = valid.iter().filter(|&&v| v).count() * width;
    if n == 0 {
        return Err(Error::Usage("every target row is masked".into()));
    }
    let l1 = pred
        .chunks(width)
        .zip(target.chunks(width))
        .zip(valid)
        .filter(|(_, &v)| v)
        .flat_map(|((p, t), _)| p.iter().zip(t).map(|(a, b)| (a - b).abs()))
        .sum::<f64>()
        / n as f64;
    let kl = 0.5 * mu.iter().zip(log_sigma).map(|(m, s)| m * m + (2.0 * s).exp() - 1.0 - 2.0 * s).sum::<f64>();
    Ok((l1, kl, l1 + beta * kl))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::InitMode;
    use crate::eval::StepRecord;
    use crate::expert::{generate_demos, ExpertConfig};
    use crate::policy::{kl_to_prior, masked_l1, PolicyConfig, STATE_MEAN};
    use crate::render::CameraModel;
    use crate::tensor::Tensor;

    fn synthetic_episode(id: u64, len: usize) -> Episode {
        let records = (0..len)
            .map(|t| StepRecord {
                t,
                dt: 1.0,
                state: ChaserState::default(),
                action: Action::from_slice(&[t as f64, 0.0, 0.0, 0.0, 0.0, id as f64]),
                image_ref: None,
            })
            .collect();
        Episode { id, seed: 0, policy: "test".into(), records, final_state: ChaserState::default(), failure: None }
    }

    #[test]
    fn padding_at_episode_end() {
        let ep = synthetic_episode(0, 64);
        let (acts, valid) = chunk_at(&ep, 60, 8);
        assert_eq!(valid, [true, true, true, true, false, false, false, false]);
        let xs: Vec<f64> = acts.iter().map(|a| a.thrust.x).collect();
        assert_eq!(xs, [60.0, 61.0, 62.0, 63.0, 63.0, 63.0, 63.0, 63.0]);
        let (_, valid) = chunk_at(&ep, 0, 8);
        assert!(valid.iter().all(|&v| v));
    }

    #[test]
    fn sampling_is_uniform_over_steps() {
        let eps = [synthetic_episode(0, 10), synthetic_episode(1, 30)];
        let index = StepIndex::new(&eps).unwrap();
        assert_eq!(index.locate(9), (0, 9));
        assert_eq!(index.locate(10), (1, 0));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let second = (0..n).filter(|_| sample_chunk(&eps, &index, 4, &mut rng).episode == 1).count();
        let f = second as f64 / n as f64;
        assert!((f - 0.75).abs() < 0.02, "{f}");
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let eps = [synthetic_episode(0, 10), synthetic_episode(1, 30)];
        let index = StepIndex::new(&eps).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| sample_chunk(&eps, &index, 8, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(1), draw(1));
        assert_ne!(draw(1), draw(2));
    }

    #[test]
    fn empty_datasets_are_rejected() {
        assert!(matches!(StepIndex::new(&[]), Err(Error::Usage(_))));
        assert!(matches!(StepIndex::new(&[synthetic_episode(0, 0)]), Err(Error::Usage(_))));
    }

    #[test]
    fn loss_examples() {
        let t = [0.3, -0.2, 0.1, 0.0, 0.5, -0.5];
        assert_eq!(loss_value(&t, &t, &[true], &[0.0; 3], &[0.0; 3], 10.0).unwrap(), (0.0, 0.0, 0.0));
        let p: Vec<f64> = t.iter().map(|x| x + 1.0).collect();
        let (l1, _, total) = loss_value(&p, &t, &[true], &[0.0; 2], &[0.0; 2], 0.0).unwrap();
        assert_eq!((l1, total), (1.0, 1.0));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pred: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let target: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let by_hand_l1 = pred.iter().zip(&target).map(|(a, b)| (a - b).abs()).sum::<f64>() / 12.0;
        let (l1, kl, total) = loss_value(&pred, &target, &[true, true], &[0.5, 0.0], &[0.0, 0.0], 1.0).unwrap();
        assert!((l1 - by_hand_l1).abs() < 1e-15);
        assert_eq!(kl, 0.125);
        assert!((total - (by_hand_l1 + 0.125)).abs() < 1e-15);
    }

    #[test]
    fn graph_loss_agrees_and_masked_rows_get_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pred: Vec<f64> = (0..18).map(|_| rng.random_range(-1.0..1.0)).collect();
        let target: Vec<f64> = (0..18).map(|_| rng.random_range(-1.0..1.0)).collect();
        let valid = [true, false, true];
        let (mu, ls) = ([0.3, -0.1], [0.2, -0.4]);
        let mut g = Graph::new();
        let p = g.input(Tensor::from_rows(3, 6, pred.clone()).unwrap()).unwrap();
        let l1 = masked_l1(&mut g, p, &target, &valid).unwrap();
        let m = g.input(Tensor::from_rows(1, 2, mu.to_vec()).unwrap()).unwrap();
        let s = g.input(Tensor::from_rows(1, 2, ls.to_vec()).unwrap()).unwrap();
        let kl = kl_to_prior(&mut g, m, s).unwrap();
        let expect = loss_value(&pred, &target, &valid, &mu, &ls, 1.0).unwrap();
        assert!((g.value(l1).data()[0] - expect.0).abs() < 1e-15);
        assert!((g.value(kl).data()[0] - expect.1).abs() < 1e-15);
        g.backward(l1).unwrap();
        let grad = g.grad(p).unwrap();
        assert!(grad[6..12].iter().all(|&x| x == 0.0));
        assert!(grad[..6].iter().all(|&x| x.abs() == 1.0 / 12.0));
    }

    fn small_setup() -> (PolicyConfig, Scenario) {
        let camera = CameraModel { f: 20.0, cx: 8.0, cy: 8.0, h: 16, w: 16 };
        let scenario = Scenario { camera, ..Scenario::default() };
        let cfg = PolicyConfig {
            k: 4,
            d_model: 16,
            n_layers_enc: 1,
            n_layers_dec: 1,
            n_layers_style: 1,
            n_heads: 2,
            d_z: 4,
            d_ff: 16,
            channels: [2, 4, 4],
            image_h: 16,
            image_w: 16,
            ..PolicyConfig::default()
        };
        (cfg, scenario)
    }

    fn demos(scenario: &Scenario) -> Vec<Episode> {
        generate_demos(3, InitMode::Random, 2, &ExpertConfig::default(), scenario).unwrap()
    }

    fn train_cfg(iterations: usize, beta: f64) -> TrainConfig {
        TrainConfig { iterations, batch_size: 4, learning_rate: 3e-3, beta, seed: 9, checkpoint_every: 0, ema_decay: 0.9 }
    }

    #[test]
    fn training_is_deterministic() {
        let (pc, scenario) = small_setup();
        let data = demos(&scenario);
        let run = || {
            let mut t = Trainer::new(ActPolicy::new(pc.clone(), 1).unwrap(), train_cfg(15, 10.0), &data, scenario.clone()).unwrap();
            t.run(|_| Ok(())).unwrap();
            (t.curve().to_vec(), t.into_policy())
        };
        let (c1, p1) = run();
        let (c2, p2) = run();
        assert_eq!(c1, c2);
        assert_eq!(p1, p2);
        assert!(c1.iter().all(|r| r.total.is_finite()));
    }

    #[test]
    fn resume_continues_the_same_trajectory() {
        let (pc, scenario) = small_setup();
        let data = demos(&scenario);
        let mut straight =
            Trainer::new(ActPolicy::new(pc.clone(), 1).unwrap(), train_cfg(20, 10.0), &data, scenario.clone()).unwrap();
        straight.run(|_| Ok(())).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("half.ckpt");
        let mut first = Trainer::new(ActPolicy::new(pc, 1).unwrap(), train_cfg(10, 10.0), &data, scenario.clone()).unwrap();
        first.run(|_| Ok(())).unwrap();
        first.save_checkpoint(&ckpt).unwrap();
        let mut second = Trainer::resume(&ckpt, &data, scenario, Some(20)).unwrap();
        assert_eq!(second.iteration(), 10);
        second.run(|_| Ok(())).unwrap();

        assert_eq!(&straight.curve()[10..], second.curve());
        assert_eq!(straight.policy(), second.policy());
        assert_eq!(straight.raw_policy(), second.raw_policy());

        // Loading the checkpoint as a plain policy yields the averaged weights.
        let (loaded, _) = ActPolicy::load(&ckpt).unwrap();
        for (name, p) in first.policy().params().iter() {
            assert_eq!(loaded.params().get(name).unwrap().value, p.value, "{name}");
        }
    }

    #[test]
    fn weight_average_tracks_the_raw_weights() {
        let (pc, scenario) = small_setup();
        let data = demos(&scenario);
        let policy = ActPolicy::new(pc, 1).unwrap();
        let init = policy.clone();
        let mut t = Trainer::new(policy, train_cfg(1, 1.0), &data, scenario.clone()).unwrap();
        t.step().unwrap();
        for (name, raw) in t.raw_policy().params().iter().filter(|(_, p)| p.trainable) {
            let x0 = init.params().get(name).unwrap().value.data();
            let avg = t.policy().params().get(name).unwrap().value.data();
            for ((a, r), x) in avg.iter().zip(raw.value.data()).zip(x0) {
                assert!((a - (0.9 * x + 0.1 * r)).abs() < 1e-15);
            }
        }
        assert_eq!(t.policy().params().get(STATE_MEAN).unwrap().value, t.raw_policy().params().get(STATE_MEAN).unwrap().value);

        let cfg = TrainConfig { ema_decay: 0.0, ..train_cfg(3, 1.0) };
        let mut plain = Trainer::new(ActPolicy::new(small_setup().0, 1).unwrap(), cfg, &data, scenario).unwrap();
        plain.run(|_| Ok(())).unwrap();
        assert_eq!(plain.policy(), plain.raw_policy());
    }

    #[test]
    fn periodic_checkpoint_callback_fires() {
        let (pc, scenario) = small_setup();
        let data = demos(&scenario);
        let cfg = TrainConfig { checkpoint_every: 4, ..train_cfg(10, 1.0) };
        let mut t = Trainer::new(ActPolicy::new(pc, 1).unwrap(), cfg, &data, scenario).unwrap();
        let mut seen = Vec::new();
        t.run(|t| {
            seen.push(t.iteration());
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, [4, 8]);
    }

    #[test]
    fn non_finite_loss_aborts_with_iteration() {
        let (pc, scenario) = small_setup();
        let data = demos(&scenario);
        let mut policy = ActPolicy::new(pc, 1).unwrap();
        policy.params_mut().get_mut("head.b").unwrap().value.data_mut()[0] = f64::NAN;
        let mut t = Trainer::new(policy, train_cfg(5, 1.0), &data, scenario).unwrap();
        let r = t.step();
        assert!(matches!(r, Err(Error::NonFiniteLoss { iteration: 0, .. })), "{r:?}");
    }

    /// Mean latent norm over every step of the dataset, posterior mean only.
    fn mean_mu_norm(policy: &ActPolicy, data: &[Episode]) -> f64 {
        let k = policy.config().k;
        let mut total = 0.0;
        let mut n = 0;
        for e in data {
            for t in 0..e.len() {
                let (acts, valid) = chunk_at(e, t, k);
                let targets: Vec<f64> = acts.iter().flat_map(|a| policy.config().normalize_action(a)).collect();
                let mut g = Graph::new();
                let s = policy.encode_style(&mut g, &[e.records[t].state], &targets, &valid, None).unwrap();
                total += g.value(s.mu).data().iter().map(|x| x * x).sum::<f64>().sqrt();
                n += 1;
            }
        }
        total / n as f64
    }

    #[test]
    fn kl_weight_shrinks_the_posterior() {
        let (pc, scenario) = small_setup();
        let data = demos(&scenario);
        let trained = |beta| {
            let mut t = Trainer::new(ActPolicy::new(pc.clone(), 1).unwrap(), train_cfg(150, beta), &data, scenario.clone()).unwrap();
            t.run(|_| Ok(())).unwrap();
            mean_mu_norm(t.policy(), &data)
        };
        let (free, pressed) = (trained(0.0), trained(10.0));
        assert!(pressed < free, "beta=10 gives {pressed}, beta=0 gives {free}");
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { beta: -1.0, ..TrainConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "train.beta"));
        let bad = TrainConfig { iterations: 0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        for d in [1.0, -0.1, f64::NAN] {
            let bad = TrainConfig { ema_decay: d, ..TrainConfig::default() };
            assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "train.ema_decay"));
        }
    }

    #[test]
    fn state_statistics_by_hand() {
        let mut a = synthetic_episode(0, 2);
        a.records[0].state.r.x = 1.0;
        a.records[1].state.r.x = 3.0;
        let (mean, std) = state_statistics(&[a]);
        assert_eq!(mean[0], 2.0);
        assert_eq!(std[0], 1.0);
        assert_eq!(std[1], 0.0);
    }
}
