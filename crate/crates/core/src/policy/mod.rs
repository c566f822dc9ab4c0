//! Action-chunking transformer policy with a CVAE style latent.
//!
//! Observation tokens come from a small strided residual CNN per camera
//! (1×1-projected to `d_model`, flattened, plus 2-D sinusoidal positions)
//! followed by one state token. The encoder attends over those tokens plus a
//! token for the style latent `z`; the decoder turns `k` learned queries into
//! `k` actions, squashed into the actuator bounds by `tanh`. During training a
//! separate encoder infers `z` from `[CLS, state, actions]`.

mod controller;
pub(crate) mod layers;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Action, ChaserState, Observation, ACTION_DIM, STATE_DIM};
use crate::error::{Error, Result};
use crate::tensor::{checkpoint, Graph, ParameterSet, Tensor, Var};

pub use crate::ensemble::Chunk;
pub use controller::{ActController, EnsembleStats};
pub use layers::sine_pe_2d;
use layers::{decoder_layer, encoder_layer, linear, residual_block, tile_param};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    /// Chunk size in steps.
    pub k: usize,
    pub d_model: usize,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    /// Depth of the style (CVAE) encoder.
    pub n_layers_style: usize,
    pub n_heads: usize,
    pub d_z: usize,
    pub d_ff: usize,
    /// Output channels of the three backbone blocks.
    pub channels: [usize; 3],
    pub image_h: usize,
    pub image_w: usize,
    pub cameras: usize,
    pub d_s: usize,
    pub d_a: usize,
    /// Bounds the `tanh` head is scaled to.
    pub thrust_max: f64,
    pub torque_max: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            k: 8,
            d_model: 64,
            n_layers_enc: 2,
            n_layers_dec: 2,
            n_layers_style: 2,
            n_heads: 4,
            d_z: 32,
            d_ff: 128,
            channels: [8, 16, 32],
            image_h: 48,
            image_w: 64,
            cameras: 1,
            d_s: STATE_DIM,
            d_a: ACTION_DIM,
            thrust_max: 40.0,
            torque_max: 1.0,
        }
    }
}

fn half_up(n: usize) -> usize {
    n.div_ceil(2)
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let field = |f: &str, msg: String| Err(Error::config(format!("policy.{f}"), msg));
        if self.k == 0 {
            return field("k", "must be >= 1".into());
        }
        if self.d_z == 0 {
            return field("d_z", "must be >= 1".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return field("n_heads", format!("d_model {} must be divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.d_model == 0 || self.d_model % 4 != 0 {
            return field("d_model", format!("must be a positive multiple of 4 (2-D sinusoidal encoding), got {}", self.d_model));
        }
        if self.d_ff == 0 {
            return field("d_ff", "must be >= 1".into());
        }
        for (f, n) in [
            ("n_layers_enc", self.n_layers_enc),
            ("n_layers_dec", self.n_layers_dec),
            ("n_layers_style", self.n_layers_style),
        ] {
            if n == 0 {
                return field(f, "must be >= 1".into());
            }
        }
        if self.channels.contains(&0) {
            return field("channels", "backbone channels must be non-zero".into());
        }
        if self.image_h == 0 {
            return field("image_h", "must be >= 1".into());
        }
        if self.image_w == 0 {
            return field("image_w", "must be >= 1".into());
        }
        if self.cameras == 0 {
            return field("cameras", "must be >= 1".into());
        }
        if self.d_s != STATE_DIM {
            return field("d_s", format!("the simulator state has {STATE_DIM} components, got {}", self.d_s));
        }
        if self.d_a != ACTION_DIM {
            return field("d_a", format!("actions have {ACTION_DIM} components, got {}", self.d_a));
        }
        for (f, x) in [("thrust_max", self.thrust_max), ("torque_max", self.torque_max)] {
            if !(x > 0.0) || !x.is_finite() {
                return field(f, format!("must be positive, got {x}"));
            }
        }
        Ok(())
    }

    /// Backbone output grid `(h', w')`: three stride-2 stages.
    pub fn feature_grid(&self) -> (usize, usize) {
        (half_up(half_up(half_up(self.image_h))), half_up(half_up(half_up(self.image_w))))
    }

    /// Observation tokens: image cells for every camera plus the state token.
    pub fn obs_tokens(&self) -> usize {
        let (h, w) = self.feature_grid();
        self.cameras * h * w + 1
    }

    fn bounds(&self) -> [f64; ACTION_DIM] {
        let (t, l) = (self.thrust_max, self.torque_max);
        [t, t, t, l, l, l]
    }

    /// Action scaled into `[-1, 1]` per component.
    pub fn normalize_action(&self, a: &Action) -> [f64; ACTION_DIM] {
        let b = self.bounds();
        let x = a.to_array();
        std::array::from_fn(|i| x[i] / b[i])
    }

    pub fn denormalize_action(&self, x: &[f64]) -> Action {
        let b = self.bounds();
        let y: Vec<f64> = (0..ACTION_DIM).map(|i| x[i] * b[i]).collect();
        Action::from_slice(&y)
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Xavier { fan_in: usize, fan_out: usize },
    Uniform(f64),
    Zeros,
    Ones,
}

struct Specs {
    d: usize,
    d_ff: usize,
    out: Vec<(String, Vec<usize>, Init)>,
}

impl Specs {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.out.push((name, shape, init));
    }

    fn linear(&mut self, name: &str, i: usize, o: usize) {
        self.push(format!("{name}.w"), vec![i, o], Init::Xavier { fan_in: i, fan_out: o });
        self.push(format!("{name}.b"), vec![o], Init::Zeros);
    }

    fn norm(&mut self, name: &str) {
        self.push(format!("{name}.g"), vec![self.d], Init::Ones);
        self.push(format!("{name}.b"), vec![self.d], Init::Zeros);
    }

    fn conv(&mut self, name: &str, ci: usize, co: usize, k: usize) {
        let fan = Init::Xavier { fan_in: ci * k * k, fan_out: co * k * k };
        self.push(format!("{name}.w"), vec![co, ci, k, k], fan);
        self.push(format!("{name}.b"), vec![co], Init::Zeros);
    }

    fn attention(&mut self, name: &str) {
        for part in ["q", "k", "v", "o"] {
            self.linear(&format!("{name}.{part}"), self.d, self.d);
        }
    }

    fn feed_forward(&mut self, name: &str) {
        self.linear(&format!("{name}.ff1"), self.d, self.d_ff);
        self.linear(&format!("{name}.ff2"), self.d_ff, self.d);
    }

    fn encoder(&mut self, prefix: &str, layers: usize) {
        for l in 0..layers {
            let name = format!("{prefix}.{l}");
            self.attention(&format!("{name}.attn"));
            self.norm(&format!("{name}.ln1"));
            self.feed_forward(&name);
            self.norm(&format!("{name}.ln2"));
        }
    }
}

/// Every trainable tensor with its shape, in initialisation order.
fn param_specs(cfg: &PolicyConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_model;
    let mut s = Specs { d, d_ff: cfg.d_ff, out: Vec::new() };
    let mut c_in = 1;
    for (i, &c) in cfg.channels.iter().enumerate() {
        s.conv(&format!("backbone.{i}.conv1"), c_in, c, 3);
        s.conv(&format!("backbone.{i}.conv2"), c, c, 3);
        s.conv(&format!("backbone.{i}.skip"), c_in, c, 1);
        c_in = c;
    }
    s.conv("input_proj", c_in, d, 1);
    s.linear("state_proj", cfg.d_s, d);
    s.push("state_pos".into(), vec![1, d], Init::Uniform(0.1));
    s.linear("latent_proj", cfg.d_z, d);
    s.push("latent_pos".into(), vec![1, d], Init::Uniform(0.1));
    s.encoder("enc", cfg.n_layers_enc);
    for l in 0..cfg.n_layers_dec {
        let name = format!("dec.{l}");
        s.attention(&format!("{name}.self"));
        s.norm(&format!("{name}.ln1"));
        s.attention(&format!("{name}.cross"));
        s.norm(&format!("{name}.ln2"));
        s.feed_forward(&name);
        s.norm(&format!("{name}.ln3"));
    }
    s.push("queries".into(), vec![cfg.k, d], Init::Uniform(0.5));
    s.linear("head", d, cfg.d_a);

    s.push("style.cls".into(), vec![1, d], Init::Uniform(0.1));
    s.linear("style.state_proj", cfg.d_s, d);
    s.linear("style.action_proj", cfg.d_a, d);
    s.push("style.pos".into(), vec![cfg.k + 2, d], Init::Uniform(0.1));
    s.encoder("style.enc", cfg.n_layers_style);
    // Small output weights start the posterior near the prior.
    s.push("style.out.w".into(), vec![d, 2 * cfg.d_z], Init::Uniform(0.02));
    s.push("style.out.b".into(), vec![2 * cfg.d_z], Init::Zeros);
    s.out
}

/// Style latent values after a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStyle {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
    pub z: Vec<f64>,
}

/// Graph handles produced by [`ActPolicy::encode_style`], each `[B, d_z]`.
#[derive(Debug, Clone, Copy)]
pub struct StyleVars {
    pub mu: Var,
    pub log_sigma: Var,
    pub z: Var,
}

/// Name prefix of raw training weights stored alongside averaged policy
/// weights in a training checkpoint.
pub const TRAINING_PREFIX: &str = "train/";
pub const STATE_MEAN: &str = "norm.state_mean";
pub const STATE_STD: &str = "norm.state_std";
/// Smallest per-component state spread used for normalization.
pub const STATE_STD_FLOOR: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct ActPolicy {
    config: PolicyConfig,
    params: ParameterSet,
}

impl ActPolicy {
    /// Fresh parameters drawn from `seed`; state normalisation starts as the
    /// identity.
    pub fn new(config: PolicyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        for (name, shape, init) in param_specs(&config) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match init {
                Init::Xavier { fan_in, fan_out } => {
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-a..a)).collect()
                }
                Init::Uniform(a) => (0..n).map(|_| rng.random_range(-a..a)).collect(),
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            params.insert(&name, Tensor::new(shape, data)?, true)?;
        }
        params.insert(STATE_MEAN, Tensor::zeros(vec![STATE_DIM]), false)?;
        params.insert(STATE_STD, Tensor::new(vec![STATE_DIM], vec![1.0; STATE_DIM])?, false)?;
        Ok(Self { config, params })
    }

    pub fn from_parts(config: PolicyConfig, params: ParameterSet) -> Result<Self> {
        config.validate()?;
        let reference = ActPolicy::new(config.clone(), 0)?;
        for (name, p) in reference.params.iter() {
            let got = params
                .get(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter '{name}'")))?;
            if got.value.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "parameter '{name}' has shape {:?}, config implies {:?}",
                    got.value.shape(),
                    p.value.shape()
                )));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, config implies {}",
                params.len(),
                reference.params.len()
            )));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    /// Freeze per-component state statistics into the parameter set.
    /// Spreads are floored at [`STATE_STD_FLOOR`] so that components the
    /// demonstrations barely excite do not blow up small closed-loop
    /// deviations.
    pub fn set_state_normalization(&mut self, mean: &[f64; STATE_DIM], std: &[f64; STATE_DIM]) -> Result<()> {
        let std: Vec<f64> = std.iter().map(|&s| if s.is_finite() { s.max(STATE_STD_FLOOR) } else { 1.0 }).collect();
        self.params.get_mut(STATE_MEAN).expect("created in new").value = Tensor::new(vec![STATE_DIM], mean.to_vec())?;
        self.params.get_mut(STATE_STD).expect("created in new").value = Tensor::new(vec![STATE_DIM], std)?;
        Ok(())
    }

    pub fn normalize_state(&self, s: &ChaserState) -> [f64; STATE_DIM] {
        let mean = self.params.get(STATE_MEAN).expect("created in new").value.data();
        let std = self.params.get(STATE_STD).expect("created in new").value.data();
        let x = s.to_array();
        std::array::from_fn(|i| (x[i] - mean[i]) / std[i])
    }

    /// Observation tokens `[B·T, d_model]`: per camera `h'·w'` image tokens,
    /// then the state token.
    pub fn embed_observation(&self, g: &mut Graph, obs: &[&Observation]) -> Result<Var> {
        let cfg = &self.config;
        let ps = &self.params;
        let batch = obs.len();
        if batch == 0 {
            return Err(Error::Usage("embed_observation needs at least one observation".into()));
        }
        let (hh, ww) = cfg.feature_grid();
        let pe = g.constant(Tensor::from_rows(hh * ww, cfg.d_model, sine_pe_2d(hh, ww, cfg.d_model))?)?;
        for o in obs {
            if o.images.len() != cfg.cameras {
                return Err(Error::Usage(format!("expected {} camera images, got {}", cfg.cameras, o.images.len())));
            }
            if let Some(im) = o.images.iter().find(|im| im.h != cfg.image_h || im.w != cfg.image_w) {
                return Err(Error::Usage(format!(
                    "image is {}x{}, policy expects {}x{}",
                    im.h, im.w, cfg.image_h, cfg.image_w
                )));
            }
        }
        let mut parts = Vec::with_capacity(cfg.cameras + 1);
        for cam in 0..cfg.cameras {
            let mut pixels = Vec::with_capacity(batch * cfg.image_h * cfg.image_w);
            for o in obs {
                pixels.extend_from_slice(&o.images[cam].data);
            }
            let mut x = g.constant(Tensor::new(vec![batch, 1, cfg.image_h, cfg.image_w], pixels)?)?;
            for i in 0..cfg.channels.len() {
                x = residual_block(g, ps, &format!("backbone.{i}"), x)?;
            }
            let w = g.param(ps, "input_proj.w")?;
            let b = g.param(ps, "input_proj.b")?;
            let x = g.conv2d(x, w, b, 1, 0)?;
            let tokens = g.to_tokens(x)?;
            parts.push(g.add_tiled(tokens, pe)?);
        }
        let states: Vec<f64> = obs.iter().flat_map(|o| self.normalize_state(&o.state)).collect();
        let s = g.constant(Tensor::from_rows(batch, STATE_DIM, states)?)?;
        let s = linear(g, ps, s, "state_proj")?;
        let pos = g.param(ps, "state_pos")?;
        parts.push(g.add_tiled(s, pos)?);
        Ok(g.concat_seq(&parts, batch)?)
    }

    /// CVAE encoder over `[CLS, state, k actions]`. `targets` holds the
    /// bound-normalised actions `[B·k·6]` and `valid` their mask `[B·k]`.
    /// With `eps` (`[B·d_z]`) the latent is `mu + exp(log_sigma)·eps`,
    /// otherwise `mu`.
    pub fn encode_style(
        &self,
        g: &mut Graph,
        states: &[ChaserState],
        targets: &[f64],
        valid: &[bool],
        eps: Option<&[f64]>,
    ) -> Result<StyleVars> {
        let cfg = &self.config;
        let ps = &self.params;
        let (batch, k, d) = (states.len(), cfg.k, cfg.d_model);
        if batch == 0 || targets.len() != batch * k * ACTION_DIM || valid.len() != batch * k {
            return Err(Error::Usage(format!(
                "encode_style: {batch} states, {} target values, {} mask entries for k = {k}",
                targets.len(),
                valid.len()
            )));
        }
        let cls = tile_param(g, ps, "style.cls", batch)?;
        let s: Vec<f64> = states.iter().flat_map(|s| self.normalize_state(s)).collect();
        let s = g.constant(Tensor::from_rows(batch, STATE_DIM, s)?)?;
        let s = linear(g, ps, s, "style.state_proj")?;
        let a = g.constant(Tensor::from_rows(batch * k, ACTION_DIM, targets.to_vec())?)?;
        let a = linear(g, ps, a, "style.action_proj")?;
        let seq = g.concat_seq(&[cls, s, a], batch)?;
        let pos = g.param(ps, "style.pos")?;
        let mut h = g.add_tiled(seq, pos)?;
        let mut mask = Vec::with_capacity(batch * (k + 2));
        for b in 0..batch {
            mask.extend([true, true]);
            mask.extend_from_slice(&valid[b * k..(b + 1) * k]);
        }
        for l in 0..cfg.n_layers_style {
            h = encoder_layer(g, ps, &format!("style.enc.{l}"), h, batch, cfg.n_heads, Some(&mask))?;
        }
        let rows: Vec<usize> = (0..batch).map(|b| b * (k + 2)).collect();
        let cls_out = g.select_rows(h, &rows)?;
        debug_assert_eq!(g.shape(cls_out), &[batch, d]);
        let out = linear(g, ps, cls_out, "style.out")?;
        let mu = g.slice_cols(out, 0, cfg.d_z)?;
        let log_sigma = g.slice_cols(out, cfg.d_z, cfg.d_z)?;
        let z = match eps {
            Some(e) => {
                if e.len() != batch * cfg.d_z {
                    return Err(Error::Usage(format!("noise has {} values, need {}", e.len(), batch * cfg.d_z)));
                }
                let sigma = g.exp(log_sigma)?;
                let noise = g.mul_const(sigma, e.to_vec())?;
                g.add(mu, noise)?
            }
            None => mu,
        };
        Ok(StyleVars { mu, log_sigma, z })
    }

    /// Decode a chunk from observation tokens and a latent `z [B, d_z]`.
    /// Returns bound-normalised actions `[B·k, 6]` in `(-1, 1)`.
    pub fn predict_chunk(&self, g: &mut Graph, tokens: Var, z: Var, batch: usize) -> Result<Var> {
        let cfg = &self.config;
        let ps = &self.params;
        let t = cfg.obs_tokens();
        if g.shape(tokens) != [batch * t, cfg.d_model] || g.shape(z) != [batch, cfg.d_z] {
            return Err(Error::Usage(format!(
                "predict_chunk: tokens {:?} and z {:?} for batch {batch}, expected [{}, {}] and [{batch}, {}]",
                g.shape(tokens),
                g.shape(z),
                batch * t,
                cfg.d_model,
                cfg.d_z
            )));
        }
        let zt = linear(g, ps, z, "latent_proj")?;
        let zpos = g.param(ps, "latent_pos")?;
        let zt = g.add_tiled(zt, zpos)?;
        let mut mem = g.concat_seq(&[tokens, zt], batch)?;
        for l in 0..cfg.n_layers_enc {
            mem = encoder_layer(g, ps, &format!("enc.{l}"), mem, batch, cfg.n_heads, None)?;
        }
        let mut h = tile_param(g, ps, "queries", batch * cfg.k)?;
        for l in 0..cfg.n_layers_dec {
            h = decoder_layer(g, ps, &format!("dec.{l}"), h, mem, batch, cfg.n_heads)?;
        }
        let out = linear(g, ps, h, "head")?;
        Ok(g.tanh(out)?)
    }

    /// Chunks for a batch of observations with an explicit latent per sample
    /// (`[B·d_z]`).
    pub fn infer_with_latent(&self, obs: &[&Observation], z: &[f64]) -> Result<Vec<Chunk>> {
        let cfg = &self.config;
        let batch = obs.len();
        if z.len() != batch * cfg.d_z || z.iter().any(|x| !x.is_finite()) {
            return Err(Error::Usage(format!("latent must hold {} finite values", batch * cfg.d_z)));
        }
        let mut g = Graph::new();
        let tokens = self.embed_observation(&mut g, obs)?;
        let zv = g.constant(Tensor::from_rows(batch, cfg.d_z, z.to_vec())?)?;
        let out = self.predict_chunk(&mut g, tokens, zv, batch)?;
        let data = g.value(out).data();
        Ok((0..batch)
            .map(|b| {
                let rows = (0..cfg.k)
                    .map(|j| cfg.denormalize_action(&data[(b * cfg.k + j) * ACTION_DIM..][..ACTION_DIM]))
                    .collect();
                Chunk::new(rows)
            })
            .collect())
    }

    /// Deterministic inference with `z = 0`.
    pub fn infer(&self, obs: &Observation) -> Result<Chunk> {
        let z = vec![0.0; self.config.d_z];
        Ok(self.infer_with_latent(&[obs], &z)?.remove(0))
    }

    /// Masked L1 on bound-normalised actions plus `beta`-weighted KL of the
    /// style posterior, with reparameterisation noise `eps` (`[B·d_z]`).
    pub fn forward_loss(&self, g: &mut Graph, batch: &TrainBatch, eps: &[f64], beta: f64) -> Result<LossVars> {
        let b = batch.obs.len();
        let states: Vec<ChaserState> = batch.obs.iter().map(|o| o.state).collect();
        let style = self.encode_style(g, &states, &batch.targets, &batch.valid, Some(eps))?;
        let refs: Vec<&Observation> = batch.obs.iter().collect();
        let tokens = self.embed_observation(g, &refs)?;
        let pred = self.predict_chunk(g, tokens, style.z, b)?;
        let l1 = masked_l1(g, pred, &batch.targets, &batch.valid)?;
        let kl = kl_to_prior(g, style.mu, style.log_sigma)?;
        let weighted = g.scale(kl, beta)?;
        let total = g.add(l1, weighted)?;
        Ok(LossVars { l1, kl, total, pred, style })
    }

    /// Write a checkpoint; `extra` is stored next to the policy config.
    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        checkpoint::save(path, &self.params, &self.checkpoint_meta(extra))?;
        Ok(())
    }

    pub(crate) fn checkpoint_meta(&self, extra: serde_json::Value) -> serde_json::Value {
        serde_json::json!({ "policy": self.config, "extra": extra })
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (params, meta) = checkpoint::load(path)?;
        Self::from_checkpoint(params, meta)
    }

    /// Rebuild a policy from a checkpoint. Tensors under [`TRAINING_PREFIX`]
    /// (raw optimiser weights kept next to averaged ones) are not part of the
    /// policy and are dropped.
    pub(crate) fn from_checkpoint(mut params: ParameterSet, mut meta: serde_json::Value) -> Result<(Self, serde_json::Value)> {
        let config: PolicyConfig = serde_json::from_value(meta.get("policy").cloned().unwrap_or_default())
            .map_err(|e| Error::Format(format!("checkpoint policy config: {e}")))?;
        let extra = meta.get_mut("extra").map(serde_json::Value::take).unwrap_or_default();
        let training: Vec<String> =
            params.iter().map(|(n, _)| n.clone()).filter(|n| n.starts_with(TRAINING_PREFIX)).collect();
        for name in &training {
            params.remove(name);
        }
        Ok((Self::from_parts(config, params)?, extra))
    }
}

/// One training minibatch: observations, bound-normalised target chunks
/// (`[B·k·6]`) and their validity mask (`[B·k]`).
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub obs: Vec<Observation>,
    pub targets: Vec<f64>,
    pub valid: Vec<bool>,
}

/// Scalar loss terms and the intermediate handles they came from.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub l1: Var,
    pub kl: Var,
    pub total: Var,
    pub pred: Var,
    pub style: StyleVars,
}

/// Mean absolute error over the valid rows of `pred [B·k, 6]`. Masked rows
/// contribute neither value nor gradient.
pub fn masked_l1(g: &mut Graph, pred: Var, targets: &[f64], valid: &[bool]) -> Result<Var> {
    let width = g.shape(pred).last().copied().unwrap_or(0);
    if g.value(pred).len() != targets.len() || valid.len() * width != targets.len() {
        return Err(Error::Usage(format!(
            "loss shapes: prediction {:?}, {} targets, {} mask rows",
            g.shape(pred),
            targets.len(),
            valid.len()
        )));
    }
    let n_valid = valid.iter().filter(|&&v| v).count();
    if n_valid == 0 {
        return Err(Error::Usage("every target row is masked".into()));
    }
    let t = g.constant(Tensor::new(g.shape(pred).to_vec(), targets.to_vec())?)?;
    let diff = g.sub(pred, t)?;
    let abs = g.abs(diff)?;
    let mask: Vec<f64> = valid.iter().flat_map(|&v| std::iter::repeat_n(if v { 1.0 } else { 0.0 }, width)).collect();
    let kept = g.mul_const(abs, mask)?;
    let total = g.sum(kept)?;
    Ok(g.scale(total, 1.0 / (n_valid * width) as f64)?)
}

/// `KL(N(mu, exp(log_sigma)²) ‖ N(0, I))`, summed over latent dimensions and
/// averaged over the batch rows.
pub fn kl_to_prior(g: &mut Graph, mu: Var, log_sigma: Var) -> Result<Var> {
    let rows = g.shape(mu).first().copied().unwrap_or(1).max(1);
    let mu2 = g.mul(mu, mu)?;
    let two_ls = g.scale(log_sigma, 2.0)?;
    let var = g.exp(two_ls)?;
    let a = g.add(mu2, var)?;
    let a = g.sub(a, two_ls)?;
    let a = g.add_scalar(a, -1.0)?;
    let s = g.sum(a)?;
    Ok(g.scale(s, 0.5 / rows as f64)?)
}

#[cfg(test)]
mod tests;
