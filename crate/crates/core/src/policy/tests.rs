use super::*;
use crate::dynamics::{sample_initial, InitMode};
use crate::eval::Scenario;
use crate::render::Image;
use crate::tensor::tests::rel_err;
use rand_distr::{Distribution, StandardNormal};

/// Small instance: 16×16 images, 2×2 feature grid.
fn small_config() -> PolicyConfig {
    PolicyConfig {
        k: 3,
        d_model: 32,
        n_layers_enc: 2,
        n_layers_dec: 2,
        n_layers_style: 2,
        n_heads: 2,
        d_z: 4,
        d_ff: 32,
        channels: [2, 4, 4],
        image_h: 16,
        image_w: 16,
        ..PolicyConfig::default()
    }
}

fn noise_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Image {
    let mut im = Image::zeros(h, w);
    for p in im.data.iter_mut() {
        *p = rng.random::<f64>();
    }
    im
}

fn random_obs(cfg: &PolicyConfig, rng: &mut ChaCha8Rng) -> Observation {
    let images = (0..cfg.cameras).map(|_| noise_image(cfg.image_h, cfg.image_w, rng)).collect();
    Observation { images, state: sample_initial(InitMode::Random, rng) }
}

fn rendered_obs(seed: u64) -> Observation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let state = sample_initial(InitMode::Same, &mut rng);
    Scenario::default().observe(&state, true)
}

#[test]
fn default_config_yields_49_tokens() {
    let cfg = PolicyConfig::default();
    assert_eq!(cfg.feature_grid(), (6, 8));
    assert_eq!(cfg.obs_tokens(), 49);
    let policy = ActPolicy::new(cfg, 0).unwrap();
    let obs = rendered_obs(1);
    let mut g = Graph::new();
    let t = policy.embed_observation(&mut g, &[&obs, &obs]).unwrap();
    assert_eq!(g.shape(t), &[2 * 49, 64]);
}

#[test]
fn positional_encoding_origin() {
    let pe = sine_pe_2d(6, 8, 64);
    assert_eq!(pe.len(), 6 * 8 * 64);
    for (c, &v) in pe[..64].iter().enumerate() {
        assert_eq!(v, if c % 2 == 0 { 0.0 } else { 1.0 }, "channel {c}");
    }
    // Row index lives in the first half: moving along x leaves it untouched.
    assert_eq!(&pe[64..96], &pe[..32]);
    assert_ne!(&pe[64 * 8..64 * 8 + 32], &pe[..32]);
}

#[test]
fn image_dimension_mismatch_is_reported() {
    let policy = ActPolicy::new(small_config(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut obs = random_obs(policy.config(), &mut rng);
    obs.images[0] = Image::zeros(16, 15);
    let mut g = Graph::new();
    assert!(matches!(policy.embed_observation(&mut g, &[&obs]), Err(Error::Usage(_))));
    obs.images.clear();
    assert!(policy.embed_observation(&mut g, &[&obs]).is_err());
}

#[test]
fn swapping_patches_permutes_tokens() {
    // With only the centre tap of every 3×3 kernel left, each backbone cell
    // (i, j) sees exactly pixel (8i, 8j), so aligned 8×8 patches map to
    // tokens one-to-one.
    let mut policy = ActPolicy::new(PolicyConfig::default(), 3).unwrap();
    for (name, p) in policy.params_mut().iter_mut() {
        if name.starts_with("backbone.") && name.ends_with(".w") && p.value.shape()[2] == 3 {
            for (i, x) in p.value.data_mut().iter_mut().enumerate() {
                if i % 9 != 4 {
                    *x = 0.0;
                }
            }
        }
    }
    let (h, w) = (48, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let obs = Observation { images: vec![noise_image(h, w, &mut rng)], state: sample_initial(InitMode::Same, &mut rng) };
    let (a, b) = ((1usize, 2usize), (4usize, 7usize));
    let mut swapped = obs.clone();
    for dy in 0..8 {
        for dx in 0..8 {
            let ia = (8 * a.0 + dy) * w + 8 * a.1 + dx;
            let ib = (8 * b.0 + dy) * w + 8 * b.1 + dx;
            swapped.images[0].data.swap(ia, ib);
        }
    }
    let tokens = |o: &Observation| {
        let mut g = Graph::new();
        let t = policy.embed_observation(&mut g, &[o]).unwrap();
        let mut v = g.value(t).data().to_vec();
        for (x, p) in v.iter_mut().zip(sine_pe_2d(6, 8, 64)) {
            *x -= p;
        }
        v
    };
    let (t0, t1) = (tokens(&obs), tokens(&swapped));
    let row = |v: &[f64], i: usize| v[i * 64..(i + 1) * 64].to_vec();
    let (ta, tb) = (a.0 * 8 + a.1, b.0 * 8 + b.1);
    assert_ne!(row(&t0, ta), row(&t0, tb));
    for i in 0..49 {
        let src = if i == ta { tb } else if i == tb { ta } else { i };
        // Equal up to the rounding of adding and removing the encoding.
        let gap = row(&t1, i).iter().zip(row(&t0, src)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-14, "token {i}: {gap:e}");
    }
}

fn style_inputs(cfg: &PolicyConfig, batch: usize, seed: u64) -> (Vec<ChaserState>, Vec<f64>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let states = (0..batch).map(|_| sample_initial(InitMode::Random, &mut rng)).collect();
    let targets = (0..batch * cfg.k * ACTION_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut valid = vec![true; batch * cfg.k];
    valid[cfg.k - 1] = false;
    (states, targets, valid)
}

#[test]
fn style_latent_dimensions_and_determinism() {
    let cfg = small_config();
    let policy = ActPolicy::new(cfg.clone(), 4).unwrap();
    let (states, targets, valid) = style_inputs(&cfg, 3, 5);
    let eps: Vec<f64> = (0..3 * cfg.d_z).map(|i| (i as f64 * 0.37).sin()).collect();
    let run = || {
        let mut g = Graph::new();
        let s = policy.encode_style(&mut g, &states, &targets, &valid, Some(&eps)).unwrap();
        assert_eq!(g.shape(s.mu), &[3, cfg.d_z]);
        assert_eq!(g.shape(s.log_sigma), &[3, cfg.d_z]);
        assert_eq!(g.shape(s.z), &[3, cfg.d_z]);
        let v = |x| g.value(x).data().to_vec();
        LatentStyle { mu: v(s.mu), log_sigma: v(s.log_sigma), z: v(s.z) }
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert!(a.z.iter().chain(&a.mu).chain(&a.log_sigma).all(|x| x.is_finite()));
    for i in 0..a.z.len() {
        let expect = a.mu[i] + a.log_sigma[i].exp() * eps[i];
        assert!((a.z[i] - expect).abs() < 1e-14);
    }
    assert!(policy.encode_style(&mut Graph::new(), &states, &targets[1..], &valid, None).is_err());
}

#[test]
fn masked_actions_do_not_reach_the_latent() {
    let cfg = small_config();
    let policy = ActPolicy::new(cfg.clone(), 4).unwrap();
    let (states, mut targets, valid) = style_inputs(&cfg, 2, 6);
    let mu = |t: &[f64]| {
        let mut g = Graph::new();
        let s = policy.encode_style(&mut g, &states, t, &valid, None).unwrap();
        g.value(s.mu).data().to_vec()
    };
    let before = mu(&targets);
    let masked_row = cfg.k - 1;
    for x in &mut targets[masked_row * ACTION_DIM..][..ACTION_DIM] {
        *x += 0.5;
    }
    assert_eq!(mu(&targets), before);
}

#[test]
fn kl_gradient_vanishes_at_the_prior() {
    let mut g = Graph::new();
    let mu = g.input(Tensor::zeros(vec![2, 5])).unwrap();
    let ls = g.input(Tensor::zeros(vec![2, 5])).unwrap();
    let kl = kl_to_prior(&mut g, mu, ls).unwrap();
    assert_eq!(g.value(kl).data(), &[0.0]);
    g.backward(kl).unwrap();
    assert!(g.grad(mu).unwrap().iter().all(|&x| x == 0.0));
    assert!(g.grad(ls).unwrap().iter().all(|&x| x == 0.0));
}

#[test]
fn kl_matches_closed_form() {
    let mut g = Graph::new();
    let mu = g.input(Tensor::from_rows(1, 2, vec![0.5, 0.0]).unwrap()).unwrap();
    let ls = g.input(Tensor::from_rows(1, 2, vec![0.0, 0.3]).unwrap()).unwrap();
    let kl = kl_to_prior(&mut g, mu, ls).unwrap();
    let s2 = (0.6f64).exp();
    let expect = 0.5 * (0.25 + 1.0 - 1.0) + 0.5 * (s2 - 1.0 - 0.6);
    assert!((g.value(kl).data()[0] - expect).abs() < 1e-15);
}

#[test]
fn inference_is_deterministic_and_bounded() {
    let cfg = PolicyConfig::default();
    let policy = ActPolicy::new(cfg.clone(), 11).unwrap();
    let obs = rendered_obs(2);
    let a = policy.infer(&obs).unwrap();
    let b = policy.infer(&obs).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), cfg.k);
    assert!(a.actions.iter().all(|x| x.within_bounds(cfg.thrust_max, cfg.torque_max)));
}

#[test]
fn chunk_depends_on_latent() {
    let cfg = small_config();
    let policy = ActPolicy::new(cfg.clone(), 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let obs = random_obs(&cfg, &mut rng);
    let base = policy.infer(&obs).unwrap();
    for _ in 0..5 {
        let mut u: Vec<f64> = (0..cfg.d_z).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        u.iter_mut().for_each(|x| *x /= n);
        let moved = policy.infer_with_latent(&[&obs], &u).unwrap().remove(0);
        let diff = base
            .actions
            .iter()
            .zip(&moved.actions)
            .map(|(a, b)| (a.thrust - b.thrust).norm() + (a.torque - b.torque).norm())
            .sum::<f64>();
        assert!(diff > 1e-6, "latent change left the chunk unchanged ({diff})");
    }
}

#[test]
fn batched_inference_matches_single() {
    let cfg = small_config();
    let policy = ActPolicy::new(cfg.clone(), 14).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let (o1, o2) = (random_obs(&cfg, &mut rng), random_obs(&cfg, &mut rng));
    let both = policy.infer_with_latent(&[&o1, &o2], &vec![0.0; 2 * cfg.d_z]).unwrap();
    for (single, batched) in [policy.infer(&o1).unwrap(), policy.infer(&o2).unwrap()].iter().zip(&both) {
        for (a, b) in single.actions.iter().zip(&batched.actions) {
            assert!((a.thrust - b.thrust).norm() < 1e-12 && (a.torque - b.torque).norm() < 1e-12);
        }
    }
}

#[test]
fn config_validation_names_fields() {
    let bad = |f: fn(&mut PolicyConfig), field: &str| {
        let mut c = PolicyConfig::default();
        f(&mut c);
        match c.validate() {
            Err(Error::Config { field: got, .. }) => assert_eq!(got, field),
            other => panic!("expected config error on {field}, got {other:?}"),
        }
    };
    bad(|c| c.n_heads = 3, "policy.n_heads");
    bad(|c| c.k = 0, "policy.k");
    bad(|c| c.d_z = 0, "policy.d_z");
    bad(|c| c.d_s = 12, "policy.d_s");
    bad(|c| c.thrust_max = 0.0, "policy.thrust_max");
    bad(|c| c.n_layers_dec = 0, "policy.n_layers_dec");
}

#[test]
fn action_normalisation_round_trips() {
    let cfg = PolicyConfig::default();
    let a = Action::from_slice(&[40.0, -20.0, 1.5, 1.0, -0.25, 0.0]);
    let n = cfg.normalize_action(&a);
    assert_eq!(n, [1.0, -0.5, 0.0375, 1.0, -0.25, 0.0]);
    assert_eq!(cfg.denormalize_action(&n), a);
}

#[test]
fn state_normalisation_guards_degenerate_spread() {
    let mut policy = ActPolicy::new(small_config(), 0).unwrap();
    let mean = [1.0; STATE_DIM];
    let mut std = [2.0; STATE_DIM];
    std[3] = 0.0;
    std[4] = 1e-3;
    std[5] = f64::NAN;
    policy.set_state_normalization(&mean, &std).unwrap();
    let s = ChaserState::from_array(&[3.0; STATE_DIM]);
    let n = policy.normalize_state(&s);
    assert_eq!(n[0], 1.0);
    assert_eq!(n[3], 2.0 / STATE_STD_FLOOR);
    assert_eq!(n[4], 2.0 / STATE_STD_FLOOR);
    assert_eq!(n[5], 2.0);
}

#[test]
fn checkpoint_round_trip() {
    let mut policy = ActPolicy::new(small_config(), 21).unwrap();
    policy.set_state_normalization(&[0.5; STATE_DIM], &[3.0; STATE_DIM]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.ckpt");
    policy.save(&path, serde_json::json!({"iteration": 7})).unwrap();
    let (back, extra) = ActPolicy::load(&path).unwrap();
    assert_eq!(back, policy);
    assert_eq!(extra["iteration"], 7);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let obs = random_obs(policy.config(), &mut rng);
    assert_eq!(back.infer(&obs).unwrap(), policy.infer(&obs).unwrap());
}

#[test]
fn mismatched_checkpoint_is_rejected() {
    let policy = ActPolicy::new(small_config(), 21).unwrap();
    let mut other = small_config();
    other.d_z = 5;
    assert!(matches!(ActPolicy::from_parts(other, policy.params().clone()), Err(Error::Format(_))));
}

fn gradcheck_batch(cfg: &PolicyConfig, seed: u64) -> (TrainBatch, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let obs = (0..2).map(|_| random_obs(cfg, &mut rng)).collect();
    let targets = (0..2 * cfg.k * ACTION_DIM).map(|_| rng.random_range(-0.9..0.9)).collect();
    let mut valid = vec![true; 2 * cfg.k];
    valid[2 * cfg.k - 1] = false;
    let eps = (0..2 * cfg.d_z).map(|_| StandardNormal.sample(&mut rng)).collect();
    (TrainBatch { obs, targets, valid }, eps)
}

#[test]
fn end_to_end_gradcheck() {
    let cfg = small_config();
    let mut policy = ActPolicy::new(cfg.clone(), 31).unwrap();
    policy.set_state_normalization(&[0.0; STATE_DIM], &[50.0; STATE_DIM]).unwrap();
    let (batch, eps) = gradcheck_batch(&cfg, 32);
    let beta = 0.7;

    let mut g = Graph::new();
    let loss = policy.forward_loss(&mut g, &batch, &eps, beta).unwrap();
    g.backward(loss.total).unwrap();
    let analytic: Vec<(String, Vec<f64>)> = g
        .param_vars()
        .iter()
        .map(|(name, v)| (name.clone(), g.grad(*v).map(<[f64]>::to_vec).unwrap_or_default()))
        .collect();
    let trainable = policy.params().iter().filter(|(_, p)| p.trainable).count();
    assert_eq!(analytic.len(), trainable, "every trainable tensor takes part in the loss");

    let h = 1e-5;
    let (mut worst, mut checked) = (0.0f64, 0usize);
    for (name, grad) in &analytic {
        assert_eq!(grad.len(), policy.params().get(name).unwrap().value.len(), "{name}");
        for (i, &a) in grad.iter().enumerate() {
            let orig = policy.params().get(name).unwrap().value.data()[i];
            let mut eval = |delta: f64| {
                policy.params_mut().get_mut(name).unwrap().value.data_mut()[i] = orig + delta;
                let mut g = Graph::new();
                let l = policy.forward_loss(&mut g, &batch, &eps, beta).unwrap();
                g.value(l.total).data()[0]
            };
            let plus = eval(h);
            let minus = eval(-h);
            eval(0.0);
            let n = (plus - minus) / (2.0 * h);
            let e = rel_err(a, n);
            assert!(e < 1e-4, "{name}[{i}]: analytic {a:e}, numeric {n:e}, rel err {e:e}");
            worst = worst.max(e);
            checked += 1;
        }
    }
    assert!(checked > 1000);
    eprintln!("gradcheck: {checked} entries, worst relative error {worst:.2e}");
}

