//! Relative 6-DOF chaser dynamics about a docking port on a circular orbit.
//!
//! Translation follows the Hill–Clohessy–Wiltshire equations in an LVLH frame
//! centred on the port (x radial / R-bar, y along-track / V-bar, z
//! cross-track). Rotation follows Euler's equations with a body→LVLH
//! attitude quaternion. Both are integrated together with classical RK4 under
//! a zero-order-hold thrust/torque command expressed in the body frame.

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::Image;

/// Earth gravitational parameter, km³/s².
pub const MU_EARTH: f64 = 398_600.441_8;
/// Earth equatorial radius, km.
pub const R_EARTH: f64 = 6_378.137;
/// Reference orbit altitude, km.
pub const STATION_ALTITUDE_KM: f64 = 409.0;

/// Length of the flattened state vector `[r, v, q(w,x,y,z), ω]`.
pub const STATE_DIM: usize = 13;
/// Length of the flattened action vector `[thrust, torque]`.
pub const ACTION_DIM: usize = 6;

/// Mean motion of a circular orbit, `sqrt(mu / (r_body + altitude)^3)`.
pub fn mean_motion(altitude_km: f64, mu: f64, r_body_km: f64) -> Result<f64> {
    let a = r_body_km + altitude_km;
    if !(a > 0.0) || !a.is_finite() {
        return Err(Error::Domain(format!("semi-major axis must be positive, got {a} km")));
    }
    if !(mu > 0.0) || !mu.is_finite() {
        return Err(Error::Domain(format!("gravitational parameter must be positive, got {mu}")));
    }
    Ok((mu / (a * a * a)).sqrt())
}

/// Hidden state of the chaser relative to the docking port.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChaserState {
    /// Position in LVLH, m.
    pub r: Vector3<f64>,
    /// Velocity in LVLH, m/s.
    pub v: Vector3<f64>,
    /// Attitude, body→LVLH.
    pub q: UnitQuaternion<f64>,
    /// Angular rate in the body frame, rad/s.
    pub w: Vector3<f64>,
}

impl Default for ChaserState {
    fn default() -> Self {
        Self {
            r: Vector3::zeros(),
            v: Vector3::zeros(),
            q: UnitQuaternion::identity(),
            w: Vector3::zeros(),
        }
    }
}

impl ChaserState {
    /// Flattened `[r, v, q_w, q_x, q_y, q_z, ω]`.
    pub fn to_array(&self) -> [f64; STATE_DIM] {
        let q = self.q.quaternion();
        [
            self.r.x, self.r.y, self.r.z, self.v.x, self.v.y, self.v.z, q.w, q.i, q.j, q.k,
            self.w.x, self.w.y, self.w.z,
        ]
    }

    /// Inverse of [`ChaserState::to_array`]. The quaternion is stored as given
    /// (no renormalisation) so that serialized states round-trip bit-exactly.
    pub fn from_array(x: &[f64; STATE_DIM]) -> Self {
        Self {
            r: Vector3::new(x[0], x[1], x[2]),
            v: Vector3::new(x[3], x[4], x[5]),
            q: UnitQuaternion::new_unchecked(Quaternion::new(x[6], x[7], x[8], x[9])),
            w: Vector3::new(x[10], x[11], x[12]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|x| x.is_finite())
    }

    /// Camera boresight (body +z) expressed in LVLH.
    pub fn boresight(&self) -> Vector3<f64> {
        self.q * Vector3::z()
    }

    pub fn range(&self) -> f64 {
        self.r.norm()
    }
}

/// Thrust/torque command in the body frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Action {
    /// N.
    pub thrust: Vector3<f64>,
    /// N·m.
    pub torque: Vector3<f64>,
}

impl Action {
    pub fn to_array(&self) -> [f64; ACTION_DIM] {
        [
            self.thrust.x,
            self.thrust.y,
            self.thrust.z,
            self.torque.x,
            self.torque.y,
            self.torque.z,
        ]
    }

    pub fn from_slice(a: &[f64]) -> Self {
        Self {
            thrust: Vector3::new(a[0], a[1], a[2]),
            torque: Vector3::new(a[3], a[4], a[5]),
        }
    }

    /// Component-wise saturation at `±thrust_max` / `±torque_max`.
    pub fn saturate(&self, thrust_max: f64, torque_max: f64) -> Self {
        Self {
            thrust: self.thrust.map(|x| x.clamp(-thrust_max, thrust_max)),
            torque: self.torque.map(|x| x.clamp(-torque_max, torque_max)),
        }
    }

    pub fn within_bounds(&self, thrust_max: f64, torque_max: f64) -> bool {
        self.thrust.iter().all(|x| x.abs() <= thrust_max)
            && self.torque.iter().all(|x| x.abs() <= torque_max)
    }
}

/// Which initial-position dispersion box to sample from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// x, z ∈ [−1, 1] m; y ∈ [−26, −24] m.
    Same,
    /// x, z ∈ [−2.5, 2.5] m; y ∈ [−27.5, −22.5] m.
    Random,
}

impl InitMode {
    /// `(min, max)` corners of the position box.
    pub fn bounds(self) -> ([f64; 3], [f64; 3]) {
        match self {
            InitMode::Same => ([-1.0, -26.0, -1.0], [1.0, -24.0, 1.0]),
            InitMode::Random => ([-2.5, -27.5, -2.5], [2.5, -22.5, 2.5]),
        }
    }
}

impl std::str::FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "same" => Ok(InitMode::Same),
            "random" => Ok(InitMode::Random),
            other => Err(Error::Usage(format!("unknown init mode '{other}' (expected same|random)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Mean motion of the reference orbit, rad/s.
    pub mean_motion: f64,
    /// kg.
    pub mass: f64,
    /// Row-major inertia tensor, kg·m².
    pub inertia: [[f64; 3]; 3],
    pub dt_mean: f64,
    pub dt_std: f64,
    pub thrust_max: f64,
    pub torque_max: f64,
    pub horizon: usize,
    pub dock_radius: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            mean_motion: mean_motion(STATION_ALTITUDE_KM, MU_EARTH, R_EARTH)
                .expect("nominal orbit is valid"),
            mass: 500.0,
            inertia: [[200.0, 0.0, 0.0], [0.0, 200.0, 0.0], [0.0, 0.0, 150.0]],
            dt_mean: 0.89,
            dt_std: 0.13,
            thrust_max: 40.0,
            torque_max: 1.0,
            horizon: 64,
            dock_radius: 0.10,
        }
    }
}

impl SimConfig {
    pub fn inertia_matrix(&self) -> Matrix3<f64> {
        let i = &self.inertia;
        Matrix3::new(
            i[0][0], i[0][1], i[0][2], i[1][0], i[1][1], i[1][2], i[2][0], i[2][1], i[2][2],
        )
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, x: f64| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("sim.{name}"), format!("must be positive and finite, got {x}")))
            }
        };
        positive("mean_motion", self.mean_motion)?;
        positive("mass", self.mass)?;
        positive("dt_mean", self.dt_mean)?;
        positive("thrust_max", self.thrust_max)?;
        positive("torque_max", self.torque_max)?;
        if !(self.dt_std >= 0.0) || !self.dt_std.is_finite() {
            return Err(Error::config("sim.dt_std", format!("must be non-negative, got {}", self.dt_std)));
        }
        if self.dt_mean - 3.0 * self.dt_std <= 0.0 {
            return Err(Error::config(
                "sim.dt_std",
                "dt_mean - 3*dt_std must stay positive so every step is forward in time",
            ));
        }
        if !(self.dock_radius >= 0.0) {
            return Err(Error::config("sim.dock_radius", "must be non-negative"));
        }
        if self.horizon < 1 {
            return Err(Error::config("sim.horizon", "must be at least 1"));
        }
        let inertia = self.inertia_matrix();
        if inertia.iter().any(|x| !x.is_finite()) {
            return Err(Error::config("sim.inertia", "entries must be finite"));
        }
        let asym = (inertia - inertia.transpose()).abs().max();
        if asym > 1e-12 * inertia.abs().max() {
            return Err(Error::config("sim.inertia", "must be symmetric"));
        }
        if inertia.cholesky().is_none() {
            return Err(Error::config("sim.inertia", "must be positive definite"));
        }
        Ok(())
    }
}

type StateVec = [f64; STATE_DIM];

fn derivative(x: &StateVec, action: &Action, cfg: &SimConfig, inertia: &Matrix3<f64>, inertia_inv: &Matrix3<f64>) -> StateVec {
    let n = cfg.mean_motion;
    let v = Vector3::new(x[3], x[4], x[5]);
    let q = Quaternion::new(x[6], x[7], x[8], x[9]);
    let w = Vector3::new(x[10], x[11], x[12]);

    let force = UnitQuaternion::new_normalize(q) * action.thrust;
    let accel = Vector3::new(
        3.0 * n * n * x[0] + 2.0 * n * v.y + force.x / cfg.mass,
        -2.0 * n * v.x + force.y / cfg.mass,
        -n * n * x[2] + force.z / cfg.mass,
    );
    let w_dot = inertia_inv * (action.torque - w.cross(&(inertia * w)));
    let q_dot = q * Quaternion::new(0.0, w.x, w.y, w.z) * 0.5;

    [
        v.x, v.y, v.z, accel.x, accel.y, accel.z, q_dot.w, q_dot.i, q_dot.j, q_dot.k, w_dot.x,
        w_dot.y, w_dot.z,
    ]
}

fn axpy(x: &StateVec, h: f64, k: &StateVec) -> StateVec {
    std::array::from_fn(|i| x[i] + h * k[i])
}

/// Advance the state by one RK4 step of length `dt` with the action held
/// constant. The attitude quaternion is renormalised afterwards.
pub fn step(state: &ChaserState, action: &Action, dt: f64, cfg: &SimConfig) -> Result<ChaserState> {
    if !state.is_finite() {
        return Err(Error::Propagation(format!("non-finite input state {:?}", state.to_array())));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::Propagation(format!("time step must be positive, got {dt}")));
    }
    let slack = 1e-12;
    if !action.within_bounds(cfg.thrust_max * (1.0 + slack), cfg.torque_max * (1.0 + slack)) {
        return Err(Error::Propagation(format!("action out of bounds: {:?}", action.to_array())));
    }

    let inertia = cfg.inertia_matrix();
    let inertia_inv = inertia
        .try_inverse()
        .ok_or_else(|| Error::config("sim.inertia", "singular"))?;

    let x0 = state.to_array();
    let k1 = derivative(&x0, action, cfg, &inertia, &inertia_inv);
    let k2 = derivative(&axpy(&x0, 0.5 * dt, &k1), action, cfg, &inertia, &inertia_inv);
    let k3 = derivative(&axpy(&x0, 0.5 * dt, &k2), action, cfg, &inertia, &inertia_inv);
    let k4 = derivative(&axpy(&x0, dt, &k3), action, cfg, &inertia, &inertia_inv);
    let x1: StateVec =
        std::array::from_fn(|i| x0[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));

    let q = Quaternion::new(x1[6], x1[7], x1[8], x1[9]);
    let next = ChaserState {
        r: Vector3::new(x1[0], x1[1], x1[2]),
        v: Vector3::new(x1[3], x1[4], x1[5]),
        q: UnitQuaternion::new_normalize(q),
        w: Vector3::new(x1[10], x1[11], x1[12]),
    };
    if !next.is_finite() {
        return Err(Error::Propagation(format!("propagation diverged from {:?}", x0)));
    }
    Ok(next)
}

/// Attitude whose camera boresight (body +z) points along `direction`.
pub fn look_along(direction: &Vector3<f64>) -> UnitQuaternion<f64> {
    let z_b = direction.normalize();
    let mut reference = Vector3::x();
    if reference.dot(&z_b).abs() > 0.99 {
        reference = Vector3::z();
    }
    let y_b = (reference - z_b * reference.dot(&z_b)).normalize();
    let x_b = y_b.cross(&z_b);
    let rot = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[x_b, y_b, z_b]));
    UnitQuaternion::from_rotation_matrix(&rot)
}

/// Draw an initial state: position uniform in the mode's box, at rest, with
/// the camera aimed at the docking port.
pub fn sample_initial<R: Rng + ?Sized>(mode: InitMode, rng: &mut R) -> ChaserState {
    let (lo, hi) = mode.bounds();
    let r = Vector3::from_fn(|i, _| rng.random_range(lo[i]..=hi[i]));
    ChaserState {
        r,
        v: Vector3::zeros(),
        q: look_along(&(-r)),
        w: Vector3::zeros(),
    }
}

/// Gaussian step length clamped to `dt_mean ± 3·dt_std`.
pub fn sample_dt<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> f64 {
    if cfg.dt_std == 0.0 {
        return cfg.dt_mean;
    }
    let normal = Normal::new(cfg.dt_mean, cfg.dt_std).expect("dt_std validated non-negative");
    let lo = cfg.dt_mean - 3.0 * cfg.dt_std;
    let hi = cfg.dt_mean + 3.0 * cfg.dt_std;
    normal.sample(rng).clamp(lo, hi)
}

/// What the policy sees at one time step: the image stack `I_t` and the
/// numeric state vector `s_t`.
#[derive(Debug, Clone)]
pub struct Observation {
    pub images: Vec<Image>,
    pub state: ChaserState,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Closed-form HCW state-transition matrix applied to `(r0, v0)`.
    fn hcw_analytic(n: f64, r0: Vector3<f64>, v0: Vector3<f64>, t: f64) -> (Vector3<f64>, Vector3<f64>) {
        let (s, c) = (n * t).sin_cos();
        let (x0, y0, z0) = (r0.x, r0.y, r0.z);
        let (u0, w0, q0) = (v0.x, v0.y, v0.z);
        let x = (4.0 - 3.0 * c) * x0 + s / n * u0 + 2.0 * (1.0 - c) / n * w0;
        let y = 6.0 * (s - n * t) * x0 + y0 - 2.0 * (1.0 - c) / n * u0 + (4.0 * s - 3.0 * n * t) / n * w0;
        let z = c * z0 + s / n * q0;
        let vx = 3.0 * n * s * x0 + c * u0 + 2.0 * s * w0;
        let vy = -6.0 * n * (1.0 - c) * x0 - 2.0 * s * u0 + (4.0 * c - 3.0) * w0;
        let vz = -n * s * z0 + c * q0;
        (Vector3::new(x, y, z), Vector3::new(vx, vy, vz))
    }

    fn drift(cfg: &SimConfig, start: ChaserState, total: f64, seed: u64) -> ChaserState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = start;
        let mut t = 0.0;
        while t < total {
            let dt = sample_dt(cfg, &mut rng).min(total - t);
            s = step(&s, &Action::default(), dt, cfg).unwrap();
            t += dt;
        }
        s
    }

    #[test]
    fn mean_motion_examples() {
        assert_eq!(mean_motion(0.0, 1.0, 1.0).unwrap(), 1.0);
        let n = mean_motion(409.0, MU_EARTH, R_EARTH).unwrap();
        let a: f64 = 6787.137;
        assert_relative_eq!(n, (MU_EARTH / a.powi(3)).sqrt(), max_relative = 1e-15);
        assert!((n - 1.129e-3).abs() < 1e-6, "n = {n}");
        // n ∝ a^{-3/2}: doubling a costs a factor 8^{1/2}, quadrupling a factor 8.
        let n2 = mean_motion(2.0 * a - R_EARTH, MU_EARTH, R_EARTH).unwrap();
        assert_relative_eq!(n / n2, 8f64.sqrt(), max_relative = 1e-12);
        let n4 = mean_motion(4.0 * a - R_EARTH, MU_EARTH, R_EARTH).unwrap();
        assert_relative_eq!(n / n4, 8.0, max_relative = 1e-12);
    }

    #[test]
    fn mean_motion_domain_errors() {
        assert!(matches!(mean_motion(-7000.0, MU_EARTH, R_EARTH), Err(Error::Domain(_))));
        assert!(matches!(mean_motion(409.0, 0.0, R_EARTH), Err(Error::Domain(_))));
    }

    #[test]
    fn origin_is_equilibrium() {
        let cfg = SimConfig::default();
        let s = ChaserState::default();
        let next = step(&s, &Action::default(), 0.89, &cfg).unwrap();
        assert_eq!(next, s);
    }

    #[test]
    fn radial_drift_matches_stm() {
        let cfg = SimConfig::default();
        let start = ChaserState { r: Vector3::new(1.0, 0.0, 0.0), ..Default::default() };
        let end = drift(&cfg, start, 60.0, 3);
        let (r, v) = hcw_analytic(cfg.mean_motion, start.r, start.v, 60.0);
        assert!((end.r - r).amax() < 1e-6);
        assert!((end.v - v).amax() < 1e-8);
    }

    #[test]
    fn cross_track_is_harmonic() {
        let cfg = SimConfig::default();
        let n = cfg.mean_motion;
        let start = ChaserState { r: Vector3::new(0.0, 0.0, 1.0), ..Default::default() };
        let end = drift(&cfg, start, 60.0, 4);
        assert!((end.r.z - (n * 60.0).cos()).abs() < 1e-9);
        assert!((end.v.z + n * (n * 60.0).sin()).abs() < 1e-10);
        assert!(end.r.x.abs() < 1e-12 && end.r.y.abs() < 1e-12);
    }

    #[test]
    fn symmetric_rotor_spins_about_z() {
        let cfg = SimConfig {
            inertia: [[100.0, 0.0, 0.0], [0.0, 100.0, 0.0], [0.0, 0.0, 100.0]],
            ..Default::default()
        };
        let omega = 0.05;
        let s = ChaserState { w: Vector3::new(0.0, 0.0, omega), ..Default::default() };
        let dt = 0.89;
        let next = step(&s, &Action::default(), dt, &cfg).unwrap();
        assert_eq!(next.w, s.w);
        let expected = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), omega * dt);
        assert!(next.q.angle_to(&expected) < 1e-10);
    }

    #[test]
    fn torque_free_energy_and_momentum_conserved() {
        let cfg = SimConfig {
            inertia: [[200.0, 5.0, -3.0], [5.0, 180.0, 2.0], [-3.0, 2.0, 150.0]],
            ..Default::default()
        };
        cfg.validate().unwrap();
        let inertia = cfg.inertia_matrix();
        let mut s = ChaserState { w: Vector3::new(0.02, -0.01, 0.03), ..Default::default() };
        let energy = |s: &ChaserState| 0.5 * s.w.dot(&(inertia * s.w));
        let momentum = |s: &ChaserState| s.q * (inertia * s.w);
        let (e0, h0) = (energy(&s), momentum(&s));
        for _ in 0..1000 {
            s = step(&s, &Action::default(), 0.89, &cfg).unwrap();
            assert!((s.q.quaternion().norm() - 1.0).abs() < 1e-9);
        }
        assert!((energy(&s) - e0).abs() / e0 < 1e-8);
        assert!((momentum(&s) - h0).norm() / h0.norm() < 1e-8);
    }

    #[test]
    fn step_is_bit_deterministic() {
        let cfg = SimConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = sample_initial(InitMode::Random, &mut rng);
        let a = Action {
            thrust: Vector3::new(3.0, -7.5, 1.25),
            torque: Vector3::new(0.1, -0.2, 0.3),
        };
        let x = step(&s, &a, 0.91, &cfg).unwrap();
        let y = step(&s, &a, 0.91, &cfg).unwrap();
        assert_eq!(x.to_array().map(f64::to_bits), y.to_array().map(f64::to_bits));
    }

    #[test]
    fn step_rejects_bad_inputs() {
        let cfg = SimConfig::default();
        let mut s = ChaserState::default();
        assert!(step(&s, &Action::default(), 0.0, &cfg).is_err());
        let big = Action { thrust: Vector3::new(cfg.thrust_max * 2.0, 0.0, 0.0), ..Default::default() };
        assert!(step(&s, &big, 1.0, &cfg).is_err());
        s.r.x = f64::NAN;
        assert!(matches!(step(&s, &Action::default(), 1.0, &cfg), Err(Error::Propagation(_))));
    }

    #[test]
    fn initial_conditions_respect_table_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2000 {
            let s = sample_initial(InitMode::Same, &mut rng);
            assert!((-26.0..=-24.0).contains(&s.r.y));
            assert!(s.r.x.abs() <= 1.0 && s.r.z.abs() <= 1.0);
            assert!(s.boresight().dot(&(-s.r.normalize())) > 0.999);
            assert_eq!(s.v, Vector3::zeros());
            assert_eq!(s.w, Vector3::zeros());
            let s = sample_initial(InitMode::Random, &mut rng);
            assert!((s.r - Vector3::new(0.0, -25.0, 0.0)).amax() <= 2.5);
            assert!(s.boresight().dot(&(-s.r.normalize())) > 0.999);
        }
    }

    #[test]
    fn dt_sampling() {
        let cfg = SimConfig { dt_std: 0.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(sample_dt(&cfg, &mut rng), 0.89);

        let cfg = SimConfig::default();
        let draws: Vec<f64> = (0..10_000).map(|_| sample_dt(&cfg, &mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 0.89).abs() < 0.01);
        assert!(draws.iter().all(|d| (0.50..=1.28).contains(d)));
    }

    #[test]
    fn config_validation_names_fields() {
        let mut cfg = SimConfig::default();
        cfg.inertia[0][1] = 1.0;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("sim.inertia"), "{err}");
        let cfg = SimConfig { horizon: 0, ..Default::default() };
        assert!(cfg.validate().unwrap_err().to_string().contains("sim.horizon"));
        let cfg = SimConfig { inertia: [[1.0, 2.0, 0.0], [2.0, 1.0, 0.0], [0.0, 0.0, 1.0]], ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn state_array_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = sample_initial(InitMode::Random, &mut rng);
        let back = ChaserState::from_array(&s.to_array());
        assert_eq!(back.to_array(), s.to_array());
    }
}
