//! Antagonistic pneumatic-muscle joint simulation.
//!
//! One revolute joint driven by two thin McKibben muscles pulling against
//! each other through equal-and-opposite moment arms. Commanded pressures
//! arrive once per 100 ms control period; dynamics integrate in sub-steps
//! with semi-implicit Euler. Joint hysteresis comes from Coulomb stiction
//! resolved by velocity projection (Karnopp-style), which is rate
//! independent and strictly dissipative.
//!
//! Angles are degrees at the module boundary, radians internally.
//! Pressures are kPa at the boundary, converted to Pa for force math.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Control period between pressure commands, seconds.
pub const CONTROL_DT: f32 = 0.1;
/// Observation layout: angle, angular velocity, two pressures.
pub const OBS_DIM: usize = 4;
/// Number of muscles (and action dimension).
pub const NUM_MUSCLES: usize = 2;

const DEG: f32 = std::f32::consts::PI / 180.0;

#[derive(Debug, Error)]
pub enum PlantError {
    #[error("bad plant config: {0}")]
    BadConfig(String),
    #[error("muscle contraction ratio {0} not in [0,1)")]
    ContractionOutOfRange(f32),
    #[error("plant state became non-finite")]
    NonFiniteState,
    #[error("perturbation magnitude {0} outside [0, 0.3]")]
    BadPerturbMagnitude(f32),
}

/// Static parameters of one McKibben muscle.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct MuscleParams {
    /// Resting braid radius, m.
    pub r0_m: f32,
    /// Initial braid angle, rad; must lie in (0, pi/2).
    pub braid_rad: f32,
    /// Resting length, m.
    pub l0_m: f32,
    /// Moment arm at the joint, m.
    pub moment_arm_m: f32,
    /// First-order pressure response time constant, s.
    pub tau_p_s: f32,
    /// Supply pressure ceiling, kPa.
    pub p_max_kpa: f32,
    /// Coulomb friction force behind the hysteresis loop, N.
    pub c_h_n: f32,
}

impl MuscleParams {
    fn validate(&self) -> Result<(), PlantError> {
        let fields = [
            ("r0_m", self.r0_m),
            ("l0_m", self.l0_m),
            ("moment_arm_m", self.moment_arm_m),
            ("tau_p_s", self.tau_p_s),
            ("p_max_kpa", self.p_max_kpa),
        ];
        for (name, v) in fields {
            if !(v > 0.0) || !v.is_finite() {
                return Err(PlantError::BadConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if self.c_h_n < 0.0 || !self.c_h_n.is_finite() {
            return Err(PlantError::BadConfig(format!(
                "c_h_n must be non-negative, got {}",
                self.c_h_n
            )));
        }
        if !(self.braid_rad > 0.0 && self.braid_rad < std::f32::consts::FRAC_PI_2) {
            return Err(PlantError::BadConfig(format!(
                "braid angle {} rad outside (0, pi/2)",
                self.braid_rad
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PlantConfig {
    /// Index 0 pulls the joint positive (flexor), index 1 negative.
    pub muscles: [MuscleParams; 2],
    /// Link inertia about the joint, kg m^2.
    pub i_link: f32,
    /// Viscous joint damping, N m s.
    pub damping: f32,
    /// Gravity torque amplitude, N m; torque applied is -g cos(theta).
    pub gravity_tau: f32,
    /// Hard stop angles, deg.
    pub stop_lo_deg: f32,
    pub stop_hi_deg: f32,
    /// Integration sub-step, s; must divide the 100 ms control period.
    pub dt_inner_s: f32,
    /// Sensor noise standard deviations.
    pub noise_angle_deg: f32,
    pub noise_vel_dps: f32,
    pub noise_pressure_kpa: f32,
    /// Seed for the sensor/reset random stream.
    pub seed: u64,
}

impl Default for MuscleParams {
    fn default() -> Self {
        MuscleParams {
            r0_m: 1.25e-3,
            braid_rad: 25.0 * DEG,
            l0_m: 0.15,
            moment_arm_m: 0.01,
            tau_p_s: 0.15,
            p_max_kpa: 500.0,
            c_h_n: 0.25,
        }
    }
}

impl Default for PlantConfig {
    fn default() -> Self {
        PlantConfig {
            muscles: [MuscleParams::default(); 2],
            i_link: 2e-4,
            damping: 1e-3,
            gravity_tau: 5e-3,
            stop_lo_deg: -30.0,
            stop_hi_deg: 45.0,
            dt_inner_s: 5e-3,
            noise_angle_deg: 0.3,
            noise_vel_dps: 1.0,
            noise_pressure_kpa: 2.0,
            seed: 0,
        }
    }
}

impl PlantConfig {
    pub fn validate(&self) -> Result<(), PlantError> {
        for m in &self.muscles {
            m.validate()?;
        }
        if !(self.i_link > 0.0) {
            return Err(PlantError::BadConfig(format!("i_link must be positive, got {}", self.i_link)));
        }
        if self.damping < 0.0 || self.gravity_tau < 0.0 {
            return Err(PlantError::BadConfig("damping and gravity_tau must be non-negative".into()));
        }
        if self.stop_lo_deg >= self.stop_hi_deg {
            return Err(PlantError::BadConfig(format!(
                "hard stops inverted: [{}, {}]",
                self.stop_lo_deg, self.stop_hi_deg
            )));
        }
        if !(self.dt_inner_s > 0.0) {
            return Err(PlantError::BadConfig("dt_inner_s must be positive".into()));
        }
        let steps = CONTROL_DT / self.dt_inner_s;
        if (steps - steps.round()).abs() > 1e-4 || steps < 1.0 {
            return Err(PlantError::BadConfig(format!(
                "dt_inner_s {} does not divide the {} s control period",
                self.dt_inner_s, CONTROL_DT
            )));
        }
        if self.noise_angle_deg < 0.0 || self.noise_vel_dps < 0.0 || self.noise_pressure_kpa < 0.0 {
            return Err(PlantError::BadConfig("noise stds must be non-negative".into()));
        }
        Ok(())
    }

    /// Supply ceiling used for normalization and action bounds, kPa.
    pub fn p_max(&self) -> f32 {
        self.muscles[0].p_max_kpa.max(self.muscles[1].p_max_kpa)
    }

    pub fn without_noise(&self) -> PlantConfig {
        PlantConfig {
            noise_angle_deg: 0.0,
            noise_vel_dps: 0.0,
            noise_pressure_kpa: 0.0,
            ..*self
        }
    }
}

/// Commanded pressures, kPa, one per muscle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action {
    pub pressures_kpa: [f32; NUM_MUSCLES],
}

/// Noisy sensor readout: 2n + m values for n=1 joint, m=2 muscles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub angle_deg: f32,
    pub vel_dps: f32,
    pub pressures_kpa: [f32; NUM_MUSCLES],
}

impl Observation {
    pub fn flatten(&self) -> [f32; OBS_DIM] {
        [self.angle_deg, self.vel_dps, self.pressures_kpa[0], self.pressures_kpa[1]]
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

/// True joint state (noise-free).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantState {
    pub angle_deg: f32,
    pub vel_dps: f32,
    pub pressures_kpa: [f32; NUM_MUSCLES],
    /// Coulomb friction force currently exerted, split per muscle, N.
    pub friction_n: [f32; NUM_MUSCLES],
}

impl PlantState {
    pub fn at_rest(angle_deg: f32) -> Self {
        PlantState {
            angle_deg,
            vel_dps: 0.0,
            pressures_kpa: [0.0; 2],
            friction_n: [0.0; 2],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.angle_deg.is_finite()
            && self.vel_dps.is_finite()
            && self.pressures_kpa.iter().all(|p| p.is_finite())
            && self.friction_n.iter().all(|f| f.is_finite())
    }
}

/// Static force of one muscle at gauge pressure `p_kpa` and contraction
/// ratio `eps`, braid model with a = 3/tan^2(theta0), b = 1/sin^2(theta0),
/// clamped at zero (a sleeve cannot push).
pub fn muscle_force(p_kpa: f32, eps: f32, m: &MuscleParams) -> Result<f32, PlantError> {
    if !(0.0..1.0).contains(&eps) {
        return Err(PlantError::ContractionOutOfRange(eps));
    }
    let t = m.braid_rad.tan();
    let s = m.braid_rad.sin();
    let a = 3.0 / (t * t);
    let b = 1.0 / (s * s);
    let p_pa = p_kpa * 1e3;
    let f = std::f32::consts::PI * m.r0_m * m.r0_m * p_pa * (a * (1.0 - eps) * (1.0 - eps) - b);
    Ok(f.max(0.0))
}

/// Exact first-order lag toward the commanded pressure over `dt`.
pub fn pressure_step(p_kpa: f32, p_cmd_kpa: f32, dt_s: f32, tau_p_s: f32) -> Result<f32, PlantError> {
    if !(dt_s > 0.0) {
        return Err(PlantError::BadConfig(format!("dt must be positive, got {dt_s}")));
    }
    Ok(p_kpa + (p_cmd_kpa - p_kpa) * (1.0 - (-dt_s / tau_p_s).exp()))
}

/// The plant: owns config, true state, and the sensor random stream.
pub struct Plant {
    cfg: PlantConfig,
    state: PlantState,
    rng: ChaCha8Rng,
    /// Count of control steps whose commanded action needed clamping.
    pub clamp_events: u64,
}

impl Plant {
    pub fn new(cfg: PlantConfig) -> Result<Self, PlantError> {
        cfg.validate()?;
        let mut plant = Plant {
            cfg,
            state: PlantState::at_rest(0.0),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            clamp_events: 0,
        };
        plant.reset(cfg.seed);
        Ok(plant)
    }

    pub fn config(&self) -> &PlantConfig {
        &self.cfg
    }

    pub fn state(&self) -> &PlantState {
        &self.state
    }

    /// Overwrites the true state (test and diagnostic hook).
    pub fn set_state(&mut self, state: PlantState) -> Result<(), PlantError> {
        if !state.is_finite() {
            return Err(PlantError::NonFiniteState);
        }
        self.state = state;
        Ok(())
    }

    /// Reseeds the sensor stream and draws a fresh rest state with the
    /// joint angle uniform in [-5, 5] degrees. Deterministic per seed.
    pub fn reset(&mut self, seed: u64) -> Observation {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        let angle = self.rng.gen_range(-5.0f32..5.0f32);
        self.state = PlantState::at_rest(angle);
        self.observe()
    }

    /// Contraction ratios of (flexor, extensor) at joint angle `theta_rad`.
    /// Pretension references each muscle's slack point to the far hard stop
    /// so ratios stay non-negative over the whole travel.
    fn contractions(&self, theta_rad: f32) -> (f32, f32) {
        let lo = self.cfg.stop_lo_deg * DEG;
        let hi = self.cfg.stop_hi_deg * DEG;
        let f = &self.cfg.muscles[0];
        let e = &self.cfg.muscles[1];
        let eps_f = f.moment_arm_m * (theta_rad - lo) / f.l0_m;
        let eps_e = e.moment_arm_m * (hi - theta_rad) / e.l0_m;
        (eps_f, eps_e)
    }

    /// Advances one 100 ms control period under `action` and returns the
    /// noisy observation plus whether the command needed clamping.
    pub fn step(&mut self, action: &Action) -> Result<(Observation, bool), PlantError> {
        if !self.state.is_finite() {
            return Err(PlantError::NonFiniteState);
        }
        let mut clamped = false;
        let mut cmd = [0.0f32; 2];
        for i in 0..2 {
            let p = action.pressures_kpa[i];
            if !p.is_finite() {
                return Err(PlantError::BadConfig(format!("commanded pressure {p} not finite")));
            }
            let lim = self.cfg.muscles[i].p_max_kpa;
            cmd[i] = p.clamp(0.0, lim);
            if cmd[i] != p {
                clamped = true;
            }
        }
        if clamped {
            self.clamp_events += 1;
        }

        let dt = self.cfg.dt_inner_s;
        let n_sub = (CONTROL_DT / dt).round() as usize;
        let inertia = self.cfg.i_link;
        let lo = self.cfg.stop_lo_deg * DEG;
        let hi = self.cfg.stop_hi_deg * DEG;

        let mut theta = self.state.angle_deg * DEG;
        let mut omega = self.state.vel_dps * DEG;

        for _ in 0..n_sub {
            for i in 0..2 {
                let m = &self.cfg.muscles[i];
                self.state.pressures_kpa[i] =
                    pressure_step(self.state.pressures_kpa[i], cmd[i], dt, m.tau_p_s)?
                        .clamp(0.0, m.p_max_kpa);
            }

            let (eps_f, eps_e) = self.contractions(theta);
            let ff = muscle_force(self.state.pressures_kpa[0], eps_f, &self.cfg.muscles[0])?;
            let fe = muscle_force(self.state.pressures_kpa[1], eps_e, &self.cfg.muscles[1])?;
            let torque = self.cfg.muscles[0].moment_arm_m * ff
                - self.cfg.muscles[1].moment_arm_m * fe
                - self.cfg.gravity_tau * theta.cos();

            // implicit viscous damping keeps the step contraction even for
            // large b: v' = (v + dt a) / (1 + dt b / I)
            let v1 = (omega + dt * torque / inertia) / (1.0 + dt * self.cfg.damping / inertia);

            // Coulomb stiction by velocity projection: remove up to dv_f of
            // speed, never crossing zero. Sticking zeroes the velocity.
            let tau_f = 0.5
                * (self.cfg.muscles[0].moment_arm_m * self.cfg.muscles[0].c_h_n
                    + self.cfg.muscles[1].moment_arm_m * self.cfg.muscles[1].c_h_n);
            let dv_f = dt * tau_f / inertia;
            let (v2, fric_torque) = if v1.abs() <= dv_f {
                // holding torque balances what the step tried to apply
                let hold = (torque - self.cfg.damping * v1).clamp(-tau_f, tau_f);
                (0.0, -hold)
            } else {
                (v1 - v1.signum() * dv_f, -v1.signum() * tau_f)
            };
            let arm_sum = self.cfg.muscles[0].moment_arm_m + self.cfg.muscles[1].moment_arm_m;
            self.state.friction_n = [fric_torque / arm_sum, fric_torque / arm_sum];

            omega = v2;
            theta += dt * omega;
            if theta <= lo {
                theta = lo;
                if omega < 0.0 {
                    omega = 0.0;
                }
            } else if theta >= hi {
                theta = hi;
                if omega > 0.0 {
                    omega = 0.0;
                }
            }
        }

        self.state.angle_deg = theta / DEG;
        self.state.vel_dps = omega / DEG;
        if !self.state.is_finite() {
            return Err(PlantError::NonFiniteState);
        }
        Ok((self.observe(), clamped))
    }

    fn observe(&mut self) -> Observation {
        let mut gauss = |std: f32| -> f32 {
            if std == 0.0 {
                // keep the stream advancing identically with and without
                // noise so noiseless configs stay comparable seed-for-seed
                let _: f32 = self.rng.sample(StandardNormal);
                0.0
            } else {
                let z: f32 = self.rng.sample(StandardNormal);
                z * std
            }
        };
        Observation {
            angle_deg: self.state.angle_deg + gauss(self.cfg.noise_angle_deg),
            vel_dps: self.state.vel_dps + gauss(self.cfg.noise_vel_dps),
            pressures_kpa: [
                self.state.pressures_kpa[0] + gauss(self.cfg.noise_pressure_kpa),
                self.state.pressures_kpa[1] + gauss(self.cfg.noise_pressure_kpa),
            ],
        }
    }
}

/// Scales the geometry fields of both muscles by (1 + u), u uniform in
/// +-magnitude per field: braid radius, braid angle, resting length,
/// moment arm, friction coefficient. Pressure dynamics (tau_p, p_max),
/// timing, and seeds are untouched.
pub fn plant_perturb(cfg: &PlantConfig, magnitude: f32, seed: u64) -> Result<PlantConfig, PlantError> {
    if !(0.0..=0.3).contains(&magnitude) {
        return Err(PlantError::BadPerturbMagnitude(magnitude));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = *cfg;
    for m in out.muscles.iter_mut() {
        let mut jitter = |v: f32| -> f32 {
            let u: f32 = rng.gen_range(-magnitude..=magnitude);
            v * (1.0 + u)
        };
        m.r0_m = jitter(m.r0_m);
        m.braid_rad = jitter(m.braid_rad);
        m.l0_m = jitter(m.l0_m);
        m.moment_arm_m = jitter(m.moment_arm_m);
        m.c_h_n = jitter(m.c_h_n);
    }
    out.validate()?;
    Ok(out)
}

/// Signed area of the (flexor pressure, angle) curve under a commanded
/// flexor pressure cycle, extensor held at 150 kPa. Quasi-static
/// diagnostic: sensor noise is disabled and the cycle should be slow.
/// Units: kPa * deg.
pub fn hysteresis_loop_area(cfg: &PlantConfig, pressure_cycle_kpa: &[f32]) -> Result<f32, PlantError> {
    if let (Some(first), Some(last)) = (pressure_cycle_kpa.first(), pressure_cycle_kpa.last()) {
        if (first - last).abs() > 1e-6 {
            return Err(PlantError::BadConfig(
                "pressure cycle must start and end at the same pressure".into(),
            ));
        }
    }
    let mut plant = Plant::new(cfg.without_noise())?;
    plant.reset(0);
    plant.set_state(PlantState::at_rest(0.0))?;
    // settle at the starting pressures first so the curve is a closed loop
    let p0 = pressure_cycle_kpa.first().copied().unwrap_or(0.0);
    for _ in 0..50 {
        plant.step(&Action { pressures_kpa: [p0, 150.0] })?;
    }
    let mut pts = Vec::with_capacity(pressure_cycle_kpa.len());
    for &p in pressure_cycle_kpa {
        plant.step(&Action { pressures_kpa: [p, 150.0] })?;
        let s = plant.state();
        pts.push((s.pressures_kpa[0], s.angle_deg));
    }
    // shoelace over the closed polygon
    let mut area = 0.0f64;
    for i in 0..pts.len() {
        let (x0, y0) = pts[i];
        let (x1, y1) = pts[(i + 1) % pts.len()];
        area += (x0 as f64) * (y1 as f64) - (x1 as f64) * (y0 as f64);
    }
    Ok((area * 0.5) as f32)
}

/// Symmetric triangular pressure command cycle `lo -> hi -> lo`, one
/// command per control step, `steps_per_leg` points each way.
pub fn triangle_cycle(lo_kpa: f32, hi_kpa: f32, steps_per_leg: usize) -> Vec<f32> {
    let mut cycle = Vec::with_capacity(2 * steps_per_leg + 1);
    for i in 0..steps_per_leg {
        cycle.push(lo_kpa + (hi_kpa - lo_kpa) * i as f32 / steps_per_leg as f32);
    }
    for i in 0..steps_per_leg {
        cycle.push(hi_kpa - (hi_kpa - lo_kpa) * i as f32 / steps_per_leg as f32);
    }
    cycle.push(lo_kpa);
    cycle
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(cfg: PlantConfig) -> PlantConfig {
        cfg.without_noise()
    }

    #[test]
    fn muscle_force_zero_pressure() {
        let m = MuscleParams::default();
        assert_eq!(muscle_force(0.0, 0.2, &m).unwrap(), 0.0);
    }

    #[test]
    fn muscle_force_zero_at_max_contraction() {
        let m = MuscleParams::default();
        let t = m.braid_rad.tan();
        let s = m.braid_rad.sin();
        let a = 3.0 / (t * t);
        let b = 1.0 / (s * s);
        let eps_max = 1.0 - (b / a).sqrt();
        let f = muscle_force(250.0, eps_max, &m).unwrap();
        assert!(f.abs() < 1e-3, "force at max contraction {}", f);
    }

    #[test]
    fn muscle_force_closed_form_at_zero_contraction() {
        let m = MuscleParams::default();
        let t = m.braid_rad.tan();
        let s = m.braid_rad.sin();
        let a = 3.0 / (t * t);
        let b = 1.0 / (s * s);
        let want = std::f32::consts::PI * m.r0_m * m.r0_m * 100.0e3 * (a - b);
        let got = muscle_force(100.0, 0.0, &m).unwrap();
        assert!((got - want).abs() < 1e-4 * want, "{} vs {}", got, want);
    }

    #[test]
    fn muscle_force_rejects_eps_one() {
        let m = MuscleParams::default();
        assert!(matches!(
            muscle_force(100.0, 1.0, &m),
            Err(PlantError::ContractionOutOfRange(_))
        ));
    }

    #[test]
    fn pressure_step_fixed_point_and_limit() {
        assert_eq!(pressure_step(120.0, 120.0, 0.005, 0.15).unwrap(), 120.0);
        let p = pressure_step(0.0, 400.0, 10.0, 0.15).unwrap();
        assert!((p - 400.0).abs() < 4.0, "p after long dt {}", p);
    }

    #[test]
    fn pressure_step_half_life() {
        let tau = 0.15f32;
        let p = pressure_step(100.0, 300.0, tau * std::f32::consts::LN_2, tau).unwrap();
        assert!((p - 200.0).abs() < 1e-3, "halfway point {}", p);
    }

    #[test]
    fn pressure_step_rejects_nonpositive_dt() {
        assert!(pressure_step(0.0, 100.0, 0.0, 0.15).is_err());
    }

    #[test]
    fn symmetric_pressures_keep_zero_angle() {
        let mut cfg = quiet(PlantConfig::default());
        cfg.gravity_tau = 0.0;
        cfg.stop_lo_deg = -45.0; // symmetric stops for a symmetric plant
        cfg.stop_hi_deg = 45.0;
        let mut plant = Plant::new(cfg).unwrap();
        plant.set_state(PlantState::at_rest(0.0)).unwrap();
        for _ in 0..100 {
            plant.step(&Action { pressures_kpa: [200.0, 200.0] }).unwrap();
            assert!(
                plant.state().angle_deg.abs() < 1e-4,
                "angle drifted to {}",
                plant.state().angle_deg
            );
        }
    }

    #[test]
    fn zero_pressure_zero_gravity_is_fixed_point() {
        let mut cfg = quiet(PlantConfig::default());
        cfg.gravity_tau = 0.0;
        let mut plant = Plant::new(cfg).unwrap();
        plant.set_state(PlantState::at_rest(7.0)).unwrap();
        for _ in 0..50 {
            plant.step(&Action { pressures_kpa: [0.0, 0.0] }).unwrap();
        }
        assert!((plant.state().angle_deg - 7.0).abs() < 1e-9);
        assert_eq!(plant.state().vel_dps, 0.0);
    }

    #[test]
    fn flexor_step_drives_angle_up_to_equilibrium() {
        let mut plant = Plant::new(quiet(PlantConfig::default())).unwrap();
        plant.set_state(PlantState::at_rest(0.0)).unwrap();
        let mut last = 0.0f32;
        let mut history = Vec::new();
        for _ in 0..80 {
            plant.step(&Action { pressures_kpa: [200.0, 0.0] }).unwrap();
            history.push(plant.state().angle_deg);
            last = plant.state().angle_deg;
        }
        assert!(last > 5.0, "equilibrium angle {last}");
        // settles: last ten steps nearly constant
        let tail = &history[70..];
        let spread = tail.iter().cloned().fold(f32::MIN, f32::max)
            - tail.iter().cloned().fold(f32::MAX, f32::min);
        assert!(spread < 0.05, "still moving near the end: spread {spread}");
        // rise is monotone up to the first near-equilibrium step
        for w in history[..40].windows(2) {
            assert!(w[1] >= w[0] - 1e-4, "non-monotone rise: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn reset_is_deterministic_and_bounded() {
        let mut plant = Plant::new(PlantConfig::default()).unwrap();
        let a = plant.reset(42);
        let sa = *plant.state();
        let b = plant.reset(42);
        let sb = *plant.state();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        let c = plant.reset(43);
        assert_ne!(b, c);
        for seed in 0..1000 {
            plant.reset(seed);
            let th = plant.state().angle_deg;
            assert!((-5.0..=5.0).contains(&th), "reset angle {th}");
            assert_eq!(plant.state().vel_dps, 0.0);
            assert_eq!(plant.state().pressures_kpa, [0.0, 0.0]);
        }
    }

    #[test]
    fn trajectories_bitwise_deterministic() {
        let cfg = PlantConfig::default();
        let run = || {
            let mut plant = Plant::new(cfg).unwrap();
            plant.reset(9);
            let mut out = Vec::new();
            for t in 0..200 {
                let a = Action {
                    pressures_kpa: [100.0 + (t as f32 * 0.37).sin() * 80.0, 120.0],
                };
                let (obs, _) = plant.step(&a).unwrap();
                out.push((
                    plant.state().angle_deg.to_bits(),
                    plant.state().vel_dps.to_bits(),
                    obs.angle_deg.to_bits(),
                ));
            }
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn pressures_stay_in_bounds_under_wild_commands() {
        let mut plant = Plant::new(PlantConfig::default()).unwrap();
        plant.reset(3);
        let p_max = plant.config().p_max();
        let wild = [-500.0f32, 1500.0, 250.0, 0.0, 9000.0, -1.0];
        for (t, &w) in wild.iter().cycle().take(120).enumerate() {
            let (_, _clamped) = plant
                .step(&Action { pressures_kpa: [w, wild[(t + 3) % wild.len()]] })
                .unwrap();
            for p in plant.state().pressures_kpa {
                assert!((0.0..=p_max).contains(&p), "pressure {p} out of bounds");
            }
        }
        assert!(plant.clamp_events > 0);
    }

    #[test]
    fn kinetic_energy_non_increasing_when_unpowered() {
        let mut cfg = quiet(PlantConfig::default());
        cfg.gravity_tau = 0.0;
        let mut plant = Plant::new(cfg).unwrap();
        plant
            .set_state(PlantState {
                angle_deg: 0.0,
                vel_dps: 300.0,
                pressures_kpa: [0.0, 0.0],
                friction_n: [0.0, 0.0],
            })
            .unwrap();
        let mut prev = f32::MAX;
        for _ in 0..60 {
            plant.step(&Action { pressures_kpa: [0.0, 0.0] }).unwrap();
            let w = plant.state().vel_dps * DEG;
            let ke = 0.5 * plant.config().i_link * w * w;
            assert!(ke <= prev + 1e-12, "kinetic energy rose: {prev} -> {ke}");
            prev = ke;
        }
        assert!(prev < 1e-9, "did not come to rest: KE {prev}");
    }

    #[test]
    fn antagonistic_mirror_negates_the_trajectory() {
        let mut cfg = quiet(PlantConfig::default());
        cfg.seed = 5;
        let mut mirror = cfg;
        mirror.muscles.swap(0, 1);
        mirror.gravity_tau = -cfg.gravity_tau; // part of the mirror map
        mirror.stop_lo_deg = -cfg.stop_hi_deg;
        mirror.stop_hi_deg = -cfg.stop_lo_deg;

        // gravity_tau is validated non-negative; bypass via raw struct and
        // assert the config still passes the rest of validation
        assert!(mirror.stop_lo_deg < mirror.stop_hi_deg);

        let mut a = Plant::new(cfg).unwrap();
        let mut b = Plant {
            cfg: mirror,
            state: PlantState::at_rest(0.0),
            rng: ChaCha8Rng::seed_from_u64(5),
            clamp_events: 0,
        };
        a.set_state(PlantState::at_rest(4.0)).unwrap();
        b.set_state(PlantState::at_rest(-4.0)).unwrap();

        for t in 0..150 {
            let p1 = 120.0 + 100.0 * ((t as f32) * 0.21).sin().abs();
            let p2 = 90.0 + 60.0 * ((t as f32) * 0.13).cos().abs();
            a.step(&Action { pressures_kpa: [p1, p2] }).unwrap();
            b.step(&Action { pressures_kpa: [p2, p1] }).unwrap();
            let sum = a.state().angle_deg + b.state().angle_deg;
            assert!(sum.abs() < 1e-6, "mirror broke at step {t}: sum {sum}");
        }
    }

    #[test]
    fn hysteresis_loop_area_zero_iff_frictionless() {
        let cfg = PlantConfig::default();
        let cycle = triangle_cycle(50.0, 350.0, 150);

        let mut no_fric = cfg;
        no_fric.muscles[0].c_h_n = 0.0;
        no_fric.muscles[1].c_h_n = 0.0;
        let a0 = hysteresis_loop_area(&no_fric, &cycle).unwrap();

        let a1 = hysteresis_loop_area(&cfg, &cycle).unwrap();

        let mut double = cfg;
        double.muscles[0].c_h_n *= 2.0;
        double.muscles[1].c_h_n *= 2.0;
        let a2 = hysteresis_loop_area(&double, &cycle).unwrap();

        // frictionless leaves only a small dynamic-lag loop; Coulomb
        // friction should dominate it and scale with the coefficient
        assert!(a1 > 5.0 * a0.abs(), "friction loop {a1} vs frictionless {a0}");
        assert!(a1 > 0.0, "loading branch should sit below unloading: area {a1}");
        assert!(a2 > 1.3 * a1, "doubling friction should widen the loop: {a1} -> {a2}");
    }

    #[test]
    fn perturb_zero_magnitude_is_identity() {
        let cfg = PlantConfig::default();
        let p = plant_perturb(&cfg, 0.0, 11).unwrap();
        assert_eq!(p, cfg);
    }

    #[test]
    fn perturb_is_reproducible_and_bounded() {
        let cfg = PlantConfig::default();
        let p1 = plant_perturb(&cfg, 0.1, 7).unwrap();
        let p2 = plant_perturb(&cfg, 0.1, 7).unwrap();
        assert_eq!(p1, p2);
        assert_ne!(p1, cfg);
        for (m0, m1) in cfg.muscles.iter().zip(p1.muscles.iter()) {
            assert!((m1.r0_m / m0.r0_m - 1.0).abs() <= 0.1 + 1e-6);
            assert!((m1.l0_m / m0.l0_m - 1.0).abs() <= 0.1 + 1e-6);
            assert_eq!(m1.tau_p_s, m0.tau_p_s);
            assert_eq!(m1.p_max_kpa, m0.p_max_kpa);
        }
    }

    #[test]
    fn perturb_rejects_out_of_range_magnitude() {
        let cfg = PlantConfig::default();
        assert!(matches!(
            plant_perturb(&cfg, 0.31, 0),
            Err(PlantError::BadPerturbMagnitude(_))
        ));
    }

    #[test]
    fn dt_must_divide_control_period() {
        let mut cfg = PlantConfig::default();
        cfg.dt_inner_s = 0.03;
        assert!(Plant::new(cfg).is_err());
    }
}
