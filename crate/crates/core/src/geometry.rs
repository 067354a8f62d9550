//! Particle motion in a flowing cylindrical vessel.
//!
//! The vessel axis is `x`; the point transmitter sits on the axis at the
//! origin and the absorbing receiver is the disk `x = distance`,
//! `sqrt(y^2 + z^2) <= receiver_radius`. The side wall is reflecting and the
//! vessel is unbounded upstream. Each time step displaces a molecule by
//! `v_f * dt` along the axis plus an independent `N(0, 2 D dt)` on every axis.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Vessel geometry and transport parameters. Lengths in µm, time in s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentConfig {
    pub channel_radius: f64,
    pub receiver_radius: f64,
    /// Transmitter-to-receiver distance along the axis.
    pub distance: f64,
    /// µm²/s
    pub diffusion_coeff: f64,
    /// µm/s, toward the receiver.
    pub flow_velocity: f64,
    pub time_step: f64,
    pub rng_seed: u64,
    #[serde(default)]
    pub hit_detection: HitDetection,
}

/// How absorption is detected within a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HitDetection {
    /// Absorb only when the step ends at or beyond the receiver plane.
    StepEnd,
    /// Also absorb, with the Brownian-bridge probability
    /// `exp(-2 (d - x0)(d - x1) / (2 D dt))`, paths that crossed the plane
    /// and came back within the step. Removes the `O(sqrt(dt))` delay of
    /// step-end detection. The hit is still stamped at the step end.
    #[default]
    BrownianBridge,
}

impl Default for EnvironmentConfig {
    fn default() -> Self {
        Self {
            channel_radius: 5.0,
            receiver_radius: 5.0,
            distance: 6.0,
            diffusion_coeff: 100.0,
            flow_velocity: 0.0,
            time_step: DESK_TIME_STEP,
            rng_seed: 0,
            hit_detection: HitDetection::default(),
        }
    }
}

/// Default time step for desk-scale runs.
pub const DESK_TIME_STEP: f64 = 1e-4;
/// The 0.1 µs step of the full-fidelity setup.
pub const TABLE1_TIME_STEP: f64 = 1e-7;

impl EnvironmentConfig {
    /// A 5 µm vessel whose receiver covers the whole cross-section.
    pub fn vessel(distance: f64, diffusion_coeff: f64, flow_velocity: f64) -> Self {
        Self {
            distance,
            diffusion_coeff,
            flow_velocity,
            ..Self::default()
        }
    }

    pub fn with_time_step(mut self, time_step: f64) -> Self {
        self.time_step = time_step;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channel_radius", self.channel_radius),
            ("receiver_radius", self.receiver_radius),
            ("distance", self.distance),
            ("time_step", self.time_step),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::config(
                    format!("environment.{name}"),
                    format!("must be finite and > 0, got {value}"),
                ));
            }
        }
        if self.receiver_radius > self.channel_radius {
            return Err(Error::config(
                "environment.receiver_radius",
                "must not exceed channel_radius",
            ));
        }
        // D = 0 is admitted so that drift-only (deterministic) channels can be
        // configured; first_passage_cdf_1d still requires D > 0.
        for (name, value) in [
            ("diffusion_coeff", self.diffusion_coeff),
            ("flow_velocity", self.flow_velocity),
        ] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(Error::config(
                    format!("environment.{name}"),
                    format!("must be finite and >= 0, got {value}"),
                ));
            }
        }
        Ok(())
    }

    /// True when the receiver disk covers the full vessel cross-section, so
    /// absorption depends on the axial coordinate alone.
    pub fn receiver_spans_channel(&self) -> bool {
        self.receiver_radius >= self.channel_radius
    }

    /// Standard deviation of the per-axis diffusive displacement, `sqrt(2 D dt)`.
    pub fn step_sigma(&self) -> f64 {
        (2.0 * self.diffusion_coeff * self.time_step).sqrt()
    }

    /// Number of whole steps that fit in `t_max`.
    pub fn steps_within(&self, t_max: f64) -> u64 {
        (t_max / self.time_step + 1e-9).floor() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Status {
    Alive,
    Absorbed { hit_time: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    pub position: [f64; 3],
    pub status: Status,
}

impl Particle {
    /// A fresh molecule at the transmitter.
    pub fn at_transmitter() -> Self {
        Self {
            position: [0.0; 3],
            status: Status::Alive,
        }
    }

    pub fn at(position: [f64; 3]) -> Self {
        Self {
            position,
            status: Status::Alive,
        }
    }

    pub fn is_alive(&self) -> bool {
        matches!(self.status, Status::Alive)
    }

    pub fn radial(&self) -> f64 {
        self.position[1].hypot(self.position[2])
    }
}

/// One absorbed molecule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HitRecord {
    pub hit_time: f64,
    pub emission_index: u64,
}

/// Fold a cross-sectional position back inside the wall circle.
///
/// The radial excess is mirrored about the wall (`r -> 2 r_ch - r`) with the
/// polar angle kept; a fold that passes through the axis continues on the
/// opposite side. Repeats until `r <= r_ch`.
pub fn reflect_radial(y: f64, z: f64, channel_radius: f64) -> (f64, f64) {
    let r = y.hypot(z);
    if r <= channel_radius {
        return (y, z);
    }
    let mut signed = r;
    while signed.abs() > channel_radius {
        let folded = 2.0 * channel_radius - signed.abs();
        signed = if signed < 0.0 { -folded } else { folded };
    }
    let scale = signed / r;
    (y * scale, z * scale)
}

/// Apply a displacement to a live particle, then resolve the wall and the
/// receiver plane. `step_end` is the time stamped on an absorption; `rng`
/// is consulted only for the bridge crossing test.
pub fn advance<R: Rng + ?Sized>(
    p: Particle,
    env: &EnvironmentConfig,
    displacement: [f64; 3],
    step_end: f64,
    rng: &mut R,
) -> Particle {
    if !p.is_alive() {
        return p;
    }
    let x0 = p.position[0];
    let mut x = x0 + displacement[0];
    let (y, z) = reflect_radial(
        p.position[1] + displacement[1],
        p.position[2] + displacement[2],
        env.channel_radius,
    );
    let on_receiver = y.hypot(z) <= env.receiver_radius;
    if x >= env.distance {
        if on_receiver {
            return Particle {
                position: [x, y, z],
                status: Status::Absorbed { hit_time: step_end },
            };
        }
        // Outside a partial receiver disk the end face reflects.
        x = (2.0 * env.distance - x).min(prev_float(env.distance));
    } else if on_receiver
        && env.hit_detection == HitDetection::BrownianBridge
        && bridge_crossed(env.distance - x0, env.distance - x, env.step_sigma(), rng)
    {
        return Particle {
            position: [x, y, z],
            status: Status::Absorbed { hit_time: step_end },
        };
    }
    Particle {
        position: [x, y, z],
        status: Status::Alive,
    }
}

/// Brownian-bridge test for an unseen excursion past the plane. `gap_start`
/// and `gap_end` are the (positive) distances to the plane at the two step
/// ends, `sigma` the per-step displacement deviation.
#[inline]
fn bridge_crossed<R: Rng + ?Sized>(gap_start: f64, gap_end: f64, sigma: f64, rng: &mut R) -> bool {
    let exponent = 2.0 * gap_start * gap_end / (sigma * sigma);
    // beyond 40 the probability is below 5e-18
    exponent < 40.0 && rng.random::<f64>() < (-exponent).exp()
}

fn prev_float(v: f64) -> f64 {
    f64::from_bits(v.to_bits() - 1)
}

/// One drift-diffusion step of length `env.time_step` ending at `step_end`.
pub fn step_particle<R: Rng + ?Sized>(
    p: Particle,
    env: &EnvironmentConfig,
    rng: &mut R,
    step_end: f64,
) -> Particle {
    if !p.is_alive() {
        return p;
    }
    let sigma = env.step_sigma();
    let dx: f64 = rng.sample(StandardNormal);
    let dy: f64 = rng.sample(StandardNormal);
    let dz: f64 = rng.sample(StandardNormal);
    let displacement = [
        env.flow_velocity * env.time_step + sigma * dx,
        sigma * dy,
        sigma * dz,
    ];
    advance(p, env, displacement, step_end, rng)
}

/// Release `n` molecules at `t = 0` and follow each until it is absorbed or
/// `t_max` elapses. Returns one record per absorbed molecule, in release order.
pub fn simulate_emission<R: Rng + ?Sized>(
    n: u64,
    env: &EnvironmentConfig,
    t_max: f64,
    rng: &mut R,
) -> Result<Vec<HitRecord>> {
    if n == 0 {
        return Err(Error::InvalidArgument("emission size must be > 0".into()));
    }
    if !(t_max > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "t_max must be > 0, got {t_max}"
        )));
    }
    env.validate()?;
    let steps = env.steps_within(t_max);
    let mut hits = Vec::new();
    if env.diffusion_coeff == 0.0 && env.flow_velocity == 0.0 {
        return Ok(hits);
    }
    if env.receiver_spans_channel() {
        // Transverse motion cannot influence absorption here, so only the
        // axial coordinate is walked.
        let walk = AxialWalk::new(env);
        for _ in 0..n {
            let mut x = 0.0;
            for s in 1..=steps {
                let xi: f64 = rng.sample(StandardNormal);
                if walk.step(&mut x, walk.drift + walk.sigma * xi, rng) {
                    hits.push(HitRecord {
                        hit_time: s as f64 * env.time_step,
                        emission_index: 0,
                    });
                    break;
                }
            }
        }
    } else {
        for _ in 0..n {
            let mut p = Particle::at_transmitter();
            for s in 1..=steps {
                p = step_particle(p, env, rng, s as f64 * env.time_step);
                if let Status::Absorbed { hit_time } = p.status {
                    hits.push(HitRecord {
                        hit_time,
                        emission_index: 0,
                    });
                    break;
                }
            }
        }
    }
    Ok(hits)
}

/// Axial-only walker, valid when the receiver covers the cross-section.
struct AxialWalk {
    distance: f64,
    drift: f64,
    sigma: f64,
    bridge: bool,
}

impl AxialWalk {
    fn new(env: &EnvironmentConfig) -> Self {
        Self {
            distance: env.distance,
            drift: env.flow_velocity * env.time_step,
            sigma: env.step_sigma(),
            bridge: env.hit_detection == HitDetection::BrownianBridge,
        }
    }

    /// Move by `dx`; true if the molecule was absorbed during the step.
    #[inline]
    fn step<R: Rng + ?Sized>(&self, x: &mut f64, dx: f64, rng: &mut R) -> bool {
        let start = *x;
        *x += dx;
        *x >= self.distance
            || (self.bridge
                && bridge_crossed(self.distance - start, self.distance - *x, self.sigma, rng))
    }
}

/// Run the same `n` Brownian paths at `time_step` and at `time_step / 2`.
///
/// Each coarse increment is split into two fine increments with a Brownian
/// bridge, so the fine walk is an exact `dt / 2` walk that refines the coarse
/// one. Differences between the two hit lists then reflect time
/// discretization rather than sampling noise.
pub fn simulate_emission_halved<R: Rng + ?Sized>(
    n: u64,
    env: &EnvironmentConfig,
    t_max: f64,
    rng: &mut R,
) -> Result<(Vec<HitRecord>, Vec<HitRecord>)> {
    if n == 0 || !(t_max > 0.0) {
        return Err(Error::InvalidArgument(
            "emission size and t_max must be positive".into(),
        ));
    }
    env.validate()?;
    let fine_env = env.with_time_step(env.time_step / 2.0);
    let steps = env.steps_within(t_max);
    let dt = env.time_step;
    let sigma_c = env.step_sigma();
    let sigma_f = fine_env.step_sigma();
    let drift_c = env.flow_velocity * dt;
    let drift_f = drift_c / 2.0;
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let mut coarse_hits = Vec::new();
    let mut fine_hits = Vec::new();
    let record = |list: &mut Vec<HitRecord>, hit_time: f64| {
        list.push(HitRecord {
            hit_time,
            emission_index: 0,
        })
    };
    if env.receiver_spans_channel() {
        let coarse_walk = AxialWalk::new(env);
        let fine_walk = AxialWalk::new(&fine_env);
        for _ in 0..n {
            let (mut xc, mut xf) = (0.0, 0.0);
            let (mut coarse_alive, mut fine_alive) = (true, true);
            for s in 1..=steps {
                if !coarse_alive && !fine_alive {
                    break;
                }
                let xi: f64 = rng.sample(StandardNormal);
                let eta: f64 = rng.sample(StandardNormal);
                let t_end = s as f64 * dt;
                if coarse_alive && coarse_walk.step(&mut xc, drift_c + sigma_c * xi, rng) {
                    coarse_alive = false;
                    record(&mut coarse_hits, t_end);
                }
                if fine_alive {
                    let first = drift_f + sigma_f * h * (xi + eta);
                    let second = drift_f + sigma_f * h * (xi - eta);
                    if fine_walk.step(&mut xf, first, rng) {
                        fine_alive = false;
                        record(&mut fine_hits, t_end - dt / 2.0);
                    } else if fine_walk.step(&mut xf, second, rng) {
                        fine_alive = false;
                        record(&mut fine_hits, t_end);
                    }
                }
            }
        }
        return Ok((coarse_hits, fine_hits));
    }
    for _ in 0..n {
        let mut coarse = Particle::at_transmitter();
        let mut fine = Particle::at_transmitter();
        for s in 1..=steps {
            if !coarse.is_alive() && !fine.is_alive() {
                break;
            }
            let mut xi = [0.0; 3];
            let mut eta = [0.0; 3];
            for a in 0..3 {
                xi[a] = rng.sample(StandardNormal);
                eta[a] = rng.sample(StandardNormal);
            }
            let t_end = s as f64 * dt;
            if coarse.is_alive() {
                let d = [drift_c + sigma_c * xi[0], sigma_c * xi[1], sigma_c * xi[2]];
                coarse = advance(coarse, env, d, t_end, rng);
                if let Status::Absorbed { hit_time } = coarse.status {
                    record(&mut coarse_hits, hit_time);
                }
            }
            if fine.is_alive() {
                let first = [
                    drift_f + sigma_f * h * (xi[0] + eta[0]),
                    sigma_f * h * (xi[1] + eta[1]),
                    sigma_f * h * (xi[2] + eta[2]),
                ];
                fine = advance(fine, &fine_env, first, t_end - dt / 2.0, rng);
                if fine.is_alive() {
                    let second = [
                        drift_f + sigma_f * h * (xi[0] - eta[0]),
                        sigma_f * h * (xi[1] - eta[1]),
                        sigma_f * h * (xi[2] - eta[2]),
                    ];
                    fine = advance(fine, &fine_env, second, t_end, rng);
                }
                if let Status::Absorbed { hit_time } = fine.status {
                    record(&mut fine_hits, hit_time);
                }
            }
        }
    }
    Ok((coarse_hits, fine_hits))
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * std::f64::consts::FRAC_1_SQRT_2)
}

/// Probability that a 1-D Brownian particle with drift `v` toward an
/// absorbing plane at distance `d` has reached it by time `t`:
///
/// `F(t) = Phi((v t - d) / sqrt(2 D t)) + exp(v d / D) Phi(-(v t + d) / sqrt(2 D t))`.
pub fn first_passage_cdf_1d(d: f64, diffusion: f64, v: f64, t: f64) -> Result<f64> {
    if !(d > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "distance must be > 0, got {d}"
        )));
    }
    if !(diffusion > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "diffusion coefficient must be > 0, got {diffusion}"
        )));
    }
    if v < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "drift must be >= 0, got {v}"
        )));
    }
    if t <= 0.0 {
        return Ok(0.0);
    }
    let spread = (2.0 * diffusion * t).sqrt();
    let direct = normal_cdf((v * t - d) / spread);
    // exp(vd/D) * Phi(-w sqrt 2) with w = (vt + d) / sqrt(4 D t), combined in
    // log space where the exponential alone would overflow.
    let w = (v * t + d) / (4.0 * diffusion * t).sqrt();
    let gain = v * d / diffusion;
    let image = if gain < 600.0 && w < 20.0 {
        gain.exp() * 0.5 * libm::erfc(w)
    } else {
        0.5 * (gain - w * w).exp() * erfcx(w)
    };
    Ok((direct + image).clamp(0.0, 1.0))
}

/// Scaled complementary error function `exp(x^2) erfc(x)` for `x >= 0`.
fn erfcx(x: f64) -> f64 {
    if x < 2.0 {
        return (x * x).exp() * libm::erfc(x);
    }
    // Continued fraction: erfc(x) = exp(-x^2)/sqrt(pi) * 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))
    let mut tail = x;
    for k in (1..60).rev() {
        tail = x + (k as f64 / 2.0) / tail;
    }
    1.0 / (std::f64::consts::PI.sqrt() * tail)
}
