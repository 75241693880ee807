//! Closed-loop plant: truth propagation with terrain traction and stem
//! contacts, and synthesis of GNSS, IMU/compass and 2-D LiDAR measurements.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::geometry::{wrap_angle, Point2};
use crate::model::{inverse_wheel, step, RobotState, TractionParams, VehicleConfig, WheelCommand};
use crate::rng::{substream, Stream};
use crate::world::{collision_query, gnss_quality_at, snag_contact, terrain_at, FieldMap};

pub const GRAVITY: f64 = 9.80665;

/// Sensor noise profile shared by the GNSS, IMU and LiDAR models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub gnss_open_sigma_m: f64,
    pub gnss_canopy_sigma_m: f64,
    /// Magnitude of the mean multipath offset under canopy.
    pub gnss_canopy_bias_m: f64,
    /// Direction of that offset in the world frame.
    pub gnss_canopy_bias_dir_rad: f64,
    /// Stationary standard deviation of the Gauss–Markov part of the bias.
    pub gnss_canopy_bias_jitter_m: f64,
    pub gnss_bias_tau_s: f64,
    pub gnss_canopy_dropout: f64,
    pub compass_sigma_rad: f64,
    /// Offset between compass and true heading.
    pub compass_offset_rad: f64,
    pub gyro_sigma: f64,
    pub accel_sigma: f64,
    pub lidar_sigma_m: f64,
    pub lidar_outlier_rate: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            gnss_open_sigma_m: 0.02,
            gnss_canopy_sigma_m: 0.05,
            gnss_canopy_bias_m: 0.25,
            gnss_canopy_bias_dir_rad: std::f64::consts::FRAC_PI_2,
            gnss_canopy_bias_jitter_m: 0.1,
            gnss_bias_tau_s: 30.0,
            gnss_canopy_dropout: 0.05,
            compass_sigma_rad: 0.02,
            compass_offset_rad: 0.05,
            gyro_sigma: 0.005,
            accel_sigma: 0.05,
            lidar_sigma_m: 0.01,
            lidar_outlier_rate: 0.01,
        }
    }
}

impl NoiseConfig {
    /// Every noise source switched off; the compass offset is kept.
    pub fn noiseless(&self) -> Self {
        Self {
            gnss_open_sigma_m: 0.0,
            gnss_canopy_sigma_m: 0.0,
            gnss_canopy_bias_m: 0.0,
            gnss_canopy_bias_jitter_m: 0.0,
            gnss_canopy_dropout: 0.0,
            compass_sigma_rad: 0.0,
            gyro_sigma: 0.0,
            accel_sigma: 0.0,
            lidar_sigma_m: 0.0,
            lidar_outlier_rate: 0.0,
            ..*self
        }
    }

    pub fn gnss_open(&self) -> crate::world::GnssQuality {
        crate::world::GnssQuality::open_sky(self.gnss_open_sigma_m)
    }

    pub fn gnss_canopy(&self) -> crate::world::GnssQuality {
        let (s, c) = self.gnss_canopy_bias_dir_rad.sin_cos();
        crate::world::GnssQuality {
            sigma: self.gnss_canopy_sigma_m,
            bias: [c * self.gnss_canopy_bias_m, s * self.gnss_canopy_bias_m],
            dropout_prob: self.gnss_canopy_dropout,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LidarConfig {
    pub beams: usize,
    pub fov_rad: f64,
    pub max_range_m: f64,
    pub min_range_m: f64,
    pub range_sigma_m: f64,
    /// Probability that a beam hitting a stem returns early from foliage.
    pub outlier_rate: f64,
}

impl Default for LidarConfig {
    fn default() -> Self {
        Self {
            beams: 540,
            fov_rad: 270f64.to_radians(),
            max_range_m: 10.0,
            min_range_m: 0.05,
            range_sigma_m: 0.01,
            outlier_rate: 0.0,
        }
    }
}

impl LidarConfig {
    pub fn beam_angle(&self, i: usize) -> f64 {
        -0.5 * self.fov_rad + i as f64 * self.increment()
    }

    fn increment(&self) -> f64 {
        self.fov_rad / (self.beams.max(2) - 1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Fraction of yaw traction left while pinned against a stem.
    pub stuck_yaw_factor: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            stuck_yaw_factor: 0.3,
        }
    }
}

/// Truth state of the plant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimState {
    pub truth: RobotState,
    pub stuck: bool,
    pub contact_normal: Option<Point2>,
    pub clock: f64,
    /// World-frame velocity over the last step (finite difference).
    pub velocity: Point2,
    /// Integrated path length of the truth pose.
    pub odometer: f64,
    /// Gauss–Markov component of the canopy GNSS bias.
    pub gnss_bias_walk: Point2,
}

impl SimState {
    pub fn at(truth: RobotState) -> Self {
        Self {
            truth,
            stuck: false,
            contact_normal: None,
            clock: 0.0,
            velocity: Point2::default(),
            odometer: 0.0,
            gnss_bias_walk: Point2::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GnssFix {
    pub z_x: f64,
    pub z_y: f64,
    pub valid: bool,
    pub timestamp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub omega_x: f64,
    pub omega_y: f64,
    pub omega_z: f64,
    pub a_x: f64,
    pub a_y: f64,
    pub a_z: f64,
    /// Compass heading (true heading minus the compass offset).
    pub z_theta: f64,
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PointCloud2D {
    pub points: Vec<Point2>,
    pub timestamp: f64,
}

fn gauss(rng: &mut impl Rng, sigma: f64) -> f64 {
    if sigma > 0.0 {
        let n: f64 = StandardNormal.sample(rng);
        sigma * n
    } else {
        0.0
    }
}

/// Advances the truth by `dt` under wheel command `w`.
///
/// A step whose end pose would intersect a stem is rejected (the robot stops
/// short of the contact, only rotation in place is kept when it is itself
/// collision-free) and the robot becomes stuck: zero forward traction and yaw
/// traction scaled by `stuck_yaw_factor`. It is released once the commanded
/// velocity has a positive component along the contact normal.
pub fn sim_step(
    s: &SimState,
    w: &WheelCommand,
    field: &FieldMap,
    cfg: &VehicleConfig,
    sim_cfg: &SimConfig,
    dt: f64,
) -> Result<SimState> {
    if !(dt > 0.0) {
        return domain(format!("simulation step must be positive, got {dt}"));
    }
    let u = inverse_wheel(w, cfg);
    let (mu_t, nu_t) = terrain_at(field, &s.truth.position());

    let mut stuck = s.stuck;
    let mut normal = s.contact_normal;
    if stuck {
        let (sn, cs) = s.truth.theta.sin_cos();
        let push = normal.map_or(1.0, |n| u.v * (cs * n.x + sn * n.y));
        if push > 0.0 {
            stuck = false;
            normal = None;
        }
    }
    let params = if stuck {
        TractionParams::new(0.0, nu_t * sim_cfg.stuck_yaw_factor, 0.0)
    } else {
        TractionParams::new(mu_t, nu_t, 0.0)
    };
    let candidate = step(&s.truth, &u, &params, dt)?;
    let report = collision_query(field, &candidate, cfg);
    let next = if report.colliding {
        stuck = true;
        normal = report.normal;
        let rotated = RobotState {
            theta: candidate.theta,
            ..s.truth
        };
        if collision_query(field, &rotated, cfg).colliding {
            s.truth
        } else {
            rotated
        }
    } else {
        candidate
    };

    let moved = next.position().sub(&s.truth.position());
    Ok(SimState {
        truth: next,
        stuck,
        contact_normal: normal,
        clock: s.clock + dt,
        velocity: moved.scale(1.0 / dt),
        odometer: s.odometer + moved.norm(),
        gnss_bias_walk: s.gnss_bias_walk,
    })
}

/// Evolves the Gauss–Markov GNSS bias over `dt`.
pub fn advance_gnss_bias(s: &mut SimState, noise: &NoiseConfig, dt: f64, rng: &mut impl Rng) {
    let sigma = noise.gnss_canopy_bias_jitter_m;
    if sigma <= 0.0 || noise.gnss_bias_tau_s <= 0.0 {
        s.gnss_bias_walk = Point2::default();
        return;
    }
    let a = (-dt / noise.gnss_bias_tau_s).exp();
    let q = sigma * (1.0 - a * a).max(0.0).sqrt();
    s.gnss_bias_walk = Point2::new(
        a * s.gnss_bias_walk.x + gauss(rng, q),
        a * s.gnss_bias_walk.y + gauss(rng, q),
    );
}

/// Draws a Gauss–Markov bias from its stationary distribution.
pub fn initial_gnss_bias(noise: &NoiseConfig, rng: &mut impl Rng) -> Point2 {
    let s = noise.gnss_canopy_bias_jitter_m;
    Point2::new(gauss(rng, s), gauss(rng, s))
}

/// GNSS fix at the current truth: zone bias (plus the Gauss–Markov walk under
/// canopy) and white noise; invalid with the zone's dropout probability.
pub fn sample_gnss(s: &SimState, field: &FieldMap, rng: &mut impl Rng) -> GnssFix {
    let p = s.truth.position();
    let (q, _) = gnss_quality_at(field, &p);
    let walk = if field.in_canopy(&p) {
        s.gnss_bias_walk
    } else {
        Point2::default()
    };
    let nx = gauss(rng, q.sigma);
    let ny = gauss(rng, q.sigma);
    let drop: f64 = rng.random();
    GnssFix {
        z_x: p.x + q.bias[0] + walk.x + nx,
        z_y: p.y + q.bias[1] + walk.y + ny,
        valid: !(drop < q.dropout_prob),
        timestamp: s.clock,
    }
}

/// IMU and compass sample from finite differences between `prev` and `s`.
/// Flat ground: no roll/pitch rates, specific force `+g` on the z axis.
pub fn sample_imu(
    s: &SimState,
    prev: &SimState,
    true_delta_theta: f64,
    noise: &NoiseConfig,
    rng: &mut impl Rng,
) -> ImuSample {
    let dt = s.clock - prev.clock;
    let (yaw_rate, accel) = if dt > 0.0 {
        (
            wrap_angle(s.truth.theta - prev.truth.theta) / dt,
            s.velocity.sub(&prev.velocity).scale(1.0 / dt),
        )
    } else {
        (0.0, Point2::default())
    };
    let body = accel.rotate(-s.truth.theta);
    ImuSample {
        omega_x: gauss(rng, noise.gyro_sigma),
        omega_y: gauss(rng, noise.gyro_sigma),
        omega_z: yaw_rate + gauss(rng, noise.gyro_sigma),
        a_x: body.x + gauss(rng, noise.accel_sigma),
        a_y: body.y + gauss(rng, noise.accel_sigma),
        a_z: GRAVITY + gauss(rng, noise.accel_sigma),
        z_theta: wrap_angle(s.truth.theta - true_delta_theta + gauss(rng, noise.compass_sigma_rad)),
        timestamp: s.clock,
    }
}

/// Planar scan: per-beam ray/disc intersection against every stem in range,
/// nearest hit wins, misses produce no point. Points are in the sensor (body)
/// frame, ordered by beam.
pub fn sample_lidar(s: &SimState, field: &FieldMap, cfg: &LidarConfig, rng: &mut impl Rng) -> PointCloud2D {
    let n = cfg.beams;
    let inc = cfg.increment();
    let lo = -0.5 * cfg.fov_rad;
    let mut ranges = vec![f64::INFINITY; n];
    let center = s.truth.position();
    let (sn, cs) = s.truth.theta.sin_cos();
    field.for_each_stem_near(&center, cfg.max_range_m + 0.5, |stem| {
        let d = stem.center.sub(&center);
        let cx = cs * d.x + sn * d.y;
        let cy = -sn * d.x + cs * d.y;
        let r = cx.hypot(cy);
        let rad = stem.radius;
        if r <= rad || r - rad > cfg.max_range_m {
            return;
        }
        let alpha = cy.atan2(cx);
        let half = (rad / r).asin();
        let first = ((alpha - half - lo) / inc).ceil().max(0.0);
        let last = ((alpha + half - lo) / inc).floor().min((n - 1) as f64);
        if first > last {
            return;
        }
        for i in first as usize..=last as usize {
            let delta = lo + i as f64 * inc - alpha;
            let perp = r * delta.sin();
            let disc = rad * rad - perp * perp;
            if disc < 0.0 {
                continue;
            }
            let t = r * delta.cos() - disc.sqrt();
            if t > 0.0 && t < ranges[i] {
                ranges[i] = t;
            }
        }
    });

    let mut points = Vec::new();
    for (i, &hit) in ranges.iter().enumerate() {
        if !hit.is_finite() {
            continue;
        }
        let mut range = hit;
        if cfg.outlier_rate > 0.0 && rng.random::<f64>() < cfg.outlier_rate {
            range = rng.random_range(cfg.min_range_m..=hit.max(cfg.min_range_m));
        }
        range += gauss(rng, cfg.range_sigma_m);
        if range < cfg.min_range_m || range > cfg.max_range_m {
            continue;
        }
        let a = lo + i as f64 * inc;
        points.push(Point2::new(range * a.cos(), range * a.sin()));
    }
    PointCloud2D {
        points,
        timestamp: s.clock,
    }
}

/// Plant plus its random streams, one per sensor.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub state: SimState,
    pub vehicle: VehicleConfig,
    pub sim_cfg: SimConfig,
    pub noise: NoiseConfig,
    pub lidar: LidarConfig,
    gnss_rng: ChaCha8Rng,
    bias_rng: ChaCha8Rng,
    imu_rng: ChaCha8Rng,
    lidar_rng: ChaCha8Rng,
    terrain_rng: ChaCha8Rng,
    last_bias_update: f64,
    snag_cleared: Vec<bool>,
    snag_contact: Option<usize>,
}

impl Simulator {
    pub fn new(
        start: RobotState,
        vehicle: VehicleConfig,
        sim_cfg: SimConfig,
        noise: NoiseConfig,
        lidar: LidarConfig,
        seed: u64,
    ) -> Self {
        let mut bias_rng = substream(seed, Stream::GnssBias);
        let mut state = SimState::at(start);
        state.gnss_bias_walk = initial_gnss_bias(&noise, &mut bias_rng);
        Self {
            state,
            vehicle,
            sim_cfg,
            noise,
            lidar,
            gnss_rng: substream(seed, Stream::Gnss),
            bias_rng,
            imu_rng: substream(seed, Stream::Imu),
            lidar_rng: substream(seed, Stream::Lidar),
            terrain_rng: substream(seed, Stream::Terrain),
            last_bias_update: 0.0,
            snag_cleared: Vec::new(),
            snag_contact: None,
        }
    }

    /// Advances the plant. On top of [`sim_step`], snags stop the robot
    /// like a stem does; each time the robot backs off one, the snag is
    /// dislodged with the field's release probability.
    pub fn step(&mut self, w: &WheelCommand, field: &FieldMap, dt: f64) -> Result<()> {
        let mut next = sim_step(&self.state, w, field, &self.vehicle, &self.sim_cfg, dt)?;
        if field.snags.is_empty() {
            self.state = next;
            return Ok(());
        }
        self.snag_cleared.resize(field.snags.len(), false);
        if let Some(i) = self.snag_contact {
            if !next.stuck {
                self.snag_contact = None;
                if self.terrain_rng.random::<f64>() < field.snag_release_prob {
                    self.snag_cleared[i] = true;
                }
            }
        }
        if self.snag_contact.is_none() {
            if let Some(i) = snag_contact(field, &next.truth, &self.vehicle, &self.snag_cleared) {
                let prev = &self.state;
                let normal = prev.truth.position().sub(&field.snags[i]);
                let n = normal.norm().max(1e-12);
                next.truth = RobotState {
                    theta: next.truth.theta,
                    ..prev.truth
                };
                next.stuck = true;
                next.contact_normal = Some(normal.scale(1.0 / n));
                next.velocity = Point2::default();
                next.odometer = prev.odometer;
                self.snag_contact = Some(i);
            }
        }
        self.state = next;
        Ok(())
    }

    /// Snags dislodged so far.
    pub fn snags_cleared(&self) -> usize {
        self.snag_cleared.iter().filter(|c| **c).count()
    }

    pub fn gnss(&mut self, field: &FieldMap) -> GnssFix {
        let dt = self.state.clock - self.last_bias_update;
        if dt > 0.0 {
            advance_gnss_bias(&mut self.state, &self.noise, dt, &mut self.bias_rng);
            self.last_bias_update = self.state.clock;
        }
        sample_gnss(&self.state, field, &mut self.gnss_rng)
    }

    pub fn imu(&mut self, prev: &SimState) -> ImuSample {
        sample_imu(
            &self.state,
            prev,
            self.noise.compass_offset_rad,
            &self.noise,
            &mut self.imu_rng,
        )
    }

    pub fn scan(&mut self, field: &FieldMap) -> PointCloud2D {
        sample_lidar(&self.state, field, &self.lidar, &mut self.lidar_rng)
    }

    /// Places the robot at `pose`, clearing any contact (used for resets).
    pub fn teleport(&mut self, pose: RobotState) {
        self.state.truth = pose;
        self.state.stuck = false;
        self.state.contact_normal = None;
        self.state.velocity = Point2::default();
        self.snag_contact = None;
    }
}
