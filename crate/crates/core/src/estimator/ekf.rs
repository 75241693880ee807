//! IMU-rate EKF over position, roll, pitch and yaw.
//!
//! The filter carries two extra body-frame velocity states used to integrate
//! the accelerometer; they are internal and not part of the published
//! estimate.

use nalgebra::{SMatrix, SVector, Matrix5, Vector5};

use crate::geometry::wrap_angle;
use crate::model::RobotState;
use crate::sim::{ImuSample, GRAVITY};

pub const N_EKF: usize = 7;
type Vec7 = SVector<f64, N_EKF>;
type Mat7 = SMatrix<f64, N_EKF, N_EKF>;

const IX: usize = 0;
const IY: usize = 1;
const IA: usize = 2;
const IB: usize = 3;
const IT: usize = 4;
const IU: usize = 5;
const IW: usize = 6;
const ANGLES: [usize; 3] = [IA, IB, IT];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EkfConfig {
    /// Continuous process noise densities.
    pub q_pos: f64,
    pub q_tilt: f64,
    pub q_yaw: f64,
    pub q_vel: f64,
    /// Measurement variances of the correction vector.
    pub r_pos: f64,
    pub r_tilt: f64,
    pub r_yaw: f64,
    pub p0_pose: f64,
    pub p0_vel: f64,
    /// Smoothing factor of the accelerometer tilt average per IMU sample.
    pub tilt_smoothing: f64,
}

impl Default for EkfConfig {
    fn default() -> Self {
        Self {
            q_pos: 1e-4,
            q_tilt: 1e-4,
            q_yaw: 1e-4,
            q_vel: 0.05,
            r_pos: 4e-4,
            r_tilt: 2.5e-3,
            r_yaw: 1e-3,
            p0_pose: 1e-2,
            p0_vel: 0.1,
            tilt_smoothing: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EkfState {
    pub x: Vec7,
    pub covariance: Mat7,
    pub timestamp: f64,
    /// Set when a correction produced a covariance that had to be repaired.
    pub repaired: bool,
}

impl EkfState {
    pub fn new(pose: &RobotState, roll: f64, pitch: f64, body_velocity: (f64, f64), timestamp: f64, cfg: &EkfConfig) -> Self {
        let x = Vec7::from_column_slice(&[
            pose.x,
            pose.y,
            wrap_angle(roll),
            wrap_angle(pitch),
            wrap_angle(pose.theta),
            body_velocity.0,
            body_velocity.1,
        ]);
        let mut d = Vec7::repeat(cfg.p0_pose);
        d[IU] = cfg.p0_vel;
        d[IW] = cfg.p0_vel;
        Self {
            x,
            covariance: Mat7::from_diagonal(&d),
            timestamp,
            repaired: false,
        }
    }

    pub fn p_x(&self) -> f64 {
        self.x[IX]
    }
    pub fn p_y(&self) -> f64 {
        self.x[IY]
    }
    pub fn alpha(&self) -> f64 {
        self.x[IA]
    }
    pub fn beta(&self) -> f64 {
        self.x[IB]
    }
    pub fn theta(&self) -> f64 {
        self.x[IT]
    }

    pub fn pose(&self) -> RobotState {
        RobotState::new(self.x[IX], self.x[IY], self.x[IT])
    }

    /// Published 5-state `[p_x, p_y, α, β, θ]`.
    pub fn published(&self) -> Vector5<f64> {
        self.x.fixed_rows::<5>(0).into_owned()
    }

    pub fn published_covariance(&self) -> Matrix5<f64> {
        self.covariance.fixed_view::<5, 5>(0, 0).into_owned()
    }
}

fn transition(x: &Vec7, imu: &ImuSample, dt: f64) -> Vec7 {
    let (a, b, th, u, w) = (x[IA], x[IB], x[IT], x[IU], x[IW]);
    let (sa, ca) = a.sin_cos();
    let (sb, cb) = b.sin_cos();
    let tb = sb / cb;
    let (wx, wy, wz) = (imu.omega_x, imu.omega_y, imu.omega_z);
    let a_dot = wx + sa * tb * wy + ca * tb * wz;
    let b_dot = ca * wy - sa * wz;
    let t_dot = (sa * wy + ca * wz) / cb;
    // Specific force minus gravity seen in the body frame.
    let ax = imu.a_x + GRAVITY * sb;
    let ay = imu.a_y - GRAVITY * sa * cb;
    let (st, ct) = th.sin_cos();
    let mut n = *x;
    n[IX] += dt * (ct * u - st * w);
    n[IY] += dt * (st * u + ct * w);
    n[IA] = wrap_angle(a + dt * a_dot);
    n[IB] = wrap_angle(b + dt * b_dot);
    n[IT] = wrap_angle(th + dt * t_dot);
    n[IU] += dt * (ax + wz * w);
    n[IW] += dt * (ay - wz * u);
    n
}

fn state_diff(a: &Vec7, b: &Vec7) -> Vec7 {
    let mut d = a - b;
    for i in ANGLES {
        d[i] = wrap_angle(d[i]);
    }
    d
}

fn transition_jacobian(x: &Vec7, imu: &ImuSample, dt: f64) -> Mat7 {
    let mut f = Mat7::zeros();
    for j in 0..N_EKF {
        let h = 1e-6 * (1.0 + x[j].abs());
        let mut xp = *x;
        let mut xm = *x;
        xp[j] += h;
        xm[j] -= h;
        let col = state_diff(&transition(&xp, imu, dt), &transition(&xm, imu, dt)) / (2.0 * h);
        f.set_column(j, &col);
    }
    f
}

fn symmetrize(p: &mut Mat7) {
    *p = 0.5 * (*p + p.transpose());
}

/// Propagates the state with the IMU sample over `dt` and the covariance to
/// first order.
pub fn ekf_predict(state: &EkfState, imu: &ImuSample, dt: f64, cfg: &EkfConfig) -> EkfState {
    if !(dt > 0.0) {
        return *state;
    }
    let f = transition_jacobian(&state.x, imu, dt);
    let x = transition(&state.x, imu, dt);
    let q = Vec7::from_column_slice(&[
        cfg.q_pos, cfg.q_pos, cfg.q_tilt, cfg.q_tilt, cfg.q_yaw, cfg.q_vel, cfg.q_vel,
    ]) * dt;
    let mut p = f * state.covariance * f.transpose() + Mat7::from_diagonal(&q);
    symmetrize(&mut p);
    EkfState {
        x,
        covariance: p,
        timestamp: state.timestamp + dt,
        repaired: false,
    }
}

/// Sequential scalar corrections with `ẑ = [p_x, p_y, α, β, θ]` and `H = [I₅ | 0]`
/// in Joseph form. Channels with infinite variance are skipped.
pub fn ekf_correct(
    state: &EkfState,
    mhe_out: &RobotState,
    incl: (f64, f64),
    cfg: &EkfConfig,
) -> EkfState {
    let z = [mhe_out.x, mhe_out.y, incl.0, incl.1, mhe_out.theta];
    let r = [cfg.r_pos, cfg.r_pos, cfg.r_tilt, cfg.r_tilt, cfg.r_yaw];
    let mut x = state.x;
    let mut p = state.covariance;
    for i in 0..5 {
        if !r[i].is_finite() || !z[i].is_finite() {
            continue;
        }
        let mut innov = z[i] - x[i];
        if ANGLES.contains(&i) {
            innov = wrap_angle(innov);
        }
        let s = p[(i, i)] + r[i];
        if !(s > 0.0) {
            continue;
        }
        let k: Vec7 = p.column(i) / s;
        x += k * innov;
        let mut ikh = Mat7::identity();
        for row in 0..N_EKF {
            ikh[(row, i)] -= k[row];
        }
        p = ikh * p * ikh.transpose() + k * k.transpose() * r[i];
        symmetrize(&mut p);
    }
    for i in ANGLES {
        x[i] = wrap_angle(x[i]);
    }
    let repaired = repair_psd(&mut p);
    EkfState {
        x,
        covariance: p,
        timestamp: state.timestamp,
        repaired,
    }
}

/// Floors negative eigenvalues; returns whether anything changed.
fn repair_psd(p: &mut Mat7) -> bool {
    let eig = p.symmetric_eigen();
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return false;
    }
    let d = eig.eigenvalues.map(|l| l.max(1e-12));
    *p = eig.eigenvectors * Mat7::from_diagonal(&d) * eig.eigenvectors.transpose();
    symmetrize(p);
    true
}

/// Roll and pitch implied by a specific-force sample on a static body.
pub fn accel_tilt(imu: &ImuSample) -> (f64, f64) {
    let roll = imu.a_y.atan2(imu.a_z);
    let pitch = (-imu.a_x).atan2(imu.a_y.hypot(imu.a_z));
    (roll, pitch)
}
