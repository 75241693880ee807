//! Kinodynamic skid-steer vehicle model with traction coefficients in the
//! control channel, its RK4 discretization, and the wheel-speed map.
//!
//! The same [`step`] is used by the simulator, the moving-horizon estimator
//! and the MPC so that all three share one integrator.

use nalgebra::{Matrix3, SMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::geometry::wrap_angle;

/// Longest single RK4 stage sequence; longer steps are split evenly.
pub const MAX_SUBSTEP: f64 = 0.05;

/// Lower bound applied to the linear traction coefficient before it is used as
/// a divisor in the wheel map.
pub const MU_FLOOR: f64 = 0.05;

/// Planar pose in the world frame. `theta` is kept in `[-π, π)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RobotState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl RobotState {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }

    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.theta)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn position(&self) -> crate::geometry::Point2 {
        crate::geometry::Point2::new(self.x, self.y)
    }
}

/// Body-frame command: forward speed (m/s) and yaw rate (rad/s).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub v: f64,
    pub omega: f64,
}

impl ControlInput {
    pub const ZERO: ControlInput = ControlInput { v: 0.0, omega: 0.0 };

    pub fn new(v: f64, omega: f64) -> Self {
        Self { v, omega }
    }

    pub fn is_finite(&self) -> bool {
        self.v.is_finite() && self.omega.is_finite()
    }
}

/// Traction coefficients `mu` (linear), `nu` (angular) and the compass offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TractionParams {
    pub mu: f64,
    pub nu: f64,
    pub delta_theta: f64,
}

impl Default for TractionParams {
    fn default() -> Self {
        Self::NOMINAL
    }
}

impl TractionParams {
    pub const NOMINAL: TractionParams = TractionParams {
        mu: 1.0,
        nu: 1.0,
        delta_theta: 0.0,
    };

    pub fn new(mu: f64, nu: f64, delta_theta: f64) -> Self {
        Self {
            mu,
            nu,
            delta_theta,
        }
    }

    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.mu)
            && (0.0..=1.0).contains(&self.nu)
            && (-std::f64::consts::PI..std::f64::consts::PI).contains(&self.delta_theta)
    }

    /// Projects onto the box `mu, nu ∈ [0, 1]`, `delta_theta ∈ [-π, π)`.
    pub fn projected(&self) -> Self {
        Self {
            mu: self.mu.clamp(0.0, 1.0),
            nu: self.nu.clamp(0.0, 1.0),
            delta_theta: wrap_angle(self.delta_theta),
        }
    }
}

/// Left/right side wheel speeds in m/s.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WheelCommand {
    pub v_left: f64,
    pub v_right: f64,
}

impl WheelCommand {
    pub const STOP: WheelCommand = WheelCommand {
        v_left: 0.0,
        v_right: 0.0,
    };

    pub fn new(v_left: f64, v_right: f64) -> Self {
        Self { v_left, v_right }
    }

    pub fn clamped(&self, v_max: f64) -> Self {
        Self {
            v_left: self.v_left.clamp(-v_max, v_max),
            v_right: self.v_right.clamp(-v_max, v_max),
        }
    }

    pub fn is_within(&self, v_max: f64) -> bool {
        self.v_left.abs() <= v_max && self.v_right.abs() <= v_max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleConfig {
    pub track_width: f64,
    pub v_max: f64,
    pub body_half_width: f64,
    pub body_half_length: f64,
}

impl Default for VehicleConfig {
    fn default() -> Self {
        Self {
            track_width: 0.3,
            v_max: 1.5,
            body_half_width: 0.15,
            body_half_length: 0.25,
        }
    }
}

impl VehicleConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.track_width,
            self.v_max,
            self.body_half_width,
            self.body_half_length,
        ];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(crate::Error::Config(format!(
                "vehicle dimensions and limits must be positive: {self:?}"
            )))
        }
    }
}

/// Result of [`wheel_commands`]; `mu_clamped` reports that the traction
/// coefficient was raised to [`MU_FLOOR`] before dividing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WheelMapping {
    pub command: WheelCommand,
    pub mu_clamped: bool,
}

fn check_finite(state: &RobotState, u: &ControlInput, params: &TractionParams) -> Result<()> {
    if !state.is_finite() || !u.is_finite() {
        return domain(format!("non-finite state or input: {state:?} {u:?}"));
    }
    if !(params.mu.is_finite() && params.nu.is_finite() && params.delta_theta.is_finite()) {
        return domain(format!("non-finite traction parameters: {params:?}"));
    }
    Ok(())
}

#[inline]
fn rhs(theta: f64, u: &ControlInput, mu: f64, nu: f64) -> Vector3<f64> {
    let (s, c) = theta.sin_cos();
    Vector3::new(mu * u.v * c, mu * u.v * s, nu * u.omega)
}

/// Time derivative of the pose: `(μ v cos θ, μ v sin θ, ν ω)`.
pub fn derivative(
    state: &RobotState,
    u: &ControlInput,
    params: &TractionParams,
) -> Result<Vector3<f64>> {
    check_finite(state, u, params)?;
    Ok(rhs(state.theta, u, params.mu, params.nu))
}

/// Advances the pose by `dt` with RK4, using `ceil(dt / MAX_SUBSTEP)` equal
/// substeps. Heading is re-wrapped afterwards.
pub fn step(
    state: &RobotState,
    u: &ControlInput,
    params: &TractionParams,
    dt: f64,
) -> Result<RobotState> {
    if !(dt > 0.0) || !dt.is_finite() {
        return domain(format!("time step must be positive, got {dt}"));
    }
    check_finite(state, u, params)?;
    Ok(rk4_raw(state, u, params.mu, params.nu, dt))
}

fn substeps(dt: f64) -> (usize, f64) {
    let n = ((dt / MAX_SUBSTEP) - 1e-9).ceil().max(1.0) as usize;
    (n, dt / n as f64)
}

pub(crate) fn rk4_raw(state: &RobotState, u: &ControlInput, mu: f64, nu: f64, dt: f64) -> RobotState {
    let (n, h) = substeps(dt);
    let mut x = state.as_vector();
    for _ in 0..n {
        let k1 = rhs(x[2], u, mu, nu);
        let k2 = rhs(x[2] + 0.5 * h * k1[2], u, mu, nu);
        let k3 = rhs(x[2] + 0.5 * h * k2[2], u, mu, nu);
        let k4 = rhs(x[2] + h * k3[2], u, mu, nu);
        x += (k1 + 2.0 * k2 + 2.0 * k3 + k4) * (h / 6.0);
    }
    RobotState::from_vector(&x)
}

/// Sensitivities of one RK4 step.
#[derive(Debug, Clone, Copy)]
pub struct StepJacobian {
    /// d(next) / d(state)
    pub wrt_state: Matrix3<f64>,
    /// d(next) / d(mu, nu)
    pub wrt_traction: SMatrix<f64, 3, 2>,
    /// d(next) / d(v, omega)
    pub wrt_input: SMatrix<f64, 3, 2>,
}

/// RK4 step together with its exact (forward-mode) derivatives with respect
/// to the state, the traction coefficients and the input. The heading of the
/// returned state is *not* wrapped so that the derivative stays continuous;
/// callers wrap when they need to.
pub fn step_with_jacobian(
    state: &RobotState,
    u: &ControlInput,
    mu: f64,
    nu: f64,
    dt: f64,
) -> (Vector3<f64>, StepJacobian) {
    let (n, h) = substeps(dt);
    let (mut x, mut jac) = rk4_substep_with_jacobian(&state.as_vector(), u, mu, nu, h);
    for _ in 1..n {
        let (next, j) = rk4_substep_with_jacobian(&x, u, mu, nu, h);
        jac = StepJacobian {
            wrt_state: j.wrt_state * jac.wrt_state,
            wrt_traction: j.wrt_state * jac.wrt_traction + j.wrt_traction,
            wrt_input: j.wrt_state * jac.wrt_input + j.wrt_input,
        };
        x = next;
    }
    (x, jac)
}

fn rk4_substep_with_jacobian(
    x: &Vector3<f64>,
    u: &ControlInput,
    mu: f64,
    nu: f64,
    dt: f64,
) -> (Vector3<f64>, StepJacobian) {
    // Columns: 3 state directions, mu, nu, v, omega.
    type Sens = SMatrix<f64, 3, 7>;

    let f_x = |theta: f64| -> Matrix3<f64> {
        let (s, c) = theta.sin_cos();
        Matrix3::new(
            0.0, 0.0, -mu * u.v * s, //
            0.0, 0.0, mu * u.v * c, //
            0.0, 0.0, 0.0,
        )
    };
    // Direct partials of the right-hand side w.r.t. (mu, nu, v, omega).
    let f_p = |theta: f64| -> Sens {
        let (s, c) = theta.sin_cos();
        let mut m = Sens::zeros();
        m[(0, 3)] = u.v * c;
        m[(1, 3)] = u.v * s;
        m[(2, 4)] = u.omega;
        m[(0, 5)] = mu * c;
        m[(1, 5)] = mu * s;
        m[(2, 6)] = nu;
        m
    };

    let x = *x;
    let mut ds1 = Sens::zeros();
    ds1.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());

    let k1 = rhs(x[2], u, mu, nu);
    let dk1 = f_x(x[2]) * ds1 + f_p(x[2]);

    let s2 = x + 0.5 * dt * k1;
    let ds2 = ds1 + 0.5 * dt * dk1;
    let k2 = rhs(s2[2], u, mu, nu);
    let dk2 = f_x(s2[2]) * ds2 + f_p(s2[2]);

    let s3 = x + 0.5 * dt * k2;
    let ds3 = ds1 + 0.5 * dt * dk2;
    let k3 = rhs(s3[2], u, mu, nu);
    let dk3 = f_x(s3[2]) * ds3 + f_p(s3[2]);

    let s4 = x + dt * k3;
    let ds4 = ds1 + dt * dk3;
    let k4 = rhs(s4[2], u, mu, nu);
    let dk4 = f_x(s4[2]) * ds4 + f_p(s4[2]);

    let next = x + (k1 + 2.0 * k2 + 2.0 * k3 + k4) * (dt / 6.0);
    let dnext = ds1 + (dk1 + 2.0 * dk2 + 2.0 * dk3 + dk4) * (dt / 6.0);

    (
        next,
        StepJacobian {
            wrt_state: dnext.fixed_view::<3, 3>(0, 0).into_owned(),
            wrt_traction: dnext.fixed_view::<3, 2>(0, 3).into_owned(),
            wrt_input: dnext.fixed_view::<3, 2>(0, 5).into_owned(),
        },
    )
}

/// Maps a body command to side wheel speeds, compensating linear traction:
/// `v_left = v/μ − Lω/2`, `v_right = v/μ + Lω/2`.
pub fn wheel_commands(u: &ControlInput, mu: f64, cfg: &VehicleConfig) -> WheelMapping {
    let mu_clamped = !(mu >= MU_FLOOR);
    let mu = if mu_clamped { MU_FLOOR } else { mu };
    let v = u.v / mu;
    let half = 0.5 * cfg.track_width * u.omega;
    WheelMapping {
        command: WheelCommand::new(v - half, v + half),
        mu_clamped,
    }
}

/// Body command produced by side wheel speeds at perfect traction.
pub fn inverse_wheel(w: &WheelCommand, cfg: &VehicleConfig) -> ControlInput {
    ControlInput::new(
        0.5 * (w.v_left + w.v_right),
        (w.v_right - w.v_left) / cfg.track_width,
    )
}
