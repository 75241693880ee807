//! Pose and traction estimation: MHE at GNSS rate feeding an IMU-rate EKF.

mod ekf;
mod mhe;

pub use ekf::{accel_tilt, ekf_correct, ekf_predict, EkfConfig, EkfState, N_EKF};
pub use mhe::{
    mhe_evaluate, mhe_residual, mhe_solve, InputSegment, MheConfig, MheEval, MheMeasurement,
    MheResidual, MheSolution, MheWindow,
};

use std::collections::VecDeque;

use crate::geometry::wrap_angle;
use crate::model::{inverse_wheel, ControlInput, RobotState, TractionParams, VehicleConfig, WheelCommand};
use crate::sim::{GnssFix, ImuSample};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EstimatorConfig {
    pub mhe: MheConfig,
    pub ekf: EkfConfig,
    /// Heading-offset prior used until the first window is solved.
    pub delta_theta_prior: f64,
}

/// Latest navigation estimate handed to the rest of the stack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub pose: RobotState,
    pub params: TractionParams,
    pub timestamp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EstimatorStats {
    pub mhe_solves: usize,
    pub mhe_not_converged: usize,
    pub gnss_dropouts: usize,
    pub stale_corrections: usize,
    pub covariance_repairs: usize,
}

/// Single owner of the estimation state. Feed it IMU samples, GNSS fixes and
/// the wheel commands actually applied, in timestamp order.
#[derive(Debug, Clone)]
pub struct Estimator {
    cfg: EstimatorConfig,
    vehicle: VehicleConfig,
    fixes: VecDeque<MheMeasurement>,
    /// (start time, command held from then on)
    commands: VecDeque<(f64, ControlInput)>,
    compass: Option<f64>,
    tilt: Option<(f64, f64)>,
    last_imu: Option<f64>,
    last_correction: f64,
    previous: Option<MheSolution>,
    previous_times: Vec<f64>,
    params: TractionParams,
    ekf: Option<EkfState>,
    pub stats: EstimatorStats,
}

impl Estimator {
    pub fn new(cfg: EstimatorConfig, vehicle: VehicleConfig) -> Self {
        let params = TractionParams::new(1.0, 1.0, cfg.delta_theta_prior);
        Self {
            cfg,
            vehicle,
            fixes: VecDeque::new(),
            commands: VecDeque::new(),
            compass: None,
            tilt: None,
            last_imu: None,
            last_correction: f64::NEG_INFINITY,
            previous: None,
            previous_times: Vec::new(),
            params,
            ekf: None,
            stats: EstimatorStats::default(),
        }
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.cfg
    }

    /// Drops every window, filter and prior (statistics are kept).
    pub fn reset(&mut self) {
        let stats = self.stats;
        *self = Self::new(self.cfg.clone(), self.vehicle);
        self.stats = stats;
    }

    pub fn estimate(&self) -> Option<Estimate> {
        self.ekf.as_ref().map(|e| Estimate {
            pose: e.pose(),
            params: self.params,
            timestamp: e.timestamp,
        })
    }

    pub fn ekf(&self) -> Option<&EkfState> {
        self.ekf.as_ref()
    }

    pub fn last_solution(&self) -> Option<&MheSolution> {
        self.previous.as_ref()
    }

    /// Records the wheel command applied from time `t` on.
    pub fn record_command(&mut self, t: f64, w: &WheelCommand) {
        let u = inverse_wheel(w, &self.vehicle);
        while self.commands.back().is_some_and(|&(tb, _)| tb >= t) {
            self.commands.pop_back();
        }
        self.commands.push_back((t, u));
    }

    pub fn on_imu(&mut self, imu: &ImuSample) {
        self.compass = Some(imu.z_theta);
        let meas = accel_tilt(imu);
        let k = self.cfg.ekf.tilt_smoothing;
        self.tilt = Some(match self.tilt {
            None => meas,
            Some((r, p)) => (r + k * (meas.0 - r), p + k * (meas.1 - p)),
        });
        if let (Some(prev), Some(ekf)) = (self.last_imu, self.ekf.as_ref()) {
            let dt = imu.timestamp - prev;
            if dt > 0.0 {
                self.ekf = Some(ekf_predict(ekf, imu, dt, &self.cfg.ekf));
            }
        }
        self.last_imu = Some(imu.timestamp);
    }

    /// Adds a fix; once a full window is available, solves the MHE and
    /// corrects the EKF. Returns the solution when one was computed.
    pub fn on_gnss(&mut self, fix: &GnssFix) -> Option<MheSolution> {
        if !fix.valid {
            self.stats.gnss_dropouts += 1;
            return None;
        }
        let z_theta = self.compass?;
        if self.fixes.back().is_some_and(|m| m.timestamp >= fix.timestamp) {
            return None;
        }
        self.fixes.push_back(MheMeasurement {
            z_x: fix.z_x,
            z_y: fix.z_y,
            z_theta,
            timestamp: fix.timestamp,
        });
        let n = self.cfg.mhe.horizon_n;
        while self.fixes.len() > n + 1 {
            self.fixes.pop_front();
        }
        self.prune_commands();
        if self.fixes.len() < n + 1 {
            return None;
        }
        let window = self.build_window();
        let sol = match mhe_solve(&window, &self.cfg.mhe) {
            Ok(s) => s,
            Err(_) => return None,
        };
        self.stats.mhe_solves += 1;
        if !sol.converged {
            self.stats.mhe_not_converged += 1;
            return Some(sol);
        }
        self.params = sol.params;
        self.previous_times = self.fixes.iter().map(|m| m.timestamp).collect();
        self.previous = Some(sol.clone());
        self.apply_correction(&sol, fix.timestamp);
        Some(sol)
    }

    fn apply_correction(&mut self, sol: &MheSolution, t: f64) {
        if t < self.last_correction {
            self.stats.stale_corrections += 1;
            return;
        }
        self.last_correction = t;
        let last = *sol.states.last().expect("window is never empty");
        let tilt = self.tilt.unwrap_or((0.0, 0.0));
        match &self.ekf {
            Some(ekf) => {
                let c = ekf_correct(ekf, &last, tilt, &self.cfg.ekf);
                if c.repaired {
                    self.stats.covariance_repairs += 1;
                }
                self.ekf = Some(EkfState { timestamp: t, ..c });
            }
            None => {
                let n = sol.states.len();
                let prev = sol.states[n - 2];
                let dt = self.previous_times[n - 1] - self.previous_times[n - 2];
                let d = last.position().sub(&prev.position()).rotate(-last.theta).scale(1.0 / dt);
                self.ekf = Some(EkfState::new(&last, tilt.0, tilt.1, (d.x, d.y), t, &self.cfg.ekf));
            }
        }
    }

    fn prune_commands(&mut self) {
        let Some(t0) = self.fixes.front().map(|m| m.timestamp) else {
            return;
        };
        while self.commands.len() >= 2 && self.commands[1].0 <= t0 {
            self.commands.pop_front();
        }
    }

    /// Piecewise-constant commands covering `[a, b]`.
    fn segments(&self, a: f64, b: f64) -> Vec<InputSegment> {
        let mut out = Vec::new();
        let mut t = a;
        let mut current = ControlInput::ZERO;
        let mut idx = 0;
        while idx < self.commands.len() && self.commands[idx].0 <= a {
            current = self.commands[idx].1;
            idx += 1;
        }
        while t < b {
            let next = if idx < self.commands.len() {
                self.commands[idx].0.min(b)
            } else {
                b
            };
            if next > t + 1e-12 {
                out.push(InputSegment {
                    u: current,
                    duration: next - t,
                });
            }
            t = next;
            if idx < self.commands.len() && self.commands[idx].0 <= t {
                current = self.commands[idx].1;
                idx += 1;
            }
        }
        out
    }

    fn build_window(&self) -> MheWindow {
        let measurements: Vec<MheMeasurement> = self.fixes.iter().copied().collect();
        let inputs = measurements
            .windows(2)
            .map(|m| self.segments(m[0].timestamp, m[1].timestamp))
            .collect();
        let first = measurements[0];
        let prior_params = self.params;
        let carried = self.previous.as_ref().and_then(|prev| {
            self.previous_times
                .iter()
                .position(|&t| (t - first.timestamp).abs() < 1e-9)
                .map(|i| prev.states[i])
        });
        let prior_state = carried.unwrap_or_else(|| {
            RobotState::new(first.z_x, first.z_y, wrap_angle(first.z_theta + prior_params.delta_theta))
        });
        MheWindow {
            measurements,
            inputs,
            prior_state,
            prior_params,
        }
    }
}
