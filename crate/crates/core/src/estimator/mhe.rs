//! Moving-horizon estimation of pose and traction parameters.
//!
//! Single shooting: the decision vector is `p = (x, y, θ, μ, ν, Δθ)` for the
//! oldest pose of the window plus the parameters; every later pose is rolled
//! out through the shared RK4 model, so the dynamics hold by construction.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector3, Vector6};

use crate::error::{config, domain, Result};
use crate::geometry::wrap_angle;
use crate::model::{step_with_jacobian, ControlInput, RobotState, TractionParams};

const N_DEC: usize = 6;
type Sens = SMatrix<f64, 3, N_DEC>;

#[derive(Debug, Clone, PartialEq)]
pub struct MheConfig {
    pub horizon_n: usize,
    /// Arrival weight on the oldest pose.
    pub p_x: Matrix3<f64>,
    /// Arrival weight on (μ, ν, Δθ).
    pub p_m: Matrix3<f64>,
    /// Weight on each (GNSS x, GNSS y, compass) measurement.
    pub p_w: Matrix3<f64>,
    pub solver_tol: f64,
    pub max_iters: usize,
}

impl Default for MheConfig {
    fn default() -> Self {
        Self {
            horizon_n: 20,
            p_x: Matrix3::from_diagonal(&Vector3::new(400.0, 400.0, 400.0)),
            p_m: Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 1.0)),
            p_w: Matrix3::from_diagonal(&Vector3::new(2500.0, 2500.0, 100.0)),
            solver_tol: 1e-8,
            max_iters: 50,
        }
    }
}

impl MheConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon_n < 2 {
            return config(format!("MHE horizon must be at least 2, got {}", self.horizon_n));
        }
        for (name, m) in [("p_x", &self.p_x), ("p_m", &self.p_m), ("p_w", &self.p_w)] {
            if m.cholesky().is_none() || (m - m.transpose()).abs().max() > 1e-12 {
                return config(format!("MHE weight {name} must be symmetric positive definite"));
            }
        }
        if !(self.solver_tol > 0.0) || self.max_iters == 0 {
            return config("MHE solver tolerance and iteration cap must be positive");
        }
        Ok(())
    }

    /// Upper-triangular factors `Lᵀ` with `P = L Lᵀ`, so `‖e‖²_P = ‖Lᵀ e‖²`.
    fn factors(&self) -> Result<[Matrix3<f64>; 3]> {
        let f = |m: &Matrix3<f64>| m.cholesky().map(|c| c.l().transpose());
        match (f(&self.p_x), f(&self.p_m), f(&self.p_w)) {
            (Some(a), Some(b), Some(c)) => Ok([a, b, c]),
            _ => config("MHE weights must be positive definite"),
        }
    }
}

/// One GNSS fix paired with the compass reading taken at the same instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MheMeasurement {
    pub z_x: f64,
    pub z_y: f64,
    pub z_theta: f64,
    pub timestamp: f64,
}

/// Command held constant for `duration` seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputSegment {
    pub u: ControlInput,
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MheWindow {
    pub measurements: Vec<MheMeasurement>,
    /// Per interval between consecutive measurements, the piecewise-constant
    /// commands applied during it (durations sum to the interval length).
    pub inputs: Vec<Vec<InputSegment>>,
    pub prior_state: RobotState,
    pub prior_params: TractionParams,
}

impl MheWindow {
    /// Window with one command per interval.
    pub fn with_uniform_inputs(
        measurements: Vec<MheMeasurement>,
        controls: &[ControlInput],
        prior_state: RobotState,
        prior_params: TractionParams,
    ) -> Self {
        let inputs = measurements
            .windows(2)
            .zip(controls)
            .map(|(m, &u)| {
                vec![InputSegment {
                    u,
                    duration: m[1].timestamp - m[0].timestamp,
                }]
            })
            .collect();
        Self {
            measurements,
            inputs,
            prior_state,
            prior_params,
        }
    }

    pub fn horizon(&self) -> usize {
        self.inputs.len()
    }

    pub fn validate(&self, cfg: &MheConfig) -> Result<()> {
        let n = cfg.horizon_n;
        if self.measurements.len() != n + 1 || self.inputs.len() != n {
            return domain(format!(
                "MHE window needs {} measurements and {} input intervals, got {} and {}",
                n + 1,
                n,
                self.measurements.len(),
                self.inputs.len()
            ));
        }
        for (k, m) in self.measurements.windows(2).enumerate() {
            let dt = m[1].timestamp - m[0].timestamp;
            if !(dt > 0.0) {
                return domain("MHE measurement timestamps must be strictly increasing");
            }
            let seg = &self.inputs[k];
            if seg.iter().any(|s| !(s.duration > 0.0) || !s.u.is_finite()) {
                return domain("MHE input segments need positive durations and finite commands");
            }
            let total: f64 = seg.iter().map(|s| s.duration).sum();
            if (total - dt).abs() > 1e-6 {
                return domain(format!(
                    "input segments of interval {k} cover {total} s, expected {dt} s"
                ));
            }
        }
        let finite = self
            .measurements
            .iter()
            .all(|m| m.z_x.is_finite() && m.z_y.is_finite() && m.z_theta.is_finite());
        if !finite || !self.prior_state.is_finite() {
            return domain("non-finite MHE measurement or prior");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MheSolution {
    pub states: Vec<RobotState>,
    pub params: TractionParams,
    pub cost: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Stacked weighted residual and its cost.
#[derive(Debug, Clone)]
pub struct MheResidual {
    pub residual: DVector<f64>,
    pub cost: f64,
}

/// Residual, cost, Jacobian and gradient at a decision vector.
#[derive(Debug, Clone)]
pub struct MheEval {
    pub states: Vec<Vector3<f64>>,
    pub residual: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    pub cost: f64,
    pub gradient: Vector6<f64>,
}

fn measurement_error(x: &Vector3<f64>, z: &MheMeasurement, delta_theta: f64) -> Vector3<f64> {
    Vector3::new(
        x[0] - z.z_x,
        x[1] - z.z_y,
        wrap_angle(x[2] - (z.z_theta + delta_theta)),
    )
}

fn arrival_errors(window: &MheWindow, x0: &Vector3<f64>, m: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let xp = &window.prior_state;
    let mp = &window.prior_params;
    (
        Vector3::new(x0[0] - xp.x, x0[1] - xp.y, wrap_angle(x0[2] - xp.theta)),
        Vector3::new(m[0] - mp.mu, m[1] - mp.nu, wrap_angle(m[2] - mp.delta_theta)),
    )
}

/// Weighted residual for an explicit candidate trajectory. The first state
/// is compared with the arrival prior, every state with its measurement.
pub fn mhe_residual(
    window: &MheWindow,
    states: &[RobotState],
    params: &TractionParams,
    cfg: &MheConfig,
) -> Result<MheResidual> {
    if states.len() != window.measurements.len() {
        return domain(format!(
            "expected {} candidate states, got {}",
            window.measurements.len(),
            states.len()
        ));
    }
    let [lx, lm, lw] = cfg.factors()?;
    let m = Vector3::new(params.mu, params.nu, params.delta_theta);
    let (ex, em) = arrival_errors(window, &states[0].as_vector(), &m);
    let mut r = DVector::zeros(6 + 3 * states.len());
    r.fixed_rows_mut::<3>(0).copy_from(&(lx * ex));
    r.fixed_rows_mut::<3>(3).copy_from(&(lm * em));
    for (i, (s, z)) in states.iter().zip(&window.measurements).enumerate() {
        let e = measurement_error(&s.as_vector(), z, params.delta_theta);
        r.fixed_rows_mut::<3>(6 + 3 * i).copy_from(&(lw * e));
    }
    let cost = r.norm_squared();
    Ok(MheResidual { residual: r, cost })
}

/// Rolls the window out from `p` and returns the poses with their
/// sensitivities to `p`.
fn rollout(window: &MheWindow, p: &Vector6<f64>) -> (Vec<Vector3<f64>>, Vec<Sens>) {
    let (mu, nu) = (p[3], p[4]);
    let mut x = Vector3::new(p[0], p[1], p[2]);
    let mut d = Sens::zeros();
    d.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    let mut states = Vec::with_capacity(window.inputs.len() + 1);
    let mut sens = Vec::with_capacity(window.inputs.len() + 1);
    states.push(x);
    sens.push(d);
    for interval in &window.inputs {
        for seg in interval {
            let (next, j) = step_with_jacobian(&RobotState { x: x[0], y: x[1], theta: x[2] }, &seg.u, mu, nu, seg.duration);
            let mut nd = j.wrt_state * d;
            let mut tr = nd.fixed_view_mut::<3, 2>(0, 3);
            tr += j.wrt_traction;
            d = nd;
            x = next;
        }
        states.push(x);
        sens.push(d);
    }
    (states, sens)
}

/// Single-shooting objective at decision vector `p = (x, y, θ, μ, ν, Δθ)`.
pub fn mhe_evaluate(window: &MheWindow, cfg: &MheConfig, p: &Vector6<f64>) -> Result<MheEval> {
    let [lx, lm, lw] = cfg.factors()?;
    let (states, sens) = rollout(window, p);
    let n_meas = window.measurements.len();
    if states.len() != n_meas {
        return domain("input intervals do not match the measurement count");
    }
    let rows = 6 + 3 * n_meas;
    let mut r = DVector::zeros(rows);
    let mut jac = DMatrix::zeros(rows, N_DEC);

    let x0 = Vector3::new(p[0], p[1], p[2]);
    let m = Vector3::new(p[3], p[4], p[5]);
    let (ex, em) = arrival_errors(window, &x0, &m);
    r.fixed_rows_mut::<3>(0).copy_from(&(lx * ex));
    r.fixed_rows_mut::<3>(3).copy_from(&(lm * em));
    jac.view_mut((0, 0), (3, 3)).copy_from(&lx);
    jac.view_mut((3, 3), (3, 3)).copy_from(&lm);

    for (i, z) in window.measurements.iter().enumerate() {
        let e = measurement_error(&states[i], z, p[5]);
        let mut de = sens[i];
        de[(2, 5)] = -1.0;
        let row = 6 + 3 * i;
        r.fixed_rows_mut::<3>(row).copy_from(&(lw * e));
        jac.view_mut((row, 0), (3, N_DEC)).copy_from(&(lw * de));
    }
    let cost = r.norm_squared();
    let g = 2.0 * jac.tr_mul(&r);
    Ok(MheEval {
        states,
        residual: r,
        jacobian: jac,
        cost,
        gradient: Vector6::from_iterator(g.iter().copied()),
    })
}

fn project(p: &mut Vector6<f64>) {
    p[2] = wrap_angle(p[2]);
    p[3] = p[3].clamp(0.0, 1.0);
    p[4] = p[4].clamp(0.0, 1.0);
    p[5] = wrap_angle(p[5]);
}

/// Indices of box-constrained variables pinned at a bound with the gradient
/// pushing outward.
fn active_set(p: &Vector6<f64>, g: &Vector6<f64>) -> [bool; N_DEC] {
    let mut a = [false; N_DEC];
    for i in [3, 4] {
        a[i] = (p[i] <= 0.0 && g[i] > 0.0) || (p[i] >= 1.0 && g[i] < 0.0);
    }
    a
}

fn projected_gradient_norm(p: &Vector6<f64>, g: &Vector6<f64>) -> f64 {
    let a = active_set(p, g);
    (0..N_DEC).filter(|&i| !a[i]).map(|i| g[i] * g[i]).sum::<f64>().sqrt()
}

/// Damped Gauss–Newton on the free variables, projected onto the parameter
/// box after every step. Warm-started from the window priors.
pub fn mhe_solve(window: &MheWindow, cfg: &MheConfig) -> Result<MheSolution> {
    cfg.validate()?;
    window.validate(cfg)?;
    let prior = window.prior_params.projected();
    let s0 = window.prior_state;
    let mut p = Vector6::new(s0.x, s0.y, s0.theta, prior.mu, prior.nu, prior.delta_theta);
    project(&mut p);

    let mut eval = mhe_evaluate(window, cfg, &p)?;
    let mut lambda = 1e-6;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        if projected_gradient_norm(&p, &eval.gradient) < cfg.solver_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let active = active_set(&p, &eval.gradient);
        let free: Vec<usize> = (0..N_DEC).filter(|&i| !active[i]).collect();
        let h = eval.jacobian.tr_mul(&eval.jacobian);
        let b = eval.jacobian.tr_mul(&eval.residual);

        let mut accepted = false;
        while lambda < 1e12 {
            let k = free.len();
            let mut hf = DMatrix::zeros(k, k);
            let mut bf = DVector::zeros(k);
            for (a, &i) in free.iter().enumerate() {
                bf[a] = -b[i];
                for (c, &j) in free.iter().enumerate() {
                    hf[(a, c)] = h[(i, j)];
                }
                hf[(a, a)] += lambda * (1.0 + h[(i, i)]);
            }
            let Some(chol) = hf.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let df = chol.solve(&bf);
            let mut cand = p;
            for (a, &i) in free.iter().enumerate() {
                cand[i] += df[a];
            }
            project(&mut cand);
            let next = mhe_evaluate(window, cfg, &cand)?;
            if next.cost < eval.cost {
                let decrease = eval.cost - next.cost;
                p = cand;
                eval = next;
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                if decrease <= 1e-12 * (1.0 + eval.cost) {
                    converged = true;
                }
                break;
            }
            lambda *= 4.0;
        }
        // No descent left at any damping: stationary up to round-off.
        if !accepted || converged {
            converged = true;
            break;
        }
    }
    if !converged && projected_gradient_norm(&p, &eval.gradient) < cfg.solver_tol {
        converged = true;
    }
    Ok(MheSolution {
        states: eval
            .states
            .iter()
            .map(|x| RobotState::new(x[0], x[1], x[2]))
            .collect(),
        params: TractionParams::new(p[3], p[4], p[5]).projected(),
        cost: eval.cost,
        converged,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::step;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    const DT: f64 = 0.2;

    fn controls(n: usize) -> Vec<ControlInput> {
        (0..n)
            .map(|k| ControlInput::new(0.5 + 0.1 * (k as f64 * 0.7).sin(), 0.4 * (k as f64 * 0.3).cos()))
            .collect()
    }

    /// Noiseless window from an independent fine-step rollout.
    fn noiseless(truth: TractionParams, start: RobotState, n: usize) -> (Vec<MheMeasurement>, Vec<RobotState>, Vec<ControlInput>) {
        let u = controls(n);
        let mut states = vec![start];
        for k in 0..n {
            let mut s = states[k];
            for _ in 0..40 {
                s = step(&s, &u[k], &truth, DT / 40.0).unwrap();
            }
            states.push(s);
        }
        let meas = states
            .iter()
            .enumerate()
            .map(|(i, s)| MheMeasurement {
                z_x: s.x,
                z_y: s.y,
                z_theta: wrap_angle(s.theta - truth.delta_theta),
                timestamp: i as f64 * DT,
            })
            .collect();
        (meas, states, u)
    }

    #[test]
    fn exact_trajectory_has_zero_cost() {
        let truth = TractionParams::new(0.8, 0.9, 0.2);
        let cfg = MheConfig::default();
        let start = RobotState::new(1.0, 2.0, 0.3);
        let (meas, states, u) = noiseless(truth, start, cfg.horizon_n);
        let w = MheWindow::with_uniform_inputs(meas, &u, start, truth);
        let r = mhe_residual(&w, &states, &truth, &cfg).unwrap();
        assert!(r.cost < 1e-20);
    }

    #[test]
    fn heading_offset_perturbation_cost() {
        let truth = TractionParams::new(0.8, 0.9, 0.2);
        let cfg = MheConfig::default();
        let start = RobotState::new(0.0, 0.0, 0.0);
        let (meas, states, u) = noiseless(truth, start, cfg.horizon_n);
        let w = MheWindow::with_uniform_inputs(meas, &u, start, truth);
        let d = 0.01;
        let pert = TractionParams::new(truth.mu, truth.nu, truth.delta_theta + d);
        let r = mhe_residual(&w, &states, &pert, &cfg).unwrap();
        // Every one of the N+1 compass residuals shifts by d, plus the prior term.
        let n_meas = (cfg.horizon_n + 1) as f64;
        let expect = n_meas * cfg.p_w[(2, 2)] * d * d + cfg.p_m[(2, 2)] * d * d;
        assert_abs_diff_eq!(r.cost, expect, epsilon = 1e-9 * expect);
    }

    #[test]
    fn heading_residual_wraps() {
        // theta - delta_theta crosses +pi, so the compass reads near -pi.
        let s = RobotState::new(0.0, 0.0, PI - 0.01);
        let z = MheMeasurement {
            z_x: 0.0,
            z_y: 0.0,
            z_theta: wrap_angle(s.theta + 0.05),
            timestamp: 0.0,
        };
        assert!(z.z_theta < 0.0);
        let e = measurement_error(&s.as_vector(), &z, -0.05);
        assert!(e[2].abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_is_a_domain_error() {
        let cfg = MheConfig::default();
        let start = RobotState::default();
        let (meas, states, u) = noiseless(TractionParams::NOMINAL, start, cfg.horizon_n);
        let w = MheWindow::with_uniform_inputs(meas, &u, start, TractionParams::NOMINAL);
        assert!(mhe_residual(&w, &states[1..], &TractionParams::NOMINAL, &cfg).is_err());
        let short = MheWindow::with_uniform_inputs(w.measurements[..5].to_vec(), &u, start, TractionParams::NOMINAL);
        assert!(mhe_solve(&short, &cfg).is_err());
    }

    #[test]
    fn recovers_true_parameters() {
        let cfg = MheConfig::default();
        for truth in [
            TractionParams::new(1.0, 1.0, 0.0),
            TractionParams::new(0.7, 0.9, 0.3),
            TractionParams::new(0.3, 0.5, -1.0),
        ] {
            let start = RobotState::new(3.0, -1.0, 0.4);
            let (meas, _, u) = noiseless(truth, start, cfg.horizon_n);
            let w = MheWindow::with_uniform_inputs(meas, &u, start, TractionParams::NOMINAL);
            let sol = mhe_solve(&w, &cfg).unwrap();
            assert!(sol.converged, "{truth:?}: {sol:?}");
            assert!((sol.params.mu - truth.mu).abs() < 1e-2, "{truth:?} -> {:?}", sol.params);
            assert!((sol.params.nu - truth.nu).abs() < 1e-2, "{truth:?} -> {:?}", sol.params);
            assert!(wrap_angle(sol.params.delta_theta - truth.delta_theta).abs() < 1e-2, "{truth:?} -> {:?}", sol.params);
        }
    }

    #[test]
    fn solution_no_worse_than_truth() {
        let cfg = MheConfig::default();
        let truth = TractionParams::new(0.7, 0.9, 0.3);
        let start = RobotState::new(0.0, 0.0, 0.0);
        let (meas, states, u) = noiseless(truth, start, cfg.horizon_n);
        let w = MheWindow::with_uniform_inputs(meas, &u, start, TractionParams::NOMINAL);
        let at_truth = mhe_residual(&w, &states, &truth, &cfg).unwrap().cost;
        let sol = mhe_solve(&w, &cfg).unwrap();
        assert!(sol.cost <= at_truth * (1.0 + 1e-9));
    }

    #[test]
    fn zero_commands_keep_prior_parameters() {
        let cfg = MheConfig::default();
        let start = RobotState::new(5.0, 5.0, 1.0);
        let meas: Vec<MheMeasurement> = (0..=cfg.horizon_n)
            .map(|i| MheMeasurement {
                z_x: 5.0,
                z_y: 5.0,
                z_theta: 1.0 - 0.1,
                timestamp: i as f64 * DT,
            })
            .collect();
        let prior = TractionParams::new(0.9, 0.8, 0.1);
        let w = MheWindow::with_uniform_inputs(meas, &vec![ControlInput::ZERO; cfg.horizon_n], start, prior);
        let sol = mhe_solve(&w, &cfg).unwrap();
        assert_abs_diff_eq!(sol.params.mu, 0.9, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.params.nu, 0.8, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.params.delta_theta, 0.1, epsilon = 1e-9);
    }

    #[test]
    fn frozen_truth_drives_mu_down() {
        let cfg = MheConfig::default();
        let start = RobotState::new(0.0, 0.0, 0.0);
        let meas: Vec<MheMeasurement> = (0..=cfg.horizon_n)
            .map(|i| MheMeasurement {
                z_x: 0.0,
                z_y: 0.0,
                z_theta: 0.0,
                timestamp: i as f64 * DT,
            })
            .collect();
        let u = vec![ControlInput::new(0.5, 0.0); cfg.horizon_n];
        let w = MheWindow::with_uniform_inputs(meas, &u, start, TractionParams::NOMINAL);
        let sol = mhe_solve(&w, &cfg).unwrap();
        assert!(sol.params.mu < 0.2, "{:?}", sol.params);
        assert!(sol.params.mu >= 0.0);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let cfg = MheConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth = TractionParams::new(0.7, 0.9, 0.3);
        let start = RobotState::new(0.0, 0.0, 0.2);
        let (meas, _, u) = noiseless(truth, start, cfg.horizon_n);
        let w = MheWindow::with_uniform_inputs(meas, &u, start, TractionParams::NOMINAL);
        for _ in 0..10 {
            let p = Vector6::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.8),
                rng.random_range(0.2..1.0),
                rng.random_range(0.2..1.0),
                rng.random_range(-0.5..0.5),
            );
            let g = mhe_evaluate(&w, &cfg, &p).unwrap().gradient;
            for i in 0..6 {
                let h = 1e-6;
                let mut a = p;
                let mut b = p;
                a[i] += h;
                b[i] -= h;
                let fd = (mhe_evaluate(&w, &cfg, &a).unwrap().cost - mhe_evaluate(&w, &cfg, &b).unwrap().cost) / (2.0 * h);
                let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1.0);
                assert!(rel < 1e-5, "component {i}: analytic {} vs fd {fd}", g[i]);
            }
        }
    }
}
