//! Finite-horizon tracking MPC over wheel-speed commands.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, SMatrix};

use crate::error::{config, domain, Result};
use crate::geometry::{project_on_segment, wrap_angle};
use crate::model::{
    step_with_jacobian, wheel_commands, ControlInput, RobotState, TractionParams, VehicleConfig,
    WheelCommand, MU_FLOOR,
};
use crate::supervisor::{Frame, RefPoint, ReferencePath};

#[derive(Debug, Clone, PartialEq)]
pub struct MpcConfig {
    pub horizon_n: usize,
    pub dt: f64,
    pub q: Matrix3<f64>,
    pub r: Matrix2<f64>,
    pub q_n: Matrix3<f64>,
    pub v_max: f64,
    pub solver_tol: f64,
    pub max_iters: usize,
}

impl Default for MpcConfig {
    fn default() -> Self {
        let q = Matrix3::from_diagonal(&nalgebra::Vector3::new(10.0, 10.0, 1.0));
        Self {
            horizon_n: 10,
            dt: 0.1,
            q,
            r: Matrix2::from_diagonal(&nalgebra::Vector2::new(0.1, 0.05)),
            q_n: 5.0 * q,
            v_max: 1.5,
            solver_tol: 1e-6,
            max_iters: 50,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon_n == 0 {
            return config("MPC horizon must be at least 1");
        }
        if !(self.dt > 0.0) || !(self.v_max > 0.0) || !(self.solver_tol > 0.0) || self.max_iters == 0 {
            return config("MPC dt, v_max, tolerance and iteration cap must be positive");
        }
        self.factors().map(|_| ())
    }

    fn factors(&self) -> Result<(Matrix3<f64>, Matrix2<f64>, Matrix3<f64>)> {
        let sym3 = |m: &Matrix3<f64>| (m - m.transpose()).abs().max() <= 1e-12;
        let q = self.q.cholesky().filter(|_| sym3(&self.q));
        let qn = self.q_n.cholesky().filter(|_| sym3(&self.q_n));
        let r = self
            .r
            .cholesky()
            .filter(|_| (self.r - self.r.transpose()).abs().max() <= 1e-12);
        match (q, r, qn) {
            (Some(q), Some(r), Some(qn)) => Ok((q.l().transpose(), r.l().transpose(), qn.l().transpose())),
            _ => config("MPC weights must be symmetric positive definite"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution {
    pub inputs: Vec<ControlInput>,
    /// Side wheel speeds of `inputs` (the box-constrained decision variables).
    pub wheels: Vec<WheelCommand>,
    /// `x_0 .. x_N`.
    pub states: Vec<RobotState>,
    pub cost: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl MpcSolution {
    /// First wheel command sits on the box boundary.
    pub fn saturated(&self, v_max: f64) -> bool {
        self.wheels
            .first()
            .is_some_and(|w| w.v_left.abs() >= v_max || w.v_right.abs() >= v_max)
    }
}

fn floored(params: &TractionParams) -> (f64, f64) {
    (params.mu.max(MU_FLOOR), params.nu.max(MU_FLOOR))
}

/// Reference state `i` with its reference input. The reference input is
/// the feedforward divided by the current traction estimate, i.e. the
/// command that reproduces the feedforward motion under the model.
fn reference_at(path: &ReferencePath, i: usize, mu: f64, nu: f64) -> (RobotState, ControlInput) {
    let p = path.points[i.min(path.points.len() - 1)];
    (p.state, ControlInput::new(p.v / mu, p.omega / nu))
}

fn check_inputs(x0: &RobotState, inputs: &[ControlInput], path: &ReferencePath, cfg: &MpcConfig) -> Result<()> {
    if inputs.len() != cfg.horizon_n {
        return domain(format!("MPC needs {} inputs, got {}", cfg.horizon_n, inputs.len()));
    }
    if path.points.is_empty() {
        return domain("MPC reference is empty");
    }
    if path.frame != Frame::World {
        return domain("MPC reference must be expressed in the world frame");
    }
    if !x0.is_finite() || inputs.iter().any(|u| !u.is_finite()) {
        return domain(format!("non-finite MPC state or input: {x0:?}"));
    }
    Ok(())
}

/// Weighted tracking cost of an input sequence. The reference supplies
/// `x_i^r` by index (`i = 0..N`, the last point held when shorter).
pub fn mpc_cost(
    x0: &RobotState,
    inputs: &[ControlInput],
    path: &ReferencePath,
    params: &TractionParams,
    cfg: &MpcConfig,
) -> Result<f64> {
    check_inputs(x0, inputs, path, cfg)?;
    let (mu, nu) = floored(params);
    let state_err = |x: &RobotState, r: &RobotState| {
        nalgebra::Vector3::new(x.x - r.x, x.y - r.y, wrap_angle(x.theta - r.theta))
    };
    let mut x = *x0;
    let mut cost = 0.0;
    for (i, u) in inputs.iter().enumerate() {
        let (xr, ur) = reference_at(path, i, mu, nu);
        let e = state_err(&x, &xr);
        let du = nalgebra::Vector2::new(u.v - ur.v, u.omega - ur.omega);
        cost += (e.transpose() * cfg.q * e)[0] + (du.transpose() * cfg.r * du)[0];
        let (next, _) = step_with_jacobian(&x, u, mu, nu, cfg.dt);
        x = RobotState::new(next[0], next[1], next[2]);
    }
    let (xr, _) = reference_at(path, cfg.horizon_n, mu, nu);
    let e = state_err(&x, &xr);
    cost += (e.transpose() * cfg.q_n * e)[0];
    Ok(cost)
}

struct Linearization {
    states: Vec<RobotState>,
    /// Weighted residual; `‖r‖²` is the cost.
    residual: DVector<f64>,
    /// d residual / d (v_0, ω_0, …, v_{N−1}, ω_{N−1}).
    jacobian: DMatrix<f64>,
}

fn linearize(
    x0: &RobotState,
    inputs: &[ControlInput],
    path: &ReferencePath,
    mu: f64,
    nu: f64,
    cfg: &MpcConfig,
    factors: &(Matrix3<f64>, Matrix2<f64>, Matrix3<f64>),
) -> Linearization {
    let n = cfg.horizon_n;
    let (lq, lr, lqn) = factors;
    let rows = 3 * (n + 1) + 2 * n;
    let mut residual = DVector::zeros(rows);
    let mut jacobian = DMatrix::zeros(rows, 2 * n);
    let mut sens = DMatrix::<f64>::zeros(3, 2 * n);
    let mut states = Vec::with_capacity(n + 1);
    let mut x = *x0;
    for i in 0..=n {
        states.push(x);
        let (xr, ur) = reference_at(path, i, mu, nu);
        let e = nalgebra::Vector3::new(x.x - xr.x, x.y - xr.y, wrap_angle(x.theta - xr.theta));
        let w = if i == n { lqn } else { lq };
        residual.fixed_rows_mut::<3>(3 * i).copy_from(&(w * e));
        let ws = DMatrix::from_column_slice(3, 3, w.as_slice());
        jacobian.view_mut((3 * i, 0), (3, 2 * n)).copy_from(&(ws * &sens));
        if i == n {
            break;
        }
        let u = inputs[i];
        let du = nalgebra::Vector2::new(u.v - ur.v, u.omega - ur.omega);
        let row = 3 * (n + 1) + 2 * i;
        residual.fixed_rows_mut::<2>(row).copy_from(&(lr * du));
        jacobian.fixed_view_mut::<2, 2>(row, 2 * i).copy_from(lr);

        let (next, jac) = step_with_jacobian(&x, &u, mu, nu, cfg.dt);
        let a = DMatrix::from_column_slice(3, 3, jac.wrt_state.as_slice());
        let mut next_sens = a * &sens;
        let b: SMatrix<f64, 3, 2> = jac.wrt_input;
        for c in 0..2 {
            for r in 0..3 {
                next_sens[(r, 2 * i + c)] += b[(r, c)];
            }
        }
        sens = next_sens;
        x = RobotState::new(next[0], next[1], next[2]);
    }
    Linearization {
        states,
        residual,
        jacobian,
    }
}

/// Cost and its gradient with respect to the body inputs, in the layout
/// `(∂/∂v_0, ∂/∂ω_0, …)`.
pub fn mpc_cost_gradient(
    x0: &RobotState,
    inputs: &[ControlInput],
    path: &ReferencePath,
    params: &TractionParams,
    cfg: &MpcConfig,
) -> Result<(f64, Vec<f64>)> {
    check_inputs(x0, inputs, path, cfg)?;
    let factors = cfg.factors()?;
    let (mu, nu) = floored(params);
    let lin = linearize(x0, inputs, path, mu, nu, cfg, &factors);
    let g = 2.0 * lin.jacobian.transpose() * &lin.residual;
    Ok((lin.residual.norm_squared(), g.iter().copied().collect()))
}

/// Model input ↔ wheel speeds. The model input is the wheel-level command;
/// traction enters only through the prediction model.
#[derive(Debug, Clone, Copy)]
struct WheelMap {
    track: f64,
}

impl WheelMap {
    fn to_input(&self, wl: f64, wr: f64) -> ControlInput {
        ControlInput::new(0.5 * (wl + wr), (wr - wl) / self.track)
    }

    fn to_wheels(&self, u: &ControlInput) -> WheelCommand {
        let half = 0.5 * self.track * u.omega;
        WheelCommand::new(u.v - half, u.v + half)
    }

    /// d(v, ω)/d(wl, wr).
    fn jacobian(&self) -> Matrix2<f64> {
        Matrix2::new(0.5, 0.5, -1.0 / self.track, 1.0 / self.track)
    }
}

/// Wheel command for a model input solved at traction `mu`: the ground
/// speed `μ̂ v` pushed through the traction-compensating wheel map.
pub fn command_for(u: &ControlInput, mu: f64, vehicle: &VehicleConfig) -> WheelCommand {
    let mu = mu.max(MU_FLOOR);
    wheel_commands(&ControlInput::new(mu * u.v, u.omega), mu, vehicle).command
}

struct Problem<'a> {
    x0: &'a RobotState,
    path: &'a ReferencePath,
    cfg: &'a MpcConfig,
    factors: (Matrix3<f64>, Matrix2<f64>, Matrix3<f64>),
    mu: f64,
    nu: f64,
    map: WheelMap,
}

impl Problem<'_> {
    fn inputs(&self, w: &DVector<f64>) -> Vec<ControlInput> {
        (0..self.cfg.horizon_n)
            .map(|i| self.map.to_input(w[2 * i], w[2 * i + 1]))
            .collect()
    }

    fn cost(&self, w: &DVector<f64>) -> f64 {
        let inputs = self.inputs(w);
        linearize(self.x0, &inputs, self.path, self.mu, self.nu, self.cfg, &self.factors)
            .residual
            .norm_squared()
    }

    /// Cost, gradient and Gauss–Newton Hessian in wheel space.
    fn evaluate(&self, w: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>, Vec<RobotState>) {
        let inputs = self.inputs(w);
        let lin = linearize(self.x0, &inputs, self.path, self.mu, self.nu, self.cfg, &self.factors);
        let n = self.cfg.horizon_n;
        let m = self.map.jacobian();
        let mut jw = DMatrix::zeros(lin.jacobian.nrows(), 2 * n);
        for i in 0..n {
            let block = lin.jacobian.columns(2 * i, 2) * m;
            jw.columns_mut(2 * i, 2).copy_from(&block);
        }
        let g = 2.0 * jw.transpose() * &lin.residual;
        let h = 2.0 * jw.transpose() * &jw;
        (lin.residual.norm_squared(), g, h, lin.states)
    }

    fn project(&self, w: &mut DVector<f64>) {
        let vm = self.cfg.v_max;
        w.iter_mut().for_each(|v| *v = v.clamp(-vm, vm));
    }

    fn projected_gradient_norm(&self, w: &DVector<f64>, g: &DVector<f64>) -> f64 {
        let mut t = w - g;
        self.project(&mut t);
        (t - w).amax()
    }

    /// Projected Gauss–Newton on the free variables with an Armijo search
    /// along the projection arc, falling back to projected steepest descent.
    fn solve_from(&self, mut w: DVector<f64>) -> (DVector<f64>, f64, bool, usize) {
        self.project(&mut w);
        let vm = self.cfg.v_max;
        let dim = w.len();
        let (mut cost, mut g, mut h, _) = self.evaluate(&w);
        let mut iterations = 0;
        let mut converged = false;
        while iterations < self.cfg.max_iters {
            if self.projected_gradient_norm(&w, &g) <= self.cfg.solver_tol * (1.0 + cost) {
                converged = true;
                break;
            }
            iterations += 1;
            let bound_tol = 1e-12;
            let free: Vec<usize> = (0..dim)
                .filter(|&j| !((w[j] <= -vm + bound_tol && g[j] > 0.0) || (w[j] >= vm - bound_tol && g[j] < 0.0)))
                .collect();
            let mut directions = Vec::with_capacity(2);
            if !free.is_empty() {
                let hf = DMatrix::from_fn(free.len(), free.len(), |a, b| h[(free[a], free[b])]);
                let gf = DVector::from_fn(free.len(), |a, _| g[free[a]]);
                let scale = 1e-9 * (1.0 + hf.diagonal().amax());
                let damped = hf + DMatrix::identity(free.len(), free.len()) * scale;
                if let Some(ch) = damped.cholesky() {
                    let df = ch.solve(&(-gf));
                    let mut d = DVector::zeros(dim);
                    for (a, &j) in free.iter().enumerate() {
                        d[j] = df[a];
                    }
                    directions.push(d);
                }
            }
            let gscale = 1.0 / (1.0 + h.diagonal().amax());
            directions.push(-&g * gscale);

            let mut accepted = None;
            'dirs: for d in &directions {
                let mut alpha = 1.0;
                for _ in 0..40 {
                    let mut trial = &w + d * alpha;
                    self.project(&mut trial);
                    let decrease = g.dot(&(&trial - &w));
                    if decrease < 0.0 {
                        let c = self.cost(&trial);
                        if c <= cost + 1e-4 * decrease {
                            accepted = Some((trial, c));
                            break 'dirs;
                        }
                    }
                    alpha *= 0.5;
                }
            }
            let Some((trial, c)) = accepted else {
                // No descent left at machine precision.
                converged = self.projected_gradient_norm(&w, &g) <= 1e-3 * (1.0 + cost).sqrt();
                break;
            };
            let rel = (cost - c) / cost.max(1e-300);
            w = trial;
            let e = self.evaluate(&w);
            cost = e.0;
            g = e.1;
            h = e.2;
            if rel < 1e-12 {
                converged = true;
                break;
            }
        }
        (w, cost, converged, iterations)
    }
}

/// Shifts a previous solution one step forward, repeating its last command.
pub fn shift_warm_start(prev: &MpcSolution, horizon_n: usize) -> Vec<WheelCommand> {
    let mut w: Vec<WheelCommand> = prev.wheels.iter().skip(1).copied().collect();
    let last = prev.wheels.last().copied().unwrap_or(WheelCommand::STOP);
    w.resize(horizon_n, last);
    w
}

/// Minimizes [`mpc_cost`] over wheel commands in the `±v_max` box, starting
/// from the reference inputs, the shifted warm start (if any) and standstill,
/// and keeping the best result.
pub fn mpc_solve(
    x0: &RobotState,
    path: &ReferencePath,
    params: &TractionParams,
    cfg: &MpcConfig,
    vehicle: &VehicleConfig,
    warm_start: Option<&MpcSolution>,
) -> Result<MpcSolution> {
    cfg.validate()?;
    let n = cfg.horizon_n;
    check_inputs(x0, &vec![ControlInput::ZERO; n], path, cfg)?;
    let (mu, nu) = floored(params);
    let problem = Problem {
        x0,
        path,
        cfg,
        factors: cfg.factors()?,
        mu,
        nu,
        map: WheelMap {
            track: vehicle.track_width,
        },
    };
    let pack = |cmds: &[WheelCommand]| {
        DVector::from_iterator(2 * n, cmds.iter().flat_map(|c| [c.v_left, c.v_right]))
    };
    let feedforward: Vec<WheelCommand> = (0..n)
        .map(|i| {
            let (_, ur) = reference_at(path, i, mu, nu);
            problem.map.to_wheels(&ur)
        })
        .collect();
    let mut starts = vec![pack(&feedforward)];
    if let Some(prev) = warm_start {
        starts.push(pack(&shift_warm_start(prev, n)));
    }
    starts.push(DVector::zeros(2 * n));

    let mut best: Option<(DVector<f64>, f64, bool, usize)> = None;
    let mut total_iters = 0;
    for s in starts {
        let r = problem.solve_from(s);
        total_iters += r.3;
        if best.as_ref().is_none_or(|b| r.1 < b.1) {
            best = Some(r);
        }
    }
    let (w, cost, converged, _) = best.expect("at least one start");
    let (cost_check, _, _, states) = problem.evaluate(&w);
    debug_assert!((cost_check - cost).abs() <= 1e-9 * (1.0 + cost));
    let wheels: Vec<WheelCommand> = (0..n).map(|i| WheelCommand::new(w[2 * i], w[2 * i + 1])).collect();
    Ok(MpcSolution {
        inputs: problem.inputs(&w),
        wheels,
        states,
        cost,
        converged,
        iterations: total_iters,
    })
}

/// Reference for one solve: the projection of `x0` onto `path`, then
/// `N + 1` points spaced by the feedforward speed times `dt` along it. Points
/// past the end hold the final state with zero feedforward.
pub fn associate_reference(x0: &RobotState, path: &ReferencePath, cfg: &MpcConfig) -> ReferencePath {
    let pts = &path.points;
    let n = cfg.horizon_n;
    if pts.len() < 2 {
        let last = pts.first().map(|p| p.state).unwrap_or(*x0);
        return ReferencePath::hold(last);
    }
    let mut cum = vec![0.0; pts.len()];
    for i in 1..pts.len() {
        cum[i] = cum[i - 1] + pts[i - 1].state.position().dist(&pts[i].state.position());
    }
    let p = x0.position();
    let mut best = (f64::INFINITY, 0.0);
    for i in 0..pts.len() - 1 {
        let a = pts[i].state.position();
        let b = pts[i + 1].state.position();
        let (q, t) = project_on_segment(&p, &a, &b);
        let d = q.dist(&p);
        if d < best.0 {
            best = (d, cum[i] + t * a.dist(&b));
        }
    }
    let total = *cum.last().unwrap();
    let sample = |s: f64| -> RefPoint {
        if s >= total {
            let last = pts[pts.len() - 1];
            return RefPoint {
                state: last.state,
                v: 0.0,
                omega: 0.0,
            };
        }
        let i = cum.partition_point(|&c| c <= s).clamp(1, pts.len() - 1) - 1;
        let len = (cum[i + 1] - cum[i]).max(1e-12);
        let t = ((s - cum[i]) / len).clamp(0.0, 1.0);
        let (a, b) = (pts[i], pts[i + 1]);
        let pos = a.state.position().add(&b.state.position().sub(&a.state.position()).scale(t));
        let theta = a.state.theta + t * wrap_angle(b.state.theta - a.state.theta);
        RefPoint {
            state: RobotState::new(pos.x, pos.y, wrap_angle(theta)),
            v: a.v + t * (b.v - a.v),
            omega: a.omega + t * (b.omega - a.omega),
        }
    };
    let mut s = best.1;
    let mut out = Vec::with_capacity(n + 1);
    for _ in 0..=n {
        let rp = sample(s);
        s += rp.v.abs() * cfg.dt;
        out.push(rp);
    }
    ReferencePath {
        points: out,
        frame: Frame::World,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TrackerStats {
    pub solves: usize,
    pub failures: usize,
    pub held: usize,
    pub zeroed: usize,
    pub saturated: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackOutput {
    pub command: WheelCommand,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub saturated: bool,
    /// Raised after more than `max_hold_ticks` consecutive solver failures.
    pub alert: bool,
}

/// Wraps [`mpc_solve`] with warm starting and the failure fallback: the
/// previous command is held for up to `max_hold_ticks` failed solves, then
/// the wheels stop.
#[derive(Debug, Clone)]
pub struct MpcTracker {
    pub cfg: MpcConfig,
    pub vehicle: VehicleConfig,
    pub max_hold_ticks: usize,
    pub stats: TrackerStats,
    warm: Option<MpcSolution>,
    last_command: WheelCommand,
    consecutive_failures: usize,
}

impl MpcTracker {
    pub fn new(cfg: MpcConfig, vehicle: VehicleConfig) -> Result<Self> {
        cfg.validate()?;
        vehicle.validate()?;
        Ok(Self {
            cfg,
            vehicle,
            max_hold_ticks: 3,
            stats: TrackerStats::default(),
            warm: None,
            last_command: WheelCommand::STOP,
            consecutive_failures: 0,
        })
    }

    pub fn reset(&mut self) {
        self.warm = None;
        self.last_command = WheelCommand::STOP;
        self.consecutive_failures = 0;
    }

    pub fn last_solution(&self) -> Option<&MpcSolution> {
        self.warm.as_ref()
    }

    pub fn tick(&mut self, estimate: &RobotState, path: &ReferencePath, params: &TractionParams) -> TrackOutput {
        let reference = associate_reference(estimate, path, &self.cfg);
        let result = mpc_solve(estimate, &reference, params, &self.cfg, &self.vehicle, self.warm.as_ref());
        self.accept(result, params)
    }

    /// Turns a solve result into the command to apply.
    pub fn accept(&mut self, result: Result<MpcSolution>, params: &TractionParams) -> TrackOutput {
        self.stats.solves += 1;
        match result {
            Ok(sol) if sol.converged => {
                self.consecutive_failures = 0;
                let u = sol.inputs[0];
                let command = command_for(&u, params.mu, &self.vehicle).clamped(self.cfg.v_max);
                let saturated = sol.saturated(self.cfg.v_max);
                if saturated {
                    self.stats.saturated += 1;
                }
                let out = TrackOutput {
                    command,
                    cost: sol.cost,
                    iterations: sol.iterations,
                    converged: true,
                    saturated,
                    alert: false,
                };
                self.last_command = command;
                self.warm = Some(sol);
                out
            }
            other => {
                self.stats.failures += 1;
                self.consecutive_failures += 1;
                let (cost, iterations) = match &other {
                    Ok(sol) => (sol.cost, sol.iterations),
                    Err(_) => (f64::NAN, 0),
                };
                self.warm = other.ok();
                let alert = self.consecutive_failures > self.max_hold_ticks;
                if alert {
                    self.stats.zeroed += 1;
                    self.last_command = WheelCommand::STOP;
                } else {
                    self.stats.held += 1;
                }
                TrackOutput {
                    command: self.last_command,
                    cost,
                    iterations,
                    converged: false,
                    saturated: false,
                    alert,
                }
            }
        }
    }
}
