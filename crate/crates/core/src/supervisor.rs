//! Navigation supervisor: failure detection, mode arbitration, reference
//! generation and the simulated human interventions.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Result};
use crate::geometry::{project_on_segment, wrap_angle, Point2};
use crate::model::{RobotState, TractionParams};
use crate::perception::LaneEstimate;
use crate::world::WaypointPlan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    InRow,
    OutRow,
    Recovery,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::InRow => "in_row",
            Mode::OutRow => "out_row",
            Mode::Recovery => "recovery",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupervisorConfig {
    pub mu_failure: f64,
    /// μ̂ must exceed `mu_failure + recovery_hysteresis` to end a recovery early.
    pub recovery_hysteresis: f64,
    pub recovery_duration: f64,
    /// A recovery that neither restores traction nor finishes its path is
    /// abandoned after this long.
    pub recovery_timeout_s: f64,
    pub buffer_span: f64,
    /// Minimum displacement between buffered states.
    pub buffer_min_step: f64,
    pub max_consecutive_recoveries: usize,
    pub cruise_speed: f64,
    pub capture_radius: f64,
    pub lookahead_m: f64,
    pub ref_spacing_m: f64,
    pub lane_stale_timeout: f64,
    pub recovery_fallback_m: f64,
    /// Time for the MHE window to refresh after a recovery before a new
    /// failure can be declared while μ̂ is still low.
    pub failure_rearm_s: f64,
    pub corridor_m: f64,
    pub corridor_time_s: f64,
    pub no_progress_time_s: f64,
    pub progress_epsilon_m: f64,
    /// Progress past a failure location that clears the recovery streak.
    pub streak_clear_m: f64,
    /// How far along the plan a reset places the robot.
    pub reset_advance_m: f64,
    pub recovery_enabled: bool,
    pub perception_enabled: bool,
}

impl Default for SupervisorConfig {
    fn default() -> Self {
        Self {
            mu_failure: 0.2,
            recovery_hysteresis: 0.1,
            recovery_duration: 5.0,
            recovery_timeout_s: 10.0,
            buffer_span: 15.0,
            buffer_min_step: 0.02,
            max_consecutive_recoveries: 3,
            cruise_speed: 0.5,
            capture_radius: 0.5,
            lookahead_m: 3.0,
            ref_spacing_m: 0.05,
            lane_stale_timeout: 1.0,
            recovery_fallback_m: 0.5,
            failure_rearm_s: 4.0,
            corridor_m: 1.0,
            corridor_time_s: 5.0,
            no_progress_time_s: 30.0,
            progress_epsilon_m: 0.5,
            streak_clear_m: 1.0,
            reset_advance_m: 1.0,
            recovery_enabled: true,
            perception_enabled: true,
        }
    }
}

impl SupervisorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu_failure > 0.0 && self.mu_failure < 1.0) {
            return config(format!("mu_failure must lie in (0, 1), got {}", self.mu_failure));
        }
        if self.max_consecutive_recoveries == 0 {
            return config("max_consecutive_recoveries must be positive");
        }
        let positive = [
            self.recovery_duration,
            self.buffer_span,
            self.cruise_speed,
            self.capture_radius,
            self.lookahead_m,
            self.ref_spacing_m,
            self.lane_stale_timeout,
            self.recovery_fallback_m,
            self.corridor_m,
            self.corridor_time_s,
            self.no_progress_time_s,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return config("supervisor durations and distances must be positive");
        }
        if self.buffer_span < self.recovery_duration {
            return config("recovery buffer must span at least the recovery duration");
        }
        Ok(())
    }
}

/// True iff `μ < μ_failure`.
pub fn detect_failure(params: &TractionParams, cfg: &SupervisorConfig) -> bool {
    params.mu < cfg.mu_failure
}

/// Failure first, then an unfinished recovery, then the classifier.
pub fn update_mode(current: Mode, in_row: bool, failure: bool, recovery_done: bool) -> Mode {
    if failure || (current == Mode::Recovery && !recovery_done) {
        Mode::Recovery
    } else if in_row {
        Mode::InRow
    } else {
        Mode::OutRow
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Frame {
    World,
    Robot,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefPoint {
    pub state: RobotState,
    /// Feedforward body speed (negative when reversing).
    pub v: f64,
    pub omega: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferencePath {
    pub points: Vec<RefPoint>,
    pub frame: Frame,
}

impl ReferencePath {
    /// Expresses a robot-frame path in the world frame given the robot pose.
    pub fn to_world(&self, pose: &RobotState) -> ReferencePath {
        if self.frame == Frame::World {
            return self.clone();
        }
        let origin = pose.position();
        let points = self
            .points
            .iter()
            .map(|p| {
                let q = p.state.position().rotate(pose.theta).add(&origin);
                RefPoint {
                    state: RobotState::new(q.x, q.y, p.state.theta + pose.theta),
                    ..*p
                }
            })
            .collect();
        ReferencePath {
            points,
            frame: Frame::World,
        }
    }

    /// Stationary reference at one pose.
    pub fn hold(pose: RobotState) -> ReferencePath {
        ReferencePath {
            points: vec![RefPoint {
                state: pose,
                v: 0.0,
                omega: 0.0,
            }],
            frame: Frame::World,
        }
    }

    pub fn is_hold(&self) -> bool {
        self.points.iter().all(|p| p.v == 0.0)
    }
}

/// Resamples a polyline at `spacing` with tangent headings and feedforward
/// `(v, v·κ)`. Headings follow the direction of travel when `v ≥ 0` and the
/// reverse of it otherwise (the robot backs along the path).
fn resample(poly: &[Point2], spacing: f64, v: f64, frame: Frame) -> ReferencePath {
    let mut pts: Vec<Point2> = Vec::new();
    let mut seg_heading: Vec<f64> = Vec::new();
    for w in poly.windows(2) {
        let (a, b) = (w[0], w[1]);
        let len = a.dist(&b);
        if len < 1e-9 {
            continue;
        }
        let h = (b.y - a.y).atan2(b.x - a.x);
        let n = (len / spacing).ceil() as usize;
        for k in 0..n {
            pts.push(a.add(&b.sub(&a).scale(k as f64 / n as f64)));
            seg_heading.push(h);
        }
    }
    if let (Some(&last), Some(&h)) = (poly.last(), seg_heading.last()) {
        pts.push(last);
        seg_heading.push(h);
    }
    if pts.is_empty() {
        let p = poly.first().copied().unwrap_or_default();
        return ReferencePath::hold(RobotState::new(p.x, p.y, 0.0));
    }
    let flip = if v < 0.0 { std::f64::consts::PI } else { 0.0 };
    let n = pts.len();
    let points = (0..n)
        .map(|i| {
            let omega = if i + 1 < n {
                let ds = pts[i].dist(&pts[i + 1]).max(1e-9);
                v.abs() * wrap_angle(seg_heading[i + 1] - seg_heading[i]) / ds
            } else {
                0.0
            };
            RefPoint {
                state: RobotState::new(pts[i].x, pts[i].y, seg_heading[i] + flip),
                v,
                omega,
            }
        })
        .collect();
    ReferencePath { points, frame }
}

/// Progress along a waypoint plan. `next` is the waypoint currently steered
/// to; it only moves forward (except through `reset_to`).
#[derive(Debug, Clone, PartialEq)]
pub struct WaypointFollower {
    pub plan: WaypointPlan,
    pub next: usize,
}

impl WaypointFollower {
    pub fn new(plan: WaypointPlan) -> Result<Self> {
        if plan.is_empty() {
            return domain("waypoint plan is empty");
        }
        Ok(Self { plan, next: 0 })
    }

    pub fn finished(&self) -> bool {
        self.next >= self.plan.len()
    }

    /// Consumes waypoints the robot has reached (within the capture radius
    /// or past the perpendicular through the waypoint). Returns the indices
    /// consumed this call.
    pub fn advance(&mut self, pose: &RobotState, cfg: &SupervisorConfig) -> Vec<usize> {
        let mut done = Vec::new();
        let p = pose.position();
        while self.next < self.plan.len() {
            let w = self.plan.waypoints[self.next].p;
            let reached = p.dist(&w) <= cfg.capture_radius;
            let passed = self.next > 0 && {
                let a = self.plan.waypoints[self.next - 1].p;
                let dir = w.sub(&a);
                dir.norm() > 1e-9 && p.sub(&w).dot(&dir) >= 0.0
            };
            if reached || passed {
                done.push(self.next);
                self.next += 1;
            } else {
                break;
            }
        }
        done
    }

    /// Moves progress so that `next` is the end of segment `seg`.
    pub fn reset_to(&mut self, seg: usize) {
        self.next = (seg + 1).min(self.plan.len());
    }
}

/// Reference along the plan from the robot's projection on the active
/// segment through the following waypoints, `lookahead_m` long.
pub fn waypoint_reference(
    follower: &WaypointFollower,
    pose: &RobotState,
    cfg: &SupervisorConfig,
) -> ReferencePath {
    let wps = &follower.plan.waypoints;
    if follower.finished() {
        let last = wps[wps.len() - 1].p;
        let heading = if wps.len() >= 2 {
            let a = wps[wps.len() - 2].p;
            (last.y - a.y).atan2(last.x - a.x)
        } else {
            pose.theta
        };
        return ReferencePath::hold(RobotState::new(last.x, last.y, heading));
    }
    let p = pose.position();
    let start = if follower.next == 0 {
        p
    } else {
        let a = wps[follower.next - 1].p;
        let b = wps[follower.next].p;
        project_on_segment(&p, &a, &b).0
    };
    let mut poly = vec![start];
    let mut remaining = cfg.lookahead_m;
    let mut cursor = start;
    for w in &wps[follower.next..] {
        let d = cursor.dist(&w.p);
        if d >= remaining {
            let dir = w.p.sub(&cursor).scale(1.0 / d);
            poly.push(cursor.add(&dir.scale(remaining)));
            remaining = 0.0;
            break;
        }
        poly.push(w.p);
        remaining -= d;
        cursor = w.p;
    }
    if remaining > 0.0 && poly.len() == 1 {
        let w = wps[follower.next].p;
        return ReferencePath::hold(RobotState::new(w.x, w.y, pose.theta));
    }
    resample(&poly, cfg.ref_spacing_m, cfg.cruise_speed, Frame::World)
}

/// Lane-center line in the robot frame: offset `−d_lane`, relative heading
/// `−φ`. Fails when the last accepted lane measurement is older than the
/// stale timeout.
pub fn lane_reference(
    est: &LaneEstimate,
    staleness: f64,
    cfg: &SupervisorConfig,
) -> Result<ReferencePath> {
    if !est.tracking || !(staleness <= cfg.lane_stale_timeout) {
        return domain(format!("lane estimate is stale ({staleness:.2} s)"));
    }
    let n = (cfg.lookahead_m / cfg.ref_spacing_m).ceil() as usize;
    let (s, c) = (-est.phi).sin_cos();
    let points = (0..=n)
        .map(|k| {
            let along = k as f64 * cfg.ref_spacing_m;
            // Lane-frame point (along, 0) seen from the robot at (0, d_lane).
            let (lx, ly) = (along, -est.d_lane);
            RefPoint {
                state: RobotState::new(c * lx - s * ly, s * lx + c * ly, -est.phi),
                v: cfg.cruise_speed,
                omega: 0.0,
            }
        })
        .collect();
    Ok(ReferencePath {
        points,
        frame: Frame::Robot,
    })
}

/// Recently visited estimated states, spaced by at least `min_step`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RecoveryBuffer {
    entries: VecDeque<(RobotState, f64)>,
    span: f64,
    min_step: f64,
}

impl RecoveryBuffer {
    pub fn new(span: f64, min_step: f64) -> Self {
        Self {
            entries: VecDeque::new(),
            span,
            min_step,
        }
    }

    pub fn push(&mut self, state: RobotState, t: f64) {
        if let Some((last, lt)) = self.entries.back() {
            if t <= *lt || last.position().dist(&state.position()) < self.min_step {
                return;
            }
        }
        self.entries.push_back((state, t));
        while self.entries.front().is_some_and(|(_, t0)| t - t0 > self.span) {
            self.entries.pop_front();
        }
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &(RobotState, f64)> {
        self.entries.iter()
    }

    /// Time covered by the buffered motion.
    pub fn duration(&self) -> f64 {
        match (self.entries.front(), self.entries.back()) {
            (Some(a), Some(b)) => b.1 - a.1,
            _ => 0.0,
        }
    }
}

/// The last `recovery_duration` seconds of buffered motion, newest first,
/// with reverse feedforward. A buffer shorter than that yields a straight
/// reverse of `recovery_fallback_m` from `pose`.
pub fn recovery_reference(buf: &RecoveryBuffer, pose: &RobotState, cfg: &SupervisorConfig) -> ReferencePath {
    let v = -cfg.cruise_speed;
    if buf.duration() + 1e-9 < cfg.recovery_duration || buf.len() < 2 {
        let back = Point2::new(-pose.theta.cos(), -pose.theta.sin()).scale(cfg.recovery_fallback_m);
        let p = pose.position();
        let poly = [p, p.add(&back)];
        return resample(&poly, cfg.ref_spacing_m, v, Frame::World);
    }
    let t_end = buf.entries.back().map(|e| e.1).unwrap_or(0.0);
    let mut points: Vec<RefPoint> = buf
        .entries
        .iter()
        .rev()
        .take_while(|(_, t)| t_end - t <= cfg.recovery_duration + 1e-9)
        .map(|(s, _)| RefPoint {
            state: *s,
            v,
            omega: 0.0,
        })
        .collect();
    let n = points.len();
    for i in 0..n.saturating_sub(1) {
        let ds = points[i].state.position().dist(&points[i + 1].state.position()).max(1e-9);
        points[i].omega = v.abs() * wrap_angle(points[i + 1].state.theta - points[i].state.theta) / ds;
    }
    ReferencePath {
        points,
        frame: Frame::World,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InterventionReason {
    RecoveriesExhausted,
    CorridorViolation,
    NoProgress,
}

impl InterventionReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            InterventionReason::RecoveriesExhausted => "recoveries_exhausted",
            InterventionReason::CorridorViolation => "corridor",
            InterventionReason::NoProgress => "no_progress",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SupervisorEvent {
    ModeChange { from: Mode, to: Mode },
    Failure { mu: f64 },
    RecoveryStart { attempt: usize },
    RecoveryEnd { restored: bool },
    WaypointReached { index: usize },
    Intervention { reason: InterventionReason, reset: RobotState },
    Completed,
}

/// Snapshot of everything the supervisor reads on one control tick.
#[derive(Debug, Clone, Copy)]
pub struct SupervisorInput<'a> {
    pub t: f64,
    /// Estimated pose and parameters; `None` while the estimator warms up.
    pub estimate: Option<(RobotState, TractionParams)>,
    /// Time of the MHE solution behind `estimate`.
    pub params_time: f64,
    pub lane: &'a LaneEstimate,
    pub lane_staleness: f64,
    pub in_row: bool,
    /// Ground truth, used only by the intervention rules (the human observer).
    pub truth: RobotState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisorOutput {
    pub mode: Mode,
    /// `None` means stop (no estimate yet).
    pub reference: Option<ReferencePath>,
    pub events: Vec<SupervisorEvent>,
    pub finished: bool,
}

#[derive(Debug, Clone)]
pub struct Supervisor {
    pub cfg: SupervisorConfig,
    pub mode: Mode,
    pub follower: WaypointFollower,
    pub buffer: RecoveryBuffer,
    pub recoveries: usize,
    pub interventions: usize,
    recovery_path: Option<ReferencePath>,
    recovery_healthy_since: Option<f64>,
    recovery_started_at: f64,
    recovery_ended_at: Option<f64>,
    streak: usize,
    streak_arc: f64,
    corridor_since: Option<f64>,
    best_arc: f64,
    best_arc_time: f64,
    cumulative: Vec<f64>,
    completed: bool,
    last_t: Option<f64>,
    origin: Option<Point2>,
}

impl Supervisor {
    pub fn new(plan: WaypointPlan, cfg: SupervisorConfig) -> Result<Self> {
        cfg.validate()?;
        let cumulative = plan.cumulative();
        Ok(Self {
            cfg,
            mode: Mode::OutRow,
            follower: WaypointFollower::new(plan)?,
            buffer: RecoveryBuffer::new(cfg.buffer_span, cfg.buffer_min_step),
            recoveries: 0,
            interventions: 0,
            recovery_path: None,
            recovery_healthy_since: None,
            recovery_started_at: 0.0,
            recovery_ended_at: None,
            streak: 0,
            streak_arc: f64::NEG_INFINITY,
            corridor_since: None,
            best_arc: f64::NEG_INFINITY,
            best_arc_time: 0.0,
            cumulative,
            completed: false,
            last_t: None,
            origin: None,
        })
    }

    /// Declares where the robot starts, so the approach to the first
    /// waypoint is part of the observed path.
    pub fn with_origin(mut self, origin: Point2) -> Self {
        self.origin = Some(origin);
        self
    }

    pub fn plan(&self) -> &WaypointPlan {
        &self.follower.plan
    }

    /// Arc length of the truth projected onto the segments around progress.
    fn truth_projection(&self, truth: &RobotState) -> Option<(Point2, usize, f64, f64)> {
        let n = self.follower.plan.len();
        if n < 2 {
            return None;
        }
        let next = self.follower.next.min(n - 1);
        let first = next.saturating_sub(1);
        let last = next.min(n - 2);
        self.follower.plan.nearest_on_segments(&truth.position(), first, last)
    }

    /// Closest plan point and its arc length as seen by the observer. Before
    /// the first waypoint the approach leg from the origin counts, with
    /// negative arc length.
    fn observed_progress(&self, truth: &RobotState) -> Option<(Point2, f64)> {
        if let (0, Some(o)) = (self.follower.next, self.origin) {
            let w = self.follower.plan.waypoints[0].p;
            let (q, t) = project_on_segment(&truth.position(), &o, &w);
            return Some((q, (t - 1.0) * o.dist(&w)));
        }
        self.truth_projection(truth).map(|(q, _, s, _)| (q, s))
    }

    /// Pose a human would put the robot back at: on the plan near the
    /// current progress, `reset_advance_m` further along, aligned with it.
    pub fn reset_pose(&self, truth: &RobotState) -> (RobotState, usize) {
        let plan = &self.follower.plan;
        let Some((_, seg, s, _)) = self.truth_projection(truth) else {
            let w = plan.waypoints[0].p;
            return (RobotState::new(w.x, w.y, truth.theta), 0);
        };
        let target = (s + self.cfg.reset_advance_m).min(*self.cumulative.last().unwrap());
        let mut seg = seg;
        while seg + 2 < plan.len() && self.cumulative[seg + 1] < target {
            seg += 1;
        }
        let a = plan.waypoints[seg].p;
        let b = plan.waypoints[seg + 1].p;
        let len = a.dist(&b).max(1e-9);
        let t = ((target - self.cumulative[seg]) / len).clamp(0.0, 1.0);
        let p = a.add(&b.sub(&a).scale(t));
        (RobotState::new(p.x, p.y, (b.y - a.y).atan2(b.x - a.x)), seg)
    }

    fn intervene(&mut self, reason: InterventionReason, input: &SupervisorInput) -> SupervisorEvent {
        let (reset, seg) = self.reset_pose(&input.truth);
        self.interventions += 1;
        self.follower.reset_to(seg);
        self.mode = Mode::OutRow;
        self.buffer.clear();
        self.recovery_path = None;
        self.recovery_healthy_since = None;
        self.recovery_ended_at = None;
        self.streak = 0;
        self.streak_arc = f64::NEG_INFINITY;
        self.corridor_since = None;
        self.best_arc = f64::NEG_INFINITY;
        self.best_arc_time = input.t;
        SupervisorEvent::Intervention { reason, reset }
    }

    /// One control tick. When the returned events contain an
    /// `Intervention`, the caller must move the robot to the reset pose and
    /// re-initialize estimation and perception.
    pub fn step(&mut self, input: &SupervisorInput) -> SupervisorOutput {
        let mut events = Vec::new();
        let cfg = self.cfg;
        // The progress clock pauses while the robot handles a failure itself.
        if let Some(lt) = self.last_t {
            if self.mode == Mode::Recovery {
                self.best_arc_time += input.t - lt;
            }
        }
        self.last_t = Some(input.t);

        // Observer side: corridor and progress, on truth.
        if let Some((q, s)) = self.observed_progress(&input.truth) {
            if s > self.best_arc + cfg.progress_epsilon_m || self.best_arc == f64::NEG_INFINITY {
                self.best_arc = self.best_arc.max(s);
                self.best_arc_time = input.t;
            }
            if s > self.streak_arc + cfg.streak_clear_m {
                self.streak = 0;
            }
            if q.dist(&input.truth.position()) > cfg.corridor_m {
                let since = *self.corridor_since.get_or_insert(input.t);
                if input.t - since > cfg.corridor_time_s && !self.completed {
                    events.push(self.intervene(InterventionReason::CorridorViolation, input));
                    return self.output(None, events);
                }
            } else {
                self.corridor_since = None;
            }
        }
        if !self.completed && input.t - self.best_arc_time > cfg.no_progress_time_s {
            events.push(self.intervene(InterventionReason::NoProgress, input));
            return self.output(None, events);
        }

        let Some((pose, params)) = input.estimate else {
            return self.output(None, events);
        };
        self.buffer.push(pose, input.t);
        for index in self.follower.advance(&pose, &cfg) {
            events.push(SupervisorEvent::WaypointReached { index });
        }
        if self.follower.finished() && !self.completed {
            self.completed = true;
            events.push(SupervisorEvent::Completed);
        }

        // Failure is edge-like: not while recovering, and after a recovery
        // only once μ̂ came back or the MHE window had time to refresh.
        let armed = self.mode != Mode::Recovery
            && self.recovery_ended_at.is_none_or(|te| {
                params.mu >= cfg.mu_failure || input.t - te >= cfg.failure_rearm_s
            });
        if self.recovery_ended_at.is_some() && params.mu >= cfg.mu_failure {
            self.recovery_ended_at = None;
        }
        let failed = armed && !self.completed && detect_failure(&params, &cfg);
        let mut failure = false;
        if failed {
            events.push(SupervisorEvent::Failure { mu: params.mu });
            if cfg.recovery_enabled {
                if self.streak >= cfg.max_consecutive_recoveries {
                    events.push(self.intervene(InterventionReason::RecoveriesExhausted, input));
                    return self.output(None, events);
                }
                failure = true;
                self.recovery_path = Some(recovery_reference(&self.buffer, &pose, &cfg));
                self.recovery_healthy_since = None;
                self.recovery_started_at = input.t;
                self.recoveries += 1;
                self.streak += 1;
                if let Some((_, s)) = self.observed_progress(&input.truth) {
                    self.streak_arc = s;
                }
                events.push(SupervisorEvent::RecoveryStart { attempt: self.streak });
            }
        }

        let mut recovery_done = false;
        if self.mode == Mode::Recovery && !failure {
            let restored = params.mu > cfg.mu_failure + cfg.recovery_hysteresis;
            if restored {
                self.recovery_healthy_since.get_or_insert(input.params_time);
            } else {
                self.recovery_healthy_since = None;
            }
            let healthy_long = self
                .recovery_healthy_since
                .is_some_and(|t0| input.t - t0 >= cfg.failure_rearm_s);
            let consumed = self.recovery_consumed(&pose);
            let timed_out = input.t - self.recovery_started_at >= cfg.recovery_timeout_s;
            if healthy_long || consumed || timed_out {
                recovery_done = true;
                self.recovery_path = None;
                self.recovery_ended_at = Some(input.t);
                events.push(SupervisorEvent::RecoveryEnd { restored });
            }
        }

        let in_row = cfg.perception_enabled && input.in_row;
        let next_mode = update_mode(self.mode, in_row, failure, recovery_done);
        if next_mode != self.mode {
            events.push(SupervisorEvent::ModeChange {
                from: self.mode,
                to: next_mode,
            });
            self.mode = next_mode;
        }

        let reference = match self.mode {
            Mode::Recovery => self
                .recovery_path
                .clone()
                .unwrap_or_else(|| ReferencePath::hold(pose)),
            Mode::InRow => match lane_reference(input.lane, input.lane_staleness, &cfg) {
                Ok(r) => r.to_world(&pose),
                Err(_) => waypoint_reference(&self.follower, &pose, &cfg),
            },
            Mode::OutRow => waypoint_reference(&self.follower, &pose, &cfg),
        };
        self.output(Some(reference), events)
    }

    /// The recovery path counts as consumed once the robot is within reach
    /// of its final state or has passed it.
    fn recovery_consumed(&self, pose: &RobotState) -> bool {
        let Some(path) = &self.recovery_path else {
            return true;
        };
        let Some(last) = path.points.last() else {
            return true;
        };
        let p = pose.position();
        let end = last.state.position();
        if p.dist(&end) < 0.1 {
            return true;
        }
        if path.points.len() >= 2 {
            let prev = path.points[path.points.len() - 2].state.position();
            let dir = end.sub(&prev);
            return dir.norm() > 1e-9 && p.sub(&end).dot(&dir) > 0.0;
        }
        false
    }

    fn output(&self, reference: Option<ReferencePath>, events: Vec<SupervisorEvent>) -> SupervisorOutput {
        SupervisorOutput {
            mode: self.mode,
            reference,
            events,
            finished: self.completed,
        }
    }
}
