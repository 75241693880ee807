use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::scenario::Scenario;
use crate::control::MpcTracker;
use crate::error::Result;
use crate::estimator::Estimator;
use crate::geometry::Point2;
use crate::model::{inverse_wheel, RobotState, TractionParams, VehicleConfig, WheelCommand};
use crate::perception::LaneTracker;
use crate::sim::{SimConfig, SimState, Simulator};
use crate::supervisor::{Mode, Supervisor, SupervisorEvent, SupervisorInput};
use crate::world::{build_field, serpentine_plan, FieldMap, WaypointPlan};

/// Base simulation tick.
pub const TICK: f64 = 0.01;
pub const IMU_EVERY: u64 = 2;
pub const CONTROL_EVERY: u64 = 5;
pub const LIDAR_EVERY: u64 = 10;
pub const GNSS_EVERY: u64 = 20;
/// Trajectory rows are written every this many ticks.
pub const LOG_EVERY: u64 = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub scenario: String,
    pub seed: u64,
    pub distance_m: f64,
    pub recoveries: usize,
    pub interventions: usize,
    /// Absent when there was no intervention.
    pub meters_per_intervention: Option<f64>,
    pub completion: bool,
    pub failures: usize,
    pub contacts: usize,
    pub sim_time_s: f64,
    pub wall_time_s: f64,
}

impl RunMetrics {
    pub fn per_intervention(distance: f64, interventions: usize) -> Option<f64> {
        (interventions > 0).then(|| distance / interventions as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRow {
    pub t: f64,
    pub truth: RobotState,
    pub estimate: Option<(RobotState, TractionParams)>,
    pub d_lane: f64,
    pub phi: f64,
    /// Supervisor mode, or `None` on the row marking an intervention reset.
    pub mode: Option<Mode>,
    pub command: WheelCommand,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventRow {
    pub t: f64,
    pub event: String,
    pub x: f64,
    pub y: f64,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub trajectory: Vec<TrajectoryRow>,
    pub events: Vec<EventRow>,
    pub field: FieldMap,
    pub plan: WaypointPlan,
}

/// Field, plan and start pose of a scenario.
pub fn prepare(s: &Scenario) -> Result<(FieldMap, WaypointPlan, RobotState)> {
    s.validate()?;
    let field = build_field(&s.field_config(), s.run.seed)?;
    let lanes: Vec<usize> = match &s.plan.lanes {
        Some(l) => l.clone(),
        None => (0..field.lanes.len()).collect(),
    };
    let plan = serpentine_plan(&field, &lanes)?;
    let a = plan.waypoints[0].p;
    let b = plan.waypoints[1].p;
    let dir = b.sub(&a).scale(1.0 / a.dist(&b));
    let p = a.sub(&dir.scale(s.run.start_offset_m));
    let start = RobotState::new(p.x, p.y, dir.y.atan2(dir.x));
    Ok((field, plan, start))
}

fn event(t: f64, name: &str, at: &RobotState, detail: String) -> EventRow {
    EventRow {
        t,
        event: name.into(),
        x: at.x,
        y: at.y,
        detail,
    }
}

/// Runs one scenario to plan completion, the duration limit or the
/// intervention cap.
pub fn run_scenario(s: &Scenario) -> Result<RunOutput> {
    let wall = Instant::now();
    let (field, plan, start) = prepare(s)?;
    let vehicle = VehicleConfig::default();
    let gnss_period = GNSS_EVERY as f64 * TICK;
    let sup_cfg = s.stack.supervisor(gnss_period);
    let mut sim = Simulator::new(
        start,
        vehicle,
        SimConfig::default(),
        s.noise,
        s.lidar_config(),
        s.run.seed,
    );
    let mut estimator = Estimator::new(s.stack.estimator(), vehicle);
    let mut lanes = LaneTracker::new(s.stack.perception(), 0.0);
    let mut supervisor = Supervisor::new(plan.clone(), sup_cfg)?.with_origin(start.position());
    let mut tracker = MpcTracker::new(s.stack.mpc(), vehicle)?;

    let mut trajectory = Vec::new();
    let mut events = vec![event(0.0, "start", &start, s.name.clone())];
    let mut command = WheelCommand::STOP;
    let mut prev_imu: SimState = sim.state;
    let mut mhe_time = 0.0;
    let mut failures = 0;
    let mut contacts = 0;
    let mut was_stuck = false;
    let max_ticks = (s.run.duration_limit_s / TICK).round() as u64;

    for k in 0..=max_ticks {
        let t = k as f64 * TICK;

        if k % IMU_EVERY == 0 {
            let imu = sim.imu(&prev_imu);
            prev_imu = sim.state;
            estimator.on_imu(&imu);
        }
        if k % GNSS_EVERY == 0 {
            let fix = sim.gnss(&field);
            if estimator.on_gnss(&fix).is_some_and(|sol| sol.converged) {
                mhe_time = t;
            }
        }
        if k % LIDAR_EVERY == 0 {
            // Out of the row every scan starts a fresh lane search.
            if !lanes.in_row() {
                lanes.reset_lane(t);
            }
            let cloud = sim.scan(&field);
            if lanes.on_scan(&cloud) {
                let to = if lanes.in_row() { "in_row" } else { "out_row" };
                events.push(event(t, "classifier", &sim.state.truth, to.into()));
            }
        }

        if k % CONTROL_EVERY == 0 {
            let estimate = estimator.estimate().map(|e| (e.pose, e.params));
            let input = SupervisorInput {
                t,
                estimate,
                params_time: mhe_time,
                lane: &lanes.estimate,
                lane_staleness: lanes.staleness(t),
                in_row: lanes.in_row(),
                truth: sim.state.truth,
            };
            let out = supervisor.step(&input);
            let mut reset = None;
            for e in &out.events {
                let truth = sim.state.truth;
                match e {
                    SupervisorEvent::ModeChange { from, to } => {
                        events.push(event(t, "mode", &truth, format!("{}->{}", from.as_str(), to.as_str())))
                    }
                    SupervisorEvent::Failure { mu } => {
                        failures += 1;
                        events.push(event(t, "failure", &truth, format!("mu={mu:.3}")))
                    }
                    SupervisorEvent::RecoveryStart { attempt } => {
                        events.push(event(t, "recovery_start", &truth, format!("attempt={attempt}")))
                    }
                    SupervisorEvent::RecoveryEnd { restored } => {
                        events.push(event(t, "recovery_end", &truth, format!("restored={restored}")))
                    }
                    SupervisorEvent::WaypointReached { index } => {
                        events.push(event(t, "waypoint", &truth, format!("index={index}")))
                    }
                    SupervisorEvent::Intervention { reason, reset: pose } => {
                        events.push(event(t, "intervention", &truth, reason.as_str().into()));
                        reset = Some(*pose);
                    }
                    SupervisorEvent::Completed => events.push(event(t, "completed", &truth, String::new())),
                }
            }

            if let Some(pose) = reset {
                sim.teleport(pose);
                prev_imu = sim.state;
                estimator.reset();
                lanes = LaneTracker::new(s.stack.perception(), t);
                tracker.reset();
                command = WheelCommand::STOP;
                was_stuck = false;
                trajectory.push(TrajectoryRow {
                    t,
                    truth: pose,
                    estimate: None,
                    d_lane: lanes.estimate.d_lane,
                    phi: lanes.estimate.phi,
                    mode: None,
                    command,
                });
            } else {
                command = match (&out.reference, estimate) {
                    (Some(r), Some((pose, params))) => tracker.tick(&pose, r, &params).command,
                    _ => WheelCommand::STOP,
                };
            }
            estimator.record_command(t, &command);

            if k % LOG_EVERY == 0 && reset.is_none() {
                trajectory.push(TrajectoryRow {
                    t,
                    truth: sim.state.truth,
                    estimate,
                    d_lane: lanes.estimate.d_lane,
                    phi: lanes.estimate.phi,
                    mode: Some(supervisor.mode),
                    command,
                });
            }
            let capped = s
                .run
                .max_interventions
                .is_some_and(|m| supervisor.interventions >= m);
            if out.finished || capped {
                break;
            }
        }

        sim.step(&command, &field, TICK)?;
        let params = estimator
            .estimate()
            .map_or(TractionParams::NOMINAL, |e| e.params);
        lanes.predict(&inverse_wheel(&command, &vehicle), &params, TICK);
        if sim.state.stuck && !was_stuck {
            contacts += 1;
            events.push(event(sim.state.clock, "contact", &sim.state.truth, String::new()));
        }
        was_stuck = sim.state.stuck;
    }

    let distance = sim.state.odometer;
    let metrics = RunMetrics {
        scenario: s.name.clone(),
        seed: s.run.seed,
        distance_m: distance,
        recoveries: supervisor.recoveries,
        interventions: supervisor.interventions,
        meters_per_intervention: RunMetrics::per_intervention(distance, supervisor.interventions),
        completion: supervisor.follower.finished(),
        failures,
        contacts,
        sim_time_s: sim.state.clock,
        wall_time_s: wall.elapsed().as_secs_f64(),
    };
    Ok(RunOutput {
        metrics,
        trajectory,
        events,
        field,
        plan,
    })
}

/// Truth path length integrated from the logged trajectory, not counting
/// the jumps at intervention resets.
pub fn logged_path_length(rows: &[TrajectoryRow]) -> f64 {
    rows.windows(2)
        .filter(|w| w[1].mode.is_some())
        .map(|w| {
            let a: Point2 = w[0].truth.position();
            a.dist(&w[1].truth.position())
        })
        .sum()
}
