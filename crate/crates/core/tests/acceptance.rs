//! Acceptance checks, one line per criterion.
//!
//! Run with `cargo test -p cropnav --test acceptance`. Failures are reported
//! on their line and in the summary; set `ACCEPTANCE_STRICT=1` to also make
//! the process exit with status 1 when any criterion fails.

use std::f64::consts::PI;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use cropnav::control::{command_for, mpc_cost, mpc_solve, MpcConfig, MpcTracker};
use cropnav::estimator::{mhe_evaluate, mhe_solve, Estimator, EstimatorConfig, MheConfig, MheMeasurement, MheWindow};
use cropnav::geometry::{wrap_angle, Point2};
use cropnav::harness::{run_ablation, run_scenario, write_events, write_trajectory, Scenario};
use cropnav::model::{inverse_wheel, step, wheel_commands, ControlInput, RobotState, TractionParams, VehicleConfig, WheelCommand};
use cropnav::perception::{detect_rows, LaneEstimate, LaneTracker, PerceptionConfig};
use cropnav::sim::{NoiseConfig, PointCloud2D, SimConfig, Simulator};
use cropnav::supervisor::{detect_failure, Frame, RefPoint, ReferencePath, SupervisorConfig};
use cropnav::world::{build_field, FieldConfig, FieldMap, FrictionZoneSpec, Lane};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn euler(s: &RobotState, u: &ControlInput, p: &TractionParams, dt: f64, n: usize) -> RobotState {
    let h = dt / n as f64;
    let (mut x, mut y, mut th) = (s.x, s.y, s.theta);
    for _ in 0..n {
        x += h * p.mu * u.v * th.cos();
        y += h * p.mu * u.v * th.sin();
        th += h * p.nu * u.omega;
    }
    RobotState::new(x, y, th)
}

fn model_correctness() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    let mut cases = Vec::new();
    for v in [-2.0, 0.0, 2.0] {
        for w in [-2.0, 0.0, 2.0] {
            cases.push((v, w, 0.1));
        }
    }
    for _ in 0..200 {
        cases.push((rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(0.001..0.1)));
    }
    for (v, w, dt) in cases {
        let s = RobotState::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-PI..PI));
        let p = TractionParams::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), 0.0);
        let u = ControlInput::new(v, w);
        let a = step(&s, &u, &p, dt).unwrap();
        let b = euler(&s, &u, &p, dt, 1000);
        let e = (a.x - b.x).abs().max((a.y - b.y).abs()).max(wrap_angle(a.theta - b.theta).abs());
        worst = worst.max(e);
    }
    let vehicle = VehicleConfig::default();
    let mut round_trip: f64 = 0.0;
    for _ in 0..200 {
        let u = ControlInput::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let back = inverse_wheel(&wheel_commands(&u, 1.0, &vehicle).command, &vehicle);
        round_trip = round_trip.max((back.v - u.v).abs()).max((back.omega - u.omega).abs());
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst < 1e-6 && round_trip < 1e-12 && secs < 1.0,
        format!("max |RK4 - Euler(1000)| = {worst:.2e} (tol 1e-6), wheel round trip {round_trip:.1e}, {secs:.2} s"),
    )
}

/// Noiseless window rolled out with a fine Euler integration of the model.
fn mhe_window(truth: TractionParams, start: RobotState, n: usize) -> MheWindow {
    let dt = 0.2;
    let u: Vec<ControlInput> = (0..n)
        .map(|k| ControlInput::new(0.6 + 0.15 * (0.5 * k as f64).sin(), 0.5 * (0.35 * k as f64).cos()))
        .collect();
    let mut states = vec![start];
    for k in 0..n {
        let s = euler(&states[k], &u[k], &truth, dt, 200_000);
        states.push(s);
    }
    let meas = states
        .iter()
        .enumerate()
        .map(|(i, s)| MheMeasurement {
            z_x: s.x,
            z_y: s.y,
            z_theta: wrap_angle(s.theta - truth.delta_theta),
            timestamp: i as f64 * dt,
        })
        .collect();
    MheWindow::with_uniform_inputs(meas, &u, start, TractionParams::NOMINAL)
}

fn mhe_recovery() -> Outcome {
    let t0 = Instant::now();
    let cfg = MheConfig::default();
    let mut worst: f64 = 0.0;
    let mut all_converged = true;
    let triples = [(1.0, 1.0, 0.0), (0.7, 0.9, 0.3), (0.3, 0.5, -1.0)];
    for (mu, nu, dth) in triples {
        let truth = TractionParams::new(mu, nu, dth);
        let w = mhe_window(truth, RobotState::new(2.0, -3.0, 0.6), cfg.horizon_n);
        let sol = mhe_solve(&w, &cfg).unwrap();
        all_converged &= sol.converged;
        worst = worst
            .max((sol.params.mu - mu).abs())
            .max((sol.params.nu - nu).abs())
            .max(wrap_angle(sol.params.delta_theta - dth).abs());
    }

    let w = mhe_window(TractionParams::new(0.7, 0.9, 0.3), RobotState::new(0.0, 0.0, 0.0), cfg.horizon_n);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut grad_err: f64 = 0.0;
    for _ in 0..20 {
        let p = nalgebra::Vector6::new(
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.5..0.5),
            rng.random_range(0.1..1.0),
            rng.random_range(0.1..1.0),
            rng.random_range(-1.0..1.0),
        );
        let g = mhe_evaluate(&w, &cfg, &p).unwrap().gradient;
        for i in 0..6 {
            let h = 1e-6 * (1.0 + p[i].abs());
            let (mut a, mut b) = (p, p);
            a[i] += h;
            b[i] -= h;
            let fd = (mhe_evaluate(&w, &cfg, &a).unwrap().cost - mhe_evaluate(&w, &cfg, &b).unwrap().cost) / (2.0 * h);
            grad_err = grad_err.max((g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1.0));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst < 1e-2 && all_converged && grad_err < 1e-5 && secs < 10.0,
        format!("max parameter error {worst:.2e} (tol 1e-2), gradient rel. error {grad_err:.1e} (tol 1e-5), {secs:.2} s"),
    )
}

/// Drives straight at a small angle into the left row of a lane and
/// keeps pushing. Returns (contact time, time of the first μ̂ below the
/// threshold).
fn stem_push(seed: u64) -> (Option<f64>, Option<f64>) {
    let field = build_field(&FieldConfig::default(), seed).unwrap();
    let lane = &field.lanes[2];
    let angle = 2.5f64.to_radians();
    let start = RobotState::new(lane.start.x + 3.0, lane.start.y, angle);
    let vehicle = VehicleConfig::default();
    let mut sim = Simulator::new(start, vehicle, SimConfig::default(), NoiseConfig::default(), Scenario::default().lidar_config(), seed);
    let mut est = Estimator::new(EstimatorConfig::default(), vehicle);
    let sup = SupervisorConfig::default();
    let cmd = WheelCommand::new(0.5, 0.5);
    let mut prev = sim.state;
    let (mut contact, mut detected) = (None, None);
    for k in 0..4000u64 {
        let t = k as f64 * 0.01;
        if k % 2 == 0 {
            let imu = sim.imu(&prev);
            prev = sim.state;
            est.on_imu(&imu);
        }
        if k % 20 == 0 {
            let fix = sim.gnss(&field);
            est.on_gnss(&fix);
            if let (Some(_), Some(e)) = (contact, est.estimate()) {
                if detected.is_none() && detect_failure(&e.params, &sup) {
                    detected = Some(t);
                    break;
                }
            }
        }
        if k % 5 == 0 {
            est.record_command(t, &cmd);
        }
        sim.step(&cmd, &field, 0.01).unwrap();
        if contact.is_none() && sim.state.stuck {
            assert!(est.estimate().is_some(), "contact before the first estimate");
            contact = Some(sim.state.clock);
        }
    }
    (contact, detected)
}

fn free_driving_scenario(seed: u64) -> Scenario {
    let mut s = Scenario::default().with_seed(seed);
    s.name = "free_driving".into();
    s.field.rows = 2;
    s.field.friction_zones = vec![FrictionZoneSpec {
        polygon: vec![[-20.0, -20.0], [120.0, -20.0], [120.0, 20.0], [-20.0, 20.0]],
        mu: 0.6,
        nu: 0.6,
    }];
    s
}

fn failure_detection() -> Outcome {
    let window = 4.0;
    let pushes: Vec<_> = (0..5).into_par_iter().map(stem_push).collect();
    let mut delays = Vec::new();
    let mut ok = true;
    for (c, d) in &pushes {
        match (c, d) {
            (Some(c), Some(d)) => {
                delays.push(d - c);
                ok &= d - c <= 2.0 * window;
            }
            _ => ok = false,
        }
    }
    let runs: Vec<_> = (0..10)
        .into_par_iter()
        .map(|seed| run_scenario(&free_driving_scenario(seed)).unwrap().metrics)
        .collect();
    let false_triggers: usize = runs.iter().map(|m| m.failures).sum();
    let contacts: usize = runs.iter().map(|m| m.contacts).sum();
    let complete = runs.iter().all(|m| m.completion);
    let max_delay = delays.iter().cloned().fold(0.0, f64::max);
    outcome(
        ok && false_triggers == 0 && complete,
        format!(
            "stem contact detected in {}/5 pushes, max delay {max_delay:.1} s (limit {:.0} s); free driving at mu 0.6: {false_triggers} failures, {contacts} contacts over 10 x 90 m",
            delays.len(),
            2.0 * window
        ),
    )
}

fn lane_frame(lane: &Lane) -> (Point2, f64) {
    let d = lane.end.sub(&lane.start);
    (lane.start, d.y.atan2(d.x))
}

/// Scan of `field` from a pose at lateral offset `d` (left positive) and
/// relative heading `phi` in `lane`.
fn scan_at(field: &FieldMap, lane: &Lane, along: f64, d: f64, phi: f64, seed: u64) -> (PointCloud2D, RobotState) {
    let (origin, heading) = lane_frame(lane);
    let p = origin.add(&Point2::new(along, d).rotate(heading));
    let pose = RobotState::new(p.x, p.y, heading + phi);
    let mut sim = Simulator::new(pose, VehicleConfig::default(), SimConfig::default(), NoiseConfig::default(), Scenario::default().lidar_config(), seed);
    let mut cloud = sim.scan(field);
    cloud.timestamp = 0.0;
    (cloud, pose)
}

fn perception_accuracy() -> Outcome {
    let field = build_field(&FieldConfig::default(), 0).unwrap();
    let cfg = PerceptionConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (mut sd, mut sp, mut missing) = (0.0, 0.0, 0);
    for i in 0..100 {
        let lane = &field.lanes[rng.random_range(0..field.lanes.len())];
        let d = rng.random_range(-0.2..0.2);
        let phi = rng.random_range(-15f64..15.0).to_radians();
        let along = rng.random_range(10.0..80.0);
        let (cloud, _) = scan_at(&field, lane, along, d, phi, 1000 + i);
        let mut tracker = LaneTracker::new(cfg, 0.0);
        tracker.on_scan(&cloud);
        if tracker.last_update.is_none() {
            missing += 1;
            continue;
        }
        sd += (tracker.estimate.d_lane - d).powi(2);
        sp += wrap_angle(tracker.estimate.phi - phi).powi(2);
    }
    let n = (100 - missing).max(1) as f64;
    let (rms_d, rms_phi) = ((sd / n).sqrt(), (sp / n).sqrt().to_degrees());

    // One side removed: only points left of the robot's lane center survive.
    let (mut single_ok, mut single_err) = (0, 0.0f64);
    for i in 0..20 {
        let lane = &field.lanes[i % field.lanes.len()];
        let d = rng.random_range(-0.1..0.1);
        let phi = rng.random_range(-5f64..5.0).to_radians();
        let (mut cloud, pose) = scan_at(&field, lane, 45.0, d, phi, 5000 + i as u64);
        let (origin, heading) = lane_frame(lane);
        cloud.points.retain(|q| {
            let w = pose.position().add(&q.rotate(pose.theta));
            w.sub(&origin).rotate(-heading).y > 0.0
        });
        let det = detect_rows(&cloud, &LaneEstimate::initial(0.0), &cfg);
        if let Some(m) = det.measurement {
            if !m.both_sides {
                single_ok += 1;
                single_err = single_err.max((m.d_lane - d).abs());
            }
        }
    }
    outcome(
        missing == 0 && rms_d <= 0.03 && rms_phi <= 1.5 && single_ok == 20 && single_err <= 0.05,
        format!(
            "RMS d {rms_d:.4} m (tol 0.03), RMS phi {rms_phi:.3} deg (tol 1.5), {missing} scans without update; single-side: {single_ok}/20 valid, max |d err| {single_err:.3} m"
        ),
    )
}

fn classifier() -> Outcome {
    let s = Scenario::builtin("cropnav_recovery").unwrap().with_seed(0);
    let out = run_scenario(&s).unwrap();
    let lanes_traversed = out.plan.len() / 2;
    let flips: Vec<_> = out.events.iter().filter(|e| e.event == "classifier").collect();
    let mut worst: f64 = 0.0;
    let mut exits = 0;
    for e in flips.iter().filter(|e| e.detail == "out_row") {
        exits += 1;
        // Distance along the lane to the nearest row end.
        let p = Point2::new(e.x, e.y);
        let lane = out
            .field
            .lanes
            .iter()
            .min_by(|a, b| {
                let da = (lane_frame(a).0.sub(&p).rotate(-lane_frame(a).1)).y.abs();
                let db = (lane_frame(b).0.sub(&p).rotate(-lane_frame(b).1)).y.abs();
                da.total_cmp(&db)
            })
            .unwrap();
        let (o, h) = lane_frame(lane);
        let s_along = p.sub(&o).rotate(-h).x;
        let len = lane.start.dist(&lane.end);
        worst = worst.max(s_along.abs().min((s_along - len).abs()));
    }
    outcome(
        worst <= 0.5 && flips.len() == 2 * lanes_traversed && exits == lanes_traversed,
        format!(
            "{} flips for {lanes_traversed} lanes (expected {}), worst out-of-row flip {worst:.2} m from the row end (tol 0.5), {} interventions",
            flips.len(),
            2 * lanes_traversed,
            out.metrics.interventions
        ),
    )
}

fn mpc_optimality() -> Outcome {
    let t0 = Instant::now();
    let cfg = MpcConfig {
        horizon_n: 3,
        ..MpcConfig::default()
    };
    let vehicle = VehicleConfig::default();
    let grid: Vec<ControlInput> = [-0.5, 0.0, 0.25, 0.5, 0.75, 1.0]
        .iter()
        .flat_map(|&v| [-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0].map(|w| ControlInput::new(v, w)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst_gap = f64::NEG_INFINITY;
    for _ in 0..20 {
        let p = TractionParams::new(rng.random_range(0.4..1.0), rng.random_range(0.4..1.0), 0.0);
        let v = rng.random_range(0.2..0.8);
        let w = rng.random_range(-0.6..0.6);
        let th0 = rng.random_range(-0.3..0.3);
        let mut s = RobotState::new(0.0, rng.random_range(-0.2..0.2), th0);
        let mut points = vec![RefPoint { state: s, v, omega: w }];
        for _ in 0..3 {
            s = step(&s, &ControlInput::new(v, w), &TractionParams::NOMINAL, cfg.dt).unwrap();
            points.push(RefPoint { state: s, v, omega: w });
        }
        let r = ReferencePath {
            points,
            frame: Frame::World,
        };
        let x0 = RobotState::new(rng.random_range(-0.1..0.1), rng.random_range(-0.2..0.2), rng.random_range(-0.4..0.4));
        let sol = mpc_solve(&x0, &r, &p, &cfg, &vehicle, None).unwrap();
        let feasible: Vec<&ControlInput> = grid
            .iter()
            .filter(|u| command_for(u, p.mu, &vehicle).is_within(cfg.v_max))
            .collect();
        let mut best = f64::INFINITY;
        for a in &feasible {
            for b in &feasible {
                for c in &feasible {
                    best = best.min(mpc_cost(&x0, &[**a, **b, **c], &r, &p, &cfg).unwrap());
                }
            }
        }
        worst_gap = worst_gap.max(sol.cost - best);
    }

    let mut tracker = MpcTracker::new(MpcConfig::default(), vehicle).unwrap();
    let path = ReferencePath {
        points: (0..=600)
            .map(|k| RefPoint {
                state: RobotState::new(0.05 * k as f64, 0.0, 0.0),
                v: 0.5,
                omega: 0.0,
            })
            .collect(),
        frame: Frame::World,
    };
    let mut x = RobotState::new(0.0, 0.1, 0.05);
    let mut tail: f64 = 0.0;
    let p = TractionParams::NOMINAL;
    while x.x < 25.0 {
        let o = tracker.tick(&x, &path, &p);
        x = step(&x, &inverse_wheel(&o.command, &vehicle), &p, 0.05).unwrap();
        if x.x > 20.0 {
            tail = tail.max(x.y.abs());
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst_gap <= 1e-6 && tail < 1e-3 && secs < 30.0,
        format!("solver minus best grid cost at most {worst_gap:.2e} over 20 instances (tol 1e-6), steady-state cross-track {tail:.1e} m (tol 1e-3), {secs:.1} s"),
    )
}

fn ablation_ordering() -> Outcome {
    let t0 = Instant::now();
    let names = ["cropnav_recovery", "cropnav_norecovery", "gnss_only"];
    let scenarios: Vec<Scenario> = names.iter().map(|n| Scenario::builtin(n).unwrap()).collect();
    let seeds: Vec<u64> = (0..10).collect();
    let table = run_ablation(&scenarios, &seeds).unwrap();
    let mpi = |n: &str| table.total(n).unwrap().meters_per_intervention.unwrap_or(f64::INFINITY);
    let (a, b, c) = (mpi(names[0]), mpi(names[1]), mpi(names[2]));
    let secs = t0.elapsed().as_secs_f64();
    let show = |v: f64| if v.is_finite() { format!("{v:.1}") } else { "inf".into() };
    outcome(
        a > b && b > c && a > 90.0 && secs < 600.0,
        format!(
            "m/intervention: recovery {} > no recovery {} > gnss only {}, recovery > 90 m; {secs:.0} s",
            show(a),
            show(b),
            show(c)
        ),
    )
}

fn long_path() -> Outcome {
    let s = Scenario::builtin("long_path").unwrap();
    let runs: Vec<_> = [0u64, 1]
        .into_par_iter()
        .map(|seed| run_scenario(&s.with_seed(seed)).unwrap().metrics)
        .collect();
    let clean = runs.iter().filter(|m| m.completion && m.interventions == 0).count();
    let recoveries: usize = runs.iter().map(|m| m.recoveries).sum();
    let per_run: Vec<String> = runs
        .iter()
        .map(|m| format!("seed {}: {:.0} m, {} rec, {} int", m.seed, m.distance_m, m.recoveries, m.interventions))
        .collect();
    outcome(
        clean >= 1 && recoveries <= 16,
        format!("{clean}/2 clean completions, {recoveries} recoveries (max 16); {}", per_run.join("; ")),
    )
}

fn csv_bytes(s: &Scenario) -> (Vec<u8>, Vec<u8>) {
    let out = run_scenario(s).unwrap();
    let (mut t, mut e) = (Vec::new(), Vec::new());
    write_trajectory(&out.trajectory, &mut t).unwrap();
    write_events(&out.events, &mut e).unwrap();
    (t, e)
}

fn determinism() -> Outcome {
    let cases = [("cropnav_recovery", 4u64), ("gnss_only", 2)];
    let mut same = 0;
    for (name, seed) in cases {
        let s = Scenario::builtin(name).unwrap().with_seed(seed);
        let (a, b) = rayon::join(|| csv_bytes(&s), || csv_bytes(&s));
        if a == b && !a.0.is_empty() {
            same += 1;
        }
    }
    outcome(same == cases.len(), format!("{same}/{} scenarios byte-identical on re-run", cases.len()))
}

type Check = (&'static str, fn() -> Outcome);

fn main() {
    let checks: [Check; 9] = [
        ("model correctness", model_correctness),
        ("MHE parameter recovery", mhe_recovery),
        ("failure detection", failure_detection),
        ("perception accuracy", perception_accuracy),
        ("in-row classifier", classifier),
        ("MPC optimality", mpc_optimality),
        ("ablation ordering", ablation_ordering),
        ("long-path completion", long_path),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some_and(|v| v != "0") {
        std::process::exit(1);
    }
}
