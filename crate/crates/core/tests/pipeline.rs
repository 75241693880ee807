use proptest::prelude::*;

use cropnav::control::{mpc_solve, MpcConfig};
use cropnav::estimator::{Estimator, EstimatorConfig};
use cropnav::geometry::wrap_angle;
use cropnav::model::{inverse_wheel, step, wheel_commands, ControlInput, RobotState, TractionParams, VehicleConfig};
use cropnav::sim::{LidarConfig, NoiseConfig, SimConfig, Simulator};
use cropnav::supervisor::{update_mode, Frame, Mode, RefPoint, ReferencePath};
use cropnav::world::{build_field, FieldConfig, FrictionZoneSpec};

/// Drives the simulator in open ground with a gentle weave and feeds every
/// sensor to the estimator; returns the final estimate.
fn estimate_in_open_ground(mu: f64, nu: f64, seconds: f64) -> (RobotState, TractionParams, RobotState) {
    let cfg = FieldConfig {
        rows: 2,
        row_length_m: 10.0,
        friction_zones: vec![FrictionZoneSpec {
            polygon: vec![[-100.0, -100.0], [100.0, -100.0], [100.0, 100.0], [-100.0, 100.0]],
            mu,
            nu,
        }],
        ..FieldConfig::default()
    };
    let field = build_field(&cfg, 0).unwrap();
    let vehicle = VehicleConfig::default();
    let start = RobotState::new(-6.0, -5.0, 0.3);
    let mut sim = Simulator::new(start, vehicle, SimConfig::default(), NoiseConfig::default(), LidarConfig::default(), 4);
    let mut est = Estimator::new(EstimatorConfig::default(), vehicle);
    let mut prev = sim.state;
    let ticks = (seconds / 0.01) as u64;
    for k in 0..ticks {
        let t = k as f64 * 0.01;
        let u = ControlInput::new(0.6, 0.3 * (0.4 * t).sin());
        let cmd = wheel_commands(&u, 1.0, &vehicle).command;
        if k % 2 == 0 {
            let imu = sim.imu(&prev);
            prev = sim.state;
            est.on_imu(&imu);
        }
        if k % 20 == 0 {
            let fix = sim.gnss(&field);
            est.on_gnss(&fix);
        }
        if k % 5 == 0 {
            est.record_command(t, &cmd);
        }
        sim.step(&cmd, &field, 0.01).unwrap();
    }
    let e = est.estimate().unwrap();
    (e.pose, e.params, sim.state.truth)
}

#[test]
fn estimator_tracks_open_ground_traction() {
    for (mu, nu) in [(1.0, 1.0), (0.6, 0.5)] {
        let (pose, params, truth) = estimate_in_open_ground(mu, nu, 20.0);
        assert!((params.mu - mu).abs() < 0.1, "mu {mu}: {params:?}");
        assert!((params.nu - nu).abs() < 0.15, "nu {nu}: {params:?}");
        assert!(pose.position().dist(&truth.position()) < 0.1);
        assert!(wrap_angle(pose.theta - truth.theta).abs() < 0.05);
    }
}

#[test]
fn no_estimate_before_a_full_window() {
    let vehicle = VehicleConfig::default();
    let est = Estimator::new(EstimatorConfig::default(), vehicle);
    assert!(est.estimate().is_none());
}

fn arc_path(x0: f64, y0: f64, th0: f64, v: f64, w: f64, n: usize) -> ReferencePath {
    let mut s = RobotState::new(x0, y0, th0);
    let mut points = Vec::with_capacity(n + 1);
    for _ in 0..=n {
        points.push(RefPoint { state: s, v, omega: w });
        s = step(&s, &ControlInput::new(v, w), &TractionParams::NOMINAL, 0.1).unwrap();
    }
    ReferencePath {
        points,
        frame: Frame::World,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mpc_commands_stay_in_the_box(
        y in -1.0f64..1.0,
        th in -1.5f64..1.5,
        v in -1.0f64..1.0,
        w in -1.5f64..1.5,
        mu in 0.05f64..1.0,
        nu in 0.05f64..1.0,
    ) {
        let cfg = MpcConfig::default();
        let path = arc_path(0.0, 0.0, 0.0, v, w, cfg.horizon_n);
        let sol = mpc_solve(&RobotState::new(0.0, y, th), &path, &TractionParams::new(mu, nu, 0.0), &cfg, &VehicleConfig::default(), None).unwrap();
        prop_assert_eq!(sol.wheels.len(), cfg.horizon_n);
        prop_assert!(sol.wheels.iter().all(|c| c.is_within(cfg.v_max)));
        prop_assert!(sol.cost.is_finite() && sol.cost >= 0.0);
    }

    #[test]
    fn wheel_map_round_trip_at_full_traction(v in -2.0f64..2.0, w in -3.0f64..3.0) {
        let vehicle = VehicleConfig::default();
        let u = ControlInput::new(v, w);
        let m = wheel_commands(&u, 1.0, &vehicle);
        prop_assert!(!m.mu_clamped);
        let back = inverse_wheel(&m.command, &vehicle);
        prop_assert!((back.v - v).abs() < 1e-12 && (back.omega - w).abs() < 1e-12);
    }

    #[test]
    fn failure_always_wins(current in 0usize..3, in_row: bool, done: bool) {
        let modes = [Mode::InRow, Mode::OutRow, Mode::Recovery];
        prop_assert_eq!(update_mode(modes[current], in_row, true, done), Mode::Recovery);
        let next = update_mode(modes[current], in_row, false, done);
        if modes[current] == Mode::Recovery && !done {
            prop_assert_eq!(next, Mode::Recovery);
        } else {
            prop_assert_eq!(next, if in_row { Mode::InRow } else { Mode::OutRow });
        }
    }

    #[test]
    fn simulator_never_enters_a_stem(seed in 0u64..1000, turn in -0.4f64..0.4) {
        let field = build_field(&FieldConfig { rows: 3, row_length_m: 10.0, ..FieldConfig::default() }, seed).unwrap();
        let lane = field.lanes[0];
        let vehicle = VehicleConfig::default();
        let start = RobotState::new(lane.start.x + 1.0, lane.start.y, 0.0);
        let mut sim = Simulator::new(start, vehicle, SimConfig::default(), NoiseConfig::default(), LidarConfig::default(), seed);
        let cmd = wheel_commands(&ControlInput::new(0.8, turn), 1.0, &vehicle).command;
        for _ in 0..500 {
            sim.step(&cmd, &field, 0.01).unwrap();
            let p = sim.state.truth.position();
            // The body contains the disk of its half width around the center.
            for stem in field.stems() {
                prop_assert!(stem.center.dist(&p) >= stem.radius + vehicle.body_half_width - 1e-9);
            }
        }
    }
}
