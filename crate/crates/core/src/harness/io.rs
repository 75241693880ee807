use std::fs;
use std::io::Write;
use std::path::Path;

use super::run::{EventRow, RunMetrics, RunOutput, TrajectoryRow};
use super::scenario::Scenario;
use crate::error::{domain, Result};
use crate::model::{RobotState, TractionParams, WheelCommand};
use crate::supervisor::Mode;

pub const TRAJECTORY_HEADER: [&str; 15] = [
    "t", "truth_x", "truth_y", "truth_theta", "est_x", "est_y", "est_theta", "mu_hat", "nu_hat",
    "dtheta_hat", "d_lane", "phi", "mode", "v_left", "v_right",
];
pub const EVENT_HEADER: [&str; 5] = ["t", "event", "x", "y", "detail"];

fn f(v: f64, places: usize) -> String {
    // Avoid "-0.000" so equal runs stay byte-identical regardless of sign noise.
    let s = format!("{v:.places$}");
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    }
}

pub fn write_trajectory<W: Write>(rows: &[TrajectoryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRAJECTORY_HEADER)?;
    for r in rows {
        let (est, params) = match r.estimate {
            Some((p, m)) => (
                [f(p.x, 4), f(p.y, 4), f(p.theta, 5)],
                [f(m.mu, 4), f(m.nu, 4), f(m.delta_theta, 5)],
            ),
            None => Default::default(),
        };
        let mode = r.mode.map_or("reset", |m| m.as_str());
        w.write_record([
            f(r.t, 2),
            f(r.truth.x, 4),
            f(r.truth.y, 4),
            f(r.truth.theta, 5),
            est[0].clone(),
            est[1].clone(),
            est[2].clone(),
            params[0].clone(),
            params[1].clone(),
            params[2].clone(),
            f(r.d_lane, 4),
            f(r.phi, 5),
            mode.to_string(),
            f(r.command.v_left, 4),
            f(r.command.v_right, 4),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_events<W: Write>(rows: &[EventRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(EVENT_HEADER)?;
    for e in rows {
        w.write_record([f(e.t, 2), e.event.clone(), f(e.x, 4), f(e.y, 4), e.detail.clone()])?;
    }
    w.flush()?;
    Ok(())
}

fn parse(s: &str) -> Result<f64> {
    s.parse::<f64>()
        .or_else(|_| domain(format!("bad number '{s}' in run log")))
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != TRAJECTORY_HEADER.len() {
            return domain(format!("trajectory row has {} fields", rec.len()));
        }
        let g = |i: usize| parse(&rec[i]);
        let estimate = if rec[4].is_empty() {
            None
        } else {
            Some((
                RobotState::new(g(4)?, g(5)?, g(6)?),
                TractionParams::new(g(7)?, g(8)?, g(9)?),
            ))
        };
        let mode = match &rec[12] {
            "in_row" => Some(Mode::InRow),
            "out_row" => Some(Mode::OutRow),
            "recovery" => Some(Mode::Recovery),
            _ => None,
        };
        rows.push(TrajectoryRow {
            t: g(0)?,
            truth: RobotState {
                x: g(1)?,
                y: g(2)?,
                theta: g(3)?,
            },
            estimate,
            d_lane: g(10)?,
            phi: g(11)?,
            mode,
            command: WheelCommand::new(g(13)?, g(14)?),
        });
    }
    Ok(rows)
}

pub fn read_events(path: &Path) -> Result<Vec<EventRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(EventRow {
            t: parse(&rec[0])?,
            event: rec[1].to_string(),
            x: parse(&rec[2])?,
            y: parse(&rec[3])?,
            detail: rec[4].to_string(),
        });
    }
    Ok(rows)
}

/// Writes `scenario.toml`, `trajectory.csv`, `events.csv`, `metrics.json`
/// and `trajectory.svg` into `dir`.
pub fn write_run(dir: &Path, scenario: &Scenario, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("scenario.toml"), scenario.to_toml()?)?;
    write_trajectory(&out.trajectory, fs::File::create(dir.join("trajectory.csv"))?)?;
    write_events(&out.events, fs::File::create(dir.join("events.csv"))?)?;
    write_metrics(dir, &out.metrics)?;
    let svg = super::plot::emit_plot(&out.trajectory, &out.field, &out.plan, &out.events);
    fs::write(dir.join("trajectory.svg"), svg)?;
    Ok(())
}

pub fn write_metrics(dir: &Path, m: &RunMetrics) -> Result<()> {
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(m)?)?;
    Ok(())
}
