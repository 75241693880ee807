use std::fmt::Write as _;

use super::run::{EventRow, TrajectoryRow};
use crate::world::{FieldMap, WaypointPlan};

const WIDTH: f64 = 1400.0;
const HEIGHT: f64 = 700.0;
const PAD: f64 = 40.0;

struct View {
    x0: f64,
    y0: f64,
    sx: f64,
    sy: f64,
}

impl View {
    /// Fits the field bounds into the canvas. Axes are scaled independently
    /// since fields are far longer than they are wide.
    fn new(field: &FieldMap) -> Self {
        let b = &field.bounds;
        Self {
            x0: b.min.x,
            y0: b.max.y,
            sx: (WIDTH - 2.0 * PAD) / (b.max.x - b.min.x).max(1e-9),
            sy: (HEIGHT - 2.0 * PAD) / (b.max.y - b.min.y).max(1e-9),
        }
    }

    fn px(&self, x: f64, y: f64) -> (f64, f64) {
        (PAD + (x - self.x0) * self.sx, PAD + (self.y0 - y) * self.sy)
    }
}

fn polyline(out: &mut String, v: &View, pts: impl Iterator<Item = (f64, f64)>, style: &str) {
    let mut d = String::new();
    for (x, y) in pts {
        let (a, b) = v.px(x, y);
        let _ = write!(d, "{a:.1},{b:.1} ");
    }
    if !d.is_empty() {
        let _ = writeln!(out, r#"<polyline points="{}" {style}/>"#, d.trim_end());
    }
}

/// Top-down SVG of a run: rows, plan, truth and estimated paths, and
/// markers for contacts, recoveries and interventions.
pub fn emit_plot(rows: &[TrajectoryRow], field: &FieldMap, plan: &WaypointPlan, events: &[EventRow]) -> String {
    let v = View::new(field);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="#fdfcf7"/>"##);
    for c in &field.canopy_polygons {
        polyline(
            &mut s,
            &v,
            c.vertices.iter().chain(c.vertices.first()).map(|p| (p.x, p.y)),
            r##"fill="#e3efd9" stroke="none""##,
        );
    }
    let _ = writeln!(s, r##"<g fill="#3d7a2a">"##);
    for stem in field.stems() {
        let (a, b) = v.px(stem.center.x, stem.center.y);
        let _ = writeln!(s, r#"<circle cx="{a:.1}" cy="{b:.1}" r="0.8"/>"#);
    }
    let _ = writeln!(s, "</g>");
    polyline(
        &mut s,
        &v,
        plan.waypoints.iter().map(|w| (w.p.x, w.p.y)),
        r##"fill="none" stroke="#999" stroke-width="1" stroke-dasharray="4 3""##,
    );

    // Split paths at resets so teleports are not drawn as motion.
    let segments = rows.split(|r| r.mode.is_none());
    for seg in segments {
        polyline(
            &mut s,
            &v,
            seg.iter().map(|r| (r.truth.x, r.truth.y)),
            r##"fill="none" stroke="#1f4e9c" stroke-width="1.2""##,
        );
    }
    for seg in rows.split(|r| r.mode.is_none() || r.estimate.is_none()) {
        polyline(
            &mut s,
            &v,
            seg.iter()
                .filter_map(|r| r.estimate.map(|(p, _)| (p.x, p.y))),
            r##"fill="none" stroke="#d9822b" stroke-width="0.8" stroke-opacity="0.8""##,
        );
    }

    for e in events {
        let (a, b) = v.px(e.x, e.y);
        match e.event.as_str() {
            "recovery_start" => {
                let _ = writeln!(
                    s,
                    r##"<circle cx="{a:.1}" cy="{b:.1}" r="5" fill="none" stroke="#e0a800" stroke-width="2"><title>recovery {t:.1} s</title></circle>"##,
                    t = e.t
                );
            }
            "intervention" => {
                let _ = writeln!(
                    s,
                    r##"<g stroke="#c0392b" stroke-width="2.5"><line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}"/><line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}"/><title>intervention {t:.1} s: {d}</title></g>"##,
                    a - 6.0, b - 6.0, a + 6.0, b + 6.0, a - 6.0, b + 6.0, a + 6.0, b - 6.0,
                    t = e.t,
                    d = e.detail
                );
            }
            "contact" => {
                let _ = writeln!(s, r##"<circle cx="{a:.1}" cy="{b:.1}" r="2" fill="#7b2d8e"/>"##);
            }
            _ => {}
        }
    }
    let _ = writeln!(
        s,
        r##"<g font-family="sans-serif" font-size="13"><text x="{PAD}" y="22" fill="#1f4e9c">truth</text><text x="{}" y="22" fill="#d9822b">estimate</text><text x="{}" y="22" fill="#e0a800">recovery</text><text x="{}" y="22" fill="#c0392b">intervention</text><text x="{}" y="22" fill="#7b2d8e">contact</text></g>"##,
        PAD + 60.0,
        PAD + 140.0,
        PAD + 220.0,
        PAD + 320.0
    );
    s.push_str("</svg>\n");
    s
}
