//! Ground-truth row-crop field: stems, lanes, headland, terrain friction
//! zones, canopy zones where GNSS degrades, and serpentine waypoint plans.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::geometry::{project_on_segment, Bounds, Point2, Polygon};
use crate::model::{RobotState, VehicleConfig};
use crate::rng::{substream, Stream};

/// GNSS error profile of a zone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GnssQuality {
    pub sigma: f64,
    /// Mean multipath offset (east, north) in meters.
    pub bias: [f64; 2],
    pub dropout_prob: f64,
}

impl GnssQuality {
    pub fn open_sky(sigma: f64) -> Self {
        Self {
            sigma,
            bias: [0.0, 0.0],
            dropout_prob: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !(0.0..=1.0).contains(&self.dropout_prob) {
            return config(format!("invalid GNSS quality profile {self:?}"));
        }
        Ok(())
    }
}

/// A forced run of missing plants: stems of `row` with along-row coordinate in
/// `[from_m, to_m]` (measured from the row start) are removed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapOverride {
    pub row: usize,
    pub from_m: f64,
    pub to_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrictionZoneSpec {
    pub polygon: Vec<[f64; 2]>,
    pub mu: f64,
    pub nu: f64,
}

/// An additional group of rows, placed with its first row start at `origin`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub rows: usize,
    pub origin_x: f64,
    pub origin_y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub rows: usize,
    pub row_length_m: f64,
    pub lane_width_m: f64,
    pub plant_spacing_m: f64,
    pub stem_radius_m: f64,
    pub gap_prob: f64,
    pub stem_jitter_m: f64,
    pub headland_margin_m: f64,
    /// Canopy zones start this far inside the row ends.
    pub canopy_inset_m: f64,
    /// Open headland kept around the rows when computing the field bounds.
    pub border_m: f64,
    /// Width the lanes must accommodate (robot body width).
    pub robot_width_m: f64,
    pub extra_blocks: Vec<BlockSpec>,
    pub gap_overrides: Vec<GapOverride>,
    pub friction_zones: Vec<FrictionZoneSpec>,
    pub gnss_open: GnssQuality,
    pub gnss_canopy: GnssQuality,
    /// Expected snags (entangling debris) per meter of canopy lane.
    pub snag_rate_per_m: f64,
    /// Chance that a snag is dislodged each time the robot backs off it.
    pub snag_release_prob: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            rows: 7,
            row_length_m: 90.0,
            lane_width_m: 0.76,
            plant_spacing_m: 0.2,
            stem_radius_m: 0.02,
            gap_prob: 0.0,
            stem_jitter_m: 0.01,
            headland_margin_m: 2.0,
            canopy_inset_m: 2.0,
            border_m: 8.0,
            robot_width_m: 0.3,
            extra_blocks: Vec::new(),
            gap_overrides: Vec::new(),
            friction_zones: Vec::new(),
            gnss_open: GnssQuality::open_sky(0.02),
            gnss_canopy: GnssQuality {
                sigma: 0.05,
                bias: [0.0, 0.25],
                dropout_prob: 0.0,
            },
            snag_rate_per_m: 0.0,
            snag_release_prob: 0.7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stem {
    pub center: Point2,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub start: Point2,
    pub end: Point2,
    pub stems: Vec<Stem>,
    /// Planting slot indices left empty.
    pub gap_mask: Vec<usize>,
}

/// Corridor between two adjacent rows of the same block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub start: Point2,
    pub end: Point2,
    pub block: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrictionZone {
    pub polygon: Polygon,
    pub mu: f64,
    pub nu: f64,
}

/// Uniform-grid bucket index over stem centers.
#[derive(Debug, Clone, PartialEq)]
struct StemGrid {
    origin: Point2,
    cell: f64,
    nx: usize,
    ny: usize,
    buckets: Vec<Vec<u32>>,
}

impl StemGrid {
    fn build(stems: &[Stem], bounds: &Bounds, cell: f64) -> Self {
        let nx = (((bounds.max.x - bounds.min.x) / cell).ceil() as usize).max(1);
        let ny = (((bounds.max.y - bounds.min.y) / cell).ceil() as usize).max(1);
        let mut buckets = vec![Vec::new(); nx * ny];
        let mut grid = Self {
            origin: bounds.min,
            cell,
            nx,
            ny,
            buckets: Vec::new(),
        };
        for (i, s) in stems.iter().enumerate() {
            let (cx, cy) = grid.cell_of(&s.center);
            buckets[cy * nx + cx].push(i as u32);
        }
        grid.buckets = buckets;
        grid
    }

    fn cell_of(&self, p: &Point2) -> (usize, usize) {
        let cx = ((p.x - self.origin.x) / self.cell).floor();
        let cy = ((p.y - self.origin.y) / self.cell).floor();
        (
            (cx.max(0.0) as usize).min(self.nx - 1),
            (cy.max(0.0) as usize).min(self.ny - 1),
        )
    }

    fn for_each_near(&self, p: &Point2, radius: f64, mut f: impl FnMut(u32)) {
        let lo = self.cell_of(&Point2::new(p.x - radius, p.y - radius));
        let hi = self.cell_of(&Point2::new(p.x + radius, p.y + radius));
        for cy in lo.1..=hi.1 {
            for cx in lo.0..=hi.0 {
                for &i in &self.buckets[cy * self.nx + cx] {
                    f(i);
                }
            }
        }
    }
}

/// Result of a footprint/stem intersection test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollisionReport {
    pub colliding: bool,
    /// Unit vector pointing from the deepest-contact stem toward the robot.
    pub normal: Option<Point2>,
    pub penetration: f64,
}

impl CollisionReport {
    const CLEAR: CollisionReport = CollisionReport {
        colliding: false,
        normal: None,
        penetration: 0.0,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldMap {
    pub rows: Vec<Row>,
    pub lanes: Vec<Lane>,
    pub lane_width: f64,
    pub headland_margin: f64,
    pub friction_zones: Vec<FrictionZone>,
    pub canopy_polygons: Vec<Polygon>,
    pub bounds: Bounds,
    pub gnss_open: GnssQuality,
    pub gnss_canopy: GnssQuality,
    /// Snag locations; they block the robot body but are invisible to the
    /// LiDAR.
    pub snags: Vec<Point2>,
    pub snag_release_prob: f64,
    stems: Vec<Stem>,
    grid: StemGrid,
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rows < 2 {
            return config("a field needs at least two rows to form a lane");
        }
        let positive = [
            self.row_length_m,
            self.lane_width_m,
            self.plant_spacing_m,
            self.stem_radius_m,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return config("row length, lane width, plant spacing and stem radius must be positive");
        }
        if !(0.0..=1.0).contains(&self.gap_prob) {
            return config(format!("gap_prob {} outside [0, 1]", self.gap_prob));
        }
        if self.lane_width_m - 2.0 * self.stem_radius_m <= self.robot_width_m {
            return config(format!(
                "lane width {} m leaves no room for a {} m wide robot",
                self.lane_width_m, self.robot_width_m
            ));
        }
        if self.headland_margin_m < 0.0 || self.stem_jitter_m < 0.0 {
            return config("headland margin and stem jitter must be non-negative");
        }
        for b in &self.extra_blocks {
            if b.rows < 2 {
                return config("extra row blocks need at least two rows");
            }
        }
        for z in &self.friction_zones {
            if z.polygon.len() < 3 || !(0.0..=1.0).contains(&z.mu) || !(0.0..=1.0).contains(&z.nu) {
                return config(format!("invalid friction zone {z:?}"));
            }
        }
        if !(self.snag_rate_per_m >= 0.0) || !(0.0..=1.0).contains(&self.snag_release_prob) {
            return config("snag rate must be non-negative and release probability in [0, 1]");
        }
        self.gnss_open.validate()?;
        self.gnss_canopy.validate()?;
        Ok(())
    }

    fn blocks(&self) -> Vec<BlockSpec> {
        let mut blocks = vec![BlockSpec {
            rows: self.rows,
            origin_x: 0.0,
            origin_y: 0.0,
        }];
        blocks.extend(self.extra_blocks.iter().copied());
        blocks
    }
}

/// Builds the field. Deterministic in `(cfg, seed)`.
pub fn build_field(cfg: &FieldConfig, seed: u64) -> Result<FieldMap> {
    cfg.validate()?;
    let mut rng = substream(seed, Stream::Field);
    let w = cfg.lane_width_m;
    let slots = (cfg.row_length_m / cfg.plant_spacing_m + 1e-9).floor() as usize + 1;

    let mut rows = Vec::new();
    let mut lanes = Vec::new();
    let mut canopy_polygons = Vec::new();
    for (b, block) in cfg.blocks().iter().enumerate() {
        let y0 = block.origin_y;
        let x0 = block.origin_x;
        let x1 = x0 + cfg.row_length_m;
        for r in 0..block.rows {
            let y = y0 + r as f64 * w;
            let row_index = rows.len();
            let mut stems = Vec::with_capacity(slots);
            let mut gap_mask = Vec::new();
            for k in 0..slots {
                let along = k as f64 * cfg.plant_spacing_m;
                // Draw jitter before the gap decision so the stream layout does
                // not depend on which plants are missing.
                let jx: f64 = rng.random_range(-1.0..=1.0) * cfg.stem_jitter_m;
                let jy: f64 = rng.random_range(-1.0..=1.0) * cfg.stem_jitter_m;
                let missing = rng.random::<f64>() < cfg.gap_prob
                    || cfg
                        .gap_overrides
                        .iter()
                        .any(|g| g.row == row_index && along >= g.from_m && along <= g.to_m);
                if missing {
                    gap_mask.push(k);
                    continue;
                }
                let x = (x0 + along + jx).clamp(x0, x1);
                stems.push(Stem {
                    center: Point2::new(x, y + jy),
                    radius: cfg.stem_radius_m,
                });
            }
            rows.push(Row {
                start: Point2::new(x0, y),
                end: Point2::new(x1, y),
                stems,
                gap_mask,
            });
        }
        for l in 0..block.rows - 1 {
            let y = y0 + (l as f64 + 0.5) * w;
            lanes.push(Lane {
                start: Point2::new(x0, y),
                end: Point2::new(x1, y),
                block: b,
            });
        }
        let inset = cfg.canopy_inset_m.min(0.5 * cfg.row_length_m);
        canopy_polygons.push(Polygon::rect(
            Point2::new(x0 + inset, y0 - 0.5 * w),
            Point2::new(x1 - inset, y0 + (block.rows as f64 - 0.5) * w),
        ));
    }

    let snags = place_snags(cfg, &lanes, seed)?;
    let stems: Vec<Stem> = rows.iter().flat_map(|r| r.stems.iter().copied()).collect();
    let mut min = Point2::new(f64::INFINITY, f64::INFINITY);
    let mut max = Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for r in &rows {
        for p in [r.start, r.end] {
            min = Point2::new(min.x.min(p.x), min.y.min(p.y));
            max = Point2::new(max.x.max(p.x), max.y.max(p.y));
        }
    }
    let pad = cfg.border_m.max(cfg.headland_margin_m + 1.0);
    let bounds = Bounds {
        min: Point2::new(min.x - pad, min.y - pad),
        max: Point2::new(max.x + pad, max.y + pad),
    };
    let grid = StemGrid::build(&stems, &bounds, 0.5);
    let friction_zones = cfg
        .friction_zones
        .iter()
        .map(|z| FrictionZone {
            polygon: Polygon::new(z.polygon.iter().map(|p| Point2::new(p[0], p[1])).collect()),
            mu: z.mu,
            nu: z.nu,
        })
        .collect();

    Ok(FieldMap {
        rows,
        lanes,
        lane_width: w,
        headland_margin: cfg.headland_margin_m,
        friction_zones,
        canopy_polygons,
        bounds,
        gnss_open: cfg.gnss_open,
        gnss_canopy: cfg.gnss_canopy,
        snags,
        snag_release_prob: cfg.snag_release_prob,
        stems,
        grid,
    })
}

/// Poisson-distributed snags along the canopy part of every lane, near the
/// lane center. Drawn from their own stream so stems do not depend on them.
fn place_snags(cfg: &FieldConfig, lanes: &[Lane], seed: u64) -> Result<Vec<Point2>> {
    let mut snags = Vec::new();
    if cfg.snag_rate_per_m <= 0.0 {
        return Ok(snags);
    }
    let mut rng = substream(seed, Stream::Terrain);
    let inset = cfg.canopy_inset_m.min(0.5 * cfg.row_length_m);
    let usable = cfg.row_length_m - 2.0 * inset;
    let Ok(count) = rand_distr::Poisson::new(cfg.snag_rate_per_m * usable) else {
        return config("snag rate too large");
    };
    for lane in lanes {
        let n = rand_distr::Distribution::sample(&count, &mut rng) as usize;
        let mut along: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..usable)).collect();
        along.sort_by(f64::total_cmp);
        for a in along {
            let lateral = rng.random_range(-0.05..0.05);
            snags.push(Point2::new(lane.start.x + inset + a, lane.start.y + lateral));
        }
    }
    Ok(snags)
}

impl FieldMap {
    pub fn stems(&self) -> &[Stem] {
        &self.stems
    }

    /// Calls `f` for every stem whose center lies within `radius` of `p`
    /// (plus grid slack).
    pub fn for_each_stem_near(&self, p: &Point2, radius: f64, mut f: impl FnMut(&Stem)) {
        self.grid
            .for_each_near(p, radius, |i| f(&self.stems[i as usize]));
    }

    pub fn in_canopy(&self, p: &Point2) -> bool {
        self.canopy_polygons.iter().any(|c| c.contains(p))
    }

    /// Translated copy of the field (every geometric element shifted by `d`).
    pub fn translated(&self, d: Point2) -> FieldMap {
        let shift = |p: Point2| p.add(&d);
        let rows: Vec<Row> = self
            .rows
            .iter()
            .map(|r| Row {
                start: shift(r.start),
                end: shift(r.end),
                stems: r
                    .stems
                    .iter()
                    .map(|s| Stem {
                        center: shift(s.center),
                        radius: s.radius,
                    })
                    .collect(),
                gap_mask: r.gap_mask.clone(),
            })
            .collect();
        let stems: Vec<Stem> = rows.iter().flat_map(|r| r.stems.iter().copied()).collect();
        let bounds = Bounds {
            min: shift(self.bounds.min),
            max: shift(self.bounds.max),
        };
        FieldMap {
            grid: StemGrid::build(&stems, &bounds, self.grid.cell),
            rows,
            lanes: self
                .lanes
                .iter()
                .map(|l| Lane {
                    start: shift(l.start),
                    end: shift(l.end),
                    block: l.block,
                })
                .collect(),
            lane_width: self.lane_width,
            headland_margin: self.headland_margin,
            friction_zones: self
                .friction_zones
                .iter()
                .map(|z| FrictionZone {
                    polygon: z.polygon.translated(d),
                    mu: z.mu,
                    nu: z.nu,
                })
                .collect(),
            canopy_polygons: self.canopy_polygons.iter().map(|c| c.translated(d)).collect(),
            bounds,
            gnss_open: self.gnss_open,
            gnss_canopy: self.gnss_canopy,
            snags: self.snags.iter().map(|p| shift(*p)).collect(),
            snag_release_prob: self.snag_release_prob,
            stems,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaypointTag {
    RowEntry,
    RowExit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub p: Point2,
    pub tag: WaypointTag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaypointPlan {
    pub waypoints: Vec<Waypoint>,
}

impl WaypointPlan {
    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    /// Entry and exit tags strictly alternate, starting with an entry.
    pub fn alternates(&self) -> bool {
        self.waypoints.iter().enumerate().all(|(i, w)| {
            w.tag
                == if i % 2 == 0 {
                    WaypointTag::RowEntry
                } else {
                    WaypointTag::RowExit
                }
        })
    }

    /// Total polyline length.
    pub fn length(&self) -> f64 {
        self.waypoints.windows(2).map(|w| w[0].p.dist(&w[1].p)).sum()
    }

    /// Arc length at the start of each waypoint.
    pub fn cumulative(&self) -> Vec<f64> {
        let mut acc = vec![0.0];
        for w in self.waypoints.windows(2) {
            let last = *acc.last().unwrap();
            acc.push(last + w[0].p.dist(&w[1].p));
        }
        acc
    }

    /// Nearest point on the polyline restricted to segments `first..=last`,
    /// returned as (point, segment index, arc length, segment heading).
    pub fn nearest_on_segments(
        &self,
        p: &Point2,
        first: usize,
        last: usize,
    ) -> Option<(Point2, usize, f64, f64)> {
        let n = self.waypoints.len();
        if n < 2 {
            return None;
        }
        let cum = self.cumulative();
        let last = last.min(n - 2);
        let mut best: Option<(f64, (Point2, usize, f64, f64))> = None;
        for i in first.min(last)..=last {
            let a = self.waypoints[i].p;
            let b = self.waypoints[i + 1].p;
            let (q, t) = project_on_segment(p, &a, &b);
            let d = q.dist(p);
            let heading = (b.y - a.y).atan2(b.x - a.x);
            let s = cum[i] + t * a.dist(&b);
            if best.as_ref().is_none_or(|(bd, _)| d < *bd - 1e-12) {
                best = Some((d, (q, i, s, heading)));
            }
        }
        best.map(|(_, r)| r)
    }
}

/// Entry/exit waypoint pairs for the given lanes, `headland_margin` outside
/// the row ends, alternating the traversal direction.
pub fn serpentine_plan(field: &FieldMap, lane_indices: &[usize]) -> Result<WaypointPlan> {
    if lane_indices.is_empty() {
        return config("a serpentine plan needs at least one lane");
    }
    let m = field.headland_margin;
    let mut waypoints = Vec::with_capacity(2 * lane_indices.len());
    for (k, &li) in lane_indices.iter().enumerate() {
        let Some(lane) = field.lanes.get(li) else {
            return config(format!(
                "lane index {li} out of range ({} lanes)",
                field.lanes.len()
            ));
        };
        let before = Point2::new(lane.start.x - m, lane.start.y);
        let after = Point2::new(lane.end.x + m, lane.end.y);
        let (entry, exit) = if k % 2 == 0 { (before, after) } else { (after, before) };
        waypoints.push(Waypoint {
            p: entry,
            tag: WaypointTag::RowEntry,
        });
        waypoints.push(Waypoint {
            p: exit,
            tag: WaypointTag::RowExit,
        });
    }
    Ok(WaypointPlan { waypoints })
}

/// GNSS profile at `p`. Canopy zones are closed (boundary counts as canopy).
/// The flag reports that `p` was outside the field bounds and got clamped.
pub fn gnss_quality_at(field: &FieldMap, p: &Point2) -> (GnssQuality, bool) {
    let clamped = !field.bounds.contains(p);
    let q = field.bounds.clamp(p);
    if field.in_canopy(&q) {
        (field.gnss_canopy, clamped)
    } else {
        (field.gnss_open, clamped)
    }
}

/// True traction coefficients at `p`; the first matching zone wins.
pub fn terrain_at(field: &FieldMap, p: &Point2) -> (f64, f64) {
    field
        .friction_zones
        .iter()
        .find(|z| z.polygon.contains(p))
        .map(|z| (z.mu, z.nu))
        .unwrap_or((1.0, 1.0))
}

/// Rectangular footprint against stem discs.
pub fn collision_query(field: &FieldMap, state: &RobotState, cfg: &VehicleConfig) -> CollisionReport {
    let hl = cfg.body_half_length;
    let hw = cfg.body_half_width;
    let center = state.position();
    let reach = hl.hypot(hw) + 0.1;
    let (s, c) = state.theta.sin_cos();
    let mut report = CollisionReport::CLEAR;
    field.for_each_stem_near(&center, reach, |stem| {
        let d = stem.center.sub(&center);
        // Stem center in the body frame.
        let bx = c * d.x + s * d.y;
        let by = -s * d.x + c * d.y;
        let qx = bx.clamp(-hl, hl);
        let qy = by.clamp(-hw, hw);
        let (ex, ey) = (qx - bx, qy - by);
        let dist = ex.hypot(ey);
        if dist >= stem.radius {
            return;
        }
        let depth = stem.radius - dist;
        if report.colliding && depth <= report.penetration {
            return;
        }
        // Body-frame direction from the stem toward the robot.
        let (nx, ny) = if dist > 1e-9 {
            (ex / dist, ey / dist)
        } else {
            let n = bx.hypot(by).max(1e-12);
            (-bx / n, -by / n)
        };
        report = CollisionReport {
            colliding: true,
            normal: Some(Point2::new(c * nx - s * ny, s * nx + c * ny)),
            penetration: depth,
        };
    });
    report
}

/// Index of the first snag (not yet dislodged) inside the robot footprint.
pub fn snag_contact(field: &FieldMap, state: &RobotState, cfg: &VehicleConfig, cleared: &[bool]) -> Option<usize> {
    let center = state.position();
    let reach = cfg.body_half_length.hypot(cfg.body_half_width);
    let (s, c) = state.theta.sin_cos();
    field.snags.iter().enumerate().position(|(i, p)| {
        if cleared.get(i).copied().unwrap_or(false) || p.dist(&center) > reach {
            return false;
        }
        let d = p.sub(&center);
        let bx = c * d.x + s * d.y;
        let by = -s * d.x + c * d.y;
        bx.abs() <= cfg.body_half_length && by.abs() <= cfg.body_half_width
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(rows: usize, len: f64) -> FieldConfig {
        FieldConfig {
            rows,
            row_length_m: len,
            ..FieldConfig::default()
        }
    }

    #[test]
    fn six_rows_of_ninety_meters() {
        let f = build_field(&cfg(6, 90.0), 3).unwrap();
        assert_eq!(f.rows.len(), 6);
        assert_eq!(f.lanes.len(), 5);
        for r in &f.rows {
            assert_eq!(r.stems.len(), (90.0f64 / 0.2).floor() as usize + 1);
            assert!(r.gap_mask.is_empty());
        }
    }

    #[test]
    fn endpoints_only_when_spacing_equals_length() {
        let c = FieldConfig {
            plant_spacing_m: 10.0,
            ..cfg(2, 10.0)
        };
        let f = build_field(&c, 0).unwrap();
        assert!(f.rows.iter().all(|r| r.stems.len() == 2));
    }

    #[test]
    fn build_is_deterministic() {
        let c = FieldConfig {
            gap_prob: 0.1,
            ..cfg(4, 20.0)
        };
        assert_eq!(build_field(&c, 42).unwrap(), build_field(&c, 42).unwrap());
        assert_ne!(build_field(&c, 42).unwrap(), build_field(&c, 43).unwrap());
    }

    #[test]
    fn rows_parallel_and_stems_on_segment() {
        let c = FieldConfig {
            gap_prob: 0.05,
            ..cfg(5, 30.0)
        };
        let f = build_field(&c, 9).unwrap();
        for r in &f.rows {
            let d = r.end.sub(&r.start);
            assert!((d.y / d.norm()).abs() < 1e-9);
            for s in &r.stems {
                assert!((s.center.y - r.start.y).abs() <= c.stem_jitter_m + 1e-12);
                assert!(s.center.x >= r.start.x && s.center.x <= r.end.x);
            }
        }
    }

    #[test]
    fn narrow_lane_is_rejected() {
        let c = FieldConfig {
            lane_width_m: 0.3,
            ..cfg(3, 10.0)
        };
        assert!(matches!(build_field(&c, 0), Err(crate::Error::Config(_))));
    }

    #[test]
    fn gap_override_removes_stems() {
        let c = FieldConfig {
            gap_overrides: vec![GapOverride { row: 1, from_m: 5.0, to_m: 7.0 }],
            stem_jitter_m: 0.0,
            ..cfg(3, 10.0)
        };
        let f = build_field(&c, 0).unwrap();
        assert_eq!(f.rows[1].gap_mask, (25..=35).collect::<Vec<_>>());
        assert!(f.rows[1].stems.iter().all(|s| s.center.x < 5.0 || s.center.x > 7.0));
        assert!(f.rows[0].gap_mask.is_empty());
    }

    #[test]
    fn serpentine_waypoint_counts() {
        let f = build_field(&cfg(15, 20.0), 0).unwrap();
        let six = serpentine_plan(&f, &[0, 1, 2, 3, 4, 5]).unwrap();
        assert_eq!(six.len(), 12);
        assert!(six.alternates());
        let fourteen = serpentine_plan(&f, &(0..14).collect::<Vec<_>>()).unwrap();
        assert_eq!(fourteen.len(), 28);
        assert!(fourteen.alternates());
        let one = serpentine_plan(&f, &[3]).unwrap();
        assert_eq!(one.len(), 2);
        assert_eq!(one.waypoints[0].tag, WaypointTag::RowEntry);
        assert_eq!(one.waypoints[1].tag, WaypointTag::RowExit);
        assert!(serpentine_plan(&f, &[]).is_err());
        assert!(serpentine_plan(&f, &[99]).is_err());
    }

    #[test]
    fn serpentine_alternates_direction_outside_rows() {
        let f = build_field(&cfg(4, 20.0), 0).unwrap();
        let plan = serpentine_plan(&f, &[0, 1]).unwrap();
        let xs: Vec<f64> = plan.waypoints.iter().map(|w| w.p.x).collect();
        assert_eq!(xs, vec![-2.0, 22.0, 22.0, -2.0]);
    }

    #[test]
    fn gnss_profiles_by_zone() {
        let f = build_field(&cfg(5, 40.0), 0).unwrap();
        let (q, clamped) = gnss_quality_at(&f, &Point2::new(-1.5, 1.0));
        assert_eq!(q, f.gnss_open);
        assert_eq!(q.sigma, 0.02);
        assert!(!clamped);
        let (q, _) = gnss_quality_at(&f, &Point2::new(20.0, 1.14));
        assert_eq!(q, f.gnss_canopy);
        // Canopy starts canopy_inset_m inside the row ends; the edge is closed.
        let (q, _) = gnss_quality_at(&f, &Point2::new(2.0, 1.14));
        assert_eq!(q, f.gnss_canopy);
        let (_, clamped) = gnss_quality_at(&f, &Point2::new(-500.0, 0.0));
        assert!(clamped);
    }

    #[test]
    fn terrain_precedence() {
        let zone = |x0: f64, mu, nu| FrictionZoneSpec {
            polygon: vec![[x0, -5.0], [x0 + 10.0, -5.0], [x0 + 10.0, 5.0], [x0, 5.0]],
            mu,
            nu,
        };
        let c = FieldConfig {
            friction_zones: vec![zone(-10.0, 0.6, 0.7), zone(-5.0, 0.3, 0.3)],
            ..cfg(3, 10.0)
        };
        let f = build_field(&c, 0).unwrap();
        assert_eq!(terrain_at(&f, &Point2::new(30.0, 0.0)), (1.0, 1.0));
        assert_eq!(terrain_at(&f, &Point2::new(-8.0, 0.0)), (0.6, 0.7));
        assert_eq!(terrain_at(&f, &Point2::new(-2.0, 0.0)), (0.6, 0.7));
        assert_eq!(terrain_at(&f, &Point2::new(3.0, 0.0)), (0.3, 0.3));
    }

    #[test]
    fn collision_examples() {
        let c = FieldConfig {
            stem_jitter_m: 0.0,
            ..cfg(3, 20.0)
        };
        let f = build_field(&c, 0).unwrap();
        let v = VehicleConfig::default();
        let mid = RobotState::new(10.0, 0.38, 0.0);
        assert!(!collision_query(&f, &mid, &v).colliding);
        let onto = RobotState::new(10.0, 0.38 + 0.38, 0.0);
        let r = collision_query(&f, &onto, &v);
        assert!(r.colliding);
        assert!(r.normal.is_some());
        let headland = RobotState::new(-3.0, 0.38, 0.0);
        assert!(!collision_query(&f, &headland, &v).colliding);
    }

    #[test]
    fn contact_normal_points_away_from_stem() {
        let c = FieldConfig {
            stem_jitter_m: 0.0,
            ..cfg(2, 4.0)
        };
        let f = build_field(&c, 0).unwrap();
        // Robot nose just touching the first stem of row 0, approaching along +x.
        let s = RobotState::new(-0.26, 0.0, 0.0);
        let r = collision_query(&f, &s, &VehicleConfig::default());
        assert!(r.colliding);
        let n = r.normal.unwrap();
        assert!(n.x < -0.99);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn collision_translation_invariant(
            x in -2.0f64..22.0, y in -0.5f64..2.0, th in -3.1f64..3.1,
            dx in -50.0f64..50.0, dy in -50.0f64..50.0,
        ) {
            let c = FieldConfig { gap_prob: 0.1, ..cfg(4, 20.0) };
            let f = build_field(&c, 5).unwrap();
            let g = f.translated(Point2::new(dx, dy));
            let v = VehicleConfig::default();
            let a = collision_query(&f, &RobotState::new(x, y, th), &v);
            let b = collision_query(&g, &RobotState::new(x + dx, y + dy, th), &v);
            prop_assert_eq!(a.colliding, b.colliding);
            prop_assert!((a.penetration - b.penetration).abs() < 1e-9);
        }

        #[test]
        fn serpentine_always_alternates(lanes in proptest::collection::vec(0usize..6, 1..12)) {
            let f = build_field(&cfg(7, 10.0), 0).unwrap();
            let plan = serpentine_plan(&f, &lanes).unwrap();
            prop_assert!(plan.alternates());
            prop_assert_eq!(plan.len(), 2 * lanes.len());
        }
    }
}
