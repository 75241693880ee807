//! LiDAR crop-row perception: line extraction with validity gating, a
//! lane-relative filter over `[d_lane, φ]` and the in-row classifier.
//!
//! Conventions: `d_lane > 0` when the robot sits left of the lane center,
//! `φ` is the robot heading minus the lane heading. Points are in the robot
//! frame (x forward, y left).

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::geometry::{wrap_angle, Point2};
use crate::model::{ControlInput, TractionParams};
use crate::sim::PointCloud2D;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerceptionConfig {
    pub lane_width_nominal: f64,
    pub n_inrow: usize,
    /// Forward extent of the in-row counting window.
    pub inrow_forward_m: f64,
    /// Consecutive agreeing scans before the in-row state flips.
    pub debounce_k: usize,
    pub box_half_width: f64,
    pub histogram_bin: f64,
    /// Longitudinal extent (rotated frame) of points used for row fitting.
    pub fit_back_m: f64,
    pub fit_forward_m: f64,
    pub min_points: usize,
    pub min_span_m: f64,
    pub max_angle_jump_rad: f64,
    pub max_distance_jump_m: f64,
    /// Allowed relative deviation of the measured lane width.
    pub lane_width_tolerance: f64,
    pub sigma_d: f64,
    pub sigma_phi: f64,
    /// Noise inflation applied when only one row is valid.
    pub single_side_inflation: f64,
    pub q_d: f64,
    pub q_phi: f64,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        Self {
            lane_width_nominal: 0.76,
            n_inrow: 50,
            inrow_forward_m: 2.0,
            debounce_k: 3,
            box_half_width: 0.1,
            histogram_bin: 0.05,
            fit_back_m: 1.0,
            fit_forward_m: 3.0,
            min_points: 8,
            min_span_m: 0.5,
            max_angle_jump_rad: 15f64.to_radians(),
            max_distance_jump_m: 0.15,
            lane_width_tolerance: 0.2,
            sigma_d: 0.02,
            sigma_phi: 1f64.to_radians(),
            single_side_inflation: 4.0,
            q_d: 1e-3,
            q_phi: 1e-3,
        }
    }
}

impl PerceptionConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.lane_width_nominal,
            self.inrow_forward_m,
            self.box_half_width,
            self.histogram_bin,
            self.fit_forward_m,
            self.min_span_m,
            self.max_angle_jump_rad,
            self.max_distance_jump_m,
            self.lane_width_tolerance,
            self.sigma_d,
            self.sigma_phi,
            self.single_side_inflation,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) || self.fit_back_m < 0.0 {
            return config("perception parameters must be positive");
        }
        if self.n_inrow == 0 || self.debounce_k == 0 || self.min_points < 2 {
            return config("perception counts must be positive (min_points ≥ 2)");
        }
        Ok(())
    }

    pub fn measurement_noise(&self, both_sides: bool) -> Matrix2<f64> {
        let k = if both_sides { 1.0 } else { self.single_side_inflation };
        Matrix2::from_diagonal(&Vector2::new(self.sigma_d.powi(2), self.sigma_phi.powi(2))) * k
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneEstimate {
    pub d_lane: f64,
    pub phi: f64,
    pub covariance: Matrix2<f64>,
    pub left_valid: bool,
    pub right_valid: bool,
    pub timestamp: f64,
    /// False until the first accepted measurement; continuity gates are
    /// skipped while not tracking.
    pub tracking: bool,
}

impl LaneEstimate {
    pub fn initial(timestamp: f64) -> Self {
        Self {
            d_lane: 0.0,
            phi: 0.0,
            covariance: Matrix2::from_diagonal(&Vector2::new(0.1, 0.1)),
            left_valid: false,
            right_valid: false,
            timestamp,
            tracking: false,
        }
    }
}

/// Line `y = intercept + slope·x` in the rotated (lane-aligned) frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowFit {
    pub intercept: f64,
    pub slope: f64,
    pub point_count: usize,
    pub span_length: f64,
    pub rms_residual: f64,
}

impl RowFit {
    pub fn angle(&self) -> f64 {
        self.slope.atan()
    }

    /// Signed distance from the origin to the line along its normal.
    pub fn offset(&self) -> f64 {
        self.intercept * self.angle().cos()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneMeasurement {
    pub d_lane: f64,
    pub phi: f64,
    pub both_sides: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RowDetection {
    pub left: Option<RowFit>,
    pub right: Option<RowFit>,
    pub left_valid: bool,
    pub right_valid: bool,
    pub measurement: Option<LaneMeasurement>,
}

fn fit_line(points: &[Point2]) -> Option<RowFit> {
    let n = points.len();
    if n < 2 {
        return None;
    }
    let nf = n as f64;
    let mx = points.iter().map(|p| p.x).sum::<f64>() / nf;
    let my = points.iter().map(|p| p.y).sum::<f64>() / nf;
    let sxx: f64 = points.iter().map(|p| (p.x - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.x - mx) * (p.y - my)).sum();
    if sxx <= 1e-12 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss: f64 = points
        .iter()
        .map(|p| (p.y - intercept - slope * p.x).powi(2))
        .sum();
    let (lo, hi) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.x), b.max(p.x)));
    Some(RowFit {
        intercept,
        slope,
        point_count: n,
        span_length: hi - lo,
        rms_residual: (ss / nf).sqrt(),
    })
}

/// Highest-count bin center in `(lo, hi)` and its count; ties go to the bin
/// nearest `expect`.
fn histogram_peak(ys: &[f64], lo: f64, hi: f64, bin: f64, expect: f64) -> Option<(f64, usize)> {
    let nb = ((hi - lo) / bin).ceil().max(1.0) as usize;
    let mut counts = vec![0usize; nb];
    for &y in ys {
        if y > lo && y < hi {
            let i = (((y - lo) / bin) as usize).min(nb - 1);
            counts[i] += 1;
        }
    }
    let center = |i: usize| lo + (i as f64 + 0.5) * bin;
    let mut best: Option<(usize, usize)> = None;
    for (i, &c) in counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        best = match best {
            None => Some((i, c)),
            Some((bi, bc)) => {
                let closer = (center(i) - expect).abs() < (center(bi) - expect).abs();
                if c > bc || (c == bc && closer) {
                    Some((i, c))
                } else {
                    Some((bi, bc))
                }
            }
        };
    }
    best.map(|(i, c)| (center(i), c))
}

const HEADING_FAN: usize = 6;
const HEADING_FAN_STEP: f64 = 3.0 * std::f64::consts::PI / 180.0;

/// Lane offset implied by one row line; `side` is +1 for left, −1 for right.
fn side_offset(fit: &RowFit, side: f64, w: f64) -> f64 {
    side * 0.5 * w - fit.offset()
}

/// Extracts the two bounding rows and, when the gating allows, a lane
/// measurement `(d̃_lane, φ̃)`.
pub fn detect_rows(cloud: &PointCloud2D, prev: &LaneEstimate, cfg: &PerceptionConfig) -> RowDetection {
    if cloud.points.is_empty() {
        return RowDetection::default();
    }
    let w = cfg.lane_width_nominal;
    let center = -prev.d_lane;
    let in_window = |p: &Point2| p.x >= -cfg.fit_back_m && p.x <= cfg.fit_forward_m;
    let peaks = |phi: f64| {
        let ys: Vec<f64> = cloud
            .points
            .iter()
            .map(|p| p.rotate(phi))
            .filter(in_window)
            .map(|p| p.y)
            .collect();
        (
            histogram_peak(&ys, center, center + w, cfg.histogram_bin, center + 0.5 * w),
            histogram_peak(&ys, center - w, center, cfg.histogram_bin, center - 0.5 * w),
        )
    };
    // Without a tracked heading, search a coarse fan of alignments for the
    // sharpest pair of peaks.
    let base_phi = if prev.tracking {
        prev.phi
    } else {
        let score = |phi: f64| {
            let (l, r) = peaks(phi);
            l.map_or(0, |p| p.1) + r.map_or(0, |p| p.1)
        };
        let mut best = (prev.phi, score(prev.phi));
        for k in 1..=HEADING_FAN {
            for sign in [1.0, -1.0] {
                let phi = prev.phi + sign * k as f64 * HEADING_FAN_STEP;
                let sc = score(phi);
                if sc > best.1 {
                    best = (phi, sc);
                }
            }
        }
        best.0
    };
    // Rows are aligned with the x axis once points are turned by +φ.
    let rotated: Vec<Point2> = cloud
        .points
        .iter()
        .map(|p| p.rotate(base_phi))
        .filter(in_window)
        .collect();
    let (peak_l, peak_r) = peaks(base_phi);
    let (peak_l, peak_r) = (peak_l.map(|p| p.0), peak_r.map(|p| p.0));

    let fit_box = |peak: Option<f64>| -> Option<RowFit> {
        let peak = peak?;
        let pts: Vec<Point2> = rotated
            .iter()
            .copied()
            .filter(|p| (p.y - peak).abs() <= cfg.box_half_width)
            .collect();
        fit_line(&pts)
    };
    let left = fit_box(peak_l);
    let right = fit_box(peak_r);

    let side_ok = |fit: &Option<RowFit>, side: f64| -> bool {
        let Some(f) = fit else { return false };
        if f.point_count < cfg.min_points || f.span_length < cfg.min_span_m {
            return false;
        }
        if prev.tracking {
            // The row angle in the rotated frame is the heading correction.
            if f.angle().abs() > cfg.max_angle_jump_rad {
                return false;
            }
            if (side_offset(f, side, w) - prev.d_lane).abs() > cfg.max_distance_jump_m {
                return false;
            }
        }
        true
    };
    let mut left_valid = side_ok(&left, 1.0);
    let mut right_valid = side_ok(&right, -1.0);

    if let (true, true, Some(l), Some(r)) = (left_valid, right_valid, &left, &right) {
        let measured = l.offset() - r.offset();
        if (measured - w).abs() > cfg.lane_width_tolerance * w {
            // Keep the side more consistent with the previous estimate.
            let jl = (side_offset(l, 1.0, w) - prev.d_lane).abs();
            let jr = (side_offset(r, -1.0, w) - prev.d_lane).abs();
            if jl <= jr {
                right_valid = false;
            } else {
                left_valid = false;
            }
        }
    }

    let measurement = match (left_valid, right_valid) {
        (true, true) => {
            let (l, r) = (left.unwrap(), right.unwrap());
            let gamma = (0.5 * (l.slope + r.slope)).atan();
            let mid = 0.5 * (l.intercept + r.intercept);
            Some(LaneMeasurement {
                d_lane: -mid * gamma.cos(),
                phi: wrap_angle(base_phi - gamma),
                both_sides: true,
            })
        }
        (true, false) | (false, true) => {
            let (f, side) = if left_valid {
                (left.unwrap(), 1.0)
            } else {
                (right.unwrap(), -1.0)
            };
            Some(LaneMeasurement {
                d_lane: side_offset(&f, side, w),
                phi: wrap_angle(base_phi - f.angle()),
                both_sides: false,
            })
        }
        (false, false) => None,
    };
    RowDetection {
        left,
        right,
        left_valid,
        right_valid,
        measurement,
    }
}

/// Propagates the lane state with the vehicle model written in the lane
/// frame: `ḋ = μ v sin φ`, `φ̇ = ν ω`.
pub fn lane_predict(
    est: &LaneEstimate,
    u: &ControlInput,
    params: &TractionParams,
    dt: f64,
    cfg: &PerceptionConfig,
) -> LaneEstimate {
    if !(dt > 0.0) {
        return *est;
    }
    let (s, c) = est.phi.sin_cos();
    let f = Matrix2::new(1.0, params.mu * u.v * c * dt, 0.0, 1.0);
    let q = Matrix2::from_diagonal(&Vector2::new(cfg.q_d, cfg.q_phi)) * dt;
    let p = f * est.covariance * f.transpose() + q;
    LaneEstimate {
        d_lane: est.d_lane + params.mu * u.v * s * dt,
        phi: wrap_angle(est.phi + params.nu * u.omega * dt),
        covariance: 0.5 * (p + p.transpose()),
        timestamp: est.timestamp + dt,
        ..*est
    }
}

/// Linear correction with `H = I` in Joseph form.
pub fn lane_update(est: &LaneEstimate, meas: (f64, f64), meas_noise: &Matrix2<f64>) -> LaneEstimate {
    let p = est.covariance;
    let s = p + meas_noise;
    let Some(s_inv) = s.try_inverse() else {
        return *est;
    };
    let k = p * s_inv;
    let innov = Vector2::new(meas.0 - est.d_lane, wrap_angle(meas.1 - est.phi));
    let dx = k * innov;
    let ikh = Matrix2::identity() - k;
    let p = ikh * p * ikh.transpose() + k * meas_noise * k.transpose();
    LaneEstimate {
        d_lane: est.d_lane + dx[0],
        phi: wrap_angle(est.phi + dx[1]),
        covariance: 0.5 * (p + p.transpose()),
        tracking: true,
        ..*est
    }
}

/// Raw in-row decision: points in the forward window against `n_inrow`.
pub fn inrow_count(cloud: &PointCloud2D, cfg: &PerceptionConfig) -> usize {
    let w = cfg.lane_width_nominal;
    cloud
        .points
        .iter()
        .filter(|p| p.x >= 0.0 && p.x <= cfg.inrow_forward_m && p.y.abs() <= w)
        .count()
}

pub fn classify_in_row(cloud: &PointCloud2D, cfg: &PerceptionConfig) -> bool {
    inrow_count(cloud, cfg) >= cfg.n_inrow
}

/// Reports a flip only after `k` consecutive raw decisions disagree with the
/// current state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Debouncer {
    pub state: bool,
    k: usize,
    streak: usize,
}

impl Debouncer {
    pub fn new(initial: bool, k: usize) -> Self {
        Self {
            state: initial,
            k: k.max(1),
            streak: 0,
        }
    }

    /// Feeds one raw decision; returns true when the state flipped.
    pub fn update(&mut self, raw: bool) -> bool {
        if raw == self.state {
            self.streak = 0;
            return false;
        }
        self.streak += 1;
        if self.streak >= self.k {
            self.state = raw;
            self.streak = 0;
            return true;
        }
        false
    }
}

/// Stateful perception front end: lane filter plus debounced classifier.
#[derive(Debug, Clone)]
pub struct LaneTracker {
    pub cfg: PerceptionConfig,
    pub estimate: LaneEstimate,
    pub classifier: Debouncer,
    pub last_detection: RowDetection,
    pub last_update: Option<f64>,
    pub last_count: usize,
}

impl LaneTracker {
    pub fn new(cfg: PerceptionConfig, t: f64) -> Self {
        Self {
            cfg,
            estimate: LaneEstimate::initial(t),
            classifier: Debouncer::new(false, cfg.debounce_k),
            last_detection: RowDetection::default(),
            last_update: None,
            last_count: 0,
        }
    }

    /// Restarts the lane filter (keeps the classifier state).
    pub fn reset_lane(&mut self, t: f64) {
        self.estimate = LaneEstimate::initial(t);
        self.last_update = None;
    }

    pub fn predict(&mut self, u: &ControlInput, params: &TractionParams, dt: f64) {
        self.estimate = lane_predict(&self.estimate, u, params, dt, &self.cfg);
    }

    /// Processes a scan; returns whether the in-row state flipped.
    pub fn on_scan(&mut self, cloud: &PointCloud2D) -> bool {
        let det = detect_rows(cloud, &self.estimate, &self.cfg);
        self.estimate.left_valid = det.left_valid;
        self.estimate.right_valid = det.right_valid;
        self.estimate.timestamp = cloud.timestamp;
        if let Some(m) = det.measurement {
            let r = self.cfg.measurement_noise(m.both_sides);
            self.estimate = lane_update(&self.estimate, (m.d_lane, m.phi), &r);
            self.last_update = Some(cloud.timestamp);
        }
        self.last_detection = det;
        self.last_count = inrow_count(cloud, &self.cfg);
        self.classifier.update(self.last_count >= self.cfg.n_inrow)
    }

    pub fn in_row(&self) -> bool {
        self.classifier.state
    }

    /// Seconds since the last accepted measurement.
    pub fn staleness(&self, now: f64) -> f64 {
        self.last_update.map_or(f64::INFINITY, |t| now - t)
    }
}
