use std::path::Path;

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::control::MpcConfig;
use crate::error::{config, Result};
use crate::estimator::{EstimatorConfig, MheConfig};
use crate::perception::PerceptionConfig;
use crate::sim::{LidarConfig, NoiseConfig};
use crate::supervisor::SupervisorConfig;
use crate::world::{FieldConfig, FrictionZoneSpec};

/// Navigation stack switches and tuning exposed to scenario files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StackConfig {
    pub recovery_enabled: bool,
    /// Off means GNSS-only navigation: waypoints everywhere, no in-row mode.
    pub perception_enabled: bool,
    pub mu_failure: f64,
    pub n_inrow: usize,
    pub cruise_speed: f64,
    pub mpc_horizon: usize,
    pub mpc_dt: f64,
    pub mpc_q: [f64; 3],
    pub mpc_r: [f64; 2],
    pub mpc_qn_scale: f64,
    pub mpc_v_max: f64,
    pub mhe_horizon: usize,
    pub mhe_p_x: [f64; 3],
    pub mhe_p_m: [f64; 3],
    pub mhe_p_w: [f64; 3],
    pub mhe_max_iters: usize,
}

impl Default for StackConfig {
    fn default() -> Self {
        let mpc = MpcConfig::default();
        let mhe = MheConfig::default();
        Self {
            recovery_enabled: true,
            perception_enabled: true,
            mu_failure: SupervisorConfig::default().mu_failure,
            n_inrow: PerceptionConfig::default().n_inrow,
            cruise_speed: SupervisorConfig::default().cruise_speed,
            mpc_horizon: mpc.horizon_n,
            mpc_dt: mpc.dt,
            mpc_q: [mpc.q[(0, 0)], mpc.q[(1, 1)], mpc.q[(2, 2)]],
            mpc_r: [mpc.r[(0, 0)], mpc.r[(1, 1)]],
            mpc_qn_scale: 5.0,
            mpc_v_max: mpc.v_max,
            mhe_horizon: mhe.horizon_n,
            mhe_p_x: diag3(&mhe.p_x),
            mhe_p_m: diag3(&mhe.p_m),
            mhe_p_w: diag3(&mhe.p_w),
            mhe_max_iters: mhe.max_iters,
        }
    }
}

fn diag3(m: &Matrix3<f64>) -> [f64; 3] {
    [m[(0, 0)], m[(1, 1)], m[(2, 2)]]
}

fn mat3(d: &[f64; 3]) -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::new(d[0], d[1], d[2]))
}

impl StackConfig {
    pub fn mpc(&self) -> MpcConfig {
        let q = mat3(&self.mpc_q);
        MpcConfig {
            horizon_n: self.mpc_horizon,
            dt: self.mpc_dt,
            q,
            r: Matrix2::from_diagonal(&Vector2::new(self.mpc_r[0], self.mpc_r[1])),
            q_n: self.mpc_qn_scale * q,
            v_max: self.mpc_v_max,
            ..MpcConfig::default()
        }
    }

    pub fn estimator(&self) -> EstimatorConfig {
        EstimatorConfig {
            mhe: MheConfig {
                horizon_n: self.mhe_horizon,
                p_x: mat3(&self.mhe_p_x),
                p_m: mat3(&self.mhe_p_m),
                p_w: mat3(&self.mhe_p_w),
                max_iters: self.mhe_max_iters,
                ..MheConfig::default()
            },
            ..EstimatorConfig::default()
        }
    }

    pub fn perception(&self) -> PerceptionConfig {
        PerceptionConfig {
            n_inrow: self.n_inrow,
            ..PerceptionConfig::default()
        }
    }

    /// Supervisor settings; the failure re-arm time follows the MHE window.
    pub fn supervisor(&self, gnss_period: f64) -> SupervisorConfig {
        SupervisorConfig {
            mu_failure: self.mu_failure,
            cruise_speed: self.cruise_speed,
            recovery_enabled: self.recovery_enabled,
            perception_enabled: self.perception_enabled,
            failure_rearm_s: self.mhe_horizon as f64 * gnss_period,
            ..SupervisorConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub duration_limit_s: f64,
    /// Stop once this many interventions happened.
    pub max_interventions: Option<usize>,
    /// Distance behind the first waypoint where the robot starts.
    pub start_offset_m: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            duration_limit_s: 3000.0,
            max_interventions: None,
            start_offset_m: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanConfig {
    /// Lanes in visiting order; all lanes when absent.
    pub lanes: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub name: String,
    pub field: FieldConfig,
    pub noise: NoiseConfig,
    pub lidar: LidarConfig,
    pub stack: StackConfig,
    pub run: RunConfig,
    pub plan: PlanConfig,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            name: "custom".into(),
            field: FieldConfig::default(),
            noise: NoiseConfig::default(),
            lidar: LidarConfig::default(),
            stack: StackConfig::default(),
            run: RunConfig::default(),
            plan: PlanConfig::default(),
        }
    }
}

pub const BUILTIN_SCENARIOS: [&str; 4] = ["cropnav_recovery", "cropnav_norecovery", "gnss_only", "long_path"];

/// Slippery headland strips just outside both row ends.
fn headland_strips(field: &FieldConfig, y_min: f64, y_max: f64) -> Vec<FrictionZoneSpec> {
    let depth = field.headland_margin_m + 1.0;
    let x1 = field.row_length_m;
    [(-depth, 0.0), (x1, x1 + depth)]
        .into_iter()
        .map(|(a, b)| FrictionZoneSpec {
            polygon: vec![[a, y_min], [b, y_min], [b, y_max], [a, y_max]],
            mu: 0.6,
            nu: 0.5,
        })
        .collect()
}

impl Scenario {
    /// The six-lane, 90 m serpentine used by the comparison runs.
    fn serpentine(name: &str) -> Scenario {
        let mut field = FieldConfig {
            gap_prob: 0.01,
            snag_rate_per_m: 1.0 / 300.0,
            ..FieldConfig::default()
        };
        let w = field.lane_width_m;
        field.friction_zones = headland_strips(&field, -w, field.rows as f64 * w);
        Scenario {
            name: name.into(),
            field,
            ..Scenario::default()
        }
    }

    pub fn builtin(name: &str) -> Result<Scenario> {
        let mut s = match name {
            "cropnav_recovery" => Scenario::serpentine(name),
            "cropnav_norecovery" => {
                let mut s = Scenario::serpentine(name);
                s.stack.recovery_enabled = false;
                s
            }
            "gnss_only" => {
                let mut s = Scenario::serpentine(name);
                s.stack.perception_enabled = false;
                s.run.max_interventions = Some(5);
                s
            }
            "long_path" => {
                // Twelve lanes, a transit across open ground, then two more.
                let mut field = FieldConfig {
                    rows: 13,
                    row_length_m: 80.0,
                    gap_prob: 0.01,
                    snag_rate_per_m: 1.0 / 300.0,
                    ..FieldConfig::default()
                };
                let w = field.lane_width_m;
                let second_y = 12.0 * w + 12.0;
                field.extra_blocks = vec![crate::world::BlockSpec {
                    rows: 3,
                    origin_x: 0.0,
                    origin_y: second_y,
                }];
                field.friction_zones = headland_strips(&field, -w, second_y + 3.0 * w);
                Scenario {
                    name: name.into(),
                    field,
                    ..Scenario::default()
                }
            }
            other => {
                return config(format!(
                    "unknown scenario '{other}' (built-ins: {})",
                    BUILTIN_SCENARIOS.join(", ")
                ))
            }
        };
        s.name = name.into();
        Ok(s)
    }

    pub fn from_toml(text: &str) -> Result<Scenario> {
        let s: Scenario = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// A built-in name or a path to a scenario file.
    pub fn load(name_or_path: &str) -> Result<Scenario> {
        if BUILTIN_SCENARIOS.contains(&name_or_path) {
            return Scenario::builtin(name_or_path);
        }
        let path = Path::new(name_or_path);
        if path.exists() {
            let mut s = Scenario::from_toml(&std::fs::read_to_string(path)?)?;
            if s.name == Scenario::default().name {
                if let Some(stem) = path.file_stem() {
                    s.name = stem.to_string_lossy().into_owned();
                }
            }
            return Ok(s);
        }
        Scenario::builtin(name_or_path)
    }

    pub fn with_seed(&self, seed: u64) -> Scenario {
        let mut s = self.clone();
        s.run.seed = seed;
        s
    }

    /// Field configuration with the GNSS zone profiles taken from the noise
    /// section.
    pub fn field_config(&self) -> FieldConfig {
        FieldConfig {
            gnss_open: self.noise.gnss_open(),
            gnss_canopy: self.noise.gnss_canopy(),
            ..self.field.clone()
        }
    }

    pub fn lidar_config(&self) -> LidarConfig {
        LidarConfig {
            range_sigma_m: self.noise.lidar_sigma_m,
            outlier_rate: self.noise.lidar_outlier_rate,
            ..self.lidar
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.field_config().validate()?;
        self.stack.mpc().validate()?;
        self.stack.estimator().mhe.validate()?;
        self.stack.perception().validate()?;
        self.stack.supervisor(0.2).validate()?;
        if !(self.run.duration_limit_s > 0.0) {
            return config("duration_limit_s must be positive");
        }
        if !(self.run.start_offset_m >= 0.0) {
            return config("start_offset_m must be non-negative");
        }
        if self.run.max_interventions == Some(0) {
            return config("max_interventions must be positive when given");
        }
        if self.plan.lanes.as_ref().is_some_and(|l| l.is_empty()) {
            return config("plan.lanes must not be empty");
        }
        Ok(())
    }
}
