//! Scenario runner: wires the simulator and the navigation stack on their
//! clocks, logs trajectories and events, and tabulates comparison runs.

mod ablation;
mod io;
mod plot;
mod run;
mod scenario;

pub use ablation::{run_ablation, totals, AblationTable, AblationTotal};
pub use io::{
    read_events, read_trajectory, write_events, write_metrics, write_run, write_trajectory, EVENT_HEADER,
    TRAJECTORY_HEADER,
};
pub use plot::emit_plot;
pub use run::{
    logged_path_length, prepare, run_scenario, EventRow, RunMetrics, RunOutput, TrajectoryRow, CONTROL_EVERY,
    GNSS_EVERY, IMU_EVERY, LIDAR_EVERY, LOG_EVERY, TICK,
};
pub use scenario::{PlanConfig, RunConfig, Scenario, StackConfig, BUILTIN_SCENARIOS};
