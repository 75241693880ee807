use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cropnav(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cropnav"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_small(dir: &Path, name: &str, recovery: bool) -> String {
    let path = dir.join(format!("{name}.toml"));
    fs::write(
        &path,
        format!("[field]\nrows = 3\nrow_length_m = 12.0\n\n[stack]\nrecovery_enabled = {recovery}\n\n[run]\nseed = 1\n"),
    )
    .unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn run_writes_logs_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_small(dir.path(), "tiny", true);
    let out = dir.path().join("run");
    let o = cropnav(&["run", "--scenario", &scenario, "--seed", "3", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.starts_with("tiny seed 3:"), "{stdout}");
    for name in ["scenario.toml", "trajectory.csv", "events.csv", "metrics.json", "trajectory.svg"] {
        assert!(out.join(name).exists(), "{name}");
    }
    let header = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert!(header.starts_with("t,truth_x,truth_y,truth_theta,est_x,est_y,est_theta,mu_hat,nu_hat,dtheta_hat,d_lane,phi,mode,v_left,v_right\n"));
    assert!(fs::read_to_string(out.join("scenario.toml")).unwrap().contains("seed = 3"));

    fs::remove_file(out.join("trajectory.svg")).unwrap();
    let o = cropnav(&["plot", "--run", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fs::read_to_string(out.join("trajectory.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn ablation_over_a_seed_range() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_small(dir.path(), "with_recovery", true);
    let b = write_small(dir.path(), "without_recovery", false);
    let out = dir.path().join("abl");
    let list = format!("{a},{b}");
    let o = cropnav(&["ablation", "--scenarios", &list, "--seeds", "0..2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 + 2);
    assert!(csv.contains("with_recovery,total,"));
    assert!(out.join("ablation.txt").exists());
}

#[test]
fn bad_arguments_fail() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert!(!cropnav(&["run", "--scenario", "no_such_scenario", "--out", out]).status.success());
    assert!(!cropnav(&["ablation", "--scenarios", "gnss_only,long_path", "--seeds", "5..5", "--out", out]).status.success());
    assert!(!cropnav(&["plot", "--run", out]).status.success());
    assert!(!cropnav(&["frobnicate"]).status.success());
}
