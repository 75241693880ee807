use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;

use super::run::{run_scenario, RunMetrics};
use super::scenario::Scenario;
use crate::error::{config, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTotal {
    pub scenario: String,
    pub runs: usize,
    pub distance_m: f64,
    pub recoveries: usize,
    pub interventions: usize,
    pub completed: usize,
    pub meters_per_intervention: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    /// One row per (scenario, seed), scenarios in the given order.
    pub runs: Vec<RunMetrics>,
    pub totals: Vec<AblationTotal>,
}

fn mpi(v: Option<f64>) -> String {
    v.map_or("-".to_string(), |m| format!("{m:.1}"))
}

impl AblationTable {
    pub fn total(&self, scenario: &str) -> Option<&AblationTotal> {
        self.totals.iter().find(|t| t.scenario == scenario)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "scenario",
            "seed",
            "distance_m",
            "recoveries",
            "interventions",
            "meters_per_intervention",
            "completion",
        ])?;
        for r in &self.runs {
            w.write_record([
                r.scenario.clone(),
                r.seed.to_string(),
                format!("{:.1}", r.distance_m),
                r.recoveries.to_string(),
                r.interventions.to_string(),
                mpi(r.meters_per_intervention),
                r.completion.to_string(),
            ])?;
        }
        for t in &self.totals {
            w.write_record([
                t.scenario.clone(),
                "total".into(),
                format!("{:.1}", t.distance_m),
                t.recoveries.to_string(),
                t.interventions.to_string(),
                mpi(t.meters_per_intervention),
                format!("{}/{}", t.completed, t.runs),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<22} {:>6} {:>11} {:>10} {:>13} {:>12} {:>9}",
            "scenario", "seed", "distance_m", "recoveries", "interventions", "m/interv.", "complete"
        );
        for r in &self.runs {
            let _ = writeln!(
                s,
                "{:<22} {:>6} {:>11.1} {:>10} {:>13} {:>12} {:>9}",
                r.scenario,
                r.seed,
                r.distance_m,
                r.recoveries,
                r.interventions,
                mpi(r.meters_per_intervention),
                if r.completion { "yes" } else { "no" }
            );
        }
        for t in &self.totals {
            let _ = writeln!(
                s,
                "{:<22} {:>6} {:>11.1} {:>10} {:>13} {:>12} {:>9}",
                t.scenario,
                "total",
                t.distance_m,
                t.recoveries,
                t.interventions,
                mpi(t.meters_per_intervention),
                format!("{}/{}", t.completed, t.runs)
            );
        }
        s
    }
}

pub fn totals(runs: &[RunMetrics], scenario: &str) -> AblationTotal {
    let mine: Vec<&RunMetrics> = runs.iter().filter(|r| r.scenario == scenario).collect();
    let distance: f64 = mine.iter().map(|r| r.distance_m).sum();
    let interventions = mine.iter().map(|r| r.interventions).sum();
    AblationTotal {
        scenario: scenario.to_string(),
        runs: mine.len(),
        distance_m: distance,
        recoveries: mine.iter().map(|r| r.recoveries).sum(),
        interventions,
        completed: mine.iter().filter(|r| r.completion).count(),
        meters_per_intervention: RunMetrics::per_intervention(distance, interventions),
    }
}

/// Runs every scenario with every seed (in parallel) and tabulates the
/// results in input order.
pub fn run_ablation(scenarios: &[Scenario], seeds: &[u64]) -> Result<AblationTable> {
    if scenarios.len() < 2 {
        return config("an ablation needs at least two scenarios");
    }
    if seeds.is_empty() {
        return config("an ablation needs at least one seed");
    }
    let jobs: Vec<Scenario> = scenarios
        .iter()
        .flat_map(|s| seeds.iter().map(move |&seed| s.with_seed(seed)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|s| run_scenario(s).map(|o| o.metrics))
        .collect::<Result<Vec<_>>>()?;
    let totals = scenarios.iter().map(|s| totals(&runs, &s.name)).collect();
    Ok(AblationTable { runs, totals })
}
