use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use cropnav::harness::{
    emit_plot, prepare, read_events, read_trajectory, run_ablation, run_scenario, write_run, Scenario,
};

#[derive(Parser)]
#[command(name = "cropnav", about = "Under-canopy navigation simulator and experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its logs and plot.
    Run {
        /// Built-in scenario name or path to a scenario TOML file.
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run several scenarios over a seed range and tabulate the results.
    Ablation {
        /// Comma-separated scenario names or files.
        #[arg(long, value_delimiter = ',')]
        scenarios: Vec<String>,
        /// Seed range `a..b` (end exclusive) or a single seed.
        #[arg(long)]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-render the SVG of a finished run directory.
    Plot {
        #[arg(long)]
        run: PathBuf,
    },
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().context("seed range start")?;
        let b: u64 = b.trim().parse().context("seed range end")?;
        if b <= a {
            bail!("empty seed range {s}");
        }
        Ok((a..b).collect())
    } else {
        Ok(vec![s.trim().parse().context("seed")?])
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run { scenario, seed, out } => {
            let mut s = Scenario::load(&scenario)?;
            if let Some(seed) = seed {
                s.run.seed = seed;
            }
            let result = run_scenario(&s)?;
            write_run(&out, &s, &result)?;
            let m = &result.metrics;
            println!(
                "{} seed {}: {:.1} m, {} recoveries, {} interventions, m/intervention {}, completed {}",
                m.scenario,
                m.seed,
                m.distance_m,
                m.recoveries,
                m.interventions,
                m.meters_per_intervention.map_or("-".into(), |v| format!("{v:.1}")),
                m.completion
            );
        }
        Command::Ablation { scenarios, seeds, out } => {
            let list = scenarios
                .iter()
                .map(|n| Scenario::load(n))
                .collect::<Result<Vec<_>, _>>()?;
            let seeds = parse_seeds(&seeds)?;
            let table = run_ablation(&list, &seeds)?;
            fs::create_dir_all(&out)?;
            table.write_csv(fs::File::create(out.join("ablation.csv"))?)?;
            let text = table.to_text();
            fs::write(out.join("ablation.txt"), &text)?;
            print!("{text}");
        }
        Command::Plot { run } => {
            let text = fs::read_to_string(run.join("scenario.toml")).context("reading scenario.toml")?;
            let s = Scenario::from_toml(&text)?;
            let (field, plan, _) = prepare(&s)?;
            let rows = read_trajectory(&run.join("trajectory.csv"))?;
            if rows.is_empty() {
                bail!("trajectory log in {} is empty", run.display());
            }
            let events = read_events(&run.join("events.csv"))?;
            let path = run.join("trajectory.svg");
            fs::write(&path, emit_plot(&rows, &field, &plan, &events))?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}
