use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use ipp_cli::config::{Level, ScenarioConfig};
use ipp_cli::runner::{self, METRICS_FILE};

/// Informative path planning missions on grid graphs.
#[derive(Parser)]
#[command(name = "ipp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a scenario and write its run directory.
    Run {
        config: PathBuf,
        /// Parent of the per-run output directory.
        #[arg(long, default_value = "runs")]
        out_dir: PathBuf,
    },
    /// Check a scenario and print its normalized form.
    Validate { config: PathBuf },
    /// Start the vehicle backends of a remote scenario and wait for them.
    SpawnBackends {
        config: PathBuf,
        /// Keep serving this many seconds; with 0, serve until stdin closes.
        #[arg(long)]
        hold_s: Option<f64>,
    },
    /// Recompute the metrics of a remote run from its wire trace.
    Replay { run_dir: PathBuf },
}

const CONFIG_ERROR: u8 = 1;
const MISSION_FAULT: u8 = 2;

fn load(path: &Path) -> Result<ScenarioConfig, ExitCode> {
    ScenarioConfig::load(path).map_err(|e| {
        for issue in e.issues() {
            eprintln!("error: {issue}");
        }
        ExitCode::from(CONFIG_ERROR)
    })
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Validate { config } => match load(&config) {
            Ok(cfg) => {
                print!("{}", cfg.to_toml());
                ExitCode::SUCCESS
            }
            Err(code) => code,
        },
        Command::Run { config, out_dir } => {
            let cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            match runner::run(&cfg, &out_dir) {
                Ok(report) => {
                    let e = &report.execution;
                    println!("run directory: {}", report.dir.display());
                    println!("steps: {}  hops: {}  duration: {:.1} s", e.outcome.steps, e.hops.len(), e.elapsed);
                    if let Some(m) = e.outcome.final_metrics() {
                        let mse = m.mse.map_or("NA".into(), |v| format!("{v:.6}"));
                        println!("final mse: {mse}  coverage: {:.3}", m.coverage);
                    }
                    if let Some(a) = &e.outcome.aborted {
                        eprintln!("mission aborted at step {}: vehicle {}: {}", a.step, a.vehicle, a.fault);
                        return ExitCode::from(MISSION_FAULT);
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("mission failed: {e}");
                    ExitCode::from(MISSION_FAULT)
                }
            }
        }
        Command::SpawnBackends { config, hold_s } => {
            let cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            if cfg.level != Level::Remote {
                eprintln!("error: level: spawn-backends needs level = \"remote\"");
                return ExitCode::from(CONFIG_ERROR);
            }
            let started = runner::build_world(&cfg).and_then(|world| {
                let broker = runner::make_broker(&cfg)?;
                runner::spawn_backends(&cfg, &world, broker)
            });
            let set = match started {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("backends failed: {e}");
                    return ExitCode::from(MISSION_FAULT);
                }
            };
            for (id, start) in set.ids().iter().zip(set.starts()) {
                println!("{id}: ready at node {start}");
            }
            match hold_s {
                Some(s) if s > 0.0 => std::thread::sleep(Duration::from_secs_f64(s)),
                Some(_) => {
                    let _ = std::io::stdin().read_to_end(&mut Vec::new());
                }
                None => {}
            }
            set.shutdown();
            ExitCode::SUCCESS
        }
        Command::Replay { run_dir } => match runner::replay(&run_dir) {
            Ok(csv) => {
                let out = run_dir.join("replay_metrics.csv");
                if let Err(e) = std::fs::write(&out, &csv) {
                    eprintln!("cannot write {}: {e}", out.display());
                    return ExitCode::from(MISSION_FAULT);
                }
                let same = std::fs::read(run_dir.join(METRICS_FILE)).is_ok_and(|m| m == csv);
                println!("{}: {}", out.display(), if same { "matches metrics.csv" } else { "differs from metrics.csv" });
                if same {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(MISSION_FAULT)
                }
            }
            Err(e) => {
                eprintln!("replay failed: {e}");
                ExitCode::from(MISSION_FAULT)
            }
        },
    }
}
