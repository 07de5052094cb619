use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use kb_core::cli::{bench, run, verify, with_workers, Fault, ScenarioConfig};
use kb_core::KbError;

#[derive(Parser)]
#[command(name = "kb", version, about = "Kaniel-Shinbrot solver and estimate checks for soft-potential Boltzmann")]
struct Cli {
    /// Worker threads for the collision sweeps.
    #[arg(long, global = true, env = "KB_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a scenario and write its artifacts.
    Run {
        config: PathBuf,
        /// Overrides the output directory of the config.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Closed-form and geometry suites.
    Verify {
        /// Print the verdicts as one JSON document.
        #[arg(long)]
        json: bool,
        #[arg(long, hide = true)]
        inject_fault: Option<FaultArg>,
    },
    /// Time the gain quadrature on the scenario grid.
    Bench {
        config: PathBuf,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    PostCollisionSign,
}

fn report_error(e: &KbError) -> ExitCode {
    let doc = match e {
        KbError::Config(v) => json!({ "error": "invalid configuration", "violations": v }),
        KbError::SmallnessViolated { norm, threshold } => json!({
            "error": "smallness violated",
            "violations": [e.to_string()],
            "norm": norm,
            "threshold": threshold,
        }),
        other => json!({ "error": "run failed", "message": other.to_string() }),
    };
    eprintln!("{doc}");
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, output } => {
            let outcome = ScenarioConfig::load(&config).and_then(|cfg| run(&cfg, output.as_deref(), cli.workers));
            match outcome {
                Ok(o) => {
                    for v in &o.verdicts {
                        let tag = if v.skipped { "SKIP" } else if v.pass { "PASS" } else { "FAIL" };
                        println!("[{tag}] {:<22} {:.4e}  {}", v.name, v.worst_ratio, v.detail);
                    }
                    println!("artifacts: {}", o.dir.display());
                    if o.pass {
                        ExitCode::SUCCESS
                    } else {
                        let failed: Vec<_> = o.verdicts.iter().filter(|v| !v.pass).collect();
                        eprintln!("{}", json!({ "error": "check failed", "verdicts": failed }));
                        ExitCode::from(1)
                    }
                }
                Err(e) => report_error(&e),
            }
        }
        Command::Verify { json, inject_fault } => {
            let fault = inject_fault.map(|f| match f {
                FaultArg::PostCollisionSign => Fault::PostCollisionSign,
            });
            let report = match with_workers(cli.workers, || verify(fault)) {
                Ok(r) => r,
                Err(e) => return report_error(&e),
            };
            if json {
                println!("{}", serde_json::to_string_pretty(&report).expect("verify report serializes"));
            } else {
                for i in &report.items {
                    let tag = if i.pass { "PASS" } else { "FAIL" };
                    println!("[{tag}] {:<28} {:.3e} (tol {:.0e})  {}", i.name, i.worst, i.tolerance, i.detail);
                }
                println!("{:.2} s", report.seconds);
            }
            if report.pass {
                ExitCode::SUCCESS
            } else {
                let names: Vec<_> = report.failures().iter().map(|i| i.name.clone()).collect();
                eprintln!("verify failed: {}", names.join(", "));
                ExitCode::from(1)
            }
        }
        Command::Bench { config, repeats } => {
            let max = cli.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            match ScenarioConfig::load(&config).and_then(|cfg| bench(&cfg, max, repeats)) {
                Ok(r) => {
                    println!("{}", serde_json::to_string_pretty(&r).expect("bench report serializes"));
                    ExitCode::SUCCESS
                }
                Err(e) => report_error(&e),
            }
        }
    }
}
