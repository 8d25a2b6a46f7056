use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use slotmoe::degrade::{default_pools, make_sample, write_fixture, PatchShape, Task};
use slotmoe::pipeline::{evaluate_checkpoint, train, verify, ExperimentConfig};
use slotmoe::routing::load_prompt_pools;
use slotmoe::Error;

#[derive(Parser)]
#[command(name = "slotmoe", version, about = "Band alignment, fused experts and task weighting on synthetic restoration tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON config and write logs plus a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Prompt pools as {"task_id": ["prompt", ...]}.
        #[arg(long)]
        prompts: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on held-out samples with the fixed prompts.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated subset of tasks.
        #[arg(long, value_delimiter = ',')]
        tasks: Option<Vec<String>>,
    },
    /// Run property suites and write a JSON report.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long)]
        json: PathBuf,
    },
    /// Dump one synthetic sample as tensor containers plus a manifest.
    Fixtures {
        #[arg(long)]
        task: String,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        channels: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
    },
    /// Print a built-in config profile (desk or paper) as JSON.
    Profile {
        #[arg(default_value = "desk")]
        name: String,
    },
}

enum Outcome {
    Ok,
    AssertionFailed,
}

fn run(cli: Cli) -> slotmoe::Result<Outcome> {
    match cli.command {
        Command::Train { config, out, prompts } => {
            let cfg = ExperimentConfig::load(&config)?;
            let pools = match prompts {
                Some(p) => load_prompt_pools(&p).map_err(|e| Error::Config(e.to_string()))?,
                None => default_pools(),
            };
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            let (_, report) = train(&cfg, pools, Some(&out))?;
            if let (Some(first), Some(last)) = (report.steps.first(), report.steps.last()) {
                println!(
                    "trained {} steps: total loss {:.6} -> {:.6}",
                    report.steps.len(),
                    first.loss.total,
                    last.loss.total
                );
            }
            println!("checkpoint: {}", out.join("checkpoint").display());
            Ok(Outcome::Ok)
        }
        Command::Eval { checkpoint, out, tasks } => {
            let tasks = tasks
                .map(|ts| ts.iter().map(|t| t.parse::<Task>()).collect::<slotmoe::Result<Vec<_>>>())
                .transpose()?;
            let report = evaluate_checkpoint(&checkpoint, tasks.as_deref(), &out)?;
            for (m, b) in report.records.iter().zip(&report.baseline) {
                println!(
                    "{:<11} psnr {:>8.3} (input {:>8.3})  ssim {:.4}  sam {:.4}  ergas {:.3}",
                    m.task, m.psnr, b.psnr, m.ssim, m.sam, m.ergas
                );
            }
            println!("distinct expert sets over fixed prompts: {}", report.distinct_route_sets);
            Ok(Outcome::Ok)
        }
        Command::Verify { suite, json } => {
            let report = verify(&suite)?;
            if let Some(parent) = json.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            fs::write(&json, serde_json::to_string_pretty(&report)?)?;
            for a in &report.assertions {
                println!(
                    "{} [{}] {}: {:.3e} {} {:.3e}",
                    if a.passed { "PASS" } else { "FAIL" },
                    a.suite,
                    a.name,
                    a.value,
                    a.relation,
                    a.bound
                );
            }
            Ok(if report.passed { Outcome::Ok } else { Outcome::AssertionFailed })
        }
        Command::Fixtures { task, seed, out, channels, size } => {
            let task: Task = task.parse()?;
            let pools = default_pools();
            let shape = PatchShape {
                channels,
                height: size,
                width: size,
            };
            let sample = make_sample(task, seed, shape, &pools[task.id()])?;
            write_fixture(&sample, &out)?;
            println!("wrote {} fixture (seed {seed}) to {}", task, out.display());
            Ok(Outcome::Ok)
        }
        Command::Profile { name } => {
            println!("{}", serde_json::to_string_pretty(&ExperimentConfig::profile(&name)?)?);
            Ok(Outcome::Ok)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::AssertionFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
