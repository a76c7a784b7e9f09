use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rl2r::cli;
use rl2r::config::RunConfig;
use rl2r::{Error, Result};

#[derive(Parser)]
#[command(name = "rl2r", version, about = "Rank-reward GRPO on a toy quality scorer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// mean-anchored | prob-average | case-v
    #[arg(long, global = true)]
    variant: Option<String>,
    /// fidelity | binary | regression
    #[arg(long, global = true)]
    reward: Option<String>,
    /// Clamp out-of-range answers into [1, 5].
    #[arg(long, global = true, conflicts_with = "reject")]
    clamp: bool,
    /// Drop out-of-range answers.
    #[arg(long, global = true)]
    reject: bool,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world: world.csv and latent.csv.
    Simulate,
    /// Train a policy: checkpoint, run log, std curve.
    Train,
    /// Score a world with a checkpoint and report SRCC/PLCC.
    Eval,
    /// gMAD pairs between two models, both attack directions.
    Gmad,
    /// Parse a JSONL response log and report per-image rewards.
    ParseLogs,
}

fn resolve(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.set("seed", &s.to_string())?;
    }
    if let Some(e) = c.epochs {
        cfg.set("epochs", &e.to_string())?;
    }
    if let Some(v) = &c.variant {
        cfg.set("variant", v)?;
    }
    if let Some(r) = &c.reward {
        cfg.set("reward", r)?;
    }
    if c.clamp {
        cfg.set("clamp", "clamp")?;
    }
    if c.reject {
        cfg.set("clamp", "reject")?;
    }
    if let Some(o) = &c.out_dir {
        cfg.out_dir = Some(o.clone());
    }
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn run(args: Cli) -> Result<()> {
    let cfg = resolve(&args.common)?;
    let out = cli::resolve_out_dir(&cfg);
    match args.command {
        Command::Simulate => {
            let n = cli::cmd_simulate(&cfg, &out)?;
            println!("wrote {n} images to {}", out.display());
        }
        Command::Train => {
            let (summary, _) = cli::cmd_train(&cfg, &out)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            println!("artifacts in {}", out.display());
        }
        Command::Eval => {
            let report = cli::cmd_eval(&cfg, &out)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Gmad => {
            let report = cli::cmd_gmad(&cfg, &out)?;
            for (role, o) in [("a", &report.a_defends), ("b", &report.b_defends)] {
                if o.pairs.is_empty() {
                    eprintln!("warning: {role} defending, every level skipped");
                }
                for p in &o.pairs {
                    println!(
                        "{role} defends level {}: {} vs {} (defender gap {:.4}, attacker gap {:.4})",
                        p.defender_level, p.image_a, p.image_b, p.defender_gap, p.attacker_gap
                    );
                }
            }
            println!("artifacts in {}", out.display());
        }
        Command::ParseLogs => {
            let r = cli::cmd_parse_logs(&cfg, &out)?;
            println!(
                "{} images, {} responses, clamped {}, rejected {}, malformed {}",
                r.images.len(),
                r.responses,
                r.clamped,
                r.rejected,
                r.malformed
            );
            println!("artifacts in {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
