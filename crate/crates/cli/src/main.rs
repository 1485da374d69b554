use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use saliency_cli::commands;
use saliency_cli::config::KEYS;
use saliency_cli::{CliResult, RunConfig};

#[derive(Parser)]
#[command(
    name = "saliency",
    about = "Salient object detection with select-integrate attention"
)]
struct Cli {
    /// key=value configuration file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// rgb or rgbd.
    #[arg(long, global = true)]
    mode: Option<String>,
    #[arg(long, global = true)]
    side: Option<usize>,
    /// Synthetic foreground fraction used by `macs`.
    #[arg(long = "fg-fraction", global = true)]
    fg_fraction: Option<f64>,
    /// Extra key=value override, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Predict saliency and boundary maps at every level.
    Infer,
    /// Count MACs of the SIA decoder against plain self-attention.
    Macs,
    /// Compare autograd with finite differences.
    Gradcheck,
    /// Fit one image and report the final loss.
    Overfit,
    /// MAE and maxF of a predicted map against a mask.
    Eval { pred: PathBuf, gt: PathBuf },
    /// List configuration keys and their defaults.
    Keys,
}

fn resolve(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    let mut flags: Vec<(&str, String)> = Vec::new();
    if let Some(v) = cli.seed {
        flags.push(("seed", v.to_string()));
    }
    if let Some(v) = &cli.out {
        flags.push(("out", v.display().to_string()));
    }
    if let Some(v) = &cli.mode {
        flags.push(("mode", v.clone()));
    }
    if let Some(v) = cli.side {
        flags.push(("side", v.to_string()));
    }
    if let Some(v) = cli.fg_fraction {
        flags.push(("fg_fraction", v.to_string()));
    }
    for (k, v) in &flags {
        cfg.set(k, v)?;
    }
    for kv in &cli.set {
        cfg.apply_text(kv, "--set")?;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> CliResult<()> {
    if let Command::Eval { pred, gt } = &cli.command {
        print!("{}", commands::cmd_eval(pred, gt)?);
        return Ok(());
    }
    if let Command::Keys = cli.command {
        for (key, default, doc) in KEYS {
            println!("{key}={default}\t# {doc}");
        }
        return Ok(());
    }
    let cfg = resolve(cli)?;
    match cli.command {
        Command::Infer => {
            let files = commands::cmd_infer(&cfg)?;
            println!("wrote {} files to {}", files.len(), cfg.out.display());
        }
        Command::Macs => {
            let report = commands::cmd_macs(&cfg)?;
            print!("{}", report.to_text());
        }
        Command::Gradcheck => {
            let result = commands::cmd_gradcheck(&cfg);
            if let Ok(report) = &result {
                println!("max_rel_error\t{:.3e}", report.max_rel_error);
            }
            result?;
        }
        Command::Overfit => {
            let report = commands::cmd_overfit(&cfg)?;
            println!("final_loss\t{:.6}", report.final_loss);
            println!("full_resolution_mae\t{:.6}", report.mae);
        }
        Command::Eval { .. } | Command::Keys => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
