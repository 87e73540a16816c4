use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tutor::config::{Precision, RunConfig};

mod commands;

#[derive(Parser)]
#[command(name = "tutor", version, about = "Tubelet-token HOI detection on synthetic video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file applied over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for checkpoints, metrics and reports.
    #[arg(long, global = true)]
    out: Option<String>,
    #[arg(long, global = true, value_parser = ["f32", "f64"])]
    mode: Option<String>,
    /// Per-key override, repeatable; applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the synthetic set and write metrics and a checkpoint.
    Train,
    /// Score a checkpoint on the held-out clips.
    Eval,
    /// Symbolic and measured attention cost, global vs irregular windows.
    Bench,
    /// Run every finite-difference gradient suite.
    Gradcheck {
        /// Also run a suite with a deliberately wrong backward rule.
        #[arg(long)]
        negative_control: bool,
    },
    /// Dump the per-frame token assignment of one clip.
    LinkDemo {
        /// Clip index in the held-out set.
        #[arg(long, default_value_t = 0)]
        clip: usize,
    },
    /// Write the synthetic train and held-out sets to disk.
    GenData,
}

fn resolve(c: &Common) -> tutor::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &c.config {
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    if let Some(m) = &c.mode {
        cfg.mode = m.parse::<Precision>()?;
    }
    for kv in &c.overrides {
        cfg.apply_override(kv)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match resolve(&cli.common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    println!("# resolved config");
    print!("{}", cfg.to_text());
    println!("# end config");
    let result = match cli.command {
        Command::Train => commands::train(&cfg),
        Command::Eval => commands::eval(&cfg),
        Command::Bench => commands::bench(&cfg),
        Command::Gradcheck { negative_control } => commands::gradcheck(negative_control),
        Command::LinkDemo { clip } => commands::link_demo(&cfg, clip),
        Command::GenData => commands::gen_data(&cfg),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
