//! `orojar`: dataset generation, training, SVD and learned direction
//! discovery, evaluation and traversal rendering.

mod artifacts;
mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use commands::Context;
use failure::Failure;

#[derive(Parser)]
#[command(name = "orojar", version, about = "Disentanglement lab built around orthogonal Jacobian regularization")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file, TOML or JSON (by extension).
    #[arg(short, long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Dotted-path override, repeatable (e.g. --set penalty.lambda=10).
    #[arg(short, long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output root; each command writes to <root>/<command>/.
    #[arg(short, long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the sprite dataset and a contact sheet.
    MakeData,
    /// Train a GAN, optionally regularized.
    Train {
        /// Continue from <root>/train/checkpoint.dgan.
        #[arg(long)]
        resume: bool,
    },
    /// Closed-form directions from the first-layer weight.
    Sefa,
    /// Learn orthonormal directions on the frozen generator.
    Discover,
    /// Variation predictability, activeness, path length and penalty trace.
    Eval,
    /// Per-dimension traversal grid.
    Traverse,
}

fn run(cli: Cli) -> Result<PathBuf, Failure> {
    let cfg = config::load(cli.common.config.as_deref(), &cli.common.set)?;
    let root = artifacts::output_root(cli.common.out.as_deref(), &cfg);
    let ctx = Context {
        cfg,
        root,
        config_file: cli.common.config,
    };
    match cli.command {
        Command::MakeData => commands::make_data(&ctx),
        Command::Train { resume } => commands::train_cmd(&ctx, resume),
        Command::Sefa => commands::sefa_cmd(&ctx),
        Command::Discover => commands::discover_cmd(&ctx),
        Command::Eval => commands::eval_cmd(&ctx),
        Command::Traverse => commands::traverse_cmd(&ctx),
    }
}

fn main() -> ExitCode {
    let reference = config::key_reference();
    let cmd = Cli::command()
        .after_help(reference.clone())
        .mut_subcommands(|s| s.after_help(reference.clone()));
    let cli = match Cli::from_arg_matches(&cmd.get_matches()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(dir) => {
            println!("{}", commands::describe(&dir));
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("{}", f.line());
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
