//! `cyphertalk`: generate keys, implant them, tune and query implanted
//! models locally or over the network, run the attack harness and the
//! full benchmark.

mod commands;
mod config;
mod exit;
mod rundir;

use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

use cyphertalk::model::Mode;

use crate::commands::{AttackArgs, ImplantArgs, Target};
use crate::config::Config;
use crate::exit::classify;

#[derive(Parser)]
#[command(
    name = "cyphertalk",
    version,
    about = "Key-shaken language models: keygen, implant, private tuning and inference"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Versioned TOML config; built-in defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one config field, e.g. `--set recover.lr=0.3`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    set: Vec<String>,
    /// Run directory for artifacts, config.toml and manifest.json.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct Seed {
    /// Seed for everything random in this command.
    #[arg(long)]
    seed: u64,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct TargetArgs {
    /// Run against a local checkpoint.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Run against a server, `host:port`.
    #[arg(long)]
    server: Option<String>,
}

impl TargetArgs {
    fn target(&self) -> Target {
        match (&self.model, &self.server) {
            (Some(p), _) => Target::Local(p.clone()),
            (None, Some(a)) => Target::Remote(a.clone()),
            (None, None) => unreachable!("clap requires one of --model / --server"),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Task,
    Lm,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Task => Mode::Task,
            ModeArg::Lm => Mode::Lm,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic classification task (train/test plus attributes).
    Synth {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        seed: Seed,
    },
    /// Initialize a model and pretrain it with masked-token prediction.
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        seed: Seed,
        /// Training data, `ids<TAB>label` per line.
        #[arg(long)]
        data: PathBuf,
    },
    /// Generate a key file.
    Keygen {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        seed: Seed,
    },
    /// Shake a model with a key, recover it, and write the server-ready checkpoint.
    Implant {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        seed: Seed,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        key: PathBuf,
        /// Recovery data; required when the key has vertical rounds.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Held-out data for per-epoch evaluation.
        #[arg(long)]
        heldout: Option<PathBuf>,
    },
    /// Private fine-tuning of an implanted model.
    Tune {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        seed: Seed,
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        target: TargetArgs,
    },
    /// Private inference: encode, run, decode.
    Infer {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        key: PathBuf,
        /// One sequence per line, optionally followed by TAB and a label.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "task")]
        mode: ModeArg,
        #[command(flatten)]
        target: TargetArgs,
    },
    /// Embedding inversion (and, with --data-dir, attribute probe) attacks.
    Attack {
        #[command(flatten)]
        run: RunArgs,
        /// The public pre-implant model.
        #[arg(long)]
        original: PathBuf,
        /// The implanted model as the server stores it.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        key: PathBuf,
        /// A `synth` run directory.
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Run every acceptance check and write summary.txt and bench.csv.
    Bench {
        #[command(flatten)]
        run: RunArgs,
        /// Key seed; data, model and schedule seeds come from the config.
        #[command(flatten)]
        seed: Seed,
    },
    /// Host an implanted model for remote tuning and inference.
    Serve {
        /// Checkpoint to serve.
        #[arg(long, env = "CYPHERTALK_CHECKPOINT")]
        checkpoint: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        #[arg(long, default_value_t = 7878)]
        port: u16,
        /// Write the checkpoint back after every tuning step, before the ack.
        #[arg(long)]
        persist: bool,
    },
}

fn config(run: &RunArgs) -> Result<Config> {
    Ok(Config::load(run.config.as_deref(), &run.set)?)
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth { run, seed } => commands::synth(&config(&run)?, &run.out, seed.seed),
        Command::Pretrain { run, seed, data } => {
            commands::pretrain(&config(&run)?, &run.out, seed.seed, &data)
        }
        Command::Keygen { run, seed } => commands::keygen(&config(&run)?, &run.out, seed.seed),
        Command::Implant {
            run,
            seed,
            model,
            key,
            data,
            heldout,
        } => commands::implant_cmd(
            &config(&run)?,
            &run.out,
            seed.seed,
            &ImplantArgs {
                model: &model,
                key: &key,
                data: data.as_deref(),
                heldout: heldout.as_deref(),
            },
        ),
        Command::Tune {
            run,
            seed,
            key,
            data,
            target,
        } => commands::tune(
            &config(&run)?,
            &run.out,
            seed.seed,
            &key,
            &data,
            &target.target(),
        ),
        Command::Infer {
            run,
            key,
            data,
            mode,
            target,
        } => commands::infer(
            &config(&run)?,
            &run.out,
            &key,
            &data,
            mode.into(),
            &target.target(),
        ),
        Command::Attack {
            run,
            original,
            model,
            key,
            data_dir,
        } => commands::attack(
            &config(&run)?,
            &run.out,
            &AttackArgs {
                original: &original,
                model: &model,
                key: &key,
                data_dir: data_dir.as_deref(),
            },
        ),
        Command::Bench { run, seed } => commands::bench(&config(&run)?, &run.out, seed.seed),
        Command::Serve {
            checkpoint,
            host,
            port,
            persist,
        } => commands::serve_cmd(&checkpoint, SocketAddr::new(host, port), persist),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let class = classify(&e);
            eprintln!("error: {e:#}");
            class.exit_code()
        }
    }
}
