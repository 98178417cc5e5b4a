mod commands;
mod distributed;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mmoforge_core::config::{load_config, Config, ConfigError};

#[derive(Parser, Debug)]
#[command(name = "mmoforge", version, about = "Persistent multiagent world: simulate, train, evaluate, inspect")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON config file; unspecified keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or file for generate-map).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Write per-tick events as JSON lines to this file.
    #[arg(long, global = true)]
    log_events: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a map and write it in text form.
    GenerateMap,
    /// Run scripted agents.
    Simulate {
        #[arg(long, default_value = "forager")]
        policy: String,
        #[arg(long, default_value_t = 1000)]
        ticks: u64,
        /// Population cap; overrides spawn_cap.
        #[arg(long)]
        agents: Option<usize>,
        /// Use this map file instead of generating one.
        #[arg(long)]
        map: Option<PathBuf>,
    },
    /// Train policies for a number of optimizer steps.
    Train {
        #[arg(long, default_value_t = 100)]
        steps: u64,
        #[arg(long)]
        agents: Option<usize>,
        #[arg(long, default_value_t = 1)]
        servers: usize,
        #[arg(long, default_value_t = 1)]
        clients: usize,
        /// Environments in total; defaults to one per server.
        #[arg(long)]
        envs: Option<usize>,
        /// Run servers and clients as separate processes over TCP.
        #[arg(long)]
        distributed: bool,
        /// Write a checkpoint every this many steps (0: only at the end).
        #[arg(long, default_value_t = 0)]
        checkpoint_every: u64,
        /// Start from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Report mean agent lifetime of a checkpoint on fresh maps.
    Evaluate {
        /// Checkpoint file; defaults to <out>/checkpoint.mmfc.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        episodes: u32,
        #[arg(long, default_value_t = 500)]
        ticks: u64,
        #[arg(long)]
        agents: Option<usize>,
    },
    /// Export visitation or value heatmaps.
    Overlay {
        #[arg(long, value_parser = ["visits", "value"])]
        kind: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Scripted policy for visit counts when no checkpoint is given.
        #[arg(long, default_value = "forager")]
        policy: String,
        #[arg(long, default_value_t = 2000)]
        ticks: u64,
        #[arg(long)]
        agents: Option<usize>,
        /// Population whose value head is drawn.
        #[arg(long, default_value_t = 0)]
        population: usize,
    },
    /// Time synchronization across server and client counts.
    BenchSync {
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        servers: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        clients: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        /// Decisions per environment per round.
        #[arg(long, default_value_t = 4096)]
        batch: usize,
    },
    /// Serve as a server or client worker on a TCP port (used by --distributed).
    #[command(hide = true)]
    Worker {
        #[arg(long, value_parser = ["server", "client"])]
        role: String,
        /// Listen address; ASCEND_BIND overrides the default.
        #[arg(long)]
        bind: Option<String>,
    },
}

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    MissingFile(String),
    Io(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 3,
            Failure::MissingFile(_) => 4,
            Failure::Io(_) => 5,
            Failure::Runtime(_) => 6,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Failure::Config(_) => "config",
            Failure::MissingFile(_) => "missing_file",
            Failure::Io(_) => "io",
            Failure::Runtime(_) => "runtime",
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::MissingFile(m) | Failure::Io(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                Failure::MissingFile(e.to_string())
            }
            other => Failure::Config(other.to_string()),
        }
    }
}

pub type CmdResult = Result<(), Failure>;

impl Common {
    /// The config file (or defaults) with command-line overrides, validated.
    pub fn config(&self, agents: Option<usize>) -> Result<Config, Failure> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => Config::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(a) = agents {
            cfg.spawn_cap = a;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MMOFORGE_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let first = e.to_string();
            let line = first.lines().next().unwrap_or("bad arguments").trim_start_matches("error: ");
            eprintln!("error kind=usage code=2 message={:?}", line);
            return ExitCode::from(2);
        }
    };
    let result = commands::run(cli.command, &cli.common);
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error kind={} code={} message={:?}", f.kind(), f.code(), f.message().replace('\n', " "));
            ExitCode::from(f.code())
        }
    }
}
