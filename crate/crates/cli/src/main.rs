//! `giter`: operator command line for Git-based resource exchange.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{default_config_path, CliConfig, FileConfig, Overrides};
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputMode {
    Human,
    Json,
}

#[derive(Debug, Parser)]
#[command(name = "giter", version, about = "Exchange custom resources through a shared Git repository")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// Working clone to operate on.
    #[arg(long, global = true, env = "GITER_REPO")]
    repo: Option<PathBuf>,
    /// Remote to clone from when the working clone does not exist yet.
    #[arg(long, global = true, env = "GITER_REMOTE")]
    remote: Option<String>,
    #[arg(long, global = true, env = "GITER_BRANCH")]
    branch: Option<String>,
    #[arg(long, global = true, env = "GITER_IDENTITY_EMAIL")]
    identity_email: Option<String>,
    #[arg(long, global = true, env = "GITER_IDENTITY_NAME")]
    identity_name: Option<String>,
    /// producer, consumer or observer.
    #[arg(long, global = true, env = "GITER_ROLE")]
    role: Option<String>,
    /// Poll interval, e.g. `10s` or `500ms`.
    #[arg(long, global = true, env = "GITER_INTERVAL")]
    interval: Option<String>,
    #[arg(long, global = true, value_enum, env = "GITER_OUTPUT")]
    output: Option<OutputMode>,
    /// Defaults to ~/.config/giter/config.yaml.
    #[arg(long, global = true, env = "GITER_CONFIG")]
    config: Option<PathBuf>,
    /// Repeat for more detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Create a repository with the standard layout.
    Init(InitArgs),
    /// Check a resource document against its schema.
    Validate {
        file: PathBuf,
        /// Schema files to validate against instead of the repository's.
        #[arg(long = "schema")]
        schemas: Vec<PathBuf>,
    },
    #[command(subcommand)]
    Producer(ProducerCommand),
    #[command(subcommand)]
    Consumer(ConsumerCommand),
    #[command(subcommand)]
    Pipeline(PipelineCommand),
    /// Phase and generations of one resource.
    Status { key: String },
    /// Commits that touched one resource.
    History { key: String },
    /// Check every commit against the ownership contract.
    Audit,
    /// Rebuild the resource tree from history and compare with the checkout.
    Replay,
    /// Move a finished resource under archive/.
    Archive { key: String },
    #[command(subcommand)]
    Sim(SimCommand),
}

#[derive(Debug, Args)]
pub struct InitArgs {
    pub path: PathBuf,
    /// Create a bare repository to serve as the shared remote.
    #[arg(long)]
    pub bare: bool,
    /// Schema files to install.
    #[arg(long = "schema")]
    pub schemas: Vec<PathBuf>,
    /// Trust policy file to install.
    #[arg(long, conflicts_with = "trust")]
    pub policy: Option<PathBuf>,
    /// Allowlist entry `<email>=<role>`; repeatable.
    #[arg(long)]
    pub trust: Vec<String>,
    /// Pipeline bindings file to install.
    #[arg(long)]
    pub pipelines: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum ProducerCommand {
    /// Reconcile a single desired resource once.
    Apply {
        #[arg(short = 'f', long = "file")]
        file: PathBuf,
        #[arg(long)]
        auto_archive: bool,
    },
    /// Reconcile every document in a directory until stopped.
    Watch {
        #[arg(short = 'f', long = "dir")]
        dir: PathBuf,
        #[arg(long)]
        auto_archive: bool,
        #[arg(long)]
        max_cycles: Option<u64>,
    },
}

#[derive(Debug, Subcommand)]
enum ConsumerCommand {
    /// Process pending resources until stopped.
    Run {
        /// Shell command, or `builtin:<name>` (echo, uppercase-action, ...).
        #[arg(long)]
        handler: Option<String>,
        #[arg(long = "namespace")]
        namespaces: Vec<String>,
        #[arg(long = "kind")]
        kinds: Vec<String>,
        /// Kill the handler after this long, e.g. `60s`.
        #[arg(long)]
        handler_timeout: Option<String>,
        #[arg(long)]
        max_cycles: Option<u64>,
    },
}

#[derive(Debug, Subcommand)]
enum PipelineCommand {
    /// Evaluate bindings until stopped.
    Run {
        /// Bindings file; defaults to the repository's .giter/pipelines.yaml.
        #[arg(short = 'f', long = "file")]
        file: Option<PathBuf>,
        #[arg(long)]
        max_cycles: Option<u64>,
    },
}

#[derive(Debug, Subcommand)]
enum SimCommand {
    /// Run a scenario file and check its assertions.
    Run {
        #[arg(short = 'f', long = "file")]
        file: PathBuf,
        /// Keep the scenario repositories here (must be empty).
        #[arg(long)]
        workdir: Option<PathBuf>,
        /// Write the JSON-lines trace to this file.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

fn load_config(global: &GlobalArgs) -> Result<CliConfig> {
    let file = match &global.config {
        Some(p) => FileConfig::load(p, true)?,
        None => match default_config_path() {
            Some(p) => FileConfig::load(&p, false)?,
            None => FileConfig::default(),
        },
    };
    let flags = Overrides {
        repo: global.repo.clone(),
        remote: global.remote.clone(),
        branch: global.branch.clone(),
        identity_name: global.identity_name.clone(),
        identity_email: global.identity_email.clone(),
        role: global.role.clone(),
        interval: global.interval.clone(),
        output: global.output,
    };
    CliConfig::resolve(flags, file)
}

fn run(cli: Cli) -> Result<u8> {
    let cfg = load_config(&cli.global)?;
    let out = output::Out::new(cfg.output);
    match cli.command {
        Command::Init(args) => commands::init(&cfg, &out, &args),
        Command::Validate { file, schemas } => commands::validate(&cfg, &out, &file, &schemas),
        Command::Producer(ProducerCommand::Apply { file, auto_archive }) => {
            commands::producer_apply(&cfg, &out, &file, auto_archive)
        }
        Command::Producer(ProducerCommand::Watch { dir, auto_archive, max_cycles }) => {
            commands::producer_watch(&cfg, &out, &dir, auto_archive, max_cycles)
        }
        Command::Consumer(ConsumerCommand::Run {
            handler,
            namespaces,
            kinds,
            handler_timeout,
            max_cycles,
        }) => {
            let handler = handler
                .or_else(|| cfg.handler.clone())
                .ok_or_else(|| CliError::Usage("a handler is required (--handler)".into()))?;
            let timeout = handler_timeout.as_deref().map(config::parse_interval).transpose()?;
            let opts = commands::ConsumerRun {
                handler,
                namespaces,
                kinds,
                timeout,
                max_cycles,
            };
            commands::consumer_run(&cfg, &out, opts)
        }
        Command::Pipeline(PipelineCommand::Run { file, max_cycles }) => {
            let file = file.or_else(|| cfg.pipelines.clone());
            commands::pipeline_run(&cfg, &out, file.as_deref(), max_cycles)
        }
        Command::Status { key } => commands::status(&cfg, &out, &key),
        Command::History { key } => commands::history(&cfg, &out, &key),
        Command::Audit => commands::audit(&cfg, &out),
        Command::Replay => commands::replay(&cfg, &out),
        Command::Archive { key } => commands::archive(&cfg, &out, &key),
        Command::Sim(SimCommand::Run { file, workdir, trace }) => {
            commands::sim_run(&out, &file, workdir.as_deref(), trace.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // clap would exit 2, which is reserved for validation failures
            return if e.use_stderr() { ExitCode::from(error::EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let json = cli.global.output == Some(OutputMode::Json);
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            if json {
                println!("{}", serde_json::json!({ "error": e.to_string(), "exitCode": e.exit_code() }));
            } else {
                eprintln!("giter: {e}");
            }
            ExitCode::from(e.exit_code())
        }
    }
}
