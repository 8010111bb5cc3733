use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lipi_core::harness::{
    cmd_compare, cmd_run, cmd_sweep, render_comparison, render_sweep, ExperimentConfig,
    FailureSpec, FamilySpec, HarnessError, OutputFormat, SecretsMode, SweepAxis, TopologySpec,
};
use lipi_core::outcome::Protocol;
use lipi_core::NodeId;

/// Privacy-preserving aggregation experiments over a simulated synchronous-transmission network.
///
/// All costs are reported in abstract sub-slots.
#[derive(Parser)]
#[command(name = "lipi", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one protocol and emit one record per round.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutputArgs,
    },
    /// Mean and spread of the costs of several protocols on one network.
    Compare {
        /// Protocols to run with the shared settings.
        #[arg(long, value_delimiter = ',')]
        protocols: Vec<Protocol>,
        /// Full config files, one per entry (used instead of --protocols).
        #[arg(long = "entry", value_name = "FILE")]
        entries: Vec<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutputArgs,
    },
    /// Vary one parameter and emit long-form rows.
    Sweep {
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<u64>,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutputArgs,
    },
}

/// Flags override the values read from `--config`.
#[derive(Args)]
struct ConfigArgs {
    /// JSON file holding an experiment config.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long)]
    protocol: Option<Protocol>,
    /// complete:N, ring:N, line:N, geometric:N[:SIDE[:RADIUS]] or file:PATH
    #[arg(long)]
    topology: Option<TopologySpec>,
    #[arg(long)]
    ntx: Option<u32>,
    /// sum, am, gm, harmonic or power:E
    #[arg(long)]
    family: Option<FamilySpec>,
    /// ids, uniform:LO:HI or list:A,B,...
    #[arg(long)]
    secrets: Option<SecretsMode>,
    /// NODE:before, NODE:silent or NODE:mid:K (repeatable)
    #[arg(long = "fail", value_name = "EVENT")]
    failures: Vec<FailureSpec>,
    #[arg(long)]
    rounds: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    /// json or csv
    #[arg(long)]
    format: Option<OutputFormat>,
    /// Share field (SSS, NSSS), plaintext prime (PPMP) or GM modulus.
    #[arg(long)]
    field: Option<u64>,
    #[arg(long)]
    degree: Option<u32>,
    #[arg(long)]
    hop_limit: Option<u32>,
    #[arg(long)]
    initiator: Option<NodeId>,
    #[arg(long)]
    key_refresh: Option<u32>,
    #[arg(long)]
    dh_prime: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig, HarnessError> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! apply {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field { cfg.$field = v.clone().into(); })*
            };
        }
        apply!(
            protocol,
            topology,
            family,
            secrets,
            rounds,
            seed,
            format,
            initiator,
            key_refresh
        );
        if let Some(v) = self.ntx {
            cfg.ntx = Some(v);
        }
        if let Some(v) = self.field {
            cfg.field = Some(v);
        }
        if let Some(v) = self.degree {
            cfg.degree = Some(v);
        }
        if let Some(v) = self.hop_limit {
            cfg.hop_limit = Some(v);
        }
        if let Some(v) = self.dh_prime {
            cfg.dh_prime = Some(v);
        }
        if !self.failures.is_empty() {
            cfg.failures = self.failures.clone();
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct OutputArgs {
    /// Also write the output to this file.
    #[arg(long, value_name = "FILE")]
    output: Option<PathBuf>,
    /// Directory for relative --output paths. When set without --output a
    /// file named after the command is written there.
    #[arg(long, env = "LIPI_OUTPUT_DIR", value_name = "DIR")]
    output_dir: Option<PathBuf>,
    /// Do not echo the output to stdout.
    #[arg(long, short)]
    quiet: bool,
}

impl OutputArgs {
    fn target(&self, default_name: &str) -> Option<PathBuf> {
        match (&self.output, &self.output_dir) {
            (Some(file), Some(dir)) if file.is_relative() => Some(dir.join(file)),
            (Some(file), _) => Some(file.clone()),
            (None, Some(dir)) => Some(dir.join(default_name)),
            (None, None) => None,
        }
    }

    fn emit(&self, text: &str, default_name: &str) -> Result<(), HarnessError> {
        if let Some(path) = self.target(default_name) {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(&path, text)?;
        }
        if !self.quiet {
            print!("{text}");
        }
        Ok(())
    }
}

fn load_entries(paths: &[PathBuf]) -> Result<Vec<ExperimentConfig>, HarnessError> {
    paths
        .iter()
        .map(|p| ExperimentConfig::load(Path::new(p)))
        .collect()
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = config.resolve()?;
            let text = cmd_run(&cfg)?;
            out.emit(
                &text,
                &format!("run-{}.{}", cfg.protocol, cfg.format.extension()),
            )
        }
        Command::Compare {
            protocols,
            entries,
            config,
            out,
        } => {
            let base = config.resolve()?;
            let configs = if entries.is_empty() {
                protocols
                    .iter()
                    .map(|&protocol| ExperimentConfig {
                        protocol,
                        ..base.clone()
                    })
                    .collect()
            } else if protocols.is_empty() {
                load_entries(&entries)?
            } else {
                return Err(HarnessError::Config(
                    "use either --protocols or --entry, not both".into(),
                ));
            };
            let cmp = cmd_compare(&configs)?;
            let text = render_comparison(&cmp, base.format)?;
            out.emit(&text, &format!("compare.{}", base.format.extension()))
        }
        Command::Sweep {
            axis,
            values,
            config,
            out,
        } => {
            let cfg = config.resolve()?;
            let rows = cmd_sweep(&cfg, axis, &values)?;
            let text = render_sweep(&rows, cfg.format)?;
            out.emit(&text, &format!("sweep-{axis}.{}", cfg.format.extension()))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lipi: {e}");
            if e.is_usage() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
