//! The `clonetts` command line: preprocess a corpus, train each component,
//! clone a voice, benchmark real-time factor, serve listening tests and
//! report their results.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

pub mod bench;
pub mod cloning;
pub mod config;
pub mod preprocess;
pub mod report;
pub mod serve;
pub mod train;

pub use config::{RunConfig, Settings};

/// Process exit codes.
pub mod exit {
    pub const SUCCESS: u8 = 0;
    pub const USAGE: u8 = 1;
    pub const DATA: u8 = 2;
    pub const EXTERNAL: u8 = 3;
}

/// A command failure tagged with its exit class.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    External(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => exit::USAGE,
            Self::Data(_) => exit::DATA,
            Self::External(_) => exit::EXTERNAL,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Self::Usage(e) | Self::Data(e) | Self::External(e) => e,
        }
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

/// Tags any error with an exit class.
pub trait Classify<T> {
    fn usage(self) -> CmdResult<T>;
    fn data(self) -> CmdResult<T>;
    fn external(self) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> CmdResult<T> {
        self.map_err(|e| Failure::Usage(e.into()))
    }

    fn data(self) -> CmdResult<T> {
        self.map_err(|e| Failure::Data(e.into()))
    }

    fn external(self) -> CmdResult<T> {
        self.map_err(|e| Failure::External(e.into()))
    }
}

#[derive(Debug, Parser)]
#[command(name = "clonetts", version, about = "Mandarin voice cloning pipeline")]
pub struct Cli {
    /// Root directory every configured path is relative to.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Component {
    Speaker,
    Synth,
    Vocoder,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Quality-check the raw corpus and write the manifest and mel cache.
    Preprocess,
    /// Train one component from the manifest.
    Train {
        #[arg(value_enum)]
        component: Component,
    },
    /// Synthesize `text` in the voice of a reference recording.
    Clone {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure the real-time factor of the synthesis path.
    BenchRtf {
        /// Replace the models with a fixed-rate fake.
        #[arg(long)]
        stub_model: bool,
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Serve the listening-test API.
    Serve {
        #[arg(long)]
        addr: Option<String>,
    },
    /// Summarize exported ratings as MOS and A/B tables.
    Report {
        #[arg(long)]
        ratings: Option<PathBuf>,
    },
}

fn load_settings(cli: &Cli) -> CmdResult<Settings> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let path = cli.workdir.join(path);
        let text = std::fs::read_to_string(&path).map_err(|e| anyhow::anyhow!("config {}: {e}", path.display())).usage()?;
        cfg.apply_text(&text, &path.display().to_string()).usage()?;
    }
    for kv in &cli.overrides {
        cfg.apply_override(kv).usage()?;
    }
    cfg.resolve(&cli.workdir).usage()
}

pub fn execute(cli: &Cli) -> CmdResult {
    let settings = load_settings(cli)?;
    let at = |p: &PathBuf| settings.workdir.join(p);
    match &cli.command {
        Command::Preprocess => preprocess::cmd_preprocess(&settings),
        Command::Train { component } => train::cmd_train(*component, &settings),
        Command::Clone { reference, text, out } => {
            let report = cloning::cmd_clone(&at(reference), text, &at(out), &settings)?;
            println!("wrote {} ({} frames, {:.3} s)", at(out).display(), report.frames, report.duration_secs);
            Ok(())
        }
        Command::BenchRtf { stub_model, runs } => {
            let report = bench::cmd_bench_rtf(&settings, *stub_model, runs.unwrap_or(settings.bench_runs))?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            Ok(())
        }
        Command::Serve { addr } => serve::cmd_serve(&settings, addr.as_deref().unwrap_or(&settings.listen_addr)),
        Command::Report { ratings } => {
            let path = ratings.as_ref().map_or_else(|| settings.ratings.clone(), at);
            let report = report::cmd_report(&path, &settings)?;
            print!("{report}");
            Ok(())
        }
    }
}

/// Parses arguments and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::USAGE } else { exit::SUCCESS };
        }
    };
    match execute(&cli) {
        Ok(()) => exit::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            f.code()
        }
    }
}
