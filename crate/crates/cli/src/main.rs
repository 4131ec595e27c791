use std::path::PathBuf;
use std::process::ExitCode;

use careless::error::Error;
use careless::pipeline::{self, RunConfig, StageOutcome};
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "careless", version, about = "Detect careless errors in learning interaction logs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic log, test scores and ground truth.
    Simulate(Common),
    /// Fit BKT, PFA, BKFC and the slip ensemble.
    Fit(Common),
    /// Score incorrect answers with every selected detector.
    Detect(Common),
    /// Compare detectors and write report.json.
    Compare(Common),
    /// Render report.json as text.
    Report(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration.
    #[arg(long, env = "CARELESS_CONFIG")]
    config: Option<PathBuf>,
    /// Seed for every stochastic step.
    #[arg(long, env = "CARELESS_SEED")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, env = "CARELESS_OUT")]
    out: Option<PathBuf>,
    /// Interaction log CSV (instead of the simulated one).
    #[arg(long, env = "CARELESS_LOG")]
    log: Option<PathBuf>,
    /// Test scores CSV.
    #[arg(long, env = "CARELESS_SCORES")]
    scores: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut cfg: RunConfig = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
                    std::io::ErrorKind::NotFound => Error::MissingArtifact(path.display().to_string()),
                    _ => Error::Io(e),
                })?;
                toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = Some(s);
        }
        if let Some(o) = &self.out {
            cfg.paths.out = o.clone();
        }
        if let Some(l) = &self.log {
            cfg.paths.log = Some(l.clone());
        }
        if let Some(s) = &self.scores {
            cfg.paths.scores = Some(s.clone());
        }
        Ok(cfg)
    }
}

fn diagnostic(level: &str, kind: &str, message: &str) {
    let line = serde_json::json!({ "level": level, "kind": kind, "message": message });
    eprintln!("{line}");
}

fn finish(outcome: &StageOutcome) {
    for n in &outcome.notes {
        diagnostic("info", "note", n);
    }
    for p in &outcome.written {
        println!("{}", p.display());
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Simulate(c) => finish(&pipeline::run_simulate(&c.load()?)?),
        Command::Fit(c) => finish(&pipeline::run_fit(&c.load()?)?),
        Command::Detect(c) => finish(&pipeline::run_detect(&c.load()?)?),
        Command::Compare(c) => finish(&pipeline::run_compare(&c.load()?)?.1),
        Command::Report(c) => {
            let (text, outcome) = pipeline::run_report(&c.load()?)?;
            print!("{text}");
            for p in &outcome.written {
                diagnostic("info", "written", &p.display().to_string());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            diagnostic("error", "Usage", e.to_string().trim());
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            diagnostic("error", e.kind(), &e.to_string());
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
