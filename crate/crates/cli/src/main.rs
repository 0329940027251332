use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qbi::harness::{
    read_config, reload_report, report_emit, run_experiment, save_dataset, simulate_dataset, summary_text,
    ExperimentConfig, ReportFormat, RunReport,
};
use qbi::rng::{run_seed, seeded};
use qbi::Error;

#[derive(Parser)]
#[command(
    name = "qbi",
    version,
    about = "Bayesian characterization experiments on simulated qubits"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunFlags {
    /// Experiment configuration (dotted key=value lines).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
    /// Output directory; defaults to run.out from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Threads shared by runs and particles.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, default_value = "csv")]
    format: String,
}

#[derive(Subcommand)]
enum Command {
    /// Write one simulated dataset from the configured ground truth.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Dataset CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the configured batch and write its report.
    Infer(RunFlags),
    /// Repeat `infer` for each value of one config key.
    Sweep {
        #[command(flatten)]
        flags: RunFlags,
        #[arg(long)]
        key: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Re-aggregate a stored report directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value = "csv")]
        format: String,
    },
}

enum Failure {
    Config(Error),
    AllDegenerate(usize),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Spec(_) | Error::Dataset { .. } => Failure::Config(e),
            other => Failure::Runtime(other),
        }
    }
}

fn load(flags: &RunFlags, overrides: &[(String, String)]) -> Result<ExperimentConfig, Failure> {
    let mut map: BTreeMap<String, String> = read_config(&flags.config).map_err(Failure::Config)?;
    for (k, v) in overrides {
        map.insert(k.clone(), v.clone());
    }
    if let Some(s) = flags.seed {
        map.insert("run.seed".into(), s.to_string());
    }
    if let Some(r) = flags.runs {
        map.insert("run.count".into(), r.to_string());
    }
    if let Some(w) = flags.workers {
        map.insert("run.workers".into(), w.to_string());
    }
    let mut cfg = ExperimentConfig::from_map(map).map_err(Failure::Config)?;
    if let Some(o) = &flags.out {
        cfg.out = Some(o.clone());
    }
    Ok(cfg)
}

fn format(s: &str) -> Result<ReportFormat, Failure> {
    s.parse()
        .map_err(|e: Error| Failure::Config(Error::Config(format!("--format: {e}"))))
}

fn infer_into(cfg: &ExperimentConfig, dir: Option<&Path>, fmt: ReportFormat) -> Result<RunReport, Failure> {
    let report = run_experiment(cfg)?;
    if let Some(d) = dir {
        report_emit(&report, d, fmt)?;
    }
    print!("{}", summary_text(&report));
    for r in report.runs.iter().filter(|r| !r.ok()) {
        eprintln!("run {}: {}", r.run, r.error.as_deref().unwrap_or(""));
    }
    if report.successful().count() == 0 {
        return Err(Failure::AllDegenerate(report.runs.len()));
    }
    Ok(report)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate { config, seed, out } => {
            let mut map = read_config(&config).map_err(Failure::Config)?;
            map.insert("run.seed".into(), seed.to_string());
            let cfg = ExperimentConfig::from_map(map).map_err(Failure::Config)?;
            let truth = cfg
                .truth()
                .ok_or_else(|| Failure::Config(Error::Config("simulate needs truth in the config".into())))?;
            let mut rng = seeded(run_seed(seed, 0));
            let data = simulate_dataset(&cfg, truth, &mut rng)?;
            save_dataset(&out, &data)?;
            println!("wrote {} data to {}", data.len(), out.display());
        }
        Command::Infer(flags) => {
            let fmt = format(&flags.format)?;
            let cfg = load(&flags, &[])?;
            infer_into(&cfg, cfg.out.as_deref(), fmt)?;
        }
        Command::Sweep { flags, key, values } => {
            let fmt = format(&flags.format)?;
            if values.is_empty() {
                return Err(Failure::Config(Error::Config("--values is empty".into())));
            }
            let mut any_ok = false;
            let mut total = 0;
            for v in &values {
                let cfg = load(&flags, &[(key.clone(), v.clone())])?;
                let dir = cfg.out.as_ref().map(|o| o.join(format!("{key}={v}")));
                println!("[{key} = {v}]");
                match infer_into(&cfg, dir.as_deref(), fmt) {
                    Ok(_) => any_ok = true,
                    Err(Failure::AllDegenerate(n)) => total += n,
                    Err(e) => return Err(e),
                }
            }
            if !any_ok {
                return Err(Failure::AllDegenerate(total));
            }
        }
        Command::Report { dir, format: f } => {
            let fmt = format(&f)?;
            let report = reload_report(&dir)?;
            report_emit(&report, &dir, fmt)?;
            print!("{}", summary_text(&report));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("configuration error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::AllDegenerate(n)) => {
            eprintln!("all {n} runs degenerated");
            ExitCode::from(3)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
