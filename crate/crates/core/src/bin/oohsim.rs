//! oohsim command line.
//!
//! Exit codes: 0 success, 2 bad config or arguments, 3 I/O failure.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use oohsim::cost::Calibration;
use oohsim::repro::{self, Figure};
use oohsim::sim::config::{run, ConfigError, ExperimentConfig, Format, WorkloadConfig};
use oohsim::sim::report::{emit_reports, from_csv, to_csv, to_plotdata};
use oohsim::size::ByteSize;
use oohsim::tracker::Technique;

const CALIBRATION_ENV: &str = "OOHSIM_CALIBRATION";

#[derive(Parser)]
#[command(name = "oohsim", version, about = "Dirty page tracking simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment described by a TOML file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Cross product of sizes and techniques on the micro-benchmark.
    Sweep {
        /// Comma separated, e.g. 1MB,10MB,1GB
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<String>,
        /// Comma separated, e.g. proc,epml
        #[arg(long, value_delimiter = ',', num_args = 0.., required = true)]
        techniques: Vec<String>,
        #[arg(long, default_value_t = 1)]
        rounds: u32,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        checkpoint: bool,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Print, check or write a calibration file.
    Calibrate {
        /// Validate this file instead of printing the defaults.
        #[arg(long)]
        check: Option<PathBuf>,
        /// Write the active calibration here.
        #[arg(long)]
        write: Option<PathBuf>,
    },
    /// Convert a report CSV to another format (stdout).
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = OutFormat::Plotdata)]
        format: OutFormat,
    },
    /// Reproduce a published comparison as CSV.
    Repro {
        #[arg(long)]
        figure: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum OutFormat {
    Csv,
    Json,
    Plotdata,
}

enum Failure {
    Config(String),
    Io(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Failure::Io(e.to_string()),
            _ => Failure::Config(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> Result<(), Failure> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Failure::Io(format!("stdout: {e}"))),
        _ => Ok(()),
    }
}

fn env_calibration() -> Option<PathBuf> {
    std::env::var_os(CALIBRATION_ENV).map(PathBuf::from)
}

fn calibration(cfg: &ExperimentConfig) -> Result<Calibration, Failure> {
    Ok(cfg.calibration(env_calibration().as_deref())?)
}

fn execute(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Run { config, out, seed } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.output.dir = o;
            }
            let cal = calibration(&cfg)?;
            let report = run(&cfg, &cal)?;
            for p in
                emit_reports(&report, &cfg.output.formats, &cfg.output.dir).map_err(|e| io_err(&cfg.output.dir, e))?
            {
                eprintln!("wrote {}", p.display());
            }
        }
        Cmd::Sweep {
            sizes,
            techniques,
            rounds,
            seed,
            checkpoint,
            out,
        } => {
            let memory_sizes = sizes
                .iter()
                .map(|s| {
                    s.parse::<ByteSize>()
                        .map_err(|e| Failure::Config(format!("--sizes: {e}")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let techniques = techniques
                .iter()
                .filter(|t| !t.is_empty())
                .map(|t| {
                    t.parse::<Technique>()
                        .map_err(|e| Failure::Config(format!("--techniques: {e}")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let cfg = ExperimentConfig {
                seed,
                memory_sizes,
                techniques,
                checkpoint,
                workload: WorkloadConfig::Microbench {
                    rounds,
                    churn_rate: 0.0,
                    checkpoint_each_round: checkpoint,
                },
                ..Default::default()
            };
            cfg.validate()?;
            let cal = calibration(&cfg)?;
            let report = run(&cfg, &cal)?;
            for p in emit_reports(&report, &[Format::Csv], &out).map_err(|e| io_err(&out, e))? {
                eprintln!("wrote {}", p.display());
            }
        }
        Cmd::Calibrate { check, write } => {
            let cal = match check.or_else(env_calibration) {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
                    let c = Calibration::parse(&text).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
                    eprintln!("{}: ok", p.display());
                    c
                }
                None => Calibration::default(),
            };
            match write {
                Some(p) => std::fs::write(&p, cal.to_text()).map_err(|e| io_err(&p, e))?,
                None => emit(&cal.to_text())?,
            }
        }
        Cmd::Report { input, format } => {
            let text = std::fs::read_to_string(&input).map_err(|e| io_err(&input, e))?;
            let rows = from_csv(&text).map_err(|e| Failure::Config(format!("{}: {e}", input.display())))?;
            match format {
                OutFormat::Csv => emit(&to_csv(&rows))?,
                OutFormat::Json => emit(&(serde_json::to_string_pretty(&rows).expect("rows serialize") + "\n"))?,
                OutFormat::Plotdata => emit(&to_plotdata(&rows))?,
            }
        }
        Cmd::Repro { figure, seed, out } => {
            let fig: Figure = figure
                .parse()
                .map_err(|e: repro::UnknownFigure| Failure::Config(e.to_string()))?;
            let cal = calibration(&ExperimentConfig::default())?;
            let csv = repro::to_csv(&repro::repro(fig, &cal, seed));
            match out {
                Some(p) => {
                    if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                        std::fs::create_dir_all(d).map_err(|e| io_err(d, e))?;
                    }
                    std::fs::write(&p, csv).map_err(|e| io_err(&p, e))?
                }
                None => emit(&csv)?,
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Io(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
