use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nightrack::commands::{self, worker_threads};
use nightrack::{code, selftest, CliError, CliResult, RunConfig};

#[derive(Parser)]
#[command(
    name = "nightrack",
    version,
    about = "Low-light enhancement and language-assisted tracking"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Weights file; seeded weights are generated when omitted.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// key=value settings file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for generated weights.
    #[arg(long)]
    seed: Option<u64>,
    /// Disable low-light enhancement of the crops.
    #[arg(long)]
    no_enhance: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Enhance every PPM/PGM image in a directory.
    Enhance {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Track the target through a sequence directory.
    Track {
        sequence: PathBuf,
        /// Results file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Score a results file against ground truth.
    Eval {
        results: PathBuf,
        groundtruth: PathBuf,
        /// Directory for the CSV curves; defaults to the results directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write freshly seeded weights.
    Init {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run the built-in invariant checks.
    Selftest {
        /// Also round-trip this weights file.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
}

fn run_config(c: &Common) -> CliResult<RunConfig> {
    let mut run = RunConfig::default();
    if let Some(path) = &c.config {
        run.apply_file(path)?;
    }
    if let Some(w) = &c.weights {
        run.weights = Some(w.clone());
    }
    if let Some(s) = c.seed {
        run.seed = s;
    }
    if c.no_enhance {
        run.tracker.enhance = false;
    }
    run.tracker
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(run)
}

fn write_out(path: Option<&Path>, body: &str) -> CliResult<()> {
    match path {
        Some(p) => std::fs::write(p, body).map_err(|e| CliError::write(p, e)),
        None => std::io::stdout()
            .write_all(body.as_bytes())
            .map_err(|e| CliError::write(Path::new("<stdout>"), e)),
    }
}

fn dispatch(cmd: Command) -> CliResult<u8> {
    match cmd {
        Command::Enhance { input, out, common } => {
            let run = run_config(&common)?;
            let s = commands::cmd_enhance(&input, &out, &run, worker_threads())?;
            if s.written.is_empty() {
                eprintln!("warning: no PPM/PGM images in {}", input.display());
            } else {
                eprintln!(
                    "enhanced {} images with {} threads",
                    s.written.len(),
                    s.threads
                );
            }
        }
        Command::Track {
            sequence,
            out,
            common,
        } => {
            let run = run_config(&common)?;
            let s = commands::cmd_track(&sequence, &run)?;
            write_out(out.as_deref(), &s.results())?;
            eprintln!("{}", s.throughput_line());
        }
        Command::Eval {
            results,
            groundtruth,
            out,
        } => {
            let s = commands::cmd_eval(&results, &groundtruth, out.as_deref())?;
            write_out(None, &s.text())?;
        }
        Command::Init { out, common } => {
            let run = run_config(&common)?;
            let n = commands::cmd_init(&out, &run)?;
            eprintln!("wrote {n} bytes to {}", out.display());
        }
        Command::Selftest { weights } => {
            let mut failed = false;
            for (name, r) in selftest::run(weights.as_deref()) {
                match r {
                    Ok(msg) => println!("PASS {name}: {msg}"),
                    Err(msg) => {
                        failed = true;
                        println!("FAIL {name}: {msg}");
                    }
                }
            }
            return Ok(if failed { code::FAILURE } else { code::OK });
        }
    }
    Ok(code::OK)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() {
                code::USAGE
            } else {
                code::OK
            });
        }
    };
    match dispatch(cli.command) {
        Ok(c) => ExitCode::from(c),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
