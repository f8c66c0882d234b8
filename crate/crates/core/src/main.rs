use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mprl::experiment::{
    comparison_table, run_experiment, sources_csv, trace, ExperimentSpec, RunOptions,
};
use mprl::gradcheck::{run_gradcheck, GradcheckConfig};
use mprl::retrieval::{evaluate_sets, EmbeddingSet};
use mprl::trainer::{trajectory_csv, trajectory_wide_csv};
use mprl::{Error, Strategy};

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_CHECK: u8 = 3;

/// Train and compare virtual-label strategies for generated data.
///
/// Log verbosity is read from MPRL_LOG (error, warn, info, debug, trace).
#[derive(Parser)]
#[command(name = "mprl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (strategy, count, seed) cell of an experiment spec.
    Run {
        #[arg(long)]
        spec: PathBuf,
        /// Output directory; overrides `out` in the spec.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run only this seed instead of the spec's seed list.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads for independent cells.
        #[arg(long)]
        jobs: Option<usize>,
        /// Write measured wall-clock seconds into summary.csv.
        #[arg(long)]
        timing: bool,
        /// Keep each cell's model checkpoint and embeddings.
        #[arg(long)]
        keep_artifacts: bool,
    },
    /// Compare analytic logit gradients against central differences.
    Gradcheck {
        #[arg(long, value_delimiter = ',', default_values_t = vec![2usize, 5, 10, 751])]
        classes: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Skip measuring the complement gradient mode.
        #[arg(long)]
        no_complement: bool,
    },
    /// Log the argmax class of tracked generated samples over training.
    Trace {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        samples: usize,
        #[arg(long, default_value = "dMpRL-II")]
        strategy: Strategy,
        /// Defaults to the first seed of the spec.
        #[arg(long)]
        seed: Option<u64>,
        /// Generated set size; defaults to the largest count of the spec.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Write the real and generated datasets of one seed.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Evaluate retrieval between two embedding files.
    Eval {
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        /// Write the JSON report here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Parse { .. } | Error::InvalidConfig(_) => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

fn load_spec(path: &Path) -> Result<ExperimentSpec, ExitCode> {
    ExperimentSpec::load(path).map_err(|e| {
        match &e {
            Error::Io(_) => eprintln!("error: cannot read {}: {e}", path.display()),
            _ => eprintln!("error: {}: {e}", path.display()),
        }
        ExitCode::from(EXIT_VALIDATION)
    })
}

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(exit_code(&e))
}

fn load_embeddings(path: &Path) -> mprl::Result<EmbeddingSet> {
    EmbeddingSet::load(BufReader::new(fs::File::open(path)?))
}

fn run(command: Command) -> Result<ExitCode, ExitCode> {
    match command {
        Command::Run {
            spec,
            out,
            seed,
            jobs,
            timing,
            keep_artifacts,
        } => {
            let mut parsed = load_spec(&spec)?;
            if let Some(s) = seed {
                parsed.seeds = vec![s];
            }
            if jobs == Some(0) {
                eprintln!("error: --jobs must be at least 1");
                return Err(ExitCode::from(EXIT_VALIDATION));
            }
            let Some(out) = out.or_else(|| parsed.out.clone()) else {
                eprintln!("error: no output directory; pass --out or set `out` in the spec");
                return Err(ExitCode::from(EXIT_VALIDATION));
            };
            let opts = RunOptions {
                jobs,
                timing,
                keep_artifacts,
            };
            let summary = run_experiment(&parsed, &out, &opts).map_err(fail)?;
            print!("{}", comparison_table(&summary.results));
            if !summary.is_success() {
                eprintln!(
                    "error: {} of {} cells failed; see {}",
                    summary.failures.len(),
                    summary.failures.len() + summary.results.len(),
                    out.join("failures.csv").display()
                );
                return Err(ExitCode::from(EXIT_RUNTIME));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck {
            classes,
            trials,
            tolerance,
            seed,
            no_complement,
        } => {
            let cfg = GradcheckConfig {
                classes,
                trials,
                tolerance,
                seed,
                include_complement: !no_complement,
                ..GradcheckConfig::default()
            };
            let report = run_gradcheck(&cfg).map_err(fail)?;
            print!("{}", report.render());
            if report.passed() {
                Ok(ExitCode::SUCCESS)
            } else {
                Err(ExitCode::from(EXIT_CHECK))
            }
        }
        Command::Trace {
            spec,
            out,
            samples,
            strategy,
            seed,
            count,
        } => {
            let parsed = load_spec(&spec)?;
            let seed = seed.unwrap_or(parsed.seeds[0]);
            let count = count.unwrap_or_else(|| parsed.counts.iter().copied().max().unwrap_or(0));
            let traced = trace(&parsed, strategy, seed, count, samples).map_err(fail)?;
            if traced.trajectories.len() < samples {
                eprintln!(
                    "warning: clipped {samples} requested samples to the {} generated",
                    traced.trajectories.len()
                );
            }
            let write = |name: &str, text: String| -> mprl::Result<()> {
                fs::create_dir_all(&out)?;
                fs::write(out.join(name), text)?;
                Ok(())
            };
            write("trajectory.csv", trajectory_csv(&traced.trajectories)).map_err(fail)?;
            write(
                "trajectory_wide.csv",
                trajectory_wide_csv(&traced.trajectories),
            )
            .map_err(fail)?;
            write("sources.csv", sources_csv(&traced.records)).map_err(fail)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::GenData {
            spec,
            out,
            seed,
            count,
        } => {
            let parsed = load_spec(&spec)?;
            let seed = seed.unwrap_or(parsed.seeds[0]);
            let count = count.unwrap_or_else(|| parsed.counts.iter().copied().max().unwrap_or(0));
            let (real, generated, records) = parsed.dataset.build(seed, count).map_err(fail)?;
            let write = || -> mprl::Result<()> {
                fs::create_dir_all(&out)?;
                real.save(fs::File::create(out.join("real.txt"))?)?;
                generated.save(fs::File::create(out.join("generated.txt"))?)?;
                fs::write(out.join("sources.csv"), sources_csv(&records))?;
                Ok(())
            };
            write().map_err(fail)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            query,
            gallery,
            out,
        } => {
            let q = load_embeddings(&query).map_err(fail)?;
            let g = load_embeddings(&gallery).map_err(fail)?;
            let report = evaluate_sets(&q, &g).map_err(fail)?;
            let json = report.to_json();
            print!("{json}");
            if let Some(path) = out {
                fs::write(path, &json).map_err(|e| fail(e.into()))?;
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MPRL_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(code) | Err(code) => code,
    }
}
