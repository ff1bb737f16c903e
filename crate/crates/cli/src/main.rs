use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use latent_gfn::config::TrainConfig;
use latent_gfn::metrics::MetricsReport;
use latent_gfn::trainer::{composite_grad_check, evaluate, train, Suite, TrainOutputs, TrainState};
use latent_gfn::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_ACCEPTANCE: u8 = 4;

#[derive(Parser)]
#[command(name = "latent-gfn", version, about = "Latent-graph GFlowNet sampler")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to load (train resumes from it).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Overrides the training seed, or seeds sampling and evaluation.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config, or resume from a checkpoint.
    Train(Common),
    /// Emit trajectories, blended conditions and generated samples.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Comma-separated edges appended to every trajectory before decoding.
        #[arg(long, value_delimiter = ',')]
        extra_edges: Vec<usize>,
        /// Number of trajectories (defaults to the configured M).
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Run evaluation suites and write a metrics report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "all")]
        suite: SuiteArg,
        /// Terminal sets drawn for the empirical distribution.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Compare the sampler against the exhaustively enumerated target.
    EnumerateCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Finite-difference check of the composite loss gradient.
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Coordinates probed per tensor; every coordinate when omitted.
        #[arg(long)]
        samples: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Proportionality,
    Residuals,
    Diversity,
    All,
}

impl SuiteArg {
    fn suites(self) -> Vec<Suite> {
        match self {
            SuiteArg::Proportionality => vec![Suite::Proportionality],
            SuiteArg::Residuals => vec![Suite::Residuals],
            SuiteArg::Diversity => vec![Suite::Diversity],
            SuiteArg::All => Suite::ALL.to_vec(),
        }
    }
}

enum Failure {
    Lib(Error),
    Acceptance(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(Error::Io(e))
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_) | Error::InvalidGraph(_) | Error::InvalidSparsity(_) => EXIT_CONFIG,
        Error::NonFinite(_) | Error::Numeric(_) | Error::DegenerateDistribution(_) => EXIT_NUMERIC,
        _ => 1,
    }
}

fn load_state(common: &Common) -> Result<TrainState, Failure> {
    match (&common.checkpoint, &common.config) {
        (Some(ckpt), _) => Ok(TrainState::load(ckpt)?),
        (None, Some(cfg)) => {
            let mut config = TrainConfig::load(cfg)?;
            if let Some(seed) = common.seed {
                config.train.seed = seed;
            }
            Ok(TrainState::init(config)?)
        }
        (None, None) => Err(Failure::Lib(Error::InvalidConfig("pass --config or --checkpoint".into()))),
    }
}

fn write_report(report: &MetricsReport, dir: &Path, stem: &str) -> Result<(), Failure> {
    let (csv, json) = report.write(dir, stem)?;
    println!("wrote {} and {}", csv.display(), json.display());
    print!("{}", report.to_csv());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train(common) => {
            if common.checkpoint.is_some() && common.config.is_some() {
                return Err(Error::InvalidConfig("a resumed run uses the checkpoint's own config".into()).into());
            }
            let mut state = load_state(&common)?;
            let summary = train(&mut state, &TrainOutputs { dir: Some(common.out_dir.clone()) })?;
            println!(
                "trained to step {} (moving-average loss {:?}); outputs in {}",
                summary.steps,
                summary.moving_average,
                common.out_dir.display()
            );
        }
        Command::Sample { common, extra_edges, samples } => {
            let state = load_state(&common)?;
            let m = samples.unwrap_or(state.graph.num_trajectories);
            let mut rng = ChaCha8Rng::seed_from_u64(common.seed.unwrap_or(0));
            let out = state.sample(m, &extra_edges, &mut rng)?;
            std::fs::create_dir_all(&common.out_dir)?;
            let path = common.out_dir.join("samples.csv");
            std::fs::write(&path, out.to_csv())?;
            println!("wrote {}", path.display());
        }
        Command::Eval { common, suite, samples } => {
            let mut state = load_state(&common)?;
            if let Some(n) = samples {
                state.config.eval.samples = n;
            }
            let (report, pass) = evaluate(&state, &suite.suites(), common.seed.unwrap_or(0))?;
            write_report(&report, &common.out_dir, "metrics")?;
            if !pass {
                return Err(Failure::Acceptance("an evaluation threshold was not met".into()));
            }
        }
        Command::EnumerateCheck { common, samples } => {
            let mut state = load_state(&common)?;
            if let Some(n) = samples {
                state.config.eval.samples = n;
            }
            let seed = common.seed.unwrap_or(0);
            let (report, pass) = evaluate(&state, &[Suite::Proportionality, Suite::Residuals], seed)?;
            write_report(&report, &common.out_dir, "enumeration_metrics")?;
            if report.get("tv_distance").is_some() {
                let target = state.target_distribution()?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let emp = state.empirical_distribution(state.config.eval.samples, &mut rng)?;
                let mut table = String::from("edges,target,empirical\n");
                for (key, p) in target.support().iter().zip(target.probs()) {
                    let edges: Vec<String> = key.iter().map(|e| e.to_string()).collect();
                    table.push_str(&format!("{},{:?},{:?}\n", edges.join(" "), p, emp.prob(key)));
                }
                std::fs::write(common.out_dir.join("enumeration.csv"), table)?;
            } else {
                println!("enumeration skipped: instance not enumerable under the configured reward");
            }
            if !pass {
                return Err(Failure::Acceptance("sampler does not match the enumerated target".into()));
            }
        }
        Command::GradCheck { common, samples } => {
            let state = load_state(&common)?;
            let mut rng = ChaCha8Rng::seed_from_u64(common.seed.unwrap_or(0));
            let report = composite_grad_check(&state, 1e-6, samples, &mut rng)?;
            println!(
                "max relative error {:.3e} over {} coordinates (worst: tensor {}, entry {})",
                report.max_relative_error, report.coordinates, report.worst.0, report.worst.1
            );
            if report.max_relative_error >= 1e-4 {
                return Err(Failure::Acceptance("gradient check above 1e-4".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Acceptance(msg)) => {
            eprintln!("acceptance failure: {msg}");
            ExitCode::from(EXIT_ACCEPTANCE)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_classes_map_to_exit_codes() {
        assert_eq!(exit_code(&Error::InvalidSparsity("rho".into())), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::InvalidGraph("n".into())), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::NonFinite("loss".into())), EXIT_NUMERIC);
        assert_eq!(exit_code(&Error::DegenerateDistribution("z".into())), EXIT_NUMERIC);
        assert_eq!(exit_code(&Error::Corrupted("cut".into())), 1);
    }
}
