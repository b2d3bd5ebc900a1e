use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use warpgrad_harness::config::{ExperimentConfig, Protocol};
use warpgrad_harness::experiments::gradcheck::GradcheckConfig;
use warpgrad_harness::run::{self, RunOptions};
use warpgrad_harness::{HarnessError, Result};

/// Meta-learned gradient preconditioning: experiment runner.
#[derive(Parser)]
#[command(name = "warpgrad", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Explicit warp over random 2-D loss surfaces.
    Synth2d(Common),
    /// Continual sine regression with five sequential sub-tasks.
    ContinualSine(Common),
    /// Few-shot sine regression: warped MAML against MAML.
    FewshotSine(Common),
    /// Check analytic gradients against finite differences and other oracles.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Flip the sign of every analytic gradient (exercises the failure path).
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

#[derive(Args)]
struct Common {
    /// JSON config; absent keys take the experiment's defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory [default: $WARPGRAD_OUT/<experiment>, or runs/<experiment>].
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads for task adaptation (1 gives byte-reproducible metrics).
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
    /// Continue from a checkpoint written by an earlier run with the same config.
    #[arg(long, value_name = "PATH")]
    resume: Option<PathBuf>,
    /// Print progress to stderr.
    #[arg(short, long)]
    verbose: bool,
}

impl Common {
    fn options(&self, experiment: &str) -> RunOptions {
        let out = self.out.clone().unwrap_or_else(|| {
            let root = std::env::var_os("WARPGRAD_OUT").map_or_else(|| PathBuf::from("runs"), PathBuf::from);
            root.join(experiment)
        });
        RunOptions {
            out,
            resume: self.resume.clone(),
            verbose: self.verbose,
        }
    }

    fn experiment<P: Protocol>(&self) -> Result<ExperimentConfig<P>> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::<P>::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.train.seed = seed;
        }
        if let Some(threads) = self.threads {
            config.train.threads = threads;
        }
        Ok(config)
    }
}

fn load_gradcheck(path: Option<&Path>) -> Result<GradcheckConfig> {
    let Some(path) = path else {
        return Ok(GradcheckConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| HarnessError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn execute(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth2d(c) => {
            run::run_synth2d(&c.experiment()?, &c.options(run::SYNTH2D))?;
        }
        Command::ContinualSine(c) => {
            run::run_continual(&c.experiment()?, &c.options(run::CONTINUAL))?;
        }
        Command::FewshotSine(c) => {
            run::run_fewshot(&c.experiment()?, &c.options(run::FEWSHOT))?;
        }
        Command::Gradcheck { common, inject_fault } => {
            if common.resume.is_some() || common.threads.is_some() {
                return Err(HarnessError::Config("gradcheck takes neither --resume nor --threads".into()));
            }
            let mut config = load_gradcheck(common.config.as_deref())?;
            if let Some(seed) = common.seed {
                config.seed = seed;
            }
            let out = common.out.clone();
            let reports = run::run_gradcheck_suite(&config, inject_fault, out.as_deref())?;
            let failed = reports.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                eprintln!("{}", HarnessError::GradcheckFailed { failed, total: reports.len() });
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
