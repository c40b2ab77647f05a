use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use distill_sandbox::harness::{ExperimentConfig, Pipeline, Stage, StageReport};
use distill_sandbox::{Error, Result};

/// Distillation laboratory: staged experiments on synthetic sequence data.
///
/// Exit codes: 0 on success, 1 for bad usage or configuration, 2 when a
/// stage fails at runtime.
#[derive(Parser)]
#[command(name = "distill-sandbox", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config (TOML); defaults to the built-in quick preset.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Directory that holds this run's artifacts.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,

    /// Override the data-generation seed from the config.
    #[arg(long)]
    seed: Option<u64>,

    /// Accumulate batch gradients serially instead of across threads.
    #[arg(long)]
    single_thread: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Build the transition matrix, training sets, and evaluation set.
    Generate(CommonArgs),
    /// Train the teacher on observed next tokens.
    TrainTeacher(CommonArgs),
    /// Record the teacher's tempered next-token distributions.
    CacheLabels(CommonArgs),
    /// Train the configured student arms against the cached labels.
    TrainStudent {
        #[command(flatten)]
        common: CommonArgs,
        /// Restrict training to one arm by name.
        #[arg(long)]
        arm: Option<String>,
    },
    /// Probe every trained model and write the metrics document.
    Eval(CommonArgs),
    /// Closed-form best-of-k tables; needs no trained models.
    Passk(CommonArgs),
    /// Tabular estimator sample-complexity sweep and its table.
    Complexity(CommonArgs),
    /// Figure tables from the metrics document and closed-form analyses.
    Figures(CommonArgs),
    /// Run the stages in order, skipping ones whose outputs exist.
    Run {
        #[command(flatten)]
        common: CommonArgs,
        /// Last stage to run: generate, train-teacher, cache-labels,
        /// train-students, eval, or figures (the default).
        #[arg(long, value_name = "STAGE")]
        stage: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => single_stage(&c, Stage::Generate),
        Command::TrainTeacher(c) => single_stage(&c, Stage::TrainTeacher),
        Command::CacheLabels(c) => single_stage(&c, Stage::CacheLabels),
        Command::TrainStudent { common, arm } => {
            let p = pipeline(&common)?;
            let report = match arm {
                Some(name) => p.train_one_arm(&name)?,
                None => p.run_stage(Stage::TrainStudents)?,
            };
            print_report(&report);
            Ok(())
        }
        Command::Eval(c) => single_stage(&c, Stage::Eval),
        Command::Figures(c) => single_stage(&c, Stage::Figures),
        Command::Passk(c) => {
            for path in pipeline(&c)?.analytic_tables()? {
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::Complexity(c) => {
            for path in pipeline(&c)?.complexity_tables()? {
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::Run { common, stage } => {
            let last = match stage {
                Some(s) => s.parse()?,
                None => Stage::Figures,
            };
            let p = pipeline(&common)?;
            for report in p.run_through(last)? {
                print_report(&report);
            }
            Ok(())
        }
    }
}

fn pipeline(common: &CommonArgs) -> Result<Pipeline> {
    let mut config = match &common.config {
        // a config path that cannot be read or parsed is a usage mistake,
        // not a stage failure
        Some(path) => ExperimentConfig::load(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
        None => ExperimentConfig::quick(),
    };
    if let Some(seed) = common.seed {
        config.data.seed = seed;
    }
    Pipeline::new(config, &common.out, common.single_thread)
}

fn single_stage(common: &CommonArgs, stage: Stage) -> Result<()> {
    let report = pipeline(common)?.run_stage(stage)?;
    print_report(&report);
    Ok(())
}

fn print_report(report: &StageReport) {
    let state = if report.skipped { "up to date" } else { "done" };
    println!("{}: {state} ({} artifacts)", report.stage, report.artifacts.len());
}
