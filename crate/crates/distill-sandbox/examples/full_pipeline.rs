//! The whole experiment, end to end, at smoke-test scale.
//!
//! Runs every pipeline stage from one configuration: generate data, train the
//! teacher, cache its labels, train one student per arm and seed, evaluate,
//! and emit the plot-data tables. Everything lands under one output directory
//! and a second invocation reuses artifacts instead of recomputing them.
//!
//! Takes a minute or two; the binary exposes the same stages as subcommands.

use distill_sandbox::harness::config::ExperimentConfig;
use distill_sandbox::harness::pipeline::{MetricsDoc, Pipeline, Stage};
use distill_sandbox::harness::store::read_json;
use distill_sandbox::Result;

fn main() -> Result<()> {
    let out = std::env::temp_dir().join(format!("distill-demo-{}", std::process::id()));
    let pipeline = Pipeline::new(ExperimentConfig::quick(), &out, true)?;
    println!("running the quick preset into {}\n", out.display());

    for report in pipeline.run_through(Stage::Figures)? {
        println!(
            "stage {:<14} {} ({} artifacts)",
            report.stage.name(),
            if report.skipped { "reused" } else { "ran" },
            report.artifacts.len()
        );
    }

    let metrics: MetricsDoc = read_json(&pipeline.dirs.metrics())?;
    println!("\nfinal-model probes (config {}):", metrics.config_hash);
    for m in &metrics.models {
        println!(
            "  {:<10} seed {:<3} copy accuracy {:.3}  high KL {:.4}  low KL {:.4}",
            m.model,
            m.seed,
            m.last.induction.accuracy().unwrap_or(f64::NAN),
            m.last.kl.high.unwrap_or(f64::NAN),
            m.last.kl.low.unwrap_or(f64::NAN),
        );
    }

    // Rerunning skips every stage: artifacts are keyed by the config hash.
    println!();
    for report in pipeline.run_through(Stage::Figures)? {
        assert!(report.skipped, "identical rerun must reuse artifacts");
    }
    println!("second pass reused all six stages");

    println!("\nplot-data tables:");
    for name in distill_sandbox::harness::figures::TABLE_NAMES {
        println!("  {}", pipeline.dirs.table(name).display());
    }
    Ok(())
}
