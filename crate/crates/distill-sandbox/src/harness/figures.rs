//! Figure tables: plain CSV files derived from the metrics document and the
//! closed-form analyses. Each file carries its inputs as `#` comment lines
//! so a plot is traceable to the run that produced it.

use crate::error::Result;
use crate::harness::config::ExperimentConfig;
use crate::harness::pipeline::MetricsDoc;
use crate::harness::store::{fmt_f, write_table, RunDirs};
use crate::passk::{crossover_point, optimal_alpha, passk_value, BinaryTask, Policy, Provenance};
use crate::tabular::SweepOutcome;

pub const TABLE_NAMES: [&str; 6] = [
    "fig_kl_by_class",
    "fig_induction",
    "fig_passk_temperature",
    "fig_alpha_star",
    "fig_classifier_curves",
    "fig_complexity",
];

/// Per-class KL to the true next-token rows, one row per model and class.
pub fn write_kl_table(
    dirs: &RunDirs,
    config: &ExperimentConfig,
    metrics: &MetricsDoc,
) -> Result<()> {
    let mut rows = Vec::new();
    for m in &metrics.models {
        let by_class = [
            ("low", m.last.kl.low),
            ("medium", m.last.kl.medium),
            ("high", m.last.kl.high),
        ];
        for (class, mean) in by_class {
            let Some(mean) = mean else { continue };
            rows.push(vec![m.model.clone(), m.seed.to_string(), class.into(), fmt_f(mean)]);
        }
    }
    write_table(
        &dirs.table("fig_kl_by_class"),
        &[("config", config.config_hash())],
        &["model", "seed", "class", "mean_kl"],
        &rows,
    )
}

/// Trigger-copy accuracy over training, one row per probed checkpoint.
pub fn write_induction_table(
    dirs: &RunDirs,
    config: &ExperimentConfig,
    metrics: &MetricsDoc,
) -> Result<()> {
    let mut rows = Vec::new();
    for m in &metrics.models {
        for point in &m.curve {
            let accuracy = point.probe.induction.accuracy().unwrap_or(f64::NAN);
            rows.push(vec![
                m.model.clone(),
                m.seed.to_string(),
                point.step.to_string(),
                point.samples_seen.to_string(),
                point.probe.eval_sequences.to_string(),
                point.probe.induction.eligible.to_string(),
                fmt_f(accuracy),
            ]);
        }
    }
    write_table(
        &dirs.table("fig_induction"),
        &[("config", config.config_hash())],
        &["model", "seed", "step", "samples_seen", "eval_sequences", "eligible", "accuracy"],
        &rows,
    )
}

/// Sampled best-of-k success on the trigger-copy task, per temperature.
pub fn write_passk_table(
    dirs: &RunDirs,
    config: &ExperimentConfig,
    metrics: &MetricsDoc,
) -> Result<()> {
    let mut rows = Vec::new();
    for m in &metrics.models {
        for curve in &m.passk {
            let provenance = match curve.provenance {
                Provenance::Analytic => "analytic",
                Provenance::Estimated => "estimated",
            };
            for &(k, value) in &curve.entries {
                rows.push(vec![
                    m.model.clone(),
                    m.seed.to_string(),
                    fmt_f(curve.temperature),
                    curve.n.to_string(),
                    curve.items.to_string(),
                    k.to_string(),
                    fmt_f(value),
                    provenance.into(),
                ]);
            }
        }
    }
    write_table(
        &dirs.table("fig_passk_temperature"),
        &[("config", config.config_hash())],
        &["model", "seed", "temperature", "n", "items", "k", "passk", "provenance"],
        &rows,
    )
}

/// The closed-form best hedging weight for a binary task, on a grid of
/// per-draw success rates `p` and attempt budgets `k`.
pub fn write_alpha_star_table(dirs: &RunDirs, config: &ExperimentConfig) -> Result<()> {
    let pe = &config.passk_example;
    let points = pe.p_grid_points;
    let mut rows = Vec::new();
    for &k in &pe.ks {
        for i in 1..=points {
            let p = i as f64 / (points + 1) as f64;
            let task = BinaryTask::new(p)?;
            let star = optimal_alpha(task, k)?;
            let value = passk_value(task, Policy::new(star.alpha)?, k);
            rows.push(vec![
                fmt_f(p),
                k.to_string(),
                fmt_f(star.alpha),
                star.interior.to_string(),
                fmt_f(value),
            ]);
        }
    }
    write_table(
        &dirs.table("fig_alpha_star"),
        &[
            ("config", config.config_hash()),
            ("p_grid_points", points.to_string()),
        ],
        &["p", "k", "alpha_star", "interior", "passk_at_star"],
        &rows,
    )
}

/// Best-of-k curves for the three reference strategies, with the budget at
/// which the pure guesser overtakes the confident-but-capped one.
pub fn write_classifier_table(dirs: &RunDirs, config: &ExperimentConfig) -> Result<()> {
    let analysis = crossover_point(config.passk_example.epsilon)?;
    let rows: Vec<Vec<String>> = analysis
        .curves
        .rows
        .iter()
        .map(|r| {
            vec![r.k.to_string(), fmt_f(r.majority), fmt_f(r.coin), fmt_f(r.hedged)]
        })
        .collect();
    write_table(
        &dirs.table("fig_classifier_curves"),
        &[
            ("config", config.config_hash()),
            ("epsilon", fmt_f(analysis.curves.epsilon)),
            ("coin_beats_majority_at_k", analysis.coin_beats_majority_at.to_string()),
        ],
        &["k", "majority", "coin", "hedged"],
        &rows,
    )
}

/// Samples-to-recovery sweep for the two tabular estimators.
pub fn write_complexity_table(
    dirs: &RunDirs,
    config: &ExperimentConfig,
    outcome: &SweepOutcome,
) -> Result<()> {
    let star = |v: Option<u64>| v.map_or_else(|| "none".into(), |n| n.to_string());
    let rows: Vec<Vec<String>> = outcome
        .records
        .iter()
        .map(|r| {
            vec![
                r.estimator.to_string(),
                r.n_samples.to_string(),
                r.trial.to_string(),
                fmt_f(r.mean_l1),
                fmt_f(r.max_l1),
                r.success.to_string(),
            ]
        })
        .collect();
    write_table(
        &dirs.table("fig_complexity"),
        &[
            ("config", config.config_hash()),
            ("k", outcome.config.k.to_string()),
            ("p", outcome.config.p.to_string()),
            ("epsilon", fmt_f(outcome.config.epsilon)),
            ("n_star_scratch", star(outcome.n_star_scratch)),
            ("n_star_distill", star(outcome.n_star_distill)),
        ],
        &["estimator", "n_samples", "trial", "mean_l1", "max_l1", "success"],
        &rows,
    )
}
