//! Closed-form bigram students and their sample complexity.
//!
//! Two estimators fit a transition matrix from data. The scratch estimator
//! is the row-wise maximum-likelihood fit: normalized counts, which needs
//! every row visited many times. The distilled estimator copies the
//! teacher's row wholesale the first time the row is visited at all, so its
//! cost is a coupon-collector pass over the vocabulary rather than
//! per-row accuracy. [`run_complexity_sweep`] measures both on the same
//! sampled data to expose the gap.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::markov::{
    empirical_row_counts, sample_sequences, EntropyThresholds, SequenceDataset, TransitionCounts,
    TransitionMatrix, TriggerSpec,
};
use crate::rng;

/// What to put in a row the data never visited.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FallbackPolicy {
    /// Uniform over the vocabulary. Unseen rows are reported, never hidden.
    Uniform,
}

impl FallbackPolicy {
    fn fill(&self, k: usize) -> Vec<f64> {
        match self {
            FallbackPolicy::Uniform => vec![1.0 / k as f64; k],
        }
    }
}

/// Maximum-likelihood fit with the rows it had to fall back on.
#[derive(Debug, Clone)]
pub struct ScratchEstimate {
    pub matrix: TransitionMatrix,
    pub unseen_rows: BTreeSet<usize>,
}

/// Teacher-copy fit with the rows it actually observed.
#[derive(Debug, Clone)]
pub struct DistillEstimate {
    pub matrix: TransitionMatrix,
    pub observed_rows: BTreeSet<usize>,
    pub teacher_id: String,
}

/// Normalized-count estimator. Rows with zero visits take the fallback and
/// are reported in `unseen_rows`.
pub fn fit_scratch(counts: &TransitionCounts, fallback: FallbackPolicy) -> Result<ScratchEstimate> {
    let k = counts.k;
    let thresholds = EntropyThresholds::from_fractions(k, (1.0 / 3.0, 2.0 / 3.0))?;
    let mut rows = Vec::with_capacity(k);
    let mut unseen = BTreeSet::new();
    for i in 0..k {
        let total = counts.totals[i];
        if total == 0 {
            unseen.insert(i);
            rows.push(fallback.fill(k));
        } else {
            rows.push(counts.row(i).iter().map(|&c| c as f64 / total as f64).collect());
        }
    }
    Ok(ScratchEstimate { matrix: TransitionMatrix::from_rows(rows, thresholds)?, unseen_rows: unseen })
}

/// Teacher-copy estimator: any row visited at least once is taken verbatim
/// from the teacher; the rest take the fallback.
pub fn fit_distill(
    dataset: &SequenceDataset,
    teacher: &TransitionMatrix,
    fallback: FallbackPolicy,
) -> Result<DistillEstimate> {
    if dataset.k != teacher.k() {
        return Err(Error::VocabMismatch { expected: teacher.k(), got: dataset.k });
    }
    fit_distill_from_counts(&empirical_row_counts(dataset), teacher, fallback)
}

/// Same as [`fit_distill`] starting from pre-tallied counts.
pub fn fit_distill_from_counts(
    counts: &TransitionCounts,
    teacher: &TransitionMatrix,
    fallback: FallbackPolicy,
) -> Result<DistillEstimate> {
    if counts.k != teacher.k() {
        return Err(Error::VocabMismatch { expected: teacher.k(), got: counts.k });
    }
    let k = counts.k;
    let mut rows = Vec::with_capacity(k);
    let mut observed = BTreeSet::new();
    for i in 0..k {
        if counts.totals[i] > 0 {
            observed.insert(i);
            rows.push(teacher.row(i).to_vec());
        } else {
            rows.push(fallback.fill(k));
        }
    }
    Ok(DistillEstimate {
        matrix: TransitionMatrix::from_rows(rows, teacher.thresholds())?,
        observed_rows: observed,
        teacher_id: teacher.content_id(),
    })
}

/// L1 distance between an estimated row and the reference row.
pub fn row_l1(estimate: &[f64], truth: &[f64]) -> f64 {
    estimate.iter().zip(truth).map(|(a, b)| (a - b).abs()).sum()
}

/// Mean and max per-row L1 distance across the whole matrix.
pub fn matrix_l1(estimate: &TransitionMatrix, truth: &TransitionMatrix) -> (f64, f64) {
    let k = truth.k();
    let mut sum = 0.0;
    let mut max = 0.0_f64;
    for i in 0..k {
        let d = row_l1(estimate.row(i), truth.row(i));
        sum += d;
        max = max.max(d);
    }
    (sum / k as f64, max)
}

/// One coupon-collector trial: uniform draws from `0..k` until every value
/// has appeared `m` times. Returns the number of draws.
pub fn coupon_trial(k: usize, m: u64, seed: u64) -> u64 {
    assert!(k > 0 && m > 0);
    let mut r = rng::stream(seed, "coupon", 0);
    let mut counts = vec![0u64; k];
    let mut satisfied = 0usize;
    let mut draws = 0u64;
    while satisfied < k {
        let i: usize = rand::Rng::random_range(&mut r, 0..k);
        counts[i] += 1;
        if counts[i] == m {
            satisfied += 1;
        }
        draws += 1;
    }
    draws
}

/// Sweep configuration: a `p`-sparse ground-truth chain, a grid of sample
/// sizes, and an accuracy target `epsilon` in per-row L1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub k: usize,
    /// Row support size of the ground-truth matrix.
    pub p: usize,
    pub epsilon: f64,
    pub grid: Vec<u64>,
    pub trials: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            k: 64,
            p: 64,
            epsilon: 0.2,
            grid: (8..=17).map(|e| 1u64 << e).collect(),
            trials: 20,
            seed: 7,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config("sweep needs k >= 2".into()));
        }
        if self.p < 1 || self.p > self.k {
            return Err(Error::Config(format!("support {} outside 1..={}", self.p, self.k)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 2.0) {
            return Err(Error::Config("epsilon must lie in (0, 2)".into()));
        }
        if self.grid.is_empty() || self.trials == 0 {
            return Err(Error::Config("sweep grid and trials must be nonempty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Scratch,
    Distill,
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Estimator::Scratch => write!(f, "scratch"),
            Estimator::Distill => write!(f, "distill"),
        }
    }
}

/// One trial at one grid point for one estimator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRecord {
    pub k: usize,
    pub p: usize,
    pub epsilon: f64,
    pub n_samples: u64,
    pub estimator: Estimator,
    pub trial: usize,
    pub mean_l1: f64,
    pub max_l1: f64,
    /// Every row within `epsilon` of the truth.
    pub success: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub config: SweepConfig,
    pub records: Vec<SweepRecord>,
    /// Smallest grid point where the trial-mean of max-row L1 is within
    /// epsilon, per estimator. `None` when the grid never gets there.
    pub n_star_scratch: Option<u64>,
    pub n_star_distill: Option<u64>,
}

/// Ground-truth chain for the sweep: every row is a Dirichlet(1) draw over
/// its own `p`-token support, so row mass is spread without being uniform.
pub fn sweep_truth_matrix(k: usize, p: usize, seed: u64) -> Result<TransitionMatrix> {
    use rand_distr::{Distribution, Exp1};
    let thresholds = EntropyThresholds::from_fractions(k, (1.0 / 3.0, 2.0 / 3.0))?;
    let mut rows = Vec::with_capacity(k);
    for i in 0..k {
        let mut r = rng::stream(seed, "sweep-truth", i as u64);
        let support = rng::sample_distinct(&mut r, k, p);
        let mut row = vec![0.0; k];
        loop {
            let mut total = 0.0;
            for &t in &support {
                let g: f64 = Exp1.sample(&mut r);
                row[t] = g;
                total += g;
            }
            if total > 0.0 && support.iter().all(|&t| row[t] > 0.0) {
                for &t in &support {
                    row[t] /= total;
                }
                break;
            }
        }
        rows.push(row);
    }
    TransitionMatrix::from_rows(rows, thresholds)
}

/// Runs both estimators over the sample-size grid.
///
/// Each trial samples `n` two-token sequences from the truth (uniform first
/// token, one chain transition), tallies counts, and fits both estimators
/// from the same counts. The distilled fit uses the truth as its teacher.
pub fn run_complexity_sweep(config: &SweepConfig) -> Result<SweepOutcome> {
    config.validate()?;
    let truth = sweep_truth_matrix(config.k, config.p, config.seed)?;
    let no_triggers = TriggerSpec::none();
    let mut records = Vec::new();
    let mut n_star_scratch = None;
    let mut n_star_distill = None;
    for (gi, &n) in config.grid.iter().enumerate() {
        let mut mean_max_scratch = 0.0;
        let mut mean_max_distill = 0.0;
        for trial in 0..config.trials {
            let sample_seed = config
                .seed
                .wrapping_add(1)
                .wrapping_mul(1_000_003)
                .wrapping_add((gi * config.trials + trial) as u64);
            let ds = sample_sequences(&truth, &no_triggers, n as usize, 2, sample_seed)?;
            let counts = empirical_row_counts(&ds);
            let scratch = fit_scratch(&counts, FallbackPolicy::Uniform)?;
            let distill = fit_distill_from_counts(&counts, &truth, FallbackPolicy::Uniform)?;
            for (estimator, matrix) in [
                (Estimator::Scratch, &scratch.matrix),
                (Estimator::Distill, &distill.matrix),
            ] {
                let (mean_l1, max_l1) = matrix_l1(matrix, &truth);
                match estimator {
                    Estimator::Scratch => mean_max_scratch += max_l1,
                    Estimator::Distill => mean_max_distill += max_l1,
                }
                records.push(SweepRecord {
                    k: config.k,
                    p: config.p,
                    epsilon: config.epsilon,
                    n_samples: n,
                    estimator,
                    trial,
                    mean_l1,
                    max_l1,
                    success: max_l1 <= config.epsilon,
                });
            }
        }
        mean_max_scratch /= config.trials as f64;
        mean_max_distill /= config.trials as f64;
        if n_star_scratch.is_none() && mean_max_scratch <= config.epsilon {
            n_star_scratch = Some(n);
        }
        if n_star_distill.is_none() && mean_max_distill <= config.epsilon {
            n_star_distill = Some(n);
        }
    }
    Ok(SweepOutcome { config: config.clone(), records, n_star_scratch, n_star_distill })
}
