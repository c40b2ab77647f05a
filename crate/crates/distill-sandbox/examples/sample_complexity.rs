//! Why copying a teacher needs fewer samples than counting transitions.
//!
//! A tabular student that copies the teacher's row after one visit only needs
//! to see every token once (a coupon-collector problem), while a student that
//! estimates each row from counts needs roughly p/eps^2 visits per row. This
//! example measures both effects directly and then runs the packaged sweep
//! that locates each estimator's sample-size threshold.

use distill_sandbox::markov::{empirical_row_counts, sample_sequences, TriggerSpec};
use distill_sandbox::tabular::{
    coupon_trial, fit_distill, fit_scratch, matrix_l1, run_complexity_sweep, sweep_truth_matrix,
    FallbackPolicy, SweepConfig,
};
use distill_sandbox::Result;

fn main() -> Result<()> {
    let k = 16;
    let truth = sweep_truth_matrix(k, 8, 3)?;

    println!("estimation error vs sample count (k = {k}, 8 nonzeros per row)");
    println!("{:>8}  {:>14}  {:>14}", "n", "scratch max L1", "distill max L1");
    for exp in 4..=10 {
        let n = 1u32 << exp;
        let data = sample_sequences(&truth, &TriggerSpec::none(), n as usize, 2, 100 + exp)?;
        let counts = empirical_row_counts(&data);
        let scratch = fit_scratch(&counts, FallbackPolicy::Uniform)?;
        let distill = fit_distill(&data, &truth, FallbackPolicy::Uniform)?;
        let (_, scratch_max) = matrix_l1(&scratch.matrix, &truth);
        let (_, distill_max) = matrix_l1(&distill.matrix, &truth);
        println!("{n:>8}  {scratch_max:>14.4}  {distill_max:>14.4}");
    }
    println!("(distill error drops to zero once every row has been visited)");

    // Coupon collector: draws needed until all k tokens appear at least once.
    let trials = 2000;
    let draws: Vec<u64> = (0..trials).map(|t| coupon_trial(k, 1, 900 + t)).collect();
    let mean = draws.iter().sum::<u64>() as f64 / trials as f64;
    let expected: f64 = (1..=k).map(|i| k as f64 / i as f64).sum();
    println!("\ncoupon collection over {k} tokens: mean {mean:.1} draws, harmonic-sum prediction {expected:.1}");
    for delta in [0.1f64, 0.01] {
        let budget = k as f64 * (k as f64).ln() + k as f64 * (1.0 / delta).ln();
        let tail = draws.iter().filter(|&&d| d as f64 > budget).count() as f64 / trials as f64;
        println!("  P(draws > k ln k + k ln(1/{delta})) = {tail:.4} (bound promises <= {delta})");
    }

    // The packaged sweep: smallest n where the trial-mean max-row L1 falls
    // inside epsilon, for each estimator.
    let sweep = run_complexity_sweep(&SweepConfig {
        k: 16,
        p: 8,
        epsilon: 0.25,
        grid: vec![64, 256, 1024, 4096],
        trials: 10,
        seed: 5,
    })?;
    println!(
        "\nsweep thresholds at eps = 0.25: scratch needs n = {:?}, distill needs n = {:?}",
        sweep.n_star_scratch, sweep.n_star_distill
    );
    Ok(())
}
