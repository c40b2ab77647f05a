//! Best-of-k selection: when hedging beats the greedy answer.
//!
//! For a binary task where the favored class is right with probability p, a
//! policy that answers class 1 with probability alpha gets k independent
//! tries and passes if any try is correct. The best alpha for one try is all
//! or nothing; for several tries it hedges. This example prints the closed
//! form, confirms it against a grid search, and shows the three-classifier
//! crossover plus the unbiased pass@k estimator.

use distill_sandbox::passk::{
    coin_value, crossover_point, estimate_passk, hedged_value, majority_value, optimal_alpha,
    passk_value, BinaryTask, Policy,
};
use distill_sandbox::Result;

fn main() -> Result<()> {
    let p = 0.8;
    let task = BinaryTask::new(p)?;
    println!("task: favored class correct with p = {p}");
    println!("{:>4}  {:>10}  {:>10}  {:>12}", "k", "alpha*", "grid best", "pass@k");
    for k in [1u32, 2, 4, 8, 16] {
        let star = optimal_alpha(task, k)?;
        // Brute-force check over a fine alpha grid.
        let mut best = (0.0f64, 0.0f64);
        for i in 0..=10_000 {
            let alpha = i as f64 / 10_000.0;
            let v = passk_value(task, Policy::new(alpha)?, k);
            if v > best.1 {
                best = (alpha, v);
            }
        }
        println!(
            "{k:>4}  {:>10.6}  {:>10.6}  {:>12.6}",
            star.alpha,
            best.0,
            passk_value(task, Policy::new(star.alpha)?, k)
        );
    }
    println!("(k = 1 snaps to the majority answer; larger budgets hedge toward 50/50)");

    // Three fixed strategies against a slightly-better-than-chance majority.
    let cross = crossover_point(0.1)?;
    println!("\nmajority edge 0.1: per-k values of three fixed classifiers");
    println!("{:>4}  {:>9}  {:>9}  {:>9}", "k", "majority", "coin", "hedged");
    for k in [1u32, 2, 3, 4, 8] {
        println!(
            "{k:>4}  {:>9.4}  {:>9.4}  {:>9.4}",
            majority_value(0.1),
            coin_value(k),
            hedged_value(0.1, k)
        );
    }
    println!("coin first beats majority at k = {}", cross.coin_beats_majority_at);

    // The unbiased estimator agrees with direct enumeration.
    let (n, c, k) = (8u64, 3u64, 2u64);
    let est = estimate_passk(n, c, k)?;
    println!(
        "\nestimate_passk(n = {n}, c = {c}, k = {k}) = {est:.6} = 1 - C({}, {k})/C({n}, {k})",
        n - c
    );
    Ok(())
}
