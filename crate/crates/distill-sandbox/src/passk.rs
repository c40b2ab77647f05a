//! Best-of-k selection: closed-form optimality and empirical estimation.
//!
//! For a binary task where the correct class has probability `p`, a sampling
//! policy that puts mass `alpha` on that class passes best-of-k with
//! probability `p(1 - beta^k) + (1 - p)(1 - alpha^k)` where `beta = 1 -
//! alpha`. The objective is strictly concave in `alpha` for `k >= 2`, so the
//! optimum has a closed form ([`optimal_alpha`]); at `k = 1` it collapses to
//! the deterministic majority rule. The key consequence: for any `k >= 2`
//! the optimal policy keeps mass on both classes, so greedy decoding is not
//! what best-of-k selection wants.
//!
//! [`estimate_passk`] is the unbiased finite-sample estimator
//! `1 - C(n-c, k) / C(n, k)`, computed exactly in integers when `n` is small
//! and in log space otherwise. [`score_induction_items`] applies it to
//! sampled model completions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PositionLogitsModel;
use crate::rng;

/// Binary task: the correct answer is class 1 with probability `p`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BinaryTask {
    pub p: f64,
}

impl BinaryTask {
    pub fn new(p: f64) -> Result<Self> {
        if !(p.is_finite() && (0.0..=1.0).contains(&p)) {
            return Err(Error::InvalidArgument(format!("class probability {p} outside [0, 1]")));
        }
        Ok(BinaryTask { p })
    }
}

/// Sampling policy over the two classes: class 1 with probability `alpha`,
/// class 0 with probability `1 - alpha`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Policy {
    pub alpha: f64,
}

impl Policy {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && (0.0..=1.0).contains(&alpha)) {
            return Err(Error::InvalidArgument(format!("policy mass {alpha} outside [0, 1]")));
        }
        Ok(Policy { alpha })
    }

    pub fn beta(&self) -> f64 {
        1.0 - self.alpha
    }
}

/// Probability that at least one of `k` independent attempts from the policy
/// is correct.
pub fn passk_value(task: BinaryTask, policy: Policy, k: u32) -> f64 {
    assert!(k >= 1, "best-of-k needs at least one attempt");
    let fail_on_one = task.p * policy.beta().powi(k as i32)
        + (1.0 - task.p) * policy.alpha.powi(k as i32);
    1.0 - fail_on_one
}

/// Optimal policy mass on class 1, with a flag for whether the optimum is a
/// strict interior stationary point.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AlphaStar {
    pub alpha: f64,
    pub interior: bool,
}

/// Maximizer of best-of-k value over policies.
///
/// For `k = 1` this is the majority rule (all mass on the likelier class).
/// For `k >= 2` the stationary point `r^(1/(k-1)) / (1 + r^(1/(k-1)))` with
/// `r = p / (1 - p)` is the unique maximum by concavity, and it is strictly
/// inside `(0, 1)` whenever `0 < p < 1`.
pub fn optimal_alpha(task: BinaryTask, k: u32) -> Result<AlphaStar> {
    if k == 0 {
        return Err(Error::InvalidArgument("best-of-k needs at least one attempt".into()));
    }
    let p = task.p;
    if k == 1 {
        // majority rule; at p = 1/2 every policy ties and we report the center
        let alpha = if p > 0.5 {
            1.0
        } else if p < 0.5 {
            0.0
        } else {
            0.5
        };
        return Ok(AlphaStar { alpha, interior: false });
    }
    if p == 0.0 {
        return Ok(AlphaStar { alpha: 0.0, interior: false });
    }
    if p == 1.0 {
        return Ok(AlphaStar { alpha: 1.0, interior: false });
    }
    let r = p / (1.0 - p);
    let root = r.powf(1.0 / (k as f64 - 1.0));
    let alpha = if root.is_finite() { root / (1.0 + root) } else { 1.0 };
    Ok(AlphaStar { alpha, interior: alpha > 0.0 && alpha < 1.0 })
}

/// Best-of-k values for the three fixed classifiers of the worked example,
/// all operating on a binary task with majority margin `epsilon`.
///
/// `majority` always answers with the likelier class and scores `1/2 +
/// epsilon` no matter how many attempts it gets. `coin` answers uniformly at
/// random and scores `1 - 2^-k`, beating the majority rule once `k` is large
/// enough. `hedged` splits its mass between the likelier class and a symbol
/// that is never correct, so it approaches but never reaches the majority
/// rule from below.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierCurves {
    pub epsilon: f64,
    pub rows: Vec<ClassifierRow>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ClassifierRow {
    pub k: u32,
    pub majority: f64,
    pub coin: f64,
    pub hedged: f64,
}

pub fn majority_value(epsilon: f64) -> f64 {
    0.5 + epsilon
}

pub fn coin_value(k: u32) -> f64 {
    1.0 - 0.5f64.powi(k as i32)
}

pub fn hedged_value(epsilon: f64, k: u32) -> f64 {
    (0.5 + epsilon) * (1.0 - 0.5f64.powi(k as i32))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossoverAnalysis {
    /// Smallest k where the uniform coin strictly beats the majority rule.
    pub coin_beats_majority_at: u32,
    pub curves: ClassifierCurves,
}

/// Finds where random guessing with retries overtakes the majority rule and
/// tabulates all three classifiers for k = 1..=32.
pub fn crossover_point(epsilon: f64) -> Result<CrossoverAnalysis> {
    if !(epsilon.is_finite() && epsilon > 0.0 && epsilon < 0.5) {
        return Err(Error::InvalidArgument(format!("margin {epsilon} outside (0, 0.5)")));
    }
    let mut coin_beats_majority_at = None;
    for k in 1..=64 {
        if coin_value(k) > majority_value(epsilon) {
            coin_beats_majority_at = Some(k);
            break;
        }
    }
    let coin_beats_majority_at = coin_beats_majority_at
        .ok_or_else(|| Error::PassK("no crossover below k = 64".into()))?;
    let rows = (1..=32)
        .map(|k| ClassifierRow {
            k,
            majority: majority_value(epsilon),
            coin: coin_value(k),
            hedged: hedged_value(epsilon, k),
        })
        .collect();
    Ok(CrossoverAnalysis {
        coin_beats_majority_at,
        curves: ClassifierCurves { epsilon, rows },
    })
}

/// Unbiased pass@k from `n` attempts with `c` correct: `1 - C(n-c, k) /
/// C(n, k)`.
///
/// Exact integer arithmetic when `n <= 56` (every binomial fits in 53 bits),
/// log-space otherwise.
pub fn estimate_passk(n: u64, c: u64, k: u64) -> Result<f64> {
    if c > n {
        return Err(Error::PassK(format!("{c} correct out of {n} attempts")));
    }
    if k > n {
        return Err(Error::PassK(format!("k = {k} exceeds {n} attempts")));
    }
    if k == 0 {
        return Ok(0.0);
    }
    if k > n - c {
        // every size-k subset contains a correct attempt
        return Ok(1.0);
    }
    if n <= 56 {
        let fail = binomial_u128(n - c, k);
        let total = binomial_u128(n, k);
        // integer subtraction first: one rounding instead of two
        return Ok((total - fail) as f64 / total as f64);
    }
    let mut log_ratio = 0.0;
    for i in 0..k {
        log_ratio += ((n - c - i) as f64).ln() - ((n - i) as f64).ln();
    }
    Ok(1.0 - log_ratio.exp())
}

/// C(n, k) by the multiplicative rule; exact for every n <= 56.
fn binomial_u128(n: u64, k: u64) -> u128 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// One scoreable completion site: the model's next-token logits at a trigger
/// occurrence, plus the token that counts as correct there.
#[derive(Debug, Clone)]
pub struct InductionItem {
    pub logits: Vec<f64>,
    pub target: u32,
}

/// Collects induction items from an eval set: every trigger occurrence after
/// the first in its sequence, paired with that sequence's copy target.
pub fn collect_induction_items(
    model: &impl PositionLogitsModel,
    eval: &crate::markov::SequenceDataset,
) -> Result<Vec<InductionItem>> {
    eval.validate()?;
    let mut items = Vec::new();
    crate::eval::for_each_logits(model, eval, |i, logits| {
        let seq = eval.sequence(i);
        let mut seen_first = false;
        for (pos, &tok) in seq.iter().enumerate().take(seq.len() - 1) {
            if !eval.triggers.contains(tok) {
                continue;
            }
            if !seen_first {
                seen_first = true;
                continue;
            }
            let target = eval
                .copy_targets
                .target_for(i, tok)
                .ok_or_else(|| Error::InvalidArgument(format!("no target for trigger {tok}")))?;
            items.push(InductionItem { logits: logits.row(pos).to_vec(), target });
        }
        Ok(())
    })?;
    Ok(items)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Analytic,
    Estimated,
}

/// pass@k as a function of k, with how it was obtained.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PassKCurve {
    pub temperature: f64,
    /// Attempts per item; 0 for analytic curves.
    pub n: u32,
    /// Number of eval items averaged over; 0 for analytic curves.
    pub items: usize,
    pub entries: Vec<(u32, f64)>,
    pub provenance: Provenance,
}

/// Closed-form curve for a known task and policy.
pub fn analytic_curve(task: BinaryTask, policy: Policy, ks: &[u32]) -> PassKCurve {
    PassKCurve {
        temperature: 1.0,
        n: 0,
        items: 0,
        entries: ks.iter().map(|&k| (k, passk_value(task, policy, k))).collect(),
        provenance: Provenance::Analytic,
    }
}

/// Monte Carlo pass@k over induction items.
///
/// Per item, `n` attempts are drawn from the tempered softmax of the stored
/// logits (`temperature = 0` means deterministic argmax); the unbiased
/// estimator then turns the correct-count into pass@k for every requested k.
/// Item draws come from `(seed, "passk-item", item)` streams, so item order
/// and the k grid never change the samples.
pub fn score_induction_items(
    items: &[InductionItem],
    ks: &[u32],
    n: u32,
    temperature: f64,
    seed: u64,
) -> Result<PassKCurve> {
    if items.is_empty() {
        return Err(Error::PassK("no induction items to score".into()));
    }
    if n == 0 {
        return Err(Error::PassK("need at least one attempt per item".into()));
    }
    if !(temperature.is_finite() && temperature >= 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {temperature} invalid")));
    }
    for &k in ks {
        if k == 0 || k as u64 > n as u64 {
            return Err(Error::PassK(format!("k = {k} outside 1..={n}")));
        }
    }
    let mut sums = vec![0.0; ks.len()];
    for (idx, item) in items.iter().enumerate() {
        let c = if temperature == 0.0 {
            let argmax = argmax_index(&item.logits);
            if argmax == item.target as usize {
                n as u64
            } else {
                0
            }
        } else {
            let probs = softmax_tempered(&item.logits, temperature);
            let mut r = rng::stream(seed, "passk-item", idx as u64);
            let mut correct = 0u64;
            for _ in 0..n {
                if rng::sample_categorical(&mut r, &probs) == item.target as usize {
                    correct += 1;
                }
            }
            correct
        };
        for (slot, &k) in ks.iter().enumerate() {
            sums[slot] += estimate_passk(n as u64, c, k as u64)?;
        }
    }
    let entries = ks
        .iter()
        .zip(&sums)
        .map(|(&k, &s)| (k, s / items.len() as f64))
        .collect();
    Ok(PassKCurve {
        temperature,
        n,
        items: items.len(),
        entries,
        provenance: Provenance::Estimated,
    })
}

/// End-to-end: collect items from the eval set, then score them.
pub fn sample_and_score(
    model: &impl PositionLogitsModel,
    eval: &crate::markov::SequenceDataset,
    ks: &[u32],
    n: u32,
    temperature: f64,
    seed: u64,
) -> Result<PassKCurve> {
    let items = collect_induction_items(model, eval)?;
    score_induction_items(&items, ks, n, temperature, seed)
}

pub(crate) fn argmax_index(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn softmax_tempered(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|&z| z / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scaled.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    out
}
