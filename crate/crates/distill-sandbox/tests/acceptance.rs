//! Acceptance suite: one test per claimed property, each printing a
//! PASS/FAIL line with the measured numbers behind the verdict (visible
//! with `--nocapture`).
//!
//! The copy-task comparisons (criteria 3, 4, and 9) share one
//! protocol-scale fixture: a 128-dim teacher on 16384 sequences, then
//! 64-dim students on 8192 sequences, three seeds per arm. Building it
//! takes several minutes of CPU; every other criterion runs in seconds.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::LazyLock;

use distill_sandbox::eval::{build_eval_set, probe_model, KlByClass};
use distill_sandbox::harness::config::class_plan;
use distill_sandbox::harness::figures::TABLE_NAMES;
use distill_sandbox::harness::store::RunDirs;
use distill_sandbox::harness::{ExperimentConfig, Pipeline, Stage};
use distill_sandbox::loss::{
    build_label_archive, distill_loss, distill_loss_grad, route_tokens, sparsify_labels,
    teacher_soft_labels, LabelArchive, LabelDist, LabelOrigin, LossSpec, SoftLabelField,
    SparsityMode,
};
use distill_sandbox::markov::{
    build_matrix, empirical_row_counts, sample_sequences, BuildOptions, SequenceDataset,
    TriggerSpec,
};
use distill_sandbox::model::backward::backward_chunk;
use distill_sandbox::model::{
    forward, forward_chunk, train, GradBuf, ModelConfig, ModelParams, StepRecord, TrainOptions,
};
use distill_sandbox::passk::{
    crossover_point, estimate_passk, optimal_alpha, passk_value, BinaryTask, Policy,
};
use distill_sandbox::rng;
use distill_sandbox::tabular::{coupon_trial, fit_distill, sweep_truth_matrix, FallbackPolicy};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn criterion(id: u32, name: &str, check: Check) {
    match check {
        Ok(detail) => eprintln!("criterion {id:02} ({name}): PASS [{detail}]"),
        Err(detail) => {
            eprintln!("criterion {id:02} ({name}): FAIL [{detail}]");
            panic!("criterion {id:02} ({name}): {detail}");
        }
    }
}

fn median3(mut v: [f64; 3]) -> f64 {
    v.sort_by(f64::total_cmp);
    v[1]
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn bits_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn traces_equal(a: &[StepRecord], b: &[StepRecord]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.step == y.step
                && x.samples_seen == y.samples_seen
                && x.lr.to_bits() == y.lr.to_bits()
                && x.loss.to_bits() == y.loss.to_bits()
        })
}

// Criterion 1: once every row has been visited, the tabular distillation
// estimate IS the teacher matrix, and row coverage arrives within the
// coupon-collector budget.
#[test]
fn a01_tabular_distillation_copies_covered_rows_exactly() {
    criterion(
        1,
        "tabular distillation exactness and coupon coverage",
        (|| {
            let k = 64usize;
            let truth = build_matrix(k, &class_plan(k), 401, &BuildOptions::default())
                .map_err(|e| e.to_string())?;
            let mut n = 512usize;
            let (dataset, covered) = loop {
                let ds = sample_sequences(&truth, &TriggerSpec::none(), n, 2, 402)
                    .map_err(|e| e.to_string())?;
                if empirical_row_counts(&ds).totals.iter().all(|&t| t > 0) {
                    break (ds, n);
                }
                n *= 2;
            };
            let est = fit_distill(&dataset, &truth, FallbackPolicy::Uniform)
                .map_err(|e| e.to_string())?;
            ensure!(
                est.observed_rows.len() == k,
                "only {} of {k} rows observed",
                est.observed_rows.len()
            );
            for i in 0..k {
                ensure!(
                    bits_equal(est.matrix.row(i), truth.row(i)),
                    "row {i} of the distilled table differs from the teacher"
                );
            }
            ensure!(
                est.matrix.content_id() == truth.content_id(),
                "content ids differ after an exact row copy"
            );

            let trials = 10_000u64;
            let kf = k as f64;
            let mut rates = Vec::new();
            for &delta in &[0.1f64, 0.01] {
                let budget = kf * kf.ln() + kf * (1.0 / delta).ln();
                let exceed = (0..trials)
                    .filter(|&t| coupon_trial(k, 1, 9_000 + t) as f64 > budget)
                    .count() as f64;
                let rate = exceed / trials as f64;
                let limit = delta + 2.576 * (delta * (1.0 - delta) / trials as f64).sqrt();
                ensure!(
                    rate <= limit,
                    "P(draws > k ln k + k ln(1/{delta})) = {rate:.4} exceeds {limit:.4}"
                );
                rates.push(format!("delta {delta}: tail rate {rate:.4} <= {limit:.4}"));
            }
            Ok(format!(
                "all {k} rows covered with {covered} length-2 sequences, estimate bitwise equal; {}",
                rates.join("; ")
            ))
        })(),
    );
}

// Criterion 2: the per-row MLE error meets sqrt(support/n) in trial mean.
#[test]
fn a02_row_estimation_error_meets_support_bound() {
    criterion(
        2,
        "empirical row L1 error within sqrt(p/n)",
        (|| {
            let trials = 20u64;
            let mut tightest = f64::INFINITY;
            for &p in &[2usize, 8] {
                let truth = sweep_truth_matrix(8, p, 500 + p as u64).map_err(|e| e.to_string())?;
                for &n in &[16usize, 64, 256] {
                    for row in 0..8usize {
                        let mut l1s = Vec::with_capacity(trials as usize);
                        for trial in 0..trials {
                            let mut r = rng::stream(
                                600 + trial,
                                "mle-bound",
                                (p * 10_000 + n * 10 + row) as u64,
                            );
                            let mut counts = [0u64; 8];
                            for _ in 0..n {
                                counts[rng::sample_categorical(&mut r, truth.row(row))] += 1;
                            }
                            let l1: f64 = truth
                                .row(row)
                                .iter()
                                .enumerate()
                                .map(|(t, &q)| (counts[t] as f64 / n as f64 - q).abs())
                                .sum();
                            l1s.push(l1);
                        }
                        let (mean, sd) = mean_sd(&l1s);
                        let bound = (p as f64 / n as f64).sqrt();
                        let slack = 2.0 * sd / (trials as f64).sqrt();
                        ensure!(
                            mean <= bound + slack,
                            "support {p}, n {n}, row {row}: mean L1 {mean:.4} > {bound:.4} + {slack:.4}"
                        );
                        tightest = tightest.min(bound + slack - mean);
                    }
                }
            }
            Ok(format!(
                "48 cells (p in {{2,8}} x n in {{16,64,256}} x 8 rows) under the bound; smallest margin {tightest:.4}"
            ))
        })(),
    );
}

struct ArmResult {
    seed: u64,
    accuracy: f64,
    kl: KlByClass,
}

struct Protocol {
    teacher_accuracy: f64,
    arms: Vec<(String, Vec<ArmResult>)>,
}

impl Protocol {
    fn arm(&self, name: &str) -> &[ArmResult] {
        &self.arms.iter().find(|(n, _)| n == name).expect("arm present").1
    }

    fn accuracies(&self, name: &str) -> [f64; 3] {
        let rs = self.arm(name);
        [rs[0].accuracy, rs[1].accuracy, rs[2].accuracy]
    }

    fn high_kls(&self, name: &str) -> Result<[f64; 3], String> {
        self.class_kls(name, |kl| kl.high)
    }

    fn low_kls(&self, name: &str) -> Result<[f64; 3], String> {
        self.class_kls(name, |kl| kl.low)
    }

    fn class_kls(&self, name: &str, pick: fn(&KlByClass) -> Option<f64>) -> Result<[f64; 3], String> {
        let rs = self.arm(name);
        let mut out = [0.0; 3];
        for (i, r) in rs.iter().enumerate() {
            out[i] = pick(&r.kl).ok_or_else(|| format!("{name} seed {}: empty KL class", r.seed))?;
        }
        Ok(out)
    }
}

// Built once and shared by criteria 3, 4, and 9: the full-protocol teacher,
// its cached labels, and the ce / kd / kd-routed student arms.
static PROTOCOL: LazyLock<Protocol> = LazyLock::new(|| {
    build_protocol().expect("protocol fixture builds")
});

fn build_protocol() -> distill_sandbox::Result<Protocol> {
    let cfg = ExperimentConfig::paper_protocol();
    let data = &cfg.data;
    eprintln!("building the protocol fixture: teacher plus 9 students, several minutes of CPU");
    let matrix = build_matrix(data.k, &data.class_plan(), data.seed, &data.build)?;
    let triggers = TriggerSpec::draw(data.k, data.trigger_count, data.seed)?;
    let teacher_train =
        sample_sequences(&matrix, &triggers, data.n_train_teacher, data.seq_len, data.seed)?;
    let student_train = teacher_train.take(data.n_train_student)?;
    let eval = build_eval_set(
        &matrix,
        &triggers,
        data.n_eval,
        data.seq_len,
        data.seed,
        data.per_trigger_targets,
    )?;

    let mut teacher_opts = cfg.teacher.train_options(true);
    teacher_opts.checkpoint_every = None;
    let teacher = train(
        &cfg.teacher.model_config(data),
        &teacher_train,
        &LossSpec::hard_only(),
        None,
        &teacher_opts,
        cfg.teacher.seed,
    )?;
    let (teacher_ind, teacher_kl) = probe_model(&teacher.params, &matrix, &eval)?;
    let teacher_accuracy = teacher_ind.accuracy().unwrap_or(0.0);
    eprintln!(
        "  teacher: induction {teacher_accuracy:.4}, high KL {:?}",
        teacher_kl.high
    );
    let archive = build_label_archive(&teacher.params, &student_train, cfg.labels.temperature)?;

    let mut student_opts = cfg.student.train_options(true);
    student_opts.checkpoint_every = None;
    let mut arms = Vec::new();
    for arm in cfg.arms.iter().filter(|a| ["ce", "kd", "kd-routed"].contains(&a.name.as_str())) {
        let mut results = Vec::new();
        for &seed in &cfg.run.seeds {
            let mut mc = cfg.student.model_config(data);
            mc.seed = seed;
            let labels = (arm.loss.alpha > 0.0).then_some(&archive);
            let out = train(&mc, &student_train, &arm.loss, labels, &student_opts, seed)?;
            let (ind, kl) = probe_model(&out.params, &matrix, &eval)?;
            let accuracy = ind.accuracy().unwrap_or(0.0);
            eprintln!(
                "  {} seed {seed}: induction {accuracy:.4}, high KL {:?}",
                arm.name, kl.high
            );
            results.push(ArmResult { seed, accuracy, kl });
        }
        arms.push((arm.name.clone(), results));
    }
    Ok(Protocol { teacher_accuracy, arms })
}

// Criterion 3: distillation transfers the dark knowledge of noisy rows
// (lower KL on the high-entropy class) without hurting the deterministic
// rows (low-entropy KL within noise).
#[test]
fn a03_distilled_student_fits_high_entropy_rows_better() {
    criterion(
        3,
        "high-entropy KL: distilled < hard-label, low-entropy comparable",
        (|| {
            let p = &*PROTOCOL;
            let ce_high = p.high_kls("ce")?;
            let kd_high = p.high_kls("kd")?;
            let med_ce = median3(ce_high);
            let med_kd = median3(kd_high);
            ensure!(
                med_kd < med_ce,
                "median high-entropy KL: distilled {med_kd:.4} not below hard-label {med_ce:.4}"
            );

            let ce_low = p.low_kls("ce")?;
            let kd_low = p.low_kls("kd")?;
            let (mean_ce, sd_ce) = mean_sd(&ce_low);
            let (mean_kd, sd_kd) = mean_sd(&kd_low);
            let se = (sd_ce * sd_ce / 3.0 + sd_kd * sd_kd / 3.0).sqrt();
            let gap = (mean_ce - mean_kd).abs();
            ensure!(
                gap < 2.0 * se,
                "low-entropy KL gap {gap:.4} is not within 2 standard errors ({:.4})",
                2.0 * se
            );
            Ok(format!(
                "high KL {med_kd:.4} < {med_ce:.4} (medians of {kd_high:.4?} vs {ce_high:.4?}); low gap {gap:.4} < 2se {:.4}",
                2.0 * se
            ))
        })(),
    );
}

// Criterion 4: an imperfect teacher caps what distillation can teach about
// copying; the distilled student's trigger-copy accuracy does not exceed
// the hard-label student's.
#[test]
fn a04_distillation_does_not_improve_copying_under_imperfect_teacher() {
    criterion(
        4,
        "induction accuracy: distilled <= hard-label",
        (|| {
            let p = &*PROTOCOL;
            let ce = p.accuracies("ce");
            let kd = p.accuracies("kd");
            let med_ce = median3(ce);
            let med_kd = median3(kd);
            ensure!(
                med_kd <= med_ce,
                "median induction accuracy: distilled {med_kd:.4} exceeds hard-label {med_ce:.4}"
            );
            Ok(format!(
                "distilled {med_kd:.4} <= hard-label {med_ce:.4} (seeds {kd:.4?} vs {ce:.4?}; teacher {:.4})",
                p.teacher_accuracy
            ))
        })(),
    );
}

// Criterion 5: the closed-form optimal soft-label weight matches brute-force
// grid search of the best-of-k objective, and k = 1 degenerates to the
// majority rule.
#[test]
fn a05_closed_form_alpha_matches_grid_search() {
    criterion(
        5,
        "closed-form alpha equals grid-search argmax",
        (|| {
            let mut worst = 0.0f64;
            let mut cells = 0usize;
            for i in 1..=99u32 {
                let p = 0.01 + f64::from(i) * 0.98 / 100.0;
                let task = BinaryTask::new(p).map_err(|e| e.to_string())?;
                for &k in &[2u32, 3, 4, 8, 16] {
                    let star = optimal_alpha(task, k).map_err(|e| e.to_string())?;
                    ensure!(star.interior, "p {p:.4}, k {k}: optimum unexpectedly on the boundary");
                    let value = |a: f64| passk_value(task, Policy { alpha: a }, k);
                    let coarse = 2_000u32;
                    let mut best_a = 0.0;
                    let mut best_v = f64::NEG_INFINITY;
                    for j in 0..=coarse {
                        let a = f64::from(j) / f64::from(coarse);
                        let v = value(a);
                        if v > best_v {
                            best_v = v;
                            best_a = a;
                        }
                    }
                    let lo = (best_a - 1.0 / f64::from(coarse)).max(0.0);
                    let hi = (best_a + 1.0 / f64::from(coarse)).min(1.0);
                    let fine = 2_000u32;
                    for j in 0..=fine {
                        let a = lo + (hi - lo) * f64::from(j) / f64::from(fine);
                        let v = value(a);
                        if v > best_v {
                            best_v = v;
                            best_a = a;
                        }
                    }
                    let err = (best_a - star.alpha).abs();
                    ensure!(
                        err <= 2e-5,
                        "p {p:.4}, k {k}: closed form {:.6} vs grid {best_a:.6} (err {err:.2e})",
                        star.alpha
                    );
                    worst = worst.max(err);
                    cells += 1;
                }
            }
            for &(p, expect) in &[(0.3, 0.0), (0.7, 1.0), (0.5, 0.5)] {
                let task = BinaryTask::new(p).map_err(|e| e.to_string())?;
                let star = optimal_alpha(task, 1).map_err(|e| e.to_string())?;
                ensure!(
                    star.alpha == expect && !star.interior,
                    "k 1, p {p}: got alpha {} (interior {})",
                    star.alpha,
                    star.interior
                );
                let best = passk_value(task, Policy { alpha: star.alpha }, 1);
                let v0 = passk_value(task, Policy { alpha: 0.0 }, 1);
                let v1 = passk_value(task, Policy { alpha: 1.0 }, 1);
                ensure!(
                    best >= v0.max(v1),
                    "k 1, p {p}: majority rule value {best} below a boundary alternative"
                );
            }
            Ok(format!(
                "{cells} (p, k) cells within 2e-5 of grid search, worst gap {worst:.2e}; k = 1 follows the majority rule"
            ))
        })(),
    );
}

// Criterion 6: the three-classifier worked example at epsilon = 0.1. The
// retrying coin overtakes the majority rule exactly at k = 2, and hedging
// mass on a never-correct symbol never pays.
#[test]
fn a06_classifier_family_crossover_sits_at_k_2() {
    criterion(
        6,
        "classifier curves and k = 2 crossover",
        (|| {
            let analysis = crossover_point(0.1).map_err(|e| e.to_string())?;
            ensure!(
                analysis.coin_beats_majority_at == 2,
                "coin overtakes majority at k = {} instead of 2",
                analysis.coin_beats_majority_at
            );
            let rows = &analysis.curves.rows;
            ensure!(rows.len() == 32, "expected 32 tabulated k values, got {}", rows.len());
            for row in rows {
                let k = row.k;
                ensure!(
                    (row.majority - 0.6).abs() < 1e-15,
                    "k {k}: majority rule {:.17} is not 0.6",
                    row.majority
                );
                let coin = 1.0 - 0.5f64.powi(k as i32);
                ensure!(
                    row.coin == coin,
                    "k {k}: coin value {:.17} differs from 1 - 2^-k",
                    row.coin
                );
                let hedged = row.majority * coin;
                ensure!(
                    (row.hedged - hedged).abs() < 1e-15,
                    "k {k}: hedged value {:.17} differs from majority x coin",
                    row.hedged
                );
                ensure!(
                    row.hedged < row.majority,
                    "k {k}: hedged {:.6} not strictly below majority {:.6}",
                    row.hedged,
                    row.majority
                );
            }
            ensure!(rows[0].coin < rows[0].majority, "k 1: coin should lose to majority");
            ensure!(
                rows[1].coin == 0.75 && rows[1].coin > rows[1].majority,
                "k 2: coin {:.6} should be 0.75 and beat majority {:.6}",
                rows[1].coin,
                rows[1].majority
            );
            Ok(format!(
                "majority 0.6 flat, coin 1 - 2^-k crosses at k = 2 (0.75 > 0.6), hedged below majority for all k <= 32"
            ))
        })(),
    );
}

// Criterion 7: the unbiased best-of-k estimator equals exhaustive subset
// enumeration for every (n <= 8, c, k).
#[test]
fn a07_passk_estimator_matches_subset_enumeration() {
    criterion(
        7,
        "estimator equals exhaustive enumeration",
        (|| {
            let mut cells = 0usize;
            for n in 1..=8u64 {
                for c in 0..=n {
                    for k in 0..=n {
                        let est = estimate_passk(n, c, k).map_err(|e| e.to_string())?;
                        let mut subsets = 0u64;
                        let mut hits = 0u64;
                        for mask in 0u32..(1 << n) {
                            if u64::from(mask.count_ones()) != k {
                                continue;
                            }
                            subsets += 1;
                            if mask & ((1u32 << c) - 1) != 0 {
                                hits += 1;
                            }
                        }
                        let brute = hits as f64 / subsets as f64;
                        ensure!(
                            est == brute,
                            "n {n}, c {c}, k {k}: estimator {est:.17} vs enumeration {brute:.17}"
                        );
                        cells += 1;
                    }
                }
            }
            Ok(format!("{cells} (n, c, k) cells match enumeration exactly"))
        })(),
    );
}

fn loss_value(
    params: &ModelParams,
    tokens: &[u32],
    labels: Option<&SoftLabelField>,
    spec: &LossSpec,
) -> Result<f64, String> {
    let logits = forward(params, tokens).map_err(|e| e.to_string())?;
    distill_loss(logits.view(), tokens, labels, spec)
        .map(|b| b.total)
        .map_err(|e| e.to_string())
}

fn analytic_grad(
    params: &ModelParams,
    tokens: &[u32],
    labels: Option<&SoftLabelField>,
    spec: &LossSpec,
) -> Result<GradBuf, String> {
    let (logits, cache) = forward_chunk(params, tokens, 1, true).map_err(|e| e.to_string())?;
    let cache = cache.expect("cache requested");
    let (_, dlogits) =
        distill_loss_grad(logits.view(), tokens, labels, spec).map_err(|e| e.to_string())?;
    backward_chunk(params, &cache, &dlogits).map_err(|e| e.to_string())
}

// Criterion 8: central finite differences confirm every gradient path of
// the objective, and routed positions carry exactly the scaled hard term.
#[test]
fn a08_loss_gradients_match_finite_differences() {
    criterion(
        8,
        "finite-difference gradient grid",
        (|| {
            let cfg = ModelConfig {
                n_layers: 2,
                d_model: 8,
                n_heads: 2,
                max_seq_len: 6,
                vocab_size: 5,
                seed: 31,
            };
            let student = ModelParams::init(&cfg).map_err(|e| e.to_string())?;
            let teacher =
                ModelParams::init(&ModelConfig { seed: 32, ..cfg }).map_err(|e| e.to_string())?;
            let tokens: Vec<u32> = vec![0, 3, 1, 4, 2, 1];
            let dense = teacher_soft_labels(&teacher, &tokens, 2.0).map_err(|e| e.to_string())?;
            let variants = [
                (SparsityMode::Dense, None, "dense"),
                (SparsityMode::TopK, Some(1), "top-1"),
                (SparsityMode::Sample, Some(2), "sample-2"),
            ];
            let eps = 1e-5;
            let mut worst = 0.0f64;
            let mut grids = 0usize;
            for &alpha in &[0.0, 0.5, 1.0] {
                for &fraction in &[0.0, 0.15, 1.0] {
                    for &(mode, keep, tag) in &variants {
                        let spec = LossSpec {
                            alpha,
                            routing_fraction: fraction,
                            sparsity: mode,
                            sparsity_k: keep,
                            ..LossSpec::default()
                        };
                        let field =
                            sparsify_labels(&dense, mode, keep, 77, 0).map_err(|e| e.to_string())?;
                        let labels = (alpha > 0.0).then_some(&field);
                        let grad = analytic_grad(&student, &tokens, labels, &spec)?;
                        for i in 0..student.data.len() {
                            let mut plus = student.clone();
                            plus.data[i] += eps;
                            let mut minus = student.clone();
                            minus.data[i] -= eps;
                            let fd = (loss_value(&plus, &tokens, labels, &spec)?
                                - loss_value(&minus, &tokens, labels, &spec)?)
                                / (2.0 * eps);
                            let a = grad.data[i];
                            let scale = a.abs().max(fd.abs());
                            // the absolute floor only covers parameters whose
                            // gradient sits at the finite-difference noise level
                            let tol = 1e-4 * scale + 1e-8;
                            ensure!(
                                (a - fd).abs() <= tol,
                                "alpha {alpha}, x {fraction}, {tag}, parameter {i}: analytic {a:.6e} vs central difference {fd:.6e}"
                            );
                            if scale >= 1e-4 {
                                worst = worst.max((a - fd).abs() / scale);
                            }
                        }
                        grids += 1;
                    }
                }
            }

            // Routed positions keep only the hard term: with alpha = 0.5 each
            // routed row of the logit gradient is bitwise half the plain
            // cross-entropy row (halving is exact in binary floating point).
            let logits = forward(&student, &tokens).map_err(|e| e.to_string())?;
            let (_, hard) =
                distill_loss_grad(logits.view(), &tokens, None, &LossSpec::hard_only())
                    .map_err(|e| e.to_string())?;
            let mut routed_rows = 0usize;
            for &fraction in &[0.4, 1.0] {
                let spec = LossSpec { alpha: 0.5, routing_fraction: fraction, ..LossSpec::default() };
                let (_, mixed) = distill_loss_grad(logits.view(), &tokens, Some(&dense), &spec)
                    .map_err(|e| e.to_string())?;
                let mask = route_tokens(&dense, fraction);
                ensure!(
                    mask.iter().any(|&m| m),
                    "fraction {fraction} routed nothing on the toy sequence"
                );
                for (j, &routed) in mask.iter().enumerate() {
                    let same = mixed
                        .row(j)
                        .iter()
                        .zip(hard.row(j))
                        .all(|(m, h)| m.to_bits() == (0.5 * h).to_bits());
                    if routed {
                        ensure!(
                            same,
                            "x {fraction}, position {j}: routed gradient row is not exactly half the hard row"
                        );
                        routed_rows += 1;
                    } else {
                        ensure!(
                            !same,
                            "x {fraction}, position {j}: unrouted row carries no soft component"
                        );
                    }
                }
            }
            Ok(format!(
                "{grids} loss variants x {} parameters within 1e-4 of central differences (worst relative gap {worst:.2e}); {routed_rows} routed rows carry exactly the halved hard gradient",
                student.data.len()
            ))
        })(),
    );
}

// Criterion 9: the routing mask is exactly the lowest-entropy prefix of the
// per-sequence entropy order, and routing restores copy accuracy relative
// to plain distillation.
#[test]
fn a09_routing_targets_lowest_entropy_positions_and_keeps_copying() {
    criterion(
        9,
        "routing mask oracle and copy-accuracy direction",
        (|| {
            let cfg = ModelConfig {
                n_layers: 2,
                d_model: 16,
                n_heads: 2,
                max_seq_len: 48,
                vocab_size: 16,
                seed: 71,
            };
            let teacher = ModelParams::init(&cfg).map_err(|e| e.to_string())?;
            let matrix = build_matrix(16, &class_plan(16), 72, &BuildOptions::default())
                .map_err(|e| e.to_string())?;
            let data = sample_sequences(&matrix, &TriggerSpec::none(), 6, 48, 73)
                .map_err(|e| e.to_string())?;
            let mut masks = 0usize;
            for i in 0..data.len() {
                let field = teacher_soft_labels(&teacher, data.sequence(i), 2.0)
                    .map_err(|e| e.to_string())?;
                let n = field.positions();
                for &x in &[0.15f64, 0.5, 1.0] {
                    let mask = route_tokens(&field, x);
                    let expected = (x * n as f64).floor() as usize;
                    let got: BTreeSet<usize> =
                        mask.iter().enumerate().filter(|&(_, &m)| m).map(|(j, _)| j).collect();
                    ensure!(
                        got.len() == expected,
                        "sequence {i}, x {x}: {} routed positions, expected floor({x} * {n}) = {expected}",
                        got.len()
                    );
                    let mut order: Vec<usize> = (0..n).collect();
                    order.sort_by(|&a, &b| {
                        field.entropies[a].total_cmp(&field.entropies[b]).then(a.cmp(&b))
                    });
                    let want: BTreeSet<usize> = order[..expected].iter().copied().collect();
                    ensure!(
                        got == want,
                        "sequence {i}, x {x}: mask {got:?} differs from the entropy-sort oracle {want:?}"
                    );
                    masks += 1;
                }
            }

            let p = &*PROTOCOL;
            let kd = p.accuracies("kd");
            let routed = p.accuracies("kd-routed");
            let med_kd = median3(kd);
            let med_routed = median3(routed);
            ensure!(
                med_routed >= med_kd,
                "median induction accuracy: routed {med_routed:.4} below plain distillation {med_kd:.4}"
            );
            Ok(format!(
                "{masks} masks match the sort oracle; routed accuracy {med_routed:.4} >= distilled {med_kd:.4} (seeds {routed:.4?} vs {kd:.4?})"
            ))
        })(),
    );
}

fn one_hot_truth_archive(data: &SequenceDataset, temperature: f64) -> LabelArchive {
    let origin = LabelOrigin { teacher_id: "ground-truth".into(), temperature };
    let fields = (0..data.len())
        .map(|i| {
            let seq = data.sequence(i);
            let dists: Vec<LabelDist> =
                seq[1..].iter().map(|&t| LabelDist::Sparse(vec![(t, 1.0)])).collect();
            SoftLabelField {
                k: data.k,
                entropies: vec![0.0; dists.len()],
                dists,
                origin: origin.clone(),
            }
        })
        .collect();
    LabelArchive { origin, fields }
}

// Criterion 10: sparsification identities. Keeping every token is the dense
// archive; top-1 keeps the teacher argmax and, with ground-truth argmax
// labels swapped in, reproduces hard-label training bitwise; sampled-2
// inclusion frequencies match the closed form.
#[test]
fn a10_label_sparsification_identities() {
    criterion(
        10,
        "sparsified-label training identities",
        (|| {
            let k = 12usize;
            let matrix = build_matrix(k, &class_plan(k), 81, &BuildOptions::default())
                .map_err(|e| e.to_string())?;
            let triggers = TriggerSpec::draw(k, 2, 81).map_err(|e| e.to_string())?;
            let data =
                sample_sequences(&matrix, &triggers, 64, 12, 82).map_err(|e| e.to_string())?;
            let teacher_cfg = ModelConfig {
                n_layers: 2,
                d_model: 16,
                n_heads: 2,
                max_seq_len: 12,
                vocab_size: k,
                seed: 83,
            };
            // label identities care about the archive plumbing, not teacher
            // quality, so an untrained teacher keeps the test fast
            let teacher = ModelParams::init(&teacher_cfg).map_err(|e| e.to_string())?;
            let archive =
                build_label_archive(&teacher, &data, 2.0).map_err(|e| e.to_string())?;
            let student_cfg = ModelConfig { seed: 84, ..teacher_cfg };
            let opts = TrainOptions {
                epochs: 1,
                batch_size: 16,
                base_lr: 1e-3,
                warmup_frac: 0.1,
                checkpoint_every: None,
                parallel: false,
            };

            let keep_all = archive
                .sparsify(SparsityMode::Sample, None, 99)
                .map_err(|e| e.to_string())?;
            ensure!(keep_all == archive, "keep-all sparsification altered the archive");
            let kd = LossSpec::default();
            let dense_run =
                train(&student_cfg, &data, &kd, Some(&archive), &opts, 85).map_err(|e| e.to_string())?;
            let all_run = train(&student_cfg, &data, &kd, Some(&keep_all), &opts, 85)
                .map_err(|e| e.to_string())?;
            ensure!(
                bits_equal(&dense_run.params.data, &all_run.params.data)
                    && traces_equal(&dense_run.trace, &all_run.trace),
                "keep-all training diverged from dense training"
            );
            // the sparsity switches live in the data, not the objective
            let tagged = LossSpec { sparsity: SparsityMode::TopK, sparsity_k: None, ..kd };
            let tagged_run = train(&student_cfg, &data, &tagged, Some(&archive), &opts, 85)
                .map_err(|e| e.to_string())?;
            ensure!(
                bits_equal(&dense_run.params.data, &tagged_run.params.data),
                "sparsity metadata leaked into the dense objective"
            );

            let top1 = archive
                .sparsify(SparsityMode::TopK, Some(1), 99)
                .map_err(|e| e.to_string())?;
            for (i, (sparse, full)) in top1.fields.iter().zip(&archive.fields).enumerate() {
                for (j, (sd, dd)) in sparse.dists.iter().zip(&full.dists).enumerate() {
                    let LabelDist::Sparse(pairs) = sd else {
                        return Err(format!("field {i} position {j}: top-1 label is not sparse"));
                    };
                    ensure!(
                        pairs.len() == 1 && pairs[0].1 == 1.0,
                        "field {i} position {j}: top-1 label is not a unit point mass"
                    );
                    let LabelDist::Dense(v) = dd else {
                        return Err(format!("field {i} position {j}: dense label missing"));
                    };
                    let mut best = 0usize;
                    for t in 1..v.len() {
                        if v[t] > v[best] {
                            best = t;
                        }
                    }
                    ensure!(
                        pairs[0].0 as usize == best,
                        "field {i} position {j}: kept token {} is not the teacher argmax {best}",
                        pairs[0].0
                    );
                }
            }
            let alpha1 = LossSpec { alpha: 1.0, ..LossSpec::default() };
            let teacher_argmax_run = train(&student_cfg, &data, &alpha1, Some(&top1), &opts, 86)
                .map_err(|e| e.to_string())?;
            let hard_run = train(&student_cfg, &data, &LossSpec::hard_only(), None, &opts, 86)
                .map_err(|e| e.to_string())?;
            ensure!(
                !traces_equal(&teacher_argmax_run.trace, &hard_run.trace),
                "teacher-argmax labels unexpectedly reproduced the ground-truth trace"
            );
            let truth_run = train(
                &student_cfg,
                &data,
                &alpha1,
                Some(&one_hot_truth_archive(&data, alpha1.temperature)),
                &opts,
                86,
            )
            .map_err(|e| e.to_string())?;
            ensure!(
                bits_equal(&truth_run.params.data, &hard_run.params.data)
                    && traces_equal(&truth_run.trace, &hard_run.trace),
                "swapping ground-truth argmax labels in did not reproduce hard-label training"
            );

            let probs = [0.5f64, 0.3, 0.2];
            let entropy = -probs.iter().map(|&p| p * p.ln()).sum::<f64>();
            let origin = LabelOrigin { teacher_id: "toy".into(), temperature: 2.0 };
            let fields: Vec<SoftLabelField> = (0..20_000)
                .map(|_| SoftLabelField {
                    k: 3,
                    dists: vec![LabelDist::Dense(probs.to_vec())],
                    entropies: vec![entropy],
                    origin: origin.clone(),
                })
                .collect();
            let toy = LabelArchive { origin, fields };
            let sampled =
                toy.sparsify(SparsityMode::Sample, Some(2), 77).map_err(|e| e.to_string())?;
            let mut counts = [0u64; 3];
            for field in &sampled.fields {
                let LabelDist::Sparse(pairs) = &field.dists[0] else {
                    return Err("sampled label is not sparse".into());
                };
                ensure!(pairs.len() == 2, "sampled label kept {} tokens, wanted 2", pairs.len());
                for &(t, _) in pairs {
                    counts[t as usize] += 1;
                }
            }
            let mut freqs = [0.0f64; 3];
            for a in 0..3 {
                // P(a among 2 draws without replacement) = p_a + sum_b p_b * p_a / (1 - p_b)
                let direct = probs[a];
                let second: f64 = (0..3)
                    .filter(|&b| b != a)
                    .map(|b| probs[b] * probs[a] / (1.0 - probs[b]))
                    .sum();
                let expect = direct + second;
                let freq = counts[a] as f64 / 20_000.0;
                freqs[a] = freq;
                ensure!(
                    (freq - expect).abs() <= 0.015,
                    "token {a}: inclusion frequency {freq:.4} vs closed form {expect:.4}"
                );
            }
            Ok(format!(
                "keep-all training bitwise equals dense; top-1 is the teacher argmax and the ground-truth swap reproduces hard-label training bitwise; sample-2 inclusion {freqs:.4?} matches the closed form"
            ))
        })(),
    );
}

// Criterion 11: the whole pipeline is a pure function of its configuration
// when single-threaded: re-running it reproduces every plot-data byte.
#[test]
fn a11_single_threaded_reruns_are_byte_identical() {
    criterion(
        11,
        "pipeline reruns byte-identical",
        (|| {
            let run = |root: &Path| -> Result<(), String> {
                Pipeline::new(ExperimentConfig::quick(), root, true)
                    .map_err(|e| e.to_string())?
                    .run_through(Stage::Figures)
                    .map_err(|e| e.to_string())?;
                Ok(())
            };
            let a = tempfile::tempdir().map_err(|e| e.to_string())?;
            let b = tempfile::tempdir().map_err(|e| e.to_string())?;
            run(a.path())?;
            run(b.path())?;
            let dirs_a = RunDirs::new(a.path());
            let dirs_b = RunDirs::new(b.path());
            let mut files: Vec<(String, std::path::PathBuf, std::path::PathBuf)> = TABLE_NAMES
                .iter()
                .map(|name| (format!("{name}.csv"), dirs_a.table(name), dirs_b.table(name)))
                .collect();
            files.push(("metrics.json".into(), dirs_a.metrics(), dirs_b.metrics()));
            files.push(("complexity.json".into(), dirs_a.complexity(), dirs_b.complexity()));
            for (name, pa, pb) in &files {
                let ba = std::fs::read(pa).map_err(|e| format!("{name}: {e}"))?;
                let bb = std::fs::read(pb).map_err(|e| format!("{name}: {e}"))?;
                ensure!(ba == bb, "{name} differs between the two runs");
            }
            Ok(format!("{} output files byte-identical across independent runs", files.len()))
        })(),
    );
}
