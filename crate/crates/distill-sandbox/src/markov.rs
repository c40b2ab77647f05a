//! Trigger-augmented bigram chains and sequence datasets.
//!
//! A chain is a row-stochastic transition matrix whose rows are synthesized
//! in three entropy bands: low rows concentrate on a few next tokens, medium
//! rows spread over roughly a quarter of the vocabulary, high rows are
//! near-uniform with full support. A small set of trigger tokens overrides
//! the chain during sampling: whenever the current token is a trigger, the
//! next token is a copy target drawn fresh per sequence, which plants an
//! in-context copying task inside otherwise Markovian data.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

/// Entropy band of a transition row, measured in nats against fixed
/// fractions of `ln k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntropyClass {
    Low,
    Medium,
    High,
}

/// Class boundaries in nats. A row with entropy `h` is low when `h < low`,
/// high when `h >= high`, medium in between.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EntropyThresholds {
    pub low: f64,
    pub high: f64,
}

impl EntropyThresholds {
    /// Boundaries at the given fractions of `ln k`.
    pub fn from_fractions(k: usize, fractions: (f64, f64)) -> Result<Self> {
        let (lo, hi) = fractions;
        if !(lo.is_finite() && hi.is_finite() && 0.0 < lo && lo < hi && hi < 1.0) {
            return Err(Error::Config(format!(
                "threshold fractions must satisfy 0 < lo < hi < 1, got ({lo}, {hi})"
            )));
        }
        let log_k = (k as f64).ln();
        Ok(EntropyThresholds { low: lo * log_k, high: hi * log_k })
    }

    pub fn classify(&self, entropy: f64) -> EntropyClass {
        if entropy < self.low {
            EntropyClass::Low
        } else if entropy < self.high {
            EntropyClass::Medium
        } else {
            EntropyClass::High
        }
    }
}

/// Shannon entropy of a probability vector, in nats. Zero entries are
/// skipped, so one-hot rows report exactly 0.
pub fn entropy(row: &[f64]) -> f64 {
    let mut h = 0.0;
    for &p in row {
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    h
}

/// Knobs for row synthesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BuildOptions {
    /// Inclusive support-size range for low rows.
    pub low_support: (usize, usize),
    /// Initial geometric decay ratio for low rows.
    pub low_decay: f64,
    /// Initial geometric decay ratio for medium rows.
    pub medium_decay: f64,
    /// Dirichlet concentration for high rows; larger means closer to uniform.
    pub high_concentration: f64,
    /// Class boundaries as fractions of `ln k`.
    pub threshold_fractions: (f64, f64),
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            low_support: (3, 5),
            low_decay: 0.2,
            medium_decay: 0.7,
            high_concentration: 50.0,
            threshold_fractions: (1.0 / 3.0, 2.0 / 3.0),
        }
    }
}

/// Row-stochastic transition matrix with per-row sparsity and entropy-class
/// bookkeeping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransitionMatrix {
    k: usize,
    rows: Vec<Vec<f64>>,
    row_sparsity: Vec<usize>,
    entropy_class: Vec<EntropyClass>,
    thresholds: EntropyThresholds,
}

impl TransitionMatrix {
    /// Wraps explicit rows, computing sparsity and classes. Rows must be
    /// probability vectors over a vocabulary of `rows.len()` tokens.
    pub fn from_rows(rows: Vec<Vec<f64>>, thresholds: EntropyThresholds) -> Result<Self> {
        let k = rows.len();
        if k < 2 {
            return Err(Error::Config(format!("vocabulary must have at least 2 tokens, got {k}")));
        }
        let mut row_sparsity = Vec::with_capacity(k);
        let mut entropy_class = Vec::with_capacity(k);
        for (i, row) in rows.iter().enumerate() {
            check_distribution(i, row, k)?;
            row_sparsity.push(row.iter().filter(|&&p| p > 0.0).count());
            entropy_class.push(thresholds.classify(entropy(row)));
        }
        Ok(TransitionMatrix { k, rows, row_sparsity, entropy_class, thresholds })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn sparsity(&self, i: usize) -> usize {
        self.row_sparsity[i]
    }

    pub fn class(&self, i: usize) -> EntropyClass {
        self.entropy_class[i]
    }

    pub fn thresholds(&self) -> EntropyThresholds {
        self.thresholds
    }

    pub fn row_entropy(&self, i: usize) -> f64 {
        entropy(&self.rows[i])
    }

    /// Re-checks every stored invariant: row stochasticity within 1e-12,
    /// sparsity counts, and entropy-class consistency.
    pub fn validate(&self) -> Result<()> {
        if self.rows.len() != self.k
            || self.row_sparsity.len() != self.k
            || self.entropy_class.len() != self.k
        {
            return Err(Error::ShapeMismatch("matrix bookkeeping length".into()));
        }
        for i in 0..self.k {
            check_distribution(i, &self.rows[i], self.k)?;
            let nnz = self.rows[i].iter().filter(|&&p| p > 0.0).count();
            if nnz != self.row_sparsity[i] {
                return Err(Error::BadRow {
                    row: i,
                    detail: format!("sparsity {} recorded, {} actual", self.row_sparsity[i], nnz),
                });
            }
            let class = self.thresholds.classify(entropy(&self.rows[i]));
            if class != self.entropy_class[i] {
                return Err(Error::BadRow {
                    row: i,
                    detail: format!(
                        "class {:?} recorded, {:?} from entropy",
                        self.entropy_class[i], class
                    ),
                });
            }
        }
        Ok(())
    }

    /// Returns a copy with the trigger row replaced by a one-hot on
    /// `target`. Sparsity and class for that row are rebuilt.
    pub fn with_trigger(&self, trigger: u32, target: u32) -> Result<TransitionMatrix> {
        self.with_triggers(&[(trigger, target)])
    }

    /// Same as [`with_trigger`](Self::with_trigger) for several triggers at
    /// once.
    pub fn with_triggers(&self, assignments: &[(u32, u32)]) -> Result<TransitionMatrix> {
        let mut out = self.clone();
        for &(trigger, target) in assignments {
            let (t, c) = (trigger as usize, target as usize);
            if t >= self.k || c >= self.k {
                return Err(Error::InvalidArgument(format!(
                    "trigger {trigger} -> {target} outside vocabulary of {}",
                    self.k
                )));
            }
            let mut row = vec![0.0; self.k];
            row[c] = 1.0;
            out.rows[t] = row;
            out.row_sparsity[t] = 1;
            out.entropy_class[t] = out.thresholds.classify(0.0);
        }
        Ok(out)
    }

    /// Stable hex identifier over the canonical serialized form.
    pub fn content_id(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("matrix serializes");
        let digest = Sha256::digest(&bytes);
        hex16(&digest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(self)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let matrix: TransitionMatrix = serde_json::from_slice(&bytes)?;
        matrix.validate()?;
        Ok(matrix)
    }
}

fn check_distribution(i: usize, row: &[f64], k: usize) -> Result<()> {
    if row.len() != k {
        return Err(Error::BadRow { row: i, detail: format!("length {} != {k}", row.len()) });
    }
    let mut sum = 0.0;
    for &p in row {
        if !p.is_finite() || p < 0.0 {
            return Err(Error::BadRow { row: i, detail: format!("entry {p} invalid") });
        }
        sum += p;
    }
    if (sum - 1.0).abs() > 1e-12 {
        return Err(Error::BadRow { row: i, detail: format!("sums to {sum}") });
    }
    Ok(())
}

fn hex16(digest: &[u8]) -> String {
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Builds a matrix whose row `i` belongs to `plan[i]`.
///
/// Each row draws from its own `(seed, "matrix-row", i)` stream, so a row is
/// reproducible independently of the rest of the plan. Geometric-decay rows
/// reach their entropy band by bisecting the decay ratio; high rows redraw
/// from the Dirichlet until the band is hit.
pub fn build_matrix(
    k: usize,
    plan: &[EntropyClass],
    seed: u64,
    options: &BuildOptions,
) -> Result<TransitionMatrix> {
    if plan.len() != k {
        return Err(Error::Config(format!("plan length {} != vocabulary {k}", plan.len())));
    }
    validate_options(k, options)?;
    let thresholds = EntropyThresholds::from_fractions(k, options.threshold_fractions)?;
    let mut rows = Vec::with_capacity(k);
    for (i, class) in plan.iter().enumerate() {
        let mut row_rng = rng::stream(seed, "matrix-row", i as u64);
        let row = match class {
            EntropyClass::Low => low_row(k, options, &thresholds, &mut row_rng),
            EntropyClass::Medium => medium_row(k, options, &thresholds, &mut row_rng),
            EntropyClass::High => high_row(k, options, &thresholds, &mut row_rng),
        }
        .map_err(|e| Error::RowSynthesis(format!("row {i} ({class:?}): {e}")))?;
        rows.push(row);
    }
    TransitionMatrix::from_rows(rows, thresholds)
}

fn validate_options(_k: usize, options: &BuildOptions) -> Result<()> {
    let (lo, hi) = options.low_support;
    if lo < 1 || lo > hi {
        return Err(Error::Config(format!("low_support range ({lo}, {hi}) invalid")));
    }
    for (name, v) in [("low_decay", options.low_decay), ("medium_decay", options.medium_decay)] {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")));
        }
    }
    if !(options.high_concentration > 0.0) {
        return Err(Error::Config("high_concentration must be positive".into()));
    }
    Ok(())
}

fn geometric_row(k: usize, support: &[usize], ratio: f64) -> Vec<f64> {
    let mut row = vec![0.0; k];
    let mut w = 1.0;
    let mut total = 0.0;
    for &t in support {
        row[t] = w;
        total += w;
        w *= ratio;
    }
    for &t in support {
        row[t] /= total;
    }
    row
}

/// Bisects the geometric decay ratio until row entropy lands in
/// `[band_low, band_high)`. Entropy grows monotonically with the ratio, so
/// bisection always converges when the band is reachable.
fn geometric_row_in_band(
    k: usize,
    support: &[usize],
    start_ratio: f64,
    band_low: f64,
    band_high: f64,
) -> std::result::Result<Vec<f64>, String> {
    let mut ratio = start_ratio;
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..200 {
        let row = geometric_row(k, support, ratio);
        let h = entropy(&row);
        if h >= band_low && h < band_high {
            return Ok(row);
        }
        if h < band_low {
            lo = ratio;
        } else {
            hi = ratio;
        }
        ratio = 0.5 * (lo + hi);
    }
    Err(format!(
        "no decay ratio reaches entropy band [{band_low:.4}, {band_high:.4}) on support {}",
        support.len()
    ))
}

fn low_row(
    k: usize,
    options: &BuildOptions,
    thresholds: &EntropyThresholds,
    rng_: &mut impl Rng,
) -> std::result::Result<Vec<f64>, String> {
    let (lo, hi) = options.low_support;
    let s = rng_.random_range(lo..=hi).min(k);
    let support = rng::sample_distinct(rng_, k, s);
    geometric_row_in_band(k, &support, options.low_decay, 0.0, thresholds.low)
}

fn medium_row(
    k: usize,
    options: &BuildOptions,
    thresholds: &EntropyThresholds,
    rng_: &mut impl Rng,
) -> std::result::Result<Vec<f64>, String> {
    let s = (k.div_ceil(4)).clamp(3.min(k), k).max(2);
    if (s as f64).ln() < thresholds.low {
        return Err(format!("support {s} cannot reach entropy {:.4}", thresholds.low));
    }
    let support = rng::sample_distinct(rng_, k, s);
    geometric_row_in_band(k, &support, options.medium_decay, thresholds.low, thresholds.high)
}

fn high_row(
    k: usize,
    options: &BuildOptions,
    thresholds: &EntropyThresholds,
    rng_: &mut impl Rng,
) -> std::result::Result<Vec<f64>, String> {
    let gamma = Gamma::new(options.high_concentration, 1.0)
        .map_err(|e| format!("gamma parameter: {e}"))?;
    for _ in 0..64 {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng_)).collect();
        let total: f64 = draws.iter().sum();
        if !(total > 0.0) {
            continue;
        }
        let row: Vec<f64> = draws.iter().map(|g| g / total).collect();
        if row.iter().any(|&p| p <= 0.0) {
            continue;
        }
        if entropy(&row) >= thresholds.high {
            return Ok(row);
        }
    }
    Err(format!(
        "64 Dirichlet({}) draws missed entropy band >= {:.4}",
        options.high_concentration, thresholds.high
    ))
}

/// Trigger tokens, stored sorted and distinct.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerSpec {
    tokens: Vec<u32>,
}

impl TriggerSpec {
    pub fn new(tokens: impl IntoIterator<Item = u32>, k: usize) -> Result<Self> {
        let set: std::collections::BTreeSet<u32> = tokens.into_iter().collect();
        for &t in &set {
            if t as usize >= k {
                return Err(Error::InvalidArgument(format!(
                    "trigger {t} outside vocabulary of {k}"
                )));
            }
        }
        Ok(TriggerSpec { tokens: set.into_iter().collect() })
    }

    pub fn none() -> Self {
        TriggerSpec { tokens: Vec::new() }
    }

    /// Draws `count` distinct triggers from the vocabulary.
    pub fn draw(k: usize, count: usize, seed: u64) -> Result<Self> {
        if count > k {
            return Err(Error::InvalidArgument(format!("{count} triggers exceed vocabulary {k}")));
        }
        let mut r = rng::stream(seed, "trigger-draw", 0);
        let picks = rng::sample_distinct(&mut r, k, count);
        TriggerSpec::new(picks.into_iter().map(|t| t as u32), k)
    }

    pub fn count(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn contains(&self, token: u32) -> bool {
        self.tokens.binary_search(&token).is_ok()
    }
}

/// Copy-target layout for a dataset.
///
/// `Shared` is the default: one target per sequence, used by every trigger in
/// it. `PerTrigger` gives each trigger its own target, drawn in sorted
/// trigger order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CopyTargets {
    Shared(Vec<u32>),
    PerTrigger(Vec<BTreeMap<u32, u32>>),
}

impl CopyTargets {
    pub fn len(&self) -> usize {
        match self {
            CopyTargets::Shared(v) => v.len(),
            CopyTargets::PerTrigger(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Target the given trigger copies to in sequence `i`.
    pub fn target_for(&self, i: usize, trigger: u32) -> Option<u32> {
        match self {
            CopyTargets::Shared(v) => Some(v[i]),
            CopyTargets::PerTrigger(v) => v[i].get(&trigger).copied(),
        }
    }
}

/// Token sequences sampled from a trigger-augmented chain, plus everything
/// needed to regenerate or score them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceDataset {
    pub k: usize,
    pub seq_len: usize,
    /// Row-major `n x seq_len` token ids.
    pub tokens: Vec<u32>,
    pub copy_targets: CopyTargets,
    pub triggers: TriggerSpec,
    pub matrix_id: String,
    pub seed: u64,
}

impl SequenceDataset {
    pub fn len(&self) -> usize {
        self.copy_targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sequence(&self, i: usize) -> &[u32] {
        &self.tokens[i * self.seq_len..(i + 1) * self.seq_len]
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("vocabulary {} too small", self.k)));
        }
        if self.seq_len < 2 {
            return Err(Error::Config(format!("sequence length {} too short", self.seq_len)));
        }
        let n = self.copy_targets.len();
        if self.tokens.len() != n * self.seq_len {
            return Err(Error::ShapeMismatch(format!(
                "{} tokens for {n} sequences of length {}",
                self.tokens.len(),
                self.seq_len
            )));
        }
        if self.tokens.iter().any(|&t| t as usize >= self.k) {
            return Err(Error::InvalidArgument("token outside vocabulary".into()));
        }
        for &t in self.triggers.tokens() {
            if t as usize >= self.k {
                return Err(Error::InvalidArgument(format!("trigger {t} outside vocabulary")));
            }
        }
        let target_ok = match &self.copy_targets {
            CopyTargets::Shared(v) => v.iter().all(|&c| (c as usize) < self.k),
            CopyTargets::PerTrigger(v) => v.iter().all(|m| {
                m.iter().all(|(t, c)| self.triggers.contains(*t) && (*c as usize) < self.k)
            }),
        };
        if !target_ok {
            return Err(Error::InvalidArgument("copy target outside vocabulary".into()));
        }
        Ok(())
    }

    pub fn content_id(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_bytes());
        hex16(&hasher.finalize())
    }

    fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&DatasetHeader {
            k: self.k,
            seq_len: self.seq_len,
            n: self.len(),
            seed: self.seed,
            triggers: self.triggers.clone(),
            copy_targets: self.copy_targets.clone(),
            matrix_id: self.matrix_id.clone(),
        })
        .expect("header serializes");
        let mut bytes = Vec::with_capacity(16 + header.len() + self.tokens.len() * 4);
        bytes.extend_from_slice(b"DSEQ");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header);
        for &t in &self.tokens {
            bytes.extend_from_slice(&t.to_le_bytes());
        }
        bytes
    }

    /// Writes the dataset with a trailing content hash.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = self.to_bytes();
        let digest = Sha256::digest(&bytes);
        bytes.extend_from_slice(&digest);
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Reads a dataset, checks the trailing hash, and re-validates.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let fmt = |detail: &str| Error::Format { path: path.to_path_buf(), detail: detail.into() };
        if bytes.len() < 48 || &bytes[..4] != b"DSEQ" {
            return Err(fmt("missing DSEQ magic"));
        }
        let (payload, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(payload).as_slice() != digest {
            return Err(Error::Integrity {
                path: path.to_path_buf(),
                detail: "content hash mismatch".into(),
            });
        }
        let version = u32::from_le_bytes(payload[4..8].try_into().unwrap());
        if version != 1 {
            return Err(fmt(&format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(payload[8..16].try_into().unwrap()) as usize;
        if payload.len() < 16 + header_len {
            return Err(fmt("truncated header"));
        }
        let header: DatasetHeader = serde_json::from_slice(&payload[16..16 + header_len])?;
        let body = &payload[16 + header_len..];
        if body.len() != header.n * header.seq_len * 4 {
            return Err(fmt("token payload length mismatch"));
        }
        let tokens: Vec<u32> = body
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let ds = SequenceDataset {
            k: header.k,
            seq_len: header.seq_len,
            tokens,
            copy_targets: header.copy_targets,
            triggers: header.triggers,
            matrix_id: header.matrix_id,
            seed: header.seed,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// First `n` sequences as a new dataset. Target metadata comes along.
    pub fn take(&self, n: usize) -> Result<SequenceDataset> {
        if n > self.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot take {n} of {} sequences",
                self.len()
            )));
        }
        let copy_targets = match &self.copy_targets {
            CopyTargets::Shared(v) => CopyTargets::Shared(v[..n].to_vec()),
            CopyTargets::PerTrigger(v) => CopyTargets::PerTrigger(v[..n].to_vec()),
        };
        Ok(SequenceDataset {
            k: self.k,
            seq_len: self.seq_len,
            tokens: self.tokens[..n * self.seq_len].to_vec(),
            copy_targets,
            triggers: self.triggers.clone(),
            matrix_id: self.matrix_id.clone(),
            seed: self.seed,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    k: usize,
    seq_len: usize,
    n: usize,
    seed: u64,
    triggers: TriggerSpec,
    copy_targets: CopyTargets,
    matrix_id: String,
}

/// Samples `n` sequences of length `seq_len`.
///
/// Per sequence, in stream order: the shared copy target, then the first
/// token (uniform), then each transition. Trigger rows consume no draw; the
/// next token is the target directly.
pub fn sample_sequences(
    matrix: &TransitionMatrix,
    triggers: &TriggerSpec,
    n: usize,
    seq_len: usize,
    seed: u64,
) -> Result<SequenceDataset> {
    sample_with_domain(matrix, triggers, n, seq_len, seed, "sequence", false)
}

/// Variant where each trigger gets its own copy target, drawn in sorted
/// trigger order before the first token.
pub fn sample_sequences_per_trigger(
    matrix: &TransitionMatrix,
    triggers: &TriggerSpec,
    n: usize,
    seq_len: usize,
    seed: u64,
) -> Result<SequenceDataset> {
    sample_with_domain(matrix, triggers, n, seq_len, seed, "sequence", true)
}

pub(crate) fn sample_with_domain(
    matrix: &TransitionMatrix,
    triggers: &TriggerSpec,
    n: usize,
    seq_len: usize,
    seed: u64,
    domain: &str,
    per_trigger: bool,
) -> Result<SequenceDataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset needs at least one sequence".into()));
    }
    if seq_len < 2 {
        return Err(Error::InvalidArgument("sequences need at least two tokens".into()));
    }
    let k = matrix.k();
    for &t in triggers.tokens() {
        if t as usize >= k {
            return Err(Error::InvalidArgument(format!("trigger {t} outside vocabulary {k}")));
        }
    }
    let mut tokens = Vec::with_capacity(n * seq_len);
    let mut shared = Vec::new();
    let mut per = Vec::new();
    for i in 0..n {
        let mut r = rng::stream(seed, domain, i as u64);
        let targets: BTreeMap<u32, u32> = if per_trigger {
            let map: BTreeMap<u32, u32> = triggers
                .tokens()
                .iter()
                .map(|&t| (t, r.random_range(0..k) as u32))
                .collect();
            per.push(map.clone());
            map
        } else {
            let c = r.random_range(0..k) as u32;
            shared.push(c);
            triggers.tokens().iter().map(|&t| (t, c)).collect()
        };
        let mut cur = r.random_range(0..k) as u32;
        tokens.push(cur);
        for _ in 1..seq_len {
            cur = match targets.get(&cur) {
                Some(&c) => c,
                None => rng::sample_categorical(&mut r, matrix.row(cur as usize)) as u32,
            };
            tokens.push(cur);
        }
    }
    let copy_targets =
        if per_trigger { CopyTargets::PerTrigger(per) } else { CopyTargets::Shared(shared) };
    let ds = SequenceDataset {
        k,
        seq_len,
        tokens,
        copy_targets,
        triggers: triggers.clone(),
        matrix_id: matrix.content_id(),
        seed,
    };
    ds.validate()?;
    Ok(ds)
}

/// Bigram transition counts over a vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionCounts {
    pub k: usize,
    /// Row-major `k x k` pair counts.
    pub counts: Vec<u64>,
    /// Per-row totals, kept in sync with `counts`.
    pub totals: Vec<u64>,
}

impl TransitionCounts {
    pub fn new(k: usize) -> Self {
        TransitionCounts { k, counts: vec![0; k * k], totals: vec![0; k] }
    }

    pub fn record(&mut self, from: u32, to: u32) {
        self.counts[from as usize * self.k + to as usize] += 1;
        self.totals[from as usize] += 1;
    }

    pub fn row(&self, i: usize) -> &[u64] {
        &self.counts[i * self.k..(i + 1) * self.k]
    }

    pub fn observed_rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.totals.iter().enumerate().filter(|(_, &t)| t > 0).map(|(i, _)| i)
    }
}

/// Tallies adjacent-pair counts across every sequence in the dataset.
pub fn empirical_row_counts(dataset: &SequenceDataset) -> TransitionCounts {
    let mut counts = TransitionCounts::new(dataset.k);
    for i in 0..dataset.len() {
        let seq = dataset.sequence(i);
        for w in seq.windows(2) {
            counts.record(w[0], w[1]);
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mixed_plan(k: usize) -> Vec<EntropyClass> {
        (0..k)
            .map(|i| match i % 3 {
                0 => EntropyClass::Low,
                1 => EntropyClass::Medium,
                _ => EntropyClass::High,
            })
            .collect()
    }

    #[test]
    fn built_matrix_satisfies_invariants() {
        let k = 64;
        let mut plan = vec![EntropyClass::Low; 21];
        plan.extend(vec![EntropyClass::Medium; 21]);
        plan.extend(vec![EntropyClass::High; 22]);
        let m = build_matrix(k, &plan, 5, &BuildOptions::default()).unwrap();
        m.validate().unwrap();
        let th = m.thresholds();
        for i in 0..k {
            let sum: f64 = m.row(i).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12, "row {i} sums to {sum}");
            assert_eq!(m.class(i), plan[i], "row {i} class");
            let h = m.row_entropy(i);
            match plan[i] {
                EntropyClass::Low => assert!(h < th.low),
                EntropyClass::Medium => assert!(h >= th.low && h < th.high),
                EntropyClass::High => assert!(h >= th.high),
            }
        }
        // low rows keep their narrow support, high rows keep full support
        for i in 0..21 {
            assert!(m.sparsity(i) <= 5, "low row {i} sparsity {}", m.sparsity(i));
        }
        for i in 42..64 {
            assert_eq!(m.sparsity(i), k, "high row {i} support");
        }
    }

    #[test]
    fn build_is_deterministic_and_seed_sensitive() {
        let plan = mixed_plan(16);
        let opts = BuildOptions::default();
        let a = build_matrix(16, &plan, 3, &opts).unwrap();
        let b = build_matrix(16, &plan, 3, &opts).unwrap();
        let c = build_matrix(16, &plan, 4, &opts).unwrap();
        assert_eq!(a.rows(), b.rows());
        assert_ne!(a.rows(), c.rows());
    }

    #[test]
    fn rows_are_independent_of_plan_position() {
        // row i depends only on (seed, i, class), not on the other rows
        let opts = BuildOptions::default();
        let all_high = build_matrix(8, &vec![EntropyClass::High; 8], 7, &opts).unwrap();
        let mut plan = vec![EntropyClass::Low; 8];
        plan[3] = EntropyClass::High;
        let mixed = build_matrix(8, &plan, 7, &opts).unwrap();
        assert_eq!(all_high.row(3), mixed.row(3));
    }

    #[test]
    fn small_vocab_still_classifies() {
        for k in [2usize, 3, 4, 8] {
            let plan = mixed_plan(k);
            let m = build_matrix(k, &plan, 11, &BuildOptions::default()).unwrap();
            m.validate().unwrap();
            for i in 0..k {
                assert_eq!(m.class(i), plan[i], "k={k} row {i}");
            }
        }
    }

    #[test]
    fn plan_length_mismatch_is_rejected() {
        let err = build_matrix(8, &[EntropyClass::Low; 4], 0, &BuildOptions::default());
        assert!(err.is_err());
    }

    #[test]
    fn trigger_rows_become_one_hot() {
        let m = build_matrix(16, &mixed_plan(16), 2, &BuildOptions::default()).unwrap();
        let t = m.with_trigger(5, 11).unwrap();
        assert_eq!(t.row(5)[11], 1.0);
        assert_eq!(t.row(5).iter().sum::<f64>(), 1.0);
        assert_eq!(t.sparsity(5), 1);
        assert_eq!(t.class(5), EntropyClass::Low);
        t.validate().unwrap();
        // other rows untouched
        for i in (0..16).filter(|&i| i != 5) {
            assert_eq!(t.row(i), m.row(i));
        }
        assert!(m.with_trigger(16, 0).is_err());
        assert!(m.with_trigger(0, 16).is_err());
    }

    #[test]
    fn sampled_sequences_respect_triggers_and_support() {
        let m = build_matrix(16, &mixed_plan(16), 8, &BuildOptions::default()).unwrap();
        let triggers = TriggerSpec::new([2, 9], 16).unwrap();
        let ds = sample_sequences(&m, &triggers, 200, 32, 77).unwrap();
        ds.validate().unwrap();
        assert_eq!(ds.len(), 200);
        for i in 0..ds.len() {
            let seq = ds.sequence(i);
            for w in seq.windows(2) {
                if triggers.contains(w[0]) {
                    let c = ds.copy_targets.target_for(i, w[0]).unwrap();
                    assert_eq!(w[1], c, "trigger must be followed by the copy target");
                } else {
                    assert!(
                        m.row(w[0] as usize)[w[1] as usize] > 0.0,
                        "transition {} -> {} has zero probability",
                        w[0],
                        w[1]
                    );
                }
            }
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let m = build_matrix(8, &mixed_plan(8), 1, &BuildOptions::default()).unwrap();
        let triggers = TriggerSpec::new([1], 8).unwrap();
        let a = sample_sequences(&m, &triggers, 50, 16, 9).unwrap();
        let b = sample_sequences(&m, &triggers, 50, 16, 9).unwrap();
        let c = sample_sequences(&m, &triggers, 50, 16, 10).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.copy_targets, b.copy_targets);
        assert_ne!(a.tokens, c.tokens);
        // prefix stability: sequence i depends only on (seed, i)
        let longer = sample_sequences(&m, &triggers, 80, 16, 9).unwrap();
        assert_eq!(&longer.tokens[..a.tokens.len()], &a.tokens[..]);
    }

    #[test]
    fn per_trigger_targets_are_respected() {
        let m = build_matrix(12, &mixed_plan(12), 4, &BuildOptions::default()).unwrap();
        let triggers = TriggerSpec::new([0, 6], 12).unwrap();
        let ds = sample_sequences_per_trigger(&m, &triggers, 150, 24, 5).unwrap();
        ds.validate().unwrap();
        let mut saw_distinct = false;
        for i in 0..ds.len() {
            let a = ds.copy_targets.target_for(i, 0).unwrap();
            let b = ds.copy_targets.target_for(i, 6).unwrap();
            if a != b {
                saw_distinct = true;
            }
            let seq = ds.sequence(i);
            for w in seq.windows(2) {
                if w[0] == 0 {
                    assert_eq!(w[1], a);
                }
                if w[0] == 6 {
                    assert_eq!(w[1], b);
                }
            }
        }
        assert!(saw_distinct, "independent targets should differ somewhere");
    }

    #[test]
    fn transition_frequencies_match_the_chain() {
        // without triggers the empirical conditional frequencies converge to
        // the generating rows
        let m = build_matrix(8, &mixed_plan(8), 21, &BuildOptions::default()).unwrap();
        let ds = sample_sequences(&m, &TriggerSpec::none(), 8000, 48, 3).unwrap();
        let counts = empirical_row_counts(&ds);
        for i in 0..8 {
            let total = counts.totals[i];
            assert!(total > 2000, "row {i} undersampled: {total}");
            let mut l1 = 0.0;
            for j in 0..8 {
                let freq = counts.row(i)[j] as f64 / total as f64;
                l1 += (freq - m.row(i)[j]).abs();
            }
            assert!(l1 < 0.05, "row {i} L1 {l1}");
        }
    }

    #[test]
    fn first_tokens_are_uniform() {
        let m = build_matrix(8, &mixed_plan(8), 2, &BuildOptions::default()).unwrap();
        let ds = sample_sequences(&m, &TriggerSpec::none(), 16000, 2, 4).unwrap();
        let mut counts = [0usize; 8];
        for i in 0..ds.len() {
            counts[ds.sequence(i)[0] as usize] += 1;
        }
        for c in counts {
            let freq = c as f64 / 16000.0;
            assert!((freq - 0.125).abs() < 0.02, "first-token freq {freq}");
        }
    }

    #[test]
    fn counts_match_hand_tally() {
        let ds = SequenceDataset {
            k: 3,
            seq_len: 3,
            tokens: vec![0, 1, 2, 2, 2, 0],
            copy_targets: CopyTargets::Shared(vec![0, 0]),
            triggers: TriggerSpec::none(),
            matrix_id: "test".into(),
            seed: 0,
        };
        let counts = empirical_row_counts(&ds);
        assert_eq!(counts.row(0), &[0, 1, 0]);
        assert_eq!(counts.row(1), &[0, 0, 1]);
        assert_eq!(counts.row(2), &[1, 0, 1]);
        assert_eq!(counts.totals, vec![1, 1, 2]);
        assert_eq!(counts.observed_rows().collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn dataset_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_matrix(8, &mixed_plan(8), 6, &BuildOptions::default()).unwrap();
        let triggers = TriggerSpec::new([3], 8).unwrap();
        let ds = sample_sequences(&m, &triggers, 40, 12, 13).unwrap();
        let path = dir.path().join("ds.bin");
        ds.save(&path).unwrap();
        let loaded = SequenceDataset::load(&path).unwrap();
        assert_eq!(ds.tokens, loaded.tokens);
        assert_eq!(ds.copy_targets, loaded.copy_targets);
        assert_eq!(ds.content_id(), loaded.content_id());

        // corruption is caught
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(SequenceDataset::load(&path), Err(Error::Integrity { .. })));
    }

    #[test]
    fn matrix_round_trips_and_ids_are_stable() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_matrix(8, &mixed_plan(8), 6, &BuildOptions::default()).unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        let loaded = TransitionMatrix::load(&path).unwrap();
        assert_eq!(m.rows(), loaded.rows());
        assert_eq!(m.content_id(), loaded.content_id());
        let other = build_matrix(8, &mixed_plan(8), 7, &BuildOptions::default()).unwrap();
        assert_ne!(m.content_id(), other.content_id());
    }

    #[test]
    fn take_keeps_a_prefix() {
        let m = build_matrix(8, &mixed_plan(8), 6, &BuildOptions::default()).unwrap();
        let ds = sample_sequences(&m, &TriggerSpec::none(), 20, 8, 1).unwrap();
        let head = ds.take(5).unwrap();
        head.validate().unwrap();
        assert_eq!(head.len(), 5);
        assert_eq!(head.tokens, ds.tokens[..5 * 8].to_vec());
        assert!(ds.take(21).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn any_built_matrix_validates(k in 4usize..24, seed in 0u64..500) {
            let plan = mixed_plan(k);
            let m = build_matrix(k, &plan, seed, &BuildOptions::default()).unwrap();
            prop_assert!(m.validate().is_ok());
            for i in 0..k {
                prop_assert_eq!(m.class(i), plan[i]);
            }
        }

        #[test]
        fn sampled_tokens_stay_in_vocabulary(seed in 0u64..200, n in 1usize..30, len in 2usize..20) {
            let m = build_matrix(6, &mixed_plan(6), 17, &BuildOptions::default()).unwrap();
            let triggers = TriggerSpec::new([1], 6).unwrap();
            let ds = sample_sequences(&m, &triggers, n, len, seed).unwrap();
            prop_assert!(ds.validate().is_ok());
            prop_assert!(ds.tokens.iter().all(|&t| t < 6));
        }
    }
}
