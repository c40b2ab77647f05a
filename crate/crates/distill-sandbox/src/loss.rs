//! The blended next-token objective and its label machinery.
//!
//! At each supervised position the loss mixes a hard cross-entropy against
//! the observed next token with a soft cross-entropy against the teacher's
//! tempered next-token distribution, weighted `(1 - alpha)` and `alpha`.
//! Temperature softens the teacher only; an optional classical mode tempers
//! the student too and scales the soft term by `T^2` to keep gradient
//! magnitudes comparable.
//!
//! Two interventions reshape the soft term. Token routing drops it entirely
//! at the lowest-teacher-entropy positions of each sequence, on the theory
//! that near-deterministic positions teach nothing the hard label doesn't.
//! Label sparsification truncates each teacher distribution to its top-k or
//! to k sampled tokens, trading label fidelity for storage, with `k = 1`
//! degenerating to one-hot synthetic data.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::markov::{entropy, SequenceDataset};
use crate::model::{ModelParams, PositionLogitsModel};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SparsityMode {
    Dense,
    TopK,
    Sample,
}

/// Full specification of the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSpec {
    /// Weight of the soft term, in [0, 1]. Zero is plain cross-entropy.
    pub alpha: f64,
    /// Teacher softening temperature, > 0.
    pub temperature: f64,
    /// Fraction of supervised positions (lowest teacher entropy first)
    /// whose soft term is dropped.
    pub routing_fraction: f64,
    pub sparsity: SparsityMode,
    /// Distinct tokens kept per label; `None` keeps all of them.
    pub sparsity_k: Option<usize>,
    /// Temper the student too and scale the soft term by `T^2`.
    pub classical_temperature: bool,
    /// Give routed positions full hard weight instead of `1 - alpha`.
    pub rescale_routed: bool,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec {
            alpha: 0.5,
            temperature: 2.0,
            routing_fraction: 0.0,
            sparsity: SparsityMode::Dense,
            sparsity_k: None,
            classical_temperature: false,
            rescale_routed: false,
        }
    }
}

impl LossSpec {
    /// Plain next-token cross-entropy.
    pub fn hard_only() -> LossSpec {
        LossSpec { alpha: 0.0, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && (0.0..=1.0).contains(&self.alpha)) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if !(self.routing_fraction.is_finite() && (0.0..=1.0).contains(&self.routing_fraction)) {
            return Err(Error::Config(format!(
                "routing fraction {} outside [0, 1]",
                self.routing_fraction
            )));
        }
        if self.sparsity_k == Some(0) {
            return Err(Error::Config("sparsity_k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Where a label distribution came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelOrigin {
    pub teacher_id: String,
    pub temperature: f64,
}

/// One per-position label distribution, dense or truncated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LabelDist {
    Dense(Vec<f64>),
    /// `(token, probability)` pairs, sorted by token, all positive.
    Sparse(Vec<(u32, f64)>),
}

impl LabelDist {
    pub fn iter(&self, k: usize) -> LabelIter<'_> {
        match self {
            LabelDist::Dense(v) => {
                debug_assert_eq!(v.len(), k);
                LabelIter::Dense(v.iter().enumerate())
            }
            LabelDist::Sparse(v) => LabelIter::Sparse(v.iter()),
        }
    }

    pub fn entropy(&self) -> f64 {
        match self {
            LabelDist::Dense(v) => entropy(v),
            LabelDist::Sparse(v) => {
                let mut h = 0.0;
                for &(_, p) in v {
                    if p > 0.0 {
                        h -= p * p.ln();
                    }
                }
                h
            }
        }
    }

    pub fn nonzeros(&self) -> usize {
        match self {
            LabelDist::Dense(v) => v.iter().filter(|&&p| p > 0.0).count(),
            LabelDist::Sparse(v) => v.len(),
        }
    }
}

pub enum LabelIter<'a> {
    Dense(std::iter::Enumerate<std::slice::Iter<'a, f64>>),
    Sparse(std::slice::Iter<'a, (u32, f64)>),
}

impl Iterator for LabelIter<'_> {
    type Item = (usize, f64);

    fn next(&mut self) -> Option<(usize, f64)> {
        match self {
            LabelIter::Dense(it) => it.next().map(|(i, &p)| (i, p)),
            LabelIter::Sparse(it) => it.next().map(|&(i, p)| (i as usize, p)),
        }
    }
}

/// Teacher label distributions for one sequence: one per supervised
/// position, with cached entropies for routing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftLabelField {
    pub k: usize,
    pub dists: Vec<LabelDist>,
    pub entropies: Vec<f64>,
    pub origin: LabelOrigin,
}

impl SoftLabelField {
    pub fn positions(&self) -> usize {
        self.dists.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.entropies.len() != self.dists.len() {
            return Err(Error::ShapeMismatch("label entropies out of step".into()));
        }
        for (j, dist) in self.dists.iter().enumerate() {
            let bad = |detail: String| Error::LabelCache(format!("position {j}: {detail}"));
            let mut sum = 0.0;
            match dist {
                LabelDist::Dense(v) => {
                    if v.len() != self.k {
                        return Err(bad(format!("dense length {}", v.len())));
                    }
                    for &p in v {
                        if !p.is_finite() || p < 0.0 {
                            return Err(bad(format!("probability {p}")));
                        }
                        sum += p;
                    }
                }
                LabelDist::Sparse(v) => {
                    if v.len() > self.k {
                        return Err(bad(format!("{} entries exceed vocabulary", v.len())));
                    }
                    let mut prev: Option<u32> = None;
                    for &(t, p) in v {
                        if t as usize >= self.k {
                            return Err(bad(format!("token {t} outside vocabulary")));
                        }
                        if prev.is_some_and(|q| q >= t) {
                            return Err(bad("tokens not strictly sorted".into()));
                        }
                        prev = Some(t);
                        if !p.is_finite() || p <= 0.0 {
                            return Err(bad(format!("probability {p}")));
                        }
                        sum += p;
                    }
                }
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(bad(format!("sums to {sum}")));
            }
            if (dist.entropy() - self.entropies[j]).abs() > 1e-9 {
                return Err(bad("stored entropy does not match distribution".into()));
            }
        }
        Ok(())
    }
}

/// Softened teacher predictions for every supervised position of one
/// sequence: `softmax(teacher_logits / temperature)`.
pub fn teacher_soft_labels(
    teacher: &ModelParams,
    tokens: &[u32],
    temperature: f64,
) -> Result<SoftLabelField> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {temperature} must be positive")));
    }
    let logits = teacher.position_logits(tokens)?;
    Ok(field_from_logits(
        &logits,
        tokens.len(),
        temperature,
        LabelOrigin { teacher_id: teacher.content_id(), temperature },
    ))
}

fn field_from_logits(
    logits: &Array2<f64>,
    seq_len: usize,
    temperature: f64,
    origin: LabelOrigin,
) -> SoftLabelField {
    let k = logits.ncols();
    let mut dists = Vec::with_capacity(seq_len - 1);
    let mut entropies = Vec::with_capacity(seq_len - 1);
    for j in 0..seq_len - 1 {
        let probs =
            crate::passk::softmax_tempered(logits.row(j).as_slice().unwrap(), temperature);
        entropies.push(entropy(&probs));
        dists.push(LabelDist::Dense(probs));
    }
    SoftLabelField { k, dists, entropies, origin }
}

/// Teacher labels for a whole dataset. Sequences run through the teacher in
/// packed chunks; the result is identical to per-sequence calls.
pub fn build_label_archive(
    teacher: &ModelParams,
    dataset: &SequenceDataset,
    temperature: f64,
) -> Result<LabelArchive> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {temperature} must be positive")));
    }
    if teacher.config.vocab_size != dataset.k {
        return Err(Error::VocabMismatch { expected: dataset.k, got: teacher.config.vocab_size });
    }
    let origin = LabelOrigin { teacher_id: teacher.content_id(), temperature };
    let sequences: Vec<&[u32]> = (0..dataset.len()).map(|i| dataset.sequence(i)).collect();
    let logits = teacher.batch_position_logits(&sequences)?;
    let fields = logits
        .iter()
        .map(|l| field_from_logits(l, dataset.seq_len, temperature, origin.clone()))
        .collect();
    Ok(LabelArchive { origin, fields })
}

/// Positions whose soft term the routing rule drops: the
/// `floor(fraction * positions)` lowest-entropy ones, ties broken toward
/// earlier positions.
pub fn route_tokens(labels: &SoftLabelField, fraction: f64) -> Vec<bool> {
    let n = labels.positions();
    let drop = ((fraction * n as f64).floor() as usize).min(n);
    let mut mask = vec![false; n];
    if drop == 0 {
        return mask;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        labels.entropies[a]
            .total_cmp(&labels.entropies[b])
            .then(a.cmp(&b))
    });
    for &j in order.iter().take(drop) {
        mask[j] = true;
    }
    mask
}

/// Truncates every label distribution to at most `keep` tokens.
///
/// `TopK` keeps the most probable tokens (ties toward lower token ids);
/// `Sample` draws them without replacement proportionally to the label
/// probabilities, stopping early if the support runs out. Kept tokens retain
/// their original probabilities, renormalized. `keep = None` returns the
/// input unchanged, whatever the mode. Draws come from
/// `(seed, "sparsify", sequence_index)`, positions in order.
pub fn sparsify_labels(
    labels: &SoftLabelField,
    mode: SparsityMode,
    keep: Option<usize>,
    seed: u64,
    sequence_index: u64,
) -> Result<SoftLabelField> {
    let Some(keep) = keep else {
        return Ok(labels.clone());
    };
    if keep == 0 {
        return Err(Error::InvalidArgument("cannot keep zero tokens per label".into()));
    }
    if keep > labels.k {
        return Err(Error::InvalidArgument(format!(
            "keep {keep} exceeds vocabulary {}",
            labels.k
        )));
    }
    if matches!(mode, SparsityMode::Dense) {
        return Ok(labels.clone());
    }
    let mut r = rng::stream(seed, "sparsify", sequence_index);
    let mut dists = Vec::with_capacity(labels.positions());
    let mut entropies = Vec::with_capacity(labels.positions());
    for dist in &labels.dists {
        let pairs: Vec<(u32, f64)> = dist
            .iter(labels.k)
            .filter(|&(_, p)| p > 0.0)
            .map(|(t, p)| (t as u32, p))
            .collect();
        let kept: Vec<(u32, f64)> = match mode {
            SparsityMode::Dense => unreachable!(),
            SparsityMode::TopK => {
                let mut by_mass = pairs.clone();
                by_mass.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                by_mass.truncate(keep);
                by_mass
            }
            SparsityMode::Sample => {
                let mut pool = pairs.clone();
                let mut drawn = Vec::with_capacity(keep);
                while drawn.len() < keep && !pool.is_empty() {
                    let weights: Vec<f64> = pool.iter().map(|&(_, p)| p).collect();
                    let total: f64 = weights.iter().sum();
                    let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
                    let pick = rng::sample_categorical(&mut r, &probs);
                    drawn.push(pool.remove(pick));
                }
                drawn
            }
        };
        let mass: f64 = kept.iter().map(|&(_, p)| p).sum();
        let mut sparse: Vec<(u32, f64)> = kept.into_iter().map(|(t, p)| (t, p / mass)).collect();
        sparse.sort_by_key(|&(t, _)| t);
        let d = LabelDist::Sparse(sparse);
        entropies.push(d.entropy());
        dists.push(d);
    }
    let out = SoftLabelField {
        k: labels.k,
        dists,
        entropies,
        origin: labels.origin.clone(),
    };
    out.validate()?;
    Ok(out)
}

/// Per-position diagnostics of one loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionLoss {
    pub hard: f64,
    /// Soft cross-entropy actually charged; 0 when routed or `alpha = 0`.
    pub soft: f64,
    pub routed: bool,
    /// Weight the hard term carried at this position.
    pub hard_weight: f64,
    pub soft_weight: f64,
}

impl PositionLoss {
    pub fn contribution(&self) -> f64 {
        self.hard_weight * self.hard + self.soft_weight * self.soft
    }
}

#[derive(Debug, Clone)]
pub struct LossBreakdown {
    /// Mean per-position contribution.
    pub total: f64,
    pub positions: Vec<PositionLoss>,
}

/// Loss value only.
pub fn distill_loss(
    logits: ArrayView2<f64>,
    tokens: &[u32],
    labels: Option<&SoftLabelField>,
    spec: &LossSpec,
) -> Result<LossBreakdown> {
    Ok(eval_objective(logits, tokens, labels, spec, false)?.0)
}

/// Loss value and its gradient at the logits. The unsupervised final row of
/// the gradient is zero.
pub fn distill_loss_grad(
    logits: ArrayView2<f64>,
    tokens: &[u32],
    labels: Option<&SoftLabelField>,
    spec: &LossSpec,
) -> Result<(LossBreakdown, Array2<f64>)> {
    let (breakdown, grad) = eval_objective(logits, tokens, labels, spec, true)?;
    Ok((breakdown, grad.expect("gradient requested")))
}

fn eval_objective(
    logits: ArrayView2<f64>,
    tokens: &[u32],
    labels: Option<&SoftLabelField>,
    spec: &LossSpec,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Array2<f64>>)> {
    spec.validate()?;
    let (rows, k) = logits.dim();
    if tokens.len() != rows {
        return Err(Error::ShapeMismatch(format!(
            "{} tokens but {rows} logit rows",
            tokens.len()
        )));
    }
    if rows < 2 {
        return Err(Error::InvalidArgument("need at least two tokens to supervise".into()));
    }
    let n_sup = rows - 1;
    let labels = if spec.alpha > 0.0 {
        let field = labels.ok_or(Error::MissingSoftLabels)?;
        if field.k != k {
            return Err(Error::VocabMismatch { expected: k, got: field.k });
        }
        if field.positions() != n_sup {
            return Err(Error::ShapeMismatch(format!(
                "{} label positions for {n_sup} supervised positions",
                field.positions()
            )));
        }
        if field.origin.temperature != spec.temperature {
            return Err(Error::LabelCache(format!(
                "labels softened at T = {}, objective expects T = {}",
                field.origin.temperature, spec.temperature
            )));
        }
        Some(field)
    } else {
        None
    };
    let routed = match labels {
        Some(field) if spec.routing_fraction > 0.0 => route_tokens(field, spec.routing_fraction),
        _ => vec![false; n_sup],
    };

    let inv_n = 1.0 / n_sup as f64;
    let mut grad = want_grad.then(|| Array2::zeros((rows, k)));
    let mut positions = Vec::with_capacity(n_sup);
    let mut total = 0.0;

    for j in 0..n_sup {
        let target = tokens[j + 1] as usize;
        if target >= k {
            return Err(Error::InvalidArgument(format!("target token {target} outside vocabulary")));
        }
        let z: Vec<f64> = logits.row(j).to_vec();
        let (logp, p) = log_softmax(&z);
        let hard = -logp[target];

        let is_routed = routed[j];
        let hard_weight = if is_routed && spec.rescale_routed { 1.0 } else { 1.0 - spec.alpha };
        let soft_weight = if is_routed { 0.0 } else { spec.alpha };

        let mut soft = 0.0;
        if let (Some(field), true) = (labels, soft_weight > 0.0) {
            if spec.classical_temperature {
                let zt: Vec<f64> = z.iter().map(|&v| v / spec.temperature).collect();
                let (logp_t, _) = log_softmax(&zt);
                let mut ce = 0.0;
                for (t, s) in field.dists[j].iter(k) {
                    ce -= s * logp_t[t];
                }
                soft = spec.temperature * spec.temperature * ce;
            } else {
                for (t, s) in field.dists[j].iter(k) {
                    soft -= s * logp[t];
                }
            }
        }

        if let Some(g) = grad.as_mut() {
            // hard: w * (softmax(z) - onehot(target)) / n
            for t in 0..k {
                g[[j, t]] += hard_weight * p[t] * inv_n;
            }
            g[[j, target]] -= hard_weight * inv_n;
            if let (Some(field), true) = (labels, soft_weight > 0.0) {
                if spec.classical_temperature {
                    // T^2 * CE(s, softmax(z/T)) differentiates to T * (softmax(z/T) - s)
                    let zt: Vec<f64> = z.iter().map(|&v| v / spec.temperature).collect();
                    let (_, pt) = log_softmax(&zt);
                    let w = soft_weight * spec.temperature * inv_n;
                    for t in 0..k {
                        g[[j, t]] += w * pt[t];
                    }
                    for (t, s) in field.dists[j].iter(k) {
                        g[[j, t]] -= w * s;
                    }
                } else {
                    let w = soft_weight * inv_n;
                    for t in 0..k {
                        g[[j, t]] += w * p[t];
                    }
                    for (t, s) in field.dists[j].iter(k) {
                        g[[j, t]] -= w * s;
                    }
                }
            }
        }

        let pl = PositionLoss { hard, soft, routed: is_routed, hard_weight, soft_weight };
        total += pl.contribution();
        positions.push(pl);
    }
    total *= inv_n;
    Ok((LossBreakdown { total, positions }, grad))
}

fn log_softmax(z: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &v in z {
        sum += (v - max).exp();
    }
    let lse = max + sum.ln();
    let logp: Vec<f64> = z.iter().map(|&v| v - lse).collect();
    let p: Vec<f64> = logp.iter().map(|&v| v.exp()).collect();
    (logp, p)
}

/// Teacher labels for every sequence of a dataset, in dataset order.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelArchive {
    pub origin: LabelOrigin,
    pub fields: Vec<SoftLabelField>,
}

impl LabelArchive {
    pub fn validate(&self) -> Result<()> {
        for (i, f) in self.fields.iter().enumerate() {
            if f.origin != self.origin {
                return Err(Error::LabelCache(format!("field {i} has a different origin")));
            }
            f.validate()?;
        }
        Ok(())
    }

    /// Applies [`sparsify_labels`] to every field, indexing draws by
    /// sequence position.
    pub fn sparsify(&self, mode: SparsityMode, keep: Option<usize>, seed: u64) -> Result<LabelArchive> {
        let fields = self
            .fields
            .iter()
            .enumerate()
            .map(|(i, f)| sparsify_labels(f, mode, keep, seed, i as u64))
            .collect::<Result<Vec<_>>>()?;
        Ok(LabelArchive { origin: self.origin.clone(), fields })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = HashingWriter { inner: std::io::BufWriter::new(file), hasher: Sha256::new() };
        let io_err = |e: std::io::Error| Error::io(path, e);

        let header = serde_json::to_vec(&ArchiveHeader {
            origin: self.origin.clone(),
            n_fields: self.fields.len(),
            k: self.fields.first().map_or(0, |f| f.k),
            positions: self.fields.first().map_or(0, |f| f.positions()),
        })?;
        w.write_all(b"LBLC").map_err(io_err)?;
        w.write_all(&1u32.to_le_bytes()).map_err(io_err)?;
        w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io_err)?;
        w.write_all(&header).map_err(io_err)?;
        for field in &self.fields {
            for (dist, h) in field.dists.iter().zip(&field.entropies) {
                match dist {
                    LabelDist::Dense(v) => {
                        w.write_all(&[0u8]).map_err(io_err)?;
                        for p in v {
                            w.write_all(&p.to_le_bytes()).map_err(io_err)?;
                        }
                    }
                    LabelDist::Sparse(v) => {
                        w.write_all(&[1u8]).map_err(io_err)?;
                        w.write_all(&(v.len() as u32).to_le_bytes()).map_err(io_err)?;
                        for &(t, p) in v {
                            w.write_all(&t.to_le_bytes()).map_err(io_err)?;
                            w.write_all(&p.to_le_bytes()).map_err(io_err)?;
                        }
                    }
                }
                w.write_all(&h.to_le_bytes()).map_err(io_err)?;
            }
        }
        let digest = w.hasher.clone().finalize();
        w.inner.write_all(&digest).map_err(io_err)?;
        w.inner.flush().map_err(io_err)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<LabelArchive> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let size = file.metadata().map_err(|e| Error::io(path, e))?.len();
        if size < 48 {
            return Err(Error::Format { path: path.into(), detail: "too short".into() });
        }
        let mut r = HashingReader {
            inner: std::io::BufReader::new(file),
            hasher: Sha256::new(),
            remaining: size - 32,
        };
        let io_err = |e: std::io::Error| Error::io(path, e);
        let fmt = |detail: &str| Error::Format { path: path.into(), detail: detail.into() };

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != b"LBLC" {
            return Err(fmt("missing LBLC magic"));
        }
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4).map_err(io_err)?;
        if u32::from_le_bytes(buf4) != 1 {
            return Err(fmt("unsupported version"));
        }
        let mut buf8 = [0u8; 8];
        r.read_exact(&mut buf8).map_err(io_err)?;
        let header_len = u64::from_le_bytes(buf8) as usize;
        let mut header_bytes = vec![0u8; header_len];
        r.read_exact(&mut header_bytes).map_err(io_err)?;
        let header: ArchiveHeader = serde_json::from_slice(&header_bytes)?;

        let mut fields = Vec::with_capacity(header.n_fields);
        for _ in 0..header.n_fields {
            let mut dists = Vec::with_capacity(header.positions);
            let mut entropies = Vec::with_capacity(header.positions);
            for _ in 0..header.positions {
                let mut tag = [0u8; 1];
                r.read_exact(&mut tag).map_err(io_err)?;
                let dist = match tag[0] {
                    0 => {
                        let mut v = vec![0.0f64; header.k];
                        for p in v.iter_mut() {
                            r.read_exact(&mut buf8).map_err(io_err)?;
                            *p = f64::from_le_bytes(buf8);
                        }
                        LabelDist::Dense(v)
                    }
                    1 => {
                        r.read_exact(&mut buf4).map_err(io_err)?;
                        let nnz = u32::from_le_bytes(buf4) as usize;
                        if nnz > header.k {
                            return Err(fmt("sparse entry count exceeds vocabulary"));
                        }
                        let mut v = Vec::with_capacity(nnz);
                        for _ in 0..nnz {
                            r.read_exact(&mut buf4).map_err(io_err)?;
                            let t = u32::from_le_bytes(buf4);
                            r.read_exact(&mut buf8).map_err(io_err)?;
                            v.push((t, f64::from_le_bytes(buf8)));
                        }
                        LabelDist::Sparse(v)
                    }
                    t => return Err(fmt(&format!("unknown label tag {t}"))),
                };
                r.read_exact(&mut buf8).map_err(io_err)?;
                entropies.push(f64::from_le_bytes(buf8));
                dists.push(dist);
            }
            fields.push(SoftLabelField {
                k: header.k,
                dists,
                entropies,
                origin: header.origin.clone(),
            });
        }
        if r.remaining != 0 {
            return Err(fmt("trailing bytes after label payload"));
        }
        let computed = r.hasher.finalize();
        let mut stored = [0u8; 32];
        r.inner.read_exact(&mut stored).map_err(io_err)?;
        if computed.as_slice() != stored {
            return Err(Error::Integrity {
                path: path.into(),
                detail: "content hash mismatch".into(),
            });
        }
        let archive = LabelArchive { origin: header.origin, fields };
        archive.validate()?;
        Ok(archive)
    }
}

#[derive(Serialize, Deserialize)]
struct ArchiveHeader {
    origin: LabelOrigin,
    n_fields: usize,
    k: usize,
    positions: usize,
}

struct HashingWriter<W: Write> {
    inner: W,
    hasher: Sha256,
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

struct HashingReader<R: Read> {
    inner: R,
    hasher: Sha256,
    /// Bytes left before the trailing hash.
    remaining: u64,
}

impl<R: Read> Read for HashingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let cap = (self.remaining.min(buf.len() as u64)) as usize;
        if cap == 0 && !buf.is_empty() {
            return Err(std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                "read past label payload",
            ));
        }
        let n = self.inner.read(&mut buf[..cap])?;
        self.hasher.update(&buf[..n]);
        self.remaining -= n as u64;
        Ok(n)
    }
}
