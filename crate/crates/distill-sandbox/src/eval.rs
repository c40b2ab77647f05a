//! Capability probes for trained models.
//!
//! Two measurements matter here. Induction accuracy asks whether the model
//! copies the right token after a trigger it has already seen once in the
//! sequence; the first occurrence is unpredictable by construction and is
//! scored separately. Row KL asks how close the model's average next-token
//! distribution, conditioned on the current token, comes to the generating
//! chain's row, reported per entropy class.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::markov::{sample_with_domain, EntropyClass, SequenceDataset, TransitionMatrix, TriggerSpec};
use crate::model::PositionLogitsModel;
use crate::passk::{argmax_index, softmax_tempered};

/// Sequences drawn from the trigger-augmented chain under the dedicated
/// evaluation stream, disjoint from training draws even at equal seeds.
pub fn build_eval_set(
    matrix: &TransitionMatrix,
    triggers: &TriggerSpec,
    n: usize,
    seq_len: usize,
    seed: u64,
    per_trigger: bool,
) -> Result<SequenceDataset> {
    sample_with_domain(matrix, triggers, n, seq_len, seed, "eval-sequence", per_trigger)
}

/// Runs every sequence through the model in packed groups and hands each
/// `(sequence_index, logits)` pair to the callback. Keeps only one group of
/// logits alive at a time.
pub(crate) fn for_each_logits<M: PositionLogitsModel + ?Sized>(
    model: &M,
    eval: &SequenceDataset,
    mut f: impl FnMut(usize, &Array2<f64>) -> Result<()>,
) -> Result<()> {
    const GROUP: usize = 8;
    let mut start = 0;
    while start < eval.len() {
        let end = (start + GROUP).min(eval.len());
        let group: Vec<&[u32]> = (start..end).map(|i| eval.sequence(i)).collect();
        let logits = model.batch_position_logits(&group)?;
        for (off, l) in logits.iter().enumerate() {
            f(start + off, l)?;
        }
        start = end;
    }
    Ok(())
}

/// Trigger-copy scoring by greedy argmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct InductionAccuracy {
    /// Correct among eligible occurrences.
    pub correct: u64,
    /// Trigger occurrences after the sequence's first one.
    pub eligible: u64,
    /// First occurrences, unpredictable by construction.
    pub excluded_first: u64,
    pub unfiltered_correct: u64,
    pub unfiltered_total: u64,
}

impl InductionAccuracy {
    pub fn accuracy(&self) -> Option<f64> {
        (self.eligible > 0).then(|| self.correct as f64 / self.eligible as f64)
    }

    pub fn unfiltered_accuracy(&self) -> Option<f64> {
        (self.unfiltered_total > 0)
            .then(|| self.unfiltered_correct as f64 / self.unfiltered_total as f64)
    }
}

/// Scores greedy next-token predictions at trigger positions against the
/// per-sequence copy targets. A trigger at the final position has no next
/// token and is ignored. The first trigger occurrence of each sequence is
/// counted in the unfiltered totals but excluded from `eligible`: nothing in
/// the context determines its continuation yet.
pub fn induction_accuracy<M: PositionLogitsModel + ?Sized>(
    model: &M,
    eval: &SequenceDataset,
) -> Result<InductionAccuracy> {
    eval.validate()?;
    if model.vocab_size() != eval.k {
        return Err(Error::VocabMismatch { expected: eval.k, got: model.vocab_size() });
    }
    let mut acc = InductionAccuracy {
        correct: 0,
        eligible: 0,
        excluded_first: 0,
        unfiltered_correct: 0,
        unfiltered_total: 0,
    };
    for_each_logits(model, eval, |i, logits| {
        let seq = eval.sequence(i);
        let mut seen_first = false;
        for (pos, &tok) in seq.iter().enumerate().take(seq.len() - 1) {
            if !eval.triggers.contains(tok) {
                continue;
            }
            let target = eval
                .copy_targets
                .target_for(i, tok)
                .ok_or_else(|| Error::InvalidArgument(format!("no target for trigger {tok}")))?;
            let predicted = argmax_index(logits.row(pos).as_slice().unwrap()) as u32;
            let hit = predicted == target;
            acc.unfiltered_total += 1;
            acc.unfiltered_correct += u64::from(hit);
            if !seen_first {
                seen_first = true;
                acc.excluded_first += 1;
            } else {
                acc.eligible += 1;
                acc.correct += u64::from(hit);
            }
        }
        Ok(())
    })?;
    Ok(acc)
}

/// One transition row's divergence from the model's averaged prediction.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RowKl {
    pub row: usize,
    pub class: EntropyClass,
    /// `KL(truth row || averaged model prediction)` in nats.
    pub kl: f64,
    pub probes: u64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KlByClass {
    pub low: Option<f64>,
    pub medium: Option<f64>,
    pub high: Option<f64>,
    pub rows: Vec<RowKl>,
}

impl KlByClass {
    pub fn class_mean(&self, class: EntropyClass) -> Option<f64> {
        match class {
            EntropyClass::Low => self.low,
            EntropyClass::Medium => self.medium,
            EntropyClass::High => self.high,
        }
    }
}

/// Probes the model at every position whose current token is not a trigger,
/// averages its next-token distribution per current token, and reports
/// `KL(truth row || average)` for each probed row, aggregated per entropy
/// class. Trigger rows are excluded: their continuation is per-sequence, not
/// the chain's. Any other row the evaluation set never visits is an error,
/// because the estimate would be undefined there.
pub fn row_kl<M: PositionLogitsModel + ?Sized>(
    model: &M,
    truth: &TransitionMatrix,
    eval: &SequenceDataset,
) -> Result<KlByClass> {
    eval.validate()?;
    let k = truth.k();
    if model.vocab_size() != k || eval.k != k {
        return Err(Error::VocabMismatch { expected: k, got: model.vocab_size() });
    }
    let mut sums = Array2::<f64>::zeros((k, k));
    let mut probes = vec![0u64; k];
    for_each_logits(model, eval, |i, logits| {
        let seq = eval.sequence(i);
        for (pos, &tok) in seq.iter().enumerate() {
            if eval.triggers.contains(tok) {
                continue;
            }
            let p = softmax_tempered(logits.row(pos).as_slice().unwrap(), 1.0);
            let mut row = sums.row_mut(tok as usize);
            for (t, v) in p.iter().enumerate() {
                row[t] += v;
            }
            probes[tok as usize] += 1;
        }
        Ok(())
    })?;

    let mut rows = Vec::new();
    let mut class_sums = [0.0f64; 3];
    let mut class_counts = [0u64; 3];
    for row in 0..k {
        if eval.triggers.contains(row as u32) {
            continue;
        }
        if probes[row] == 0 {
            return Err(Error::UncoveredRow { row });
        }
        let avg: Vec<f64> = sums.row(row).iter().map(|v| v / probes[row] as f64).collect();
        let mut kl = 0.0;
        for (p, q) in truth.row(row).iter().zip(&avg) {
            if *p > 0.0 {
                kl += p * (p / q).ln();
            }
        }
        let class = truth.class(row);
        rows.push(RowKl { row, class, kl, probes: probes[row] });
        let ci = class as usize;
        class_sums[ci] += kl;
        class_counts[ci] += 1;
    }
    let mean = |ci: usize| (class_counts[ci] > 0).then(|| class_sums[ci] / class_counts[ci] as f64);
    Ok(KlByClass {
        low: mean(EntropyClass::Low as usize),
        medium: mean(EntropyClass::Medium as usize),
        high: mean(EntropyClass::High as usize),
        rows,
    })
}

/// Both probes from a single pass over the model's logits. Equal to calling
/// [`induction_accuracy`] and [`row_kl`] separately at half the forward cost.
pub fn probe_model<M: PositionLogitsModel + ?Sized>(
    model: &M,
    truth: &TransitionMatrix,
    eval: &SequenceDataset,
) -> Result<(InductionAccuracy, KlByClass)> {
    eval.validate()?;
    let k = truth.k();
    if model.vocab_size() != k || eval.k != k {
        return Err(Error::VocabMismatch { expected: k, got: model.vocab_size() });
    }
    let mut acc = InductionAccuracy {
        correct: 0,
        eligible: 0,
        excluded_first: 0,
        unfiltered_correct: 0,
        unfiltered_total: 0,
    };
    let mut sums = Array2::<f64>::zeros((k, k));
    let mut probes = vec![0u64; k];
    for_each_logits(model, eval, |i, logits| {
        let seq = eval.sequence(i);
        let mut seen_first = false;
        for (pos, &tok) in seq.iter().enumerate() {
            let row = logits.row(pos);
            let row = row.as_slice().unwrap();
            if eval.triggers.contains(tok) {
                if pos == seq.len() - 1 {
                    continue;
                }
                let target = eval.copy_targets.target_for(i, tok).ok_or_else(|| {
                    Error::InvalidArgument(format!("no target for trigger {tok}"))
                })?;
                let hit = argmax_index(row) as u32 == target;
                acc.unfiltered_total += 1;
                acc.unfiltered_correct += u64::from(hit);
                if !seen_first {
                    seen_first = true;
                    acc.excluded_first += 1;
                } else {
                    acc.eligible += 1;
                    acc.correct += u64::from(hit);
                }
            } else {
                let p = softmax_tempered(row, 1.0);
                let mut sum_row = sums.row_mut(tok as usize);
                for (t, v) in p.iter().enumerate() {
                    sum_row[t] += v;
                }
                probes[tok as usize] += 1;
            }
        }
        Ok(())
    })?;

    let mut rows = Vec::new();
    let mut class_sums = [0.0f64; 3];
    let mut class_counts = [0u64; 3];
    for row in 0..k {
        if eval.triggers.contains(row as u32) {
            continue;
        }
        if probes[row] == 0 {
            return Err(Error::UncoveredRow { row });
        }
        let avg: Vec<f64> = sums.row(row).iter().map(|v| v / probes[row] as f64).collect();
        let mut kl = 0.0;
        for (p, q) in truth.row(row).iter().zip(&avg) {
            if *p > 0.0 {
                kl += p * (p / q).ln();
            }
        }
        let class = truth.class(row);
        rows.push(RowKl { row, class, kl, probes: probes[row] });
        let ci = class as usize;
        class_sums[ci] += kl;
        class_counts[ci] += 1;
    }
    let mean = |ci: usize| (class_counts[ci] > 0).then(|| class_sums[ci] / class_counts[ci] as f64);
    let kl = KlByClass {
        low: mean(EntropyClass::Low as usize),
        medium: mean(EntropyClass::Medium as usize),
        high: mean(EntropyClass::High as usize),
        rows,
    };
    Ok((acc, kl))
}
