//! Shrinking soft labels to a few tokens per position.
//!
//! Dense teacher labels cost k floats per position. The sparsifier keeps
//! either the top probability tokens (deterministic) or a without-replacement
//! sample proportional to the label, renormalizing what remains. This example
//! shows both modes on a hand-built label and checks the sampler's inclusion
//! frequencies against the closed-form probabilities.

use distill_sandbox::loss::{
    sparsify_labels, LabelDist, LabelOrigin, SoftLabelField, SparsityMode,
};
use distill_sandbox::markov::entropy;
use distill_sandbox::Result;

fn field_with(probs: Vec<f64>) -> SoftLabelField {
    let h = entropy(&probs);
    SoftLabelField {
        k: probs.len(),
        dists: vec![LabelDist::Dense(probs)],
        entropies: vec![h],
        origin: LabelOrigin { teacher_id: "hand-built".into(), temperature: 1.0 },
    }
}

fn main() -> Result<()> {
    let probs = vec![0.5, 0.3, 0.2];
    println!("dense label over 3 tokens: {probs:?}");

    let field = field_with(probs.clone());
    let top2 = sparsify_labels(&field, SparsityMode::TopK, Some(2), 0, 0)?;
    println!("top-2 keeps the two largest and renormalizes: {:?}", top2.dists[0]);

    // Sampling without replacement: P(token included in 2 draws) has a
    // closed form, P(first) + sum over other first picks of the conditional.
    let closed_form: Vec<f64> = (0..3)
        .map(|a| {
            let pa = probs[a];
            pa + (0..3)
                .filter(|&b| b != a)
                .map(|b| probs[b] * pa / (1.0 - probs[b]))
                .sum::<f64>()
        })
        .collect();

    let trials = 100_000;
    let mut included = [0u64; 3];
    for t in 0..trials {
        let sampled = sparsify_labels(&field, SparsityMode::Sample, Some(2), 7, t)?;
        let LabelDist::Sparse(pairs) = &sampled.dists[0] else {
            unreachable!("sampling always produces sparse labels")
        };
        for &(tok, _) in pairs {
            included[tok as usize] += 1;
        }
    }
    println!("\nsample-2 inclusion frequency over {trials} trials vs closed form:");
    for tok in 0..3 {
        println!(
            "  token {tok}: observed {:.4}, exact {:.4}",
            included[tok] as f64 / trials as f64,
            closed_form[tok]
        );
    }

    // keep = None is the identity, whatever the mode: the switch lives in
    // the archive contents, not in the training objective.
    let untouched = sparsify_labels(&field, SparsityMode::Sample, None, 7, 0)?;
    println!("\nkeep = None returns the label unchanged: {}", untouched == field);
    Ok(())
}
