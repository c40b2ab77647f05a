//! Finite-difference verification of the training gradient.
//!
//! The transformer's backward pass is written by hand, so this example nudges
//! every parameter of a tiny model and compares the measured loss slope with
//! the analytic gradient, once for plain cross-entropy and once for the
//! blended objective against tempered teacher labels.

use distill_sandbox::loss::{
    distill_loss, distill_loss_grad, teacher_soft_labels, LossSpec, SoftLabelField,
};
use distill_sandbox::model::backward::backward_chunk;
use distill_sandbox::model::{forward, forward_chunk, ModelConfig, ModelParams};
use distill_sandbox::Result;

fn loss_at(
    params: &ModelParams,
    tokens: &[u32],
    labels: Option<&SoftLabelField>,
    spec: &LossSpec,
) -> Result<f64> {
    let logits = forward(params, tokens)?;
    Ok(distill_loss(logits.view(), tokens, labels, spec)?.total)
}

fn main() -> Result<()> {
    let config = ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        max_seq_len: 8,
        vocab_size: 6,
        seed: 19,
    };
    let mut params = ModelParams::init(&config)?;
    let teacher = ModelParams::init(&ModelConfig { seed: 20, ..config })?;
    let tokens = [0u32, 4, 2, 5, 1, 3];
    let labels = teacher_soft_labels(&teacher, &tokens, 2.0)?;

    for (name, spec, field) in [
        ("hard cross-entropy (alpha = 0)", LossSpec::hard_only(), None),
        ("blended objective (alpha = 0.5, T = 2)", LossSpec::default(), Some(&labels)),
    ] {
        // Analytic gradient: forward with cache, loss gradient at the logits,
        // then the hand-written backward pass.
        let (logits, cache) = forward_chunk(&params, &tokens, 1, true)?;
        let cache = cache.expect("cache requested");
        let (breakdown, dlogits) = distill_loss_grad(logits.view(), &tokens, field, &spec)?;
        let grad = backward_chunk(&params, &cache, &dlogits)?;

        // Central differences over every coordinate of every tensor.
        let eps = 1e-5;
        let mut worst = (0.0f64, 0usize);
        for i in 0..params.data.len() {
            let orig = params.data[i];
            params.data[i] = orig + eps;
            let up = loss_at(&params, &tokens, field, &spec)?;
            params.data[i] = orig - eps;
            let down = loss_at(&params, &tokens, field, &spec)?;
            params.data[i] = orig;

            let numeric = (up - down) / (2.0 * eps);
            let analytic = grad.data[i];
            let scale = numeric.abs().max(analytic.abs());
            let rel = if scale > 1e-4 { (numeric - analytic).abs() / scale } else { 0.0 };
            if rel > worst.0 {
                worst = (rel, i);
            }
        }
        println!("{name}: loss {:.6}", breakdown.total);
        println!(
            "  {} parameters checked, worst relative gap {:.2e} (in {})",
            params.data.len(),
            worst.0,
            params.layout().name_at(worst.1),
        );
    }
    Ok(())
}
