//! Forward pass over packed chunks of same-length sequences.
//!
//! A chunk is `seqs` sequences of equal length laid out row-wise in one
//! `(seqs * len, d)` activation matrix. Linear layers run as single GEMMs
//! over the tall matrix; attention scores are formed per sequence and per
//! head, with the causal mask applied before the row softmax. The cache
//! holds exactly what the backward pass needs and nothing else.

use ndarray::{s, Array1, Array2};

use crate::error::{Error, Result};

use super::ModelParams;

pub(crate) const LN_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub(crate) fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

pub(crate) fn dgelu(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

/// LayerNorm activations needed to run the backward pass.
#[derive(Debug, Clone)]
pub struct LnCache {
    pub xhat: Array2<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn ln_forward(
    x: &Array2<f64>,
    gain: &Array1<f64>,
    bias: &Array1<f64>,
) -> (Array2<f64>, LnCache) {
    let (rows, d) = x.dim();
    let mut out = Array2::zeros((rows, d));
    let mut xhat = Array2::zeros((rows, d));
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(inv);
        for c in 0..d {
            let h = (row[c] - mean) * inv;
            xhat[[r, c]] = h;
            out[[r, c]] = h * gain[c] + bias[c];
        }
    }
    (out, LnCache { xhat, inv_std })
}

fn add_bias(x: &mut Array2<f64>, bias: &Array1<f64>) {
    for mut row in x.rows_mut() {
        row += bias;
    }
}

/// Per-layer activations retained for backprop.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub ln1: LnCache,
    /// Post-bias projections, `(rows, d)` each.
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Attention probabilities, one `(len, len)` matrix per `(seq, head)` in
    /// row-major `(seq * n_heads + head)` order.
    pub probs: Vec<Array2<f64>>,
    /// Concatenated head outputs before the output projection.
    pub ctx: Array2<f64>,
    /// Residual stream after attention, input to the MLP half.
    pub x_mid: Array2<f64>,
    pub ln2: LnCache,
    /// MLP pre-activation.
    pub pre: Array2<f64>,
    /// MLP post-GELU activation.
    pub act: Array2<f64>,
}

/// Everything backward needs about one forward call.
#[derive(Debug, Clone)]
pub struct ChunkCache {
    pub tokens: Vec<u32>,
    pub seqs: usize,
    pub seq_len: usize,
    /// Embedded input, also the input to layer 0.
    pub x0: Array2<f64>,
    /// Residual-stream input to each layer (x0 for layer 0).
    pub layer_inputs: Vec<Array2<f64>>,
    pub layers: Vec<LayerCache>,
    pub lnf: LnCache,
    /// Final normed stream, input to the output projection.
    pub y: Array2<f64>,
}

/// Runs `seqs` packed sequences through the model.
///
/// Returns `(seqs * len, vocab)` logits and, when requested, the cache for
/// [`backward_chunk`](super::backward::backward_chunk).
pub fn forward_chunk(
    params: &ModelParams,
    tokens: &[u32],
    seqs: usize,
    want_cache: bool,
) -> Result<(Array2<f64>, Option<ChunkCache>)> {
    let cfg = &params.config;
    if seqs == 0 || tokens.is_empty() || tokens.len() % seqs != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{} tokens cannot form {seqs} equal sequences",
            tokens.len()
        )));
    }
    let len = tokens.len() / seqs;
    if len > cfg.max_seq_len {
        return Err(Error::InvalidArgument(format!(
            "sequence length {len} exceeds maximum {}",
            cfg.max_seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::InvalidArgument(format!(
            "token {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }

    let rows = seqs * len;
    let d = cfg.d_model;
    let heads = cfg.n_heads;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let tok_emb = params.matrix("tok_emb");
    let pos_emb = params.matrix("pos_emb");
    let mut x = Array2::zeros((rows, d));
    for r in 0..rows {
        let tok = tokens[r] as usize;
        let pos = r % len;
        for c in 0..d {
            x[[r, c]] = tok_emb[[tok, c]] + pos_emb[[pos, c]];
        }
    }
    let x0 = x.clone();

    let mut layer_inputs = Vec::with_capacity(cfg.n_layers);
    let mut layer_caches = Vec::with_capacity(cfg.n_layers);

    for li in 0..cfg.n_layers {
        layer_inputs.push(x.clone());
        let name = |s: &str| format!("layer{li}.{s}");
        let g1 = params.vector(&name("ln1.g")).to_owned();
        let b1 = params.vector(&name("ln1.b")).to_owned();
        let (h1, ln1) = ln_forward(&x, &g1, &b1);

        let mut q = h1.dot(&params.matrix(&name("attn.wq")));
        add_bias(&mut q, &params.vector(&name("attn.bq")).to_owned());
        let mut kk = h1.dot(&params.matrix(&name("attn.wk")));
        add_bias(&mut kk, &params.vector(&name("attn.bk")).to_owned());
        let mut v = h1.dot(&params.matrix(&name("attn.wv")));
        add_bias(&mut v, &params.vector(&name("attn.bv")).to_owned());

        let mut probs = Vec::with_capacity(seqs * heads);
        let mut ctx = Array2::zeros((rows, d));
        for s_i in 0..seqs {
            let r0 = s_i * len;
            for h in 0..heads {
                let c0 = h * hd;
                let q_h = q.slice(s![r0..r0 + len, c0..c0 + hd]);
                let k_h = kk.slice(s![r0..r0 + len, c0..c0 + hd]);
                let v_h = v.slice(s![r0..r0 + len, c0..c0 + hd]);
                let mut scores = q_h.dot(&k_h.t());
                scores *= scale;
                for i in 0..len {
                    for j in (i + 1)..len {
                        scores[[i, j]] = f64::NEG_INFINITY;
                    }
                }
                // row softmax; the diagonal is always unmasked so the max is finite
                for i in 0..len {
                    let mut row = scores.row_mut(i);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for val in row.iter_mut() {
                        *val = (*val - max).exp();
                        total += *val;
                    }
                    for val in row.iter_mut() {
                        *val /= total;
                    }
                }
                let ctx_h = scores.dot(&v_h);
                ctx.slice_mut(s![r0..r0 + len, c0..c0 + hd]).assign(&ctx_h);
                probs.push(scores);
            }
        }

        let mut attn_out = ctx.dot(&params.matrix(&name("attn.wo")));
        add_bias(&mut attn_out, &params.vector(&name("attn.bo")).to_owned());
        let x_mid = &x + &attn_out;

        let g2 = params.vector(&name("ln2.g")).to_owned();
        let b2 = params.vector(&name("ln2.b")).to_owned();
        let (h2, ln2) = ln_forward(&x_mid, &g2, &b2);
        let mut pre = h2.dot(&params.matrix(&name("mlp.w1")));
        add_bias(&mut pre, &params.vector(&name("mlp.b1")).to_owned());
        let act = pre.mapv(gelu);
        let mut mlp_out = act.dot(&params.matrix(&name("mlp.w2")));
        add_bias(&mut mlp_out, &params.vector(&name("mlp.b2")).to_owned());
        x = &x_mid + &mlp_out;

        layer_caches.push(LayerCache { ln1, q, k: kk, v, probs, ctx, x_mid, ln2, pre, act });
    }

    let gf = params.vector("lnf.g").to_owned();
    let bf = params.vector("lnf.b").to_owned();
    let (y, lnf) = ln_forward(&x, &gf, &bf);
    let logits = y.dot(&params.matrix("w_out"));

    let cache = want_cache.then(|| ChunkCache {
        tokens: tokens.to_vec(),
        seqs,
        seq_len: len,
        x0,
        layer_inputs,
        layers: layer_caches,
        lnf,
        y,
    });
    Ok((logits, cache))
}

/// Single-sequence forward: `(len, vocab)` logits.
pub fn forward(params: &ModelParams, tokens: &[u32]) -> Result<Array2<f64>> {
    let (logits, _) = forward_chunk(params, tokens, 1, false)?;
    Ok(logits)
}
