//! Exact reverse-mode gradients for the chunk forward pass.
//!
//! Every expression here is the hand-derived adjoint of the corresponding
//! line in `forward.rs`; the two files are kept in mirror-image order so the
//! pairing stays auditable. Weight gradients fall out of tall GEMMs over the
//! packed chunk, which also accumulates across the chunk's sequences
//! automatically.

use ndarray::{s, Array1, Array2};

use crate::error::Result;

use super::forward::{dgelu, ChunkCache, LnCache};
use super::{GradBuf, ModelParams};

fn colsum(x: &Array2<f64>) -> Array1<f64> {
    x.sum_axis(ndarray::Axis(0))
}

/// Adjoint of LayerNorm: returns the input gradient and writes gain/bias
/// gradients. `gain` is the forward gain vector.
fn ln_backward(
    dout: &Array2<f64>,
    cache: &LnCache,
    gain: &Array1<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let (rows, d) = dout.dim();
    let mut dx = Array2::zeros((rows, d));
    let mut dgain = Array1::zeros(d);
    let mut dbias = Array1::zeros(d);
    for r in 0..rows {
        let inv = cache.inv_std[r];
        let xhat = cache.xhat.row(r);
        let dout_r = dout.row(r);
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for c in 0..d {
            let dxh = dout_r[c] * gain[c];
            m1 += dxh;
            m2 += dxh * xhat[c];
            dgain[c] += dout_r[c] * xhat[c];
            dbias[c] += dout_r[c];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        for c in 0..d {
            let dxh = dout_r[c] * gain[c];
            dx[[r, c]] = inv * (dxh - m1 - xhat[c] * m2);
        }
    }
    (dx, dgain, dbias)
}

/// Rebuilds a LayerNorm output from its cache; cheaper than caching it.
fn ln_output(cache: &LnCache, gain: &Array1<f64>, bias: &Array1<f64>) -> Array2<f64> {
    let (rows, d) = cache.xhat.dim();
    let mut out = Array2::zeros((rows, d));
    for r in 0..rows {
        for c in 0..d {
            out[[r, c]] = cache.xhat[[r, c]] * gain[c] + bias[c];
        }
    }
    out
}

fn write_vec(grads: &mut GradBuf, name: &str, v: &Array1<f64>) {
    let slot = grads.slice_mut(name);
    for (dst, src) in slot.iter_mut().zip(v.iter()) {
        *dst = *src;
    }
}

/// Gradients of a scalar loss with respect to every parameter, given the
/// loss gradient at the logits.
pub fn backward_chunk(
    params: &ModelParams,
    cache: &ChunkCache,
    dlogits: &Array2<f64>,
) -> Result<GradBuf> {
    let cfg = &params.config;
    let (rows, d) = cache.y.dim();
    assert_eq!(dlogits.dim(), (rows, cfg.vocab_size), "dlogits shape");
    let len = cache.seq_len;
    let heads = cfg.n_heads;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let mut grads = GradBuf::zeros_like(params);

    // logits = y . w_out
    grads.matrix_mut("w_out").assign(&cache.y.t().dot(dlogits));
    let dy = dlogits.dot(&params.matrix("w_out").t());

    // y = LNf(x_final)
    let gf = params.vector("lnf.g").to_owned();
    let (mut dx, dgf, dbf) = ln_backward(&dy, &cache.lnf, &gf);
    write_vec(&mut grads, "lnf.g", &dgf);
    write_vec(&mut grads, "lnf.b", &dbf);

    for li in (0..cfg.n_layers).rev() {
        let lc = &cache.layers[li];
        let name = |s: &str| format!("layer{li}.{s}");

        // x_out = x_mid + act . w2 + b2
        grads.matrix_mut(&name("mlp.w2")).assign(&lc.act.t().dot(&dx));
        write_vec(&mut grads, &name("mlp.b2"), &colsum(&dx));
        let dact = dx.dot(&params.matrix(&name("mlp.w2")).t());

        // act = gelu(pre)
        let mut dpre = dact;
        ndarray::Zip::from(&mut dpre).and(&lc.pre).for_each(|g, &u| *g *= dgelu(u));

        // pre = h2 . w1 + b1, h2 = LN2(x_mid)
        let g2 = params.vector(&name("ln2.g")).to_owned();
        let b2 = params.vector(&name("ln2.b")).to_owned();
        let h2 = ln_output(&lc.ln2, &g2, &b2);
        grads.matrix_mut(&name("mlp.w1")).assign(&h2.t().dot(&dpre));
        write_vec(&mut grads, &name("mlp.b1"), &colsum(&dpre));
        let dh2 = dpre.dot(&params.matrix(&name("mlp.w1")).t());
        let (dx_mid_ln, dg2, db2) = ln_backward(&dh2, &lc.ln2, &g2);
        write_vec(&mut grads, &name("ln2.g"), &dg2);
        write_vec(&mut grads, &name("ln2.b"), &db2);

        // residual into the MLP half
        let dx_mid = &dx + &dx_mid_ln;

        // x_mid = x_in + ctx . wo + bo
        grads.matrix_mut(&name("attn.wo")).assign(&lc.ctx.t().dot(&dx_mid));
        write_vec(&mut grads, &name("attn.bo"), &colsum(&dx_mid));
        let dctx = dx_mid.dot(&params.matrix(&name("attn.wo")).t());

        // attention internals, per sequence and head
        let mut dq = Array2::zeros((rows, d));
        let mut dk = Array2::zeros((rows, d));
        let mut dv = Array2::zeros((rows, d));
        for s_i in 0..cache.seqs {
            let r0 = s_i * len;
            for h in 0..heads {
                let c0 = h * hd;
                let p = &lc.probs[s_i * heads + h];
                let dctx_h = dctx.slice(s![r0..r0 + len, c0..c0 + hd]);
                let v_h = lc.v.slice(s![r0..r0 + len, c0..c0 + hd]);
                let q_h = lc.q.slice(s![r0..r0 + len, c0..c0 + hd]);
                let k_h = lc.k.slice(s![r0..r0 + len, c0..c0 + hd]);

                // ctx_h = P . v_h
                let dp = dctx_h.dot(&v_h.t());
                dv.slice_mut(s![r0..r0 + len, c0..c0 + hd])
                    .assign(&p.t().dot(&dctx_h));

                // softmax rows: dS = P * (dP - rowdot(dP, P))
                let mut ds = Array2::zeros((len, len));
                for i in 0..len {
                    let mut rowdot = 0.0;
                    for j in 0..len {
                        rowdot += dp[[i, j]] * p[[i, j]];
                    }
                    for j in 0..len {
                        ds[[i, j]] = p[[i, j]] * (dp[[i, j]] - rowdot);
                    }
                }

                // scores = scale * q_h . k_h^T
                let mut dq_h = ds.dot(&k_h);
                dq_h *= scale;
                dq.slice_mut(s![r0..r0 + len, c0..c0 + hd]).assign(&dq_h);
                let mut dk_h = ds.t().dot(&q_h);
                dk_h *= scale;
                dk.slice_mut(s![r0..r0 + len, c0..c0 + hd]).assign(&dk_h);
            }
        }

        // q = h1 . wq + bq (and k, v alike), h1 = LN1(x_in)
        let g1 = params.vector(&name("ln1.g")).to_owned();
        let b1 = params.vector(&name("ln1.b")).to_owned();
        let h1 = ln_output(&lc.ln1, &g1, &b1);
        let mut dh1 = dq.dot(&params.matrix(&name("attn.wq")).t());
        dh1 += &dk.dot(&params.matrix(&name("attn.wk")).t());
        dh1 += &dv.dot(&params.matrix(&name("attn.wv")).t());
        grads.matrix_mut(&name("attn.wq")).assign(&h1.t().dot(&dq));
        grads.matrix_mut(&name("attn.wk")).assign(&h1.t().dot(&dk));
        grads.matrix_mut(&name("attn.wv")).assign(&h1.t().dot(&dv));
        write_vec(&mut grads, &name("attn.bq"), &colsum(&dq));
        write_vec(&mut grads, &name("attn.bk"), &colsum(&dk));
        write_vec(&mut grads, &name("attn.bv"), &colsum(&dv));

        let (dx_in_ln, dg1, db1) = ln_backward(&dh1, &lc.ln1, &g1);
        write_vec(&mut grads, &name("ln1.g"), &dg1);
        write_vec(&mut grads, &name("ln1.b"), &db1);

        // residual into the attention half
        dx = &dx_mid + &dx_in_ln;
    }

    // x0[r] = tok_emb[tokens[r]] + pos_emb[r mod len]
    {
        let spec_tok = params.layout().spec("tok_emb").clone();
        let spec_pos = params.layout().spec("pos_emb").clone();
        for r in 0..rows {
            let tok = cache.tokens[r] as usize;
            let pos = r % len;
            for c in 0..d {
                grads.data[spec_tok.offset + tok * d + c] += dx[[r, c]];
                grads.data[spec_pos.offset + pos * d + c] += dx[[r, c]];
            }
        }
    }

    Ok(grads)
}
