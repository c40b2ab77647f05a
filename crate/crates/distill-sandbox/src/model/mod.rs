//! A micro decoder-only transformer with hand-written exact gradients.
//!
//! Pre-norm blocks, learned absolute positions, multi-head causal attention,
//! a 4x GELU MLP, and an untied output projection. All parameters live in
//! one flat `f64` buffer addressed through a [`Layout`] derived from the
//! config; that makes the optimizer, gradient accumulation, and checkpoint
//! code straight loops over slices, and guarantees every tensor has a stable
//! name and order.
//!
//! Forward and backward run on "chunks": several same-length sequences
//! packed row-wise so the linear layers see one tall GEMM while attention
//! stays per-sequence. Chunking is by index, never by thread, so results are
//! bitwise identical whether or not work is parallelized.

pub mod adam;
pub mod backward;
pub mod checkpoint;
pub mod forward;
pub mod train;

pub use adam::{adam_step, adam_step_with_lr, OptimizerState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use forward::{forward, forward_chunk, ChunkCache};
pub use train::{train, StepRecord, TrainOptions, TrainOutcome, TrainedCheckpoint};

use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut2};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.n_layers) {
            return Err(Error::Config(format!("n_layers {} outside 2..=4", self.n_layers)));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible into {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.d_model
    }
}

/// Where each named tensor lives inside the flat parameter buffer.
#[derive(Debug, Clone)]
pub struct TensorSpec {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    /// 1 for vectors.
    pub cols: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone)]
pub struct Layout {
    entries: Vec<TensorSpec>,
    pub total: usize,
}

impl Layout {
    pub fn new(config: &ModelConfig) -> Layout {
        let (d, m, k, l) = (config.d_model, config.mlp_dim(), config.vocab_size, config.max_seq_len);
        let mut entries = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, rows: usize, cols: usize| {
            entries.push(TensorSpec { name, offset, rows, cols });
            offset += rows * cols;
        };
        push("tok_emb".into(), k, d);
        push("pos_emb".into(), l, d);
        for i in 0..config.n_layers {
            for (suffix, rows, cols) in [
                ("ln1.g", d, 1),
                ("ln1.b", d, 1),
                ("attn.wq", d, d),
                ("attn.bq", d, 1),
                ("attn.wk", d, d),
                ("attn.bk", d, 1),
                ("attn.wv", d, d),
                ("attn.bv", d, 1),
                ("attn.wo", d, d),
                ("attn.bo", d, 1),
                ("ln2.g", d, 1),
                ("ln2.b", d, 1),
                ("mlp.w1", d, m),
                ("mlp.b1", m, 1),
                ("mlp.w2", m, d),
                ("mlp.b2", d, 1),
            ] {
                push(format!("layer{i}.{suffix}"), rows, cols);
            }
        }
        push("lnf.g".into(), d, 1);
        push("lnf.b".into(), d, 1);
        push("w_out".into(), d, k);
        Layout { entries, total: offset }
    }

    pub fn entries(&self) -> &[TensorSpec] {
        &self.entries
    }

    pub fn spec(&self, name: &str) -> &TensorSpec {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .unwrap_or_else(|| panic!("no tensor named {name}"))
    }

    /// Name of the tensor containing flat index `i`.
    pub fn name_at(&self, i: usize) -> &str {
        for e in &self.entries {
            if i >= e.offset && i < e.offset + e.len() {
                return &e.name;
            }
        }
        "out of range"
    }
}

/// All model parameters in one flat buffer.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    layout: Layout,
    pub data: Vec<f64>,
}

impl ModelParams {
    /// Gaussian(0, 0.02) weights and embeddings, unit LayerNorm gains, zero
    /// biases. A single `(seed, "init", 0)` stream fills weights in layout
    /// order.
    pub fn init(config: &ModelConfig) -> Result<ModelParams> {
        config.validate()?;
        let layout = Layout::new(config);
        let mut data = vec![0.0; layout.total];
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        let mut r = rng::stream(config.seed, "init", 0);
        for spec in layout.entries() {
            let slice = &mut data[spec.offset..spec.offset + spec.len()];
            if spec.name.ends_with(".g") {
                slice.fill(1.0);
            } else if spec.name.ends_with(".b")
                || spec.name.contains(".bq")
                || spec.name.contains(".bk")
                || spec.name.contains(".bv")
                || spec.name.contains(".bo")
                || spec.name.contains(".b1")
                || spec.name.contains(".b2")
            {
                slice.fill(0.0);
            } else {
                for v in slice.iter_mut() {
                    *v = normal.sample(&mut r);
                }
            }
        }
        Ok(ModelParams { config: *config, layout, data })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn matrix(&self, name: &str) -> ArrayView2<'_, f64> {
        let spec = self.layout.spec(name);
        ArrayView2::from_shape(
            (spec.rows, spec.cols),
            &self.data[spec.offset..spec.offset + spec.len()],
        )
        .expect("layout shapes are consistent")
    }

    pub fn vector(&self, name: &str) -> ArrayView1<'_, f64> {
        let spec = self.layout.spec(name);
        ArrayView1::from_shape(spec.rows, &self.data[spec.offset..spec.offset + spec.len()])
            .expect("layout shapes are consistent")
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stable hex id over config and exact parameter bits.
    pub fn content_id(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for v in &self.data {
            hasher.update(v.to_le_bytes());
        }
        hasher.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Gradient buffer sharing the parameter layout.
#[derive(Debug, Clone)]
pub struct GradBuf {
    layout: Layout,
    pub data: Vec<f64>,
}

impl GradBuf {
    pub fn zeros(layout: &Layout) -> GradBuf {
        GradBuf { layout: layout.clone(), data: vec![0.0; layout.total] }
    }

    pub fn zeros_like(params: &ModelParams) -> GradBuf {
        GradBuf::zeros(&params.layout)
    }

    pub fn matrix_mut(&mut self, name: &str) -> ArrayViewMut2<'_, f64> {
        let spec = self.layout.spec(name).clone();
        ArrayViewMut2::from_shape(
            (spec.rows, spec.cols),
            &mut self.data[spec.offset..spec.offset + spec.len()],
        )
        .expect("layout shapes are consistent")
    }

    pub fn slice_mut(&mut self, name: &str) -> &mut [f64] {
        let spec = self.layout.spec(name).clone();
        &mut self.data[spec.offset..spec.offset + spec.len()]
    }

    pub fn slice(&self, name: &str) -> &[f64] {
        let spec = self.layout.spec(name);
        &self.data[spec.offset..spec.offset + spec.len()]
    }

    pub fn add_assign(&mut self, other: &GradBuf) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, by: f64) {
        for v in &mut self.data {
            *v *= by;
        }
    }

    /// Name of the first non-finite entry's tensor, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.data
            .iter()
            .position(|v| !v.is_finite())
            .map(|i| self.layout.name_at(i))
    }
}

/// Anything that can produce next-token logits at every position of a
/// sequence. Implemented by trained transformers and, for oracle tests, by
/// the generating chain itself.
pub trait PositionLogitsModel {
    fn vocab_size(&self) -> usize;

    /// `(len, vocab)` logits; row `t` scores the token at `t + 1`.
    fn position_logits(&self, tokens: &[u32]) -> Result<Array2<f64>>;

    /// Batched variant; implementations may pack sequences for speed.
    fn batch_position_logits(&self, sequences: &[&[u32]]) -> Result<Vec<Array2<f64>>> {
        sequences.iter().map(|s| self.position_logits(s)).collect()
    }
}

impl PositionLogitsModel for ModelParams {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn position_logits(&self, tokens: &[u32]) -> Result<Array2<f64>> {
        forward(self, tokens)
    }

    fn batch_position_logits(&self, sequences: &[&[u32]]) -> Result<Vec<Array2<f64>>> {
        if sequences.is_empty() {
            return Ok(Vec::new());
        }
        let len = sequences[0].len();
        if sequences.iter().any(|s| s.len() != len) {
            return sequences.iter().map(|s| self.position_logits(s)).collect();
        }
        let mut out = Vec::with_capacity(sequences.len());
        for group in sequences.chunks(8) {
            let mut packed = Vec::with_capacity(group.len() * len);
            for s in group {
                packed.extend_from_slice(s);
            }
            let (logits, _) = forward_chunk(self, &packed, group.len(), false)?;
            for i in 0..group.len() {
                let rows = logits.slice(ndarray::s![i * len..(i + 1) * len, ..]);
                out.push(rows.to_owned());
            }
        }
        Ok(out)
    }
}

/// The generating chain as a "model": logits are log-probabilities of the
/// current token's row, so softmax recovers the row exactly. Context beyond
/// the current token is ignored, which is exactly what a bigram source knows.
impl PositionLogitsModel for crate::markov::TransitionMatrix {
    fn vocab_size(&self) -> usize {
        self.k()
    }

    fn position_logits(&self, tokens: &[u32]) -> Result<Array2<f64>> {
        let k = self.k();
        let mut out = Array2::zeros((tokens.len(), k));
        for (t, &tok) in tokens.iter().enumerate() {
            if tok as usize >= k {
                return Err(Error::InvalidArgument(format!("token {tok} outside vocabulary")));
            }
            for (j, &p) in self.row(tok as usize).iter().enumerate() {
                out[[t, j]] = if p > 0.0 { p.ln() } else { -1e30 };
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            max_seq_len: 6,
            vocab_size: 5,
            seed: 1,
        }
    }

    #[test]
    fn layout_covers_expected_parameter_count() {
        let c = tiny_config();
        let layout = Layout::new(&c);
        let (d, m, k, l) = (8, 32, 5, 6);
        let per_layer = 4 * d // layer norms
            + 4 * d * d + 4 * d // attention
            + d * m + m + m * d + d; // mlp
        let expected = k * d + l * d + 2 * per_layer + 2 * d + d * k;
        assert_eq!(layout.total, expected);
        // offsets tile the buffer without gaps
        let mut cursor = 0;
        for e in layout.entries() {
            assert_eq!(e.offset, cursor, "{}", e.name);
            cursor += e.len();
        }
        assert_eq!(cursor, layout.total);
    }

    #[test]
    fn init_is_deterministic_and_structured() {
        let c = tiny_config();
        let a = ModelParams::init(&c).unwrap();
        let b = ModelParams::init(&c).unwrap();
        assert_eq!(a.data, b.data);
        assert!(a.all_finite());
        // gains are 1, biases 0, weights small
        assert!(a.vector("layer0.ln1.g").iter().all(|&v| v == 1.0));
        assert!(a.vector("layer0.attn.bq").iter().all(|&v| v == 0.0));
        assert!(a.matrix("tok_emb").iter().all(|&v| v.abs() < 0.2));
        assert!(a.matrix("tok_emb").iter().any(|&v| v != 0.0));

        let mut c2 = c;
        c2.seed = 2;
        let other = ModelParams::init(&c2).unwrap();
        assert_ne!(a.data[..40], other.data[..40]);
        assert_ne!(a.content_id(), other.content_id());
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let mut c = tiny_config();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.n_layers = 1;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.n_layers = 5;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.vocab_size = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn name_lookup_round_trips() {
        let c = tiny_config();
        let layout = Layout::new(&c);
        for e in layout.entries() {
            assert_eq!(layout.name_at(e.offset), e.name);
            assert_eq!(layout.name_at(e.offset + e.len() - 1), e.name);
        }
    }

    #[test]
    fn chain_as_model_recovers_rows() {
        use crate::markov::{build_matrix, BuildOptions, EntropyClass};
        let m = build_matrix(
            6,
            &[EntropyClass::High, EntropyClass::Low, EntropyClass::High,
              EntropyClass::Medium, EntropyClass::High, EntropyClass::Low],
            3,
            &BuildOptions::default(),
        )
        .unwrap();
        let logits = m.position_logits(&[2, 0, 1]).unwrap();
        for (t, &tok) in [2u32, 0, 1].iter().enumerate() {
            let probs = crate::passk::softmax_tempered(&logits.row(t).to_vec(), 1.0);
            for (j, &p) in m.row(tok as usize).iter().enumerate() {
                assert!((probs[j] - p).abs() < 1e-9, "pos {t} token {j}");
            }
        }
    }
}
