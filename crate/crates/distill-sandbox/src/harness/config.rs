//! Experiment configuration: one TOML file describes the whole run.
//!
//! Unknown keys are rejected everywhere so a typo cannot silently fall back
//! to a default. Two presets cover the common cases: [`ExperimentConfig::quick`]
//! for smoke runs and determinism checks, [`ExperimentConfig::paper_protocol`]
//! for the full-scale experiment.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::loss::{LossSpec, SparsityMode};
use crate::markov::{BuildOptions, EntropyClass};
use crate::model::{ModelConfig, TrainOptions};
use crate::tabular::SweepConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub teacher: ModelSection,
    pub student: ModelSection,
    #[serde(default)]
    pub labels: LabelsConfig,
    pub arms: Vec<ArmConfig>,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub complexity: SweepConfig,
    #[serde(default)]
    pub passk_example: PasskExample,
    #[serde(default)]
    pub run: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Vocabulary size; also the chain's state count.
    pub k: usize,
    pub seq_len: usize,
    pub n_train_teacher: usize,
    /// Student sequences, drawn as a prefix of the teacher's training set so
    /// the comparison never hinges on fresh data.
    pub n_train_student: usize,
    pub n_eval: usize,
    pub trigger_count: usize,
    #[serde(default)]
    pub per_trigger_targets: bool,
    pub seed: u64,
    #[serde(default)]
    pub build: BuildOptions,
}

impl DataConfig {
    /// Entropy class of every row: thirds, with the remainder high.
    pub fn class_plan(&self) -> Vec<EntropyClass> {
        class_plan(self.k)
    }
}

pub fn class_plan(k: usize) -> Vec<EntropyClass> {
    let third = k / 3;
    let mut plan = Vec::with_capacity(k);
    plan.extend(std::iter::repeat(EntropyClass::Low).take(third));
    plan.extend(std::iter::repeat(EntropyClass::Medium).take(third));
    plan.extend(std::iter::repeat(EntropyClass::High).take(k - 2 * third));
    plan
}

/// Architecture and training schedule for one model role.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_layers")]
    pub n_layers: usize,
    pub d_model: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    pub seed: u64,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub base_lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_frac: f64,
    #[serde(default)]
    pub checkpoint_every: Option<u64>,
}

fn default_layers() -> usize {
    2
}

fn default_heads() -> usize {
    4
}

fn default_batch() -> usize {
    64
}

fn default_lr() -> f64 {
    3e-4
}

fn default_warmup() -> f64 {
    0.01
}

impl ModelSection {
    pub fn model_config(&self, data: &DataConfig) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            max_seq_len: data.seq_len,
            vocab_size: data.k,
            seed: self.seed,
        }
    }

    pub fn train_options(&self, parallel: bool) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            batch_size: self.batch_size,
            base_lr: self.base_lr,
            warmup_frac: self.warmup_frac,
            checkpoint_every: self.checkpoint_every,
            parallel,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelsConfig {
    /// Temperature the teacher's logits are softened with when cached.
    pub temperature: f64,
}

impl Default for LabelsConfig {
    fn default() -> Self {
        LabelsConfig { temperature: 2.0 }
    }
}

/// One training condition: a name and the objective it trains under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmConfig {
    pub name: String,
    #[serde(default)]
    pub loss: LossSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Samples drawn per item when estimating pass@k.
    pub passk_n: usize,
    pub passk_ks: Vec<u32>,
    pub passk_temperatures: Vec<f64>,
    /// Evaluation subset size for mid-training checkpoints; final models
    /// always use the full evaluation set.
    pub intermediate_subset: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            passk_n: 64,
            passk_ks: vec![1, 2, 4, 8, 16, 32, 64],
            passk_temperatures: vec![0.0, 1.0],
            intermediate_subset: 512,
            seed: 1234,
        }
    }
}

/// Inputs for the closed-form best-of-k tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PasskExample {
    /// Majority-classifier edge for the crossover table.
    pub epsilon: f64,
    /// Grid resolution over success probability `p` in (0, 1).
    pub p_grid_points: usize,
    /// Budgets tabulated for the optimal-hedge table.
    pub ks: Vec<u32>,
}

impl Default for PasskExample {
    fn default() -> Self {
        PasskExample { epsilon: 0.1, p_grid_points: 99, ks: vec![1, 2, 3, 4, 8, 16, 64] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Student training seeds; each seed trains every arm.
    pub seeds: Vec<u64>,
    pub parallel: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { seeds: vec![1, 2, 3], parallel: true }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.k < 2 {
            return Err(Error::Config(format!("vocabulary {} too small", d.k)));
        }
        if d.seq_len < 2 {
            return Err(Error::Config("seq_len must be at least 2".into()));
        }
        if d.n_train_teacher == 0 || d.n_eval == 0 {
            return Err(Error::Config("dataset sizes must be positive".into()));
        }
        if d.n_train_student == 0 || d.n_train_student > d.n_train_teacher {
            return Err(Error::Config(format!(
                "n_train_student {} must lie in 1..={}",
                d.n_train_student, d.n_train_teacher
            )));
        }
        if d.trigger_count >= d.k {
            return Err(Error::Config(format!(
                "{} triggers leave no ordinary tokens in a vocabulary of {}",
                d.trigger_count, d.k
            )));
        }
        for (role, section) in [("teacher", &self.teacher), ("student", &self.student)] {
            section
                .model_config(d)
                .validate()
                .map_err(|e| Error::Config(format!("{role}: {e}")))?;
            section
                .train_options(false)
                .validate()
                .map_err(|e| Error::Config(format!("{role}: {e}")))?;
        }
        if !(self.labels.temperature.is_finite() && self.labels.temperature > 0.0) {
            return Err(Error::Config(format!(
                "label temperature {} must be positive",
                self.labels.temperature
            )));
        }
        if self.arms.is_empty() {
            return Err(Error::Config("at least one arm is required".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for arm in &self.arms {
            if arm.name.is_empty()
                || !arm.name.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '-')
            {
                return Err(Error::Config(format!(
                    "arm name {:?} must be nonempty lowercase [a-z0-9-]",
                    arm.name
                )));
            }
            if !names.insert(&arm.name) {
                return Err(Error::Config(format!("duplicate arm name {:?}", arm.name)));
            }
            arm.loss.validate().map_err(|e| Error::Config(format!("arm {}: {e}", arm.name)))?;
            if arm.loss.alpha > 0.0 && arm.loss.temperature != self.labels.temperature {
                return Err(Error::Config(format!(
                    "arm {} expects T = {} but labels are cached at T = {}",
                    arm.name, arm.loss.temperature, self.labels.temperature
                )));
            }
            if let Some(keep) = arm.loss.sparsity_k {
                if keep > d.k {
                    return Err(Error::Config(format!(
                        "arm {} keeps {keep} tokens of a vocabulary of {}",
                        arm.name, d.k
                    )));
                }
            }
        }
        let e = &self.eval;
        if e.passk_n == 0 {
            return Err(Error::Config("passk_n must be positive".into()));
        }
        if e.passk_ks.is_empty()
            || e.passk_ks.iter().any(|&k| k == 0 || k as usize > e.passk_n)
        {
            return Err(Error::Config(format!(
                "passk_ks must be nonempty within 1..={}",
                e.passk_n
            )));
        }
        if e.passk_temperatures.is_empty()
            || e.passk_temperatures.iter().any(|&t| !t.is_finite() || t < 0.0)
        {
            return Err(Error::Config("passk temperatures must be nonnegative".into()));
        }
        if e.intermediate_subset == 0 {
            return Err(Error::Config("intermediate_subset must be positive".into()));
        }
        self.complexity.validate()?;
        let pe = &self.passk_example;
        if !(pe.epsilon > 0.0 && pe.epsilon < 0.5) {
            return Err(Error::Config(format!("epsilon {} outside (0, 0.5)", pe.epsilon)));
        }
        if pe.p_grid_points < 1 {
            return Err(Error::Config("p_grid_points must be positive".into()));
        }
        if pe.ks.is_empty() || pe.ks.contains(&0) {
            return Err(Error::Config("passk_example ks must be nonempty and positive".into()));
        }
        if self.run.seeds.is_empty() {
            return Err(Error::Config("at least one run seed is required".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        if !self.run.seeds.iter().all(|s| seen.insert(s)) {
            return Err(Error::Config("run seeds must be distinct".into()));
        }
        Ok(())
    }

    /// Stable id over the serialized configuration.
    pub fn config_hash(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        hasher.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Minutes-scale preset used by the full experiment.
    pub fn paper_protocol() -> ExperimentConfig {
        ExperimentConfig {
            data: DataConfig {
                k: 64,
                seq_len: 64,
                n_train_teacher: 16384,
                n_train_student: 8192,
                n_eval: 4096,
                trigger_count: 10,
                per_trigger_targets: false,
                seed: 11,
                build: BuildOptions::default(),
            },
            teacher: ModelSection {
                n_layers: 2,
                d_model: 128,
                n_heads: 4,
                seed: 101,
                epochs: 2,
                batch_size: 64,
                base_lr: 3e-4,
                warmup_frac: 0.01,
                checkpoint_every: None,
            },
            student: ModelSection {
                n_layers: 2,
                d_model: 64,
                n_heads: 4,
                seed: 201,
                epochs: 2,
                batch_size: 64,
                base_lr: 3e-4,
                warmup_frac: 0.01,
                checkpoint_every: Some(32),
            },
            labels: LabelsConfig::default(),
            arms: vec![
                ArmConfig { name: "ce".into(), loss: LossSpec::hard_only() },
                ArmConfig { name: "kd".into(), loss: LossSpec::default() },
                ArmConfig {
                    name: "kd-routed".into(),
                    loss: LossSpec { routing_fraction: 0.15, ..Default::default() },
                },
                ArmConfig {
                    name: "kd-top1".into(),
                    loss: LossSpec {
                        sparsity: SparsityMode::Sample,
                        sparsity_k: Some(1),
                        ..Default::default()
                    },
                },
            ],
            eval: EvalConfig::default(),
            complexity: SweepConfig::default(),
            passk_example: PasskExample::default(),
            run: RunConfig::default(),
        }
    }

    /// Seconds-scale preset for smoke tests and reproducibility checks.
    pub fn quick() -> ExperimentConfig {
        ExperimentConfig {
            data: DataConfig {
                k: 12,
                seq_len: 12,
                n_train_teacher: 256,
                n_train_student: 128,
                n_eval: 96,
                trigger_count: 2,
                per_trigger_targets: false,
                seed: 11,
                build: BuildOptions::default(),
            },
            teacher: ModelSection {
                n_layers: 2,
                d_model: 32,
                n_heads: 4,
                seed: 101,
                epochs: 2,
                batch_size: 32,
                base_lr: 1e-3,
                warmup_frac: 0.05,
                checkpoint_every: None,
            },
            student: ModelSection {
                n_layers: 2,
                d_model: 16,
                n_heads: 4,
                seed: 201,
                epochs: 2,
                batch_size: 32,
                base_lr: 1e-3,
                warmup_frac: 0.05,
                checkpoint_every: Some(4),
            },
            labels: LabelsConfig::default(),
            arms: vec![
                ArmConfig { name: "ce".into(), loss: LossSpec::hard_only() },
                ArmConfig { name: "kd".into(), loss: LossSpec::default() },
                ArmConfig {
                    name: "kd-routed".into(),
                    loss: LossSpec { routing_fraction: 0.5, ..Default::default() },
                },
            ],
            eval: EvalConfig {
                passk_n: 16,
                passk_ks: vec![1, 2, 4, 8, 16],
                passk_temperatures: vec![0.0, 1.0],
                intermediate_subset: 48,
                seed: 1234,
            },
            complexity: SweepConfig {
                k: 12,
                p: 6,
                epsilon: 0.2,
                grid: vec![256, 1024, 4096],
                trials: 5,
                seed: 7,
            },
            passk_example: PasskExample::default(),
            run: RunConfig { seeds: vec![1, 2], parallel: true },
        }
    }
}
