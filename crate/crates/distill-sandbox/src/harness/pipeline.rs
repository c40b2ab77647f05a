//! The staged experiment pipeline.
//!
//! Six stages, each reading the previous stage's artifacts from disk and
//! writing its own: generate data, train the teacher, cache its labels,
//! train the students, evaluate everything, emit figure tables. A stage
//! whose outputs already exist is skipped, so an interrupted run picks up
//! where it stopped; `run.json` pins the config hash so a directory can
//! never mix two experiments.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{build_eval_set, probe_model, InductionAccuracy, KlByClass};
use crate::harness::config::ExperimentConfig;
use crate::harness::figures;
use crate::harness::store::{read_json, write_json_atomic, RunDirs, RunManifest};
use crate::loss::{build_label_archive, LabelArchive, SparsityMode};
use crate::markov::{
    build_matrix, sample_sequences, sample_sequences_per_trigger, SequenceDataset,
    TransitionMatrix, TriggerSpec,
};
use crate::model::{
    load_checkpoint, save_checkpoint, train, TrainOptions, TrainOutcome,
};
use crate::passk::{collect_induction_items, score_induction_items, PassKCurve};
use crate::tabular::run_complexity_sweep;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Generate,
    TrainTeacher,
    CacheLabels,
    TrainStudents,
    Eval,
    Figures,
}

impl Stage {
    pub fn all() -> [Stage; 6] {
        [
            Stage::Generate,
            Stage::TrainTeacher,
            Stage::CacheLabels,
            Stage::TrainStudents,
            Stage::Eval,
            Stage::Figures,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::TrainTeacher => "train-teacher",
            Stage::CacheLabels => "cache-labels",
            Stage::TrainStudents => "train-students",
            Stage::Eval => "eval",
            Stage::Figures => "figures",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Stage> {
        match s {
            "generate" => Ok(Stage::Generate),
            "train-teacher" => Ok(Stage::TrainTeacher),
            "cache-labels" => Ok(Stage::CacheLabels),
            "train-student" | "train-students" => Ok(Stage::TrainStudents),
            "eval" => Ok(Stage::Eval),
            "figures" => Ok(Stage::Figures),
            other => Err(Error::InvalidArgument(format!(
                "unknown stage {other:?}; one of generate, train-teacher, cache-labels, \
                 train-students, eval, figures"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StageReport {
    pub stage: Stage,
    pub skipped: bool,
    pub artifacts: Vec<PathBuf>,
}

/// One model's measurements in the metrics document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelProbe {
    pub induction: InductionAccuracy,
    pub kl: KlByClass,
    /// Sequences this probe ran over.
    pub eval_sequences: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub samples_seen: u64,
    pub probe: ModelProbe,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelMetrics {
    /// `"teacher"` or an arm name.
    pub model: String,
    pub seed: u64,
    /// Full-set probe of the trained model.
    pub last: ModelProbe,
    /// One sampled curve per configured temperature.
    pub passk: Vec<PassKCurve>,
    /// Subset probes at checkpoints, ending with the full-set final point.
    pub curve: Vec<CurvePoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsDoc {
    pub config_hash: String,
    pub models: Vec<ModelMetrics>,
}

pub struct Pipeline {
    pub config: ExperimentConfig,
    pub dirs: RunDirs,
    parallel: bool,
}

impl Pipeline {
    pub fn new(config: ExperimentConfig, out: &Path, single_thread: bool) -> Result<Pipeline> {
        config.validate()?;
        let dirs = RunDirs::new(out);
        dirs.ensure()?;
        let parallel = config.run.parallel && !single_thread;
        Ok(Pipeline { config, dirs, parallel })
    }

    /// Runs every stage up to and including `last`, skipping completed ones.
    pub fn run_through(&self, last: Stage) -> Result<Vec<StageReport>> {
        Stage::all()
            .iter()
            .take_while(|&&s| s <= last)
            .map(|&s| self.run_stage(s))
            .collect()
    }

    pub fn run_stage(&self, stage: Stage) -> Result<StageReport> {
        match stage {
            Stage::TrainStudents => self.run_train_students(None),
            _ => self.run_named(stage, None),
        }
    }

    /// The student-training stage restricted to one arm.
    pub fn train_one_arm(&self, arm: &str) -> Result<StageReport> {
        if !self.config.arms.iter().any(|a| a.name == arm) {
            return Err(Error::InvalidArgument(format!(
                "no arm named {arm:?}; configured arms: {}",
                self.config
                    .arms
                    .iter()
                    .map(|a| a.name.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            )));
        }
        self.run_train_students(Some(arm))
    }

    fn run_named(&self, stage: Stage, only_arm: Option<&str>) -> Result<StageReport> {
        let mut manifest =
            RunManifest::load_or_new(&self.dirs.manifest(), &self.config.config_hash())?;
        let outputs = self.expected_outputs(stage, only_arm);
        if manifest.completed(stage.name()) && outputs.iter().all(|p| p.exists()) {
            return Ok(StageReport { stage, skipped: true, artifacts: outputs });
        }
        let wrap = |e: Error| match e {
            e @ (Error::Config(_) | Error::InvalidArgument(_)) => e,
            e => Error::Stage { stage: stage.name().into(), detail: e.to_string() },
        };
        match stage {
            Stage::Generate => self.generate().map_err(wrap)?,
            Stage::TrainTeacher => self.train_teacher().map_err(wrap)?,
            Stage::CacheLabels => self.cache_labels().map_err(wrap)?,
            Stage::TrainStudents => self.train_students(only_arm).map_err(wrap)?,
            Stage::Eval => self.eval_stage().map_err(wrap)?,
            Stage::Figures => self.figures_stage().map_err(wrap)?,
        }
        let recorded: BTreeMap<String, String> = outputs
            .iter()
            .map(|p| Ok((artifact_key(&self.dirs.root, p), file_id(p)?)))
            .collect::<Result<_>>()?;
        // a partial arm run must not mark the whole stage complete
        if only_arm.is_none() {
            manifest.record(stage.name(), recorded);
            write_json_atomic(&self.dirs.manifest(), &manifest)?;
        }
        Ok(StageReport { stage, skipped: false, artifacts: outputs })
    }

    fn run_train_students(&self, only_arm: Option<&str>) -> Result<StageReport> {
        self.run_named(Stage::TrainStudents, only_arm)
    }

    /// Standalone closed-form best-of-k tables; no trained models involved.
    pub fn analytic_tables(&self) -> Result<Vec<PathBuf>> {
        figures::write_alpha_star_table(&self.dirs, &self.config)?;
        figures::write_classifier_table(&self.dirs, &self.config)?;
        Ok(vec![self.dirs.table("fig_alpha_star"), self.dirs.table("fig_classifier_curves")])
    }

    /// Standalone estimator sample-complexity sweep and its table.
    pub fn complexity_tables(&self) -> Result<Vec<PathBuf>> {
        let outcome = if self.dirs.complexity().exists() {
            read_json(&self.dirs.complexity())?
        } else {
            let outcome = run_complexity_sweep(&self.config.complexity)?;
            write_json_atomic(&self.dirs.complexity(), &outcome)?;
            outcome
        };
        figures::write_complexity_table(&self.dirs, &self.config, &outcome)?;
        Ok(vec![self.dirs.complexity(), self.dirs.table("fig_complexity")])
    }

    fn expected_outputs(&self, stage: Stage, only_arm: Option<&str>) -> Vec<PathBuf> {
        let d = &self.dirs;
        match stage {
            Stage::Generate => {
                vec![d.matrix(), d.teacher_train(), d.student_train(), d.eval_set()]
            }
            Stage::TrainTeacher => {
                let mut out = vec![d.teacher_model(), d.teacher_trace()];
                for step in self.teacher_checkpoint_steps() {
                    out.push(d.teacher_checkpoint(step));
                }
                out
            }
            Stage::CacheLabels => vec![d.labels()],
            Stage::TrainStudents => {
                let mut out = Vec::new();
                for arm in &self.config.arms {
                    if only_arm.is_some_and(|only| only != arm.name) {
                        continue;
                    }
                    for &seed in &self.config.run.seeds {
                        out.push(d.student_model(&arm.name, seed));
                        out.push(d.student_trace(&arm.name, seed));
                        for step in self.student_checkpoint_steps() {
                            out.push(d.student_checkpoint(&arm.name, seed, step));
                        }
                    }
                }
                out
            }
            Stage::Eval => vec![d.metrics()],
            Stage::Figures => {
                let mut out: Vec<PathBuf> = figures::TABLE_NAMES
                    .iter()
                    .map(|name| d.table(name))
                    .collect();
                out.push(d.complexity());
                out
            }
        }
    }

    fn teacher_checkpoint_steps(&self) -> Vec<u64> {
        checkpoint_steps(
            self.config.data.n_train_teacher,
            &self.config.teacher.train_options(self.parallel),
        )
    }

    fn student_checkpoint_steps(&self) -> Vec<u64> {
        checkpoint_steps(
            self.config.data.n_train_student,
            &self.config.student.train_options(self.parallel),
        )
    }

    fn generate(&self) -> Result<()> {
        let data = &self.config.data;
        let matrix = build_matrix(data.k, &data.class_plan(), data.seed, &data.build)?;
        let triggers = TriggerSpec::draw(data.k, data.trigger_count, data.seed)?;
        let teacher_train = if data.per_trigger_targets {
            sample_sequences_per_trigger(&matrix, &triggers, data.n_train_teacher, data.seq_len, data.seed)?
        } else {
            sample_sequences(&matrix, &triggers, data.n_train_teacher, data.seq_len, data.seed)?
        };
        let student_train = teacher_train.take(data.n_train_student)?;
        let eval_set = build_eval_set(
            &matrix,
            &triggers,
            data.n_eval,
            data.seq_len,
            data.seed,
            data.per_trigger_targets,
        )?;
        matrix.save(&self.dirs.matrix())?;
        teacher_train.save(&self.dirs.teacher_train())?;
        student_train.save(&self.dirs.student_train())?;
        eval_set.save(&self.dirs.eval_set())?;
        Ok(())
    }

    fn train_teacher(&self) -> Result<()> {
        let train_set = SequenceDataset::load(&self.dirs.teacher_train())?;
        let section = &self.config.teacher;
        let outcome = train(
            &section.model_config(&self.config.data),
            &train_set,
            &crate::loss::LossSpec::hard_only(),
            None,
            &section.train_options(self.parallel),
            section.seed,
        )?;
        self.persist_outcome(
            &outcome,
            &self.dirs.teacher_model(),
            &self.dirs.teacher_trace(),
            |step| self.dirs.teacher_checkpoint(step),
        )
    }

    fn cache_labels(&self) -> Result<()> {
        let teacher = load_checkpoint(&self.dirs.teacher_model())?.params;
        let student_train = SequenceDataset::load(&self.dirs.student_train())?;
        let archive =
            build_label_archive(&teacher, &student_train, self.config.labels.temperature)?;
        archive.save(&self.dirs.labels())
    }

    fn train_students(&self, only_arm: Option<&str>) -> Result<()> {
        let student_train = SequenceDataset::load(&self.dirs.student_train())?;
        let wants_labels = self
            .config
            .arms
            .iter()
            .filter(|a| only_arm.is_none_or(|only| only == a.name))
            .any(|a| a.loss.alpha > 0.0);
        let base_archive = if wants_labels {
            Some(LabelArchive::load(&self.dirs.labels())?)
        } else {
            None
        };
        let section = &self.config.student;
        for arm in &self.config.arms {
            if only_arm.is_some_and(|only| only != arm.name) {
                continue;
            }
            // sparsified labels are shared by every seed of the arm, so seed
            // comparisons isolate initialization and batch order
            let arm_archive: Option<LabelArchive> = if arm.loss.alpha > 0.0 {
                let base = base_archive.as_ref().expect("archive loaded above");
                match (arm.loss.sparsity, arm.loss.sparsity_k) {
                    (SparsityMode::Dense, _) | (_, None) => None,
                    (mode, Some(keep)) => {
                        Some(base.sparsify(mode, Some(keep), self.config.data.seed)?)
                    }
                }
            } else {
                None
            };
            for &seed in &self.config.run.seeds {
                let model_path = self.dirs.student_model(&arm.name, seed);
                if model_path.exists() {
                    continue;
                }
                let labels = match (&arm_archive, arm.loss.alpha > 0.0) {
                    (Some(a), _) => Some(a),
                    (None, true) => base_archive.as_ref(),
                    (None, false) => None,
                };
                let mut mc = section.model_config(&self.config.data);
                mc.seed = seed;
                let outcome = train(
                    &mc,
                    &student_train,
                    &arm.loss,
                    labels,
                    &section.train_options(self.parallel),
                    seed,
                )?;
                self.persist_outcome(
                    &outcome,
                    &model_path,
                    &self.dirs.student_trace(&arm.name, seed),
                    |step| self.dirs.student_checkpoint(&arm.name, seed, step),
                )?;
            }
        }
        Ok(())
    }

    fn persist_outcome(
        &self,
        outcome: &TrainOutcome,
        model_path: &Path,
        trace_path: &Path,
        checkpoint_path: impl Fn(u64) -> PathBuf,
    ) -> Result<()> {
        let last = outcome.trace.last().expect("training ran at least one step");
        save_checkpoint(model_path, &outcome.params, None, last.step, last.samples_seen)?;
        for ck in &outcome.checkpoints {
            save_checkpoint(&checkpoint_path(ck.step), &ck.params, None, ck.step, ck.samples_seen)?;
        }
        write_json_atomic(trace_path, &outcome.trace)
    }

    fn eval_stage(&self) -> Result<()> {
        let matrix = TransitionMatrix::load(&self.dirs.matrix())?;
        let eval_set = SequenceDataset::load(&self.dirs.eval_set())?;
        let subset = eval_set.take(self.config.eval.intermediate_subset.min(eval_set.len()))?;

        let mut models = Vec::new();
        models.push(self.eval_one(
            "teacher",
            self.config.teacher.seed,
            &self.dirs.teacher_model(),
            &self.teacher_checkpoint_steps(),
            |step| self.dirs.teacher_checkpoint(step),
            &matrix,
            &eval_set,
            &subset,
        )?);
        for arm in &self.config.arms {
            for &seed in &self.config.run.seeds {
                models.push(self.eval_one(
                    &arm.name,
                    seed,
                    &self.dirs.student_model(&arm.name, seed),
                    &self.student_checkpoint_steps(),
                    |step| self.dirs.student_checkpoint(&arm.name, seed, step),
                    &matrix,
                    &eval_set,
                    &subset,
                )?);
            }
        }
        let doc = MetricsDoc { config_hash: self.config.config_hash(), models };
        write_json_atomic(&self.dirs.metrics(), &doc)
    }

    #[allow(clippy::too_many_arguments)]
    fn eval_one(
        &self,
        model: &str,
        seed: u64,
        final_path: &Path,
        ckpt_steps: &[u64],
        ckpt_path: impl Fn(u64) -> PathBuf,
        matrix: &TransitionMatrix,
        eval_set: &SequenceDataset,
        subset: &SequenceDataset,
    ) -> Result<ModelMetrics> {
        let e = &self.config.eval;
        let mut curve = Vec::new();
        for &step in ckpt_steps {
            let ck = load_checkpoint(&ckpt_path(step))?;
            let (induction, kl) = probe_model(&ck.params, matrix, subset)?;
            curve.push(CurvePoint {
                step: ck.step,
                samples_seen: ck.samples_seen,
                probe: ModelProbe { induction, kl, eval_sequences: subset.len() },
            });
        }
        let ck = load_checkpoint(final_path)?;
        let (induction, kl) = probe_model(&ck.params, matrix, eval_set)?;
        let last = ModelProbe { induction, kl, eval_sequences: eval_set.len() };
        curve.push(CurvePoint { step: ck.step, samples_seen: ck.samples_seen, probe: last.clone() });

        let items = collect_induction_items(&ck.params, eval_set)?;
        let passk = e
            .passk_temperatures
            .iter()
            .map(|&tau| {
                score_induction_items(&items, &e.passk_ks, e.passk_n as u32, tau, e.seed)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelMetrics { model: model.into(), seed, last, passk, curve })
    }

    fn figures_stage(&self) -> Result<()> {
        if !self.dirs.metrics().exists() {
            return Err(Error::Stage {
                stage: "figures".into(),
                detail: "eval metrics missing; run the eval stage first".into(),
            });
        }
        let metrics: MetricsDoc = read_json(&self.dirs.metrics())?;
        figures::write_kl_table(&self.dirs, &self.config, &metrics)?;
        figures::write_induction_table(&self.dirs, &self.config, &metrics)?;
        figures::write_passk_table(&self.dirs, &self.config, &metrics)?;
        self.analytic_tables()?;
        self.complexity_tables()?;
        Ok(())
    }
}

/// Steps at which training snapshots parameters, mirroring the training
/// loop's cadence: every `checkpoint_every` steps, final step excluded.
pub fn checkpoint_steps(n_sequences: usize, options: &TrainOptions) -> Vec<u64> {
    let steps_per_epoch = n_sequences.div_ceil(options.batch_size);
    let total = (options.epochs * steps_per_epoch) as u64;
    match options.checkpoint_every {
        Some(every) => (1..total).filter(|s| s % every == 0).collect(),
        None => Vec::new(),
    }
}

fn artifact_key(root: &Path, path: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).to_string_lossy().into_owned()
}

/// First 8 bytes of the file's SHA-256, hex.
fn file_id(path: &Path) -> Result<String> {
    use std::io::Read;
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect())
}
