//! End-to-end steps over a run directory, as driven by the command line.
//!
//! ```text
//! <run_dir>/config.json          resolved config snapshot
//! <run_dir>/data/                corpus splits and manifest.json
//! <run_dir>/teacher/             checkpoint.bin, train_log.csv, eval_log.csv, metrics.json
//! <run_dir>/student/             same, for the distilled student
//! <run_dir>/gradcheck.json
//! <run_dir>/ablation/report.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{generate_corpus, tokenize_all, Corpus, Manifest, SyntheticGrammar, MANIFEST_FILE};
use crate::distillation::{objective_gradient_check, ObjectiveGradCheck};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::training::{
    distill_student, evaluate, initial_student, run_ablation, train_teacher, AblationReport,
    ArmRun, Checkpoint, EvalSet, TrainOutcome,
};
use crate::transformer::{ModelConfig, ParameterSet};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const EVAL_LOG_FILE: &str = "eval_log.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const GRADCHECK_FILE: &str = "gradcheck.json";
pub const ABLATION_FILE: &str = "report.json";

/// Relative-error threshold the gradient check must meet.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn teacher(&self) -> PathBuf {
        self.root.join("teacher")
    }

    pub fn student(&self) -> PathBuf {
        self.root.join("student")
    }

    pub fn ablation(&self) -> PathBuf {
        self.root.join("ablation")
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write(path, &s)
}

/// The corpus of a run, tokenised.
pub struct LoadedCorpus {
    pub grammar: SyntheticGrammar,
    pub manifest: Manifest,
    pub corpus: Corpus,
    pub train: Vec<Vec<usize>>,
    pub eval: Vec<Vec<usize>>,
}

impl LoadedCorpus {
    pub fn eval_set(&self) -> EvalSet<'_> {
        EvalSet {
            sequences: &self.eval,
            pairs: &self.corpus.pairs,
            vocab: self.grammar.vocab(),
        }
    }
}

/// Generates the corpus in memory without touching disk.
pub fn build_corpus(cfg: &RunConfig) -> Result<LoadedCorpus> {
    let grammar = SyntheticGrammar::new(cfg.data.grammar.clone())?;
    let corpus = generate_corpus(&grammar, cfg.data.n_sequences, cfg.data.train_fraction, cfg.data.seed)?;
    let manifest = Manifest::new(&grammar, &corpus, cfg.data.seed, cfg.data.train_fraction);
    tokenised(grammar, manifest, corpus)
}

fn tokenised(grammar: SyntheticGrammar, manifest: Manifest, corpus: Corpus) -> Result<LoadedCorpus> {
    let train = tokenize_all(grammar.vocab(), &corpus.train)?;
    let eval = tokenize_all(grammar.vocab(), &corpus.eval)?;
    Ok(LoadedCorpus {
        grammar,
        manifest,
        corpus,
        train,
        eval,
    })
}

pub fn gen_data(cfg: &RunConfig) -> Result<Manifest> {
    let run = RunDir::new(&cfg.output.run_dir);
    cfg.write_snapshot(run.root())?;
    let loaded = build_corpus(cfg)?;
    loaded.corpus.write(&run.data(), &loaded.manifest)?;
    Ok(loaded.manifest)
}

/// Reads the run's corpus and checks it was generated from this config's
/// data section.
pub fn load_corpus(cfg: &RunConfig) -> Result<LoadedCorpus> {
    let dir = RunDir::new(&cfg.output.run_dir).data();
    let manifest = Manifest::read(&dir.join(MANIFEST_FILE))?;
    if manifest.grammar != cfg.data.grammar
        || manifest.seed != cfg.data.seed
        || manifest.n_sequences != cfg.data.n_sequences
        || manifest.train_fraction != cfg.data.train_fraction
    {
        return Err(Error::config(
            "data",
            format!("{} was generated from different data settings; rerun gen-data", dir.display()),
        ));
    }
    let grammar = SyntheticGrammar::new(manifest.grammar.clone())?;
    let corpus = Corpus::read(&dir)?;
    tokenised(grammar, manifest, corpus)
}

fn save_outcome(dir: &Path, out: &TrainOutcome, metrics: &MetricsReport) -> Result<()> {
    out.checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
    write(&dir.join(TRAIN_LOG_FILE), &out.log.to_csv())?;
    write(&dir.join(EVAL_LOG_FILE), &out.log.evals_csv())?;
    write_json(&dir.join(METRICS_FILE), metrics)
}

pub fn run_train_teacher(cfg: &RunConfig) -> Result<MetricsReport> {
    let run = RunDir::new(&cfg.output.run_dir);
    let data = load_corpus(cfg)?;
    cfg.write_snapshot(run.root())?;
    let out = train_teacher(&cfg.model.teacher, &cfg.training.teacher, &data.train, &data.eval)?;
    let metrics = evaluate(&out.checkpoint.parameter_set()?, &data.eval_set())?;
    save_outcome(&run.teacher(), &out, &metrics)?;
    Ok(metrics)
}

pub fn load_teacher(cfg: &RunConfig) -> Result<Checkpoint> {
    let path = RunDir::new(&cfg.output.run_dir).teacher().join(CHECKPOINT_FILE);
    Checkpoint::load_expecting(&path, &cfg.model.teacher)
}

pub fn run_distill(cfg: &RunConfig) -> Result<MetricsReport> {
    let run = RunDir::new(&cfg.output.run_dir);
    let data = load_corpus(cfg)?;
    let teacher = load_teacher(cfg)?;
    cfg.write_snapshot(run.root())?;
    let out = distill_student(
        &teacher,
        &cfg.model.student,
        &cfg.distillation,
        &cfg.training.student,
        &data.train,
        &data.eval,
    )?;
    let metrics = evaluate(&out.checkpoint.parameter_set()?, &data.eval_set())?;
    save_outcome(&run.student(), &out, &metrics)?;
    Ok(metrics)
}

/// Evaluates `checkpoint` (default: the run's student) and writes
/// `metrics.json` next to it.
pub fn run_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(PathBuf, MetricsReport)> {
    let run = RunDir::new(&cfg.output.run_dir);
    let path = checkpoint.map_or_else(|| run.student().join(CHECKPOINT_FILE), Path::to_path_buf);
    let data = load_corpus(cfg)?;
    let ckpt = Checkpoint::load(&path)?;
    if ckpt.model_config.vocab_size != data.grammar.vocab().len() {
        return Err(Error::Checkpoint(format!(
            "{} has vocabulary {}, corpus has {}",
            path.display(),
            ckpt.model_config.vocab_size,
            data.grammar.vocab().len()
        )));
    }
    let metrics = evaluate(&ckpt.parameter_set()?, &data.eval_set())?;
    let out = path.with_file_name(METRICS_FILE);
    write_json(&out, &metrics)?;
    Ok((out, metrics))
}

/// Metrics of the student before any distillation step.
pub fn evaluate_initial_student(cfg: &RunConfig, teacher: &Checkpoint, data: &LoadedCorpus) -> Result<MetricsReport> {
    let objective = crate::distillation::DistillationObjective::new(
        &cfg.distillation,
        &teacher.model_config,
        &cfg.model.student,
    )?;
    let student: ParameterSet =
        initial_student(&teacher.parameter_set()?, &cfg.model.student, &cfg.distillation, &objective)?;
    evaluate(&student, &data.eval_set())
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckSummary {
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub passed: bool,
    pub per_seed: Vec<ObjectiveGradCheck>,
}

/// Tiny teacher/student pair used for gradient checks: 2 layers, width 8,
/// 2 heads, 4 positions, 16 symbols.
pub fn gradcheck_models(seed: u64) -> (ModelConfig, ModelConfig) {
    let tiny = |seed| ModelConfig {
        vocab_size: 16,
        num_layers: 2,
        hidden_dim: 8,
        num_heads: 2,
        ffn_dim: 16,
        max_seq_len: 4,
        seed,
    };
    (tiny(seed), tiny(seed.wrapping_add(1)))
}

/// Finite-difference check of the configured objective on tiny models, one
/// check per seed.
pub fn run_gradcheck(cfg: &RunConfig, n_seeds: usize) -> Result<GradCheckSummary> {
    let mut per_seed = Vec::with_capacity(n_seeds);
    for s in 0..n_seeds as u64 {
        let (t, st) = gradcheck_models(cfg.seed.wrapping_add(2 * s));
        per_seed.push(objective_gradient_check(&cfg.distillation, &t, &st, s, 1e-5)?);
    }
    let max_rel_error = per_seed.iter().map(ObjectiveGradCheck::max).fold(0.0, f64::max);
    let summary = GradCheckSummary {
        tolerance: GRADCHECK_TOLERANCE,
        max_rel_error,
        passed: max_rel_error < GRADCHECK_TOLERANCE,
        per_seed,
    };
    let run = RunDir::new(&cfg.output.run_dir);
    cfg.write_snapshot(run.root())?;
    write_json(&run.root().join(GRADCHECK_FILE), &summary)?;
    Ok(summary)
}

pub fn run_ablate(cfg: &RunConfig, on_run: impl FnMut(&str, &ArmRun)) -> Result<AblationReport> {
    let run = RunDir::new(&cfg.output.run_dir);
    let data = load_corpus(cfg)?;
    let teacher = load_teacher(cfg)?;
    cfg.write_snapshot(run.root())?;
    let report = run_ablation(
        &teacher,
        &cfg.model.student,
        &cfg.distillation,
        &cfg.training.student,
        &data.train,
        &data.eval_set(),
        cfg.ablation.n_seeds,
        cfg.seed,
        on_run,
    )?;
    write_json(&run.ablation().join(ABLATION_FILE), &report)?;
    Ok(report)
}
