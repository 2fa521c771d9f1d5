//! Teacher pretraining, student distillation, evaluation, checkpoints, and
//! the ablation harness.

mod ablation;
mod checkpoint;
mod optim;

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use ablation::{
    run_ablation, AblationReport, ArmReport, ArmRun, ARM_FEATURE_ONLY, ARM_JOINT, ARM_SOFT_ONLY,
};
pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use optim::{adam_step, clip_global_norm, global_norm, AdamConfig, AdamState};

use crate::autograd::{no_grad, reset_tape, Tensor};
use crate::config::derive_seed;
use crate::data::{batch_iter, sequential_batches, Batch, PromptPair, Vocabulary};
use crate::distillation::{DistillationConfig, DistillationObjective, ProjectionHeads};
use crate::error::{Error, Result};
use crate::metrics::{generation_scores, perplexity_from_nll, MetricsReport};
use crate::transformer::{
    init_student_from_teacher, FeatureTap, Model, ModelConfig, NamedArray, ParameterSet,
};

const EVAL_BATCH: usize = 32;

pub const CSV_HEADER: &str =
    "step,loss_total,loss_soft,loss_feat,loss_multi,loss_att,grad_norm,wall_ms";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip_norm: Option<f64>,
    pub seed: u64,
    pub eval_every: usize,
    /// Log real elapsed milliseconds; off by default so logs are
    /// reproducible byte for byte.
    pub record_wall_time: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            steps: 200,
            batch_size: 8,
            seq_len: 25,
            learning_rate: 3e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip_norm: Some(1.0),
            seed: 0,
            eval_every: 200,
            record_wall_time: false,
        }
    }
}

impl TrainingConfig {
    /// Returns the offending field name on failure.
    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.batch_size == 0 {
            return Err(("batch_size", "must be positive".into()));
        }
        if self.seq_len < 2 {
            return Err(("seq_len", "must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(("learning_rate", "must be positive".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err((name, format!("must lie in (0, 1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(("adam_eps", "must be positive".into()));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return Err(("grad_clip_norm", "must be positive or null".into()));
            }
        }
        if self.eval_every == 0 || (self.steps > 0 && self.eval_every > self.steps) {
            return Err(("eval_every", format!("must lie in 1..={}", self.steps.max(1))));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            grad_clip_norm: self.grad_clip_norm,
        }
    }
}

/// One row of the training CSV. For teacher runs the component columns are
/// zero and `loss_total` is the cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss_total: f64,
    pub loss_soft: f64,
    pub loss_feat: f64,
    pub loss_multi: f64,
    pub loss_att: f64,
    pub grad_norm: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalPoint {
    pub step: usize,
    pub perplexity: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub steps: Vec<StepLog>,
    pub evals: Vec<EvalPoint>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.steps {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.step, r.loss_total, r.loss_soft, r.loss_feat, r.loss_multi, r.loss_att,
                r.grad_norm, r.wall_ms
            )
            .expect("writing to a String");
        }
        s
    }

    pub fn evals_csv(&self) -> String {
        let mut s = String::from("step,eval_perplexity\n");
        for e in &self.evals {
            writeln!(s, "{},{}", e.step, e.perplexity).expect("writing to a String");
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainingLog,
}

/// Held-out material for [`evaluate`].
#[derive(Debug, Clone, Copy)]
pub struct EvalSet<'a> {
    /// Tokenised eval sequences (`[bos, .., eos]`).
    pub sequences: &'a [Vec<usize>],
    pub pairs: &'a [PromptPair],
    pub vocab: &'a Vocabulary,
}

/// Mean next-token perplexity over `sequences`, scored up to the model's
/// context length, plus the number of scored tokens.
pub fn eval_perplexity(params: &ParameterSet, sequences: &[Vec<usize>]) -> Result<(f64, usize)> {
    let model = Model::bind(params, false);
    let seq = params.config.max_seq_len;
    let (mut nll, mut count) = (0.0, 0);
    for b in sequential_batches(sequences, EVAL_BATCH, seq) {
        let (s, c) = model.nll(&b.inputs, &b.targets, &b.mask, b.batch, b.seq)?;
        nll += s;
        count += c;
    }
    Ok((perplexity_from_nll(nll, count)?, count))
}

/// Greedy continuations of each prompt, as text.
pub fn generate_continuations(
    params: &ParameterSet,
    pairs: &[PromptPair],
    vocab: &Vocabulary,
) -> Result<Vec<String>> {
    let model = Model::bind(params, false);
    let framed: Vec<Vec<usize>> = pairs
        .iter()
        .map(|p| vocab.tokenize(&p.prompt))
        .collect::<Result<_>>()?;
    let prompts: Vec<&[usize]> = framed.iter().map(|f| &f[1..f.len() - 1]).collect();
    model
        .generate_greedy_batch(&prompts, params.config.max_seq_len)?
        .iter()
        .map(|ids| vocab.detokenize(ids))
        .collect()
}

/// Perplexity on the eval sequences and BLEU / ROUGE-L / CER of greedy
/// continuations against the reference continuations.
pub fn evaluate(params: &ParameterSet, set: &EvalSet<'_>) -> Result<MetricsReport> {
    if set.pairs.is_empty() {
        return Err(Error::Input("evaluation needs at least one prompt/reference pair".into()));
    }
    let (perplexity, n_eval_tokens) = eval_perplexity(params, set.sequences)?;
    let hyps = generate_continuations(params, set.pairs, set.vocab)?;
    let scored: Vec<(&str, &str)> = hyps
        .iter()
        .zip(set.pairs)
        .map(|(h, p)| (h.as_str(), p.reference.as_str()))
        .collect();
    let (bleu, rouge_l_f1, cer) = generation_scores(&scored)?;
    Ok(MetricsReport {
        perplexity,
        bleu,
        rouge_l_f1,
        cer,
        n_eval_tokens,
        n_generation_pairs: set.pairs.len(),
    })
}

struct LoopResult {
    arrays: Vec<NamedArray>,
    optimizer: AdamState,
    rng_state: crate::data::StreamState,
    log: TrainingLog,
}

/// Shared optimisation loop. `loss_fn` builds the loss for one batch from
/// freshly bound parameter tensors and returns it with the four logged
/// components.
fn run_loop(
    mut arrays: Vec<NamedArray>,
    cfg: &TrainingConfig,
    train: &[Vec<usize>],
    mut eval_fn: impl FnMut(&[NamedArray]) -> Result<f64>,
    mut loss_fn: impl FnMut(&[Tensor], &Batch) -> Result<(Tensor, [f64; 4])>,
) -> Result<LoopResult> {
    if train.is_empty() {
        return Err(Error::Input("training corpus is empty".into()));
    }
    let adam = cfg.adam();
    let mut optimizer = AdamState::new(&arrays);
    let mut stream = batch_iter(train, cfg.batch_size, cfg.seq_len, cfg.seed);
    let mut log = TrainingLog::default();
    let start = Instant::now();
    for step in 0..cfg.steps {
        let batch = stream.next().expect("batch stream is endless");
        reset_tape();
        let tensors: Vec<Tensor> = arrays.iter().map(|a| a.to_tensor(true)).collect();
        let (loss, parts) = loss_fn(&tensors, &batch)?;
        let total = loss.item();
        if !total.is_finite() || parts.iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence {
                step,
                msg: format!("non-finite loss {total} (components {parts:?})"),
            });
        }
        loss.backward()?;
        let mut grads: Vec<Vec<f64>> = tensors
            .iter()
            .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.len()]))
            .collect();
        drop(tensors);
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                step,
                msg: "non-finite gradient".into(),
            });
        }
        let grad_norm = adam_step(&mut arrays, &mut grads, &mut optimizer, &adam);
        log.steps.push(StepLog {
            step,
            loss_total: total,
            loss_soft: parts[0],
            loss_feat: parts[1],
            loss_multi: parts[2],
            loss_att: parts[3],
            grad_norm,
            wall_ms: if cfg.record_wall_time {
                start.elapsed().as_millis() as u64
            } else {
                0
            },
        });
        if (step + 1) % cfg.eval_every == 0 {
            log.evals.push(EvalPoint {
                step: step + 1,
                perplexity: eval_fn(&arrays)?,
            });
        }
    }
    reset_tape();
    Ok(LoopResult {
        arrays,
        optimizer,
        rng_state: stream.state(),
        log,
    })
}

fn validate(cfg: &TrainingConfig, model: &ModelConfig, who: &str) -> Result<()> {
    cfg.validate()
        .map_err(|(f, m)| Error::config(format!("training.{f}"), m))?;
    model
        .validate()
        .map_err(|(f, m)| Error::config(format!("model.{who}.{f}"), m))?;
    if cfg.seq_len > model.max_seq_len {
        return Err(Error::config(
            "training.seq_len",
            format!("{} exceeds model.{who}.max_seq_len {}", cfg.seq_len, model.max_seq_len),
        ));
    }
    Ok(())
}

/// Next-token cross-entropy pretraining from the seeded initialisation.
pub fn train_teacher(
    model_config: &ModelConfig,
    cfg: &TrainingConfig,
    train: &[Vec<usize>],
    eval: &[Vec<usize>],
) -> Result<TrainOutcome> {
    validate(cfg, model_config, "teacher")?;
    let init = ParameterSet::init(model_config)?;
    let mc = model_config.clone();
    let eval_fn = |arrays: &[NamedArray]| {
        let p = ParameterSet::from_arrays(mc.clone(), arrays.to_vec())?;
        Ok(eval_perplexity(&p, eval)?.0)
    };
    let r = run_loop(init.arrays, cfg, train, eval_fn, |tensors, b| {
        let model = Model::from_tensors(model_config.clone(), tensors.to_vec());
        let trace = model.forward(&b.inputs, b.batch, b.seq, FeatureTap::Residual)?;
        let ce = trace.logits.cross_entropy(&b.targets, &b.mask)?;
        Ok((ce, [0.0; 4]))
    })?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model_config: model_config.clone(),
            step: cfg.steps as u64,
            params: r.arrays,
            aux: Vec::new(),
            optimizer: r.optimizer,
            rng_state: Some(r.rng_state),
        },
        log: r.log,
    })
}

/// Student starting point: a copy of the mapped teacher layers where shapes
/// agree (when enabled), otherwise the student's seeded initialisation.
pub fn initial_student(
    teacher: &ParameterSet,
    student_config: &ModelConfig,
    dcfg: &DistillationConfig,
    objective: &DistillationObjective,
) -> Result<ParameterSet> {
    if dcfg.init_from_teacher {
        Ok(init_student_from_teacher(teacher, student_config, objective.layer_map())?.0)
    } else {
        ParameterSet::init(student_config)
    }
}

/// Trains a student against a frozen teacher with the weighted
/// distillation objective. Projection heads, when the widths differ, are
/// trained alongside and stored as auxiliary checkpoint arrays.
pub fn distill_student(
    teacher: &Checkpoint,
    student_config: &ModelConfig,
    dcfg: &DistillationConfig,
    cfg: &TrainingConfig,
    train: &[Vec<usize>],
    eval: &[Vec<usize>],
) -> Result<TrainOutcome> {
    validate(cfg, student_config, "student")?;
    let teacher_params = teacher.parameter_set()?;
    let tc = &teacher_params.config;
    if cfg.seq_len > tc.max_seq_len {
        return Err(Error::config(
            "training.seq_len",
            format!("{} exceeds the teacher's max_seq_len {}", cfg.seq_len, tc.max_seq_len),
        ));
    }
    let objective = DistillationObjective::new(dcfg, tc, student_config)?;
    let fingerprint = teacher_params.fingerprint();
    let teacher_model = Model::bind(&teacher_params, false);
    let student = initial_student(&teacher_params, student_config, dcfg, &objective)?;
    let heads = ProjectionHeads::init(
        objective.layer_map(),
        student_config.hidden_dim,
        tc.hidden_dim,
        derive_seed(student_config.seed, "projection"),
    );
    let n_model = student.arrays.len();
    let mut arrays = student.arrays;
    arrays.extend(heads.arrays);
    let tap = objective.feature_tap();
    let sc = student_config.clone();
    let eval_fn = |arrays: &[NamedArray]| {
        let p = ParameterSet::from_arrays(sc.clone(), arrays[..n_model].to_vec())?;
        Ok(eval_perplexity(&p, eval)?.0)
    };
    let r = run_loop(arrays, cfg, train, eval_fn, |tensors, b| {
        let t_trace = no_grad(|| teacher_model.forward(&b.inputs, b.batch, b.seq, tap))?;
        let model = Model::from_tensors(student_config.clone(), tensors[..n_model].to_vec());
        let s_trace = model.forward(&b.inputs, b.batch, b.seq, tap)?;
        let projections = ProjectionHeads::group(&tensors[n_model..]);
        let l = objective.compute(&s_trace, &t_trace, &projections)?;
        Ok((l.total, [l.soft, l.feat, l.multi, l.att]))
    })?;
    if teacher_params.fingerprint() != fingerprint {
        return Err(Error::Contract("teacher parameters changed during distillation".into()));
    }
    let mut arrays = r.arrays;
    let aux = arrays.split_off(n_model);
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model_config: student_config.clone(),
            step: cfg.steps as u64,
            params: arrays,
            aux,
            optimizer: r.optimizer,
            rng_state: Some(r.rng_state),
        },
        log: r.log,
    })
}
