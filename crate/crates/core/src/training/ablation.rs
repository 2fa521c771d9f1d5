use serde::Serialize;

use super::{distill_student, evaluate, Checkpoint, EvalSet, TrainingConfig};
use crate::config::derive_seed;
use crate::distillation::DistillationConfig;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::transformer::ModelConfig;

pub const ARM_SOFT_ONLY: &str = "Distillation Model Only";
pub const ARM_FEATURE_ONLY: &str = "Feature Alignment Model Only";
pub const ARM_JOINT: &str = "Ours";

/// (name, α, β, γ, δ)
const ARMS: [(&str, f64, f64, f64, f64); 3] = [
    (ARM_SOFT_ONLY, 1.0, 0.0, 0.0, 0.0),
    (ARM_FEATURE_ONLY, 0.0, 1.0, 1.0, 1.0),
    (ARM_JOINT, 1.0, 1.0, 1.0, 1.0),
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmRun {
    pub seed_index: usize,
    pub student_seed: u64,
    pub shuffle_seed: u64,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmReport {
    pub name: String,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub runs: Vec<ArmRun>,
    pub median_perplexity: f64,
    pub median_bleu: f64,
    pub median_rouge_l_f1: f64,
    pub median_cer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub n_seeds: usize,
    pub arms: Vec<ArmReport>,
    /// Arm names sorted by median perplexity, best first.
    pub ordering: Vec<String>,
    /// The joint arm's median perplexity is strictly below both others.
    pub joint_beats_both: bool,
}

impl AblationReport {
    pub fn arm(&self, name: &str) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.name == name)
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trains the soft-only, feature-only and joint arms for each of `n_seeds`
/// seeds and evaluates every student. Within a seed all arms share the
/// teacher, the student initialisation and the batch order. `on_run` sees
/// each finished run.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    teacher: &Checkpoint,
    student_config: &ModelConfig,
    base: &DistillationConfig,
    training: &TrainingConfig,
    train: &[Vec<usize>],
    eval: &EvalSet<'_>,
    n_seeds: usize,
    seed: u64,
    mut on_run: impl FnMut(&str, &ArmRun),
) -> Result<AblationReport> {
    if n_seeds < 3 {
        return Err(Error::config("ablation.n_seeds", format!("must be at least 3, got {n_seeds}")));
    }
    let mut runs: Vec<Vec<ArmRun>> = vec![Vec::new(); ARMS.len()];
    for i in 0..n_seeds {
        let run_seed = derive_seed(seed, &format!("ablation.{i}"));
        let student_seed = derive_seed(run_seed, "init");
        let shuffle_seed = derive_seed(run_seed, "shuffle");
        let scfg = ModelConfig {
            seed: student_seed,
            ..student_config.clone()
        };
        let tcfg = TrainingConfig {
            seed: shuffle_seed,
            ..training.clone()
        };
        for (k, &(name, a, b, g, d)) in ARMS.iter().enumerate() {
            let dcfg = base.with_weights(a, b, g, d);
            let out = distill_student(teacher, &scfg, &dcfg, &tcfg, train, eval.sequences)?;
            let metrics = evaluate(&out.checkpoint.parameter_set()?, eval)?;
            let run = ArmRun {
                seed_index: i,
                student_seed,
                shuffle_seed,
                metrics,
            };
            on_run(name, &run);
            runs[k].push(run);
        }
    }
    let arms: Vec<ArmReport> = ARMS
        .iter()
        .zip(runs)
        .map(|(&(name, alpha, beta, gamma, delta), runs)| {
            let col = |f: fn(&MetricsReport) -> f64| {
                median(&runs.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>())
            };
            ArmReport {
                name: name.to_string(),
                alpha,
                beta,
                gamma,
                delta,
                median_perplexity: col(|m| m.perplexity),
                median_bleu: col(|m| m.bleu),
                median_rouge_l_f1: col(|m| m.rouge_l_f1),
                median_cer: col(|m| m.cer),
                runs,
            }
        })
        .collect();
    let mut ordering: Vec<&ArmReport> = arms.iter().collect();
    ordering.sort_by(|a, b| a.median_perplexity.total_cmp(&b.median_perplexity));
    let joint = arms[2].median_perplexity;
    Ok(AblationReport {
        n_seeds,
        joint_beats_both: joint < arms[0].median_perplexity && joint < arms[1].median_perplexity,
        ordering: ordering.iter().map(|a| a.name.clone()).collect(),
        arms,
    })
}
