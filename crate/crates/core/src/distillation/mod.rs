//! Distillation objectives: soft-label KL, feature alignment (cosine and
//! squared distance, single- and multi-layer), attention alignment, and
//! their weighted total. Also resolves depth mismatches (layer maps) and
//! width mismatches (trainable projection heads) between teacher and
//! student.

mod gradcheck;
mod layer_map;
mod losses;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use gradcheck::{objective_gradient_check, ObjectiveGradCheck};
pub use layer_map::{map_layers, LayerMap, LayerMapStrategy};
pub use losses::{
    attention_alignment_loss, feature_cosine_loss, feature_distance_loss,
    multi_layer_feature_loss, soft_label_loss, total_loss, HeadAlignment, KlDirection,
    LossComponents, Projection,
};

use crate::autograd::{no_grad, Reduction, Tensor};
use crate::error::{Error, Result};
use crate::transformer::{FeatureTap, ForwardTrace, ModelConfig, NamedArray};

/// Which feature-distance term fills the γ slot of the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaTerm {
    /// λ-weighted sum over every aligned pair.
    #[default]
    MultiLayer,
    /// Distance on the deepest aligned pair only.
    SingleLayer,
}

/// Every distillation knob as it appears in the run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillationConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub tau: f64,
    /// Per-pair weights λ_l; `None` means uniform `1/|map|`.
    pub lambdas: Option<Vec<f64>>,
    pub kl_direction: KlDirection,
    pub tau2_scaling: bool,
    pub distance_reduction: Reduction,
    pub gamma_term: GammaTerm,
    pub attention_heads: HeadAlignment,
    pub feature_tap: FeatureTap,
    pub layer_map: LayerMapStrategy,
    pub init_from_teacher: bool,
}

impl Default for DistillationConfig {
    fn default() -> Self {
        DistillationConfig {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            delta: 1.0,
            tau: 2.0,
            lambdas: None,
            kl_direction: KlDirection::TeacherToStudent,
            tau2_scaling: true,
            distance_reduction: Reduction::Mean,
            gamma_term: GammaTerm::MultiLayer,
            attention_heads: HeadAlignment::Average,
            feature_tap: FeatureTap::Residual,
            layer_map: LayerMapStrategy::Uniform,
            init_from_teacher: true,
        }
    }
}

impl DistillationConfig {
    /// Returns the offending field name on failure.
    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        for (name, w) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("delta", self.delta),
        ] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err((name, format!("must be a finite nonnegative weight, got {w}")));
            }
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(("tau", format!("must be positive, got {}", self.tau)));
        }
        if let Some(l) = &self.lambdas {
            if l.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
                return Err(("lambdas", "weights must be finite and nonnegative".into()));
            }
        }
        Ok(())
    }

    /// Copy with the four loss weights replaced.
    pub fn with_weights(&self, alpha: f64, beta: f64, gamma: f64, delta: f64) -> Self {
        DistillationConfig {
            alpha,
            beta,
            gamma,
            delta,
            ..self.clone()
        }
    }
}

/// Resolved loss weights for one teacher/student pairing.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistillationWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub tau: f64,
    pub lambda_per_layer: Vec<f64>,
    pub kl_direction: KlDirection,
}

/// Trainable width-reconciling heads, one per aligned pair, present exactly
/// when student and teacher widths differ.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHeads {
    pub arrays: Vec<NamedArray>,
}

impl ProjectionHeads {
    /// Weights from N(0, 1/student_dim), biases zero.
    pub fn init(map: &LayerMap, student_dim: usize, teacher_dim: usize, seed: u64) -> Self {
        if student_dim == teacher_dim {
            return ProjectionHeads { arrays: Vec::new() };
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (student_dim as f64).sqrt()).expect("valid normal");
        let mut arrays = Vec::with_capacity(2 * map.len());
        for i in 0..map.len() {
            arrays.push(NamedArray {
                name: format!("proj.{i}.weight"),
                shape: vec![student_dim, teacher_dim],
                data: (0..student_dim * teacher_dim)
                    .map(|_| normal.sample(&mut rng))
                    .collect(),
            });
            arrays.push(NamedArray {
                name: format!("proj.{i}.bias"),
                shape: vec![teacher_dim],
                data: vec![0.0; teacher_dim],
            });
        }
        ProjectionHeads { arrays }
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Tensors in array order (weight, bias, weight, bias, ...).
    pub fn to_tensors(&self, trainable: bool) -> Vec<Tensor> {
        self.arrays.iter().map(|a| a.to_tensor(trainable)).collect()
    }

    /// Groups tensors from [`ProjectionHeads::to_tensors`] per pair.
    pub fn group(tensors: &[Tensor]) -> Vec<Option<Projection>> {
        tensors
            .chunks(2)
            .map(|c| {
                Some(Projection {
                    weight: c[0].clone(),
                    bias: c[1].clone(),
                })
            })
            .collect()
    }
}

/// Per-step loss values. `total` stays on the tape; the components are
/// plain numbers for logging.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: Tensor,
    pub soft: f64,
    pub feat: f64,
    pub multi: f64,
    pub att: f64,
}

/// The weighted multi-term objective for a fixed teacher/student pairing.
#[derive(Debug, Clone)]
pub struct DistillationObjective {
    weights: DistillationWeights,
    map: LayerMap,
    config: DistillationConfig,
}

impl DistillationObjective {
    pub fn new(
        config: &DistillationConfig,
        teacher: &ModelConfig,
        student: &ModelConfig,
    ) -> Result<Self> {
        config
            .validate()
            .map_err(|(f, m)| Error::config(format!("distillation.{f}"), m))?;
        if teacher.vocab_size != student.vocab_size {
            return Err(Error::config(
                "model.student.vocab_size",
                "teacher and student must share a vocabulary",
            ));
        }
        if config.attention_heads == HeadAlignment::PerHead && teacher.num_heads != student.num_heads {
            return Err(Error::config(
                "distillation.attention_heads",
                "per-head alignment needs equal head counts",
            ));
        }
        let map = map_layers(teacher.num_layers, student.num_layers, config.layer_map.clone())?;
        let lambda_per_layer = match &config.lambdas {
            Some(l) if l.len() != map.len() => {
                return Err(Error::config(
                    "distillation.lambdas",
                    format!("{} weights for {} aligned layer pairs", l.len(), map.len()),
                ))
            }
            Some(l) => l.clone(),
            None => vec![1.0 / map.len() as f64; map.len()],
        };
        Ok(DistillationObjective {
            weights: DistillationWeights {
                alpha: config.alpha,
                beta: config.beta,
                gamma: config.gamma,
                delta: config.delta,
                tau: config.tau,
                lambda_per_layer,
                kl_direction: config.kl_direction,
            },
            map,
            config: config.clone(),
        })
    }

    pub fn weights(&self) -> &DistillationWeights {
        &self.weights
    }

    pub fn layer_map(&self) -> &LayerMap {
        &self.map
    }

    pub fn feature_tap(&self) -> FeatureTap {
        self.config.feature_tap
    }

    fn deepest(&self, trace: &ForwardTrace, teacher: bool) -> Result<Tensor> {
        let &(s, t) = self
            .map
            .pairs()
            .last()
            .ok_or_else(|| Error::Contract("empty layer map".into()))?;
        let idx = if teacher { t } else { s } - 1;
        Ok(trace.features[idx].clone())
    }

    /// Every component plus the weighted total for one batch. Components
    /// with zero weight are evaluated off the tape.
    pub fn compute(
        &self,
        student: &ForwardTrace,
        teacher: &ForwardTrace,
        projections: &[Option<Projection>],
    ) -> Result<LossBreakdown> {
        let w = &self.weights;
        let c = self.components_inner(student, teacher, projections, true)?;
        let total = total_loss(&c, w.alpha, w.beta, w.gamma, w.delta)?;
        Ok(LossBreakdown {
            total,
            soft: c.soft.item(),
            feat: c.feat.item(),
            multi: c.dist.item(),
            att: c.att.item(),
        })
    }

    /// All four components, each recorded on the tape regardless of weight.
    pub fn components(
        &self,
        student: &ForwardTrace,
        teacher: &ForwardTrace,
        projections: &[Option<Projection>],
    ) -> Result<LossComponents> {
        self.components_inner(student, teacher, projections, false)
    }

    fn components_inner(
        &self,
        student: &ForwardTrace,
        teacher: &ForwardTrace,
        projections: &[Option<Projection>],
        skip_unweighted: bool,
    ) -> Result<LossComponents> {
        let w = &self.weights;
        let cfg = &self.config;
        let component = |weight: f64, f: &dyn Fn() -> Result<Tensor>| {
            if skip_unweighted && weight == 0.0 {
                no_grad(f)
            } else {
                f()
            }
        };
        let last_proj = projections.last().and_then(Option::as_ref);
        let soft = component(w.alpha, &|| {
            soft_label_loss(&student.logits, &teacher.logits, w.tau, w.kl_direction, cfg.tau2_scaling)
        })?;
        let feat = component(w.beta, &|| {
            feature_cosine_loss(&self.deepest(student, false)?, &self.deepest(teacher, true)?, last_proj)
        })?;
        let dist = component(w.gamma, &|| match cfg.gamma_term {
            GammaTerm::MultiLayer => multi_layer_feature_loss(
                student,
                teacher,
                &self.map,
                &w.lambda_per_layer,
                projections,
                cfg.distance_reduction,
            ),
            GammaTerm::SingleLayer => feature_distance_loss(
                &self.deepest(student, false)?,
                &self.deepest(teacher, true)?,
                last_proj,
                cfg.distance_reduction,
            ),
        })?;
        let att = component(w.delta, &|| {
            attention_alignment_loss(&student.attentions, &teacher.attentions, &self.map, cfg.attention_heads)
        })?;
        Ok(LossComponents { soft, feat, dist, att })
    }
}
