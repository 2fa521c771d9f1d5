//! The individual alignment objectives between a student and a (detached)
//! teacher.

use serde::{Deserialize, Serialize};

use super::layer_map::LayerMap;
use crate::autograd::{Reduction, Tensor};
use crate::error::{Error, Result};
use crate::transformer::ForwardTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(p_teacher ‖ p_student)`, the usual distillation direction.
    #[default]
    TeacherToStudent,
    /// `KL(p_student ‖ p_teacher)`.
    StudentToTeacher,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadAlignment {
    /// Average each model's maps over heads before comparing; works for any
    /// head counts.
    #[default]
    Average,
    /// Compare head by head; requires equal head counts.
    PerHead,
}

/// Trainable student-side linear map `[student_dim → teacher_dim]`.
#[derive(Debug, Clone)]
pub struct Projection {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Projection {
    pub fn apply(&self, features: &Tensor) -> Result<Tensor> {
        features.matmul(&self.weight)?.add(&self.bias)
    }
}

fn project(f_student: &Tensor, projection: Option<&Projection>) -> Result<Tensor> {
    match projection {
        Some(p) => p.apply(f_student),
        None => Ok(f_student.clone()),
    }
}

fn contract_shapes(what: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "{what}: student {:?} vs teacher {:?}",
            a.shape(),
            b.shape()
        )))
    }
}

/// KL divergence between temperature-softened output distributions, averaged
/// over every `[batch, seq]` position, times `tau²` when `tau2_scaling`.
pub fn soft_label_loss(
    student_logits: &Tensor,
    teacher_logits: &Tensor,
    tau: f64,
    direction: KlDirection,
    tau2_scaling: bool,
) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    contract_shapes("soft_label_loss", student_logits, teacher_logits)?;
    let p_s = student_logits.softmax(tau)?;
    let p_t = teacher_logits.detach().softmax(tau)?;
    let kl = match direction {
        KlDirection::TeacherToStudent => p_t.kl_divergence(&p_s)?,
        KlDirection::StudentToTeacher => p_s.kl_divergence(&p_t)?,
    };
    Ok(if tau2_scaling { kl.scale(tau * tau) } else { kl })
}

/// Mean over token positions of `1 − cos(F_T, F_S)` along the hidden axis.
pub fn feature_cosine_loss(
    f_student: &Tensor,
    f_teacher: &Tensor,
    projection: Option<&Projection>,
) -> Result<Tensor> {
    let f_s = project(f_student, projection)?;
    contract_shapes("feature_cosine_loss", &f_s, f_teacher)?;
    Ok(f_s
        .cosine_similarity(&f_teacher.detach())?
        .mean()
        .neg()
        .add_scalar(1.0))
}

/// Squared Euclidean distance between (projected) student and teacher
/// features, mean-normalised by element count unless `Reduction::Sum`.
pub fn feature_distance_loss(
    f_student: &Tensor,
    f_teacher: &Tensor,
    projection: Option<&Projection>,
    reduction: Reduction,
) -> Result<Tensor> {
    let f_s = project(f_student, projection)?;
    contract_shapes("feature_distance_loss", &f_s, f_teacher)?;
    f_s.squared_l2_distance(&f_teacher.detach(), reduction)
}

fn layer_pair<'a>(
    trace: &'a ForwardTrace,
    layer: usize,
    who: &str,
) -> Result<(&'a Tensor, &'a Tensor)> {
    let i = layer
        .checked_sub(1)
        .filter(|&i| i < trace.features.len())
        .ok_or_else(|| Error::Contract(format!("{who} has no layer {layer}")))?;
    Ok((&trace.features[i], &trace.attentions[i]))
}

/// `Σ_l λ_l · feature_distance_loss` over the mapped layer pairs.
/// `projections` is either empty (equal widths) or one entry per pair.
pub fn multi_layer_feature_loss(
    trace_student: &ForwardTrace,
    trace_teacher: &ForwardTrace,
    map: &LayerMap,
    lambdas: &[f64],
    projections: &[Option<Projection>],
    reduction: Reduction,
) -> Result<Tensor> {
    if lambdas.len() != map.len() {
        return Err(Error::config(
            "distillation.lambdas",
            format!("{} weights for {} aligned layer pairs", lambdas.len(), map.len()),
        ));
    }
    let mut total = Tensor::scalar(0.0);
    for (i, (&(s, t), &lambda)) in map.pairs().iter().zip(lambdas).enumerate() {
        let (f_s, _) = layer_pair(trace_student, s, "student")?;
        let (f_t, _) = layer_pair(trace_teacher, t, "teacher")?;
        let proj = projections.get(i).and_then(Option::as_ref);
        let d = feature_distance_loss(f_s, f_t, proj, reduction)?;
        total = total.add(&d.scale(lambda))?;
    }
    Ok(total)
}

/// Mean over mapped pairs of the mean-normalised squared distance between
/// attention maps. Entries above the diagonal are zero in both maps and
/// count toward the element total.
pub fn attention_alignment_loss(
    att_student: &[Tensor],
    att_teacher: &[Tensor],
    map: &LayerMap,
    heads: HeadAlignment,
) -> Result<Tensor> {
    let mut total = Tensor::scalar(0.0);
    for &(s, t) in map.pairs() {
        let a_s = att_student
            .get(s.wrapping_sub(1))
            .ok_or_else(|| Error::Contract(format!("student has no layer {s}")))?;
        let a_t = att_teacher
            .get(t.wrapping_sub(1))
            .ok_or_else(|| Error::Contract(format!("teacher has no layer {t}")))?
            .detach();
        let (ss, ts) = (a_s.shape(), a_t.shape());
        if ss.len() != 4 || ts.len() != 4 || ss[0] != ts[0] || ss[2..] != ts[2..] {
            return Err(Error::Contract(format!(
                "attention maps differ in batch or sequence length: student {ss:?} vs teacher {ts:?}"
            )));
        }
        let d = match heads {
            HeadAlignment::Average => a_s
                .mean_axis(1)?
                .squared_l2_distance(&a_t.mean_axis(1)?, Reduction::Mean)?,
            HeadAlignment::PerHead => {
                contract_shapes("attention_alignment_loss (per head)", a_s, &a_t)?;
                a_s.squared_l2_distance(&a_t, Reduction::Mean)?
            }
        };
        total = total.add(&d)?;
    }
    Ok(total.scale(1.0 / map.len().max(1) as f64))
}

/// The four component losses of one step.
#[derive(Debug, Clone)]
pub struct LossComponents {
    pub soft: Tensor,
    pub feat: Tensor,
    pub dist: Tensor,
    pub att: Tensor,
}

/// `α·soft + β·feat + γ·dist + δ·att`.
pub fn total_loss(c: &LossComponents, alpha: f64, beta: f64, gamma: f64, delta: f64) -> Result<Tensor> {
    c.soft
        .scale(alpha)
        .add(&c.feat.scale(beta))?
        .add(&c.dist.scale(gamma))?
        .add(&c.att.scale(delta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distillation::{map_layers, LayerMapStrategy};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn soft_label_examples() {
        let s = t(&[1, 1, 2], &[2.0, 0.0]);
        let te = t(&[1, 1, 2], &[0.0, 2.0]);
        let v = soft_label_loss(&s, &te, 1.0, KlDirection::StudentToTeacher, false)
            .unwrap()
            .item();
        // Independent scalar evaluation of KL([σ(2), σ(-2)] ‖ [σ(-2), σ(2)]).
        let p = 1.0 / (1.0 + (-2.0f64).exp());
        let q = 1.0 - p;
        let expected = p * (p / q).ln() + q * (q / p).ln();
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 1.523_188_311_911_529_3).abs() < 1e-12, "{v}");
        assert_eq!(
            soft_label_loss(&s, &s, 3.0, KlDirection::TeacherToStudent, true)
                .unwrap()
                .item(),
            0.0
        );
        let scaled = soft_label_loss(&s, &te, 1.0, KlDirection::StudentToTeacher, true)
            .unwrap()
            .item();
        assert_eq!(scaled, v);
        assert!(soft_label_loss(&s, &te, 0.0, KlDirection::TeacherToStudent, true).is_err());
    }

    #[test]
    fn kl_directions_differ() {
        let s = t(&[1, 1, 3], &[2.0, 0.0, -1.0]);
        let te = t(&[1, 1, 3], &[0.0, 0.5, 1.0]);
        let a = soft_label_loss(&s, &te, 1.0, KlDirection::TeacherToStudent, false).unwrap();
        let b = soft_label_loss(&s, &te, 1.0, KlDirection::StudentToTeacher, false).unwrap();
        assert!((a.item() - b.item()).abs() > 1e-3);
    }

    #[test]
    fn cosine_loss_examples() {
        let f = t(&[1, 2, 2], &[1.0, 2.0, -3.0, 0.5]);
        assert!(feature_cosine_loss(&f, &f, None).unwrap().item().abs() < 1e-15);
        let g = t(&[1, 2, 2], &[-2.0, 1.0, 0.5, 3.0]);
        assert!((feature_cosine_loss(&f, &g, None).unwrap().item() - 1.0).abs() < 1e-15);
        assert!((feature_cosine_loss(&f, &f.neg(), None).unwrap().item() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn distance_loss_examples() {
        let fs = t(&[1, 1, 2], &[1.0, 2.0]);
        let ft = t(&[1, 1, 2], &[3.0, 2.0]);
        assert_eq!(feature_distance_loss(&fs, &ft, None, Reduction::Sum).unwrap().item(), 4.0);
        assert_eq!(feature_distance_loss(&fs, &ft, None, Reduction::Mean).unwrap().item(), 2.0);
        assert_eq!(feature_distance_loss(&fs, &fs, None, Reduction::Mean).unwrap().item(), 0.0);
        let d1 = feature_distance_loss(&fs, &ft, None, Reduction::Mean).unwrap().item();
        let d2 = feature_distance_loss(&fs.scale(2.0), &ft.scale(2.0), None, Reduction::Mean)
            .unwrap()
            .item();
        assert_eq!(d2, 4.0 * d1);
    }

    #[test]
    fn projection_mismatch_is_contract_error() {
        let fs = t(&[1, 1, 2], &[1.0, 2.0]);
        let ft = t(&[1, 1, 3], &[3.0, 2.0, 1.0]);
        assert!(matches!(
            feature_distance_loss(&fs, &ft, None, Reduction::Mean),
            Err(Error::Contract(_))
        ));
        let proj = Projection {
            weight: t(&[2, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
            bias: t(&[3], &[0.0, 0.0, 1.0]),
        };
        let v = feature_distance_loss(&fs, &ft, Some(&proj), Reduction::Sum).unwrap().item();
        assert_eq!(v, 4.0);
    }

    fn uniform_rows() -> Tensor {
        t(&[1, 1, 2, 2], &[1.0, 0.0, 0.5, 0.5])
    }

    fn one_hot_rows() -> Tensor {
        t(&[1, 1, 2, 2], &[1.0, 0.0, 1.0, 0.0])
    }

    #[test]
    fn attention_loss_examples() {
        let map = map_layers(1, 1, LayerMapStrategy::Uniform).unwrap();
        let v = attention_alignment_loss(&[one_hot_rows()], &[uniform_rows()], &map, HeadAlignment::Average)
            .unwrap()
            .item();
        // Hand computation: differences [0,0] and [0.5,-0.5]; 0.5 / 4 elements.
        assert_eq!(v, 0.125);
        let single = t(&[1, 2, 1, 1], &[1.0, 1.0]);
        assert_eq!(
            attention_alignment_loss(std::slice::from_ref(&single), std::slice::from_ref(&single), &map, HeadAlignment::PerHead)
                .unwrap()
                .item(),
            0.0
        );
    }

    #[test]
    fn attention_loss_rejects_sequence_mismatch() {
        let map = map_layers(1, 1, LayerMapStrategy::Uniform).unwrap();
        let short = t(&[1, 1, 1, 1], &[1.0]);
        assert!(matches!(
            attention_alignment_loss(&[short], &[uniform_rows()], &map, HeadAlignment::Average),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn total_loss_is_weighted_sum() {
        let c = LossComponents {
            soft: Tensor::scalar(1.0),
            feat: Tensor::scalar(2.0),
            dist: Tensor::scalar(3.0),
            att: Tensor::scalar(4.0),
        };
        assert_eq!(total_loss(&c, 1.0, 1.0, 1.0, 1.0).unwrap().item(), 10.0);
        assert_eq!(total_loss(&c, 0.5, 0.0, 0.0, 0.0).unwrap().item(), 0.5);
        assert_eq!(total_loss(&c, 0.0, 0.0, 0.0, 2.0).unwrap().item(), 8.0);
    }
}
