use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LayerMapStrategy {
    /// Student layer `s` (1-based) aligns with teacher layer
    /// `ceil(s · teacher_L / student_L)`.
    #[default]
    Uniform,
    /// Student layers align with the last `student_L` teacher layers.
    LastK,
    /// User-supplied `(student, teacher)` pairs, 1-based.
    Explicit(Vec<(usize, usize)>),
}

/// Monotone pairing of student layers to teacher layers, 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMap {
    pairs: Vec<(usize, usize)>,
}

impl LayerMap {
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Teacher layer aligned with student layer `student` (both 1-based).
    pub fn teacher_for(&self, student: usize) -> Option<usize> {
        self.pairs
            .iter()
            .find(|&&(s, _)| s == student)
            .map(|&(_, t)| t)
    }

    /// Validates explicit pairs: in range, and strictly increasing on both
    /// sides.
    pub fn explicit(pairs: Vec<(usize, usize)>, teacher_l: usize, student_l: usize) -> Result<Self> {
        let path = "distillation.layer_map.explicit";
        if pairs.is_empty() {
            return Err(Error::config(path, "at least one layer pair is required"));
        }
        for (i, &(s, t)) in pairs.iter().enumerate() {
            if s == 0 || s > student_l || t == 0 || t > teacher_l {
                return Err(Error::config(
                    path,
                    format!("pair ({s}, {t}) out of range for student L={student_l}, teacher L={teacher_l}"),
                ));
            }
            if i > 0 {
                let (ps, pt) = pairs[i - 1];
                if s <= ps || t <= pt {
                    return Err(Error::config(
                        path,
                        format!("pairs must be strictly increasing: ({ps}, {pt}) then ({s}, {t})"),
                    ));
                }
            }
        }
        Ok(LayerMap { pairs })
    }
}

pub fn map_layers(teacher_l: usize, student_l: usize, strategy: LayerMapStrategy) -> Result<LayerMap> {
    if teacher_l == 0 || student_l == 0 {
        return Err(Error::config("distillation.layer_map", "models need at least one layer"));
    }
    match strategy {
        LayerMapStrategy::Explicit(pairs) => LayerMap::explicit(pairs, teacher_l, student_l),
        _ if student_l > teacher_l => Err(Error::config(
            "distillation.layer_map",
            format!("student has {student_l} layers but teacher only {teacher_l}"),
        )),
        LayerMapStrategy::Uniform => Ok(LayerMap {
            pairs: (1..=student_l)
                .map(|s| (s, (s * teacher_l).div_ceil(student_l)))
                .collect(),
        }),
        LayerMapStrategy::LastK => Ok(LayerMap {
            pairs: (1..=student_l)
                .map(|s| (s, teacher_l - student_l + s))
                .collect(),
        }),
    }
}
