use std::hash::{DefaultHasher, Hash, Hasher};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::autograd::Tensor;
use crate::distillation::LayerMap;
use crate::error::{Error, Result};

pub const INIT_STD: f64 = 0.02;
pub(crate) const PARAMS_PER_BLOCK: usize = 16;
pub(crate) const BLOCK_PARAM_NAMES: [&str; PARAMS_PER_BLOCK] = [
    "ln1.gamma",
    "ln1.beta",
    "attn.wq",
    "attn.bq",
    "attn.wk",
    "attn.bk",
    "attn.wv",
    "attn.bv",
    "attn.wo",
    "attn.bo",
    "ln2.gamma",
    "ln2.beta",
    "ffn.w1",
    "ffn.b1",
    "ffn.w2",
    "ffn.b2",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn to_tensor(&self, trainable: bool) -> Tensor {
        let t = if trainable {
            Tensor::parameter(&self.shape, self.data.clone())
        } else {
            Tensor::new(&self.shape, self.data.clone())
        };
        t.expect("named array shape matches its data")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (v, d, f) = (config.vocab_size, config.hidden_dim, config.ffn_dim);
    let mut out = vec![
        ("tok_emb".to_string(), vec![v, d], Init::Normal),
        ("pos_emb".to_string(), vec![config.max_seq_len, d], Init::Normal),
    ];
    for l in 0..config.num_layers {
        let shapes: [(Vec<usize>, Init); PARAMS_PER_BLOCK] = [
            (vec![d], Init::Ones),
            (vec![d], Init::Zeros),
            (vec![d, d], Init::Normal),
            (vec![d], Init::Zeros),
            (vec![d, d], Init::Normal),
            (vec![d], Init::Zeros),
            (vec![d, d], Init::Normal),
            (vec![d], Init::Zeros),
            (vec![d, d], Init::Normal),
            (vec![d], Init::Zeros),
            (vec![d], Init::Ones),
            (vec![d], Init::Zeros),
            (vec![d, f], Init::Normal),
            (vec![f], Init::Zeros),
            (vec![f, d], Init::Normal),
            (vec![d], Init::Zeros),
        ];
        for (name, (shape, init)) in BLOCK_PARAM_NAMES.iter().zip(shapes) {
            out.push((format!("blocks.{l}.{name}"), shape, init));
        }
    }
    out.push(("ln_f.gamma".to_string(), vec![d], Init::Ones));
    out.push(("ln_f.beta".to_string(), vec![d], Init::Zeros));
    out
}

/// All trainable arrays of one model, in a fixed canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub config: ModelConfig,
    pub arrays: Vec<NamedArray>,
}

/// Which student arrays [`init_student_from_teacher`] copied and which fell
/// back to fresh initialisation.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct InitReport {
    pub copied: Vec<String>,
    pub fresh: Vec<String>,
}

impl InitReport {
    pub fn copied_count(&self) -> usize {
        self.copied.len()
    }
}

impl ParameterSet {
    /// Seeded initialisation: weight matrices and embeddings from
    /// N(0, 0.02²), biases zero, layer-norm gains one.
    pub fn init(config: &ModelConfig) -> Result<ParameterSet> {
        config
            .validate()
            .map_err(|(field, msg)| Error::config(field, msg))?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
        let arrays = layout(config)
            .into_iter()
            .map(|(name, shape, init)| {
                let n = shape.iter().product();
                let data = match init {
                    Init::Normal => (0..n).map(|_| normal.sample(&mut rng)).collect(),
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                };
                NamedArray { name, shape, data }
            })
            .collect();
        Ok(ParameterSet {
            config: config.clone(),
            arrays,
        })
    }

    /// Rebuilds a set from stored arrays, checking names and shapes against
    /// the layout implied by `config`.
    pub fn from_arrays(config: ModelConfig, arrays: Vec<NamedArray>) -> Result<ParameterSet> {
        let expected = layout(&config);
        if expected.len() != arrays.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                expected.len(),
                arrays.len()
            )));
        }
        for ((name, shape, _), a) in expected.iter().zip(&arrays) {
            if *name != a.name || *shape != a.shape || a.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {:?} does not match expected {name} {shape:?}",
                    a.name, a.shape
                )));
            }
        }
        Ok(ParameterSet { config, arrays })
    }

    pub fn num_parameters(&self) -> usize {
        self.arrays.iter().map(|a| a.data.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    /// Hash of every value's bit pattern; equal fingerprints mean (with
    /// overwhelming probability) bit-identical parameters.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for a in &self.arrays {
            a.name.hash(&mut h);
            for v in &a.data {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn to_tensors(&self, trainable: bool) -> Vec<Tensor> {
        self.arrays.iter().map(|a| a.to_tensor(trainable)).collect()
    }
}

/// Layer-by-layer initialisation of a student from a teacher.
///
/// Student block `s` copies teacher block `map(s)` array by array wherever
/// shapes agree; embeddings and the final norm copy likewise. Everything
/// else keeps the student's own seeded initialisation.
pub fn init_student_from_teacher(
    teacher: &ParameterSet,
    student_config: &ModelConfig,
    layer_map: &LayerMap,
) -> Result<(ParameterSet, InitReport)> {
    let mut student = ParameterSet::init(student_config)?;
    let mut report = InitReport::default();
    let block_source = |name: &str| -> Option<String> {
        let rest = name.strip_prefix("blocks.")?;
        let (idx, suffix) = rest.split_once('.')?;
        let s: usize = idx.parse().ok()?;
        let t = layer_map.teacher_for(s + 1)?;
        Some(format!("blocks.{}.{suffix}", t - 1))
    };
    for array in &mut student.arrays {
        let source = if array.name.starts_with("blocks.") {
            block_source(&array.name)
        } else {
            Some(array.name.clone())
        };
        match source.and_then(|src| teacher.get(&src)) {
            Some(t) if t.shape == array.shape => {
                array.data.clone_from(&t.data);
                report.copied.push(array.name.clone());
            }
            _ => report.fresh.push(array.name.clone()),
        }
    }
    Ok((student, report))
}
