//! Decoder-only causal transformer used as both teacher and student.
//!
//! Pre-norm blocks (attention then GELU feed-forward), learned positional
//! embeddings, and an output projection tied to the token embedding. The
//! forward pass returns every block's residual-stream output and attention
//! map alongside the logits.

mod decode;
mod model;
mod params;

use serde::{Deserialize, Serialize};

pub use model::{FeatureTap, ForwardTrace, Model};
pub use params::{init_student_from_teacher, InitReport, NamedArray, ParameterSet, INIT_STD};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    /// Returns the offending field name on failure.
    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
        ] {
            if v == 0 {
                return Err((name, "must be positive".into()));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err((
                "num_heads",
                format!(
                    "hidden_dim {} is not divisible by num_heads {}",
                    self.hidden_dim, self.num_heads
                ),
            ));
        }
        if self.max_seq_len < 2 {
            return Err(("max_seq_len", "must be at least 2".into()));
        }
        Ok(())
    }

    /// Same architecture, ignoring the init seed.
    pub fn same_shape(&self, other: &ModelConfig) -> bool {
        ModelConfig { seed: 0, ..self.clone() } == ModelConfig { seed: 0, ..other.clone() }
    }
}
