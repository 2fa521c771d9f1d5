//! The run configuration document: one JSON file drives a whole experiment.
//!
//! Missing sections and fields take their defaults, unknown keys are
//! rejected with their path, and every seed left unset is derived from the
//! top-level `seed` under a fixed label, so sub-components are reproducible
//! independently of each other. Model `vocab_size` and `max_seq_len` left
//! unset follow the grammar.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{GrammarConfig, SyntheticGrammar};
use crate::distillation::{map_layers, DistillationConfig, DistillationObjective};
use crate::error::{Error, Result};
use crate::training::TrainingConfig;
use crate::transformer::ModelConfig;

pub const SNAPSHOT_FILE: &str = "config.json";

/// Deterministic child seed for `label`.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label, then a splitmix64 finaliser.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub grammar: GrammarConfig,
    pub n_sequences: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            grammar: GrammarConfig::default(),
            n_sequences: 2000,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub teacher: ModelConfig,
    pub student: ModelConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        let vocab_size = SyntheticGrammar::new(GrammarConfig::default())
            .expect("default grammar is valid")
            .vocab()
            .len();
        let max_seq_len = GrammarConfig::default().max_len + 1;
        ModelSection {
            teacher: ModelConfig {
                vocab_size,
                num_layers: 4,
                hidden_dim: 64,
                num_heads: 4,
                ffn_dim: 128,
                max_seq_len,
                seed: 0,
            },
            student: ModelConfig {
                vocab_size,
                num_layers: 2,
                hidden_dim: 32,
                num_heads: 2,
                ffn_dim: 64,
                max_seq_len,
                seed: 0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub teacher: TrainingConfig,
    pub student: TrainingConfig,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            teacher: TrainingConfig {
                steps: 600,
                eval_every: 200,
                ..TrainingConfig::default()
            },
            student: TrainingConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub run_dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            run_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub n_seeds: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { n_seeds: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelSection,
    pub distillation: DistillationConfig,
    pub training: TrainingSection,
    pub ablation: AblationConfig,
    pub output: OutputConfig,
}

/// Seeds filled from the top-level seed when the document leaves them out.
const DERIVED_SEEDS: [(&[&str], &str); 5] = [
    (&["data", "seed"], "data"),
    (&["model", "teacher", "seed"], "init.teacher"),
    (&["model", "student", "seed"], "init.student"),
    (&["training", "teacher", "seed"], "shuffle.teacher"),
    (&["training", "student", "seed"], "shuffle.student"),
];

fn has_path(v: &Value, path: &[&str]) -> bool {
    path.iter()
        .try_fold(v, |node, key| node.get(key))
        .is_some()
}

/// Overlays `over` onto `base`, recursing where both sides are objects.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Parses, fills defaults and derived seeds, and validates.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)
            .map_err(|e| Error::config("<document>", e.to_string()))?;
        if !value.is_object() {
            return Err(Error::config("<document>", "expected a JSON object"));
        }
        let mut full = serde_json::to_value(RunConfig::default())?;
        merge(&mut full, value.clone());
        let mut cfg: RunConfig = serde_path_to_error::deserialize(&full).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "<document>".into() } else { path }, e.into_inner().to_string())
        })?;
        for (path, label) in DERIVED_SEEDS {
            if !has_path(&value, path) {
                *cfg.seed_slot(path) = derive_seed(cfg.seed, label);
            }
        }
        let grammar = SyntheticGrammar::new(cfg.data.grammar.clone())?;
        for who in ["teacher", "student"] {
            let m = if who == "teacher" { &mut cfg.model.teacher } else { &mut cfg.model.student };
            if !has_path(&value, &["model", who, "vocab_size"]) {
                m.vocab_size = grammar.vocab().len();
            }
            if !has_path(&value, &["model", who, "max_seq_len"]) {
                m.max_seq_len = grammar.max_len() + 1;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Defaults with every seed derived from `seed`.
    pub fn with_seed(seed: u64) -> Self {
        Self::from_json(&format!("{{\"seed\": {seed}}}")).expect("default config is valid")
    }

    fn seed_slot(&mut self, path: &[&str]) -> &mut u64 {
        match path {
            ["data", _] => &mut self.data.seed,
            ["model", "teacher", _] => &mut self.model.teacher.seed,
            ["model", "student", _] => &mut self.model.student.seed,
            ["training", "teacher", _] => &mut self.training.teacher.seed,
            ["training", "student", _] => &mut self.training.student.seed,
            _ => unreachable!("unknown seed path {path:?}"),
        }
    }

    /// Cross-section checks, reported with the offending field path.
    pub fn validate(&self) -> Result<()> {
        let grammar = SyntheticGrammar::new(self.data.grammar.clone())?;
        let v = grammar.vocab().len();
        for (who, m) in [("teacher", &self.model.teacher), ("student", &self.model.student)] {
            m.validate()
                .map_err(|(f, msg)| Error::config(format!("model.{who}.{f}"), msg))?;
            if m.vocab_size != v {
                return Err(Error::config(
                    format!("model.{who}.vocab_size"),
                    format!("{} does not match the grammar vocabulary of {v}", m.vocab_size),
                ));
            }
            let t = if who == "teacher" { &self.training.teacher } else { &self.training.student };
            t.validate()
                .map_err(|(f, msg)| Error::config(format!("training.{who}.{f}"), msg))?;
            if t.seq_len > m.max_seq_len {
                return Err(Error::config(
                    format!("training.{who}.seq_len"),
                    format!("{} exceeds model.{who}.max_seq_len {}", t.seq_len, m.max_seq_len),
                ));
            }
        }
        if self.training.student.seq_len > self.model.teacher.max_seq_len {
            return Err(Error::config(
                "training.student.seq_len",
                "exceeds model.teacher.max_seq_len",
            ));
        }
        map_layers(
            self.model.teacher.num_layers,
            self.model.student.num_layers,
            self.distillation.layer_map.clone(),
        )?;
        DistillationObjective::new(&self.distillation, &self.model.teacher, &self.model.student)?;
        if self.data.n_sequences == 0 {
            return Err(Error::config("data.n_sequences", "must be positive"));
        }
        if self.ablation.n_seeds < 3 {
            return Err(Error::config("ablation.n_seeds", "must be at least 3"));
        }
        Ok(())
    }

    /// Canonical rendering of the resolved config.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Writes the resolved config into `dir`.
    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(SNAPSHOT_FILE);
        fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
