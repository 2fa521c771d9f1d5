//! Browser demo over the core crate. Each operation is a plain Rust function
//! returning a serialisable view (tested natively) plus a thin
//! `wasm_bindgen` export that hands the page a JSON string.

use featalign::autograd::{no_grad, Tensor};
use featalign::data::{GrammarConfig, SyntheticGrammar, BOS};
use featalign::distillation::{attention_alignment_loss, map_layers, soft_label_loss, HeadAlignment, KlDirection, LayerMapStrategy};
use featalign::metrics::{bleu, cer, rouge_l_f1};
use featalign::transformer::{FeatureTap, Model, ModelConfig, ParameterSet};
use featalign::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TemperatureView {
    pub teacher_probs: Vec<f64>,
    pub student_probs: Vec<f64>,
    /// `KL(p_teacher ‖ p_student)` at this temperature.
    pub kl: f64,
    /// The soft-label loss as trained on: `tau² · kl`.
    pub loss: f64,
}

/// Softened teacher and student distributions over one position and the
/// resulting soft-label loss.
pub fn temperature_view(teacher_logits: &[f64], student_logits: &[f64], tau: f64) -> Result<TemperatureView> {
    if teacher_logits.is_empty() || teacher_logits.len() != student_logits.len() {
        return Err(Error::Input(format!(
            "need two equal-length, non-empty logit lists, got {} and {}",
            teacher_logits.len(),
            student_logits.len()
        )));
    }
    no_grad(|| {
        let t = Tensor::vector(teacher_logits);
        let s = Tensor::vector(student_logits);
        let kl = soft_label_loss(&s, &t, tau, KlDirection::TeacherToStudent, false)?.item();
        Ok(TemperatureView {
            teacher_probs: t.softmax(tau)?.into_vec(),
            student_probs: s.softmax(tau)?.into_vec(),
            kl,
            loss: tau * tau * kl,
        })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionView {
    /// Row/column labels, starting with the begin-of-sequence marker.
    pub tokens: Vec<String>,
    /// Head-averaged `[seq, seq]` map of the deepest teacher layer aligned
    /// to the student's last layer.
    pub teacher: Vec<Vec<f64>>,
    pub student: Vec<Vec<f64>>,
    pub teacher_layer: usize,
    pub student_layer: usize,
    /// Attention alignment loss over every aligned layer pair.
    pub loss: f64,
}

const DEMO_TEACHER: (usize, usize, usize) = (4, 32, 4);
const DEMO_STUDENT: (usize, usize, usize) = (2, 16, 2);

fn demo_grammar() -> SyntheticGrammar {
    SyntheticGrammar::new(GrammarConfig::default()).expect("default grammar is valid")
}

fn demo_model(grammar: &SyntheticGrammar, (layers, dim, heads): (usize, usize, usize), seed: u64) -> Result<ParameterSet> {
    ParameterSet::init(&ModelConfig {
        vocab_size: grammar.vocab().len(),
        num_layers: layers,
        hidden_dim: dim,
        num_heads: heads,
        ffn_dim: 2 * dim,
        max_seq_len: grammar.max_len() + 1,
        seed,
    })
}

fn head_average(map: &Tensor, seq: usize) -> Vec<Vec<f64>> {
    let heads = map.shape()[1];
    let d = map.data();
    (0..seq)
        .map(|i| {
            (0..seq)
                .map(|j| (0..heads).map(|h| d[(h * seq + i) * seq + j]).sum::<f64>() / heads as f64)
                .collect()
        })
        .collect()
}

/// Attention maps of freshly initialised teacher and student models on
/// `text` (grammar symbols only). Different seeds give different models.
pub fn attention_view(text: &str, seed: u64) -> Result<AttentionView> {
    let grammar = demo_grammar();
    let mut ids = grammar.vocab().tokenize(text)?;
    ids.pop(); // end marker: the maps cover the prefix the model reads
    if ids.len() > grammar.max_len() + 1 {
        return Err(Error::Input(format!("at most {} symbols", grammar.max_len())));
    }
    let teacher = demo_model(&grammar, DEMO_TEACHER, seed)?;
    let student = demo_model(&grammar, DEMO_STUDENT, seed.wrapping_add(1))?;
    let map = map_layers(DEMO_TEACHER.0, DEMO_STUDENT.0, LayerMapStrategy::Uniform)?;
    let seq = ids.len();
    no_grad(|| {
        let tt = Model::bind(&teacher, false).forward(&ids, 1, seq, FeatureTap::Residual)?;
        let st = Model::bind(&student, false).forward(&ids, 1, seq, FeatureTap::Residual)?;
        let loss = attention_alignment_loss(&st.attentions, &tt.attentions, &map, HeadAlignment::Average)?.item();
        let &(s_layer, t_layer) = map.pairs().last().expect("non-empty map");
        let tokens = ids
            .iter()
            .map(|&id| if id == BOS { "^".to_string() } else { grammar.vocab().symbol_of(id).map_or_else(String::new, String::from) })
            .collect();
        Ok(AttentionView {
            tokens,
            teacher: head_average(&tt.attentions[t_layer - 1], seq),
            student: head_average(&st.attentions[s_layer - 1], seq),
            teacher_layer: t_layer,
            student_layer: s_layer,
            loss,
        })
    })
}

/// A sentence of the default grammar.
pub fn sample_sentence(seed: u64) -> String {
    demo_grammar().sample(&mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TextScores {
    pub bleu: f64,
    pub rouge_l_f1: f64,
    pub cer: f64,
}

/// Character-level BLEU-4, ROUGE-L F1 and CER of `hypothesis` against
/// `reference`.
pub fn text_scores(hypothesis: &str, reference: &str) -> Result<TextScores> {
    let h: Vec<char> = hypothesis.chars().collect();
    let r: Vec<char> = reference.chars().collect();
    Ok(TextScores {
        bleu: bleu(&h, &r)?,
        rouge_l_f1: rouge_l_f1(&h, &r)?,
        cer: cer(hypothesis, reference)?,
    })
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = temperatureView)]
pub fn temperature_view_js(teacher_logits: &[f64], student_logits: &[f64], tau: f64) -> std::result::Result<String, JsError> {
    to_js(temperature_view(teacher_logits, student_logits, tau))
}

#[wasm_bindgen(js_name = attentionView)]
pub fn attention_view_js(text: &str, seed: u32) -> std::result::Result<String, JsError> {
    to_js(attention_view(text, u64::from(seed)))
}

#[wasm_bindgen(js_name = sampleSentence)]
pub fn sample_sentence_js(seed: u32) -> String {
    sample_sentence(u64::from(seed))
}

#[wasm_bindgen(js_name = textScores)]
pub fn text_scores_js(hypothesis: &str, reference: &str) -> std::result::Result<String, JsError> {
    to_js(text_scores(hypothesis, reference))
}
