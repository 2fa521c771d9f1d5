use featalign::data::{GrammarConfig, SyntheticGrammar};
use featalign_demo::{attention_view, sample_sentence, temperature_view, text_scores};

fn softmax(xs: &[f64], tau: f64) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| ((x - m) / tau).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

#[test]
fn temperature_view_matches_hand_softmax() {
    let (t, s) = ([2.0, 1.0, 0.1, -1.0], [0.5, 1.5, 0.0, 0.2]);
    for tau in [0.5, 1.0, 2.0, 8.0] {
        let v = temperature_view(&t, &s, tau).unwrap();
        let (pt, ps) = (softmax(&t, tau), softmax(&s, tau));
        let kl: f64 = pt.iter().zip(&ps).map(|(p, q)| p * (p / q).ln()).sum();
        assert!((v.kl - kl).abs() < 1e-12, "tau {tau}: {} vs {kl}", v.kl);
        assert!((v.loss - tau * tau * kl).abs() < 1e-12);
        for (a, b) in v.teacher_probs.iter().zip(&pt) {
            assert!((a - b).abs() < 1e-15);
        }
    }
    let hot = temperature_view(&t, &s, 100.0).unwrap();
    assert!(hot.teacher_probs.iter().all(|p| (p - 0.25).abs() < 0.01));
    assert!(temperature_view(&t, &t, 2.0).unwrap().kl.abs() < 1e-15);
    assert!(temperature_view(&t, &s[..2], 2.0).is_err());
    assert!(temperature_view(&t, &s, 0.0).is_err());
}

#[test]
fn attention_maps_are_causal_and_row_stochastic() {
    let text = sample_sentence(3);
    let v = attention_view(&text, 9).unwrap();
    let n = text.chars().count() + 1;
    assert_eq!(v.tokens.len(), n);
    assert_eq!(v.tokens[0], "^");
    for map in [&v.teacher, &v.student] {
        assert_eq!(map.len(), n);
        for (i, row) in map.iter().enumerate() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row[i + 1..].iter().all(|&x| x == 0.0));
        }
    }
    assert!(v.loss >= 0.0);
    assert_eq!((v.teacher_layer, v.student_layer), (4, 2));
    assert_eq!(attention_view(&text, 9).unwrap(), v);
    assert_ne!(attention_view(&text, 10).unwrap().teacher, v.teacher);
}

#[test]
fn attention_view_rejects_foreign_symbols() {
    assert!(attention_view("hello world!", 0).is_err());
    assert!(attention_view(&"a".repeat(40), 0).is_err());
}

#[test]
fn sampled_sentences_belong_to_the_grammar() {
    let g = SyntheticGrammar::new(GrammarConfig::default()).unwrap();
    for seed in 0..20 {
        assert!(g.parses(&sample_sentence(seed)));
    }
}

#[test]
fn text_scores_on_identical_and_disjoint_text() {
    let same = text_scores("abcdef", "abcdef").unwrap();
    assert_eq!((same.bleu, same.rouge_l_f1, same.cer), (1.0, 1.0, 0.0));
    let apart = text_scores("xyz", "abc").unwrap();
    assert_eq!((apart.bleu, apart.rouge_l_f1, apart.cer), (0.0, 0.0, 1.0));
    assert!(text_scores("abc", "").is_err());
}
