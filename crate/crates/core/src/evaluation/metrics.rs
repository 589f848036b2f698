//! Answer normalization and token-level scoring for extractive / multi-hop QA.

use std::collections::HashMap;

/// Lowercase, strip ASCII punctuation, drop the articles `a`, `an`, `the`,
/// and collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let no_punct: String = lowered.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    no_punct.split_whitespace().filter(|t| !matches!(*t, "a" | "an" | "the")).collect::<Vec<_>>().join(" ")
}

/// Tokens of the normalized text.
pub fn normalized_tokens(text: &str) -> Vec<String> {
    normalize_answer(text).split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect()
}

fn f1_single(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return if pred.is_empty() && gold.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in gold {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / pred.len() as f64;
    let r = overlap as f64 / gold.len() as f64;
    2.0 * p * r / (p + r)
}

/// Bag-of-tokens F1, maximized over gold alternatives.
pub fn token_f1<S: AsRef<str>>(prediction: &str, gold: &[S]) -> f64 {
    let pred = normalized_tokens(prediction);
    gold.iter().map(|g| f1_single(&pred, &normalized_tokens(g.as_ref()))).fold(0.0, f64::max)
}

/// 1 if the prediction equals any gold answer after normalization.
pub fn exact_match<S: AsRef<str>>(prediction: &str, gold: &[S]) -> u8 {
    let pred = normalize_answer(prediction);
    u8::from(gold.iter().any(|g| normalize_answer(g.as_ref()) == pred))
}
