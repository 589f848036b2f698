use serde::Deserialize;
use stackplanner_core::evaluation::{exact_match, token_f1};

#[derive(Deserialize)]
struct Case {
    prediction: String,
    gold: Vec<String>,
    f1: f64,
    em: u8,
}

fn cases() -> Vec<Case> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/oracles/f1_cases.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn matches_brute_force_reference() {
    let cases = cases();
    assert_eq!(cases.len(), 50);
    for c in &cases {
        let f1 = token_f1(&c.prediction, &c.gold);
        assert!((f1 - c.f1).abs() <= 1e-12, "{:?} vs {:?}: {f1} != {}", c.prediction, c.gold, c.f1);
        assert_eq!(exact_match(&c.prediction, &c.gold), c.em, "{:?} vs {:?}", c.prediction, c.gold);
    }
}

#[test]
fn partial_name_scores_two_thirds() {
    assert!((token_f1("Obama", &["Barack Obama"]) - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(format!("{:.4}", token_f1("Obama", &["Barack Obama"])), "0.6667");
}
