mod support;

use std::fs;
use std::path::PathBuf;

use focus_core::metrics::{best_reference_select, bleu3, rouge, token_prf, tokenize};
use proptest::prelude::*;
use serde_json::Value;
use support::oracle;

fn fixture(name: &str) -> Vec<Value> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/metrics").join(name);
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn golden_corpus_matches_brute_force_oracle() {
    let pairs = fixture("golden.jsonl");
    assert_eq!(pairs.len(), 25);
    for p in pairs {
        let pred = p["pred"].as_str().unwrap();
        let reference = p["ref"].as_str().unwrap();
        let (pt, rt) = (tokenize(pred), tokenize(reference));
        let b = bleu3(pred, reference);
        let r = rouge(pred, reference);
        assert!((b - oracle::bleu3(&pt, &rt)).abs() < 1e-6, "bleu {pred:?} / {reference:?}");
        assert!((r.rouge1 - oracle::rouge_n(&pt, &rt, 1)).abs() < 1e-6, "rouge1 {pred:?}");
        assert!((r.rouge2 - oracle::rouge_n(&pt, &rt, 2)).abs() < 1e-6, "rouge2 {pred:?}");
        assert!((r.rouge_l - oracle::rouge_l(&pt, &rt)).abs() < 1e-6, "rougeL {pred:?}");
    }
}

#[test]
fn token_prf_matches_hand_counts() {
    let rows = fixture("prf_hand.jsonl");
    assert_eq!(rows.len(), 10);
    for row in rows {
        let got = token_prf(row["pred"].as_str().unwrap(), row["ref"].as_str().unwrap());
        let overlap = row["overlap"].as_f64().unwrap();
        let p = overlap / row["pred_len"].as_f64().unwrap();
        let r = overlap / row["ref_len"].as_f64().unwrap();
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        assert_eq!((got.precision, got.recall, got.f1), (p, r, f1), "{row}");
    }
}

fn sentence() -> impl Strategy<Value = String> {
    proptest::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "the", "rizz", "no", "cap"]), 0..9)
        .prop_map(|w| w.join(" "))
}

proptest! {
    #[test]
    fn metrics_stay_in_range(pred in "\\PC{0,60}", reference in "\\PC{0,60}") {
        let p = token_prf(&pred, &reference);
        let r = rouge(&pred, &reference);
        for v in [p.precision, p.recall, p.f1, bleu3(&pred, &reference), r.rouge1, r.rouge2, r.rouge_l] {
            prop_assert!((0.0..=1.0).contains(&v), "{v}");
        }
    }

    #[test]
    fn identity_scores_one(words in proptest::collection::vec("[a-z]{1,6}", 1..10)) {
        let s = words.join(" ");
        let p = token_prf(&s, &s);
        let r = rouge(&s, &s);
        for v in [p.precision, p.recall, p.f1, bleu3(&s, &s), r.rouge1, r.rouge2, r.rouge_l] {
            prop_assert!((v - 1.0).abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn empty_side_scores_zero(s in "[a-z ]{0,30}") {
        for (a, b) in [("", s.as_str()), (s.as_str(), "")] {
            let p = token_prf(a, b);
            let r = rouge(a, b);
            for v in [p.precision, p.recall, p.f1, bleu3(a, b), r.rouge1, r.rouge2, r.rouge_l] {
                prop_assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn random_pairs_agree_with_oracle(pred in sentence(), reference in sentence()) {
        let (pt, rt) = (tokenize(&pred), tokenize(&reference));
        prop_assert!((bleu3(&pred, &reference) - oracle::bleu3(&pt, &rt)).abs() < 1e-9);
        let r = rouge(&pred, &reference);
        prop_assert!((r.rouge_l - oracle::rouge_l(&pt, &rt)).abs() < 1e-12);
        prop_assert!((r.rouge2 - oracle::rouge_n(&pt, &rt, 2)).abs() < 1e-12);
    }

    #[test]
    fn chosen_reference_has_maximal_bleu(pred in sentence(), refs in proptest::collection::vec(sentence(), 5)) {
        let chosen = best_reference_select(&pred, &refs).unwrap();
        let best = bleu3(&pred, &refs[chosen]);
        for (j, r) in refs.iter().enumerate() {
            let s = bleu3(&pred, r);
            prop_assert!(best >= s);
            if j < chosen {
                prop_assert!(s < best, "tie must go to the lowest index");
            }
        }
    }
}
