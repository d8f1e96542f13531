use std::path::PathBuf;
use std::sync::Arc;

use chrono::NaiveDate;
use focus_core::filterpipe::{run_filter_pipeline, FilterConfig, FilterServices, NoveltyMode, Stage, StageCounts};
use focus_core::ingest::{parse_dump_file, DumpFormat, RawEntry};
use focus_core::llmclient::{HashEmbedder, ScriptedBackend, SyntheticBackend};
use focus_core::prompts::{CallContext, PromptCatalog, Prompter};
use proptest::prelude::*;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn dump() -> Vec<RawEntry> {
    let out = parse_dump_file(&fixtures().join("raw/dump.jsonl"), DumpFormat::LineDelimited).unwrap();
    assert!(out.errors.is_empty(), "{:?}", out.errors);
    out.entries
}

fn scripted() -> ScriptedBackend {
    let script = std::fs::read_to_string(fixtures().join("mock/script.json")).unwrap();
    ScriptedBackend::from_json(&script).unwrap().with_fallback(Arc::new(SyntheticBackend::new()))
}

#[test]
fn ingest_fixtures_parse_as_documented() {
    let mixed = parse_dump_file(&fixtures().join("raw/mixed.jsonl"), DumpFormat::LineDelimited).unwrap();
    assert_eq!(mixed.entries.len(), 3);
    assert_eq!(mixed.errors.len(), 1);
    assert_eq!(mixed.errors[0].line, 2);
    assert_eq!(mixed.errors[0].reason, "missing phrase");
    let csv = parse_dump_file(&fixtures().join("raw/sample.csv"), DumpFormat::Tabular).unwrap();
    assert_eq!(csv.entries, mixed.entries);
}

#[test]
fn shipped_fixture_funnel() {
    let llm = scripted();
    let catalog = PromptCatalog::builtin();
    let embedder = HashEmbedder::new("mock-similarity");
    let services = FilterServices { prompter: Prompter::new(&llm, &catalog, CallContext::new("mock")), embedder: &embedder };
    let config = FilterConfig {
        blocklist_path: Some(fixtures().join("blocklist.txt")),
        novelty_mode: NoveltyMode::LlmProbe,
        ..FilterConfig::default()
    };
    let (kept, report) = run_filter_pipeline(dump(), &config, Some(&services)).unwrap();
    assert_eq!(report.removed, StageCounts { temporal: 8, vote: 4, content: 2, novelty: 1 });
    assert_eq!(report.output_count, 5);
    assert!(report.is_conserved());
    let phrases: Vec<&str> = kept.iter().map(|e| e.phrase.as_str()).collect();
    assert_eq!(phrases, ["The Winter Arc", "glowmaxxing", "delulu", "rizzler", "beige flag"]);
    let novelty: Vec<&str> =
        report.verdicts.iter().filter(|v| v.removed_by == Some(Stage::Novelty)).map(|v| v.phrase.as_str()).collect();
    assert_eq!(novelty, ["situationship"]);
}

#[test]
fn novelty_off_removes_nothing_at_that_stage() {
    let config = FilterConfig { blocklist_path: Some(fixtures().join("blocklist.txt")), ..FilterConfig::default() };
    let (kept, report) = run_filter_pipeline(dump(), &config, None).unwrap();
    assert_eq!(report.removed.novelty, 0);
    assert_eq!(kept.len(), 6);
}

#[test]
fn needle_mode_with_synthetic_model_keeps_everything() {
    let llm = SyntheticBackend::new();
    let catalog = PromptCatalog::builtin();
    let embedder = HashEmbedder::new("mock-similarity");
    let services = FilterServices { prompter: Prompter::new(&llm, &catalog, CallContext::new("mock")), embedder: &embedder };
    let config = FilterConfig {
        novelty_mode: NoveltyMode::NeedleTest,
        haystack_length: 300,
        needle_repeats: 2,
        ..FilterConfig::default()
    };
    let (_, report) = run_filter_pipeline(dump(), &config, Some(&services)).unwrap();
    assert_eq!(report.removed.novelty, 0);
}

fn arb_entry() -> impl Strategy<Value = RawEntry> {
    ("[a-z]{1,8}", 0u64..50, 0u64..50, 0i64..1500, prop::bool::ANY).prop_map(|(phrase, up, down, day, bad)| RawEntry {
        definition: if bad { format!("{phrase} is nsfwterm") } else { format!("{phrase} is fine") },
        example: String::new(),
        upvotes: up,
        downvotes: down,
        added_date: NaiveDate::from_ymd_opt(2021, 1, 1).unwrap() + chrono::Duration::days(day),
        source_id: format!("id-{phrase}-{day}"),
        phrase,
    })
}

proptest! {
    #[test]
    fn funnel_conserves_and_preserves_order(entries in proptest::collection::vec(arb_entry(), 0..40), ratio in 0.0f64..=1.0) {
        let config = FilterConfig {
            blocklist_path: Some(fixtures().join("blocklist.txt")),
            downvote_ratio_max: ratio,
            ..FilterConfig::default()
        };
        let (kept, report) = run_filter_pipeline(entries.clone(), &config, None).unwrap();
        prop_assert_eq!(report.input_count, report.output_count + report.removed.total());
        prop_assert_eq!(report.verdicts.len(), entries.len());
        let mut it = entries.iter();
        for k in &kept {
            prop_assert!(it.any(|e| e == k), "kept entries must be an ordered subsequence");
        }
        let (again, report2) = run_filter_pipeline(entries, &config, None).unwrap();
        prop_assert_eq!(kept, again);
        prop_assert_eq!(report, report2);
    }
}
