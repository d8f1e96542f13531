use std::path::{Path, PathBuf};
use std::sync::Arc;

use focus_core::filterpipe::{run_filter_pipeline, FilterConfig};
use focus_core::focus::{Ablation, Method, Sample};
use focus_core::harness::{
    load_dataset, load_run, persist_run, render_table, report_document, rescore, run_ablation, run_benchmark,
    DatasetRecord, Layout, RunConfig, RunStatus,
};
use focus_core::ingest::{parse_dump_file, write_dataset, DumpFormat};
use focus_core::llmclient::{Embedders, RecordingBackend, Reply, ScriptedBackend, SyntheticBackend};
use focus_core::prompts::{CallContext, PromptCatalog, Prompter};
use focus_core::standardize::build_factual_dataset;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

/// Three factual records from the shipped dump, written to `dir`.
fn factual_fixture(dir: &Path) -> PathBuf {
    let raw = parse_dump_file(&fixtures().join("raw/dump.jsonl"), DumpFormat::LineDelimited).unwrap().entries;
    let cfg = FilterConfig { blocklist_path: Some(fixtures().join("blocklist.txt")), ..FilterConfig::default() };
    let kept = run_filter_pipeline(raw, &cfg, None).unwrap().0;
    let llm = SyntheticBackend::new();
    let cat = PromptCatalog::builtin();
    let (factual, _) = build_factual_dataset(&kept[..3], &Prompter::new(&llm, &cat, CallContext::new("mock")), None, 1, 2);
    assert_eq!(factual.len(), 3);
    let path = dir.join("factual.jsonl");
    write_dataset(&factual, &path).unwrap();
    path
}

#[test]
fn focus_run_scores_every_sample_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let ds = load_dataset(&factual_fixture(dir.path())).unwrap();
    assert!(ds.records.iter().all(|r| matches!(r, DatasetRecord::Factual(_))));
    let llm = SyntheticBackend::new();
    let cat = PromptCatalog::builtin();
    let p = Prompter::new(&llm, &cat, CallContext::new("mock"));
    let cfg = RunConfig::new(Method::Focus, 11);

    let a = run_benchmark(&ds, &cfg, &p, &Embedders::mock());
    assert_eq!(a.status, RunStatus::Completed);
    assert!(a.failures.is_empty());
    assert_eq!(a.scores().len(), 3);
    assert_eq!(a.report.as_ref().unwrap().sample_count, 3);

    let b = run_benchmark(&ds, &RunConfig { parallelism: 1, ..cfg.clone() }, &p, &Embedders::mock());
    assert_eq!(a.report, b.report);
    assert_eq!(report_document(&a), report_document(&b));
}

#[test]
fn failing_sample_is_logged_and_run_continues() {
    let dir = tempfile::tempdir().unwrap();
    let ds = load_dataset(&factual_fixture(dir.path())).unwrap();
    let victim = ds.records[1].phrase().to_string();
    let llm = ScriptedBackend::new()
        .rule_sequence(&victim, vec![Reply::Refuse("blocked".into())])
        .with_fallback(Arc::new(SyntheticBackend::new()));
    let cat = PromptCatalog::builtin();
    let p = Prompter::new(&llm, &cat, CallContext::new("mock"));
    let rec = run_benchmark(&ds, &RunConfig::new(Method::Direct, 3), &p, &Embedders::mock());
    assert_eq!(rec.status, RunStatus::Completed);
    assert_eq!(rec.scores().len(), 2);
    assert_eq!(rec.failures.len(), 1);
    assert_eq!(rec.failures[0].sample_id, ds.records[1].id());
    assert_eq!(rec.samples.len(), rec.scores().len() + rec.failures.len());

    let all_bad = ScriptedBackend::new().rule("", "");
    let p = Prompter::new(&all_bad, &cat, CallContext::new("mock"));
    let rec = run_benchmark(&ds, &RunConfig::new(Method::Direct, 3), &p, &Embedders::mock());
    assert_eq!(rec.status, RunStatus::Failed);
    assert_eq!(rec.failures.len(), 3);
}

#[test]
fn persisted_run_round_trips_and_conserves_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = factual_fixture(dir.path());
    let ds = load_dataset(&data).unwrap();
    let llm = SyntheticBackend::new();
    let cat = PromptCatalog::builtin();
    let p = Prompter::new(&llm, &cat, CallContext::new("mock"));
    let rec = run_benchmark(&ds, &RunConfig::new(Method::CauView, 5), &p, &Embedders::mock());
    let runs = dir.path().join("runs");
    let run_dir = persist_run(&rec, &runs).unwrap();
    assert_eq!(run_dir, runs.join(&rec.run_id));
    assert!(run_dir.join("report.json").is_file());
    assert_eq!(std::fs::read_dir(run_dir.join("traces")).unwrap().count(), 3);
    let leftovers: Vec<_> = std::fs::read_dir(&runs).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(leftovers.len(), 1, "{leftovers:?}");

    let loaded = load_run(&run_dir).unwrap();
    let stored = loaded.report.clone().unwrap();
    let scores = loaded.scores();
    let n = scores.len() as f64;
    let mean = |f: fn(&focus_core::metrics::SampleScore) -> f64| scores.iter().map(f).sum::<f64>() / n;
    assert!((mean(|s| s.f1) - stored.f1).abs() < 1e-12);
    assert!((mean(|s| s.bleu3) - stored.bleu3).abs() < 1e-12);
    assert!((mean(|s| s.rouge_l) - stored.rouge_l).abs() < 1e-12);
    assert!((mean(|s| s.simcse.unwrap()) - stored.simcse.unwrap()).abs() < 1e-12);

    assert_eq!(rescore(&loaded, &ds, &Embedders::mock()).unwrap(), stored);

    // Any change to the dataset bytes is caught.
    let mut body = std::fs::read_to_string(&data).unwrap();
    body.push('\n');
    std::fs::write(&data, body).unwrap();
    let changed = load_dataset(&data).unwrap();
    assert!(rescore(&loaded, &changed, &Embedders::mock()).is_err());

    // Persisting again replaces the run in place.
    persist_run(&rec, &runs).unwrap();
    assert_eq!(std::fs::read_dir(&runs).unwrap().count(), 1);
}

#[test]
fn ablation_runs_issue_expected_stage_calls() {
    let dir = tempfile::tempdir().unwrap();
    let ds = load_dataset(&factual_fixture(dir.path())).unwrap();
    let llm = RecordingBackend::new(SyntheticBackend::new());
    let cat = PromptCatalog::builtin();
    let p = Prompter::new(&llm, &cat, CallContext::new("mock"));
    let cfg = RunConfig::new(Method::Focus, 2);
    let records = run_ablation(&ds, &cfg, &p, &Embedders::mock());
    let variants: Vec<Ablation> = records.iter().map(|(a, _)| *a).collect();
    assert_eq!(variants, [Ablation::NONE, Ablation::SKIP_MEI, Ablation::SKIP_ERI]);
    for (a, rec) in &records {
        let stage_calls: usize = rec
            .samples
            .iter()
            .map(|s| {
                let t = serde_json::to_value(s.trace.as_ref().unwrap()).unwrap();
                t["exchanges"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .filter(|x| x["prompt_id"].as_str().unwrap().starts_with("focus."))
                    .count()
            })
            .sum();
        assert_eq!(stage_calls, a.stage_calls() * ds.records.len(), "{a}");
    }
    let total_stage = llm.count_prefix("focus.");
    assert_eq!(total_stage, (4 + 3 + 3) * ds.records.len());

    let recs: Vec<_> = records.into_iter().map(|(_, r)| r).collect();
    let table = render_table(&recs, Layout::Ablation).unwrap();
    assert!(table.contains("w/o MEI") && table.contains("w/o ERI") && table.contains("FOCUS"));
}
