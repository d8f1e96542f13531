use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use focus_core::llmclient::Embedders;
use focus_core::metrics::{best_reference_select, bleu3, rouge, score_sample, token_prf};

const PRED: &str = "The Winter Arc refers to a stretch of cold months when people stay focused. It is often used to talk about grinding through winter. This expression suggests discipline.";

fn references() -> Vec<String> {
    vec![
        "The Winter Arc refers to a time when people deal with the cold and hard parts of winter. It is often used to talk about staying strong and getting work done even when it's cold and challenging outside. This expression suggests that people are being tough and focused.".into(),
        "The Winter Arc refers to the cold season seen as a period of self-improvement. It is often used to describe working hard while others rest. This expression implies determination.".into(),
        "The Winter Arc refers to a phase of quiet effort during winter. It is often used when someone commits to a goal until spring. This expression conveys focus.".into(),
        "The Winter Arc refers to months of hard work in the cold. It is often used jokingly by people hitting the gym. This expression signals commitment.".into(),
        "The Winter Arc refers to a personal reset over winter. It is often used to frame discipline as a story arc. This expression suggests growth.".into(),
    ]
}

fn lexical(c: &mut Criterion) {
    let refs = references();
    c.bench_function("token_prf", |b| b.iter(|| token_prf(black_box(PRED), black_box(&refs[0]))));
    c.bench_function("bleu3", |b| b.iter(|| bleu3(black_box(PRED), black_box(&refs[0]))));
    c.bench_function("rouge", |b| b.iter(|| rouge(black_box(PRED), black_box(&refs[0]))));
    c.bench_function("best_of_5", |b| b.iter(|| best_reference_select(black_box(PRED), black_box(&refs))));
}

fn long_inputs(c: &mut Criterion) {
    let mut group = c.benchmark_group("rouge_by_length");
    for words in [50usize, 200, 800] {
        let text: String = PRED.split_whitespace().cycle().take(words).collect::<Vec<_>>().join(" ");
        let other: String = references()[0].split_whitespace().cycle().take(words).collect::<Vec<_>>().join(" ");
        group.bench_with_input(BenchmarkId::from_parameter(words), &(text, other), |b, (p, r)| {
            b.iter(|| rouge(black_box(p), black_box(r)))
        });
    }
    group.finish();
}

fn full_sample(c: &mut Criterion) {
    let refs = references();
    let embedders = Embedders::mock();
    c.bench_function("score_sample_mock_embedders", |b| {
        b.iter(|| score_sample(black_box(PRED), black_box(&refs), &embedders).unwrap())
    });
}

criterion_group!(benches, lexical, long_inputs, full_sample);
criterion_main!(benches);
