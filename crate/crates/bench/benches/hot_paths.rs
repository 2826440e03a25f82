use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use ndarray::Array2;

use cedar_core::fixture::{generate_fixture, FixtureSpec};
use cedar_core::ranker::{self, EmbeddingBag, RankerModel, RankerSettings, TypeIndex};
use cedar_core::trigger::{TriggerModel, TriggerSettings};
use cedar_core::Encoder;

fn bag(rows: usize, h: usize, offset: usize) -> EmbeddingBag {
    let v = Array2::from_shape_fn((rows, h), |(i, j)| (((i + offset) * 31 + j * 17) % 13) as f64 - 6.0);
    EmbeddingBag::normalized(v.view()).expect("non-zero rows")
}

fn tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(String::from).collect()
}

fn bench_maxsim(c: &mut Criterion) {
    let (e, s) = (bag(32, 32, 0), bag(32, 32, 5));
    c.bench_function("maxsim 32x32 h32", |b| b.iter(|| ranker::maxsim(&e, &s).unwrap()));
}

fn bench_rank(c: &mut Criterion) {
    let fx = generate_fixture(&FixtureSpec {
        num_types: 3500,
        sentences_per_type: 1,
        ..FixtureSpec::default()
    })
    .expect("fixture");
    let model =
        RankerModel::new(Encoder::reference(32, 17).expect("encoder"), RankerSettings::default()).expect("ranker");
    let index = TypeIndex::build(&model, &fx.ontology).expect("index");
    let sentence = tokens("officials said the treaty payment was wired to the bank yesterday");
    let mut group = c.benchmark_group("ranking");
    group.sample_size(20);
    group.bench_function("rank_types 3.5k types", |b| {
        b.iter(|| ranker::rank_types(&model, &index, &sentence).unwrap())
    });
    group.bench_function("build index 3.5k types", |b| {
        b.iter_batched(
            || (),
            |_| TypeIndex::build(&model, &fx.ontology).unwrap(),
            BatchSize::PerIteration,
        )
    });
    group.finish();
}

fn bench_spans(c: &mut Criterion) {
    let model = TriggerModel::new(Encoder::reference(32, 17).expect("encoder"), TriggerSettings::default());
    let sentence =
        tokens("the local officials reported that troops raided the border area again after several weeks of tension");
    c.bench_function("score_spans 17 tokens", |b| {
        b.iter(|| model.score_spans(&sentence).unwrap())
    });
}

criterion_group!(benches, bench_maxsim, bench_rank, bench_spans);
criterion_main!(benches);
