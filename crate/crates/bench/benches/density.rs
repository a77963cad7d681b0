use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dauc_core::{build_index, categorizer::IndexOptions, score, KdeModel, Kernel, LatentDataset};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn latents(seed: u64, n: usize, d: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0))
}

fn labelled(seed: u64, n: usize, d: usize, c: usize) -> LatentDataset {
    let x = latents(seed, n, d);
    let y_true = (0..n).map(|i| (i % c) as i64).collect();
    let y_pred = (0..n).map(|i| (i * 7 / 3) % c).collect();
    let ids = (0..n).map(|i| format!("r{i}")).collect();
    LatentDataset::new(ids, x, y_true, y_pred, None, c).unwrap()
}

fn kde_eval(c: &mut Criterion) {
    let mut g = c.benchmark_group("kde_eval_batch");
    for &m in &[500usize, 2000] {
        let kde = KdeModel::fit(Kernel::gaussian(0.5).unwrap(), latents(1, m, 8));
        let q = latents(2, 1000, 8);
        g.bench_with_input(BenchmarkId::new("parallel", m), &m, |b, _| {
            b.iter(|| kde.eval_batch(q.view()).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("sequential", m), &m, |b, _| {
            b.iter(|| kde.eval_batch_sequential(q.view()).unwrap())
        });
    }
    g.finish();
}

fn confusion_scores(c: &mut Criterion) {
    let train = labelled(3, 2000, 2, 3);
    let val = labelled(4, 2000, 2, 3);
    let test = labelled(5, 1000, 2, 3);
    let ix = build_index(
        &train,
        &val,
        Kernel::gaussian(1.0).unwrap(),
        IndexOptions::default(),
    )
    .unwrap();
    c.bench_function("score_1000x2000_3class", |b| {
        b.iter(|| score(&ix, &test).unwrap())
    });
}

criterion_group!(benches, kde_eval, confusion_scores);
criterion_main!(benches);
