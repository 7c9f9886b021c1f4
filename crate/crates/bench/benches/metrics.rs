use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use histaid_bench::spec;
use histaid_core::data::synth_cohort;
use histaid_core::experiment::{build_cohort, CohortOptions};
use histaid_core::metrics::{auprc, auroc, wilcoxon_exact, wilcoxon_normal, Alternative};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scores(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let labels: Vec<f64> = (0..n).map(|_| rng.random_bool(0.3) as u8 as f64).collect();
    let s = labels.iter().map(|l| l + rng.random::<f64>() * 2.0).collect();
    (s, labels)
}

fn ranking(c: &mut Criterion) {
    let mut group = c.benchmark_group("ranking");
    for n in [1_000, 100_000] {
        let (s, l) = scores(n);
        group.bench_with_input(BenchmarkId::new("auroc", n), &n, |b, _| b.iter(|| auroc(&s, &l).unwrap()));
        group.bench_with_input(BenchmarkId::new("auprc", n), &n, |b, _| b.iter(|| auprc(&s, &l).unwrap()));
    }
    group.finish();
}

fn rank_sum(c: &mut Criterion) {
    let x = [0.81, 0.83, 0.80, 0.84, 0.82, 0.85];
    let y = [0.78, 0.80, 0.79, 0.77, 0.81, 0.76];
    c.bench_function("wilcoxon_exact_6v6", |b| b.iter(|| wilcoxon_exact(&x, &y, Alternative::Greater).unwrap()));
    let (big, _) = scores(200);
    c.bench_function("wilcoxon_normal_100v100", |b| {
        b.iter(|| wilcoxon_normal(&big[..100], &big[100..], Alternative::Greater).unwrap())
    });
}

fn cohort_build(c: &mut Criterion) {
    let spec = spec(300);
    let synth = synth_cohort(&spec, 0).unwrap();
    let mut group = c.benchmark_group("cohort");
    group.sample_size(20);
    group.bench_function("synth_300", |b| b.iter(|| synth_cohort(&spec, 0).unwrap()));
    group.bench_function("build_300", |b| {
        b.iter(|| build_cohort(&synth.images, &synth.reports, &spec.labels, &CohortOptions::default()).unwrap())
    });
    group.finish();
}

criterion_group!(benches, ranking, rank_sum, cohort_build);
criterion_main!(benches);
