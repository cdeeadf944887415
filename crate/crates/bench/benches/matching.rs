use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use repcount::matcher::hungarian;
use repcount_bench::random_costs;

fn matching(c: &mut Criterion) {
    let mut group = c.benchmark_group("hungarian");
    for n in [4, 16, 40, 100] {
        let costs = random_costs(n, 7);
        group.bench_with_input(BenchmarkId::from_parameter(n), &costs, |b, m| b.iter(|| hungarian(m).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, matching);
criterion_main!(benches);
