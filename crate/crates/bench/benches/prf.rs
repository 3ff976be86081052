use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use dpir_core::{gen, prf_expand, DomainSpec, PrfId, Seed, TargetPoint};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn expand(c: &mut Criterion) {
    let mut group = c.benchmark_group("prf_expand");
    group.throughput(Throughput::Elements(2));
    for prf in PrfId::ALL {
        group.bench_function(BenchmarkId::from_parameter(prf), |b| {
            let seed = Seed(0x0123_4567_89ab_cdef_0011_2233_4455_6677);
            b.iter(|| {
                (
                    prf_expand(prf, black_box(seed), 0),
                    prf_expand(prf, black_box(seed), 1),
                )
            })
        });
    }
    group.finish();
}

fn keygen(c: &mut Criterion) {
    let mut group = c.benchmark_group("gen");
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    for depth in [10u32, 14, 18, 22] {
        let domain = DomainSpec::from_depth(depth).unwrap();
        group.bench_function(BenchmarkId::from_parameter(depth), |b| {
            b.iter(|| gen(domain, PrfId::Aes128Ctr, TargetPoint(5), &mut rng).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, expand, keygen);
criterion_main!(benches);
