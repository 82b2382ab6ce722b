use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use gumbel_prune::gates::{self, Temperature};
use gumbel_prune::{GatedNetwork, LayerSpec, Rng};
use std::hint::black_box;

fn sample_gates(c: &mut Criterion) {
    let mut group = c.benchmark_group("sample_gates");
    for widths in [vec![6, 64, 64, 2], vec![784, 300, 100, 10]] {
        let specs = LayerSpec::chain(&widths).unwrap();
        let net = GatedNetwork::new(&specs, 0.5, Temperature::new(1.0).unwrap(), &mut Rng::new(0)).unwrap();
        group.throughput(Throughput::Elements(net.gate_count() as u64));
        let mut rng = Rng::new(1);
        group.bench_with_input(BenchmarkId::from_parameter(net.gate_count()), &net, |b, net| {
            b.iter(|| net.sample_gates(&mut rng))
        });
    }
    group.finish();
}

fn straight_through(c: &mut Criterion) {
    let t = Temperature::new(0.5).unwrap();
    let mut rng = Rng::new(2);
    c.bench_function("straight_through", |b| {
        b.iter(|| {
            let xi = gates::gumbel_from_uniform(rng.uniform());
            let xp = gates::gumbel_from_uniform(rng.uniform());
            gates::straight_through(black_box(0.3), t, xi, xp)
        })
    });
}

criterion_group!(benches, sample_gates, straight_through);
criterion_main!(benches);
