use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gumbel_prune::gates::Temperature;
use gumbel_prune::train::{self, finalize, LossKind};
use gumbel_prune::{GatedNetwork, LayerSpec, Rng, Targets};
use ndarray::Array2;

fn setup(widths: &[usize], batch: usize) -> (GatedNetwork, Array2<f64>, Targets, Rng) {
    let mut rng = Rng::new(7);
    let specs = LayerSpec::chain(widths).unwrap();
    let net = GatedNetwork::new(&specs, 0.5, Temperature::new(1.0).unwrap(), &mut rng).unwrap();
    let x = Array2::from_shape_simple_fn((batch, widths[0]), || rng.uniform());
    let n_classes = *widths.last().unwrap();
    let labels = (0..batch).map(|i| i % n_classes).collect();
    (net, x, Targets::Classes { labels, n_classes }, rng)
}

fn forward_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("network");
    for widths in [vec![6, 64, 64, 2], vec![784, 300, 100, 10]] {
        let (net, x, targets, mut rng) = setup(&widths, 64);
        let id = format!("{widths:?}");
        let gates = net.sample_gates(&mut rng);
        group.bench_function(BenchmarkId::new("forward", &id), |b| {
            b.iter(|| net.forward(&gates, x.view()).unwrap())
        });
        group.bench_function(BenchmarkId::new("forward_backward", &id), |b| {
            b.iter(|| {
                let (out, tape) = net.forward(&gates, x.view()).unwrap();
                let (_, d) = train::prediction_loss(out.view(), &targets, LossKind::SoftmaxXent).unwrap();
                net.backward(&tape, d.view()).unwrap()
            })
        });
        let pruned = finalize(&net);
        group.bench_function(BenchmarkId::new("pruned_forward", &id), |b| {
            b.iter(|| pruned.forward(x.view()).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, forward_backward);
criterion_main!(benches);
