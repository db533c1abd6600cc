use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use mixtte_bench::{ekr_fixture, refresh_fixture};
use mixtte_core::diffmath::Tape;
use mixtte_core::esgmoe::layer_forward;
use mixtte_core::serving::{refresh_embeddings, EmbeddingCache};
use mixtte_core::stea::ekr;

fn bench_ekr(c: &mut Criterion) {
    let mut g = c.benchmark_group("ekr");
    g.sample_size(10);
    for n in [2_500, 5_000, 10_000, 20_000] {
        let f = ekr_fixture(n, 64, 128, 1);
        g.throughput(Throughput::Elements(n as u64));
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, _| {
            bch.iter(|| {
                let mut t = Tape::no_grad();
                let b = f.store.bind(&mut t);
                let h = t.constant(f.h.clone());
                ekr(&mut t, h, &f.params, &b).unwrap()
            })
        });
    }
    g.finish();
}

fn bench_layer(c: &mut Criterion) {
    let mut g = c.benchmark_group("layer_forward");
    g.sample_size(10);
    for n in [1_000, 4_000] {
        let f = refresh_fixture(n, 2);
        let x = f.model.link_input(&f.traffic, &f.ctx, 100).unwrap();
        let layer = &f.model.layers[0];
        g.throughput(Throughput::Elements(n as u64));
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, _| {
            bch.iter(|| {
                let mut t = Tape::no_grad();
                let b = f.model.store.bind(&mut t);
                let xv = t.constant(x.clone());
                let h = mixtte_core::stea::encode_slices(&mut t, xv, &f.model.stea, &b).unwrap();
                layer_forward(&mut t, h, h, &f.ctx.adjm, layer, &b).unwrap().out
            })
        });
    }
    g.finish();
}

fn bench_refresh(c: &mut Criterion) {
    let mut g = c.benchmark_group("refresh_embeddings");
    g.sample_size(10);
    for n in [2_500, 5_000, 10_000] {
        let f = refresh_fixture(n, 3);
        let cache = EmbeddingCache::new(1).unwrap();
        g.throughput(Throughput::Elements(n as u64));
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, _| {
            bch.iter(|| refresh_embeddings(&f.model, &f.traffic, &f.ctx, 100, &cache).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_ekr, bench_layer, bench_refresh);
criterion_main!(benches);
