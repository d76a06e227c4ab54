use criterion::{criterion_group, criterion_main, Criterion};
use refsep_bench::{corpus, model};
use refsep_core::posterior::{PairCaching, PairTable};
use refsep_core::separation::{epll_gradient, separate, Annotations, SeparationConfig, SolveOptions};

fn bench_separation(c: &mut Criterion) {
    let Some(prior) = model("k20.gmm1") else { return };
    let table = PairTable::build(&prior, PairCaching::Auto).unwrap();
    let images = corpus("test");
    let a = images[0].crop(40, 40, 32, 32).unwrap();
    let b = images[1].crop(10, 70, 32, 32).unwrap();
    let y = a.add(&b).unwrap();
    let x = y.map(|v| 0.5 * v);
    c.bench_function("epll_gradient_32x32_k20", |bch| bch.iter(|| epll_gradient(&x, &y, &prior, &table, 1).unwrap()));
    let cfg = SeparationConfig { beta_schedule: Some(vec![0.1, 1.0, 10.0]), outer_iters_per_beta: 1, ..Default::default() };
    c.bench_function("separate_32x32_k20_3_stages", |bch| {
        bch.iter(|| separate(&y, &Annotations::default(), &prior, &table, &cfg, SolveOptions::default()).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_separation
}
criterion_main!(benches);
