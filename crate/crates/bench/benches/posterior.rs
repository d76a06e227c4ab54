use criterion::{criterion_group, criterion_main, Criterion};
use refsep_bench::{corpus, model};
use refsep_core::posterior::{posterior_components, top_candidates, PairCaching, PairTable};

fn bench_posterior(c: &mut Criterion) {
    let images = corpus("test");
    let y = images[0].patch(100, 100);
    for name in ["k20.gmm1", "k200.gmm1"] {
        let Some(prior) = model(name) else { continue };
        let k = prior.k();
        if k <= 20 {
            c.bench_function(&format!("pair_table_build_k{k}"), |b| {
                b.iter(|| PairTable::build(&prior, PairCaching::Full).unwrap())
            });
        }
        let table = PairTable::build(&prior, PairCaching::Auto).unwrap();
        c.bench_function(&format!("top100_candidates_k{k}"), |b| {
            b.iter(|| {
                let post = posterior_components(&y, &prior, &table).unwrap();
                top_candidates(&post, 100).unwrap()
            })
        });
    }
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_posterior
}
criterion_main!(benches);
