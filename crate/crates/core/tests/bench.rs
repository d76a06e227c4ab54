mod common;

use common::{fixture_prior, random_image, random_prior, rng, test_corpus};
use proptest::prelude::*;
use refsep_core::bench::*;
use refsep_core::posterior::{posterior_components, top_candidates, PairCaching, PairTable};
use refsep_core::separation::{Layer, SeparationConfig};
use refsep_core::Image;

#[test]
fn synth_pairs_are_deterministic_exact_and_distinct() {
    let corpus = test_corpus();
    let a = synth_pairs(&corpus, 20, 40, 7).unwrap();
    let b = synth_pairs(&corpus, 20, 40, 7).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, synth_pairs(&corpus, 20, 40, 8).unwrap());
    for p in &a {
        assert_ne!(p.sources[0].image, p.sources[1].image);
        for (s, layer) in p.sources.iter().zip([&p.x1_true, &p.x2_true]) {
            let src = &corpus[s.image];
            assert!(s.x + 40 <= src.width() && s.y + 40 <= src.height());
            assert_eq!(&src.crop(s.x, s.y, 40, 40).unwrap(), layer);
        }
        for ((y, x1), x2) in p.y.pixels().iter().zip(p.x1_true.pixels()).zip(p.x2_true.pixels()) {
            assert_eq!(*y, x1 + x2);
        }
    }
    assert_eq!(synth_pair(&corpus, 40, 7, 13).unwrap(), a[13]);
}

#[test]
fn synth_pairs_reject_small_corpora() {
    let one = vec![Image::filled(50, 50, 0.5)];
    assert!(synth_pairs(&one, 1, 40, 0).is_err());
    let tiny = vec![Image::filled(30, 30, 0.5), Image::filled(30, 30, 0.2)];
    assert!(synth_pairs(&tiny, 1, 40, 0).is_err());
}

#[test]
fn annotation_density_counts() {
    let corpus = test_corpus();
    let d = AnnotationDensity(8);
    assert_eq!(d.target_count(40, 40), 25);
    assert_eq!(AnnotationDensity(22).target_count(40, 40), 1);
    assert!(AnnotationDensity(4).validate(40).is_err());
    assert!(AnnotationDensity(41).validate(40).is_err());
    for p in synth_pairs(&corpus, 10, 40, 1).unwrap() {
        let sites = annotation_sites(&p.y, d, 3).unwrap();
        assert!(sites.len() <= 25);
        let edges = canny(&p.y);
        let mut cells: Vec<(usize, usize)> = sites.iter().map(|&(x, y)| (x / 8, y / 8)).collect();
        for &(x, y) in &sites {
            assert!(edges.is_edge(x, y));
        }
        cells.dedup();
        assert_eq!(cells.len(), sites.len());
        assert_eq!(sites, annotation_sites(&p.y, d, 3).unwrap());
    }
    let flat = Image::filled(40, 40, 0.5);
    assert!(annotation_sites(&flat, d, 0).unwrap().is_empty());
}

#[test]
fn single_layer_edges_are_all_layer_one() {
    let corpus = test_corpus();
    let mut p = synth_pair(&corpus, 40, 2, 0).unwrap();
    p.x2_true = Image::filled(40, 40, 0.0);
    p.y = p.x1_true.clone();
    let anns = auto_annotate_filters(&p, AnnotationDensity(8), 0).unwrap();
    assert!(!anns.annotations.is_empty());
    assert!(anns.annotations.iter().all(|a| a.layer == Layer::One));

    let flat = refsep_core::bench::SynthPair {
        x1_true: Image::filled(40, 40, 0.3),
        x2_true: Image::filled(40, 40, 0.1),
        y: Image::filled(40, 40, 0.4),
        ..p
    };
    let none = auto_annotate_filters(&flat, AnnotationDensity(8), 0).unwrap();
    assert!(none.annotations.is_empty());
    assert!(none.warning.is_some());
}

fn magnitude_at(img: &Image, x: usize, y: usize) -> f64 {
    let (w, h) = (img.width(), img.height());
    let dx = if x + 1 < w { img.get(x + 1, y) - img.get(x, y) } else { img.get(x, y) - img.get(x - 1, y) };
    let dy = if y + 1 < h { img.get(x, y + 1) - img.get(x, y) } else { img.get(x, y) - img.get(x, y - 1) };
    (dx * dx + dy * dy).sqrt()
}

#[test]
fn filter_labels_follow_ground_truth_gradients() {
    let corpus = test_corpus();
    for p in synth_pairs(&corpus, 10, 40, 4).unwrap() {
        let anns = auto_annotate_filters(&p, AnnotationDensity(8), 9).unwrap();
        for a in &anns.annotations {
            let expect = if magnitude_at(&p.x1_true, a.x, a.y) >= magnitude_at(&p.x2_true, a.x, a.y) {
                Layer::One
            } else {
                Layer::Two
            };
            assert_eq!(a.layer, expect);
        }
    }
}

#[test]
fn exact_candidate_is_always_a_choice() {
    let prior = fixture_prior();
    let table = PairTable::build(&prior, PairCaching::Auto).unwrap();
    let corpus = test_corpus();
    let mut p = synth_pair(&corpus, 16, 5, 0).unwrap();
    let (sx, sy) = (8, 9);
    let (ox, oy) = site_origin(16, 16, sx, sy);
    assert_eq!((ox, oy), (4, 5));
    let post = posterior_components(&p.y.patch(ox, oy), &prior, &table).unwrap();
    let cands = top_candidates(&post, 100).unwrap();
    let target = &cands.entries[17];
    for r in 0..8 {
        for c in 0..8 {
            p.x1_true.set(ox + c, oy + r, target.x1[r * 8 + c]);
        }
    }
    let mut hits = 0;
    for seed in 0..40 {
        let a = auto_annotate_components(&p, &[(sx, sy)], &prior, &table, 100, seed).unwrap();
        assert_eq!((a[0].x, a[0].y), (ox, oy));
        hits += usize::from((a[0].i, a[0].j) == (target.i, target.j));
    }
    assert!(hits > 0 && hits < 40, "hits {hits}");
    assert!(auto_annotate_components(&p, &[(sx, sy)], &prior, &table, 1, 0).is_err());
}

#[test]
fn two_candidate_pick_is_uniform() {
    let prior = random_prior(3, 21);
    let table = PairTable::build(&prior, PairCaching::Auto).unwrap();
    let mut r = rng(22);
    let x1 = random_image(&mut r, 8, 8);
    let x2 = random_image(&mut r, 8, 8);
    let p = SynthPair {
        y: x1.add(&x2).unwrap(),
        x1_true: x1,
        x2_true: x2,
        sources: [CropSource { image: 0, x: 0, y: 0 }, CropSource { image: 1, x: 0, y: 0 }],
        index: 0,
        seed: 0,
    };
    let post = posterior_components(&p.y.patch(0, 0), &prior, &table).unwrap();
    let first = top_candidates(&post, 2).unwrap().entries[0].clone();
    let sites = vec![(4usize, 4usize); 10_000];
    let picks = auto_annotate_components(&p, &sites, &prior, &table, 2, 5).unwrap();
    let share = picks.iter().filter(|a| (a.i, a.j) == (first.i, first.j)).count() as f64 / 10_000.0;
    assert!((share - 0.5).abs() <= 0.02, "share {share}");
}

#[test]
fn accuracy_curve_is_monotone_and_reproducible() {
    let prior = fixture_prior();
    let table = PairTable::build(&prior, PairCaching::Auto).unwrap();
    let corpus = test_corpus();
    let ns = [1, 3, 10, 30, 100, 400];
    let c = candidate_accuracy_curve(&corpus, &prior, &table, &ns, 40, 3).unwrap();
    for row in &c.per_trial {
        assert!(row.windows(2).all(|w| w[1] >= w[0]));
    }
    assert!(c.points.windows(2).all(|w| w[1].mean >= w[0].mean));
    assert!(c.points.iter().all(|p| p.n == 40));
    assert_eq!(c, candidate_accuracy_curve(&corpus, &prior, &table, &ns, 40, 3).unwrap());
    assert!(candidate_accuracy_curve(&corpus, &prior, &table, &ns, 0, 3).is_err());
}

fn quick_config(densities: Vec<usize>, methods: Vec<Method>) -> BenchConfig {
    BenchConfig {
        instances: 3,
        size: 16,
        densities: densities.into_iter().map(AnnotationDensity).collect(),
        methods,
        n_candidates: 20,
        seed: 11,
        separation: SeparationConfig { beta_schedule: Some(vec![0.05, 0.5, 5.0]), outer_iters_per_beta: 1, ..Default::default() },
    }
}

#[test]
fn empty_density_component_run_equals_unannotated_run() {
    let prior = fixture_prior();
    let table = PairTable::build(&prior, PairCaching::Auto).unwrap();
    let corpus = test_corpus();
    let cfg = quick_config(vec![0], Method::ALL.to_vec());
    let rep = run_separation_bench(&corpus, &prior, &table, &cfg, None).unwrap();
    let d = &rep.separation[0];
    let get = |m: Method| d.methods.iter().find(|r| r.method == m).unwrap().psnr.unwrap();
    assert_eq!(get(Method::GmmC), get(Method::Epll));
    assert_eq!(get(Method::GmmF), get(Method::Epll));
    assert_eq!(d.mean_annotations, 0.0);
}

#[test]
fn bench_report_is_paired_and_reproducible() {
    let prior = fixture_prior();
    let table = PairTable::build(&prior, PairCaching::Auto).unwrap();
    let corpus = test_corpus();
    let cfg = quick_config(vec![8], vec![Method::GmmC, Method::GmmF]);
    let a = run_separation_bench(&corpus, &prior, &table, &cfg, None).unwrap();
    let b = run_separation_bench(&corpus, &prior, &table, &cfg, None).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    assert_eq!(a.version, "bench_report_v1");
    assert_eq!(a.instances.len(), 6);
    for i in 0..3 {
        let recs: Vec<_> = a.instances.iter().filter(|r| r.instance == i).collect();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].annotations, recs[1].annotations);
    }
    let d = &a.separation[0];
    assert_eq!(d.paired.len(), 1);
    let diff = d.paired[0].difference.unwrap();
    let c = d.methods[0].psnr.unwrap();
    let f = d.methods[1].psnr.unwrap();
    assert!((diff.mean - (c.mean - f.mean)).abs() < 1e-9);
    assert_eq!(diff.n + d.methods[0].failures.max(d.methods[1].failures), 3);
    assert_eq!(a.to_csv().lines().count(), 7);
    assert!(a.to_text().contains("GMM-C − GMM-F"));
    let parsed: serde_json::Value = serde_json::from_str(&a.to_json().unwrap()).unwrap();
    assert_eq!(parsed["version"], "bench_report_v1");
    assert_eq!(parsed["instances"][0]["method"], "GMM-C");
}

#[test]
fn invalid_bench_configs_are_rejected() {
    let prior = fixture_prior();
    let table = PairTable::build(&prior, PairCaching::Auto).unwrap();
    let corpus = test_corpus();
    for cfg in [
        BenchConfig { instances: 0, ..quick_config(vec![8], vec![Method::GmmC]) },
        quick_config(vec![4], vec![Method::GmmC]),
        quick_config(vec![8], vec![]),
    ] {
        assert!(run_separation_bench(&corpus, &prior, &table, &cfg, None).is_err());
    }
}

#[test]
fn gradient_stats_on_corpus_are_consistent() {
    let corpus = test_corpus();
    let s = gradient_stats(&corpus).unwrap();
    assert_eq!(s.histogram.iter().sum::<u64>(), s.pixel_count);
    assert_eq!(s.pixel_count, corpus.iter().map(|c| (c.width() * c.height()) as u64).sum::<u64>());
    assert!(s.per_image_fractions.iter().all(|f| (0.0..=1.0).contains(f)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gradient_fractions_are_bounded(w in 1usize..20, h in 1usize..20, seed in 0u64..1000) {
        let img = random_image(&mut rng(seed), w, h);
        let s = gradient_stats(&[img]).unwrap();
        prop_assert!((0.0..=1.0).contains(&s.overall_fraction));
        prop_assert_eq!(s.histogram.iter().sum::<u64>(), (w * h) as u64);
    }
}
