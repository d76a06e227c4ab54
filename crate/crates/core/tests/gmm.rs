mod common;

use common::{random_image, random_spd, rng};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use refsep_core::gmm::{train_em_flat, InitMethod, TrainConfig};
use refsep_core::patch::{coverage_counts, extract_patches};
use refsep_core::{GmmPrior, Image};

fn small_prior(k: usize, dim: usize, seed: u64) -> GmmPrior {
    let mut r = rng(seed);
    let raw: Vec<f64> = (0..k).map(|_| r.random_range(0.3..1.7)).collect();
    let total: f64 = raw.iter().sum();
    let means = (0..k).map(|_| (0..dim).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
    let covs = (0..k)
        .map(|_| {
            let scale = r.random_range(0.05..0.5);
            random_spd(&mut r, dim, scale)
        })
        .collect();
    GmmPrior::new(raw.iter().map(|w| w / total).collect(), means, covs).unwrap()
}

/// Log density through dense LU inverse and determinant.
fn dense_log_density(prior: &GmmPrior, x: &[f64]) -> f64 {
    let d = prior.dim();
    let xv = DVector::from_column_slice(x);
    let terms: Vec<f64> = prior
        .components()
        .iter()
        .map(|c| {
            let cov = DMatrix::from_row_slice(d, d, &c.covariance);
            let inv = cov.clone().try_inverse().unwrap();
            let diff = &xv - DVector::from_column_slice(&c.mean);
            let quad = (diff.transpose() * inv * &diff)[(0, 0)];
            c.weight.ln() - 0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + cov.determinant().ln() + quad)
        })
        .collect();
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// Draws via nalgebra's Cholesky and an inverse-CDF component pick.
fn independent_samples(prior: &GmmPrior, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let d = prior.dim();
    let factors: Vec<DMatrix<f64>> = prior
        .components()
        .iter()
        .map(|c| DMatrix::from_row_slice(d, d, &c.covariance).cholesky().unwrap().l())
        .collect();
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let u: f64 = r.random();
            let mut k = 0;
            let mut acc = prior.component(0).weight;
            while u >= acc && k + 1 < prior.k() {
                k += 1;
                acc += prior.component(k).weight;
            }
            let z = DVector::from_fn(d, |_, _| r.sample::<f64, _>(StandardNormal));
            let x = &factors[k] * z + DVector::from_column_slice(&prior.component(k).mean);
            x.iter().cloned().collect()
        })
        .collect()
}

fn mean_and_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0))
}

#[test]
fn log_density_matches_dense_oracle() {
    let prior = common::random_prior(3, 11);
    let mut r = rng(12);
    for i in 0..100 {
        let x: Vec<f64> = if i % 2 == 0 {
            common::random_vec(&mut r, 64, 0.0, 1.0)
        } else {
            prior.sample_labeled(1, 1000 + i).remove(0).1
        };
        let got = prior.log_density(&x).unwrap();
        let want = dense_log_density(&prior, &x);
        assert!((got - want).abs() <= 1e-8 * want.abs().max(1.0), "{got} vs {want}");
    }
}

#[test]
fn em_log_likelihood_is_monotone_for_every_seed() {
    let source = small_prior(3, 4, 21);
    let data: Vec<f64> = source.sample_labeled(600, 22).into_iter().flat_map(|(_, x)| x).collect();
    for seed in 0..20u64 {
        let cfg = TrainConfig {
            k: 3,
            max_iters: 40,
            tol: 0.0,
            seed,
            init: if seed % 2 == 0 { InitMethod::RandomResponsibility } else { InitMethod::Kmeans },
            ..TrainConfig::default()
        };
        let fit = train_em_flat(&data, 4, &cfg).unwrap();
        assert!(fit.log_likelihood.len() >= 2);
        assert!(fit.warnings.is_empty(), "seed {seed}: {:?}", fit.warnings);
        for w in fit.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs(), "seed {seed}: {} then {}", w[0], w[1]);
        }
    }
}

/// Tight clusters whose variances are within a few decades of the floor.
fn tight_data() -> Vec<f64> {
    let mut r = rng(201);
    let raw: Vec<f64> = (0..3).map(|_| r.random_range(0.5..1.5)).collect();
    let total: f64 = raw.iter().sum();
    let means = (0..3)
        .map(|_| {
            let dc = r.random_range(0.2..0.8);
            (0..4).map(|_| dc + 0.05 * r.sample::<f64, _>(StandardNormal)).collect()
        })
        .collect();
    let covs = (0..3)
        .map(|_| {
            let scale = 10f64.powf(r.random_range(-3.0..-1.3));
            random_spd(&mut r, 4, scale)
        })
        .collect();
    let prior = GmmPrior::new(raw.iter().map(|w| w / total).collect(), means, covs).unwrap();
    prior.sample_labeled(600, 202).into_iter().flat_map(|(_, x)| x).collect()
}

#[test]
fn floored_overshoot_keeps_the_previous_model() {
    let data = tight_data();
    let mut triggered = 0;
    for seed in 0..20u64 {
        let cfg = TrainConfig {
            k: 3,
            max_iters: 200,
            tol: 0.0,
            seed,
            cov_floor: 1e-4,
            init: InitMethod::RandomResponsibility,
            ..TrainConfig::default()
        };
        let fit = train_em_flat(&data, 4, &cfg).unwrap();
        for w in fit.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs());
        }
        let ll: f64 = data.chunks_exact(4).map(|x| fit.prior.log_density(x).unwrap()).sum();
        let last = *fit.log_likelihood.last().unwrap();
        assert!((ll - last).abs() <= 1e-9 * last.abs(), "seed {seed}: returned model {ll} vs trace {last}");
        triggered += !fit.warnings.is_empty() as usize;
    }
    assert!(triggered > 0, "no run exercised the safeguard");
}

#[test]
fn kmeans_default_recovers_separated_components_for_every_seed() {
    let true_means = vec![vec![0.0, 0.0], vec![4.0, -3.0]];
    let cov = vec![0.1, 0.0, 0.0, 0.1];
    let source = GmmPrior::new(vec![0.4, 0.6], true_means.clone(), vec![cov.clone(), cov]).unwrap();
    let data: Vec<f64> = source.sample_labeled(1000, 203).into_iter().flat_map(|(_, x)| x).collect();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    for seed in 0..20u64 {
        let fit = train_em_flat(&data, 2, &TrainConfig { k: 2, seed, ..TrainConfig::default() }).unwrap();
        let m: Vec<&[f64]> = fit.prior.components().iter().map(|c| c.mean.as_slice()).collect();
        let err = dist(m[0], &true_means[0])
            .max(dist(m[1], &true_means[1]))
            .min(dist(m[0], &true_means[1]).max(dist(m[1], &true_means[0])));
        assert!(err < 0.05, "seed {seed}: {err}");
    }
}

#[test]
fn two_well_separated_components_are_recovered() {
    let dim = 2;
    let true_means = vec![vec![0.0, 0.0], vec![4.0, -3.0]];
    let cov = vec![0.1, 0.0, 0.0, 0.1];
    let source = GmmPrior::new(vec![0.4, 0.6], true_means.clone(), vec![cov.clone(), cov]).unwrap();
    let data: Vec<f64> = source.sample_labeled(1000, 31).into_iter().flat_map(|(_, x)| x).collect();
    let cfg = TrainConfig { k: 2, max_iters: 100, seed: 32, ..TrainConfig::default() };
    let fit = train_em_flat(&data, dim, &cfg).unwrap();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    let got: Vec<&[f64]> = fit.prior.components().iter().map(|c| c.mean.as_slice()).collect();
    // Exhaustive matching over both assignments.
    let direct = dist(got[0], &true_means[0]).max(dist(got[1], &true_means[1]));
    let swapped = dist(got[0], &true_means[1]).max(dist(got[1], &true_means[0]));
    assert!(direct.min(swapped) < 0.05, "errors {direct} / {swapped}");
}

#[test]
fn training_is_deterministic() {
    let data: Vec<f64> = small_prior(2, 3, 41).sample_labeled(300, 42).into_iter().flat_map(|(_, x)| x).collect();
    let cfg = TrainConfig { k: 2, max_iters: 15, seed: 7, ..TrainConfig::default() };
    let bytes = |cfg: &TrainConfig| {
        let fit = train_em_flat(&data, 3, cfg).unwrap();
        let params: Vec<(f64, Vec<f64>, Vec<f64>)> = fit
            .prior
            .components()
            .iter()
            .map(|c| (c.weight, c.mean.clone(), c.covariance.clone()))
            .collect();
        (params, fit.log_likelihood)
    };
    assert_eq!(bytes(&cfg), bytes(&cfg));
}

#[test]
fn sampled_component_frequencies_match_weights() {
    let base = small_prior(2, 3, 51);
    let prior = GmmPrior::new(
        vec![0.3, 0.7],
        base.components().iter().map(|c| c.mean.clone()).collect(),
        base.components().iter().map(|c| c.covariance.clone()).collect(),
    )
    .unwrap();
    let samples = prior.sample_labeled(50_000, 52);
    let first = samples.iter().filter(|(k, _)| *k == 0).count() as f64 / samples.len() as f64;
    assert!((first - 0.3).abs() <= 0.01, "{first}");
}

#[test]
fn sample_log_density_agrees_with_independent_sampler() {
    let prior = small_prior(3, 6, 61);
    let score = |xs: Vec<Vec<f64>>| -> Vec<f64> { xs.iter().map(|x| prior.log_density(x).unwrap()).collect() };
    let ours = score(prior.sample_labeled(10_000, 62).into_iter().map(|(_, x)| x).collect());
    let theirs = score(independent_samples(&prior, 10_000, 63));
    let (m1, v1) = mean_and_var(&ours);
    let (m2, v2) = mean_and_var(&theirs);
    let se = (v1 / ours.len() as f64 + v2 / theirs.len() as f64).sqrt();
    assert!((m1 - m2).abs() <= 2.0 * se, "{m1} vs {m2} (se {se})");
}

#[test]
fn trained_fixture_log_density_matches_dense_oracle() {
    let prior = common::fixture_prior();
    let total: f64 = (0..3).map(|k| prior.component(k).weight).sum();
    let sub = GmmPrior::new(
        (0..3).map(|k| prior.component(k).weight / total).collect(),
        (0..3).map(|k| prior.component(k).mean.clone()).collect(),
        (0..3).map(|k| prior.component(k).covariance.clone()).collect(),
    )
    .unwrap();
    for (_, x) in sub.sample_labeled(20, 71) {
        let got = sub.log_density(&x).unwrap();
        let want = dense_log_density(&sub, &x);
        assert!((got - want).abs() <= 1e-8 * want.abs().max(1.0), "{got} vs {want}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn log_density_is_permutation_invariant(seed in 0u64..1000, shuffle in 0u64..1000) {
        let prior = small_prior(4, 5, seed);
        let mut perm: Vec<usize> = (0..4).collect();
        let mut r = rng(shuffle);
        for i in (1..perm.len()).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let relabeled = prior.permuted(&perm).unwrap();
        for _ in 0..10 {
            let x: Vec<f64> = (0..5).map(|_| r.random_range(-3.0..3.0)).collect();
            let a = prior.log_density(&x).unwrap();
            let b = relabeled.log_density(&x).unwrap();
            prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
        }
    }

    #[test]
    fn patch_sums_count_covering_patches(seed in 0u64..1000, w in 8usize..24, h in 8usize..24, stride in 1usize..5) {
        let img = random_image(&mut rng(seed), w, h);
        let mut acc = Image::filled(w, h, 0.0);
        for (idx, p) in extract_patches(&img, stride).unwrap() {
            acc.add_patch(idx % w, idx / w, p.as_array());
        }
        let counts = coverage_counts(w, h, stride);
        for y in 0..h {
            for x in 0..w {
                let want = counts.get(x, y) * img.get(x, y);
                prop_assert!((acc.get(x, y) - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
        }
    }
}
