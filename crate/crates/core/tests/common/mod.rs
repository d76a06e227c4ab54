#![allow(dead_code)]

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use refsep_core::gmm::read_gmm1;
use refsep_core::{GmmPrior, Image};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `A Aᵀ / n + floor·I` scaled to `scale`.
pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    let a: Vec<f64> = (0..n * n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mut c = vec![0.0; n * n];
    for r in 0..n {
        for col in 0..n {
            let s: f64 = (0..n).map(|k| a[r * n + k] * a[col * n + k]).sum();
            c[r * n + col] = scale * s / n as f64;
        }
        c[r * n + r] += 0.05 * scale;
    }
    for r in 0..n {
        for col in 0..r {
            let v = 0.5 * (c[r * n + col] + c[col * n + r]);
            c[r * n + col] = v;
            c[col * n + r] = v;
        }
    }
    c
}

pub fn random_prior(k: usize, seed: u64) -> GmmPrior {
    let mut r = rng(seed);
    let raw: Vec<f64> = (0..k).map(|_| r.random_range(0.5..1.5)).collect();
    let total: f64 = raw.iter().sum();
    let weights = raw.iter().map(|w| w / total).collect();
    let means = (0..k)
        .map(|_| {
            let dc = r.random_range(0.2..0.8);
            (0..64).map(|_| dc + 0.05 * r.sample::<f64, _>(StandardNormal)).collect()
        })
        .collect();
    let covs = (0..k)
        .map(|_| {
            let scale = 10f64.powf(r.random_range(-3.0..-1.3));
            random_spd(&mut r, 64, scale)
        })
        .collect();
    GmmPrior::new(weights, means, covs).unwrap()
}

pub fn random_vec(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

pub fn random_image(r: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
    Image::new(w, h, random_vec(r, w * h, 0.0, 1.0)).unwrap()
}

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Small prior trained on the bundled corpus.
pub fn fixture_prior() -> GmmPrior {
    bundled_prior("k20.gmm1")
}

pub fn bundled_prior(name: &str) -> GmmPrior {
    let path = repo_root().join("data/models").join(name);
    read_gmm1(std::fs::File::open(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

pub fn test_corpus() -> Vec<Image> {
    refsep_core::io::load_corpus(&repo_root().join("data/corpus/test"))
        .unwrap()
        .into_iter()
        .map(|(_, im)| im)
        .collect()
}

/// Two crops from different corpus images and their sum.
pub fn crop_pair(corpus: &[Image], size: usize, seed: u64) -> (Image, Image, Image) {
    let mut r = rng(seed);
    let a = r.random_range(0..corpus.len());
    let mut b = r.random_range(0..corpus.len() - 1);
    if b >= a {
        b += 1;
    }
    let crop = |im: &Image, r: &mut ChaCha8Rng| {
        let x = r.random_range(0..=im.width() - size);
        let y = r.random_range(0..=im.height() - size);
        im.crop(x, y, size, size).unwrap()
    };
    let x1 = crop(&corpus[a], &mut r);
    let x2 = crop(&corpus[b], &mut r);
    let y = x1.add(&x2).unwrap();
    (x1, x2, y)
}
