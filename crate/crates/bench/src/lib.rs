//! Shared fixtures for the benchmarks and the acceptance suite.

use std::path::{Path, PathBuf};

use refsep_core::gmm::read_gmm1;
use refsep_core::io::load_corpus;
use refsep_core::{GmmPrior, Image};

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Loads `data/models/<name>` if present.
pub fn model(name: &str) -> Option<GmmPrior> {
    let f = std::fs::File::open(repo_root().join("data/models").join(name)).ok()?;
    read_gmm1(std::io::BufReader::new(f)).ok()
}

pub fn corpus(split: &str) -> Vec<Image> {
    load_corpus(&repo_root().join("data/corpus").join(split))
        .expect("bundled corpus")
        .into_iter()
        .map(|(_, img)| img)
        .collect()
}
