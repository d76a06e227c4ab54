use std::path::PathBuf;

use anyhow::Context;
use log::{info, warn};
use refsep_core::gmm::{train_em, write_gmm1, InitMethod, TrainConfig};
use refsep_core::io::load_corpus;
use refsep_core::patch::sample_patches;

use crate::{classify, usage};

#[derive(clap::Args)]
pub struct Args {
    /// Directory of training images.
    #[arg(long)]
    corpus: PathBuf,
    /// Number of mixture components.
    #[arg(long)]
    k: usize,
    /// Output GMM1 model file.
    #[arg(long)]
    out: PathBuf,
    /// Maximum EM iterations.
    #[arg(long, default_value_t = 100)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Added to covariance diagonals in every M-step.
    #[arg(long, default_value_t = 1e-6)]
    cov_floor: f64,
    /// Number of training patches sampled from the corpus.
    #[arg(long, default_value_t = 2_000_000)]
    patches: usize,
    /// Relative log-likelihood change that stops EM.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, value_enum, default_value_t = Init::Kmeans)]
    init: Init,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Init {
    RandomResponsibility,
    Kmeans,
}

pub fn run(a: Args) -> anyhow::Result<()> {
    let corpus = load_corpus(&a.corpus).map_err(|e| usage(format!("cannot read corpus {}: {e}", a.corpus.display())))?;
    let images: Vec<_> = corpus.into_iter().map(|(_, im)| im).collect();
    let patches = sample_patches(&images, a.patches, a.seed).map_err(classify)?;
    info!("training K={} on {} patches from {} images", a.k, patches.len(), images.len());
    let cfg = TrainConfig {
        k: a.k,
        max_iters: a.iters,
        tol: a.tol,
        cov_floor: a.cov_floor,
        seed: a.seed,
        init: match a.init {
            Init::RandomResponsibility => InitMethod::RandomResponsibility,
            Init::Kmeans => InitMethod::Kmeans,
        },
    };
    let fit = train_em(&patches, &cfg).map_err(classify)?;
    for w in &fit.warnings {
        warn!("{w}");
    }
    let file = std::fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_gmm1(&fit.prior, std::io::BufWriter::new(file))?;
    println!(
        "wrote {} (K={}, id {}, {} EM iterations, final log-likelihood {:.6e}, converged {})",
        a.out.display(),
        fit.prior.k(),
        fit.prior.id(),
        fit.log_likelihood.len(),
        fit.log_likelihood.last().copied().unwrap_or(f64::NAN),
        fit.converged
    );
    Ok(())
}
