use std::path::PathBuf;

use anyhow::Context;
use refsep_core::bench::gradient_stats;
use refsep_core::io::load_corpus;

use crate::{classify, usage};

#[derive(clap::Args)]
pub struct Args {
    /// Directory of images.
    #[arg(long)]
    corpus: PathBuf,
    /// JSON report path.
    #[arg(long)]
    out: PathBuf,
}

pub fn run(a: Args) -> anyhow::Result<()> {
    let images: Vec<_> = load_corpus(&a.corpus)
        .map_err(|e| usage(format!("{}: {e}", a.corpus.display())))?
        .into_iter()
        .map(|(_, img)| img)
        .collect();
    let stats = gradient_stats(&images).map_err(classify)?;
    std::fs::write(&a.out, serde_json::to_string_pretty(&stats)?)
        .with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "{} images, {} pixels: {:.4} with gradient magnitude > {}; {:.3} of images above 0.3",
        images.len(),
        stats.pixel_count,
        stats.overall_fraction,
        stats.threshold,
        stats.busy_image_fraction
    );
    Ok(())
}
