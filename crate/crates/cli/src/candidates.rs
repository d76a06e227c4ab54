use std::path::PathBuf;

use anyhow::Context;
use refsep_core::io::{encode_png8, read_image};
use refsep_core::patch::origin_for_point;
use refsep_core::posterior::{posterior_components, top_candidates, PairCaching, PairTable};
use refsep_core::render::{contact_sheet, THUMB_SCALE};

use crate::{classify, usage};

#[derive(clap::Args)]
pub struct Args {
    #[arg(long)]
    image: PathBuf,
    /// Column of the annotation point (patch spans x-4..x+4).
    #[arg(long)]
    x: usize,
    /// Row of the annotation point (patch spans y-4..y+4).
    #[arg(long)]
    y: usize,
    #[arg(long)]
    model: PathBuf,
    /// Number of candidates.
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// JSON output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// PNG of (x1 | y - x1) thumbnail pairs in rank order.
    #[arg(long)]
    contact_sheet: Option<PathBuf>,
}

pub fn load_model(path: &std::path::Path) -> anyhow::Result<refsep_core::GmmPrior> {
    let f = std::fs::File::open(path).map_err(|e| usage(format!("cannot open model {}: {e}", path.display())))?;
    refsep_core::gmm::read_gmm1(std::io::BufReader::new(f)).map_err(|e| usage(format!("{}: {e}", path.display())))
}

pub fn run(a: Args) -> anyhow::Result<()> {
    if a.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let prior = load_model(&a.model)?;
    let img = read_image(&a.image).map_err(|e| usage(format!("{}: {e}", a.image.display())))?.gray();
    let (ox, oy) = origin_for_point(img.width(), img.height(), a.x, a.y).ok_or_else(|| {
        usage(format!(
            "point ({}, {}) has no 8x8 patch inside the {}x{} image",
            a.x,
            a.y,
            img.width(),
            img.height()
        ))
    })?;
    let table = PairTable::build(&prior, PairCaching::Auto).map_err(classify)?;
    let post = posterior_components(&img.patch(ox, oy), &prior, &table).map_err(classify)?;
    let cands = top_candidates(&post, a.n).map_err(classify)?;
    let json = serde_json::to_string_pretty(&cands.records())?;
    match &a.out {
        Some(p) => std::fs::write(p, json).with_context(|| format!("writing {}", p.display()))?,
        None => println!("{json}"),
    }
    if let Some(p) = &a.contact_sheet {
        let sheet = contact_sheet(&cands, 10, THUMB_SCALE);
        std::fs::write(p, encode_png8(&sheet)?).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}
