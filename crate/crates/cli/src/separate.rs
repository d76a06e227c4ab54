use std::path::{Path, PathBuf};

use anyhow::Context;
use log::{info, warn};
use refsep_core::io::{encode_png16, read_image};
use refsep_core::pipeline::separate_image;
use refsep_core::posterior::{PairCaching, PairTable};
use refsep_core::separation::{Annotations, SeparationConfig};
use refsep_core::session::SessionFile;
use serde_json::json;

use crate::candidates::load_model;
use crate::{classify, usage};

#[derive(clap::Args)]
pub struct Args {
    #[arg(long)]
    image: PathBuf,
    /// Annotation session JSON; omit for an unannotated run.
    #[arg(long)]
    session: Option<PathBuf>,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    lambda_c: Option<f64>,
    #[arg(long)]
    stride: Option<usize>,
    /// Comma-separated, strictly increasing beta schedule.
    #[arg(long, value_delimiter = ',')]
    betas: Option<Vec<f64>>,
    /// Writes <prefix>_x1.png, <prefix>_x2.png and <prefix>_result.json.
    #[arg(long)]
    out_prefix: PathBuf,
    /// Project x1 into [0, y] after every beta stage.
    #[arg(long, action = clap::ArgAction::Set, default_value_t = true)]
    clip: bool,
    #[arg(long)]
    seed: Option<u64>,
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn run(a: Args) -> anyhow::Result<()> {
    let prior = load_model(&a.model)?;
    let decoded = read_image(&a.image).map_err(|e| usage(format!("{}: {e}", a.image.display())))?;
    let (w, h) = (decoded.width(), decoded.height());
    let (mut cfg, components) = match &a.session {
        Some(p) => {
            let s = SessionFile::read(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            s.check(&decoded.sha256, prior.id()).map_err(classify)?;
            let comps = s.component_annotations(w, h).map_err(classify)?;
            (s.config, comps)
        }
        None => (SeparationConfig::default(), Vec::new()),
    };
    if let Some(v) = a.lambda_c {
        cfg.lambda_c = v;
    }
    if let Some(v) = a.stride {
        cfg.stride = v;
    }
    if let Some(v) = a.betas {
        cfg.beta_schedule = Some(v);
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.clip_to_physical = a.clip;
    cfg.validate().map_err(classify)?;
    let annotations = Annotations { components, filters: vec![] };

    let table = PairTable::build(&prior, PairCaching::Auto).map_err(classify)?;
    let last = std::sync::Mutex::new(0usize);
    let progress = |f: f64| {
        let pct = (f * 100.0).floor() as usize;
        let mut l = last.lock().unwrap();
        if pct >= *l + 10 || (pct == 100 && *l < 100) {
            *l = pct;
            info!("separation {pct}%");
        }
    };
    let started = std::time::Instant::now();
    let out = separate_image(&decoded, &annotations, &prior, &table, &cfg, Some(&progress)).map_err(classify)?;
    for wmsg in out.summary.warnings() {
        warn!("{wmsg}");
    }
    let p1 = with_suffix(&a.out_prefix, "_x1.png");
    let p2 = with_suffix(&a.out_prefix, "_x2.png");
    let pj = with_suffix(&a.out_prefix, "_result.json");
    std::fs::write(&p1, encode_png16(&out.x1)?).with_context(|| format!("writing {}", p1.display()))?;
    std::fs::write(&p2, encode_png16(&out.x2)?).with_context(|| format!("writing {}", p2.display()))?;
    let record = json!({
        "image_sha256": decoded.sha256,
        "prior_id": prior.id(),
        "x1": p1.file_name().map(|s| s.to_string_lossy().into_owned()),
        "x2": p2.file_name().map(|s| s.to_string_lossy().into_owned()),
        "seconds": started.elapsed().as_secs_f64(),
        "result": out.summary,
    });
    std::fs::write(&pj, serde_json::to_string_pretty(&record)?).with_context(|| format!("writing {}", pj.display()))?;
    println!("wrote {}, {}, {}", p1.display(), p2.display(), pj.display());
    Ok(())
}
