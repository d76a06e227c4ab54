use std::path::PathBuf;

use anyhow::Context;
use refsep_core::bench::{
    candidate_accuracy_curve, gradient_stats, run_separation_bench, AnnotationDensity, BenchConfig, Method,
};
use refsep_core::io::load_corpus;
use refsep_core::posterior::{PairCaching, PairTable};
use refsep_core::separation::SeparationConfig;

use crate::candidates::load_model;
use crate::{classify, usage};

#[derive(clap::Args)]
pub struct Args {
    /// Directory of test images the instances are cropped from.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Comma-separated subset of GMM-C, GMM-F, EPLL.
    #[arg(long, value_delimiter = ',', default_value = "GMM-C,GMM-F,EPLL")]
    methods: Vec<String>,
    /// Comma-separated annotation cell sizes; 0 means no annotations.
    #[arg(long, value_delimiter = ',', default_value = "8,22")]
    densities: Vec<usize>,
    /// Number of synthetic instances.
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON report path.
    #[arg(long)]
    out: PathBuf,
    /// Optional per-instance CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Instance side length.
    #[arg(long, default_value_t = 40)]
    size: usize,
    /// Random 8x8 pairs for the candidate accuracy curve; 0 skips it.
    #[arg(long, default_value_t = 0)]
    curve_trials: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,3,10,30,100")]
    curve_ns: Vec<usize>,
    #[arg(long)]
    lambda_c: Option<f64>,
    #[arg(long)]
    lambda_f: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    betas: Option<Vec<f64>>,
}

pub fn run(a: Args) -> anyhow::Result<()> {
    if a.trials == 0 {
        return Err(usage("--trials must be at least 1; refusing to write an empty report"));
    }
    let methods = a
        .methods
        .iter()
        .map(|m| m.parse::<Method>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(classify)?;
    let base = SeparationConfig::default();
    let cfg = BenchConfig {
        instances: a.trials,
        size: a.size,
        densities: a.densities.iter().map(|&d| AnnotationDensity(d)).collect(),
        methods,
        seed: a.seed,
        separation: SeparationConfig {
            lambda_c: a.lambda_c.unwrap_or(base.lambda_c),
            lambda_f: a.lambda_f.unwrap_or(base.lambda_f),
            beta_schedule: a.betas.clone(),
            ..base
        },
        ..Default::default()
    };
    cfg.validate().map_err(classify)?;
    let prior = load_model(&a.model)?;
    let images: Vec<_> = load_corpus(&a.corpus)
        .map_err(|e| usage(format!("{}: {e}", a.corpus.display())))?
        .into_iter()
        .map(|(_, img)| img)
        .collect();
    let table = PairTable::build(&prior, PairCaching::Auto).map_err(classify)?;
    let progress = |done: usize, total: usize| {
        if done % 10 == 0 || done == total {
            log::info!("{done}/{total} instances");
        }
    };
    let mut report = run_separation_bench(&images, &prior, &table, &cfg, Some(&progress)).map_err(classify)?;
    if a.curve_trials > 0 {
        report.candidate_accuracy =
            Some(candidate_accuracy_curve(&images, &prior, &table, &a.curve_ns, a.curve_trials, a.seed).map_err(classify)?);
    }
    report.gradient_stats = Some(gradient_stats(&images).map_err(classify)?.summary());
    std::fs::write(&a.out, report.to_json()?).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(p) = &a.csv {
        std::fs::write(p, report.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    print!("{}", report.to_text());
    Ok(())
}
