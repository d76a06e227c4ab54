use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::annotate::{annotation_sites, auto_annotate_components, label_sites, synth_pair, AnnotationDensity};
use super::stats::GradientSummary;
use super::stream_rng;
use crate::error::{Error, Result};
use crate::gmm::GmmPrior;
use crate::metrics::psnr;
use crate::posterior::{posterior_components, top_candidates, PairTable};
use crate::separation::{separate, Annotations, SeparationConfig, SolveOptions};

pub const BENCH_REPORT_VERSION: &str = "bench_report_v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "GMM-C")]
    GmmC,
    #[serde(rename = "GMM-F")]
    GmmF,
    #[serde(rename = "EPLL")]
    Epll,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::GmmC, Method::GmmF, Method::Epll];

    pub fn name(&self) -> &'static str {
        match self {
            Method::GmmC => "GMM-C",
            Method::GmmF => "GMM-F",
            Method::Epll => "EPLL",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "GMM-C" | "GMMC" | "C" => Ok(Method::GmmC),
            "GMM-F" | "GMMF" | "F" => Ok(Method::GmmF),
            "EPLL" | "EPLL-ONLY" => Ok(Method::Epll),
            _ => Err(Error::invalid(format!("unknown method {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStat {
    pub mean: f64,
    /// `None` for fewer than two samples.
    pub std_err: Option<f64>,
    pub n: usize,
}

impl MeanStat {
    pub fn of(values: &[f64]) -> Option<MeanStat> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std_err = (n > 1).then(|| {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        });
        Some(MeanStat { mean, std_err, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCurve {
    pub ns: Vec<usize>,
    pub trials: usize,
    pub points: Vec<MeanStat>,
    /// Per-trial best PSNR, one row per trial in `ns` order.
    #[serde(skip)]
    pub per_trial: Vec<Vec<f64>>,
}

/// Best-of-`N` candidate PSNR over random 8×8 pairs, for each `N` in `ns`.
pub fn candidate_accuracy_curve(
    corpus: &[crate::patch::Image],
    prior: &GmmPrior,
    table: &PairTable,
    ns: &[usize],
    trials: usize,
    seed: u64,
) -> Result<AccuracyCurve> {
    if trials == 0 || ns.is_empty() || ns.contains(&0) {
        return Err(Error::invalid("need trials ≥ 1 and candidate counts ≥ 1"));
    }
    let max_n = *ns.iter().max().expect("non-empty");
    let per_trial = (0..trials)
        .into_par_iter()
        .map(|t| {
            let pair = synth_pair(corpus, crate::patch::PATCH_SIDE, seed, t)?;
            let truth = pair.x1_true.patch(0, 0);
            let post = posterior_components(&pair.y.patch(0, 0), prior, table)?;
            let cands = top_candidates(&post, max_n)?;
            let mut best = f64::INFINITY;
            let mut prefix = Vec::with_capacity(cands.len());
            for c in &cands.entries {
                best = best.min(c.x1.squared_distance(&truth));
                prefix.push(best);
            }
            Ok(ns
                .iter()
                .map(|&n| {
                    let sq = prefix[n.min(prefix.len()) - 1];
                    crate::metrics::psnr_mse(sq / crate::patch::PATCH_DIM as f64)
                })
                .collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let points = (0..ns.len())
        .map(|k| MeanStat::of(&per_trial.iter().map(|r| r[k]).collect::<Vec<_>>()).expect("trials ≥ 1"))
        .collect();
    Ok(AccuracyCurve { ns: ns.to_vec(), trials, points, per_trial })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub instances: usize,
    pub size: usize,
    pub densities: Vec<AnnotationDensity>,
    pub methods: Vec<Method>,
    pub n_candidates: usize,
    pub seed: u64,
    pub separation: SeparationConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            instances: 100,
            size: 40,
            densities: vec![AnnotationDensity(8), AnnotationDensity(22)],
            methods: Method::ALL.to_vec(),
            n_candidates: 100,
            seed: 0,
            separation: SeparationConfig::default(),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 {
            return Err(Error::invalid("instances must be at least 1"));
        }
        if self.methods.is_empty() || self.densities.is_empty() {
            return Err(Error::invalid("need at least one method and one density"));
        }
        if self.size < crate::patch::PATCH_SIDE {
            return Err(Error::invalid("instance size must be at least 8"));
        }
        for d in &self.densities {
            d.validate(self.size)?;
        }
        self.separation.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub instance: usize,
    pub density: AnnotationDensity,
    pub method: Method,
    pub annotations: usize,
    pub psnr: Option<f64>,
    /// `true` when the solver fell back to an earlier iterate.
    pub earlier_iterate: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    pub psnr: Option<MeanStat>,
    pub failures: usize,
    pub earlier_iterate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedDifference {
    pub a: Method,
    pub b: Method,
    /// Mean of per-instance `PSNR(a) − PSNR(b)` over instances where both succeeded.
    pub difference: Option<MeanStat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    pub density: AnnotationDensity,
    pub mean_annotations: f64,
    pub methods: Vec<MethodReport>,
    pub paired: Vec<PairedDifference>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub version: String,
    pub config: BenchConfig,
    pub prior_id: String,
    pub separation: Vec<DensityReport>,
    pub candidate_accuracy: Option<AccuracyCurve>,
    pub gradient_stats: Option<GradientSummary>,
    pub instances: Vec<InstanceRecord>,
}

fn run_method(
    pair: &super::annotate::SynthPair,
    anns: &Annotations,
    prior: &GmmPrior,
    table: &PairTable,
    cfg: &SeparationConfig,
) -> (Option<f64>, bool, Option<String>) {
    match separate(&pair.y, anns, prior, table, cfg, SolveOptions::default()) {
        Ok(r) => match psnr(&r.x1, &pair.x1_true) {
            Ok(p) => (Some(p), r.returned_iterate + 1 != r.objective_trace.len(), None),
            Err(e) => (None, false, Some(e.to_string())),
        },
        Err(e) => (None, false, Some(e.to_string())),
    }
}

fn run_instance(
    corpus: &[crate::patch::Image],
    prior: &GmmPrior,
    table: &PairTable,
    cfg: &BenchConfig,
    index: usize,
) -> Vec<InstanceRecord> {
    let mut rng = stream_rng(cfg.seed, 3, index as u64);
    let solver_seed: u64 = rng.random();
    let annotation_seed: u64 = rng.random();
    let sep = SeparationConfig { seed: solver_seed, ..cfg.separation.clone() };
    let failed = |density, method, msg: String| InstanceRecord {
        instance: index,
        density,
        method,
        annotations: 0,
        psnr: None,
        earlier_iterate: false,
        error: Some(msg),
    };
    let pair = match synth_pair(corpus, cfg.size, cfg.seed, index) {
        Ok(p) => p,
        Err(e) => {
            return cfg
                .densities
                .iter()
                .flat_map(|&d| cfg.methods.iter().map(move |&m| (d, m)))
                .map(|(d, m)| failed(d, m, e.to_string()))
                .collect();
        }
    };
    let epll = cfg
        .methods
        .contains(&Method::Epll)
        .then(|| run_method(&pair, &Annotations::default(), prior, table, &sep));
    let mut out = Vec::new();
    for &density in &cfg.densities {
        let sites = match annotation_sites(&pair.y, density, annotation_seed) {
            Ok(s) => s,
            Err(e) => {
                out.extend(cfg.methods.iter().map(|&m| failed(density, m, e.to_string())));
                continue;
            }
        };
        for &method in &cfg.methods {
            let (annotations, (psnr, earlier, error)) = match method {
                Method::Epll => (0, epll.clone().expect("computed above")),
                Method::GmmF => {
                    let filters = label_sites(&pair, &sites);
                    let anns = Annotations { components: vec![], filters };
                    (sites.len(), run_method(&pair, &anns, prior, table, &sep))
                }
                Method::GmmC => {
                    match auto_annotate_components(&pair, &sites, prior, table, cfg.n_candidates, annotation_seed) {
                        Ok(components) => {
                            let anns = Annotations { components, filters: vec![] };
                            (sites.len(), run_method(&pair, &anns, prior, table, &sep))
                        }
                        Err(e) => (sites.len(), (None, false, Some(e.to_string()))),
                    }
                }
            };
            out.push(InstanceRecord { instance: index, density, method, annotations, psnr, earlier_iterate: earlier, error });
        }
    }
    out
}

/// Paired benchmark: every method sees the same instances and annotation
/// sites. `progress` receives (finished, total) instance counts.
pub fn run_separation_bench(
    corpus: &[crate::patch::Image],
    prior: &GmmPrior,
    table: &PairTable,
    cfg: &BenchConfig,
    progress: Option<&(dyn Fn(usize, usize) + Sync)>,
) -> Result<BenchReport> {
    cfg.validate()?;
    table.check_prior(prior)?;
    synth_pair(corpus, cfg.size, cfg.seed, 0)?;
    let done = AtomicUsize::new(0);
    let instances: Vec<InstanceRecord> = (0..cfg.instances)
        .into_par_iter()
        .flat_map_iter(|i| {
            let recs = run_instance(corpus, prior, table, cfg, i);
            let n = done.fetch_add(1, Ordering::Relaxed) + 1;
            if let Some(p) = progress {
                p(n, cfg.instances);
            }
            recs
        })
        .collect();
    let separation = cfg.densities.iter().map(|&d| density_report(cfg, d, &instances)).collect();
    Ok(BenchReport {
        version: BENCH_REPORT_VERSION.to_string(),
        config: cfg.clone(),
        prior_id: prior.id().to_string(),
        separation,
        candidate_accuracy: None,
        gradient_stats: None,
        instances,
    })
}

fn density_report(cfg: &BenchConfig, density: AnnotationDensity, recs: &[InstanceRecord]) -> DensityReport {
    let of = |m: Method| recs.iter().filter(move |r| r.density == density && r.method == m);
    let methods = cfg
        .methods
        .iter()
        .map(|&m| MethodReport {
            method: m,
            psnr: MeanStat::of(&of(m).filter_map(|r| r.psnr).collect::<Vec<_>>()),
            failures: of(m).filter(|r| r.psnr.is_none()).count(),
            earlier_iterate: of(m).filter(|r| r.earlier_iterate).count(),
        })
        .collect();
    let mut paired = Vec::new();
    for (a, b) in [(Method::GmmC, Method::GmmF), (Method::GmmC, Method::Epll), (Method::GmmF, Method::Epll)] {
        if !(cfg.methods.contains(&a) && cfg.methods.contains(&b)) {
            continue;
        }
        let diffs: Vec<f64> = of(a)
            .zip(of(b))
            .filter_map(|(ra, rb)| Some(ra.psnr? - rb.psnr?))
            .collect();
        paired.push(PairedDifference { a, b, difference: MeanStat::of(&diffs) });
    }
    let counted: Vec<f64> = recs
        .iter()
        .filter(|r| r.density == density && r.method != Method::Epll)
        .map(|r| r.annotations as f64)
        .collect();
    let mean_annotations = MeanStat::of(&counted).map_or(0.0, |s| s.mean);
    DensityReport { density, mean_annotations, methods, paired }
}

fn fmt_stat(s: &Option<MeanStat>) -> String {
    match s {
        Some(MeanStat { mean, std_err: Some(se), n }) => format!("{mean:8.3} ± {se:6.3}  (n={n})"),
        Some(MeanStat { mean, std_err: None, n }) => format!("{mean:8.3}           (n={n})"),
        None => "       -           (n=0)".to_string(),
    }
}

impl BenchReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} prior={} instances={} size={}", self.version, self.prior_id, self.config.instances, self.config.size);
        for d in &self.separation {
            let cell = if d.density.0 == 0 { "none".to_string() } else { format!("1/{0}x{0}", d.density.0) };
            let _ = writeln!(s, "\ndensity {cell} (mean annotations {:.1})", d.mean_annotations);
            let _ = writeln!(s, "  {:<7} {:<28} {:>8} {:>9}", "method", "PSNR x1 [dB]", "failures", "fallbacks");
            for m in &d.methods {
                let _ = writeln!(s, "  {:<7} {:<28} {:>8} {:>9}", m.method.name(), fmt_stat(&m.psnr), m.failures, m.earlier_iterate);
            }
            for p in &d.paired {
                let _ = writeln!(s, "  {} − {}: {}", p.a.name(), p.b.name(), fmt_stat(&p.difference));
            }
        }
        if let Some(c) = &self.candidate_accuracy {
            let _ = writeln!(s, "\ncandidate accuracy ({} trials)", c.trials);
            for (n, p) in c.ns.iter().zip(&c.points) {
                let _ = writeln!(s, "  N={n:<5} {}", fmt_stat(&Some(*p)));
            }
        }
        if let Some(g) = &self.gradient_stats {
            let _ = writeln!(
                s,
                "\ngradient > 0.1: {:.4} of {} pixels; {:.3} of {} images above 0.3",
                g.overall_fraction, g.pixel_count, g.busy_image_fraction, g.images
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("instance,density,method,annotations,psnr,earlier_iterate,error\n");
        for r in &self.instances {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.instance,
                r.density.0,
                r.method.name(),
                r.annotations,
                r.psnr.map(|p| format!("{p:.6}")).unwrap_or_default(),
                r.earlier_iterate,
                r.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
            );
        }
        s
    }
}
