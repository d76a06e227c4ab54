//! Full-image separation: minimize `−EPLL(x₁|y)` plus annotation penalties
//! by half-quadratic splitting, then set `x₂ = y − x₁`.

mod config;
mod hqs;
mod objective;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use config::{SeparationConfig, BASE_BETAS};
pub use hqs::{auxiliary_update, solve_x1, CgInfo, NormalEquations, Selection, SelectionLog};
pub use objective::{
    cost_jc, cost_jc_gradient, epll, epll_gradient, filter_stencils, objective, objective_gradient,
    Annotations, ComponentAnnotation, FilterAnnotation, FilterTerm, Layer, QuadraticTerm,
};

use crate::error::{Error, Result};
use crate::gmm::GmmPrior;
use crate::io::LUMA_WEIGHTS;
use crate::metrics::{is_exact_split, split_layers};
use crate::patch::Image;
use crate::posterior::PairTable;
use hqs::{auxiliary_pass, coupling_term, pass_z_terms, StageTable};
use objective::Problem;

const INIT_NOISE_SIGMA: f64 = 0.01;

/// Augmented objective values within one `β` stage, recorded after every
/// auxiliary step and every `x₁` step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub beta: f64,
    pub surrogate: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SeparationResult {
    pub x1: Image,
    pub x2: Image,
    /// Objective at the initial point, then after every alternation.
    pub objective_trace: Vec<f64>,
    pub stage_traces: Vec<StageTrace>,
    /// Index into `objective_trace` of the returned iterate.
    pub returned_iterate: usize,
    pub cg_converged: bool,
    pub warnings: Vec<String>,
    pub config: SeparationConfig,
    pub annotations: Annotations,
    pub selections: Option<SelectionLog>,
}

/// JSON metadata for a finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultSummary {
    pub width: usize,
    pub height: usize,
    pub objective_trace: Vec<f64>,
    pub final_objective: f64,
    pub returned_iterate: usize,
    pub stage_traces: Vec<StageTrace>,
    pub cg_converged: bool,
    pub warnings: Vec<String>,
    pub config: SeparationConfig,
    pub annotations: Annotations,
}

impl SeparationResult {
    pub fn final_objective(&self) -> f64 {
        self.objective_trace[self.returned_iterate]
    }

    pub fn summary(&self) -> ResultSummary {
        ResultSummary {
            width: self.x1.width(),
            height: self.x1.height(),
            objective_trace: self.objective_trace.clone(),
            final_objective: self.final_objective(),
            returned_iterate: self.returned_iterate,
            stage_traces: self.stage_traces.clone(),
            cg_converged: self.cg_converged,
            warnings: self.warnings.clone(),
            config: self.config.clone(),
            annotations: self.annotations.clone(),
        }
    }
}

pub type Progress<'a> = &'a (dyn Fn(f64) + Sync);

#[derive(Default, Clone, Copy)]
pub struct SolveOptions<'a> {
    /// Starting point; defaults to `y/2`, perturbed when there are no
    /// annotations.
    pub init: Option<&'a Image>,
    pub progress: Option<Progress<'a>>,
    /// Reuse recorded pair selections instead of selecting.
    pub frozen: Option<&'a SelectionLog>,
    pub record_selections: bool,
}

fn initial_point(y: &Image, perturb: bool, seed: u64) -> Image {
    let mut x = y.map(|v| 0.5 * v);
    if perturb {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_NOISE_SIGMA).expect("valid sigma");
        x.pixels_mut().iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    x
}

fn clip_physical(x: &mut Image, y: &Image) {
    for (xv, &yv) in x.pixels_mut().iter_mut().zip(y.pixels()) {
        *xv = xv.clamp(yv.min(0.0), yv.max(0.0));
    }
}

/// General entry point: component and filter annotations may be mixed.
pub fn separate(
    y: &Image,
    annotations: &Annotations,
    prior: &GmmPrior,
    table: &PairTable,
    cfg: &SeparationConfig,
    opts: SolveOptions<'_>,
) -> Result<SeparationResult> {
    cfg.validate()?;
    let problem = Problem::new(y, annotations, prior, table, cfg.lambda_c, cfg.lambda_f, cfg.stride)?;
    let betas = cfg.betas();
    let total_steps = betas.len() * cfg.outer_iters_per_beta;
    if let Some(f) = opts.frozen {
        if f.len() != total_steps || f.iter().any(|s| s.len() != problem.origins.len()) {
            return Err(Error::invalid("frozen selections do not match this problem"));
        }
    }
    let mut x = match opts.init {
        Some(init) => {
            y.ensure_same_shape(init)?;
            init.clone()
        }
        None => initial_point(y, annotations.is_empty() && opts.frozen.is_none(), cfg.seed),
    };
    let quadratics: Vec<QuadraticTerm> = problem.components.iter().map(|c| c.term.clone()).collect();

    let mut warnings = Vec::new();
    let mut trace = vec![problem.value(&x)];
    let mut best = (trace[0], 0usize, x.clone());
    let mut stage_traces = Vec::with_capacity(betas.len());
    let mut log = opts.record_selections.then(Vec::new);
    let mut cg_ok = true;
    let mut step = 0;
    for &beta in &betas {
        let stage = StageTable::build(prior, table, beta)?;
        let mut surrogate = Vec::with_capacity(2 * cfg.outer_iters_per_beta);
        for it in 0..cfg.outer_iters_per_beta {
            let frozen = opts.frozen.map(|f| f[step].as_slice());
            let pass = auxiliary_pass(&problem, &stage, &x, frozen);
            let fixed = pass_z_terms(&problem, &stage, &pass);
            surrogate.push(fixed + coupling_term(&problem.origins, &pass.z, beta, &x) + problem.annotation_terms(&x));
            let eq = NormalEquations {
                width: y.width(),
                height: y.height(),
                beta,
                origins: &problem.origins,
                z: &pass.z,
                lambda_c: cfg.lambda_c,
                quadratics: &quadratics,
                lambda_f: cfg.lambda_f,
                filters: &problem.filters,
                cg_tol: cfg.cg_tol,
                cg_max_iters: cfg.cg_max_iters,
            };
            let (next, info) = eq.solve(&x)?;
            if !info.converged {
                cg_ok = false;
                warnings.push(format!(
                    "CG stopped at relative residual {:.3e} after {} iterations (beta {beta})",
                    info.relative_residual, info.iterations
                ));
            }
            x = next;
            surrogate.push(fixed + coupling_term(&problem.origins, &pass.z, beta, &x) + problem.annotation_terms(&x));
            if cfg.clip_to_physical && it + 1 == cfg.outer_iters_per_beta {
                clip_physical(&mut x, y);
            }
            if let Some(l) = log.as_mut() {
                l.push(pass.selections);
            }
            let j = problem.value(&x);
            trace.push(j);
            if j <= best.0 {
                best = (j, trace.len() - 1, x.clone());
            }
            step += 1;
            if let Some(p) = opts.progress {
                p(step as f64 / total_steps as f64);
            }
        }
        stage_traces.push(StageTrace { beta, surrogate });
    }
    let last = trace.len() - 1;
    let (returned_iterate, x1) = if best.1 == last {
        (last, x)
    } else {
        warnings.push(format!(
            "final objective {:.6e} exceeded iterate {} ({:.6e}); returning that iterate",
            trace[last], best.1, best.0
        ));
        (best.1, best.2)
    };
    let (x1, x2) = split_layers(y, &x1)?;
    let inexact = y
        .pixels()
        .iter()
        .zip(x1.pixels().iter().zip(x2.pixels()))
        .filter(|(yv, (a, b))| !is_exact_split(**yv, **a, **b))
        .count();
    if inexact > 0 {
        warnings.push(format!("{inexact} pixels could not be split with x1 + x2 == y in floating point"));
    }
    Ok(SeparationResult {
        x1,
        x2,
        objective_trace: trace,
        stage_traces,
        returned_iterate,
        cg_converged: cg_ok,
        warnings,
        config: cfg.clone(),
        annotations: annotations.clone(),
        selections: log,
    })
}

/// Separation with component annotations (GMM-C).
pub fn separate_gmm_c(
    y: &Image,
    annotations: &[ComponentAnnotation],
    prior: &GmmPrior,
    table: &PairTable,
    cfg: &SeparationConfig,
) -> Result<SeparationResult> {
    let anns = Annotations { components: annotations.to_vec(), filters: vec![] };
    separate(y, &anns, prior, table, cfg, SolveOptions::default())
}

/// Separation with derivative-filter annotations (GMM-F).
pub fn separate_gmm_f(
    y: &Image,
    annotations: &[FilterAnnotation],
    prior: &GmmPrior,
    table: &PairTable,
    cfg: &SeparationConfig,
) -> Result<SeparationResult> {
    let anns = Annotations { components: vec![], filters: annotations.to_vec() };
    separate(y, &anns, prior, table, cfg, SolveOptions::default())
}

/// Unannotated separation.
pub fn separate_epll(y: &Image, prior: &GmmPrior, table: &PairTable, cfg: &SeparationConfig) -> Result<SeparationResult> {
    separate(y, &Annotations::default(), prior, table, cfg, SolveOptions::default())
}

#[derive(Debug, Clone)]
pub struct ColorSeparation {
    pub luminance: SeparationResult,
    /// R, G, B.
    pub channels: Vec<SeparationResult>,
}

/// Luminance run first, then each channel with the luminance run's pair
/// selections frozen.
pub fn separate_color(
    channels: &[Image],
    annotations: &Annotations,
    prior: &GmmPrior,
    table: &PairTable,
    cfg: &SeparationConfig,
    progress: Option<Progress<'_>>,
) -> Result<ColorSeparation> {
    if channels.len() != 3 {
        return Err(Error::invalid("color separation needs three channels"));
    }
    channels[0].ensure_same_shape(&channels[1])?;
    channels[0].ensure_same_shape(&channels[2])?;
    let n = channels[0].pixels().len();
    let luma: Vec<f64> = (0..n)
        .map(|p| (0..3).map(|c| LUMA_WEIGHTS[c] * channels[c].pixels()[p]).sum())
        .collect();
    let luma = Image::new(channels[0].width(), channels[0].height(), luma)?;
    let report = |stage: usize| {
        move |f: f64| {
            if let Some(p) = progress {
                p((stage as f64 + f) / 4.0);
            }
        }
    };
    let p0 = report(0);
    let luminance = separate(
        &luma,
        annotations,
        prior,
        table,
        cfg,
        SolveOptions { progress: Some(&p0), record_selections: true, ..Default::default() },
    )?;
    let log = luminance.selections.clone().expect("selections were recorded");
    let mut out = Vec::with_capacity(3);
    for (c, ch) in channels.iter().enumerate() {
        let pc = report(c + 1);
        out.push(separate(
            ch,
            annotations,
            prior,
            table,
            cfg,
            SolveOptions { progress: Some(&pc), frozen: Some(&log), ..Default::default() },
        )?);
    }
    Ok(ColorSeparation { luminance, channels: out })
}
