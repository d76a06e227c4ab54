use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::GmmPrior;
use crate::linalg::{self, Cholesky};
use crate::patch::{patch_origins, Image, PATCH_DIM, PATCH_SIDE};
use crate::posterior::{evidence_and_shortlists, pair_mean, PairShortlist, PairTable};

/// A chosen posterior component at the 8×8 patch whose top-left corner is
/// `(x, y)`. The mean is recomputed from the image, never stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ComponentAnnotation {
    pub x: usize,
    pub y: usize,
    pub i: usize,
    pub j: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Layer {
    One,
    Two,
}

impl TryFrom<u8> for Layer {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Layer::One),
            2 => Ok(Layer::Two),
            _ => Err(format!("layer must be 1 or 2, got {v}")),
        }
    }
}

impl From<Layer> for u8 {
    fn from(l: Layer) -> u8 {
        match l {
            Layer::One => 1,
            Layer::Two => 2,
        }
    }
}

/// Pixel whose derivative responses are attributed to one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FilterAnnotation {
    pub x: usize,
    pub y: usize,
    pub layer: Layer,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Annotations {
    pub components: Vec<ComponentAnnotation>,
    pub filters: Vec<FilterAnnotation>,
}

impl Annotations {
    pub fn is_empty(&self) -> bool {
        self.components.is_empty() && self.filters.is_empty()
    }
}

/// `λ/2 · (Pₒx − μ)ᵀ Q (Pₒx − μ)` on the patch at `origin`.
#[derive(Debug, Clone)]
pub struct QuadraticTerm {
    pub origin: (usize, usize),
    pub precision: Vec<f64>,
    pub mean: Vec<f64>,
}

/// `λ/2 · (Σ cₖ x[pₖ] − target)²`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterTerm {
    pub taps: Vec<(usize, f64)>,
    pub target: f64,
}

impl FilterTerm {
    pub fn response(&self, x: &[f64]) -> f64 {
        self.taps.iter().map(|&(p, c)| c * x[p]).sum()
    }
}

/// The four derivative stencils `[−1, 1]` and `[−1, 2, −1]`, horizontal and
/// vertical, anchored at pixel `(x, y)`.
pub fn filter_stencils(width: usize, x: usize, y: usize) -> [Vec<(usize, f64)>; 4] {
    let p = y * width + x;
    [
        vec![(p, -1.0), (p + 1, 1.0)],
        vec![(p, -1.0), (p + width, 1.0)],
        vec![(p - 1, -1.0), (p, 2.0), (p + 1, -1.0)],
        vec![(p - width, -1.0), (p, 2.0), (p + width, -1.0)],
    ]
}

pub(crate) fn filter_terms(y: &Image, filters: &[FilterAnnotation]) -> Result<Vec<FilterTerm>> {
    let (w, h) = (y.width(), y.height());
    let mut out = Vec::with_capacity(4 * filters.len());
    for f in filters {
        if f.x < 1 || f.y < 1 || f.x + 2 > w || f.y + 2 > h {
            return Err(Error::invalid(format!(
                "filter annotation at ({}, {}) is too close to the border of a {w}x{h} image",
                f.x, f.y
            )));
        }
        for taps in filter_stencils(w, f.x, f.y) {
            let mut t = FilterTerm { taps, target: 0.0 };
            if f.layer == Layer::One {
                t.target = t.response(y.pixels());
            }
            out.push(t);
        }
    }
    Ok(out)
}

/// Annotation quadratic resolved against the image: mean `μᵢⱼ(Pₒy)`,
/// precision `Σᵢ⁻¹ + Σⱼ⁻¹`, and the factor of `Σᵢⱼ`.
#[derive(Debug, Clone)]
pub(crate) struct ResolvedComponent {
    pub term: QuadraticTerm,
    pub factor: Cholesky,
}

pub(crate) fn resolve_components(
    y: &Image,
    anns: &[ComponentAnnotation],
    prior: &GmmPrior,
    table: &PairTable,
) -> Result<Vec<ResolvedComponent>> {
    anns.iter()
        .map(|a| {
            if !y.patch_fits(a.x, a.y) {
                return Err(Error::invalid(format!(
                    "annotated patch at ({}, {}) leaves the {}x{} image",
                    a.x,
                    a.y,
                    y.width(),
                    y.height()
                )));
            }
            table.check_index(a.i, a.j)?;
            let yp = y.patch(a.x, a.y);
            let mean = pair_mean(prior, table, &yp, a.i, a.j);
            let precision: Vec<f64> = prior
                .component(a.i)
                .precision
                .iter()
                .zip(&prior.component(a.j).precision)
                .map(|(p, q)| p + q)
                .collect();
            let factor = table.pair_factor(prior, a.i, a.j)?;
            Ok(ResolvedComponent { term: QuadraticTerm { origin: (a.x, a.y), precision, mean }, factor })
        })
        .collect()
}

/// Everything needed to evaluate `−EPLL + annotation penalties` for a fixed
/// observation.
pub(crate) struct Problem<'a> {
    pub y: &'a Image,
    pub prior: &'a GmmPrior,
    pub table: &'a PairTable,
    pub origins: Vec<(usize, usize)>,
    pub log_z: Vec<f64>,
    pub shortlists: Vec<PairShortlist>,
    pub components: Vec<ResolvedComponent>,
    pub filters: Vec<FilterTerm>,
    pub lambda_c: f64,
    pub lambda_f: f64,
}

const CHUNK: usize = 2048;
/// Pairs per patch scored before falling back to a full scan.
const SHORTLIST_LEN: usize = 64;
/// Patches per multi-column solve when computing normalizers.
const EVIDENCE_BLOCK: usize = 64;

impl<'a> Problem<'a> {
    pub fn new(
        y: &'a Image,
        annotations: &Annotations,
        prior: &'a GmmPrior,
        table: &'a PairTable,
        lambda_c: f64,
        lambda_f: f64,
        stride: usize,
    ) -> Result<Self> {
        if prior.dim() != PATCH_DIM {
            return Err(Error::invalid("separation needs a 64-dimensional patch prior"));
        }
        table.check_prior(prior)?;
        if y.width() < PATCH_SIDE || y.height() < PATCH_SIDE {
            return Err(Error::invalid("image is smaller than one 8x8 patch"));
        }
        if stride == 0 {
            return Err(Error::invalid("stride must be at least 1"));
        }
        let components = resolve_components(y, &annotations.components, prior, table)?;
        let filters = filter_terms(y, &annotations.filters)?;
        let origins = patch_origins(y.width(), y.height(), stride);
        let (log_z, shortlists) = origins
            .par_chunks(EVIDENCE_BLOCK)
            .flat_map_iter(|chunk| {
                let pb = chunk.len();
                let mut cols = vec![0.0; PATCH_DIM * pb];
                let mut patch = [0.0; PATCH_DIM];
                for (c, &(x, yy)) in chunk.iter().enumerate() {
                    y.patch_into(x, yy, &mut patch);
                    for (d, v) in patch.iter().enumerate() {
                        cols[d * pb + c] = *v;
                    }
                }
                evidence_and_shortlists(prior, table, &cols, pb, SHORTLIST_LEN)
            })
            .unzip();
        Ok(Problem { y, prior, table, origins, log_z, shortlists, components, filters, lambda_c, lambda_f })
    }

    fn check(&self, x1: &Image) -> Result<()> {
        self.y.ensure_same_shape(x1)?;
        if x1.pixels().iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("x1 contains non-finite values"));
        }
        Ok(())
    }

    fn split_patch(&self, x1: &Image, o: (usize, usize), a: &mut [f64], b: &mut [f64]) {
        x1.patch_into(o.0, o.1, a);
        self.y.patch_into(o.0, o.1, b);
        for (bv, av) in b.iter_mut().zip(a.iter()) {
            *bv -= av;
        }
    }

    pub fn epll(&self, x1: &Image) -> f64 {
        let terms: Vec<f64> = self
            .origins
            .par_iter()
            .zip(&self.log_z)
            .map(|(&o, lz)| {
                let (mut a, mut b) = ([0.0; PATCH_DIM], [0.0; PATCH_DIM]);
                self.split_patch(x1, o, &mut a, &mut b);
                self.prior.log_density_unchecked(&a) + self.prior.log_density_unchecked(&b) - lz
            })
            .collect();
        terms.iter().sum()
    }

    /// EPLL and its gradient with respect to `x1`.
    pub fn epll_gradient(&self, x1: &Image) -> (f64, Vec<f64>) {
        let w = x1.width();
        let mut grad = vec![0.0; x1.pixels().len()];
        let mut total = 0.0;
        for (origins, lzs) in self.origins.chunks(CHUNK).zip(self.log_z.chunks(CHUNK)) {
            let parts: Vec<(f64, [f64; PATCH_DIM])> = origins
                .par_iter()
                .zip(lzs)
                .map(|(&o, lz)| {
                    let (mut a, mut b) = ([0.0; PATCH_DIM], [0.0; PATCH_DIM]);
                    self.split_patch(x1, o, &mut a, &mut b);
                    let (mut ga, mut gb) = ([0.0; PATCH_DIM], [0.0; PATCH_DIM]);
                    let v = self.prior.log_density_and_gradient(&a, &mut ga)
                        + self.prior.log_density_and_gradient(&b, &mut gb)
                        - lz;
                    for (g, h) in ga.iter_mut().zip(&gb) {
                        *g -= h;
                    }
                    (v, ga)
                })
                .collect();
            for (&(ox, oy), (v, g)) in origins.iter().zip(&parts) {
                total += v;
                for r in 0..PATCH_SIDE {
                    let dst = (oy + r) * w + ox;
                    for (d, s) in grad[dst..dst + PATCH_SIDE]
                        .iter_mut()
                        .zip(&g[r * PATCH_SIDE..(r + 1) * PATCH_SIDE])
                    {
                        *d += s;
                    }
                }
            }
        }
        (total, grad)
    }

    /// `λ_C/2 Σ ‖L⁻¹(Pₒx₁ − μ)‖²` with `L Lᵀ = Σᵢⱼ`.
    pub fn component_term(&self, x1: &Image) -> f64 {
        let mut scratch = [0.0; PATCH_DIM];
        let mut total = 0.0;
        for c in &self.components {
            let mut d = [0.0; PATCH_DIM];
            x1.patch_into(c.term.origin.0, c.term.origin.1, &mut d);
            for (v, m) in d.iter_mut().zip(&c.term.mean) {
                *v -= m;
            }
            total += c.factor.mahalanobis_sq_with(&d, &mut scratch);
        }
        0.5 * self.lambda_c * total
    }

    pub fn filter_term(&self, x1: &Image) -> f64 {
        let s: f64 = self
            .filters
            .iter()
            .map(|f| {
                let r = f.response(x1.pixels()) - f.target;
                r * r
            })
            .sum();
        0.5 * self.lambda_f * s
    }

    pub fn annotation_terms(&self, x1: &Image) -> f64 {
        self.component_term(x1) + self.filter_term(x1)
    }

    pub fn value(&self, x1: &Image) -> f64 {
        -self.epll(x1) + self.annotation_terms(x1)
    }

    pub fn value_and_gradient(&self, x1: &Image) -> (f64, Vec<f64>) {
        let (e, mut grad) = self.epll_gradient(x1);
        grad.iter_mut().for_each(|g| *g = -*g);
        let w = x1.width();
        let mut pv = [0.0; PATCH_DIM];
        let mut qv = [0.0; PATCH_DIM];
        for c in &self.components {
            let (ox, oy) = c.term.origin;
            x1.patch_into(ox, oy, &mut pv);
            for (v, m) in pv.iter_mut().zip(&c.term.mean) {
                *v -= m;
            }
            linalg::matvec(&c.term.precision, &pv, &mut qv);
            for r in 0..PATCH_SIDE {
                for col in 0..PATCH_SIDE {
                    grad[(oy + r) * w + ox + col] += self.lambda_c * qv[r * PATCH_SIDE + col];
                }
            }
        }
        for f in &self.filters {
            let r = f.response(x1.pixels()) - f.target;
            for &(p, c) in &f.taps {
                grad[p] += self.lambda_f * c * r;
            }
        }
        (-e + self.annotation_terms(x1), grad)
    }
}

fn problem<'a>(
    x1: &Image,
    y: &'a Image,
    annotations: &Annotations,
    prior: &'a GmmPrior,
    table: &'a PairTable,
    lambda_c: f64,
    lambda_f: f64,
    stride: usize,
) -> Result<Problem<'a>> {
    let p = Problem::new(y, annotations, prior, table, lambda_c, lambda_f, stride)?;
    p.check(x1)?;
    Ok(p)
}

/// `Σₚ log Pr(Pₚx₁ | Pₚy)` over the stride grid.
pub fn epll(x1: &Image, y: &Image, prior: &GmmPrior, table: &PairTable, stride: usize) -> Result<f64> {
    Ok(problem(x1, y, &Annotations::default(), prior, table, 1.0, 1.0, stride)?.epll(x1))
}

pub fn epll_gradient(
    x1: &Image,
    y: &Image,
    prior: &GmmPrior,
    table: &PairTable,
    stride: usize,
) -> Result<(f64, Image)> {
    let p = problem(x1, y, &Annotations::default(), prior, table, 1.0, 1.0, stride)?;
    let (v, g) = p.epll_gradient(x1);
    Ok((v, Image::new(x1.width(), x1.height(), g)?))
}

/// Component-annotation cost `−EPLL + λ_C/2 Σ (Pₒx₁ − μ)ᵀ Σᵢⱼ⁻¹ (Pₒx₁ − μ)`.
pub fn cost_jc(
    x1: &Image,
    y: &Image,
    annotations: &[ComponentAnnotation],
    prior: &GmmPrior,
    table: &PairTable,
    cfg: &super::SeparationConfig,
) -> Result<f64> {
    let anns = Annotations { components: annotations.to_vec(), filters: vec![] };
    objective(x1, y, &anns, prior, table, cfg)
}

pub fn cost_jc_gradient(
    x1: &Image,
    y: &Image,
    annotations: &[ComponentAnnotation],
    prior: &GmmPrior,
    table: &PairTable,
    cfg: &super::SeparationConfig,
) -> Result<(f64, Image)> {
    let anns = Annotations { components: annotations.to_vec(), filters: vec![] };
    objective_gradient(x1, y, &anns, prior, table, cfg)
}

/// `−EPLL` plus whichever annotation penalties are present.
pub fn objective(
    x1: &Image,
    y: &Image,
    annotations: &Annotations,
    prior: &GmmPrior,
    table: &PairTable,
    cfg: &super::SeparationConfig,
) -> Result<f64> {
    cfg.validate()?;
    let p = problem(x1, y, annotations, prior, table, cfg.lambda_c, cfg.lambda_f, cfg.stride)?;
    Ok(p.value(x1))
}

pub fn objective_gradient(
    x1: &Image,
    y: &Image,
    annotations: &Annotations,
    prior: &GmmPrior,
    table: &PairTable,
    cfg: &super::SeparationConfig,
) -> Result<(f64, Image)> {
    cfg.validate()?;
    let p = problem(x1, y, annotations, prior, table, cfg.lambda_c, cfg.lambda_f, cfg.stride)?;
    let (v, g) = p.value_and_gradient(x1);
    Ok((v, Image::new(x1.width(), x1.height(), g)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_serializes_as_number() {
        let f = FilterAnnotation { x: 3, y: 4, layer: Layer::Two };
        let s = serde_json::to_string(&f).unwrap();
        assert_eq!(s, r#"{"x":3,"y":4,"layer":2}"#);
        assert!(serde_json::from_str::<FilterAnnotation>(r#"{"x":3,"y":4,"layer":3}"#).is_err());
    }

    #[test]
    fn filter_penalty_vanishes_on_matching_layers() {
        let y = Image::from_fn(12, 12, |x, yy| ((x * 3 + yy * 5) % 7) as f64 / 7.0);
        let flat = Image::filled(12, 12, 0.25);
        let l2 = filter_terms(&y, &[FilterAnnotation { x: 5, y: 6, layer: Layer::Two }]).unwrap();
        assert!(l2.iter().all(|t| t.response(flat.pixels()) - t.target == 0.0));
        let l1 = filter_terms(&y, &[FilterAnnotation { x: 5, y: 6, layer: Layer::One }]).unwrap();
        assert!(l1.iter().all(|t| t.response(y.pixels()) - t.target == 0.0));
        assert!(filter_terms(&y, &[FilterAnnotation { x: 0, y: 6, layer: Layer::One }]).is_err());
        assert!(filter_terms(&y, &[FilterAnnotation { x: 10, y: 6, layer: Layer::One }]).is_ok());
        assert!(filter_terms(&y, &[FilterAnnotation { x: 11, y: 6, layer: Layer::One }]).is_err());
    }
}
