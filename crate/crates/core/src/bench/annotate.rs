use rand::Rng;
use serde::{Deserialize, Serialize};

use super::canny::canny;
use super::stats::gradient_magnitude;
use super::stream_rng;
use crate::error::{Error, Result};
use crate::gmm::GmmPrior;
use crate::patch::{Image, PATCH_SIDE};
use crate::posterior::{posterior_components, top_candidates, PairTable};
use crate::separation::{ComponentAnnotation, FilterAnnotation, Layer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropSource {
    pub image: usize,
    pub x: usize,
    pub y: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthPair {
    pub x1_true: Image,
    pub x2_true: Image,
    pub y: Image,
    pub sources: [CropSource; 2],
    pub index: usize,
    /// Master seed the pair was drawn from.
    pub seed: u64,
}

/// Pair `index` of the sequence for `seed`; independent of all other indices.
pub fn synth_pair(corpus: &[Image], size: usize, seed: u64, index: usize) -> Result<SynthPair> {
    let eligible: Vec<usize> = (0..corpus.len())
        .filter(|&i| corpus[i].width() >= size && corpus[i].height() >= size)
        .collect();
    if size == 0 || eligible.len() < 2 {
        return Err(Error::invalid(format!("need at least two corpus images of at least {size}×{size}")));
    }
    let mut rng = stream_rng(seed, 0, index as u64);
    let a = rng.random_range(0..eligible.len());
    let mut b = rng.random_range(0..eligible.len() - 1);
    if b >= a {
        b += 1;
    }
    let mut crop = |id: usize| -> Result<(Image, CropSource)> {
        let im = &corpus[id];
        let x = rng.random_range(0..=im.width() - size);
        let y = rng.random_range(0..=im.height() - size);
        Ok((im.crop(x, y, size, size)?, CropSource { image: id, x, y }))
    };
    let (x1_true, s1) = crop(eligible[a])?;
    let (x2_true, s2) = crop(eligible[b])?;
    let y = x1_true.add(&x2_true)?;
    Ok(SynthPair { x1_true, x2_true, y, sources: [s1, s2], index, seed })
}

pub fn synth_pairs(corpus: &[Image], count: usize, size: usize, seed: u64) -> Result<Vec<SynthPair>> {
    (0..count).map(|i| synth_pair(corpus, size, seed, i)).collect()
}

/// One annotation per `cell × cell` region; `cell == 0` means no annotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnnotationDensity(pub usize);

impl AnnotationDensity {
    pub const NONE: AnnotationDensity = AnnotationDensity(0);

    pub fn validate(&self, side: usize) -> Result<()> {
        if self.0 != 0 && !(PATCH_SIDE <= self.0 && self.0 <= side) {
            return Err(Error::invalid(format!("annotation cell {} must lie in [8, {side}]", self.0)));
        }
        Ok(())
    }

    /// Number of whole cells in a `width × height` image.
    pub fn target_count(&self, width: usize, height: usize) -> usize {
        if self.0 == 0 {
            0
        } else {
            (width / self.0) * (height / self.0)
        }
    }
}

/// One site per cell at its strongest Canny edge pixel, ties broken at random.
/// Cells without edges get no site.
pub fn annotation_sites(y: &Image, density: AnnotationDensity, seed: u64) -> Result<Vec<(usize, usize)>> {
    density.validate(y.width().min(y.height()))?;
    if density.0 == 0 {
        return Ok(Vec::new());
    }
    let cell = density.0;
    let edges = canny(y);
    let mut rng = stream_rng(seed, 1, 0);
    let mut sites = Vec::new();
    for cy in 0..y.height() / cell {
        for cx in 0..y.width() / cell {
            let mut best = f64::NEG_INFINITY;
            let mut tied = Vec::new();
            for py in cy * cell..(cy + 1) * cell {
                for px in cx * cell..(cx + 1) * cell {
                    if !edges.is_edge(px, py) {
                        continue;
                    }
                    let m = edges.magnitude[py * y.width() + px];
                    if m > best {
                        best = m;
                        tied.clear();
                    }
                    if m == best {
                        tied.push((px, py));
                    }
                }
            }
            match tied.len() {
                0 => {}
                1 => sites.push(tied[0]),
                n => sites.push(tied[rng.random_range(0..n)]),
            }
        }
    }
    Ok(sites)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoAnnotations<T> {
    pub annotations: Vec<T>,
    pub warning: Option<String>,
}

/// Labels each site by which ground-truth layer has the larger gradient
/// magnitude there; ties go to layer 1.
pub fn label_sites(pair: &SynthPair, sites: &[(usize, usize)]) -> Vec<FilterAnnotation> {
    let g1 = gradient_magnitude(&pair.x1_true);
    let g2 = gradient_magnitude(&pair.x2_true);
    let w = pair.y.width();
    sites
        .iter()
        .map(|&(x, y)| {
            let layer = if g1[y * w + x] >= g2[y * w + x] { Layer::One } else { Layer::Two };
            FilterAnnotation { x, y, layer }
        })
        .collect()
}

pub fn auto_annotate_filters(
    pair: &SynthPair,
    density: AnnotationDensity,
    seed: u64,
) -> Result<AutoAnnotations<FilterAnnotation>> {
    let sites = annotation_sites(&pair.y, density, seed)?;
    let warning = (density.0 != 0 && sites.is_empty()).then(|| "no Canny edges found".to_string());
    Ok(AutoAnnotations { annotations: label_sites(pair, &sites), warning })
}

/// Top-left corner of the patch centred on a site, shifted inside the image.
pub fn site_origin(width: usize, height: usize, x: usize, y: usize) -> (usize, usize) {
    let half = PATCH_SIDE / 2;
    (
        x.saturating_sub(half).min(width - PATCH_SIDE),
        y.saturating_sub(half).min(height - PATCH_SIDE),
    )
}

/// At each site, ranks the top-`n` candidates by Euclidean distance to the
/// true `x₁` patch and picks one of the two closest uniformly at random.
pub fn auto_annotate_components(
    pair: &SynthPair,
    sites: &[(usize, usize)],
    prior: &GmmPrior,
    table: &PairTable,
    n: usize,
    seed: u64,
) -> Result<Vec<ComponentAnnotation>> {
    if n < 2 {
        return Err(Error::invalid("auto annotation needs at least two candidates"));
    }
    let (w, h) = (pair.y.width(), pair.y.height());
    if w < PATCH_SIDE || h < PATCH_SIDE {
        return Err(Error::invalid("image is smaller than one patch"));
    }
    let mut rng = stream_rng(seed, 2, 0);
    let mut out = Vec::with_capacity(sites.len());
    for &(sx, sy) in sites {
        if sx >= w || sy >= h {
            return Err(Error::invalid(format!("site ({sx}, {sy}) is outside the image")));
        }
        let (x, y) = site_origin(w, h, sx, sy);
        let post = posterior_components(&pair.y.patch(x, y), prior, table)?;
        let cands = top_candidates(&post, n)?;
        let truth = pair.x1_true.patch(x, y);
        let mut ranked: Vec<(f64, usize)> =
            cands.entries.iter().enumerate().map(|(k, c)| (c.x1.squared_distance(&truth), k)).collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let pick = if ranked.len() >= 2 { ranked[rng.random_range(0..2)].1 } else { ranked[0].1 };
        let c = &cands.entries[pick];
        out.push(ComponentAnnotation { x, y, i: c.i, j: c.j });
    }
    Ok(out)
}
