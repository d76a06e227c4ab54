use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch::Image;

pub const GRADIENT_THRESHOLD: f64 = 0.1;
pub const BUSY_IMAGE_FRACTION: f64 = 0.3;
pub const HISTOGRAM_BINS: usize = 101;

/// Forward differences; the last row and column use the backward difference.
pub fn gradients(img: &Image) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (img.width(), img.height());
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if w > 1 {
                gx[p] = if x + 1 < w { img.get(x + 1, y) - img.get(x, y) } else { img.get(x, y) - img.get(x - 1, y) };
            }
            if h > 1 {
                gy[p] = if y + 1 < h { img.get(x, y + 1) - img.get(x, y) } else { img.get(x, y) - img.get(x, y - 1) };
            }
        }
    }
    (gx, gy)
}

pub fn gradient_magnitude(img: &Image) -> Vec<f64> {
    let (gx, gy) = gradients(img);
    gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientStats {
    pub threshold: f64,
    pub pixel_count: u64,
    pub overall_fraction: f64,
    pub per_image_fractions: Vec<f64>,
    /// Share of images whose own fraction exceeds [`BUSY_IMAGE_FRACTION`].
    pub busy_image_fraction: f64,
    /// Vertical-gradient histogram, [`HISTOGRAM_BINS`] equal bins on [−1, 1].
    pub histogram: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientSummary {
    pub images: usize,
    pub pixel_count: u64,
    pub overall_fraction: f64,
    pub busy_image_fraction: f64,
}

impl GradientStats {
    pub fn summary(&self) -> GradientSummary {
        GradientSummary {
            images: self.per_image_fractions.len(),
            pixel_count: self.pixel_count,
            overall_fraction: self.overall_fraction,
            busy_image_fraction: self.busy_image_fraction,
        }
    }
}

fn histogram_bin(v: f64) -> usize {
    let t = (v.clamp(-1.0, 1.0) + 1.0) / 2.0;
    ((t * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1)
}

pub fn gradient_stats(images: &[Image]) -> Result<GradientStats> {
    if images.is_empty() {
        return Err(Error::invalid("gradient statistics need at least one image"));
    }
    let mut histogram = vec![0u64; HISTOGRAM_BINS];
    let mut above = 0u64;
    let mut total = 0u64;
    let mut per_image = Vec::with_capacity(images.len());
    for img in images {
        let (gx, gy) = gradients(img);
        let count = gx.iter().zip(&gy).filter(|(a, b)| a.hypot(**b) > GRADIENT_THRESHOLD).count() as u64;
        for v in &gy {
            histogram[histogram_bin(*v)] += 1;
        }
        above += count;
        total += gx.len() as u64;
        per_image.push(count as f64 / gx.len() as f64);
    }
    let busy = per_image.iter().filter(|f| **f > BUSY_IMAGE_FRACTION).count();
    Ok(GradientStats {
        threshold: GRADIENT_THRESHOLD,
        pixel_count: total,
        overall_fraction: above as f64 / total as f64,
        busy_image_fraction: busy as f64 / images.len() as f64,
        per_image_fractions: per_image,
        histogram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_has_no_gradients() {
        let s = gradient_stats(&[Image::filled(9, 7, 0.4)]).unwrap();
        assert_eq!(s.overall_fraction, 0.0);
        assert_eq!(s.histogram[50], 63);
        assert_eq!(s.histogram.iter().sum::<u64>(), 63);
    }

    #[test]
    fn checkerboard_is_all_edges() {
        let img = Image::from_fn(6, 5, |x, y| ((x + y) % 2) as f64);
        let s = gradient_stats(&[img]).unwrap();
        assert_eq!(s.overall_fraction, 1.0);
        assert_eq!(s.busy_image_fraction, 1.0);
        assert_eq!(s.histogram[0] + s.histogram[100], 30);
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(gradient_stats(&[]).is_err());
    }

    #[test]
    fn bins_cover_the_range() {
        assert_eq!(histogram_bin(-1.0), 0);
        assert_eq!(histogram_bin(1.0), 100);
        assert_eq!(histogram_bin(0.0), 50);
        assert_eq!(histogram_bin(-5.0), 0);
    }
}
