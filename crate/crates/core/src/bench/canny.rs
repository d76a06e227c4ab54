use crate::patch::Image;

pub const CANNY_SIGMA: f64 = 1.4;
pub const CANNY_LOW: f64 = 0.05;
pub const CANNY_HIGH: f64 = 0.15;

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap {
    pub width: usize,
    pub height: usize,
    /// Sobel magnitude of the blurred image, scaled so the maximum is 1.
    pub magnitude: Vec<f64>,
    pub edges: Vec<bool>,
}

impl EdgeMap {
    pub fn is_edge(&self, x: usize, y: usize) -> bool {
        self.edges[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.edges.iter().filter(|e| **e).count()
    }
}

fn gaussian_kernel() -> [f64; 5] {
    let mut k = [0.0; 5];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - 2.0;
        *v = (-d * d / (2.0 * CANNY_SIGMA * CANNY_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

fn clamped(img: &Image, x: isize, y: isize) -> f64 {
    let cx = x.clamp(0, img.width() as isize - 1) as usize;
    let cy = y.clamp(0, img.height() as isize - 1) as usize;
    img.get(cx, cy)
}

fn blur(img: &Image) -> Image {
    let k = gaussian_kernel();
    let horiz = Image::from_fn(img.width(), img.height(), |x, y| {
        (0..5).map(|t| k[t] * clamped(img, x as isize + t as isize - 2, y as isize)).sum()
    });
    Image::from_fn(img.width(), img.height(), |x, y| {
        (0..5).map(|t| k[t] * clamped(&horiz, x as isize, y as isize + t as isize - 2)).sum()
    })
}

/// Gaussian blur, Sobel gradients, non-maximum suppression and hysteresis.
/// The one-pixel image border never carries edges.
pub fn canny(img: &Image) -> EdgeMap {
    let (w, h) = (img.width(), img.height());
    let b = blur(img);
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let v = |dx: isize, dy: isize| clamped(&b, x as isize + dx, y as isize + dy);
            gx[y * w + x] = (v(1, -1) + 2.0 * v(1, 0) + v(1, 1)) - (v(-1, -1) + 2.0 * v(-1, 0) + v(-1, 1));
            gy[y * w + x] = (v(-1, 1) + 2.0 * v(0, 1) + v(1, 1)) - (v(-1, -1) + 2.0 * v(0, -1) + v(1, -1));
        }
    }
    let mut magnitude: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();
    let max = magnitude.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        magnitude.iter_mut().for_each(|m| *m /= max);
    }

    let mut thin = vec![0.0; w * h];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let p = y * w + x;
            let m = magnitude[p];
            if m == 0.0 {
                continue;
            }
            let angle = gy[p].atan2(gx[p]).to_degrees().rem_euclid(180.0);
            let (dx, dy): (isize, isize) = if !(22.5..157.5).contains(&angle) {
                (1, 0)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (0, 1)
            } else {
                (-1, 1)
            };
            let at = |sx: isize, sy: isize| magnitude[(y as isize + sy) as usize * w + (x as isize + sx) as usize];
            if m >= at(dx, dy) && m >= at(-dx, -dy) {
                thin[p] = m;
            }
        }
    }

    let mut edges = vec![false; w * h];
    let mut stack: Vec<usize> = (0..w * h).filter(|&p| thin[p] >= CANNY_HIGH).collect();
    for &p in &stack {
        edges[p] = true;
    }
    while let Some(p) = stack.pop() {
        let (x, y) = ((p % w) as isize, (p / w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let q = ny as usize * w + nx as usize;
                if !edges[q] && thin[q] >= CANNY_LOW {
                    edges[q] = true;
                    stack.push(q);
                }
            }
        }
    }
    EdgeMap { width: w, height: h, magnitude, edges }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel();
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(k[0], k[4]);
        assert_eq!(k[1], k[3]);
    }

    #[test]
    fn constant_image_has_no_edges() {
        assert_eq!(canny(&Image::filled(20, 20, 0.3)).count(), 0);
    }

    #[test]
    fn step_edge_is_thin_and_vertical() {
        let img = Image::from_fn(20, 16, |x, _| if x < 10 { 0.1 } else { 0.9 });
        let e = canny(&img);
        for y in 1..15 {
            let cols: Vec<usize> = (0..20).filter(|&x| e.is_edge(x, y)).collect();
            assert!(!cols.is_empty() && cols.len() <= 2, "row {y}: {cols:?}");
            assert!(cols.iter().all(|c| (9..=10).contains(c)));
        }
        assert!((0..20).all(|x| !e.is_edge(x, 0) && !e.is_edge(x, 15)));
    }
}
