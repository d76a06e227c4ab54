//! Images, 8×8 patches and the patch extraction operator.

use std::ops::{Deref, DerefMut};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PATCH_SIDE: usize = 8;
pub const PATCH_DIM: usize = PATCH_SIDE * PATCH_SIDE;

/// An 8×8 patch flattened row-major into a 64-vector.
#[derive(Clone, PartialEq)]
pub struct Patch([f64; PATCH_DIM]);

impl Patch {
    pub fn new(values: [f64; PATCH_DIM]) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("patch contains non-finite values"));
        }
        Ok(Patch(values))
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        if values.len() != PATCH_DIM {
            return Err(Error::invalid(format!(
                "patch must have {PATCH_DIM} entries, got {}",
                values.len()
            )));
        }
        let mut arr = [0.0; PATCH_DIM];
        arr.copy_from_slice(values);
        Patch::new(arr)
    }

    pub fn zeros() -> Self {
        Patch([0.0; PATCH_DIM])
    }

    pub fn constant(c: f64) -> Self {
        Patch([c; PATCH_DIM])
    }

    pub fn from_fn(mut f: impl FnMut(usize) -> f64) -> Self {
        Patch(std::array::from_fn(|d| f(d)))
    }

    pub fn as_array(&self) -> &[f64; PATCH_DIM] {
        &self.0
    }

    /// `self - other`, entrywise.
    pub fn sub(&self, other: &Patch) -> Patch {
        Patch::from_fn(|d| self.0[d] - other.0[d])
    }

    pub fn add(&self, other: &Patch) -> Patch {
        Patch::from_fn(|d| self.0[d] + other.0[d])
    }

    pub fn squared_distance(&self, other: &Patch) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b) * (a - b)).sum()
    }
}

impl Deref for Patch {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Patch {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl std::fmt::Debug for Patch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.0.iter()).finish()
    }
}

/// Row-major scalar image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::invalid(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("image contains non-finite pixels"));
        }
        Ok(Image { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Image { width, height, pixels: vec![value; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Image { width, height, pixels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn ensure_same_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "dimension mismatch: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    /// Entrywise `self - other`.
    pub fn sub(&self, other: &Image) -> Result<Image> {
        self.ensure_same_shape(other)?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub fn add(&self, other: &Image) -> Result<Image> {
        self.ensure_same_shape(other)?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&p| f(p)).collect(),
        }
    }

    fn zip_map(&self, other: &Image, f: impl Fn(f64, f64) -> f64) -> Image {
        Image {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().zip(&other.pixels).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// Copy of the `w × h` window with top-left corner `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Image> {
        if x + w > self.width || y + h > self.height {
            return Err(Error::invalid("crop window exceeds image bounds"));
        }
        Ok(Image::from_fn(w, h, |cx, cy| self.get(x + cx, y + cy)))
    }

    /// Whether an 8×8 patch with top-left corner `(x, y)` fits.
    pub fn patch_fits(&self, x: usize, y: usize) -> bool {
        x + PATCH_SIDE <= self.width && y + PATCH_SIDE <= self.height
    }

    /// `P_(x,y) image`: the 8×8 patch with top-left corner `(x, y)`.
    pub fn patch(&self, x: usize, y: usize) -> Patch {
        let mut out = Patch::zeros();
        self.patch_into(x, y, &mut out);
        out
    }

    pub fn patch_into(&self, x: usize, y: usize, out: &mut [f64]) {
        debug_assert!(self.patch_fits(x, y));
        for r in 0..PATCH_SIDE {
            let src = (y + r) * self.width + x;
            out[r * PATCH_SIDE..(r + 1) * PATCH_SIDE]
                .copy_from_slice(&self.pixels[src..src + PATCH_SIDE]);
        }
    }

    /// `image += P_(x,y)ᵀ values`.
    pub fn add_patch(&mut self, x: usize, y: usize, values: &[f64]) {
        for r in 0..PATCH_SIDE {
            let dst = (y + r) * self.width + x;
            for (p, v) in self.pixels[dst..dst + PATCH_SIDE]
                .iter_mut()
                .zip(&values[r * PATCH_SIDE..(r + 1) * PATCH_SIDE])
            {
                *p += v;
            }
        }
    }
}

/// Top-left corners of every 8×8 patch on the `stride` grid, row-major.
pub fn patch_origins(width: usize, height: usize, stride: usize) -> Vec<(usize, usize)> {
    assert!(stride >= 1, "stride must be positive");
    if width < PATCH_SIDE || height < PATCH_SIDE {
        return Vec::new();
    }
    let mut out = Vec::new();
    for y in (0..=height - PATCH_SIDE).step_by(stride) {
        for x in (0..=width - PATCH_SIDE).step_by(stride) {
            out.push((x, y));
        }
    }
    out
}

/// All stride-spaced patches of `image`, each tagged with the linear index of
/// its top-left pixel.
pub fn extract_patches(image: &Image, stride: usize) -> Result<Vec<(usize, Patch)>> {
    if image.width() < PATCH_SIDE || image.height() < PATCH_SIDE {
        return Err(Error::invalid(format!(
            "image {}x{} is smaller than one {PATCH_SIDE}x{PATCH_SIDE} patch",
            image.width(),
            image.height()
        )));
    }
    if stride == 0 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    Ok(patch_origins(image.width(), image.height(), stride)
        .into_iter()
        .map(|(x, y)| (y * image.width() + x, image.patch(x, y)))
        .collect())
}

/// Number of grid patches covering each pixel (`diag Σᵢ PᵢᵀPᵢ`).
pub fn coverage_counts(width: usize, height: usize, stride: usize) -> Image {
    let mut counts = Image::filled(width, height, 0.0);
    let ones = [1.0; PATCH_DIM];
    for (x, y) in patch_origins(width, height, stride) {
        counts.add_patch(x, y, &ones);
    }
    counts
}

/// Patch origin for an annotation point: the 8×8 window whose pixel (4, 4)
/// is the point. `None` when the window would leave the image.
pub fn origin_for_point(width: usize, height: usize, px: usize, py: usize) -> Option<(usize, usize)> {
    let half = PATCH_SIDE / 2;
    if px < half || py < half || px + half > width || py + half > height {
        return None;
    }
    Some((px - half, py - half))
}

/// `count` patches drawn uniformly over every stride-1 patch position of
/// every image.
pub fn sample_patches(images: &[Image], count: usize, seed: u64) -> Result<Vec<Patch>> {
    let sizes: Vec<usize> = images
        .iter()
        .map(|im| {
            if im.width() < PATCH_SIDE || im.height() < PATCH_SIDE {
                0
            } else {
                (im.width() - PATCH_SIDE + 1) * (im.height() - PATCH_SIDE + 1)
            }
        })
        .collect();
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::invalid("no image holds an 8x8 patch"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let mut k = rng.random_range(0..total);
            let mut idx = 0;
            while k >= sizes[idx] {
                k -= sizes[idx];
                idx += 1;
            }
            let im = &images[idx];
            let cols = im.width() - PATCH_SIDE + 1;
            im.patch(k % cols, k / cols)
        })
        .collect())
}
