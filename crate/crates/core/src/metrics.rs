//! PSNR and exact layer splitting.

use crate::error::Result;
use crate::patch::Image;

/// Ceiling reported for identical signals.
pub const PSNR_CAP_DB: f64 = 100.0;

/// `10 log₁₀(1 / MSE)` with peak 1.0, capped at [`PSNR_CAP_DB`].
pub fn psnr_slices(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    psnr_mse(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// PSNR for a given mean squared error.
pub fn psnr_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        return PSNR_CAP_DB;
    }
    (-10.0 * mse.log10()).min(PSNR_CAP_DB)
}

/// PSNR between two same-sized images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_shape(b)?;
    Ok(psnr_slices(a.pixels(), b.pixels()))
}

/// Split `y` into `(a, b)` with `a ≈ x1`, `b == y - a` and `a + b == y`, both
/// bitwise in IEEE arithmetic.
///
/// `y - x1` alone does not guarantee the reverse sum rounds back to `y`, so
/// `a` is moved by a few ulps when needed. This always succeeds for `x1`
/// between `-|y|` and `2|y|`. Further out, `a` and `b` can sit on a coarser
/// float grid than `y` and no nearby `a` works; the plain `(x1, y - x1)` is
/// returned and [`is_exact_split`] reports false.
pub fn exact_split(y: f64, x1: f64) -> (f64, f64) {
    let ok = |a: f64| {
        let b = y - a;
        a + b == y && y - a == b
    };
    if ok(x1) {
        return (x1, y - x1);
    }
    let mut a = y - (y - x1);
    if ok(a) {
        return (a, y - a);
    }
    let (mut up, mut down) = (x1, x1);
    for _ in 0..256 {
        up = up.next_up();
        down = down.next_down();
        if ok(up) {
            a = up;
            return (a, y - a);
        }
        if ok(down) {
            a = down;
            return (a, y - a);
        }
    }
    (x1, y - x1)
}

pub fn is_exact_split(y: f64, a: f64, b: f64) -> bool {
    a + b == y && y - a == b
}

/// Exact split of a whole image: returns `(x1', x2)` with `x1' + x2 == y`.
pub fn split_layers(y: &Image, x1: &Image) -> Result<(Image, Image)> {
    y.ensure_same_shape(x1)?;
    let (a, b): (Vec<f64>, Vec<f64>) = y
        .pixels()
        .iter()
        .zip(x1.pixels())
        .map(|(&yv, &xv)| exact_split(yv, xv))
        .unzip();
    Ok((
        Image::new(y.width(), y.height(), a)?,
        Image::new(y.width(), y.height(), b)?,
    ))
}
