//! Display thumbnails for candidate decompositions.

use crate::patch::{Image, Patch, PATCH_SIDE};
use crate::posterior::CandidateSet;

pub const THUMB_SCALE: usize = 8;
const GUTTER: usize = 4;
const SHEET_BACKGROUND: f64 = 1.0;

/// Patch clipped to [0, 1] and upscaled by nearest neighbour.
pub fn thumbnail(p: &Patch, scale: usize) -> Image {
    let side = PATCH_SIDE * scale;
    Image::from_fn(side, side, |x, y| p[(y / scale) * PATCH_SIDE + x / scale].clamp(0.0, 1.0))
}

/// `x1 | x2` side by side with a gutter.
pub fn pair_tile(x1: &Patch, x2: &Patch, scale: usize) -> Image {
    let side = PATCH_SIDE * scale;
    let (a, b) = (thumbnail(x1, scale), thumbnail(x2, scale));
    Image::from_fn(2 * side + GUTTER, side, |x, y| {
        if x < side {
            a.get(x, y)
        } else if x < side + GUTTER {
            SHEET_BACKGROUND
        } else {
            b.get(x - side - GUTTER, y)
        }
    })
}

/// All candidates as pair tiles in rank order, `cols` tiles per row.
pub fn contact_sheet(cands: &CandidateSet, cols: usize, scale: usize) -> Image {
    let cols = cols.max(1);
    let n = cands.len().max(1);
    let rows = n.div_ceil(cols);
    let tw = 2 * PATCH_SIDE * scale + GUTTER;
    let th = PATCH_SIDE * scale;
    let (cw, ch) = (tw + 2 * GUTTER, th + 2 * GUTTER);
    let mut sheet = Image::filled(cols.min(n) * cw, rows * ch, SHEET_BACKGROUND);
    for (k, c) in cands.entries.iter().enumerate() {
        let tile = pair_tile(&c.x1, &c.x2, scale);
        let (ox, oy) = ((k % cols) * cw + GUTTER, (k / cols) * ch + GUTTER);
        for y in 0..th {
            for x in 0..tw {
                sheet.set(ox + x, oy + y, tile.get(x, y));
            }
        }
    }
    sheet
}
