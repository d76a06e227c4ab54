//! Image decoding/encoding and corpus loading.
//!
//! Inputs may be 8- or 16-bit PNG, binary PGM/PPM or JPEG. Every channel is
//! kept as its exact 16-bit code (8-bit values are scaled by 257) so that
//! layer outputs can be quantized with `x1 + x2 == y` holding exactly.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::patch::Image;

/// Luminance weights for RGB → gray.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// One channel as exact 16-bit codes.
#[derive(Clone, Debug, PartialEq)]
pub struct Channel16 {
    pub width: usize,
    pub height: usize,
    pub codes: Vec<u16>,
}

impl Channel16 {
    pub fn to_image(&self) -> Image {
        let px = self.codes.iter().map(|&c| c as f64 / 65535.0).collect();
        Image::new(self.width, self.height, px).expect("codes are finite")
    }
}

#[derive(Clone, Debug)]
pub struct DecodedImage {
    /// Gray input: one channel. Color input: R, G, B.
    pub channels: Vec<Channel16>,
    /// SHA-256 of the encoded bytes, lowercase hex.
    pub sha256: String,
}

impl DecodedImage {
    pub fn width(&self) -> usize {
        self.channels[0].width
    }

    pub fn height(&self) -> usize {
        self.channels[0].height
    }

    pub fn is_color(&self) -> bool {
        self.channels.len() == 3
    }

    /// Intensity image in [0, 1]; color inputs are converted to luminance.
    pub fn gray(&self) -> Image {
        if !self.is_color() {
            return self.channels[0].to_image();
        }
        let n = self.width() * self.height();
        let px = (0..n)
            .map(|i| {
                LUMA_WEIGHTS
                    .iter()
                    .zip(&self.channels)
                    .map(|(w, c)| w * c.codes[i] as f64 / 65535.0)
                    .sum()
            })
            .collect();
        Image::new(self.width(), self.height(), px).expect("finite")
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn decode_image(bytes: &[u8]) -> Result<DecodedImage> {
    let img = image::load_from_memory(bytes)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let channels = if img.color().has_color() {
        let rgb = img.to_rgb16();
        (0..3)
            .map(|c| Channel16 {
                width: w,
                height: h,
                codes: rgb.pixels().map(|p| p.0[c]).collect(),
            })
            .collect()
    } else {
        let gray = img.to_luma16();
        vec![Channel16 { width: w, height: h, codes: gray.into_raw() }]
    };
    Ok(DecodedImage { channels, sha256: sha256_hex(bytes) })
}

pub fn read_image(path: &Path) -> Result<DecodedImage> {
    let bytes = std::fs::read(path)?;
    decode_image(&bytes)
}

/// Quantize a layer estimate against the exact 16-bit input codes.
///
/// Returns `(q1, q2)` with `q1 + q2 == y` for every pixel; `q1` is clamped
/// into `[0, y]` so that both codes are representable.
pub fn quantize_layers(y: &Channel16, x1: &Image) -> (Channel16, Channel16) {
    let mut q1 = Vec::with_capacity(y.codes.len());
    let mut q2 = Vec::with_capacity(y.codes.len());
    for (&yc, &v) in y.codes.iter().zip(x1.pixels()) {
        let c = (v * 65535.0).round().clamp(0.0, yc as f64) as u16;
        q1.push(c);
        q2.push(yc - c);
    }
    let mk = |codes| Channel16 { width: y.width, height: y.height, codes };
    (mk(q1), mk(q2))
}

/// Encode one (gray) or three (RGB) 16-bit channels as PNG.
pub fn encode_png16(channels: &[Channel16]) -> Result<Vec<u8>> {
    let (w, h) = (channels[0].width as u32, channels[0].height as u32);
    let dynamic = match channels.len() {
        1 => DynamicImage::ImageLuma16(
            ImageBuffer::<Luma<u16>, _>::from_raw(w, h, channels[0].codes.clone())
                .ok_or_else(|| Error::invalid("channel size mismatch"))?,
        ),
        3 => {
            let mut raw = Vec::with_capacity(channels[0].codes.len() * 3);
            for i in 0..channels[0].codes.len() {
                for c in channels {
                    raw.push(c.codes[i]);
                }
            }
            DynamicImage::ImageRgb16(
                ImageBuffer::<Rgb<u16>, _>::from_raw(w, h, raw)
                    .ok_or_else(|| Error::invalid("channel size mismatch"))?,
            )
        }
        n => return Err(Error::invalid(format!("cannot encode {n} channels"))),
    };
    let mut out = Cursor::new(Vec::new());
    dynamic.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Encode a float image clipped to [0, 1] as 8-bit gray PNG.
pub fn encode_png8(img: &Image) -> Result<Vec<u8>> {
    let raw: Vec<u8> = img
        .pixels()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = ImageBuffer::<Luma<u8>, _>::from_raw(img.width() as u32, img.height() as u32, raw)
        .ok_or_else(|| Error::invalid("image size mismatch"))?;
    let mut out = Cursor::new(Vec::new());
    DynamicImage::ImageLuma8(buf).write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Encode a float image in [0, 1] as 16-bit gray PNG.
pub fn encode_gray_png16(img: &Image) -> Result<Vec<u8>> {
    let codes = img
        .pixels()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    encode_png16(&[Channel16 { width: img.width(), height: img.height(), codes }])
}

const CORPUS_EXTENSIONS: [&str; 6] = ["png", "pgm", "ppm", "pnm", "jpg", "jpeg"];

/// Load every image file directly under `dir` as gray, sorted by file name.
pub fn load_corpus(dir: &Path) -> Result<Vec<(String, Image)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| CORPUS_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::invalid(format!("no images found in {}", dir.display())));
    }
    paths
        .into_iter()
        .map(|p| {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            Ok((name, read_image(&p)?.gray()))
        })
        .collect()
}
