//! `GMM1` model files: little-endian, factorizations recomputed on load.
//!
//! ```text
//! b"GMM1" | u32 version=1 | u32 K | u32 dim=64
//! K × f64 weights | K×64 f64 means | K×64×64 f64 covariances
//! ```

use std::io::{Read, Write};

use super::GmmPrior;
use crate::error::{Error, Result};
use crate::patch::PATCH_DIM;

pub const GMM1_MAGIC: &[u8; 4] = b"GMM1";
pub const GMM1_VERSION: u32 = 1;

pub(super) fn to_bytes(prior: &GmmPrior) -> Vec<u8> {
    let k = prior.k();
    let d = prior.dim();
    let mut out = Vec::with_capacity(16 + 8 * k * (1 + d + d * d));
    out.extend_from_slice(GMM1_MAGIC);
    out.extend_from_slice(&GMM1_VERSION.to_le_bytes());
    out.extend_from_slice(&(k as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for c in prior.components() {
        out.extend_from_slice(&c.weight.to_le_bytes());
    }
    for c in prior.components() {
        c.mean.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
    for c in prior.components() {
        c.covariance.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
    out
}

pub fn write_gmm1<W: Write>(prior: &GmmPrior, mut w: W) -> Result<()> {
    if prior.dim() != PATCH_DIM {
        return Err(Error::invalid("GMM1 files hold 64-dimensional priors only"));
    }
    w.write_all(&to_bytes(prior))?;
    Ok(())
}

pub fn read_gmm1<R: Read>(mut r: R) -> Result<GmmPrior> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..4] != GMM1_MAGIC {
        return Err(Error::Format("missing GMM1 magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (version, k, d) = (word(4), word(8), word(12));
    if version != GMM1_VERSION as usize {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    if d != PATCH_DIM {
        return Err(Error::Format(format!("dimension {d}, expected {PATCH_DIM}")));
    }
    if k == 0 {
        return Err(Error::Format("zero components".into()));
    }
    let expected = 16 + 8 * k * (1 + d + d * d);
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "expected {expected} bytes for K={k}, found {}",
            bytes.len()
        )));
    }
    let mut floats = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let weights: Vec<f64> = floats.by_ref().take(k).collect();
    let means: Vec<Vec<f64>> = (0..k).map(|_| floats.by_ref().take(d).collect()).collect();
    let covs: Vec<Vec<f64>> = (0..k).map(|_| floats.by_ref().take(d * d).collect()).collect();
    GmmPrior::new(weights, means, covs).map_err(|e| Error::Format(e.to_string()))
}
