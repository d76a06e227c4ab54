//! Annotation session files.
//!
//! Annotations are stored as points `(x, y)` with the chosen pair; the patch
//! covering a point spans `[x − 4, x + 4) × [y − 4, y + 4)`. Selected means
//! are recomputed from the image on load.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch::origin_for_point;
use crate::separation::{ComponentAnnotation, SeparationConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointAnnotation {
    pub x: usize,
    pub y: usize,
    pub i: usize,
    pub j: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionFile {
    pub image_sha256: String,
    pub prior_id: String,
    #[serde(default)]
    pub annotations: Vec<PointAnnotation>,
    #[serde(default)]
    pub config: SeparationConfig,
}

impl SessionFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Refuses sessions recorded against another image or prior.
    pub fn check(&self, image_sha256: &str, prior_id: &str) -> Result<()> {
        if !self.image_sha256.eq_ignore_ascii_case(image_sha256) {
            return Err(Error::invalid(format!(
                "stale session: recorded for image {}, got {image_sha256}",
                self.image_sha256
            )));
        }
        if self.prior_id != prior_id {
            return Err(Error::invalid(format!(
                "stale session: recorded for prior {}, got {prior_id}",
                self.prior_id
            )));
        }
        Ok(())
    }

    pub fn component_annotations(&self, width: usize, height: usize) -> Result<Vec<ComponentAnnotation>> {
        self.annotations.iter().map(|a| to_component(a, width, height)).collect()
    }
}

pub fn to_component(a: &PointAnnotation, width: usize, height: usize) -> Result<ComponentAnnotation> {
    let (x, y) = origin_for_point(width, height, a.x, a.y).ok_or_else(|| {
        Error::invalid(format!("point ({}, {}) has no 8x8 patch inside the {width}x{height} image", a.x, a.y))
    })?;
    Ok(ComponentAnnotation { x, y, i: a.i, j: a.j })
}
