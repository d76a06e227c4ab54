use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use refsep_core::io::DecodedImage;
use refsep_core::pipeline::ImageSummary;
use refsep_core::session::PointAnnotation;
use refsep_core::Image;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionState {
    Annotating,
    Separating,
    Done,
    Failed,
}

/// Monotone progress fraction shared with the worker.
#[derive(Debug, Default)]
pub struct ProgressCell(AtomicU64);

impl ProgressCell {
    pub fn get(&self) -> f64 {
        f64::from_bits(self.0.load(Ordering::Acquire))
    }

    pub fn raise(&self, v: f64) {
        let v = v.clamp(0.0, 1.0);
        let _ = self.0.fetch_update(Ordering::AcqRel, Ordering::Acquire, |cur| {
            (v > f64::from_bits(cur)).then_some(v.to_bits())
        });
    }
}

pub struct Layers {
    pub x1_png: Vec<u8>,
    pub x2_png: Vec<u8>,
    pub summary: ImageSummary,
    pub seconds: f64,
}

pub struct Session {
    pub id: String,
    pub decoded: Arc<DecodedImage>,
    pub gray: Arc<Image>,
    pub annotations: Vec<PointAnnotation>,
    pub state: SessionState,
    pub progress: Arc<ProgressCell>,
    pub result: Option<Arc<Layers>>,
    pub error: Option<String>,
}

impl Session {
    pub fn width(&self) -> usize {
        self.gray.width()
    }

    pub fn height(&self) -> usize {
        self.gray.height()
    }
}
