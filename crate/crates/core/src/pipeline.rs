//! Separation of a decoded input file into quantized output layers.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gmm::GmmPrior;
use crate::io::{quantize_layers, Channel16, DecodedImage};
use crate::posterior::PairTable;
use crate::separation::{separate, separate_color, Annotations, Progress, ResultSummary, SeparationConfig, SolveOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSummary {
    /// Gray input: the only run. Color input: the luminance run.
    #[serde(flatten)]
    pub primary: ResultSummary,
    /// Per-channel runs (R, G, B) for color input.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<Vec<ResultSummary>>,
}

impl ImageSummary {
    pub fn warnings(&self) -> impl Iterator<Item = &String> {
        self.primary.warnings.iter().chain(self.channels.iter().flatten().flat_map(|c| c.warnings.iter()))
    }
}

#[derive(Debug, Clone)]
pub struct LayerOutput {
    /// Per input channel, `x1 + x2` equals the input codes.
    pub x1: Vec<Channel16>,
    pub x2: Vec<Channel16>,
    pub summary: ImageSummary,
}

pub fn separate_image(
    decoded: &DecodedImage,
    annotations: &Annotations,
    prior: &GmmPrior,
    table: &PairTable,
    cfg: &SeparationConfig,
    progress: Option<Progress<'_>>,
) -> Result<LayerOutput> {
    let (summary, x1_channels) = if decoded.is_color() {
        let chans: Vec<_> = decoded.channels.iter().map(Channel16::to_image).collect();
        let res = separate_color(&chans, annotations, prior, table, cfg, progress)?;
        let summary = ImageSummary {
            primary: res.luminance.summary(),
            channels: Some(res.channels.iter().map(|r| r.summary()).collect()),
        };
        (summary, res.channels.into_iter().map(|r| r.x1).collect::<Vec<_>>())
    } else {
        let opts = SolveOptions { progress, ..Default::default() };
        let res = separate(&decoded.gray(), annotations, prior, table, cfg, opts)?;
        (ImageSummary { primary: res.summary(), channels: None }, vec![res.x1])
    };
    let (x1, x2) = decoded.channels.iter().zip(&x1_channels).map(|(y, x1)| quantize_layers(y, x1)).unzip();
    Ok(LayerOutput { x1, x2, summary })
}
