//! Desk-scale experiment harness: gradient statistics, candidate accuracy
//! curves and the annotated separation benchmark.

mod annotate;
mod canny;
mod report;
mod stats;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use annotate::{
    annotation_sites, auto_annotate_components, auto_annotate_filters, label_sites, site_origin, synth_pair,
    synth_pairs, AnnotationDensity, AutoAnnotations, CropSource, SynthPair,
};
pub use canny::{canny, EdgeMap, CANNY_HIGH, CANNY_LOW, CANNY_SIGMA};
pub use report::{
    candidate_accuracy_curve, run_separation_bench, AccuracyCurve, BenchConfig, BenchReport, DensityReport,
    InstanceRecord, MeanStat, Method, MethodReport, PairedDifference, BENCH_REPORT_VERSION,
};
pub use stats::{
    gradient_magnitude, gradient_stats, gradients, GradientStats, GradientSummary, BUSY_IMAGE_FRACTION,
    GRADIENT_THRESHOLD, HISTOGRAM_BINS,
};

/// Independent stream `index` of family `tag` under a master seed.
pub(crate) fn stream_rng(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((tag << 48) ^ index);
    rng
}
