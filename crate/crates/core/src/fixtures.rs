//! Published class counts and confusion-matrix values used as arithmetic
//! fixtures. Class order is the canonical [`ExpressionLabel`] order.
//!
//! [`ExpressionLabel`]: crate::ExpressionLabel

use crate::dataset::{DatasetManifest, SampleRecord, SampleSource};
use crate::label::{ExpressionLabel, NUM_CLASSES};

/// Per-class sample counts of the web-collected seed corpus (14,756 images).
pub const CIFE_COUNTS: [usize; NUM_CLASSES] = [1905, 975, 1381, 3636, 2381, 2485, 1993];

/// Per-class sample counts of the game-harvested corpus (15,455 images).
pub const GAMO_COUNTS: [usize; NUM_CLASSES] = [1945, 1838, 1586, 3185, 2741, 1898, 2262];

/// Images available for augmentation in the seed corpus' training portion.
pub const AUGMENT_INPUT_IMAGES: usize = 10_330;

/// Self-evaluation confusion matrix of the seed-corpus model (rows: truth).
pub const CIFE_SELF_EVAL: [[f64; NUM_CLASSES]; NUM_CLASSES] = [
    [0.81, 0.03, 0.02, 0.01, 0.03, 0.06, 0.03],
    [0.07, 0.53, 0.06, 0.03, 0.19, 0.03, 0.06],
    [0.04, 0.02, 0.62, 0.02, 0.04, 0.07, 0.2],
    [0.02, 0.02, 0.001, 0.85, 0.02, 0.05, 0.02],
    [0.05, 0.09, 0.02, 0.02, 0.70, 0.04, 0.08],
    [0.07, 0.01, 0.01, 0.03, 0.04, 0.82, 0.01],
    [0.01, 0.01, 0.08, 0.02, 0.07, 0.01, 0.78],
];

/// Self-evaluation confusion matrix of the harvested-corpus model.
pub const GAMO_SELF_EVAL: [[f64; NUM_CLASSES]; NUM_CLASSES] = [
    [0.62, 0.07, 0.02, 0.04, 0.11, 0.08, 0.04],
    [0.06, 0.69, 0.03, 0.06, 0.05, 0.08, 0.01],
    [0.02, 0.05, 0.62, 0.05, 0.11, 0.02, 0.1],
    [0.02, 0.02, 0.01, 0.81, 0.04, 0.05, 0.02],
    [0.01, 0.02, 0.02, 0.03, 0.85, 0.02, 0.02],
    [0.02, 0.05, 0.02, 0.05, 0.04, 0.77, 0.02],
    [0.02, 0.02, 0.06, 0.04, 0.04, 0.01, 0.79],
];

/// Published rows only sum to 1 up to rounding; the worst self-evaluation
/// row is off by 0.03.
pub const PUBLISHED_ROW_TOLERANCE: f64 = 0.035;

/// Reported average accuracies of the two self evaluations.
pub const CIFE_SELF_AVERAGE: f64 = 0.76;
pub const GAMO_SELF_AVERAGE: f64 = 0.75;

/// A manifest of placeholder records with the given per-class counts.
pub fn manifest_with_counts(id: &str, counts: [usize; NUM_CLASSES]) -> DatasetManifest {
    let mut records = Vec::with_capacity(counts.iter().sum());
    for (label, &n) in ExpressionLabel::ALL.iter().zip(&counts) {
        for i in 0..n {
            records.push(SampleRecord {
                path: format!("{id}/{}/{i:05}.png", label.name().to_lowercase()),
                label: *label,
                source: SampleSource::Seed,
                user_id: None,
                confidence: None,
                ts: 0,
            });
        }
    }
    DatasetManifest::from_records(id, records).expect("fixture paths are unique")
}

pub fn cife_manifest() -> DatasetManifest {
    manifest_with_counts("cife", CIFE_COUNTS)
}

pub fn gamo_manifest() -> DatasetManifest {
    manifest_with_counts("gamo", GAMO_COUNTS)
}
