//! A small from-scratch convolutional network.
//!
//! Everything runs on the CPU in `f32`. The output layer is always a softmax,
//! whose probabilities (and the cross-entropy loss built on them) are computed
//! in `f64`.

mod container;
mod network;
pub mod ops;
mod spec;

pub use container::{decode_weights, encode_weights, read_weights, write_weights};
pub use network::{
    build_initial_cnn, extract_features, fine_tune, forward, forward_map, init_weights,
    loss_and_grads, sgd_step, train, Model, ModelId, NetInput, TrainConfig, TrainOutcome,
};
pub use ops::{softmax, FeatureMap, ProbabilityVector};
pub use spec::{LayerKind, LayerSpec, NetworkSpec, NetworkSpecBuilder, ParamBlock, Shape, Weights};

/// Width of the hidden dense layer in the initial network.
pub const INITIAL_HIDDEN_WIDTH: usize = 38;

/// Half-width of the uniform distribution used for weight initialization.
pub const INIT_RANGE: f32 = 0.05;

/// Penultimate dense activations, used as an embedding for template matching.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f32>);

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    /// Unnormalized Euclidean distance, accumulated in `f64`.
    pub fn l2_distance(&self, other: &FeatureVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| {
                let d = *a as f64 - *b as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }
}
