use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{Image, IMAGE_CHANNELS, IMAGE_SIZE};
use crate::label::{ExpressionLabel, NUM_CLASSES};

use super::ops::{self, FeatureMap, ProbabilityVector};
use super::spec::{LayerKind, NetworkSpec, ParamBlock, Shape, Weights};
use super::{FeatureVector, INITIAL_HIDDEN_WIDTH, INIT_RANGE};

/// Anything that can be fed to the network's input layer.
pub trait NetInput {
    fn to_map(&self) -> FeatureMap;
}

/// Images enter the network standardized to zero mean and unit variance over
/// all pixels; flat images are only centered.
impl NetInput for Image {
    fn to_map(&self) -> FeatureMap {
        let n = self.pixels().len() as f64;
        let mean = self.pixels().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self.pixels().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let scale = if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 };
        FeatureMap {
            shape: Shape::new(IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE),
            data: self.pixels().iter().map(|&v| (v as f64 - mean) * scale).collect(),
        }
    }
}

impl NetInput for FeatureMap {
    fn to_map(&self) -> FeatureMap {
        self.clone()
    }
}

impl<T: NetInput> NetInput for &T {
    fn to_map(&self) -> FeatureMap {
        (*self).to_map()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub frozen_prefix: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            batch_size: 16,
            epochs: 10,
            seed: 0,
            frozen_prefix: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub weights: Weights,
    /// Mean training loss of each epoch.
    pub loss_history: Vec<f64>,
}

/// Content hash of a serialized model.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelId(pub String);

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// An immutable (spec, weights) pair with its content id.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: NetworkSpec,
    pub weights: Weights,
    pub id: ModelId,
}

impl Model {
    pub fn new(spec: NetworkSpec, weights: Weights) -> Result<Self> {
        spec.validate()?;
        weights.validate(&spec)?;
        let bytes = super::container::encode_weights(&spec, &weights)?;
        let digest = Sha256::digest(&bytes);
        let id = ModelId(hex::encode(&digest[..8]));
        Ok(Model { spec, weights, id })
    }

    pub fn predict<I: NetInput>(&self, input: &I) -> Result<ProbabilityVector> {
        forward_map(&self.spec, &self.weights, &input.to_map())
    }

    pub fn features<I: NetInput>(&self, input: &I) -> Result<FeatureVector> {
        extract_features(&self.spec, &self.weights, input)
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.spec
            .penultimate_dense()
            .map(|i| self.spec.layers[i].output.len())
    }
}

#[derive(Default)]
struct Scratch {
    cols: Vec<f64>,
}

/// `f64` copy of the weights (kernel, bias) per parameterized layer. Also
/// used as the gradient accumulator.
#[derive(Clone)]
struct Params {
    blocks: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Params {
    fn from_weights(weights: &Weights) -> Self {
        let widen = |v: &[f32]| v.iter().map(|&x| x as f64).collect();
        Params {
            blocks: weights.blocks.iter().map(|b| (widen(&b.kernel), widen(&b.bias))).collect(),
        }
    }

    fn zeros_like(weights: &Weights) -> Self {
        Params {
            blocks: weights
                .blocks
                .iter()
                .map(|b| (vec![0.0; b.kernel.len()], vec![0.0; b.bias.len()]))
                .collect(),
        }
    }

    fn clear(&mut self) {
        for (k, b) in &mut self.blocks {
            k.fill(0.0);
            b.fill(0.0);
        }
    }

    /// Rounds into a weights-shaped `f32` container.
    fn to_weights(&self, like: &Weights) -> Weights {
        let mut out = like.clone();
        for (dst, (k, b)) in out.blocks.iter_mut().zip(&self.blocks) {
            dst.kernel.iter_mut().zip(k).for_each(|(d, s)| *d = *s as f32);
            dst.bias.iter_mut().zip(b).for_each(|(d, s)| *d = *s as f32);
        }
        out
    }
}

/// Runs layers `0..stop` and returns every intermediate map; `maps[i]` is the
/// input of layer `i`, the last entry is the output of layer `stop - 1`.
fn trace(
    spec: &NetworkSpec,
    params: &Params,
    input: FeatureMap,
    stop: usize,
    scratch: &mut Scratch,
) -> Result<Vec<FeatureMap>> {
    if input.shape != spec.input {
        return Err(Error::contract(format!(
            "network expects input {:?}, got {:?}",
            spec.input, input.shape
        )));
    }
    let mut maps = Vec::with_capacity(stop + 1);
    maps.push(input);
    let mut blocks = params.blocks.iter();
    for layer in &spec.layers[..stop] {
        let x = maps.last().expect("non-empty");
        let y = match layer.kind {
            LayerKind::Conv3x3 { .. } => {
                let b = blocks.next().ok_or_else(|| Error::contract("missing conv weights"))?;
                ops::conv3x3_forward_with(x, &b.0, &b.1, &mut scratch.cols)?
            }
            LayerKind::Dense { .. } => {
                let b = blocks.next().ok_or_else(|| Error::contract("missing dense weights"))?;
                FeatureMap::vector(ops::dense_forward(&x.data, &b.0, &b.1)?)
            }
            LayerKind::MaxPool2 => ops::maxpool2_forward(x)?,
            LayerKind::Relu => ops::relu_forward(x),
            // Probabilities are formed in f64 outside the trace.
            LayerKind::Softmax => x.clone(),
        };
        maps.push(y);
    }
    Ok(maps)
}

fn logits_of(map: &FeatureMap) -> Result<[f64; NUM_CLASSES]> {
    if map.data.len() != NUM_CLASSES {
        return Err(Error::contract(format!(
            "output layer has width {}, expected {NUM_CLASSES}",
            map.data.len()
        )));
    }
    Ok(std::array::from_fn(|i| map.data[i]))
}

/// Class probabilities for an arbitrary input map.
pub fn forward_map(spec: &NetworkSpec, weights: &Weights, input: &FeatureMap) -> Result<ProbabilityVector> {
    weights.validate(spec)?;
    let n = spec.layers.len();
    let params = Params::from_weights(weights);
    let maps = trace(spec, &params, input.clone(), n - 1, &mut Scratch::default())?;
    ops::softmax(&logits_of(maps.last().expect("non-empty"))?)
}

/// Class probabilities for one 64×64 image.
pub fn forward(spec: &NetworkSpec, weights: &Weights, image: &Image) -> Result<ProbabilityVector> {
    forward_map(spec, weights, &image.to_map())
}

/// Penultimate dense activations (after its ReLU, when one follows).
pub fn extract_features<I: NetInput>(spec: &NetworkSpec, weights: &Weights, input: &I) -> Result<FeatureVector> {
    let idx = spec
        .penultimate_dense()
        .ok_or_else(|| Error::contract("network has no dense layer before its output layer"))?;
    weights.validate(spec)?;
    let stop = if matches!(spec.layers.get(idx + 1).map(|l| l.kind), Some(LayerKind::Relu)) {
        idx + 2
    } else {
        idx + 1
    };
    let params = Params::from_weights(weights);
    let maps = trace(spec, &params, input.to_map(), stop, &mut Scratch::default())?;
    let last = maps.into_iter().last().expect("non-empty");
    Ok(FeatureVector(last.data.iter().map(|&v| v as f32).collect()))
}

/// Accumulates the gradient of one sample's cross-entropy into `grads`,
/// scaled by `scale`. Layers before `stop_layer` get no gradient.
#[allow(clippy::too_many_arguments)]
fn accumulate_sample(
    spec: &NetworkSpec,
    params: &Params,
    input: FeatureMap,
    label: ExpressionLabel,
    scale: f64,
    stop_layer: usize,
    grads: &mut Params,
    scratch: &mut Scratch,
) -> Result<f64> {
    let n = spec.layers.len();
    let maps = trace(spec, params, input, n - 1, scratch)?;
    let probs = ops::softmax(&logits_of(&maps[n - 1])?)?;
    let loss = -probs.0[label.index()].max(f64::MIN_POSITIVE).ln();

    let mut grad: Vec<f64> = (0..NUM_CLASSES)
        .map(|i| {
            let target = if i == label.index() { 1.0 } else { 0.0 };
            (probs.0[i] - target) * scale
        })
        .collect();

    let mut block_idx = params.blocks.len();
    for li in (0..n - 1).rev() {
        if li < stop_layer {
            break;
        }
        let layer = &spec.layers[li];
        let x = &maps[li];
        let need_input = li > stop_layer;
        match layer.kind {
            LayerKind::Conv3x3 { .. } => {
                block_idx -= 1;
                let (wk, _) = &params.blocks[block_idx];
                let (gk, gb) = &mut grads.blocks[block_idx];
                match ops::conv3x3_backward(x, wk, &grad, gk, gb, need_input, &mut scratch.cols) {
                    Some(d) => grad = d.data,
                    None => break,
                }
            }
            LayerKind::Dense { .. } => {
                block_idx -= 1;
                let (wk, _) = &params.blocks[block_idx];
                let (gk, gb) = &mut grads.blocks[block_idx];
                match ops::dense_backward(&x.data, wk, &grad, gk, gb, need_input) {
                    Some(d) => grad = d,
                    None => break,
                }
            }
            LayerKind::MaxPool2 => grad = ops::maxpool2_backward(x, &grad).data,
            LayerKind::Relu => grad = ops::relu_backward(x, &grad).data,
            LayerKind::Softmax => unreachable!("softmax is always the final layer"),
        }
    }
    Ok(loss)
}

fn first_unfrozen_layer(spec: &NetworkSpec, frozen_prefix: usize) -> usize {
    let indices = spec.param_layer_indices();
    if frozen_prefix == 0 {
        0
    } else {
        indices.get(frozen_prefix).copied().unwrap_or(spec.layers.len())
    }
}

fn batch_loss_and_grads<I: NetInput>(
    spec: &NetworkSpec,
    params: &Params,
    batch: &[(I, ExpressionLabel)],
    stop_layer: usize,
    grads: &mut Params,
    scratch: &mut Scratch,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for (input, label) in batch {
        loss += accumulate_sample(spec, params, input.to_map(), *label, scale, stop_layer, grads, scratch)?;
    }
    Ok(loss * scale)
}

/// Mean cross-entropy over the batch and its gradient for every parameter.
pub fn loss_and_grads<I: NetInput>(
    spec: &NetworkSpec,
    weights: &Weights,
    batch: &[(I, ExpressionLabel)],
) -> Result<(f64, Weights)> {
    spec.validate()?;
    weights.validate(spec)?;
    let params = Params::from_weights(weights);
    let mut grads = Params::zeros_like(weights);
    let loss = batch_loss_and_grads(spec, &params, batch, 0, &mut grads, &mut Scratch::default())?;
    Ok((loss, grads.to_weights(weights)))
}

/// Plain SGD: `w - lr·g` for every parameter outside the frozen prefix.
/// The update is evaluated in `f64` and rounded once to `f32`.
pub fn sgd_step(weights: &Weights, grads: &Weights, lr: f32, frozen_prefix: usize) -> Result<Weights> {
    if weights.blocks.len() != grads.blocks.len()
        || weights.blocks.iter().zip(&grads.blocks).any(|(w, g)| {
            w.kernel.len() != g.kernel.len() || w.bias.len() != g.bias.len()
        })
    {
        return Err(Error::contract("gradient shapes do not match weights"));
    }
    let mut out = weights.clone();
    apply_sgd(&mut out, &Params::from_weights(grads), lr, frozen_prefix);
    Ok(out)
}

fn apply_sgd(weights: &mut Weights, grads: &Params, lr: f32, frozen_prefix: usize) {
    let lr = lr as f64;
    for (w, (gk, gb)) in weights.blocks.iter_mut().zip(&grads.blocks).skip(frozen_prefix) {
        for (p, d) in w.kernel.iter_mut().zip(gk).chain(w.bias.iter_mut().zip(gb)) {
            *p = (*p as f64 - lr * d) as f32;
        }
    }
}

fn init_block(block: &mut ParamBlock, rng: &mut ChaCha8Rng) {
    for k in &mut block.kernel {
        *k = rng.random_range(-INIT_RANGE..INIT_RANGE);
    }
    block.bias.fill(0.0);
}

/// Seeded uniform(±0.05) kernels with zero biases.
pub fn init_weights(spec: &NetworkSpec, seed: u64) -> Weights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Weights::zeros(spec);
    for block in &mut weights.blocks {
        init_block(block, &mut rng);
    }
    weights
}

/// The 64×64×3 → 7 network: three conv(32, 32, 64)+ReLU+pool stages, a
/// 38-unit hidden layer and the softmax output. 184,599 parameters.
pub fn build_initial_cnn(seed: u64) -> (NetworkSpec, Weights) {
    let spec = NetworkSpec::builder(Shape::new(IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE))
        .conv3x3(32)
        .relu()
        .maxpool2()
        .conv3x3(32)
        .relu()
        .maxpool2()
        .conv3x3(64)
        .relu()
        .maxpool2()
        .dense(INITIAL_HIDDEN_WIDTH)
        .relu()
        .dense(NUM_CLASSES)
        .softmax()
        .build()
        .expect("initial architecture is valid");
    let weights = init_weights(&spec, seed);
    (spec, weights)
}

/// Minibatch SGD with seeded shuffling. The effective frozen prefix is the
/// larger of the network's marker and `config.frozen_prefix`.
pub fn train<I: NetInput>(
    spec: &NetworkSpec,
    weights: &Weights,
    dataset: &[(I, ExpressionLabel)],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::contract("cannot train on an empty dataset"));
    }
    config.validate()?;
    spec.validate()?;
    weights.validate(spec)?;
    let frozen = spec.frozen_prefix.max(config.frozen_prefix);
    if frozen > spec.param_layer_count() {
        return Err(Error::contract("frozen prefix exceeds parameterized layers"));
    }
    let stop_layer = first_unfrozen_layer(spec, frozen);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut weights = weights.clone();
    let mut grads = Params::zeros_like(&weights);
    let mut scratch = Scratch::default();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut batch: Vec<(&I, ExpressionLabel)> = Vec::with_capacity(config.batch_size);

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| (&dataset[i].0, dataset[i].1)));
            grads.clear();
            let params = Params::from_weights(&weights);
            let loss = batch_loss_and_grads(spec, &params, &batch, stop_layer, &mut grads, &mut scratch)?;
            epoch_loss += loss * chunk.len() as f64;
            apply_sgd(&mut weights, &grads, config.learning_rate, frozen);
        }
        history.push(epoch_loss / dataset.len() as f64);
    }
    Ok(TrainOutcome {
        weights,
        loss_history: history,
    })
}

/// Replaces the head (penultimate dense → `new_head_width`, output → 7) with
/// freshly seeded layers, freezes the first `freeze_prefix` parameterized
/// layers and trains on `dataset`. Retained unfrozen layers start from the
/// base values.
pub fn fine_tune<I: NetInput>(
    base: &Model,
    dataset: &[(I, ExpressionLabel)],
    freeze_prefix: usize,
    new_head_width: usize,
    config: &TrainConfig,
) -> Result<(Model, Vec<f64>)> {
    let head_start = base
        .spec
        .penultimate_dense()
        .ok_or_else(|| Error::contract("base network has no penultimate dense layer"))?;
    let retained_params = base.spec.layers[..head_start]
        .iter()
        .filter(|l| l.kind.is_parameterized())
        .count();
    if freeze_prefix > retained_params {
        return Err(Error::contract(format!(
            "freeze prefix {freeze_prefix} reaches into the replaced head ({retained_params} retained layers)"
        )));
    }
    if new_head_width == 0 {
        return Err(Error::contract("head width must be positive"));
    }

    let body = &base.spec.layers[..head_start];
    let mut spec = NetworkSpec {
        input: base.spec.input,
        layers: body.to_vec(),
        frozen_prefix: 0,
    };
    let feature_shape = body.last().map(|l| l.output).unwrap_or(base.spec.input);
    let head = NetworkSpec::builder(feature_shape)
        .dense(new_head_width)
        .relu()
        .dense(NUM_CLASSES)
        .softmax()
        .build()?;
    let offset = spec.layers.len();
    spec.layers.extend(head.layers);
    let spec = spec.with_frozen_prefix(freeze_prefix)?;
    spec.validate()?;

    let mut weights = init_weights(&spec, config.seed ^ 0x5eed_4ead);
    for (dst, src) in weights.blocks.iter_mut().zip(&base.weights.blocks).take(retained_params) {
        debug_assert!(src.layer < offset);
        dst.kernel.clone_from(&src.kernel);
        dst.bias.clone_from(&src.bias);
    }

    let config = TrainConfig {
        frozen_prefix: freeze_prefix,
        ..*config
    };
    let outcome = train(&spec, &weights, dataset, &config)?;
    Ok((Model::new(spec, outcome.weights)?, outcome.loss_history))
}
