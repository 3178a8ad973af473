use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channels × height × width. Dense vectors use `h = w = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Shape { c, h, w }
    }

    pub const fn vector(n: usize) -> Self {
        Shape { c: n, h: 1, w: 1 }
    }

    pub const fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LayerKind {
    /// 3×3 convolution, stride 1, zero "same" padding.
    Conv3x3 { filters: usize },
    /// Non-overlapping 2×2 max pooling.
    MaxPool2,
    /// Fully connected layer over the flattened (channel-major) input.
    Dense { units: usize },
    Relu,
    Softmax,
}

impl LayerKind {
    pub fn is_parameterized(&self) -> bool {
        matches!(self, LayerKind::Conv3x3 { .. } | LayerKind::Dense { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    pub input: Shape,
    pub output: Shape,
}

impl LayerSpec {
    /// Shape of the kernel tensor and bias length, for parameterized layers.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, usize)> {
        match self.kind {
            LayerKind::Conv3x3 { filters } => Some((vec![filters, self.input.c, 3, 3], filters)),
            LayerKind::Dense { units } => Some((vec![units, self.input.len()], units)),
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .map(|(k, b)| k.iter().product::<usize>() + b)
            .unwrap_or(0)
    }
}

/// Ordered layer list with validated shapes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: Shape,
    pub layers: Vec<LayerSpec>,
    /// Number of leading parameterized layers whose weights never change.
    pub frozen_prefix: usize,
}

impl NetworkSpec {
    pub fn builder(input: Shape) -> NetworkSpecBuilder {
        NetworkSpecBuilder {
            input,
            current: input,
            layers: Vec::new(),
            error: None,
        }
    }

    /// Indices (into `layers`) of the conv and dense layers.
    pub fn param_layer_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind.is_parameterized())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn param_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| l.kind.is_parameterized()).count()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    pub fn output_shape(&self) -> Shape {
        self.layers.last().map(|l| l.output).unwrap_or(self.input)
    }

    pub fn with_frozen_prefix(mut self, frozen_prefix: usize) -> Result<Self> {
        if frozen_prefix > self.param_layer_count() {
            return Err(Error::contract(format!(
                "frozen prefix {frozen_prefix} exceeds {} parameterized layers",
                self.param_layer_count()
            )));
        }
        self.frozen_prefix = frozen_prefix;
        Ok(self)
    }

    /// Index of the last dense layer before the output dense layer.
    pub fn penultimate_dense(&self) -> Option<usize> {
        let dense: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l.kind, LayerKind::Dense { .. }))
            .map(|(i, _)| i)
            .collect();
        (dense.len() >= 2).then(|| dense[dense.len() - 2])
    }

    /// Checks layer-to-layer shape compatibility and the softmax tail.
    pub fn validate(&self) -> Result<()> {
        let mut current = self.input;
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.input != current {
                return Err(Error::contract(format!(
                    "layer {i} expects {:?} but receives {current:?}",
                    layer.input
                )));
            }
            let expected = infer_output(layer.kind, current)?;
            if layer.output != expected {
                return Err(Error::contract(format!("layer {i} output shape is inconsistent")));
            }
            if matches!(layer.kind, LayerKind::Softmax) && i + 1 != self.layers.len() {
                return Err(Error::contract("softmax must be the final layer"));
            }
            current = layer.output;
        }
        if !matches!(self.layers.last().map(|l| l.kind), Some(LayerKind::Softmax)) {
            return Err(Error::contract("network must end with a softmax layer"));
        }
        if self.frozen_prefix > self.param_layer_count() {
            return Err(Error::contract("frozen prefix exceeds parameterized layers"));
        }
        Ok(())
    }
}

fn infer_output(kind: LayerKind, input: Shape) -> Result<Shape> {
    match kind {
        LayerKind::Conv3x3 { filters } => {
            if filters == 0 || input.h == 0 || input.w == 0 {
                return Err(Error::contract("conv3x3 needs filters and non-empty input"));
            }
            Ok(Shape::new(filters, input.h, input.w))
        }
        LayerKind::MaxPool2 => {
            if input.h % 2 != 0 || input.w % 2 != 0 || input.h == 0 {
                return Err(Error::contract(format!(
                    "maxpool2 needs even spatial dims, got {}x{}",
                    input.h, input.w
                )));
            }
            Ok(Shape::new(input.c, input.h / 2, input.w / 2))
        }
        LayerKind::Dense { units } => {
            if units == 0 {
                return Err(Error::contract("dense layer needs at least one unit"));
            }
            Ok(Shape::vector(units))
        }
        LayerKind::Relu => Ok(input),
        LayerKind::Softmax => {
            if input.h != 1 || input.w != 1 {
                return Err(Error::contract("softmax needs a vector input"));
            }
            Ok(input)
        }
    }
}

pub struct NetworkSpecBuilder {
    input: Shape,
    current: Shape,
    layers: Vec<LayerSpec>,
    error: Option<Error>,
}

impl NetworkSpecBuilder {
    fn push(mut self, kind: LayerKind) -> Self {
        if self.error.is_some() {
            return self;
        }
        match infer_output(kind, self.current) {
            Ok(output) => {
                self.layers.push(LayerSpec {
                    kind,
                    input: self.current,
                    output,
                });
                self.current = output;
            }
            Err(e) => self.error = Some(e),
        }
        self
    }

    pub fn conv3x3(self, filters: usize) -> Self {
        self.push(LayerKind::Conv3x3 { filters })
    }

    pub fn maxpool2(self) -> Self {
        self.push(LayerKind::MaxPool2)
    }

    pub fn dense(self, units: usize) -> Self {
        self.push(LayerKind::Dense { units })
    }

    pub fn relu(self) -> Self {
        self.push(LayerKind::Relu)
    }

    pub fn softmax(self) -> Self {
        self.push(LayerKind::Softmax)
    }

    pub fn build(self) -> Result<NetworkSpec> {
        if let Some(e) = self.error {
            return Err(e);
        }
        let spec = NetworkSpec {
            input: self.input,
            layers: self.layers,
            frozen_prefix: 0,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Parameters of one conv or dense layer. Kernels are row-major in the order
/// given by `kernel_shape` (`[filters, in_c, 3, 3]` or `[units, inputs]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    /// Index of the owning layer in [`NetworkSpec::layers`].
    pub layer: usize,
    pub kernel_shape: Vec<usize>,
    pub kernel: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.kernel.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bit-level equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &ParamBlock) -> bool {
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        self.layer == other.layer
            && self.kernel_shape == other.kernel_shape
            && bits(&self.kernel) == bits(&other.kernel)
            && bits(&self.bias) == bits(&other.bias)
    }
}

/// One [`ParamBlock`] per parameterized layer, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub blocks: Vec<ParamBlock>,
}

impl Weights {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        let blocks = spec
            .layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| {
                l.param_shapes().map(|(kshape, nb)| ParamBlock {
                    layer: i,
                    kernel: vec![0.0; kshape.iter().product()],
                    kernel_shape: kshape,
                    bias: vec![0.0; nb],
                })
            })
            .collect();
        Weights { blocks }
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(ParamBlock::len).sum()
    }

    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        let indices = spec.param_layer_indices();
        if indices.len() != self.blocks.len() {
            return Err(Error::contract(format!(
                "network has {} parameterized layers, weights have {}",
                indices.len(),
                self.blocks.len()
            )));
        }
        for (block, &li) in self.blocks.iter().zip(&indices) {
            let (kshape, nb) = spec.layers[li].param_shapes().expect("parameterized");
            if block.layer != li
                || block.kernel_shape != kshape
                || block.kernel.len() != kshape.iter().product::<usize>()
                || block.bias.len() != nb
            {
                return Err(Error::contract(format!("weights for layer {li} have the wrong shape")));
            }
            if !block.kernel.iter().chain(&block.bias).all(|v| v.is_finite()) {
                return Err(Error::contract(format!("weights for layer {li} are not finite")));
            }
        }
        Ok(())
    }

    pub fn bit_eq(&self, other: &Weights) -> bool {
        self.blocks.len() == other.blocks.len()
            && self.blocks.iter().zip(&other.blocks).all(|(a, b)| a.bit_eq(b))
    }

    /// Flat iterator over every parameter, kernels before biases per layer.
    pub fn iter(&self) -> impl Iterator<Item = &f32> {
        self.blocks.iter().flat_map(|b| b.kernel.iter().chain(&b.bias))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f32> {
        self.blocks
            .iter_mut()
            .flat_map(|b| b.kernel.iter_mut().chain(b.bias.iter_mut()))
    }
}
