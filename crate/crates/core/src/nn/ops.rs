//! Layer primitives and their backward passes.
//!
//! Feature maps are planar `[c][h][w]` buffers. Convolution lowers to a GEMM
//! over an im2col buffer.

use crate::error::{Error, Result};
use crate::label::{ExpressionLabel, NUM_CLASSES};

use super::spec::Shape;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub shape: Shape,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::contract(format!(
                "feature map {shape:?} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(FeatureMap { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        FeatureMap {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        FeatureMap {
            shape: Shape::vector(data.len()),
            data,
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.shape.h + y) * self.shape.w + x]
    }
}

/// Seven class probabilities, non-negative and summing to one.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct ProbabilityVector(pub [f64; NUM_CLASSES]);

impl ProbabilityVector {
    pub fn uniform() -> Self {
        ProbabilityVector([1.0 / NUM_CLASSES as f64; NUM_CLASSES])
    }

    pub fn get(&self, label: ExpressionLabel) -> f64 {
        self.0[label.index()]
    }

    /// Most probable class; ties go to the lowest index.
    pub fn argmax(&self) -> ExpressionLabel {
        let mut best = 0;
        for i in 1..NUM_CLASSES {
            if self.0[i] > self.0[best] {
                best = i;
            }
        }
        ExpressionLabel::from_index(best).expect("index < 7")
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64; NUM_CLASSES]) -> Result<ProbabilityVector> {
    if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::contract(format!("non-finite logit {bad}")));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = [0.0; NUM_CLASSES];
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    for o in &mut out {
        *o /= sum;
    }
    Ok(ProbabilityVector(out))
}

fn im2col(input: &FeatureMap, cols: &mut Vec<f64>) {
    let Shape { c, h, w } = input.shape;
    let hw = h * w;
    cols.clear();
    cols.resize(c * 9 * hw, 0.0);
    for ci in 0..c {
        let plane = &input.data[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    // dst[x] = src[x + kx - 1] where in range
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
}

fn col2im_add(dcols: &[f64], shape: Shape, out: &mut [f64]) {
    let Shape { c, h, w } = shape;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &dcols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..][..w];
                    let src = &row[y * w..][..w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
}

/// `c = a · b` (row-major, `a` is m×k, `b` is k×n) with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: every index touched by dgemm is bounded by the strides and
    // dimensions above, which callers derive from the slice lengths.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_conv(input: &FeatureMap, kernels: &[f64], bias: &[f64]) -> Result<usize> {
    let filters = bias.len();
    if input.shape.h == 0 || input.shape.w == 0 {
        return Err(Error::contract("conv3x3 input has empty spatial dims"));
    }
    if filters == 0 || kernels.len() != filters * input.shape.c * 9 {
        return Err(Error::contract(format!(
            "conv3x3 kernels ({} values) do not match {} filters over {} channels",
            kernels.len(),
            filters,
            input.shape.c
        )));
    }
    Ok(filters)
}

/// 3×3 convolution, stride 1, zero same-padding. `kernels` is
/// `[filters][in_c][3][3]`; the filter count is `bias.len()`.
pub fn conv3x3_forward(input: &FeatureMap, kernels: &[f64], bias: &[f64]) -> Result<FeatureMap> {
    let mut cols = Vec::new();
    conv3x3_forward_with(input, kernels, bias, &mut cols)
}

pub(crate) fn conv3x3_forward_with(
    input: &FeatureMap,
    kernels: &[f64],
    bias: &[f64],
    cols: &mut Vec<f64>,
) -> Result<FeatureMap> {
    let filters = check_conv(input, kernels, bias)?;
    let Shape { c, h, w } = input.shape;
    let hw = h * w;
    im2col(input, cols);
    let mut out = vec![0.0f64; filters * hw];
    for (f, b) in bias.iter().enumerate() {
        out[f * hw..(f + 1) * hw].fill(*b);
    }
    gemm(filters, c * 9, hw, kernels, (c * 9, 1), cols, (hw, 1), 1.0, &mut out);
    Ok(FeatureMap {
        shape: Shape::new(filters, h, w),
        data: out,
    })
}

/// Gradients of a conv layer. Adds into `dkernels`/`dbias`; returns the input
/// gradient only when `need_input` is set.
pub(crate) fn conv3x3_backward(
    input: &FeatureMap,
    kernels: &[f64],
    dout: &[f64],
    dkernels: &mut [f64],
    dbias: &mut [f64],
    need_input: bool,
    cols: &mut Vec<f64>,
) -> Option<FeatureMap> {
    let Shape { c, h, w } = input.shape;
    let hw = h * w;
    let filters = dbias.len();
    im2col(input, cols);
    for (f, db) in dbias.iter_mut().enumerate() {
        *db += dout[f * hw..(f + 1) * hw].iter().sum::<f64>();
    }
    // dK[f,k] += Σp dOut[f,p]·cols[k,p]
    gemm(filters, hw, c * 9, dout, (hw, 1), cols, (1, hw), 1.0, dkernels);
    if !need_input {
        return None;
    }
    // dCols[k,p] = Σf K[f,k]·dOut[f,p]
    let mut dcols = vec![0.0f64; c * 9 * hw];
    gemm(c * 9, filters, hw, kernels, (1, c * 9), dout, (hw, 1), 0.0, &mut dcols);
    let mut dinput = vec![0.0f64; c * hw];
    col2im_add(&dcols, input.shape, &mut dinput);
    Some(FeatureMap {
        shape: input.shape,
        data: dinput,
    })
}

/// 2×2 max pooling with stride 2.
pub fn maxpool2_forward(input: &FeatureMap) -> Result<FeatureMap> {
    let Shape { c, h, w } = input.shape;
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::contract(format!("maxpool2 needs even spatial dims, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let m = input
                    .at(ci, 2 * y, 2 * x)
                    .max(input.at(ci, 2 * y, 2 * x + 1))
                    .max(input.at(ci, 2 * y + 1, 2 * x))
                    .max(input.at(ci, 2 * y + 1, 2 * x + 1));
                out.push(m);
            }
        }
    }
    Ok(FeatureMap {
        shape: Shape::new(c, oh, ow),
        data: out,
    })
}

/// Routes each output gradient to the first maximal cell of its block.
pub(crate) fn maxpool2_backward(input: &FeatureMap, dout: &[f64]) -> FeatureMap {
    let Shape { c, h, w } = input.shape;
    let (oh, ow) = (h / 2, w / 2);
    let mut din = vec![0.0f64; input.data.len()];
    for ci in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let cells = [
                    (2 * y, 2 * x),
                    (2 * y, 2 * x + 1),
                    (2 * y + 1, 2 * x),
                    (2 * y + 1, 2 * x + 1),
                ];
                let mut best = cells[0];
                for &cell in &cells[1..] {
                    if input.at(ci, cell.0, cell.1) > input.at(ci, best.0, best.1) {
                        best = cell;
                    }
                }
                din[(ci * h + best.0) * w + best.1] += dout[(ci * oh + y) * ow + x];
            }
        }
    }
    FeatureMap {
        shape: input.shape,
        data: din,
    }
}

/// `matrix · input + bias`, with `matrix` row-major `[bias.len()][input.len()]`.
pub fn dense_forward(input: &[f64], matrix: &[f64], bias: &[f64]) -> Result<Vec<f64>> {
    let n_in = input.len();
    if matrix.len() != bias.len() * n_in {
        return Err(Error::contract(format!(
            "dense matrix has {} values, expected {}x{}",
            matrix.len(),
            bias.len(),
            n_in
        )));
    }
    Ok(matrix
        .chunks_exact(n_in.max(1))
        .zip(bias)
        .map(|(row, b)| row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b)
        .collect())
}

pub(crate) fn dense_backward(
    input: &[f64],
    matrix: &[f64],
    dout: &[f64],
    dmatrix: &mut [f64],
    dbias: &mut [f64],
    need_input: bool,
) -> Option<Vec<f64>> {
    let n_in = input.len();
    for (u, &g) in dout.iter().enumerate() {
        dbias[u] += g;
        if g != 0.0 {
            for (dw, x) in dmatrix[u * n_in..(u + 1) * n_in].iter_mut().zip(input) {
                *dw += g * x;
            }
        }
    }
    need_input.then(|| {
        let mut din = vec![0.0f64; n_in];
        for (u, &g) in dout.iter().enumerate() {
            if g != 0.0 {
                for (d, w) in din.iter_mut().zip(&matrix[u * n_in..(u + 1) * n_in]) {
                    *d += g * w;
                }
            }
        }
        din
    })
}

pub fn relu_forward(input: &FeatureMap) -> FeatureMap {
    FeatureMap {
        shape: input.shape,
        data: input.data.iter().map(|v| v.max(0.0)).collect(),
    }
}

pub(crate) fn relu_backward(input: &FeatureMap, dout: &[f64]) -> FeatureMap {
    FeatureMap {
        shape: input.shape,
        data: input
            .data
            .iter()
            .zip(dout)
            .map(|(x, g)| if *x > 0.0 { *g } else { 0.0 })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, shape: Shape) -> FeatureMap {
        let data = (0..shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureMap::new(shape, data).unwrap()
    }

    /// Straight nested-loop convolution with zero padding, in f64.
    fn conv_oracle(input: &FeatureMap, kernels: &[f64], bias: &[f64]) -> Vec<f64> {
        let Shape { c, h, w } = input.shape;
        let mut out = Vec::new();
        for (f, b) in bias.iter().enumerate() {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut acc = *b;
                    for ci in 0..c {
                        for ky in -1..=1isize {
                            for kx in -1..=1isize {
                                let (sy, sx) = (y + ky, x + kx);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                let k = kernels[((f * c + ci) * 3 + (ky + 1) as usize) * 3 + (kx + 1) as usize];
                                acc += k * input.at(ci, sy as usize, sx as usize);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
        out
    }

    #[test]
    fn conv_zero_kernels_give_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = random_map(&mut rng, Shape::new(2, 5, 5));
        let out = conv3x3_forward(&input, &[0.0; 18], &[0.5]).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn conv_center_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = random_map(&mut rng, Shape::new(1, 4, 4));
        let mut k = [0.0f64; 9];
        k[4] = 1.0;
        let out = conv3x3_forward(&input, &k, &[0.0]).unwrap();
        assert_eq!(out.data, input.data);
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = random_map(&mut rng, Shape::new(2, 8, 8));
        let kernels: Vec<f64> = (0..3 * 2 * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bias: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = conv3x3_forward(&input, &kernels, &bias).unwrap();
        assert_eq!(out.shape, Shape::new(3, 8, 8));
        for (a, b) in out.data.iter().zip(conv_oracle(&input, &kernels, &bias)) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn conv_shape_mismatch() {
        let input = FeatureMap::zeros(Shape::new(2, 4, 4));
        assert!(matches!(conv3x3_forward(&input, &[0.0; 9], &[0.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn pool_constant_and_dims() {
        let input = FeatureMap::new(Shape::new(1, 64, 64), vec![0.25; 64 * 64]).unwrap();
        let out = maxpool2_forward(&input).unwrap();
        assert_eq!(out.shape, Shape::new(1, 32, 32));
        assert!(out.data.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn pool_matches_block_max_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let input = random_map(&mut rng, Shape::new(1, 6, 6));
        let out = maxpool2_forward(&input).unwrap();
        for by in 0..3 {
            for bx in 0..3 {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(input.data[(2 * by + dy) * 6 + 2 * bx + dx]);
                    }
                }
                assert_eq!(out.data[by * 3 + bx], m);
            }
        }
    }

    #[test]
    fn pool_odd_dims_rejected() {
        let input = FeatureMap::zeros(Shape::new(1, 5, 4));
        assert!(matches!(maxpool2_forward(&input), Err(Error::Contract(_))));
    }

    #[test]
    fn dense_identity_zero_and_oracle() {
        let x = [1.0, -2.0, 3.0];
        let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(dense_forward(&x, &eye, &[0.0; 3]).unwrap(), x);
        assert_eq!(dense_forward(&x, &[0.0; 6], &[4.0, 5.0]).unwrap(), vec![4.0, 5.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = dense_forward(&x, &m, &b).unwrap();
        for u in 0..5 {
            let dot: f64 = (0..10).map(|i| m[u * 10 + i] * x[i]).sum::<f64>() + b[u];
            assert!((out[u] - dot).abs() < 1e-6);
        }
        assert!(dense_forward(&x, &m[..49], &b).is_err());
    }

    #[test]
    fn softmax_cases() {
        let p = softmax(&[0.3; 7]).unwrap();
        assert!(p.0.iter().all(|v| (v - 1.0 / 7.0).abs() < 1e-15));

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let logits: [f64; 7] = std::array::from_fn(|_| rng.random_range(-5.0..5.0));
        let p = softmax(&logits).unwrap();
        let denom: f64 = logits.iter().map(|l| l.exp()).sum();
        for (pi, l) in p.0.iter().zip(&logits) {
            assert!((pi - l.exp() / denom).abs() < 1e-9);
        }
        let shifted: [f64; 7] = std::array::from_fn(|i| logits[i] + 123.0);
        let q = softmax(&shifted).unwrap();
        assert_eq!(p.argmax(), q.argmax());
        for (a, b) in p.0.iter().zip(&q.0) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(softmax(&[f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        let p = ProbabilityVector([0.1, 0.3, 0.3, 0.1, 0.1, 0.05, 0.05]);
        assert_eq!(p.argmax(), ExpressionLabel::Disgust);
    }
}
