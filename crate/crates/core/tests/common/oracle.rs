//! Independent f64 reference network used as a test oracle. It shares no code
//! with the library's forward/backward path: plain nested loops only.

use exloop_core::nn::{LayerKind, NetworkSpec, Shape, Weights};
use exloop_core::ExpressionLabel;

/// Parameters flattened in layer order, kernel then bias.
pub fn flatten(weights: &Weights) -> Vec<f64> {
    weights.iter().map(|v| *v as f64).collect()
}

pub fn forward_logits(spec: &NetworkSpec, params: &[f64], input: &[f64]) -> Vec<f64> {
    let mut x = input.to_vec();
    let mut shape = spec.input;
    let mut offset = 0;
    for layer in &spec.layers {
        match layer.kind {
            LayerKind::Conv3x3 { filters } => {
                let Shape { c, h, w } = shape;
                let k = &params[offset..offset + filters * c * 9];
                let b = &params[offset + filters * c * 9..offset + filters * c * 9 + filters];
                offset += filters * c * 9 + filters;
                let mut y = vec![0.0; filters * h * w];
                for f in 0..filters {
                    for yy in 0..h as isize {
                        for xx in 0..w as isize {
                            let mut acc = b[f];
                            for ci in 0..c {
                                for dy in 0..3isize {
                                    for dx in 0..3isize {
                                        let sy = yy + dy - 1;
                                        let sx = xx + dx - 1;
                                        if sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize {
                                            acc += k[((f * c + ci) * 3 + dy as usize) * 3 + dx as usize]
                                                * x[(ci * h + sy as usize) * w + sx as usize];
                                        }
                                    }
                                }
                            }
                            y[(f * h + yy as usize) * w + xx as usize] = acc;
                        }
                    }
                }
                x = y;
            }
            LayerKind::MaxPool2 => {
                let Shape { c, h, w } = shape;
                let mut y = Vec::new();
                for ci in 0..c {
                    for yy in 0..h / 2 {
                        for xx in 0..w / 2 {
                            let mut m = f64::NEG_INFINITY;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    m = m.max(x[(ci * h + 2 * yy + dy) * w + 2 * xx + dx]);
                                }
                            }
                            y.push(m);
                        }
                    }
                }
                x = y;
            }
            LayerKind::Dense { units } => {
                let n = x.len();
                let m = &params[offset..offset + units * n];
                let b = &params[offset + units * n..offset + units * n + units];
                offset += units * n + units;
                x = (0..units)
                    .map(|u| b[u] + (0..n).map(|i| m[u * n + i] * x[i]).sum::<f64>())
                    .collect();
            }
            LayerKind::Relu => x.iter_mut().for_each(|v| *v = v.max(0.0)),
            LayerKind::Softmax => {}
        }
        shape = layer.output;
    }
    x
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn batch_loss(spec: &NetworkSpec, params: &[f64], batch: &[(Vec<f64>, ExpressionLabel)]) -> f64 {
    batch
        .iter()
        .map(|(x, y)| -softmax(&forward_logits(spec, params, x))[y.index()].ln())
        .sum::<f64>()
        / batch.len() as f64
}

/// Central finite differences of the mean batch loss.
pub fn numeric_grads(
    spec: &NetworkSpec,
    params: &[f64],
    batch: &[(Vec<f64>, ExpressionLabel)],
    step: f64,
) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + step;
            let up = batch_loss(spec, &p, batch);
            p[i] = orig - step;
            let down = batch_loss(spec, &p, batch);
            p[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Smallest distance of any ReLU pre-activation from zero, or of any pooled
/// maximum from its runner-up. Finite differences are only meaningful when
/// this margin is well above the step size.
pub fn kink_margin(spec: &NetworkSpec, params: &[f64], input: &[f64]) -> f64 {
    let mut margin = f64::INFINITY;
    let mut x = input.to_vec();
    for (i, layer) in spec.layers.iter().enumerate() {
        let sub = NetworkSpec {
            input: layer.input,
            layers: vec![*layer],
            frozen_prefix: 0,
        };
        match layer.kind {
            LayerKind::Relu => {
                margin = x.iter().fold(margin, |m, v| m.min(v.abs()));
            }
            LayerKind::MaxPool2 => {
                let Shape { c, h, w } = layer.input;
                for ci in 0..c {
                    for yy in 0..h / 2 {
                        for xx in 0..w / 2 {
                            let mut v: Vec<f64> = (0..4)
                                .map(|k| x[(ci * h + 2 * yy + k / 2) * w + 2 * xx + k % 2])
                                .collect();
                            v.sort_by(|a, b| b.partial_cmp(a).unwrap());
                            // All-zero blocks come from dead ReLUs, whose own margin covers them.
                            if v[0] != 0.0 || v[1] != 0.0 {
                                margin = margin.min(v[0] - v[1]);
                            }
                        }
                    }
                }
            }
            _ => {}
        }
        let offset: usize = spec.layers[..i].iter().map(|l| l.param_count()).sum();
        x = forward_logits(&sub, &params[offset..offset + layer.param_count()], &x);
    }
    margin
}
