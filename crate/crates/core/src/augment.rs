//! Appearance filters and small affine transforms that expand every training
//! image into 30 variants (5 filters × 6 transforms, filter first).
//!
//! Borders are handled by edge replication in both stages.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, SampleRecord, SampleSource};
use crate::error::{Error, Result};
use crate::image::{Image, IMAGE_CHANNELS, IMAGE_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FilterSpec {
    /// Anti-aliased circular averaging filter.
    Disk { radius: f32 },
    /// Box filter of `size × size` pixels (odd).
    Average { size: usize },
    Gaussian { sigma: f32 },
    /// `x + amount · (x − gaussian(x))`.
    Unsharp { amount: f32, sigma: f32 },
    /// Averages along a line of `length` pixels at `angle_deg` (counter-clockwise).
    Motion { length: f32, angle_deg: f32 },
}

/// Odd-sized, row-major convolution kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub size: usize,
    pub weights: Vec<f32>,
}

impl Kernel {
    pub fn sum(&self) -> f64 {
        self.weights.iter().map(|&w| w as f64).sum()
    }

    fn normalized(size: usize, raw: Vec<f64>) -> Kernel {
        let total: f64 = raw.iter().sum();
        Kernel {
            size,
            weights: raw.iter().map(|v| (v / total) as f32).collect(),
        }
    }
}

fn gaussian_kernel(sigma: f32) -> Kernel {
    let half = (2.0 * sigma).ceil().max(1.0) as isize;
    let size = (2 * half + 1) as usize;
    let s2 = 2.0 * (sigma as f64).powi(2);
    let raw = (-half..=half)
        .flat_map(|y| (-half..=half).map(move |x| (-((x * x + y * y) as f64) / s2).exp()))
        .collect();
    Kernel::normalized(size, raw)
}

impl FilterSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            FilterSpec::Disk { radius } => radius > 0.0 && radius.is_finite(),
            FilterSpec::Average { size } => size >= 1 && size % 2 == 1,
            FilterSpec::Gaussian { sigma } => sigma > 0.0 && sigma.is_finite(),
            FilterSpec::Unsharp { amount, sigma } => {
                amount >= 0.0 && amount.is_finite() && sigma > 0.0 && sigma.is_finite()
            }
            FilterSpec::Motion { length, angle_deg } => length >= 1.0 && length.is_finite() && angle_deg.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid filter parameters {self:?}")))
        }
    }

    pub fn kernel(&self) -> Result<Kernel> {
        self.validate()?;
        Ok(match *self {
            FilterSpec::Disk { radius } => {
                // 8×8 supersampling of each pixel's coverage by the disc.
                let half = radius.ceil() as isize;
                let size = (2 * half + 1) as usize;
                let r2 = (radius as f64).powi(2);
                let sub = 8;
                let mut raw = Vec::with_capacity(size * size);
                for y in -half..=half {
                    for x in -half..=half {
                        let mut inside = 0;
                        for sy in 0..sub {
                            for sx in 0..sub {
                                let px = x as f64 - 0.5 + (sx as f64 + 0.5) / sub as f64;
                                let py = y as f64 - 0.5 + (sy as f64 + 0.5) / sub as f64;
                                if px * px + py * py <= r2 {
                                    inside += 1;
                                }
                            }
                        }
                        raw.push(inside as f64);
                    }
                }
                Kernel::normalized(size, raw)
            }
            FilterSpec::Average { size } => Kernel::normalized(size, vec![1.0; size * size]),
            FilterSpec::Gaussian { sigma } => gaussian_kernel(sigma),
            FilterSpec::Unsharp { amount, sigma } => {
                let g = gaussian_kernel(sigma);
                let center = g.size * g.size / 2;
                let weights = g
                    .weights
                    .iter()
                    .enumerate()
                    .map(|(i, w)| {
                        let delta = if i == center { 1.0 } else { 0.0 };
                        ((1.0 + amount as f64) * delta - amount as f64 * *w as f64) as f32
                    })
                    .collect();
                Kernel { size: g.size, weights }
            }
            FilterSpec::Motion { length, angle_deg } => {
                let half = ((length - 1.0) / 2.0).ceil().max(0.0) as isize;
                let size = (2 * half + 1) as usize;
                let (sin, cos) = (angle_deg as f64).to_radians().sin_cos();
                let mut raw = vec![0.0f64; size * size];
                // Splat evenly spaced samples along the segment bilinearly.
                let samples = (length.ceil() as usize * 8).max(2);
                for i in 0..samples {
                    let t = (i as f64 / (samples - 1) as f64 - 0.5) * (length as f64 - 1.0);
                    let (x, y) = (t * cos + half as f64, -t * sin + half as f64);
                    let (x0, y0) = (x.floor(), y.floor());
                    let (fx, fy) = (x - x0, y - y0);
                    for (dx, dy, wgt) in [
                        (0, 0, (1.0 - fx) * (1.0 - fy)),
                        (1, 0, fx * (1.0 - fy)),
                        (0, 1, (1.0 - fx) * fy),
                        (1, 1, fx * fy),
                    ] {
                        let (xi, yi) = (x0 as isize + dx, y0 as isize + dy);
                        if xi >= 0 && yi >= 0 && (xi as usize) < size && (yi as usize) < size && wgt > 0.0 {
                            raw[yi as usize * size + xi as usize] += wgt;
                        }
                    }
                }
                Kernel::normalized(size, raw)
            }
        })
    }
}

#[inline]
fn clamp_index(v: isize) -> usize {
    v.clamp(0, IMAGE_SIZE as isize - 1) as usize
}

/// Convolves every channel with the filter's kernel; result clamped to `[0, 1]`.
pub fn apply_filter(image: &Image, filter: &FilterSpec) -> Result<Image> {
    let k = filter.kernel()?;
    let half = (k.size / 2) as isize;
    Ok(Image::from_fn(|c, y, x| {
        let mut acc = 0.0f64;
        for ky in 0..k.size {
            let sy = clamp_index(y as isize + ky as isize - half);
            for kx in 0..k.size {
                let sx = clamp_index(x as isize + kx as isize - half);
                acc += k.weights[ky * k.size + kx] as f64 * image.get(c, sy, sx) as f64;
            }
        }
        acc as f32
    }))
}

/// A 2×3 matrix `[a b tx; c d ty]` acting on pixel coordinates relative to the
/// image center: `dst = L · (src − center) + center + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineSpec {
    pub matrix: [[f32; 3]; 2],
}

impl AffineSpec {
    pub const IDENTITY: AffineSpec = AffineSpec {
        matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
    };

    pub const MIRROR: AffineSpec = AffineSpec {
        matrix: [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
    };

    pub fn rotation(deg: f32) -> Self {
        let (s, c) = deg.to_radians().sin_cos();
        AffineSpec {
            matrix: [[c, -s, 0.0], [s, c, 0.0]],
        }
    }

    pub fn scale(factor: f32) -> Self {
        AffineSpec {
            matrix: [[factor, 0.0, 0.0], [0.0, factor, 0.0]],
        }
    }

    pub fn translation(dx: f32, dy: f32) -> Self {
        AffineSpec {
            matrix: [[1.0, 0.0, dx], [0.0, 1.0, dy]],
        }
    }

    pub fn det(&self) -> f64 {
        let m = &self.matrix;
        m[0][0] as f64 * m[1][1] as f64 - m[0][1] as f64 * m[1][0] as f64
    }
}

/// Inverse-maps each destination pixel and samples the source bilinearly.
pub fn apply_affine(image: &Image, affine: &AffineSpec) -> Result<Image> {
    let det = affine.det();
    if !(det.abs() > 1e-6) {
        return Err(Error::config(format!("affine transform is singular (det {det})")));
    }
    let m = affine.matrix.map(|row| row.map(|v| v as f64));
    let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
    let center = (IMAGE_SIZE as f64 - 1.0) / 2.0;
    let n = IMAGE_SIZE * IMAGE_SIZE;

    // Source coordinates depend only on the pixel, not the channel.
    let mut coords = Vec::with_capacity(n);
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let dx = x as f64 - center - m[0][2];
            let dy = y as f64 - center - m[1][2];
            coords.push((
                inv[0][0] * dx + inv[0][1] * dy + center,
                inv[1][0] * dx + inv[1][1] * dy + center,
            ));
        }
    }
    let mut out = Vec::with_capacity(n * IMAGE_CHANNELS);
    for c in 0..IMAGE_CHANNELS {
        for &(sx, sy) in &coords {
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let px = |xx: isize, yy: isize| image.get(c, clamp_index(yy), clamp_index(xx)) as f64;
            let v = if fx == 0.0 && fy == 0.0 {
                px(x0, y0)
            } else {
                (1.0 - fy) * ((1.0 - fx) * px(x0, y0) + fx * px(x0 + 1, y0))
                    + fy * ((1.0 - fx) * px(x0, y0 + 1) + fx * px(x0 + 1, y0 + 1))
            };
            out.push(v as f32);
        }
    }
    Image::from_planar_clamped(out)
}

/// The filter bank and transform set used by [`augment_image`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub filters: Vec<FilterSpec>,
    pub affines: Vec<AffineSpec>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            filters: vec![
                FilterSpec::Disk { radius: 2.0 },
                FilterSpec::Average { size: 3 },
                FilterSpec::Gaussian { sigma: 1.0 },
                FilterSpec::Unsharp { amount: 0.8, sigma: 1.0 },
                FilterSpec::Motion { length: 5.0, angle_deg: 0.0 },
            ],
            affines: vec![
                AffineSpec::IDENTITY,
                AffineSpec::MIRROR,
                AffineSpec::rotation(5.0),
                AffineSpec::rotation(-5.0),
                AffineSpec::scale(1.05),
                AffineSpec::translation(2.0, 2.0),
            ],
        }
    }
}

impl AugmentConfig {
    pub fn variants_per_image(&self) -> usize {
        self.filters.len() * self.affines.len()
    }

    pub fn validate(&self) -> Result<()> {
        for f in &self.filters {
            f.validate()?;
        }
        for a in &self.affines {
            if !(a.det().abs() > 1e-6) {
                return Err(Error::config("affine transform is singular"));
            }
        }
        Ok(())
    }
}

/// Every (filter, transform) pair of the default bank: 30 images.
pub fn augment_image(image: &Image) -> Vec<Image> {
    augment_with(image, &AugmentConfig::default()).expect("default bank is valid")
}

/// Filter-major order: all transforms of filter 0, then filter 1, ...
pub fn augment_with(image: &Image, config: &AugmentConfig) -> Result<Vec<Image>> {
    config.validate()?;
    let mut out = Vec::with_capacity(config.variants_per_image());
    for f in &config.filters {
        let filtered = apply_filter(image, f)?;
        for a in &config.affines {
            out.push(apply_affine(&filtered, a)?);
        }
    }
    Ok(out)
}

/// Augments every record of `m` (images resolved against `src_root`) and
/// writes the variants as PNGs under `out_root/aug/`. The returned manifest,
/// id `"{id}-aug"`, lists them with their source labels, paths relative to
/// `out_root`.
pub fn augment_manifest(
    m: &DatasetManifest,
    src_root: &Path,
    out_root: &Path,
    config: &AugmentConfig,
) -> Result<DatasetManifest> {
    config.validate()?;
    let dir = out_root.join("aug");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut records = Vec::with_capacity(m.len() * config.variants_per_image());
    for (i, rec) in m.records().iter().enumerate() {
        let image = Image::load(&src_root.join(&rec.path))?;
        for (k, variant) in augment_with(&image, config)?.into_iter().enumerate() {
            let (f, a) = (k / config.affines.len(), k % config.affines.len());
            let rel = format!("aug/{i:06}-f{f}-a{a}.png");
            variant.save_png(&out_root.join(&rel))?;
            records.push(SampleRecord {
                path: rel,
                source: SampleSource::Seed,
                user_id: None,
                confidence: None,
                ..rec.clone()
            });
        }
    }
    DatasetManifest::from_records(format!("{}-aug", m.id()), records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(|_, _, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn smoothing_kernels_sum_to_one_and_are_odd() {
        for f in AugmentConfig::default().filters {
            let k = f.kernel().unwrap();
            assert_eq!(k.size % 2, 1, "{f:?}");
            assert!((k.sum() - 1.0).abs() < 1e-6, "{f:?} sums to {}", k.sum());
        }
        let g = FilterSpec::Gaussian { sigma: 1.0 }.kernel().unwrap();
        assert_eq!(g.size, 5);
    }

    #[test]
    fn average_is_fixed_point_on_constant() {
        let img = Image::filled(0.37);
        let out = apply_filter(&img, &FilterSpec::Average { size: 3 }).unwrap();
        for (a, b) in out.pixels().iter().zip(img.pixels()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn average_matches_neighborhood_mean() {
        let img = random_image(1);
        let out = apply_filter(&img, &FilterSpec::Average { size: 3 }).unwrap();
        for c in 0..3 {
            for y in 1..63 {
                for x in 1..63 {
                    let mut s = 0.0f64;
                    for dy in 0..3 {
                        for dx in 0..3 {
                            s += img.get(c, y + dy - 1, x + dx - 1) as f64;
                        }
                    }
                    assert!((out.get(c, y, x) as f64 - s / 9.0).abs() < 1e-6);
                }
            }
        }
        // Corner uses replicated edges.
        let corner = (4.0 * img.get(0, 0, 0) as f64
            + 2.0 * img.get(0, 0, 1) as f64
            + 2.0 * img.get(0, 1, 0) as f64
            + img.get(0, 1, 1) as f64)
            / 9.0;
        assert!((out.get(0, 0, 0) as f64 - corner).abs() < 1e-6);
    }

    #[test]
    fn bad_filter_parameters() {
        for f in [
            FilterSpec::Disk { radius: 0.0 },
            FilterSpec::Average { size: 2 },
            FilterSpec::Gaussian { sigma: -1.0 },
            FilterSpec::Motion { length: 0.0, angle_deg: 0.0 },
        ] {
            assert!(matches!(apply_filter(&Image::filled(0.5), &f), Err(Error::Config(_))));
        }
    }

    #[test]
    fn affine_identity_and_mirror() {
        let img = random_image(2);
        assert_eq!(apply_affine(&img, &AffineSpec::IDENTITY).unwrap(), img);
        let once = apply_affine(&img, &AffineSpec::MIRROR).unwrap();
        assert_eq!(once.get(1, 5, 0), img.get(1, 5, 63));
        let twice = apply_affine(&once, &AffineSpec::MIRROR).unwrap();
        for (a, b) in twice.pixels().iter().zip(img.pixels()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(AffineSpec::MIRROR.det(), -1.0);
    }

    #[test]
    fn translation_moves_delta_by_index_shift() {
        let delta = Image::from_fn(|_, y, x| if (y, x) == (20, 30) { 1.0 } else { 0.0 });
        let out = apply_affine(&delta, &AffineSpec::translation(2.0, 2.0)).unwrap();
        for c in 0..3 {
            for y in 0..64 {
                for x in 0..64 {
                    let expected = if y >= 2 && x >= 2 { delta.get(c, y - 2, x - 2) } else { out.get(c, y, x) };
                    assert_eq!(out.get(c, y, x), expected);
                }
            }
        }
        assert_eq!(out.get(0, 22, 32), 1.0);
    }

    #[test]
    fn singular_affine_is_rejected() {
        let a = AffineSpec {
            matrix: [[1.0, 2.0, 0.0], [0.5, 1.0, 0.0]],
        };
        assert!(matches!(apply_affine(&Image::filled(0.1), &a), Err(Error::Config(_))));
    }

    #[test]
    fn thirty_variants_in_range() {
        let out = augment_image(&random_image(3));
        assert_eq!(out.len(), 30);
        assert!(out.iter().all(|i| i.pixels().iter().all(|v| (0.0..=1.0).contains(v))));
    }
}
