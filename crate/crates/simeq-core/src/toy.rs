//! Synthetic shape dataset: surface-sampled primitives in a canonical frame,
//! with partial views cut by a crop plane. Deterministic in the seed; sample
//! `i` draws from its own counter-derived stream, so pair order never
//! matters.

use crate::extract::farthest_point_sample;
use crate::geometry::PointCloud;
use crate::Real;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("keep_fraction must lie in (0, 1], got {0}")]
    BadKeepFraction(f64),
    #[error("crop direction must be non-zero")]
    ZeroDirection,
    #[error("no shape specs given")]
    NoShapes,
    #[error("n_in {n_in} exceeds points kept by the crop ({kept}); lower n_in or raise keep_fraction")]
    TooFewKept { n_in: usize, kept: usize },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum ShapeFamily {
    /// Spherical cap of the given radius; `cap` is the kept fraction of the
    /// full sphere by z-quantile (1.0 = full sphere).
    SphereCap { radius: f64, cap: f64 },
    Box { half_extents: [f64; 3] },
    Cylinder { radius: f64, half_height: f64 },
    TwoBoxes {
        half_a: [f64; 3],
        half_b: [f64; 3],
        offset_b: [f64; 3],
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ViewCrop {
    /// View direction; points with the largest projection onto it are kept.
    pub direction: [f64; 3],
    pub keep_fraction: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ToyShapeSpec {
    #[serde(flatten)]
    pub family: ShapeFamily,
    pub crop: ViewCrop,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ToyDatasetConfig {
    pub schema_version: u32,
    pub shapes: Vec<ToyShapeSpec>,
    pub n_in: usize,
    pub n_out: usize,
}

#[derive(Clone, Debug)]
pub struct DatasetPair<F> {
    pub partial: PointCloud<F>,
    pub gt: PointCloud<F>,
}

/// A small mixed library covering all four families.
pub fn default_shapes() -> Vec<ToyShapeSpec> {
    vec![
        ToyShapeSpec {
            family: ShapeFamily::SphereCap { radius: 0.9, cap: 1.0 },
            crop: ViewCrop { direction: [1.0, 0.3, 0.2], keep_fraction: 0.5 },
        },
        ToyShapeSpec {
            family: ShapeFamily::Box { half_extents: [0.8, 0.5, 0.3] },
            crop: ViewCrop { direction: [-0.4, 1.0, 0.1], keep_fraction: 0.5 },
        },
        ToyShapeSpec {
            family: ShapeFamily::Cylinder { radius: 0.4, half_height: 0.8 },
            crop: ViewCrop { direction: [0.2, -0.3, 1.0], keep_fraction: 0.5 },
        },
        ToyShapeSpec {
            family: ShapeFamily::TwoBoxes {
                half_a: [0.6, 0.4, 0.2],
                half_b: [0.25, 0.25, 0.5],
                offset_b: [0.3, 0.1, 0.55],
            },
            crop: ViewCrop { direction: [1.0, -0.8, 0.4], keep_fraction: 0.5 },
        },
    ]
}

fn sample_point(family: &ShapeFamily, rng: &mut ChaCha12Rng) -> [f64; 3] {
    match family {
        ShapeFamily::SphereCap { radius, cap } => {
            let z_min = 1.0 - 2.0 * cap;
            let z: f64 = rng.gen_range(z_min..=1.0);
            let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let r_xy = (1.0 - z * z).max(0.0).sqrt();
            [radius * r_xy * phi.cos(), radius * r_xy * phi.sin(), radius * z]
        }
        ShapeFamily::Box { half_extents: h } => sample_box(h, [0.0; 3], rng),
        ShapeFamily::Cylinder { radius, half_height } => {
            let lateral = std::f64::consts::TAU * radius * 2.0 * half_height;
            let caps = 2.0 * std::f64::consts::PI * radius * radius;
            let u: f64 = rng.gen_range(0.0..lateral + caps);
            let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            if u < lateral {
                let z: f64 = rng.gen_range(-half_height..*half_height);
                [radius * phi.cos(), radius * phi.sin(), z]
            } else {
                let r = radius * rng.gen_range(0.0f64..1.0).sqrt();
                let z = if rng.gen_bool(0.5) { *half_height } else { -half_height };
                [r * phi.cos(), r * phi.sin(), z]
            }
        }
        ShapeFamily::TwoBoxes { half_a, half_b, offset_b } => {
            let area = |h: &[f64; 3]| 8.0 * (h[0] * h[1] + h[1] * h[2] + h[0] * h[2]);
            let (aa, ab) = (area(half_a), area(half_b));
            let u: f64 = rng.gen_range(0.0..aa + ab);
            if u < aa {
                sample_box(half_a, [0.0; 3], rng)
            } else {
                sample_box(half_b, *offset_b, rng)
            }
        }
    }
}

fn sample_box(h: &[f64; 3], offset: [f64; 3], rng: &mut ChaCha12Rng) -> [f64; 3] {
    // pick a face pair by area, then a side, then a uniform point on it
    let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
    let total: f64 = areas.iter().sum();
    let mut u: f64 = rng.gen_range(0.0..total);
    let mut axis = 0;
    for (i, a) in areas.iter().enumerate() {
        if u < *a {
            axis = i;
            break;
        }
        u -= a;
    }
    let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let mut p = [0.0; 3];
    for c in 0..3 {
        p[c] = if c == axis {
            side * h[c]
        } else {
            rng.gen_range(-h[c]..h[c])
        };
    }
    [p[0] + offset[0], p[1] + offset[1], p[2] + offset[2]]
}

/// Keep the `ceil(q * n)` points with the largest projection onto the view
/// direction, in their original order.
fn crop_indices<F: Real>(points: &[[F; 3]], crop: &ViewCrop) -> Result<Vec<usize>, ToyError> {
    if !(0.0 < crop.keep_fraction && crop.keep_fraction <= 1.0) {
        return Err(ToyError::BadKeepFraction(crop.keep_fraction));
    }
    let d = crop.direction;
    let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if norm == 0.0 {
        return Err(ToyError::ZeroDirection);
    }
    let keep = ((crop.keep_fraction * points.len() as f64).ceil() as usize)
        .clamp(1, points.len());
    let score = |i: usize| -> f64 {
        let p = &points[i];
        (p[0].to_f64().unwrap() * d[0] + p[1].to_f64().unwrap() * d[1] + p[2].to_f64().unwrap() * d[2]) / norm
    };
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| (-score(a), a).partial_cmp(&(-score(b), b)).unwrap());
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// Resize a cropped cloud to exactly `n_in` points: farthest-point subsample
/// when larger, unchanged when equal.
fn resize_partial<F: Real>(pc: PointCloud<F>, n_in: usize) -> Result<PointCloud<F>, ToyError> {
    match pc.len().cmp(&n_in) {
        std::cmp::Ordering::Equal => Ok(pc),
        std::cmp::Ordering::Greater => {
            let idx = farthest_point_sample(&pc.points, n_in, 0);
            Ok(PointCloud::new(idx.into_iter().map(|i| pc.points[i]).collect()))
        }
        std::cmp::Ordering::Less => Err(ToyError::TooFewKept {
            n_in,
            kept: pc.len(),
        }),
    }
}

/// Generate `n` pairs. Ground truths live in the canonical frame (identity
/// transform); partials are cropped views of them resampled to `n_in`.
pub fn generate_toy_dataset<F: Real>(
    cfg: &ToyDatasetConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<DatasetPair<F>>, ToyError> {
    if cfg.shapes.is_empty() {
        return Err(ToyError::NoShapes);
    }
    assert!(n >= 1);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let spec = &cfg.shapes[i % cfg.shapes.len()];
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let gt_points: Vec<[F; 3]> = (0..cfg.n_out)
            .map(|_| {
                let p = sample_point(&spec.family, &mut rng);
                [
                    F::from_f64_lossy(p[0]),
                    F::from_f64_lossy(p[1]),
                    F::from_f64_lossy(p[2]),
                ]
            })
            .collect();
        let gt = PointCloud::with_label(gt_points, "canonical");
        let kept = crop_indices(&gt.points, &spec.crop)?;
        let partial_full = PointCloud::with_label(
            kept.into_iter().map(|k| gt.points[k]).collect(),
            "canonical",
        );
        let partial = resize_partial(partial_full, cfg.n_in)?;
        out.push(DatasetPair { partial, gt });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere_cfg(n_in: usize, n_out: usize) -> ToyDatasetConfig {
        ToyDatasetConfig {
            schema_version: 1,
            shapes: vec![ToyShapeSpec {
                family: ShapeFamily::SphereCap { radius: 0.75, cap: 1.0 },
                crop: ViewCrop { direction: [0.0, 0.0, 1.0], keep_fraction: 0.5 },
            }],
            n_in,
            n_out,
        }
    }

    #[test]
    fn sphere_points_sit_on_the_sphere() {
        let pairs = generate_toy_dataset::<f64>(&sphere_cfg(32, 64), 3, 1).unwrap();
        for pair in &pairs {
            for p in &pair.gt.points {
                let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                assert!((r - 0.75).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn keep_fraction_one_returns_gt_as_partial() {
        let mut cfg = sphere_cfg(64, 64);
        cfg.shapes[0].crop.keep_fraction = 1.0;
        let pairs = generate_toy_dataset::<f64>(&cfg, 1, 2).unwrap();
        assert_eq!(pairs[0].partial.points, pairs[0].gt.points);
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let cfg = ToyDatasetConfig {
            schema_version: 1,
            shapes: default_shapes(),
            n_in: 48,
            n_out: 128,
        };
        let a = generate_toy_dataset::<f64>(&cfg, 8, 7).unwrap();
        let b = generate_toy_dataset::<f64>(&cfg, 8, 7).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.gt.points, y.gt.points);
            assert_eq!(x.partial.points, y.partial.points);
        }
        let c = generate_toy_dataset::<f64>(&cfg, 8, 8).unwrap();
        assert_ne!(a[0].gt.points, c[0].gt.points);
    }

    #[test]
    fn crop_keeps_near_side_of_plane() {
        let cfg = sphere_cfg(32, 64);
        let pairs = generate_toy_dataset::<f64>(&cfg, 1, 3).unwrap();
        let gt = &pairs[0].gt;
        // threshold = lowest kept score along +z
        let kept_min = pairs[0]
            .partial
            .points
            .iter()
            .map(|p| p[2])
            .fold(f64::INFINITY, f64::min);
        let better_than_kept = gt.points.iter().filter(|p| p[2] > kept_min).count();
        // every gt point strictly above the kept minimum must be in the crop
        assert!(better_than_kept <= 32);
    }

    #[test]
    fn bad_specs_error() {
        let mut cfg = sphere_cfg(32, 64);
        cfg.shapes[0].crop.keep_fraction = 0.0;
        assert!(matches!(
            generate_toy_dataset::<f64>(&cfg, 1, 0),
            Err(ToyError::BadKeepFraction(_))
        ));
        let mut cfg = sphere_cfg(32, 64);
        cfg.shapes[0].crop.direction = [0.0; 3];
        assert!(matches!(
            generate_toy_dataset::<f64>(&cfg, 1, 0),
            Err(ToyError::ZeroDirection)
        ));
        let cfg = sphere_cfg(64, 64);
        // keep 0.5 of 64 = 32 < n_in = 64
        assert!(matches!(
            generate_toy_dataset::<f64>(&cfg, 1, 0),
            Err(ToyError::TooFewKept { .. })
        ));
    }

    #[test]
    fn all_families_generate_finite_clouds() {
        let cfg = ToyDatasetConfig {
            schema_version: 1,
            shapes: default_shapes(),
            n_in: 48,
            n_out: 128,
        };
        let pairs = generate_toy_dataset::<f64>(&cfg, 8, 11).unwrap();
        assert_eq!(pairs.len(), 8);
        for p in &pairs {
            assert_eq!(p.partial.len(), 48);
            assert_eq!(p.gt.len(), 128);
            assert!(p.gt.all_finite() && p.partial.all_finite());
        }
    }
}
