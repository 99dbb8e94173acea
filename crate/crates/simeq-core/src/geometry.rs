//! The SIM(3) similarity group and its action on points and vector features.
//!
//! A transform `g = (s, R, t)` acts on a point by `p -> s R p + t` and on a
//! `D x 3` vector feature channel-wise by the same map. Rotations are stored
//! as row-major 3x3 matrices acting on column vectors.

use crate::tensor::Tensor;
use crate::Real;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3<F> = [F; 3];
pub type Mat3<F> = [[F; 3]; 3];

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("rotation is not special orthogonal (|R R^T - I| = {0:e})")]
    NotARotation(f64),
    #[error("scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("point cloud has zero extent; cannot normalize")]
    ZeroExtent,
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("point cloud needs at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },
}

pub fn mat3_identity<F: Real>() -> Mat3<F> {
    let (o, z) = (F::one(), F::zero());
    [[o, z, z], [z, o, z], [z, z, o]]
}

pub fn mat3_mul<F: Real>(a: &Mat3<F>, b: &Mat3<F>) -> Mat3<F> {
    let mut out = [[F::zero(); 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn mat3_transpose<F: Real>(a: &Mat3<F>) -> Mat3<F> {
    let mut out = [[F::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

pub fn mat3_vec<F: Real>(a: &Mat3<F>, v: &Vec3<F>) -> Vec3<F> {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

pub fn mat3_det<F: Real>(a: &Mat3<F>) -> F {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

/// Rotation about the z axis; x and y analogues below. Test helpers mostly.
pub fn rot_z<F: Real>(angle: F) -> Mat3<F> {
    let (s, c) = angle.sin_cos();
    let (o, z) = (F::one(), F::zero());
    [[c, -s, z], [s, c, z], [z, z, o]]
}

pub fn rot_x<F: Real>(angle: F) -> Mat3<F> {
    let (s, c) = angle.sin_cos();
    let (o, z) = (F::one(), F::zero());
    [[o, z, z], [z, c, -s], [z, s, c]]
}

pub fn rot_y<F: Real>(angle: F) -> Mat3<F> {
    let (s, c) = angle.sin_cos();
    let (o, z) = (F::one(), F::zero());
    [[c, z, s], [z, o, z], [-s, z, c]]
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
fn quat_to_mat<F: Real>(w: F, x: F, y: F, z: F) -> Mat3<F> {
    let two = F::from_f64_lossy(2.0);
    let o = F::one();
    [
        [
            o - two * (y * y + z * z),
            two * (x * y - w * z),
            two * (x * z + w * y),
        ],
        [
            two * (x * y + w * z),
            o - two * (x * x + z * z),
            two * (y * z - w * x),
        ],
        [
            two * (x * z - w * y),
            two * (y * z + w * x),
            o - two * (x * x + y * y),
        ],
    ]
}

/// A similarity transform `g = (s, R, t)` with `s > 0`, `R` in SO(3).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sim3Transform<F> {
    pub scale: F,
    pub rotation: Mat3<F>,
    pub translation: Vec3<F>,
}

impl<F: Real> Sim3Transform<F> {
    pub fn identity() -> Self {
        Self {
            scale: F::one(),
            rotation: mat3_identity(),
            translation: [F::zero(); 3],
        }
    }

    /// Construct with invariant checks: `R R^T = I` and `det R = 1` within
    /// 1e-9, `s > 0`.
    pub fn new(scale: F, rotation: Mat3<F>, translation: Vec3<F>) -> Result<Self, GeometryError> {
        if scale <= F::zero() {
            return Err(GeometryError::NonPositiveScale(scale.to_f64().unwrap_or(f64::NAN)));
        }
        let rt = mat3_transpose(&rotation);
        let rrt = mat3_mul(&rotation, &rt);
        let eye = mat3_identity::<F>();
        let mut dev = F::zero();
        for i in 0..3 {
            for j in 0..3 {
                dev = dev.max((rrt[i][j] - eye[i][j]).abs());
            }
        }
        let det_dev = (mat3_det(&rotation) - F::one()).abs();
        let tol = F::from_f64_lossy(1e-9);
        if dev > tol || det_dev > tol {
            return Err(GeometryError::NotARotation(
                dev.max(det_dev).to_f64().unwrap_or(f64::NAN),
            ));
        }
        Ok(Self {
            scale,
            rotation,
            translation,
        })
    }

    pub fn apply_point(&self, p: &Vec3<F>) -> Vec3<F> {
        let r = mat3_vec(&self.rotation, p);
        [
            self.scale * r[0] + self.translation[0],
            self.scale * r[1] + self.translation[1],
            self.scale * r[2] + self.translation[2],
        ]
    }

    /// `g1 * g2`, i.e. apply `g2` first: `s = s1 s2`, `R = R1 R2`,
    /// `t = s1 R1 t2 + t1`.
    pub fn compose(&self, other: &Self) -> Self {
        let rt2 = mat3_vec(&self.rotation, &other.translation);
        Self {
            scale: self.scale * other.scale,
            rotation: mat3_mul(&self.rotation, &other.rotation),
            translation: [
                self.scale * rt2[0] + self.translation[0],
                self.scale * rt2[1] + self.translation[1],
                self.scale * rt2[2] + self.translation[2],
            ],
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = mat3_transpose(&self.rotation);
        let rt_t = mat3_vec(&rt, &self.translation);
        let inv_s = F::one() / self.scale;
        Self {
            scale: inv_s,
            rotation: rt,
            translation: [-inv_s * rt_t[0], -inv_s * rt_t[1], -inv_s * rt_t[2]],
        }
    }

    /// Max absolute deviation from the identity transform over all fields.
    pub fn deviation_from_identity(&self) -> F {
        let mut dev = (self.scale - F::one()).abs();
        let eye = mat3_identity::<F>();
        for i in 0..3 {
            for j in 0..3 {
                dev = dev.max((self.rotation[i][j] - eye[i][j]).abs());
            }
            dev = dev.max(self.translation[i].abs());
        }
        dev
    }

    /// Group action on a token set of vector features `[M, D, 3]`: every
    /// channel transforms like a point.
    pub fn apply_features(&self, features: &Tensor<F>) -> Tensor<F> {
        assert_eq!(*features.shape().last().unwrap(), 3);
        let rows = features.numel() / 3;
        let mut out = Vec::with_capacity(features.numel());
        for r in 0..rows {
            let p = [
                features.data()[r * 3],
                features.data()[r * 3 + 1],
                features.data()[r * 3 + 2],
            ];
            out.extend_from_slice(&self.apply_point(&p));
        }
        Tensor::new(features.shape().to_vec(), out)
    }
}

/// An ordered point set in some sensor frame. The label is provenance only.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud<F> {
    pub points: Vec<Vec3<F>>,
    pub frame_label: String,
}

impl<F: Real> PointCloud<F> {
    pub fn new(points: Vec<Vec3<F>>) -> Self {
        Self {
            points,
            frame_label: String::new(),
        }
    }

    pub fn with_label(points: Vec<Vec3<F>>, label: &str) -> Self {
        Self {
            points,
            frame_label: label.to_string(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.points
            .iter()
            .all(|p| p.iter().all(|c| c.is_finite()))
    }

    pub fn centroid(&self) -> Vec3<F> {
        let inv = F::one() / F::from_f64_lossy(self.points.len() as f64);
        let mut c = [F::zero(); 3];
        for p in &self.points {
            for (acc, &v) in c.iter_mut().zip(p) {
                *acc += v;
            }
        }
        for v in c.iter_mut() {
            *v *= inv;
        }
        c
    }

    pub fn to_tensor(&self) -> Tensor<F> {
        let mut data = Vec::with_capacity(self.points.len() * 3);
        for p in &self.points {
            data.extend_from_slice(p);
        }
        Tensor::new(vec![self.points.len(), 3], data)
    }

    pub fn from_tensor(t: &Tensor<F>) -> Self {
        assert_eq!(t.shape().len(), 2);
        assert_eq!(t.shape()[1], 3);
        let points = (0..t.shape()[0])
            .map(|i| [t.data()[i * 3], t.data()[i * 3 + 1], t.data()[i * 3 + 2]])
            .collect();
        Self::new(points)
    }

    /// Max relative pointwise deviation from another cloud of equal length.
    pub fn max_point_distance(&self, other: &Self) -> F {
        assert_eq!(self.len(), other.len());
        let mut worst = F::zero();
        for (a, b) in self.points.iter().zip(&other.points) {
            let d = ((a[0] - b[0]) * (a[0] - b[0])
                + (a[1] - b[1]) * (a[1] - b[1])
                + (a[2] - b[2]) * (a[2] - b[2]))
                .sqrt();
            worst = worst.max(d);
        }
        worst
    }
}

/// `g . pc`: order-preserving pointwise action.
pub fn apply_transform<F: Real>(g: &Sim3Transform<F>, pc: &PointCloud<F>) -> PointCloud<F> {
    PointCloud {
        points: pc.points.iter().map(|p| g.apply_point(p)).collect(),
        frame_label: pc.frame_label.clone(),
    }
}

/// Center a cloud at the origin and scale its farthest point onto the unit
/// sphere. Returns the normalized cloud together with the transform that
/// maps it back onto the input (`apply_transform(g, normalized) = input`).
pub fn self_normalize<F: Real>(
    pc: &PointCloud<F>,
) -> Result<(PointCloud<F>, Sim3Transform<F>), GeometryError> {
    if pc.len() < 2 {
        return Err(GeometryError::TooFewPoints {
            need: 2,
            got: pc.len(),
        });
    }
    let c = pc.centroid();
    let mut radius = F::zero();
    for p in &pc.points {
        let n = ((p[0] - c[0]) * (p[0] - c[0])
            + (p[1] - c[1]) * (p[1] - c[1])
            + (p[2] - c[2]) * (p[2] - c[2]))
            .sqrt();
        radius = radius.max(n);
    }
    if radius < F::from_f64_lossy(1e-12) {
        return Err(GeometryError::ZeroExtent);
    }
    let inv = F::one() / radius;
    let points = pc
        .points
        .iter()
        .map(|p| [(p[0] - c[0]) * inv, (p[1] - c[1]) * inv, (p[2] - c[2]) * inv])
        .collect();
    let back = Sim3Transform {
        scale: radius,
        rotation: mat3_identity(),
        translation: c,
    };
    Ok((
        PointCloud {
            points,
            frame_label: pc.frame_label.clone(),
        },
        back,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RotationMode {
    Identity,
    UniformSo3,
}

/// Distribution over SIM(3) used for augmentation-free train/test settings.
/// Subgroups (I, SO(3), SE(3)) are expressed by narrowing the ranges.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TransformDistribution {
    pub rotation_mode: RotationMode,
    /// Log-uniform scale bounds, both positive.
    pub scale_range: (f64, f64),
    /// Half-width of the uniform translation cube, in scene units.
    pub translation_range: f64,
    pub seed: u64,
}

impl TransformDistribution {
    pub fn identity(seed: u64) -> Self {
        Self {
            rotation_mode: RotationMode::Identity,
            scale_range: (1.0, 1.0),
            translation_range: 0.0,
            seed,
        }
    }

    pub fn so3(seed: u64) -> Self {
        Self {
            rotation_mode: RotationMode::UniformSo3,
            scale_range: (1.0, 1.0),
            translation_range: 0.0,
            seed,
        }
    }

    pub fn se3(seed: u64) -> Self {
        Self {
            rotation_mode: RotationMode::UniformSo3,
            scale_range: (1.0, 1.0),
            translation_range: 1.0,
            seed,
        }
    }

    /// Default SIM(3) ranges: scale log-uniform in [0.5, 2], translation
    /// uniform in [-1, 1]^3.
    pub fn sim3(seed: u64) -> Self {
        Self {
            rotation_mode: RotationMode::UniformSo3,
            scale_range: (0.5, 2.0),
            translation_range: 1.0,
            seed,
        }
    }

    pub fn with_scale_range(mut self, lo: f64, hi: f64) -> Self {
        self.scale_range = (lo, hi);
        self
    }

    pub fn with_translation_range(mut self, r: f64) -> Self {
        self.translation_range = r;
        self
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let (lo, hi) = self.scale_range;
        if lo <= 0.0 || hi <= 0.0 || lo > hi {
            return Err(GeometryError::NonPositiveScale(lo.min(hi)));
        }
        Ok(())
    }
}

/// Draw the `index`-th transform of the sequence. Deterministic in
/// `(seed, index)` and independent of call order: each index gets its own
/// counter-derived stream.
pub fn sample_transform<F: Real>(dist: &TransformDistribution, index: u64) -> Sim3Transform<F> {
    let mut rng = ChaCha12Rng::seed_from_u64(dist.seed);
    rng.set_stream(index.wrapping_add(1));

    let rotation = match dist.rotation_mode {
        RotationMode::Identity => mat3_identity(),
        RotationMode::UniformSo3 => {
            // Unit quaternion from four standard normals: exactly uniform on SO(3).
            let n: [f64; 4] = [
                rng.sample(rand_distr::StandardNormal),
                rng.sample(rand_distr::StandardNormal),
                rng.sample(rand_distr::StandardNormal),
                rng.sample(rand_distr::StandardNormal),
            ];
            let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2] + n[3] * n[3]).sqrt();
            quat_to_mat(
                F::from_f64_lossy(n[0] / norm),
                F::from_f64_lossy(n[1] / norm),
                F::from_f64_lossy(n[2] / norm),
                F::from_f64_lossy(n[3] / norm),
            )
        }
    };

    let (lo, hi) = dist.scale_range;
    let scale = if lo == hi {
        F::from_f64_lossy(lo)
    } else {
        let u: f64 = rng.gen_range(lo.ln()..hi.ln());
        F::from_f64_lossy(u.exp())
    };

    let translation = if dist.translation_range == 0.0 {
        [F::zero(); 3]
    } else {
        let r = dist.translation_range;
        [
            F::from_f64_lossy(rng.gen_range(-r..r)),
            F::from_f64_lossy(rng.gen_range(-r..r)),
            F::from_f64_lossy(rng.gen_range(-r..r)),
        ]
    };

    Sim3Transform {
        scale,
        rotation,
        translation,
    }
}
