//! Point clouds, rigid transforms and the registration metrics.

use std::collections::HashMap;

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 3];

/// Per-point feature block stored row-major, `dim` values per point.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub dim: usize,
    pub values: Vec<f64>,
}

/// An ordered set of 3D points (meters) with optional per-point features.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
    features: Option<Features>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        Self::with_features(points, None)
    }

    pub fn with_features(points: Vec<Point>, features: Option<Features>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("point cloud"));
        }
        if let Some((i, _)) = points
            .iter()
            .enumerate()
            .find(|(_, p)| !p.iter().all(|c| c.is_finite()))
        {
            return Err(Error::NonFinite(format!("point {i} of cloud")));
        }
        if let Some(f) = &features {
            if f.dim == 0 || f.values.len() != f.dim * points.len() {
                return Err(Error::InvalidArgument(format!(
                    "feature block of {} values does not match {} points of dim {}",
                    f.values.len(),
                    points.len(),
                    f.dim
                )));
            }
        }
        Ok(Self { points, features })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn features(&self) -> Option<&Features> {
        self.features.as_ref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Point {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / n)
    }

    /// Axis-aligned bounding box as (min, max).
    pub fn bounds(&self) -> (Point, Point) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        (lo, hi)
    }

    /// Keeps the points at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let points = indices.iter().map(|&i| self.points[i]).collect();
        let features = self.features.as_ref().map(|f| Features {
            dim: f.dim,
            values: indices
                .iter()
                .flat_map(|&i| f.values[i * f.dim..(i + 1) * f.dim].iter().copied())
                .collect(),
        });
        Self::with_features(points, features)
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }
}

/// A proper rigid motion `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub const ORTHO_TOL: f64 = 1e-9;

    /// Validates the rotation part before constructing.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = Self {
            rotation,
            translation,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn from_rotation(r: Matrix3<f64>) -> Self {
        Self {
            rotation: r,
            translation: Vector3::zeros(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("rigid transform".into()));
        }
        let ortho = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        let det = self.rotation.determinant();
        if ortho > Self::ORTHO_TOL || (det - 1.0).abs() > Self::ORTHO_TOL {
            return Err(Error::InvalidArgument(format!(
                "not a rotation: |R^T R - I| = {ortho:e}, det = {det}"
            )));
        }
        Ok(())
    }

    pub fn apply_point(&self, p: &Point) -> Point {
        let v = self.rotation * Vector3::from(*p) + self.translation;
        [v.x, v.y, v.z]
    }

    /// Applies `B` first, then `self`.
    pub fn compose(&self, b: &RigidTransform) -> RigidTransform {
        compose(self, b)
    }

    pub fn inverse(&self) -> RigidTransform {
        invert(self)
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Row-major 3x4 `[R | t]`.
    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 4 + c] = self.rotation[(r, c)];
            }
            out[r * 4 + 3] = self.translation[r];
        }
        out
    }

    pub fn from_row_major_3x4(v: &[f64]) -> Result<Self> {
        if v.len() != 12 {
            return Err(Error::Parse(format!("expected 12 values, got {}", v.len())));
        }
        let rotation = Matrix3::from_fn(|r, c| v[r * 4 + c]);
        let translation = Vector3::new(v[3], v[7], v[11]);
        Self::new(rotation, translation)
    }
}

pub fn rot_x(deg: f64) -> Matrix3<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(deg: f64) -> Matrix3<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(deg: f64) -> Matrix3<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

pub fn apply_transform(cloud: &PointCloud, t: &RigidTransform) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| t.apply_point(p)).collect(),
        features: cloud.features.clone(),
    }
}

pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    RigidTransform {
        rotation: a.rotation * b.rotation,
        translation: a.rotation * b.translation + a.translation,
    }
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    let rt = t.rotation.transpose();
    RigidTransform {
        rotation: rt,
        translation: -(rt * t.translation),
    }
}

/// Geodesic angle `arccos((tr(R^T R*) - 1) / 2)` between the two rotations, in
/// degrees. Evaluated as `atan2(sin, cos)` with the sine taken from the skew
/// part of `R^T R*`, which keeps full precision near 0 and 180 degrees where
/// the plain arccos of a rounded trace does not.
pub fn rotation_error(pred: &RigidTransform, gt: &RigidTransform) -> f64 {
    let a = pred.rotation.transpose() * gt.rotation;
    let cos = ((a.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let sin = 0.5 * Vector3::new(a[(2, 1)] - a[(1, 2)], a[(0, 2)] - a[(2, 0)], a[(1, 0)] - a[(0, 1)]).norm();
    sin.atan2(cos).to_degrees()
}

/// Euclidean distance between the translations, in meters.
pub fn translation_error(pred: &RigidTransform, gt: &RigidTransform) -> f64 {
    (pred.translation - gt.translation).norm()
}

/// Success thresholds for registration recall.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalThresholds {
    /// degrees
    pub re_max: f64,
    /// meters
    pub te_max: f64,
}

impl EvalThresholds {
    /// Indoor thresholds: 15 degrees, 30 cm.
    pub const INDOOR: EvalThresholds = EvalThresholds {
        re_max: 15.0,
        te_max: 0.30,
    };
    /// Outdoor thresholds: 5 degrees, 60 cm.
    pub const OUTDOOR: EvalThresholds = EvalThresholds {
        re_max: 5.0,
        te_max: 0.60,
    };

    pub fn new(re_max: f64, te_max: f64) -> Result<Self> {
        if !(re_max > 0.0 && te_max > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "thresholds must be positive, got ({re_max}, {te_max})"
            )));
        }
        Ok(Self { re_max, te_max })
    }

    pub fn accepts(&self, re: f64, te: f64) -> bool {
        re <= self.re_max && te <= self.te_max
    }
}

impl Default for EvalThresholds {
    fn default() -> Self {
        Self::INDOOR
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    pub predicted: RigidTransform,
    pub re: f64,
    pub te: f64,
    pub success: bool,
    pub aux_loss_trace: Vec<f64>,
}

impl RegistrationResult {
    pub fn evaluate(
        predicted: RigidTransform,
        gt: &RigidTransform,
        thresholds: &EvalThresholds,
        aux_loss_trace: Vec<f64>,
    ) -> Self {
        let re = rotation_error(&predicted, gt);
        let te = translation_error(&predicted, gt);
        Self {
            predicted,
            re,
            te,
            success: thresholds.accepts(re, te),
            aux_loss_trace,
        }
    }
}

/// Fraction of results whose errors fall within `thresholds`.
pub fn registration_recall(results: &[RegistrationResult], thresholds: &EvalThresholds) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Empty("registration results"));
    }
    let ok = results
        .iter()
        .filter(|r| thresholds.accepts(r.re, r.te))
        .count();
    Ok(ok as f64 / results.len() as f64)
}

/// Rotation `rot_x(a) * rot_y(b) * rot_z(c)` with each angle uniform in
/// `[0, rot_range]` degrees, translation components uniform in `[0, trans_range]`.
pub fn sample_random_transform<R: Rng + ?Sized>(
    rng: &mut R,
    rot_range: f64,
    trans_range: f64,
) -> RigidTransform {
    assert!(rot_range >= 0.0 && trans_range >= 0.0, "ranges must be non-negative");
    let mut angle = || rng.random::<f64>() * rot_range;
    let (a, b, c) = (angle(), angle(), angle());
    let rotation = rot_x(a) * rot_y(b) * rot_z(c);
    let mut shift = || rng.random::<f64>() * trans_range;
    let translation = Vector3::new(shift(), shift(), shift());
    RigidTransform {
        rotation,
        translation,
    }
}

/// Replaces the points of each occupied voxel by their centroid. Output order
/// follows the first occurrence of each voxel in the input.
pub fn voxel_downsample(cloud: &PointCloud, voxel: f64) -> Result<PointCloud> {
    if !(voxel > 0.0) {
        return Err(Error::InvalidArgument(format!("voxel size must be positive, got {voxel}")));
    }
    let mut slot: HashMap<[i64; 3], usize> = HashMap::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for (i, p) in cloud.points.iter().enumerate() {
        let key = p.map(|c| (c / voxel).floor() as i64);
        let next = members.len();
        let s = *slot.entry(key).or_insert(next);
        if s == next {
            members.push(Vec::new());
        }
        members[s].push(i);
    }
    let points = members
        .iter()
        .map(|m| {
            let mut c = [0.0; 3];
            for &i in m {
                for k in 0..3 {
                    c[k] += cloud.points[i][k];
                }
            }
            c.map(|v| v / m.len() as f64)
        })
        .collect();
    let features = cloud.features.as_ref().map(|f| {
        let mut values = Vec::with_capacity(members.len() * f.dim);
        for m in &members {
            for d in 0..f.dim {
                let s: f64 = m.iter().map(|&i| f.values[i * f.dim + d]).sum();
                values.push(s / m.len() as f64);
            }
        }
        Features { dim: f.dim, values }
    });
    PointCloud::with_features(points, features)
}

pub(crate) fn dist2(a: &Point, b: &Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}
