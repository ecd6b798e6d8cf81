//! Synthetic registration scenes with controllable domain shift.
//!
//! A scene is a set of surface samples in a 2 m cube around the origin: a floor
//! at `z = -1`, a unit sphere shell at the origin, a few boxes standing on the
//! floor and a few Gaussian blobs. A [`DomainProfile`] decides how points are
//! split between these primitives, how dense the scene is, and how the two
//! views of a pair are cropped, corrupted and moved.

mod format;

pub use format::{
    load_pair, read_cloud, read_dataset, read_manifest, split_dataset, write_cloud, write_dataset, DatasetManifest,
    FileRef, PairEntry, Split, CLOUD_MAGIC, CLOUD_VERSION, MANIFEST_FILE, MANIFEST_VERSION,
};

use nalgebra::Vector3;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{apply_transform, dist2, sample_random_transform, Point, PointCloud, RigidTransform};
use crate::rng::{substream, Rng};

/// Relative weights of the scene primitives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeMix {
    pub plane: f64,
    #[serde(rename = "box")]
    pub boxes: f64,
    pub sphere: f64,
    pub cluster: f64,
}

impl ShapeMix {
    pub fn weights(&self) -> [f64; 4] {
        [self.plane, self.boxes, self.sphere, self.cluster]
    }
}

impl Default for ShapeMix {
    fn default() -> Self {
        Self {
            plane: 0.25,
            boxes: 0.35,
            sphere: 0.2,
            cluster: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainProfile {
    pub name: String,
    #[serde(default)]
    pub shape_mix: ShapeMix,
    pub point_count: usize,
    /// meters
    pub noise_sigma: f64,
    pub outlier_fraction: f64,
    pub overlap_ratio: f64,
    /// meters; sets the inlier radius and augmentation jitter downstream
    pub voxel: f64,
    /// upper bound of each Euler angle of the ground-truth rotation, degrees
    #[serde(default = "default_rot_range")]
    pub rot_range: f64,
    /// upper bound of each ground-truth translation component, meters
    #[serde(default = "default_trans_range")]
    pub trans_range: f64,
}

fn default_rot_range() -> f64 {
    360.0
}

fn default_trans_range() -> f64 {
    0.6
}

impl DomainProfile {
    pub fn validate(&self) -> Result<()> {
        let w = self.shape_mix.weights();
        let bad = |msg: String| Err(Error::Config(format!("profile {}: {msg}", self.name)));
        if w.iter().any(|v| !(*v >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("shape weights {w:?} must be non-negative and sum to 1"));
        }
        if self.point_count < 32 {
            return bad(format!("point_count {} < 32", self.point_count));
        }
        if !(0.0..=1.0).contains(&self.overlap_ratio) || !(0.0..=1.0).contains(&self.outlier_fraction) {
            return bad("overlap_ratio and outlier_fraction must lie in [0, 1]".into());
        }
        if !(self.noise_sigma >= 0.0) || !(self.voxel > 0.0) {
            return bad("noise_sigma must be >= 0 and voxel > 0".into());
        }
        if !(self.rot_range >= 0.0) || !(self.trans_range >= 0.0) {
            return bad("transform ranges must be non-negative".into());
        }
        Ok(())
    }

    /// The reference indoor-like training domain.
    pub fn indoor(name: &str) -> Self {
        Self {
            name: name.to_string(),
            shape_mix: ShapeMix::default(),
            point_count: 256,
            noise_sigma: 0.005,
            outlier_fraction: 0.0,
            overlap_ratio: 0.8,
            voxel: 0.05,
            rot_range: default_rot_range(),
            trans_range: default_trans_range(),
        }
    }

    /// Same scenes seen through a worse scanner: twice the noise, half the
    /// density and lower overlap.
    pub fn shifted(&self, name: &str) -> Self {
        Self {
            name: name.to_string(),
            point_count: (self.point_count / 2).max(32),
            noise_sigma: self.noise_sigma * 2.0,
            overlap_ratio: self.overlap_ratio * 0.8,
            ..self.clone()
        }
    }
}

/// One registration instance; `gt` maps source coordinates into the target frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub source: PointCloud,
    pub target: PointCloud,
    pub gt: RigidTransform,
    pub profile_name: String,
    pub pair_id: String,
}

/// Bookkeeping from [`make_pair_detailed`], used by tests and diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDetails {
    /// scene indices of the source crop, in cloud order
    pub source_indices: Vec<usize>,
    pub target_indices: Vec<usize>,
    /// positions within each cloud that were replaced by outliers
    pub source_outliers: Vec<usize>,
    pub target_outliers: Vec<usize>,
    /// fraction of the larger crop shared by both crops, before corruption
    pub overlap: f64,
}

pub const SPHERE_RADIUS: f64 = 1.0;
pub const FLOOR_Z: f64 = -1.0;
pub const SCENE_HALF_EXTENT: f64 = 1.0;
const CLUSTER_SIGMA: f64 = 0.08;
const MAX_CROP_ATTEMPTS: usize = 100;
const MIN_CROP_POINTS: usize = 16;

struct Layout {
    boxes: Vec<([f64; 3], [f64; 3])>,
    clusters: Vec<[f64; 3]>,
}

fn sample_layout(rng: &mut Rng) -> Layout {
    let h = SCENE_HALF_EXTENT;
    let boxes = (0..3)
        .map(|_| {
            let size = [rng.random_range(0.2..0.6), rng.random_range(0.2..0.6), rng.random_range(0.3..1.0)];
            let lo = [
                rng.random_range(-h..h - size[0]),
                rng.random_range(-h..h - size[1]),
                FLOOR_Z,
            ];
            (lo, [lo[0] + size[0], lo[1] + size[1], lo[2] + size[2]])
        })
        .collect();
    let clusters = (0..3)
        .map(|_| [rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8)])
        .collect();
    Layout { boxes, clusters }
}

fn sample_box_surface(rng: &mut Rng, lo: &[f64; 3], hi: &[f64; 3]) -> Point {
    let d = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    // faces weighted by area: (x-faces, y-faces, z-faces)
    let areas = [d[1] * d[2], d[0] * d[2], d[0] * d[1]];
    let total: f64 = areas.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut axis = 2;
    for (k, a) in areas.iter().enumerate() {
        if u < *a {
            axis = k;
            break;
        }
        u -= a;
    }
    let mut p = [0.0; 3];
    for k in 0..3 {
        p[k] = lo[k] + rng.random::<f64>() * d[k];
    }
    p[axis] = if rng.random::<bool>() { lo[axis] } else { hi[axis] };
    p
}

fn sample_sphere_shell(rng: &mut Rng) -> Point {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: [f64; 3] = [normal.sample(rng), normal.sample(rng), normal.sample(rng)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return v.map(|c| SPHERE_RADIUS * c / n);
        }
    }
}

/// Samples `profile.point_count` surface points from a freshly laid-out scene.
pub fn generate_scene(profile: &DomainProfile, rng: &mut Rng) -> Result<PointCloud> {
    profile.validate()?;
    let layout = sample_layout(rng);
    let weights = profile.shape_mix.weights();
    let total: f64 = weights.iter().sum();
    let cluster = Normal::new(0.0, CLUSTER_SIGMA).expect("cluster sigma");
    let h = SCENE_HALF_EXTENT;
    let points = (0..profile.point_count)
        .map(|_| {
            let mut u = rng.random::<f64>() * total;
            let mut kind = weights.iter().rposition(|w| *w > 0.0).unwrap_or(0);
            for (k, w) in weights.iter().enumerate() {
                if *w > 0.0 && u < *w {
                    kind = k;
                    break;
                }
                u -= w;
            }
            match kind {
                0 => [rng.random_range(-h..h), rng.random_range(-h..h), FLOOR_Z],
                1 => {
                    let (lo, hi) = &layout.boxes[rng.random_range(0..layout.boxes.len())];
                    sample_box_surface(rng, lo, hi)
                }
                2 => sample_sphere_shell(rng),
                _ => {
                    let c = layout.clusters[rng.random_range(0..layout.clusters.len())];
                    [
                        c[0] + cluster.sample(rng),
                        c[1] + cluster.sample(rng),
                        c[2] + cluster.sample(rng),
                    ]
                }
            }
        })
        .collect();
    PointCloud::new(points)
}

fn random_unit(rng: &mut Rng) -> Vector3<f64> {
    let p = sample_sphere_shell(rng);
    Vector3::new(p[0], p[1], p[2]) / SPHERE_RADIUS
}

/// Half-space crops `{proj <= s}` and `{proj >= -s}` for the smallest `s`
/// reaching the requested overlap. Returns `(source, target, overlap)`.
fn crop_pair(proj: &[f64], overlap_ratio: f64) -> (Vec<usize>, Vec<usize>, f64) {
    let measure = |s: f64| {
        let src: Vec<usize> = (0..proj.len()).filter(|&i| proj[i] <= s).collect();
        let tgt: Vec<usize> = (0..proj.len()).filter(|&i| proj[i] >= -s).collect();
        let shared = proj.iter().filter(|&&p| p.abs() <= s).count();
        let denom = src.len().max(tgt.len()).max(1);
        let ratio = shared as f64 / denom as f64;
        (src, tgt, ratio)
    };
    let hi_bound = proj.iter().fold(0.0f64, |m, p| m.max(p.abs()));
    let (mut lo, mut hi) = (0.0, hi_bound);
    if measure(lo).2 >= overlap_ratio {
        return measure(lo);
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if measure(mid).2 >= overlap_ratio {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    measure(hi)
}

fn corrupt(cloud: &[Point], sigma: f64, outlier_fraction: f64, rng: &mut Rng) -> (Vec<Point>, Vec<usize>) {
    let mut pts = cloud.to_vec();
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).expect("noise sigma");
        for p in pts.iter_mut() {
            for c in p.iter_mut() {
                *c += noise.sample(rng);
            }
        }
    }
    let n_out = (outlier_fraction * pts.len() as f64).round() as usize;
    if n_out == 0 {
        return (pts, Vec::new());
    }
    let (lo, hi) = PointCloud::new(pts.clone()).expect("non-empty crop").bounds();
    let mut outliers = rand::seq::index::sample(rng, pts.len(), n_out).into_vec();
    outliers.sort_unstable();
    for &i in &outliers {
        for k in 0..3 {
            pts[i][k] = if hi[k] > lo[k] { rng.random_range(lo[k]..hi[k]) } else { lo[k] };
        }
    }
    (pts, outliers)
}

/// Crops two overlapping views of `scene`, moves the target view by a sampled
/// ground truth, then adds noise and outliers to both views independently.
pub fn make_pair(scene: &PointCloud, profile: &DomainProfile, pair_id: &str, rng: &mut Rng) -> Result<ScenePair> {
    make_pair_detailed(scene, profile, pair_id, rng).map(|(p, _)| p)
}

pub fn make_pair_detailed(
    scene: &PointCloud,
    profile: &DomainProfile,
    pair_id: &str,
    rng: &mut Rng,
) -> Result<(ScenePair, PairDetails)> {
    profile.validate()?;
    let gt = sample_random_transform(rng, profile.rot_range, profile.trans_range);
    let c = Vector3::from(scene.centroid());
    let (src_idx, tgt_idx, overlap) = (0..MAX_CROP_ATTEMPTS)
        .find_map(|_| {
            let n = random_unit(rng);
            let proj: Vec<f64> = scene.points().iter().map(|p| n.dot(&(Vector3::from(*p) - c))).collect();
            let (s, t, ratio) = crop_pair(&proj, profile.overlap_ratio);
            let ok = s.len() >= MIN_CROP_POINTS && t.len() >= MIN_CROP_POINTS && ratio >= profile.overlap_ratio;
            ok.then_some((s, t, ratio))
        })
        .ok_or(Error::OverlapUnsatisfiable(MAX_CROP_ATTEMPTS))?;

    let src_clean = scene.select(&src_idx)?;
    let tgt_clean = apply_transform(&scene.select(&tgt_idx)?, &gt);
    let (src_pts, source_outliers) = corrupt(src_clean.points(), profile.noise_sigma, profile.outlier_fraction, rng);
    let (tgt_pts, target_outliers) = corrupt(tgt_clean.points(), profile.noise_sigma, profile.outlier_fraction, rng);
    let pair = ScenePair {
        source: PointCloud::new(src_pts)?,
        target: PointCloud::new(tgt_pts)?,
        gt,
        profile_name: profile.name.clone(),
        pair_id: pair_id.to_string(),
    };
    let details = PairDetails {
        source_indices: src_idx,
        target_indices: tgt_idx,
        source_outliers,
        target_outliers,
        overlap,
    };
    Ok((pair, details))
}

/// Fraction of `min(|source|, |target|)` covered by source points that have a
/// gt-transformed neighbor in the target within `radius`.
pub fn measured_overlap(pair: &ScenePair, radius: f64) -> f64 {
    let moved = apply_transform(&pair.source, &pair.gt);
    let r2 = radius * radius;
    let covered = moved
        .points()
        .iter()
        .filter(|p| pair.target.points().iter().any(|q| dist2(p, q) <= r2))
        .count();
    covered as f64 / pair.source.len().min(pair.target.len()) as f64
}

/// Deterministic pair generation: pair `i` of profile `p` draws from its own substream.
pub fn generate_pairs(profile: &DomainProfile, count: usize, seed: u64) -> Result<Vec<ScenePair>> {
    use rayon::prelude::*;
    (0..count)
        .into_par_iter()
        .map(|i| {
            let pair_id = format!("{}-{i:05}", profile.name);
            let mut rng = substream(seed, &format!("data/{pair_id}"));
            let scene = generate_scene(profile, &mut rng)?;
            make_pair(&scene, profile, &pair_id, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RigidTransform;

    fn only(mix: ShapeMix) -> DomainProfile {
        DomainProfile {
            shape_mix: mix,
            noise_sigma: 0.0,
            ..DomainProfile::indoor("t")
        }
    }

    const PLANE: ShapeMix = ShapeMix { plane: 1.0, boxes: 0.0, sphere: 0.0, cluster: 0.0 };
    const SPHERE: ShapeMix = ShapeMix { plane: 0.0, boxes: 0.0, sphere: 1.0, cluster: 0.0 };

    #[test]
    fn plane_scene_is_coplanar() {
        let mut rng = substream(1, "t");
        let c = generate_scene(&only(PLANE), &mut rng).unwrap();
        assert!(c.points().iter().all(|p| (p[2] - FLOOR_Z).abs() < 1e-12));
    }

    #[test]
    fn point_count_is_exact() {
        let mut rng = substream(2, "t");
        let p = DomainProfile { point_count: 512, ..DomainProfile::indoor("t") };
        assert_eq!(generate_scene(&p, &mut rng).unwrap().len(), 512);
    }

    #[test]
    fn sphere_scene_has_unit_norms() {
        let mut rng = substream(3, "t");
        let c = generate_scene(&only(SPHERE), &mut rng).unwrap();
        for p in c.points() {
            let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn scene_generation_is_deterministic() {
        let p = DomainProfile::indoor("t");
        let a = generate_scene(&p, &mut substream(4, "t")).unwrap();
        let b = generate_scene(&p, &mut substream(4, "t")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn full_overlap_identity_pair_is_exact_copy() {
        let p = DomainProfile {
            noise_sigma: 0.0,
            outlier_fraction: 0.0,
            overlap_ratio: 1.0,
            rot_range: 0.0,
            trans_range: 0.0,
            ..DomainProfile::indoor("t")
        };
        let mut rng = substream(5, "t");
        let scene = generate_scene(&p, &mut rng).unwrap();
        let pair = make_pair(&scene, &p, "x", &mut rng).unwrap();
        assert_eq!(pair.gt, RigidTransform::identity());
        assert_eq!(pair.source, pair.target);
    }

    #[test]
    fn requested_overlap_is_met() {
        let p = DomainProfile {
            noise_sigma: 0.0,
            overlap_ratio: 0.2,
            ..DomainProfile::indoor("t")
        };
        for seed in 0..5 {
            let mut rng = substream(seed, "ov");
            let scene = generate_scene(&p, &mut rng).unwrap();
            let pair = make_pair(&scene, &p, "x", &mut rng).unwrap();
            let m = measured_overlap(&pair, 1e-9);
            assert!((0.2..=1.0).contains(&m), "overlap {m}");
        }
    }

    #[test]
    fn noiseless_overlap_points_align_under_gt() {
        let p = DomainProfile { noise_sigma: 0.0, ..DomainProfile::indoor("t") };
        let mut rng = substream(6, "t");
        let scene = generate_scene(&p, &mut rng).unwrap();
        let (pair, d) = make_pair_detailed(&scene, &p, "x", &mut rng).unwrap();
        for (si, &scene_i) in d.source_indices.iter().enumerate() {
            if let Some(ti) = d.target_indices.iter().position(|&j| j == scene_i) {
                let moved = pair.gt.apply_point(&pair.source.points()[si]);
                assert!(dist2(&moved, &pair.target.points()[ti]).sqrt() < 1e-9);
            }
        }
    }

    #[test]
    fn outliers_fail_residual_test() {
        let sigma = 0.01;
        let p = DomainProfile {
            noise_sigma: sigma,
            outlier_fraction: 0.5,
            overlap_ratio: 1.0,
            ..DomainProfile::indoor("t")
        };
        let mut rng = substream(7, "t");
        let scene = generate_scene(&p, &mut rng).unwrap();
        let (pair, d) = make_pair_detailed(&scene, &p, "x", &mut rng).unwrap();
        // residual against the clean, gt-moved scene point behind each target slot
        let failing = d
            .target_indices
            .iter()
            .enumerate()
            .filter(|(ti, &scene_i)| {
                let clean = pair.gt.apply_point(&scene.points()[scene_i]);
                let r = dist2(&clean, &pair.target.points()[*ti]).sqrt();
                r > 3.0 * sigma * 3f64.sqrt()
            })
            .count();
        let frac = failing as f64 / pair.target.len() as f64;
        assert!((frac - 0.5).abs() < 0.03, "fraction {frac}");
        assert_eq!(d.target_outliers.len(), pair.target.len() / 2);
    }

    #[test]
    fn invalid_profiles_rejected() {
        let mut p = DomainProfile::indoor("t");
        p.point_count = 31;
        assert!(p.validate().is_err());
        let mut p = DomainProfile::indoor("t");
        p.shape_mix.plane = 0.9;
        assert!(p.validate().is_err());
        let mut p = DomainProfile::indoor("t");
        p.overlap_ratio = 1.5;
        assert!(p.validate().is_err());
    }

    fn mean_nn_distance(c: &PointCloud) -> f64 {
        let pts = c.points();
        pts.iter()
            .enumerate()
            .map(|(i, p)| {
                pts.iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, q)| dist2(p, q))
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .sum::<f64>()
            / pts.len() as f64
    }

    #[test]
    fn noise_shift_is_detectable() {
        // Welch t statistic over 20 scenes per profile at n = 512
        let base = DomainProfile {
            point_count: 512,
            noise_sigma: 0.0,
            overlap_ratio: 1.0,
            ..DomainProfile::indoor("a")
        };
        let noisy = DomainProfile { noise_sigma: 0.03, ..base.clone() };
        let stats = |p: &DomainProfile| -> Vec<f64> {
            (0..20)
                .map(|s| {
                    let mut rng = substream(s, "shift");
                    let scene = generate_scene(p, &mut rng).unwrap();
                    mean_nn_distance(&make_pair(&scene, p, "x", &mut rng).unwrap().source)
                })
                .collect()
        };
        let (a, b) = (stats(&base), stats(&noisy));
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let var = |v: &[f64], m: f64| v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        let (ma, mb) = (mean(&a), mean(&b));
        let t = (mb - ma) / (var(&a, ma) / a.len() as f64 + var(&b, mb) / b.len() as f64).sqrt();
        assert!(t.abs() > 3.0, "t = {t}");
    }
}
