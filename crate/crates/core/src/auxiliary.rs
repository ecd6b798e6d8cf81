//! Self-supervised auxiliary losses: point reconstruction, BYOL and
//! correspondence classification, combined with learned balancing weights.
//!
//! All random choices of one evaluation (augmented views, the synthetic motion
//! for correspondence classification) are drawn up front into [`AuxInputs`],
//! so a loss can be re-evaluated on the same draws while parameters change.

use nalgebra::{Rotation3, Unit, Vector3};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{apply_transform, sample_random_transform, PointCloud, RigidTransform};
use crate::networks::{
    byol_predict, byol_project, decode, encode, score_correspondences, Bound, Group, ParamPartition,
    PreparedCloud, Trainable, BALANCE_PARAM,
};
use crate::registration::{bce, encode_correspondences, label_inliers, match_features};
use crate::rng::Rng;

pub const MIN_VIEW_POINTS: usize = 16;
/// Rotation and translation ranges of the correspondence-classification motion.
pub const CC_ROT_RANGE: f64 = 360.0;
pub const CC_TRANS_RANGE: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationSpec {
    /// fraction of points kept by the half-space crop
    pub crop_fraction: (f64, f64),
    /// largest rotation angle about a random axis, degrees
    pub rotation: f64,
    /// Gaussian jitter, meters
    pub jitter: f64,
    /// fraction of points kept by random subsampling
    pub downsample_fraction: (f64, f64),
}

impl AugmentationSpec {
    pub const IDENTITY: AugmentationSpec = AugmentationSpec {
        crop_fraction: (1.0, 1.0),
        rotation: 0.0,
        jitter: 0.0,
        downsample_fraction: (1.0, 1.0),
    };

    /// Mild defaults scaled to the voxel size.
    pub fn for_voxel(voxel: f64) -> Self {
        Self {
            crop_fraction: (0.6, 0.9),
            rotation: 30.0,
            jitter: 0.5 * voxel,
            downsample_fraction: (0.7, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("crop_fraction", self.crop_fraction), ("downsample_fraction", self.downsample_fraction)] {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return Err(Error::Config(format!("{name} range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1")));
            }
        }
        if !(0.0..=180.0).contains(&self.rotation) || !(self.jitter >= 0.0) {
            return Err(Error::Config("rotation must lie in [0, 180] and jitter be >= 0".into()));
        }
        Ok(())
    }
}

fn uniform(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

fn random_axis(rng: &mut Rng) -> Unit<Vector3<f64>> {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v = Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng));
        if v.norm() > 1e-9 {
            return Unit::new_normalize(v);
        }
    }
}

fn jitter(points: &mut [[f64; 3]], sigma: f64, rng: &mut Rng) {
    if sigma > 0.0 {
        let n = Normal::new(0.0, sigma).expect("jitter sigma");
        for p in points.iter_mut() {
            for c in p.iter_mut() {
                *c += n.sample(rng);
            }
        }
    }
}

fn augment(p: &PointCloud, spec: &AugmentationSpec, rng: &mut Rng) -> Result<PointCloud> {
    let mut pts = p.points().to_vec();
    let n = pts.len();

    let keep = ((uniform(rng, spec.crop_fraction) * n as f64).round() as usize).min(n);
    if keep < n {
        let axis = random_axis(rng);
        let mut order: Vec<(f64, usize)> =
            pts.iter().enumerate().map(|(i, q)| (axis.dot(&Vector3::from(*q)), i)).collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut kept: Vec<usize> = order[..keep].iter().map(|o| o.1).collect();
        kept.sort_unstable();
        pts = kept.iter().map(|&i| pts[i]).collect();
    }

    let angle = uniform(rng, (0.0, spec.rotation));
    if angle > 0.0 {
        let rot = Rotation3::from_axis_angle(&random_axis(rng), angle.to_radians());
        let c = pts.iter().fold(Vector3::zeros(), |s, q| s + Vector3::from(*q)) / pts.len().max(1) as f64;
        for q in pts.iter_mut() {
            let v = rot * (Vector3::from(*q) - c) + c;
            *q = [v.x, v.y, v.z];
        }
    }

    jitter(&mut pts, spec.jitter, rng);

    let m = pts.len();
    let keep = ((uniform(rng, spec.downsample_fraction) * m as f64).round() as usize).min(m);
    if keep < m {
        let mut idx = rand::seq::index::sample(rng, m, keep).into_vec();
        idx.sort_unstable();
        pts = idx.iter().map(|&i| pts[i]).collect();
    }

    if pts.len() < MIN_VIEW_POINTS {
        return Err(Error::InvalidArgument(format!(
            "augmented view has {} points, need at least {MIN_VIEW_POINTS}",
            pts.len()
        )));
    }
    PointCloud::new(pts)
}

/// Two independent augmentations (crop, rotate, jitter, subsample) of `p`.
pub fn make_views(p: &PointCloud, spec: &AugmentationSpec, rng: &mut Rng) -> Result<(PointCloud, PointCloud)> {
    spec.validate()?;
    Ok((augment(p, spec, rng)?, augment(p, spec, rng)?))
}

/// Which auxiliary tasks contribute to `L_aux`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuxFlags {
    pub use_rec: bool,
    pub use_byol: bool,
    pub use_cc: bool,
}

impl Default for AuxFlags {
    fn default() -> Self {
        Self {
            use_rec: true,
            use_byol: true,
            use_cc: true,
        }
    }
}

impl AuxFlags {
    pub fn any(&self) -> bool {
        self.use_rec || self.use_byol || self.use_cc
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuxConfig {
    pub flags: AuxFlags,
    pub augment: AugmentationSpec,
    /// inlier radius for correspondence classification labels, meters
    pub tau_in: f64,
    /// jitter applied to the copy before the classification motion, meters
    pub cc_jitter: f64,
}

impl AuxConfig {
    pub fn for_voxel(voxel: f64) -> Self {
        Self {
            flags: AuxFlags::default(),
            augment: AugmentationSpec::for_voxel(voxel),
            tau_in: 2.0 * voxel,
            cc_jitter: 0.5 * voxel,
        }
    }
}

/// One cloud plus every random draw its auxiliary losses need.
#[derive(Debug, Clone)]
pub struct AuxInputs {
    pub cloud: PreparedCloud,
    pub views: Option<(PreparedCloud, PreparedCloud)>,
    /// moved copy and the motion applied to it
    pub cc: Option<(PreparedCloud, RigidTransform)>,
}

impl AuxInputs {
    pub fn sample(cloud: &PreparedCloud, cfg: &AuxConfig, rng: &mut Rng) -> Result<Self> {
        let k = cloud.k.max(1);
        let views = if cfg.flags.use_byol {
            let (a, b) = make_views(&cloud.cloud, &cfg.augment, rng)?;
            Some((PreparedCloud::new(&a, k)?, PreparedCloud::new(&b, k)?))
        } else {
            None
        };
        let cc = if cfg.flags.use_cc {
            let t = sample_random_transform(rng, CC_ROT_RANGE, CC_TRANS_RANGE);
            let mut pts = cloud.cloud.points().to_vec();
            jitter(&mut pts, cfg.cc_jitter, rng);
            let moved = apply_transform(&PointCloud::new(pts)?, &t);
            Some((PreparedCloud::new(&moved, k)?, t))
        } else {
            None
        };
        Ok(Self {
            cloud: cloud.clone(),
            views,
            cc,
        })
    }
}

/// Mean absolute error over all `N x 3` entries between the decoded cloud
/// and the canonical-frame coordinates of the input.
pub fn reconstruction_term(tape: &mut Tape, b: &Bound, cloud: &PreparedCloud, features: Var) -> Result<Var> {
    let rec = decode(tape, b, features)?;
    let target = tape.constant(cloud.canonical.clone());
    let d = tape.sub(rec, target)?;
    let d = tape.abs(d)?;
    tape.mean(d)
}

/// `2 - 2 cos(q, z)` for two `1 x P` rows.
pub fn cosine_term(tape: &mut Tape, q: Var, z: Var) -> Result<Var> {
    let qn = tape.l2_normalize_rows(q)?;
    let zn = tape.l2_normalize_rows(z)?;
    let dot = tape.mul(qn, zn)?;
    let dot = tape.sum(dot)?;
    let s = tape.scale(dot, -2.0)?;
    tape.add_scalar(s, 2.0)
}

fn online_prediction(tape: &mut Tape, b: &Bound, view: &PreparedCloud) -> Result<Var> {
    let f = encode(tape, b, Group::Shar, view)?;
    let pooled = tape.mean_rows(f)?;
    let z = byol_project(tape, b, Group::Aux, pooled)?;
    byol_predict(tape, b, z)
}

fn target_projection(tape: &mut Tape, b: &Bound, view: &PreparedCloud) -> Result<Var> {
    let f = encode(tape, b, Group::Target, view)?;
    let pooled = tape.mean_rows(f)?;
    byol_project(tape, b, Group::Target, pooled)
}

/// Symmetric BYOL loss over two prepared views.
pub fn byol_term(tape: &mut Tape, b: &Bound, views: &(PreparedCloud, PreparedCloud)) -> Result<Var> {
    let q1 = online_prediction(tape, b, &views.0)?;
    let q2 = online_prediction(tape, b, &views.1)?;
    let z1 = target_projection(tape, b, &views.0)?;
    let z2 = target_projection(tape, b, &views.1)?;
    let l = cosine_term(tape, q1, z2)?;
    let l2 = cosine_term(tape, q2, z1)?;
    tape.add(l, l2)
}

/// Correspondence classification: match `cloud` against its moved copy,
/// label matches under the known motion and score them with the auxiliary head.
pub fn cc_term(
    tape: &mut Tape,
    b: &Bound,
    cloud: &PreparedCloud,
    features: Var,
    moved: &(PreparedCloud, RigidTransform),
    tau_in: f64,
) -> Result<Var> {
    let (other, t) = moved;
    let fy = encode(tape, b, Group::Shar, other)?;
    let corr = match_features(tape.value(features), tape.value(fy), false)?;
    let labels = label_inliers(&corr, &cloud.cloud, &other.cloud, t, tau_in)?;
    let enc = encode_correspondences(tape, &corr, cloud, other, features, fy)?;
    let probs = score_correspondences(tape, b, Group::Aux, enc)?;
    bce(tape, probs, &labels)
}

/// `softmax(1 / (2 c^2))` of a `1 x 3` node.
pub fn balance_weights(tape: &mut Tape, c: Var) -> Result<Var> {
    let x = tape.value(c);
    if let Some(&bad) = x.data().iter().find(|v| **v == 0.0 || !v.is_finite()) {
        return Err(Error::Domain { op: "balance_weights", value: bad });
    }
    let logits = x.map(|v| 1.0 / (2.0 * v * v));
    let l = tape.custom(&[c], logits, |g, xs, _| {
        vec![g.zip_map(xs[0], |gi, ci| -gi / (ci * ci * ci))]
    })?;
    tape.softmax_rows(l)
}

/// Value-level [`balance_weights`].
pub fn balance_weights_values(c: [f64; 3]) -> Result<[f64; 3]> {
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::row(c.to_vec()));
    let l = balance_weights(&mut tape, v)?;
    let d = tape.value(l).data();
    Ok([d[0], d[1], d[2]])
}

/// Per-task values (averaged over both clouds) and the weighted total.
pub struct AuxLoss {
    pub total: Var,
    pub rec: f64,
    pub byol: f64,
    pub cc: f64,
    pub lambda: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuxBreakdown {
    pub total: f64,
    pub rec: f64,
    pub byol: f64,
    pub cc: f64,
    pub lambda: [f64; 3],
}

/// `L_aux = lambda_1 l_rec + lambda_2 l_byol + lambda_3 l_cc`, each task
/// averaged over the two clouds. Takes no ground truth.
pub fn aux_total_loss(tape: &mut Tape, b: &Bound, x: &AuxInputs, y: &AuxInputs, cfg: &AuxConfig) -> Result<AuxLoss> {
    if !cfg.flags.any() {
        return Err(Error::Config("no auxiliary task enabled".into()));
    }
    let c = b.var(Group::Balance, BALANCE_PARAM)?;
    let lambda = balance_weights(tape, c)?;
    let lam = {
        let d = tape.value(lambda).data();
        [d[0], d[1], d[2]]
    };
    let mut sums: [Option<Var>; 3] = [None, None, None];
    for inputs in [x, y] {
        let f = encode(tape, b, Group::Shar, &inputs.cloud)?;
        let mut terms = [None, None, None];
        if cfg.flags.use_rec {
            terms[0] = Some(reconstruction_term(tape, b, &inputs.cloud, f)?);
        }
        if cfg.flags.use_byol {
            let views = inputs.views.as_ref().ok_or_else(|| Error::Invariant("views not sampled".into()))?;
            terms[1] = Some(byol_term(tape, b, views)?);
        }
        if cfg.flags.use_cc {
            let moved = inputs.cc.as_ref().ok_or_else(|| Error::Invariant("motion not sampled".into()))?;
            terms[2] = Some(cc_term(tape, b, &inputs.cloud, f, moved, cfg.tau_in)?);
        }
        for (s, t) in sums.iter_mut().zip(terms) {
            if let Some(t) = t {
                *s = Some(match *s {
                    None => t,
                    Some(acc) => tape.add(acc, t)?,
                });
            }
        }
    }
    let mut values = [0.0; 3];
    let mut total: Option<Var> = None;
    for (i, s) in sums.iter().enumerate() {
        if let Some(s) = *s {
            let avg = tape.scale(s, 0.5)?;
            values[i] = tape.value(avg).item();
            let sel = tape.constant(Tensor::column((0..3).map(|j| if j == i { 1.0 } else { 0.0 }).collect()));
            let li = tape.matmul(lambda, sel)?;
            let term = tape.mul(li, avg)?;
            total = Some(match total {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
    }
    Ok(AuxLoss {
        total: total.expect("at least one task enabled"),
        rec: values[0],
        byol: values[1],
        cc: values[2],
        lambda: lam,
    })
}

fn frozen(p: &ParamPartition) -> (Tape, Bound) {
    let mut tape = Tape::new();
    let b = Bound::bind(&mut tape, p, Trainable::NONE);
    (tape, b)
}

/// Value of the reconstruction loss of `cloud` under `p`.
pub fn reconstruction_loss(p: &ParamPartition, cloud: &PointCloud) -> Result<f64> {
    let prepared = PreparedCloud::new(cloud, p.config.k)?;
    let (mut tape, b) = frozen(p);
    let f = encode(&mut tape, &b, Group::Shar, &prepared)?;
    let l = reconstruction_term(&mut tape, &b, &prepared, f)?;
    Ok(tape.value(l).item())
}

pub fn byol_loss(p: &ParamPartition, cloud: &PointCloud, spec: &AugmentationSpec, rng: &mut Rng) -> Result<f64> {
    let (a, v) = make_views(cloud, spec, rng)?;
    let views = (PreparedCloud::new(&a, p.config.k)?, PreparedCloud::new(&v, p.config.k)?);
    let (mut tape, b) = frozen(p);
    let l = byol_term(&mut tape, &b, &views)?;
    Ok(tape.value(l).item())
}

pub fn cc_loss(p: &ParamPartition, cloud: &PointCloud, cfg: &AuxConfig, rng: &mut Rng) -> Result<f64> {
    let prepared = PreparedCloud::new(cloud, p.config.k)?;
    let cfg = AuxConfig {
        flags: AuxFlags { use_rec: false, use_byol: false, use_cc: true },
        ..*cfg
    };
    let inputs = AuxInputs::sample(&prepared, &cfg, rng)?;
    let (mut tape, b) = frozen(p);
    let f = encode(&mut tape, &b, Group::Shar, &prepared)?;
    let l = cc_term(&mut tape, &b, &prepared, f, inputs.cc.as_ref().expect("sampled"), cfg.tau_in)?;
    Ok(tape.value(l).item())
}

/// Value-level [`aux_total_loss`] on a pair of clouds.
pub fn aux_loss_values(
    p: &ParamPartition,
    x: &PointCloud,
    y: &PointCloud,
    cfg: &AuxConfig,
    rng: &mut Rng,
) -> Result<AuxBreakdown> {
    let px = AuxInputs::sample(&PreparedCloud::new(x, p.config.k)?, cfg, rng)?;
    let py = AuxInputs::sample(&PreparedCloud::new(y, p.config.k)?, cfg, rng)?;
    let (mut tape, b) = frozen(p);
    let l = aux_total_loss(&mut tape, &b, &px, &py, cfg)?;
    Ok(AuxBreakdown {
        total: tape.value(l.total).item(),
        rec: l.rec,
        byol: l.byol,
        cc: l.cc,
        lambda: l.lambda,
    })
}
