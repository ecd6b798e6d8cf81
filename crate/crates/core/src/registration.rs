//! The primary task: feature matching, correspondence scoring, weighted
//! Procrustes and the supervised registration loss.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud, RigidTransform};
use crate::networks::{encode, score_correspondences, Bound, Group, ParamPartition, PreparedCloud, Trainable};

/// Probabilities entering a log are clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-7;
pub const MIN_TOTAL_WEIGHT: f64 = 1e-12;
pub const RANK_TOL: f64 = 1e-9;
/// Added under the square roots of the transform error terms.
const NORM_EPS: f64 = 1e-12;

/// Matched index pairs `(source, target)` with optional weights and labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrespondenceSet {
    pub pairs: Vec<(usize, usize)>,
    pub weights: Option<Vec<f64>>,
    pub gt_labels: Option<Vec<bool>>,
}

impl CorrespondenceSet {
    pub fn new(pairs: Vec<(usize, usize)>) -> Self {
        Self {
            pairs,
            weights: None,
            gt_labels: None,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn validate(&self, n_src: usize, n_tgt: usize) -> Result<()> {
        if let Some(&(i, j)) = self.pairs.iter().find(|(i, j)| *i >= n_src || *j >= n_tgt) {
            return Err(Error::InvalidArgument(format!("pair ({i}, {j}) out of range {n_src} x {n_tgt}")));
        }
        if let Some(w) = &self.weights {
            if w.len() != self.len() {
                return Err(Error::InvalidArgument(format!("{} weights for {} pairs", w.len(), self.len())));
            }
            if w.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidArgument("weights must lie in [0, 1]".into()));
            }
        }
        if let Some(l) = &self.gt_labels {
            if l.len() != self.len() {
                return Err(Error::InvalidArgument(format!("{} labels for {} pairs", l.len(), self.len())));
            }
        }
        Ok(())
    }

    pub fn source_indices(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.0).collect()
    }

    pub fn target_indices(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.1).collect()
    }

    pub fn inlier_ratio(&self) -> Option<f64> {
        let l = self.gt_labels.as_ref()?;
        (!l.is_empty()).then(|| l.iter().filter(|b| **b).count() as f64 / l.len() as f64)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the row of `set` nearest to `q`; the first one wins ties.
fn nearest_row(q: &[f64], set: &Tensor) -> usize {
    let mut best = (f64::INFINITY, 0);
    for j in 0..set.rows() {
        let d = sq_dist(q, set.row_slice(j));
        if d < best.0 {
            best = (d, j);
        }
    }
    best.1
}

/// Nearest target row for every source row in feature space. With `mutual`,
/// only pairs that are also nearest in the target-to-source direction survive.
pub fn match_features(src: &Tensor, tgt: &Tensor, mutual: bool) -> Result<CorrespondenceSet> {
    if src.rows() == 0 || tgt.rows() == 0 {
        return Err(Error::Empty("feature set"));
    }
    if src.cols() != tgt.cols() {
        return Err(Error::Shape {
            op: "match_features",
            detail: format!("feature dims {} vs {}", src.cols(), tgt.cols()),
        });
    }
    let forward: Vec<usize> = (0..src.rows()).map(|i| nearest_row(src.row_slice(i), tgt)).collect();
    let pairs = if mutual {
        forward
            .iter()
            .enumerate()
            .filter(|(i, &j)| nearest_row(tgt.row_slice(j), src) == *i)
            .map(|(i, &j)| (i, j))
            .collect()
    } else {
        forward.into_iter().enumerate().collect()
    };
    Ok(CorrespondenceSet::new(pairs))
}

/// `label = |R x_i + t - y_j| <= tau_in` for every pair.
pub fn label_inliers(
    corr: &CorrespondenceSet,
    src: &PointCloud,
    tgt: &PointCloud,
    t: &RigidTransform,
    tau_in: f64,
) -> Result<Vec<bool>> {
    if !(tau_in > 0.0) {
        return Err(Error::InvalidArgument(format!("inlier threshold {tau_in} must be positive")));
    }
    corr.validate(src.len(), tgt.len())?;
    let r2 = tau_in * tau_in;
    Ok(corr
        .pairs
        .iter()
        .map(|&(i, j)| crate::geometry::dist2(&t.apply_point(&src.points()[i]), &tgt.points()[j]) <= r2)
        .collect())
}

fn check_pairs(n: usize, total: f64) -> Result<()> {
    if n < 3 {
        return Err(Error::TooFewPairs(n));
    }
    if !(total > MIN_TOTAL_WEIGHT) {
        return Err(Error::ZeroWeight(total));
    }
    Ok(())
}

fn check_rank(m: &Matrix3<f64>) -> Result<()> {
    let sv = m.singular_values();
    let rank = sv.iter().filter(|s| **s > RANK_TOL).count();
    if rank < 2 {
        return Err(Error::DegenerateRank(rank));
    }
    Ok(())
}

/// Minimizer of `sum_k w_k |R x_k + t - y_k|^2` over proper rigid motions.
pub fn weighted_procrustes(src: &[Point], tgt: &[Point], weights: &[f64]) -> Result<RigidTransform> {
    if src.len() != tgt.len() || src.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} sources, {} targets, {} weights",
            src.len(),
            tgt.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidArgument("weights must be finite and non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    check_pairs(src.len(), total)?;
    let (mut xm, mut ym) = (Vector3::zeros(), Vector3::zeros());
    for ((x, y), w) in src.iter().zip(tgt).zip(weights) {
        xm += Vector3::from(*x) * *w;
        ym += Vector3::from(*y) * *w;
    }
    xm /= total;
    ym /= total;
    let mut m = Matrix3::zeros();
    for ((x, y), w) in src.iter().zip(tgt).zip(weights) {
        m += (Vector3::from(*y) - ym) * (Vector3::from(*x) - xm).transpose() * *w;
    }
    m /= total;
    check_rank(&m)?;
    let (r, _, _) = crate::autodiff::tape::polar_factor(&m);
    RigidTransform::new(r, ym - r * xm)
}

/// Weighted Procrustes on a tape: `xs`, `ys` are `M x 3` constants and `w`
/// an `M x 1` weight column. Returns `(R 3x3, t 1x3)`; both are
/// differentiable in `w`, the rotation through the exact polar-factor gradient.
pub fn procrustes_on_tape(tape: &mut Tape, xs: &Tensor, ys: &Tensor, w: Var) -> Result<(Var, Var)> {
    let n = xs.rows();
    if ys.rows() != n || tape.value(w).shape() != (n, 1) || xs.cols() != 3 || ys.cols() != 3 {
        return Err(Error::Shape {
            op: "procrustes",
            detail: format!("{:?}, {:?}, weights {:?}", xs.shape(), ys.shape(), tape.value(w).shape()),
        });
    }
    if tape.value(w).data().iter().any(|v| *v < 0.0) {
        return Err(Error::InvalidArgument("weights must be non-negative".into()));
    }
    check_pairs(n, tape.value(w).sum())?;
    let x = tape.constant(xs.clone());
    let y = tape.constant(ys.clone());
    let total = tape.sum(w)?;
    let wt = tape.transpose(w)?;
    let xsum = tape.matmul(wt, x)?;
    let ysum = tape.matmul(wt, y)?;
    let xm = tape.div_scalar(xsum, total)?;
    let ym = tape.div_scalar(ysum, total)?;
    let xc = tape.sub_row(x, xm)?;
    let yc = tape.sub_row(y, ym)?;
    let wy = tape.mul_col(yc, w)?;
    let wyt = tape.transpose(wy)?;
    let m = tape.matmul(wyt, xc)?;
    let m = tape.div_scalar(m, total)?;
    check_rank(&Matrix3::from_row_slice(tape.value(m).data()))?;
    let r = tape.polar_rotation(m)?;
    let rt = tape.transpose(r)?;
    let rx = tape.matmul(xm, rt)?;
    let t = tape.sub(ym, rx)?;
    Ok((r, t))
}

pub fn transform_from_vars(tape: &Tape, r: Var, t: Var) -> Result<RigidTransform> {
    let rot = Matrix3::from_row_slice(tape.value(r).data());
    let tr = tape.value(t).data();
    RigidTransform::new(rot, Vector3::new(tr[0], tr[1], tr[2]))
}

/// Mean binary cross-entropy of `probs` (`M x 1`) against `labels`, with clamping.
pub fn bce(tape: &mut Tape, probs: Var, labels: &[bool]) -> Result<Var> {
    let m = labels.len();
    if tape.value(probs).shape() != (m, 1) {
        return Err(Error::Shape {
            op: "bce",
            detail: format!("{:?} probabilities for {m} labels", tape.value(probs).shape()),
        });
    }
    if m == 0 {
        return Err(Error::Empty("bce labels"));
    }
    let pos = tape.constant(Tensor::column(labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect()));
    let neg = tape.constant(Tensor::column(labels.iter().map(|&l| if l { 0.0 } else { 1.0 }).collect()));
    let p = tape.clamp(probs, PROB_EPS, 1.0 - PROB_EPS)?;
    let q = tape.scale(probs, -1.0)?;
    let q = tape.add_scalar(q, 1.0)?;
    let q = tape.clamp(q, PROB_EPS, 1.0 - PROB_EPS)?;
    let lp = tape.log(p)?;
    let lq = tape.log(q)?;
    let a = tape.mul(lp, pos)?;
    let b = tape.mul(lq, neg)?;
    let s = tape.add(a, b)?;
    let s = tape.sum(s)?;
    tape.scale(s, -1.0 / m as f64)
}

/// Options shared by the primary pipeline and the loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrimaryConfig {
    /// weight of the transform error terms
    pub lambda_t: f64,
    /// inlier radius, meters
    pub tau_in: f64,
    pub mutual: bool,
}

impl Default for PrimaryConfig {
    fn default() -> Self {
        Self {
            lambda_t: 1.0,
            tau_in: 0.10,
            mutual: false,
        }
    }
}

/// Intermediate nodes of one encode-match-score-align pass.
pub struct Forward {
    pub src_features: Var,
    pub tgt_features: Var,
    pub corr: CorrespondenceSet,
    /// `M x 7` correspondence encodings
    pub encodings: Var,
    pub probs: Var,
    pub rotation: Var,
    pub translation: Var,
}

/// Correspondence encodings `(x_i, y_j, |f_i - g_j|^2)` for matched pairs.
pub fn encode_correspondences(
    tape: &mut Tape,
    corr: &CorrespondenceSet,
    src: &PreparedCloud,
    tgt: &PreparedCloud,
    fx: Var,
    fy: Var,
) -> Result<Var> {
    let (si, ti) = (corr.source_indices(), corr.target_indices());
    let gx = tape.gather_rows(fx, &si)?;
    let gy = tape.gather_rows(fy, &ti)?;
    let diff = tape.sub(gx, gy)?;
    let sq = tape.square(diff)?;
    let d = tape.sum_cols(sq)?;
    let xs = tape.constant(gather(&src.coords, &si));
    let ys = tape.constant(gather(&tgt.coords, &ti));
    tape.concat_cols(&[xs, ys, d])
}

pub(crate) fn gather(t: &Tensor, idx: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(idx.len() * t.cols());
    for &i in idx {
        data.extend_from_slice(t.row_slice(i));
    }
    Tensor::new(idx.len(), t.cols(), data).expect("consistent gather shape")
}

/// Runs the primary pipeline on a tape with the encoder in `Shar` and the
/// rejection head of `head` (`Pri` for registration).
pub fn forward(
    tape: &mut Tape,
    b: &Bound,
    head: Group,
    src: &PreparedCloud,
    tgt: &PreparedCloud,
    mutual: bool,
) -> Result<Forward> {
    let fx = encode(tape, b, Group::Shar, src)?;
    let fy = encode(tape, b, Group::Shar, tgt)?;
    let mut corr = match_features(tape.value(fx), tape.value(fy), mutual)?;
    if corr.len() < 3 {
        // mutual filtering can leave too few pairs; fall back to one-directional matches
        corr = match_features(tape.value(fx), tape.value(fy), false)?;
    }
    let enc = encode_correspondences(tape, &corr, src, tgt, fx, fy)?;
    let probs = score_correspondences(tape, b, head, enc)?;
    let xs = gather(&src.coords, &corr.source_indices());
    let ys = gather(&tgt.coords, &corr.target_indices());
    let (rotation, translation) = procrustes_on_tape(tape, &xs, &ys, probs)?;
    corr.weights = Some(tape.value(probs).data().to_vec());
    Ok(Forward {
        src_features: fx,
        tgt_features: fy,
        corr,
        encodings: enc,
        probs,
        rotation,
        translation,
    })
}

pub struct PrimaryLoss {
    pub total: Var,
    pub bce: Var,
    pub transform: Var,
    pub forward: Forward,
}

/// `L_pri = BCE(p, labels) + lambda_t * (|R - R*|_F + |t - t*|)`.
pub fn primary_loss(
    tape: &mut Tape,
    b: &Bound,
    src: &PreparedCloud,
    tgt: &PreparedCloud,
    gt: &RigidTransform,
    cfg: &PrimaryConfig,
) -> Result<PrimaryLoss> {
    let mut fwd = forward(tape, b, Group::Pri, src, tgt, cfg.mutual)?;
    let labels = label_inliers(&fwd.corr, &src.cloud, &tgt.cloud, gt, cfg.tau_in)?;
    let bce_term = bce(tape, fwd.probs, &labels)?;
    fwd.corr.gt_labels = Some(labels);
    let transform = transform_loss(tape, fwd.rotation, fwd.translation, gt)?;
    let weighted = tape.scale(transform, cfg.lambda_t)?;
    let total = tape.add(bce_term, weighted)?;
    Ok(PrimaryLoss {
        total,
        bce: bce_term,
        transform,
        forward: fwd,
    })
}

/// `|R - R*|_F + |t - t*|_2` with a tiny floor under each root.
pub fn transform_loss(tape: &mut Tape, r: Var, t: Var, gt: &RigidTransform) -> Result<Var> {
    let rs = tape.constant(Tensor::new(3, 3, crate::autodiff::tape::matrix_to_row_major(&gt.rotation))?);
    let ts = tape.constant(Tensor::row(gt.translation.iter().copied().collect()));
    let dr = tape.sub(r, rs)?;
    let dr = tape.square(dr)?;
    let dr = tape.sum(dr)?;
    let dr = tape.add_scalar(dr, NORM_EPS)?;
    let dr = tape.sqrt(dr)?;
    let dt = tape.sub(t, ts)?;
    let dt = tape.square(dt)?;
    let dt = tape.sum(dt)?;
    let dt = tape.add_scalar(dt, NORM_EPS)?;
    let dt = tape.sqrt(dt)?;
    tape.add(dr, dt)
}

/// Output of [`register`].
#[derive(Debug, Clone, PartialEq)]
pub struct Registration {
    pub transform: RigidTransform,
    pub corr: CorrespondenceSet,
}

pub fn register_prepared(
    p: &ParamPartition,
    src: &PreparedCloud,
    tgt: &PreparedCloud,
    mutual: bool,
) -> Result<Registration> {
    let mut tape = Tape::new();
    let b = Bound::bind(&mut tape, p, Trainable::NONE);
    let fwd = forward(&mut tape, &b, Group::Pri, src, tgt, mutual)?;
    Ok(Registration {
        transform: transform_from_vars(&tape, fwd.rotation, fwd.translation)?,
        corr: fwd.corr,
    })
}

/// Estimates the motion taking `x` onto `y`: encode, match, score, align.
pub fn register(p: &ParamPartition, x: &PointCloud, y: &PointCloud, mutual: bool) -> Result<Registration> {
    let src = PreparedCloud::new(x, p.config.k)?;
    let tgt = PreparedCloud::new(y, p.config.k)?;
    register_prepared(p, &src, &tgt, mutual)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{apply_transform, rotation_error, sample_random_transform, translation_error};
    use crate::rng::substream;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn random_points(seed: u64, n: usize) -> Vec<Point> {
        let mut rng = substream(seed, "pts");
        (0..n)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect()
    }

    fn random_tensor(seed: u64, r: usize, c: usize) -> Tensor {
        let mut rng = substream(seed, "t");
        Tensor::new(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identical_features_match_identically() {
        let f = random_tensor(1, 20, 8);
        let c = match_features(&f, &f, false).unwrap();
        assert_eq!(c.pairs, (0..20).map(|i| (i, i)).collect::<Vec<_>>());
        let m = match_features(&f, &f, true).unwrap();
        assert_eq!(m.len(), 20);
    }

    #[test]
    fn one_pair_per_source() {
        let c = match_features(&random_tensor(2, 2, 4), &random_tensor(3, 3, 4), false).unwrap();
        assert_eq!(c.len(), 2);
        assert!(match_features(&random_tensor(2, 2, 4), &random_tensor(3, 3, 5), false).is_err());
    }

    #[test]
    fn ties_go_to_smallest_target() {
        let src = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let tgt = Tensor::from_rows(&[vec![2.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        assert_eq!(match_features(&src, &tgt, false).unwrap().pairs, vec![(0, 1)]);
    }

    #[test]
    fn inlier_labels() {
        let pts = random_points(4, 10);
        let c = PointCloud::new(pts.clone()).unwrap();
        let corr = CorrespondenceSet::new((0..10).map(|i| (i, i)).collect());
        let all = label_inliers(&corr, &c, &c, &RigidTransform::identity(), 1e-6).unwrap();
        assert!(all.iter().all(|b| *b));
        let mut shifted = pts;
        shifted[3][0] += 1.0;
        let d = PointCloud::new(shifted).unwrap();
        let l = label_inliers(&corr, &c, &d, &RigidTransform::identity(), 0.1).unwrap();
        assert!(!l[3] && l.iter().filter(|b| **b).count() == 9);
        assert!(label_inliers(&corr, &c, &d, &RigidTransform::identity(), 0.0).is_err());
    }

    #[test]
    fn procrustes_identity_and_recovery() {
        let x = random_points(5, 32);
        let t = weighted_procrustes(&x, &x, &[1.0; 32]).unwrap();
        assert!((t.rotation - Matrix3::identity()).abs().max() < 1e-9);
        assert!(t.translation.norm() < 1e-9);

        let gt = sample_random_transform(&mut substream(5, "gt"), 360.0, 0.6);
        let y: Vec<Point> = x.iter().map(|p| gt.apply_point(p)).collect();
        let est = weighted_procrustes(&x, &y, &[1.0; 32]).unwrap();
        assert!(rotation_error(&est, &gt) < 1e-6);
        assert!(translation_error(&est, &gt) < 1e-9);
    }

    #[test]
    fn procrustes_errors_are_distinct() {
        let x = random_points(6, 8);
        assert!(matches!(weighted_procrustes(&x[..2], &x[..2], &[1.0; 2]), Err(Error::TooFewPairs(2))));
        assert!(matches!(weighted_procrustes(&x, &x, &[0.0; 8]), Err(Error::ZeroWeight(_))));
        let line: Vec<Point> = (0..8).map(|i| [i as f64, 2.0 * i as f64, 0.5]).collect();
        assert!(matches!(weighted_procrustes(&line, &line, &[1.0; 8]), Err(Error::DegenerateRank(_))));
    }

    #[test]
    fn tape_procrustes_agrees_with_direct() {
        let x = random_points(7, 16);
        let gt = sample_random_transform(&mut substream(7, "gt"), 360.0, 0.6);
        let mut rng = substream(7, "noise");
        let y: Vec<Point> = x
            .iter()
            .map(|p| gt.apply_point(p).map(|c| c + rng.random_range(-0.05..0.05)))
            .collect();
        let w: Vec<f64> = (0..16).map(|_| rng.random_range(0.1..1.0)).collect();
        let direct = weighted_procrustes(&x, &y, &w).unwrap();
        let mut tape = Tape::new();
        let wv = tape.param(Tensor::column(w));
        let (r, t) = procrustes_on_tape(
            &mut tape,
            &Tensor::new(16, 3, x.concat()).unwrap(),
            &Tensor::new(16, 3, y.concat()).unwrap(),
            wv,
        )
        .unwrap();
        let via_tape = transform_from_vars(&tape, r, t).unwrap();
        assert!((via_tape.rotation - direct.rotation).abs().max() < 1e-12);
        assert!((via_tape.translation - direct.translation).abs().max() < 1e-12);
    }

    #[test]
    fn bce_fixtures() {
        let labels = [true, false, true, true];
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::column(vec![0.5; 4]));
        let l = bce(&mut tape, p, &labels).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
        let q = tape.constant(Tensor::column(vec![1.0, 0.0, 1.0, 1.0]));
        let l = bce(&mut tape, q, &labels).unwrap();
        assert!(tape.value(l).item() < 1e-6);
    }

    #[test]
    fn bce_is_minimized_at_inlier_rate() {
        let labels: Vec<bool> = (0..40).map(|i| i % 5 < 2).collect();
        let at = |v: f64| {
            let mut tape = Tape::new();
            let p = tape.constant(Tensor::column(vec![v; 40]));
            let l = bce(&mut tape, p, &labels).unwrap();
            tape.value(l).item()
        };
        let best = (1..100).map(|i| i as f64 / 100.0).min_by(|a, b| at(*a).total_cmp(&at(*b))).unwrap();
        assert!((best - 0.4).abs() < 1e-9);
    }

    #[test]
    fn transform_loss_vanishes_at_truth() {
        let gt = sample_random_transform(&mut substream(8, "gt"), 360.0, 0.6);
        let mut tape = Tape::new();
        let r = tape.constant(Tensor::new(3, 3, crate::autodiff::tape::matrix_to_row_major(&gt.rotation)).unwrap());
        let t = tape.constant(Tensor::row(gt.translation.iter().copied().collect()));
        let l = transform_loss(&mut tape, r, t, &gt).unwrap();
        assert!(tape.value(l).item() < 1e-5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn procrustes_weight_scale_invariant(seed in any::<u64>(), c in 0.01f64..100.0) {
            let x = random_points(seed, 12);
            let mut rng = substream(seed, "w");
            let gt = sample_random_transform(&mut rng, 360.0, 0.6);
            let y: Vec<Point> = x.iter().map(|p| gt.apply_point(p).map(|v| v + rng.random_range(-0.1..0.1))).collect();
            let w: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..1.0)).collect();
            let scaled: Vec<f64> = w.iter().map(|v| v * c).collect();
            let a = weighted_procrustes(&x, &y, &w).unwrap();
            let b = weighted_procrustes(&x, &y, &scaled).unwrap();
            prop_assert!((a.rotation - b.rotation).abs().max() < 1e-10);
            prop_assert!((a.translation - b.translation).abs().max() < 1e-10);
        }

        #[test]
        fn procrustes_solution_is_fixed_point(seed in any::<u64>()) {
            let x = random_points(seed, 16);
            let gt = sample_random_transform(&mut substream(seed, "gt"), 360.0, 0.6);
            let y: Vec<Point> = x.iter().map(|p| gt.apply_point(p)).collect();
            let est = weighted_procrustes(&x, &y, &[1.0; 16]).unwrap();
            let moved = apply_transform(&PointCloud::new(x.clone()).unwrap(), &est);
            let again = weighted_procrustes(moved.points(), &y, &[1.0; 16]).unwrap();
            prop_assert!((again.rotation - Matrix3::identity()).abs().max() < 1e-9);
            prop_assert!(again.translation.norm() < 1e-9);
        }

        #[test]
        fn zero_weighted_outliers_are_ignored(seed in any::<u64>()) {
            let n = 30;
            let x = random_points(seed, n);
            let mut rng = substream(seed, "gt");
            let gt = sample_random_transform(&mut rng, 360.0, 0.6);
            let mut y: Vec<Point> = x.iter().map(|p| gt.apply_point(p)).collect();
            let mut w = vec![1.0; n];
            for k in 0..n / 5 {
                y[k] = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
                w[k] = 0.0;
            }
            let est = weighted_procrustes(&x, &y, &w).unwrap();
            let masked = weighted_procrustes(&x[n / 5..], &y[n / 5..], &w[n / 5..]).unwrap();
            prop_assert!(rotation_error(&est, &gt) < 1e-6);
            prop_assert!(translation_error(&est, &gt) < 1e-9);
            prop_assert!((est.rotation - masked.rotation).abs().max() < 1e-12);
        }
    }
}
