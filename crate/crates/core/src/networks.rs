//! Parameterized model components.
//!
//! The encoder is a dense per-point network. Each point is described by
//! rotation-invariant statistics of its k-NN neighborhood at two scales plus
//! its coordinates in the principal-axes frame of the whole cloud. Two dense
//! layers run per point, then the hidden state is pooled over the neighborhood
//! (mean and max), and two more dense layers give L2-normalized features.
//!
//! Parameters are split into named stores: `shar` (encoder), `pri` (primary
//! rejection head), `aux` (decoder, BYOL projector and predictor, auxiliary
//! rejection head), `balance` (the three task balancing scalars) and
//! `byol_target` (EMA copy of encoder and projector).

use std::cmp::Ordering;
use std::collections::BTreeMap;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradMap, Gradients, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};
use crate::rng::Rng;

/// Scale applied to metric descriptor entries so they are O(1) at room scale.
pub const DESCRIPTOR_SCALE: f64 = 4.0;
pub const CANONICAL_SCALE: f64 = 0.25;
/// Per-scale descriptor width.
const SCALE_FEATURES: usize = 7;
pub const INPUT_DIM: usize = 2 * SCALE_FEATURES + 3;
/// Initial weight scale of the last encoder layer relative to He init, so
/// fresh features are dominated by the descriptor skip path.
pub const ENC_OUT_INIT_SCALE: f64 = 0.1;
/// Width of a correspondence encoding: source xyz, target xyz, feature distance.
pub const CORR_DIM: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub feature_dim: usize,
    pub hidden: usize,
    pub agg_hidden: usize,
    /// neighborhood size, the point itself included
    pub k: usize,
    pub decoder_hidden: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub head_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            hidden: 32,
            agg_hidden: 64,
            k: 16,
            decoder_hidden: 64,
            proj_hidden: 64,
            proj_dim: 32,
            head_hidden: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 8 {
            return Err(Error::Config(format!("feature_dim {} < 8", self.feature_dim)));
        }
        if self.k < 1 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        let widths = [
            self.hidden,
            self.agg_hidden,
            self.decoder_hidden,
            self.proj_hidden,
            self.proj_dim,
            self.head_hidden,
        ];
        if widths.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    /// `(name, rows, cols)` of every layer, grouped by store.
    fn layout(&self) -> [(Group, &'static str, Vec<(usize, usize)>); 7] {
        let (d, h) = (self.feature_dim, self.hidden);
        let head = vec![(CORR_DIM, self.head_hidden), (self.head_hidden, self.head_hidden), (self.head_hidden, 1)];
        [
            (
                Group::Shar,
                "enc",
                vec![(INPUT_DIM, h), (h, h), (3 * h, self.agg_hidden), (self.agg_hidden, d)],
            ),
            (Group::Pri, "pri", head.clone()),
            (
                Group::Aux,
                "dec",
                vec![(d, self.decoder_hidden), (self.decoder_hidden, self.decoder_hidden), (self.decoder_hidden, 3)],
            ),
            (Group::Aux, "proj", vec![(d, self.proj_hidden), (self.proj_hidden, self.proj_dim)]),
            (Group::Aux, "pred", vec![(self.proj_dim, self.proj_hidden), (self.proj_hidden, self.proj_dim)]),
            (Group::Aux, "cc", head),
            (Group::Balance, "bal", vec![]),
        ]
    }
}

/// Which store a parameter lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Shar,
    Pri,
    Aux,
    Balance,
    Target,
}

impl Group {
    pub const ALL: [Group; 5] = [Group::Shar, Group::Pri, Group::Aux, Group::Balance, Group::Target];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Shar => "shar",
            Group::Pri => "pri",
            Group::Aux => "aux",
            Group::Balance => "balance",
            Group::Target => "byol_target",
        }
    }
}

pub const BALANCE_PARAM: &str = "bal.c";

#[derive(Debug, Clone, PartialEq)]
pub struct ParamPartition {
    pub config: EncoderConfig,
    pub shar: ParamStore,
    pub pri: ParamStore,
    pub aux: ParamStore,
    pub balance: ParamStore,
    pub byol_target: ParamStore,
}

fn layer_names(prefix: &str, i: usize) -> (String, String) {
    (format!("{prefix}.{i}.w"), format!("{prefix}.{i}.b"))
}

fn is_target_mirror(name: &str) -> bool {
    name.starts_with("enc.") || name.starts_with("proj.")
}

impl ParamPartition {
    /// He-normal weights, zero biases, balancing scalars at one, target = online copy.
    pub fn init(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut p = Self {
            config,
            shar: ParamStore::new(),
            pri: ParamStore::new(),
            aux: ParamStore::new(),
            balance: ParamStore::new(),
            byol_target: ParamStore::new(),
        };
        for (group, prefix, layers) in config.layout() {
            for (i, (fan_in, fan_out)) in layers.into_iter().enumerate() {
                let mut std = (2.0 / fan_in as f64).sqrt();
                if prefix == "enc" && i == 3 {
                    std *= ENC_OUT_INIT_SCALE;
                }
                let normal = Normal::new(0.0, std).expect("finite std");
                let w: Vec<f64> = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
                let (wn, bn) = layer_names(prefix, i);
                let store = p.store_mut(group);
                store.insert(wn, Tensor::new(fan_in, fan_out, w)?)?;
                store.insert(bn, Tensor::zeros(1, fan_out))?;
            }
        }
        p.balance.insert(BALANCE_PARAM, Tensor::filled(1, 3, 1.0))?;
        p.byol_target = p.online_mirror();
        Ok(p)
    }

    pub fn store(&self, g: Group) -> &ParamStore {
        match g {
            Group::Shar => &self.shar,
            Group::Pri => &self.pri,
            Group::Aux => &self.aux,
            Group::Balance => &self.balance,
            Group::Target => &self.byol_target,
        }
    }

    pub fn store_mut(&mut self, g: Group) -> &mut ParamStore {
        match g {
            Group::Shar => &mut self.shar,
            Group::Pri => &mut self.pri,
            Group::Aux => &mut self.aux,
            Group::Balance => &mut self.balance,
            Group::Target => &mut self.byol_target,
        }
    }

    /// The online tensors that the BYOL target tracks: encoder and projector.
    pub fn online_mirror(&self) -> ParamStore {
        let tensors = self
            .shar
            .iter()
            .chain(self.aux.iter())
            .filter(|(n, _)| is_target_mirror(n))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        ParamStore::from_tensors(tensors)
    }

    pub fn balance_c(&self) -> Result<[f64; 3]> {
        let c = self
            .balance
            .get(BALANCE_PARAM)
            .ok_or_else(|| Error::Invariant("balance parameters missing".into()))?;
        Ok([c.data()[0], c.data()[1], c.data()[2]])
    }

    /// Count of trainable scalars (the target copy excluded).
    pub fn num_trainable(&self) -> usize {
        [&self.shar, &self.pri, &self.aux, &self.balance].iter().map(|s| s.num_scalars()).sum()
    }

    /// Checks the partition invariants and that shapes agree with `config`.
    pub fn validate(&self) -> Result<()> {
        let fresh = Self::init(self.config, &mut crate::rng::substream(0, "shape-template"))?;
        for g in Group::ALL {
            let (a, b) = (self.store(g), fresh.store(g));
            if a.len() != b.len() {
                return Err(Error::Config(format!("store {} has {} tensors, expected {}", g.as_str(), a.len(), b.len())));
            }
            for (name, t) in b.iter() {
                match a.get(name) {
                    Some(x) if x.shape() == t.shape() => {}
                    Some(x) => {
                        return Err(Error::Shape {
                            op: "load",
                            detail: format!("{}/{name}: {:?} vs {:?}", g.as_str(), x.shape(), t.shape()),
                        })
                    }
                    None => return Err(Error::Config(format!("{}/{name} missing", g.as_str()))),
                }
                if !a.get(name).is_some_and(|x| x.all_finite()) {
                    return Err(Error::NonFinite(format!("{}/{name}", g.as_str())));
                }
            }
        }
        if self.balance_c()?.contains(&0.0) {
            return Err(Error::Config("balancing scalars must be nonzero".into()));
        }
        Ok(())
    }

    /// Stable digest over every tensor of every store.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for g in Group::ALL {
            for (name, t) in self.store(g).iter() {
                h.update(g.as_str().as_bytes());
                h.update(name.as_bytes());
                for v in t.data() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }
}

/// In-place `target <- tau * target + (1 - tau) * online` for every target tensor.
pub fn ema_update(target: &mut ParamStore, online: &ParamStore, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("EMA decay {tau} outside [0, 1]")));
    }
    for (name, t) in online.iter() {
        if target.get(name).map(|x| x.shape()) != Some(t.shape()) {
            return Err(Error::Shape {
                op: "ema_update",
                detail: format!("{name} missing from target or shaped differently"),
            });
        }
    }
    if target.len() != online.len() {
        return Err(Error::Shape {
            op: "ema_update",
            detail: format!("target has {} tensors, online {}", target.len(), online.len()),
        });
    }
    for (name, t) in online.iter() {
        let x = target.get_mut(name).expect("checked above");
        for (a, b) in x.data_mut().iter_mut().zip(t.data()) {
            *a = tau * *a + (1.0 - tau) * b;
        }
    }
    Ok(())
}

/// Which stores enter a tape as trainable leaves. The target store never does.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub shar: bool,
    pub pri: bool,
    pub aux: bool,
    pub balance: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable { shar: true, pri: true, aux: true, balance: true };
    pub const NONE: Trainable = Trainable { shar: false, pri: false, aux: false, balance: false };

    fn get(&self, g: Group) -> bool {
        match g {
            Group::Shar => self.shar,
            Group::Pri => self.pri,
            Group::Aux => self.aux,
            Group::Balance => self.balance,
            Group::Target => false,
        }
    }
}

/// Gradients split by store.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PartitionGrads {
    pub shar: GradMap,
    pub pri: GradMap,
    pub aux: GradMap,
    pub balance: GradMap,
}

impl PartitionGrads {
    pub fn get(&self, g: Group) -> Option<&GradMap> {
        match g {
            Group::Shar => Some(&self.shar),
            Group::Pri => Some(&self.pri),
            Group::Aux => Some(&self.aux),
            Group::Balance => Some(&self.balance),
            Group::Target => None,
        }
    }

    pub fn get_mut(&mut self, g: Group) -> Option<&mut GradMap> {
        match g {
            Group::Shar => Some(&mut self.shar),
            Group::Pri => Some(&mut self.pri),
            Group::Aux => Some(&mut self.aux),
            Group::Balance => Some(&mut self.balance),
            Group::Target => None,
        }
    }

    /// `self += s * other`, entry by entry.
    pub fn axpy(&mut self, s: f64, other: &PartitionGrads) {
        for g in [Group::Shar, Group::Pri, Group::Aux, Group::Balance] {
            let dst = self.get_mut(g).expect("trainable group");
            for (name, t) in other.get(g).expect("trainable group") {
                match dst.get_mut(name) {
                    Some(d) => d.axpy(s, t),
                    None => {
                        dst.insert(name.clone(), t.scaled(s));
                    }
                }
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        [&self.shar, &self.pri, &self.aux, &self.balance]
            .iter()
            .all(|m| m.values().all(|t| t.all_finite()))
    }

    pub fn norm(&self) -> f64 {
        [&self.shar, &self.pri, &self.aux, &self.balance]
            .iter()
            .flat_map(|m| m.values())
            .map(|t| t.dot(t))
            .sum::<f64>()
            .sqrt()
    }
}

/// A partition bound to a tape.
pub struct Bound {
    vars: BTreeMap<(Group, String), Var>,
    pub config: EncoderConfig,
}

impl Bound {
    pub fn bind(tape: &mut Tape, p: &ParamPartition, trainable: Trainable) -> Self {
        let mut vars = BTreeMap::new();
        for g in Group::ALL {
            for (name, t) in p.store(g).iter() {
                let v = if trainable.get(g) { tape.param(t.clone()) } else { tape.constant(t.clone()) };
                vars.insert((g, name.clone()), v);
            }
        }
        Self { vars, config: p.config }
    }

    pub fn var(&self, g: Group, name: &str) -> Result<Var> {
        self.vars
            .get(&(g, name.to_string()))
            .copied()
            .ok_or_else(|| Error::Invariant(format!("parameter {}/{name} not bound", g.as_str())))
    }

    /// Consecutive `(w, b)` layers `prefix.0`, `prefix.1`, ... of a store.
    pub fn layers(&self, g: Group, prefix: &str) -> Result<Vec<(Var, Var)>> {
        let mut out = Vec::new();
        loop {
            let (wn, bn) = layer_names(prefix, out.len());
            match (self.vars.get(&(g, wn)), self.vars.get(&(g, bn))) {
                (Some(w), Some(b)) => out.push((*w, *b)),
                _ => break,
            }
        }
        if out.is_empty() {
            return Err(Error::Invariant(format!("no layers {prefix} in {}", g.as_str())));
        }
        Ok(out)
    }

    pub fn grads(&self, tape: &Tape, grads: &Gradients) -> PartitionGrads {
        let mut out = PartitionGrads::default();
        for ((g, name), v) in &self.vars {
            if let (Some(dst), Some(t)) = (out.get_mut(*g), grads.get(*v)) {
                if tape.requires_grad(*v) {
                    dst.insert(name.clone(), t.clone());
                }
            }
        }
        out
    }
}

/// Geometry-derived encoder inputs for one cloud; independent of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedCloud {
    pub cloud: PointCloud,
    /// `N x INPUT_DIM`
    pub inputs: Tensor,
    /// `N * k` neighbor indices, nearest first, the point itself included
    pub neighbors: Vec<usize>,
    pub k: usize,
    /// `N x 3` coordinates in the principal-axes frame of the cloud
    pub canonical: Tensor,
    /// `N x 3` raw coordinates
    pub coords: Tensor,
}

fn lex_cmp(a: &Point, b: &Point) -> Ordering {
    a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])).then(a[2].total_cmp(&b[2]))
}

/// k nearest neighbors of every point. Ties are broken by coordinates and
/// then by index, so duplicate points get identical neighbor value lists and
/// any permutation of the input permutes the lists consistently.
pub fn knn(points: &[Point], k: usize) -> Vec<usize> {
    let n = points.len();
    let k = k.min(n);
    let mut out = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for p in points {
        cand.clear();
        cand.extend(points.iter().enumerate().map(|(j, q)| (crate::geometry::dist2(p, q), j)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| {
            a.0.total_cmp(&b.0)
                .then_with(|| lex_cmp(&points[a.1], &points[b.1]))
                .then(a.1.cmp(&b.1))
        };
        if k < n {
            cand.select_nth_unstable_by(k - 1, cmp);
            cand.truncate(k);
        }
        cand.sort_by(cmp);
        out.extend(cand.iter().map(|c| c.1));
    }
    out
}

/// Covariance eigen-decomposition of `pts` around their mean, eigenvalues descending.
fn principal_axes(pts: &[Point]) -> (Vector3<f64>, [f64; 3], Matrix3<f64>) {
    let n = pts.len() as f64;
    let mut c = Vector3::zeros();
    for p in pts {
        c += Vector3::from(*p);
    }
    c /= n;
    let mut cov = Matrix3::zeros();
    for p in pts {
        let d = Vector3::from(*p) - c;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = order.map(|i| eig.eigenvalues[i].max(0.0));
    let vecs = Matrix3::from_columns(&order.map(|i| eig.eigenvectors.column(i).into_owned()));
    (c, vals, vecs)
}

fn local_descriptor(p: &Point, nbrs: &[Point]) -> [f64; SCALE_FEATURES] {
    let (c, l, axes) = principal_axes(nbrs);
    let eps = 1e-12;
    let pv = Vector3::from(*p);
    let offset = pv - c;
    let normal = axes.column(2);
    let mean_dist = nbrs
        .iter()
        .map(|q| crate::geometry::dist2(p, q).sqrt())
        .sum::<f64>()
        / nbrs.len() as f64;
    [
        (l[0] - l[1]) / (l[0] + eps),
        (l[1] - l[2]) / (l[0] + eps),
        l[2] / (l[0] + eps),
        (l[0] + l[1] + l[2]).sqrt() * DESCRIPTOR_SCALE,
        mean_dist * DESCRIPTOR_SCALE,
        offset.norm() * DESCRIPTOR_SCALE,
        offset.dot(&normal).abs() * DESCRIPTOR_SCALE,
    ]
}

/// Coordinates in the cloud's principal-axes frame. Axis signs follow the
/// third moment along each axis and the last axis completes a right-handed
/// frame, so a rigid motion of the input leaves the result unchanged in
/// generic position.
fn canonical_coordinates(points: &[Point]) -> Vec<Point> {
    let mut sorted = points.to_vec();
    sorted.sort_by(lex_cmp);
    let (c, _, axes) = principal_axes(&sorted);
    let mut a: Vec<Vector3<f64>> = (0..2).map(|i| axes.column(i).into_owned()).collect();
    for axis in a.iter_mut() {
        let skew: f64 = sorted.iter().map(|p| (Vector3::from(*p) - c).dot(axis).powi(3)).sum();
        if skew < 0.0 {
            *axis = -*axis;
        }
    }
    let third = a[0].cross(&a[1]);
    points
        .iter()
        .map(|p| {
            let d = Vector3::from(*p) - c;
            [d.dot(&a[0]), d.dot(&a[1]), d.dot(&third)]
        })
        .collect()
}

impl PreparedCloud {
    pub fn new(cloud: &PointCloud, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("neighborhood size must be positive".into()));
        }
        let pts = cloud.points();
        let n = pts.len();
        let k = k.min(n);
        let neighbors = knn(pts, k);
        let small = (k / 2).max(1);
        let mut inputs = Vec::with_capacity(n * INPUT_DIM);
        let canonical = canonical_coordinates(pts);
        let mut buf = Vec::with_capacity(k);
        for (i, p) in pts.iter().enumerate() {
            buf.clear();
            buf.extend(neighbors[i * k..(i + 1) * k].iter().map(|&j| pts[j]));
            inputs.extend_from_slice(&local_descriptor(p, &buf[..small]));
            inputs.extend_from_slice(&local_descriptor(p, &buf));
            inputs.extend(canonical[i].iter().map(|c| c * CANONICAL_SCALE));
        }
        Ok(Self {
            cloud: cloud.clone(),
            inputs: Tensor::new(n, INPUT_DIM, inputs)?,
            neighbors,
            k,
            canonical: Tensor::new(n, 3, canonical.concat())?,
            coords: Tensor::new(n, 3, pts.concat())?,
        })
    }

    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }
}

pub fn linear(tape: &mut Tape, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Dense layers with ReLU between them (none after the last). With
/// `context_norm`, every hidden layer is standardized across rows before its ReLU.
pub fn mlp(tape: &mut Tape, mut x: Var, layers: &[(Var, Var)], context_norm: bool) -> Result<Var> {
    for (i, layer) in layers.iter().enumerate() {
        x = linear(tape, x, *layer)?;
        if i + 1 < layers.len() {
            if context_norm {
                x = tape.context_norm(x)?;
            }
            x = tape.relu(x)?;
        }
    }
    Ok(x)
}

/// Per-point features (`N x D`, unit rows) using the encoder in `group`
/// (`Shar` for the online network, `Target` for the BYOL target).
pub fn encode(tape: &mut Tape, b: &Bound, group: Group, cloud: &PreparedCloud) -> Result<Var> {
    let l = b.layers(group, "enc")?;
    if l.len() != 4 {
        return Err(Error::Invariant(format!("encoder has {} layers", l.len())));
    }
    let x = tape.constant(cloud.inputs.clone());
    let h = linear(tape, x, l[0])?;
    let h = tape.relu(h)?;
    let h = linear(tape, h, l[1])?;
    let h = tape.relu(h)?;
    let mean = tape.neighbor_mean(h, &cloud.neighbors, cloud.k)?;
    let max = tape.neighbor_max(h, &cloud.neighbors, cloud.k)?;
    let h = tape.concat_cols(&[h, mean, max])?;
    let h = linear(tape, h, l[2])?;
    let h = tape.relu(h)?;
    let f = linear(tape, h, l[3])?;
    let skip = tape.constant(skip_embedding(b.config.feature_dim));
    let skip = tape.matmul(x, skip)?;
    let f = tape.add(f, skip)?;
    tape.l2_normalize_rows(f)
}

/// Fixed `INPUT_DIM x D` map adding input channel `j` to feature channel `j mod D`.
fn skip_embedding(d: usize) -> Tensor {
    let mut e = Tensor::zeros(INPUT_DIM, d);
    for j in 0..INPUT_DIM {
        e.set(j, j % d, 1.0);
    }
    e
}

/// Index-aligned reconstruction `N x 3` from per-point features.
pub fn decode(tape: &mut Tape, b: &Bound, features: Var) -> Result<Var> {
    let l = b.layers(Group::Aux, "dec")?;
    mlp(tape, features, &l, false)
}

/// BYOL projection of a pooled `1 x D` feature, with projector weights from `group`.
pub fn byol_project(tape: &mut Tape, b: &Bound, group: Group, pooled: Var) -> Result<Var> {
    let g = if group == Group::Target { Group::Target } else { Group::Aux };
    let l = b.layers(g, "proj")?;
    mlp(tape, pooled, &l, false)
}

pub fn byol_predict(tape: &mut Tape, b: &Bound, z: Var) -> Result<Var> {
    let l = b.layers(Group::Aux, "pred")?;
    mlp(tape, z, &l, false)
}

/// Rejection head: inlier probability `M x 1` for correspondence encodings `M x 7`.
/// `head` is `Pri` for the primary head and `Aux` for the auxiliary copy.
pub fn score_correspondences(tape: &mut Tape, b: &Bound, head: Group, corr: Var) -> Result<Var> {
    let (rows, cols) = tape.value(corr).shape();
    if rows == 0 {
        return Err(Error::Empty("correspondence set"));
    }
    if cols != CORR_DIM {
        return Err(Error::Shape {
            op: "score_correspondences",
            detail: format!("encoding width {cols}, expected {CORR_DIM}"),
        });
    }
    let prefix = match head {
        Group::Pri => "pri",
        Group::Aux => "cc",
        other => return Err(Error::InvalidArgument(format!("no rejection head in {}", other.as_str()))),
    };
    let l = b.layers(head, prefix)?;
    let logits = mlp(tape, corr, &l, true)?;
    tape.sigmoid(logits)
}

fn frozen_tape(p: &ParamPartition) -> (Tape, Bound) {
    let mut tape = Tape::new();
    let b = Bound::bind(&mut tape, p, Trainable::NONE);
    (tape, b)
}

/// Per-point features of `cloud` under the online encoder.
pub fn encode_points(p: &ParamPartition, cloud: &PointCloud) -> Result<Tensor> {
    let prepared = PreparedCloud::new(cloud, p.config.k)?;
    let (mut tape, b) = frozen_tape(p);
    let f = encode(&mut tape, &b, Group::Shar, &prepared)?;
    Ok(tape.value(f).clone())
}

pub fn decode_points(p: &ParamPartition, features: &Tensor) -> Result<Tensor> {
    if features.cols() != p.config.feature_dim {
        return Err(Error::Shape {
            op: "decode_points",
            detail: format!("{} feature columns, expected {}", features.cols(), p.config.feature_dim),
        });
    }
    let (mut tape, b) = frozen_tape(p);
    let f = tape.constant(features.clone());
    let out = decode(&mut tape, &b, f)?;
    Ok(tape.value(out).clone())
}
