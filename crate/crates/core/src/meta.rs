//! Training regimes: joint training, meta-auxiliary training (first-order
//! MAML with an auxiliary inner loop) and per-instance test-time adaptation.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::checkpoint::{read_named_tensors, write_named_tensors};
use crate::autodiff::{AdamConfig, AdamState, ParamStore, Tape, Tensor};
use crate::auxiliary::{aux_total_loss, AuxConfig, AuxFlags, AuxInputs};
use crate::error::{Error, Result};
use crate::geometry::{EvalThresholds, RegistrationResult, RigidTransform};
use crate::networks::{ema_update, Bound, EncoderConfig, Group, ParamPartition, PartitionGrads, PreparedCloud, Trainable};
use crate::registration::{primary_loss, register_prepared, PrimaryConfig, Registration};
use crate::rng::{child_seed, substream, Rng};
use crate::synth::ScenePair;

/// Stores updated by the inner loop. The balancing scalars stay fixed.
pub const INNER_TRAINABLE: Trainable = Trainable { shar: true, pri: true, aux: true, balance: false };

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OuterOptimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// inner-loop and test-time learning rate
    pub alpha: f64,
    /// meta learning rate
    pub beta: f64,
    pub joint_lr: f64,
    /// multiplier on `joint_lr` for the shared encoder
    pub encoder_lr_scale: f64,
    /// multiplicative learning-rate decay per epoch
    pub lr_decay: f64,
    pub batch_size: usize,
    pub inner_steps: usize,
    pub tta_steps: usize,
    pub joint_epochs: usize,
    pub meta_epochs: usize,
    pub ema_tau: f64,
    pub outer_optimizer: OuterOptimizer,
    pub seed: u64,
    pub flags: AuxFlags,
    pub use_meta: bool,
    pub use_tta: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-4,
            beta: 1e-4,
            joint_lr: 1e-3,
            encoder_lr_scale: 0.1,
            lr_decay: 0.99,
            batch_size: 4,
            inner_steps: 5,
            tta_steps: 5,
            joint_epochs: 20,
            meta_epochs: 2,
            ema_tau: 0.99,
            outer_optimizer: OuterOptimizer::Adam,
            seed: 0,
            flags: AuxFlags::default(),
            use_meta: true,
            use_tta: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.alpha > 0.0) || !(self.beta > 0.0) || !(self.joint_lr >= 0.0) || !(self.encoder_lr_scale >= 0.0) {
            return bad("alpha and beta must be positive, joint_lr and encoder_lr_scale non-negative");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) || !(0.0..=1.0).contains(&self.ema_tau) {
            return bad("lr_decay must lie in (0, 1] and ema_tau in [0, 1]");
        }
        if self.batch_size < 1 || self.inner_steps < 1 {
            return bad("batch_size and inner_steps must be at least 1");
        }
        if (self.use_meta || self.use_tta) && !self.flags.any() {
            return bad("meta training and test-time adaptation need at least one auxiliary task");
        }
        Ok(())
    }
}

/// Loss values and gradients from one evaluation.
#[derive(Debug, Clone, Default)]
pub struct LossEval {
    pub value: f64,
    pub grads: PartitionGrads,
    /// named components, e.g. `rec`, `byol`, `cc`, `bce`
    pub parts: BTreeMap<String, f64>,
}

/// A model the training loops can drive. Auxiliary losses see only the
/// unlabeled input; the label enters the primary loss alone.
pub trait TaskModel: Sync {
    type Input: Sync;
    type Label: Sync;
    /// every random choice of one auxiliary-loss evaluation
    type Draw: Sync;

    fn sample_draw(&self, input: &Self::Input, rng: &mut Rng) -> Result<Self::Draw>;

    /// `L_aux` at `p`; gradients for the stores in `grad` when given.
    fn aux_loss(&self, p: &ParamPartition, input: &Self::Input, draw: &Self::Draw, grad: Option<Trainable>)
        -> Result<LossEval>;

    fn pri_loss(&self, p: &ParamPartition, input: &Self::Input, label: &Self::Label, grad: Option<Trainable>)
        -> Result<LossEval>;

    /// `L_pri + L_aux` with gradients for every trainable store.
    fn joint_loss(&self, p: &ParamPartition, input: &Self::Input, label: &Self::Label, draw: &Self::Draw)
        -> Result<LossEval> {
        let a = self.aux_loss(p, input, draw, Some(Trainable::ALL))?;
        let mut out = self.pri_loss(p, input, label, Some(Trainable::ALL))?;
        out.value += a.value;
        out.grads.axpy(1.0, &a.grads);
        out.parts.insert("pri".into(), out.value - a.value);
        out.parts.insert("aux".into(), a.value);
        out.parts.extend(a.parts);
        Ok(out)
    }

    /// Whether the partition carries a BYOL target that should track the online weights.
    fn uses_target(&self) -> bool;
}

fn finite(what: &str, v: f64, grads: &PartitionGrads) -> Result<()> {
    if !v.is_finite() || !grads.all_finite() {
        return Err(Error::NonFinite(format!("{what} (value {v})")));
    }
    Ok(())
}

fn sgd_groups(p: &mut ParamPartition, g: &PartitionGrads, lr: f64, groups: &[Group]) -> Result<()> {
    for &grp in groups {
        p.store_mut(grp).sgd_step(g.get(grp).expect("trainable group"), lr)?;
    }
    Ok(())
}

/// Result of [`inner_adapt`].
#[derive(Debug, Clone)]
pub struct Adapted {
    pub phi: ParamPartition,
    /// `L_aux` before each step, plus the value at `phi` when requested
    pub trace: Vec<f64>,
    /// gradient of `L_aux` at the starting point
    pub first_grad: PartitionGrads,
}

/// `steps` plain gradient steps on `L_aux` from a copy of `theta`. The
/// balancing scalars are not adapted. `theta` is not modified.
pub fn inner_adapt<M: TaskModel>(
    model: &M,
    theta: &ParamPartition,
    input: &M::Input,
    draw: &M::Draw,
    alpha: f64,
    steps: usize,
    record_final: bool,
) -> Result<Adapted> {
    let mut phi = theta.clone();
    for g in Group::ALL {
        phi.store_mut(g).adam = AdamState::default();
    }
    let mut trace = Vec::with_capacity(steps + 1);
    let mut first_grad = PartitionGrads::default();
    for step in 0..steps {
        let l = model.aux_loss(&phi, input, draw, Some(INNER_TRAINABLE))?;
        finite("auxiliary loss", l.value, &l.grads)?;
        trace.push(l.value);
        sgd_groups(&mut phi, &l.grads, alpha, &[Group::Shar, Group::Pri, Group::Aux])?;
        if step == 0 {
            first_grad = l.grads;
        }
    }
    if record_final {
        let l = model.aux_loss(&phi, input, draw, None)?;
        if !l.value.is_finite() {
            return Err(Error::NonFinite("auxiliary loss after adaptation".into()));
        }
        trace.push(l.value);
    }
    Ok(Adapted { phi, trace, first_grad })
}

/// Losses reported by one training step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub pri: f64,
    pub aux: f64,
    pub parts: BTreeMap<String, f64>,
}

fn track_target<M: TaskModel>(model: &M, p: &mut ParamPartition, tau: f64, flags: &AuxFlags) -> Result<()> {
    if model.uses_target() && flags.use_byol && !p.byol_target.is_empty() {
        let online = p.online_mirror();
        ema_update(&mut p.byol_target, &online, tau)?;
    }
    Ok(())
}

/// One Adam step on `L_pri + L_aux` averaged over the batch, then one EMA update.
pub fn joint_train_step<M: TaskModel>(
    model: &M,
    p: &mut ParamPartition,
    batch: &[(&M::Input, &M::Label)],
    lr: f64,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<StepLosses> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    let draws = batch
        .iter()
        .map(|(x, _)| model.sample_draw(x, rng))
        .collect::<Result<Vec<_>>>()?;
    let evals = batch
        .par_iter()
        .zip(draws.par_iter())
        .map(|((x, y), d)| model.joint_loss(p, x, y, d))
        .collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut grads = PartitionGrads::default();
    let mut out = StepLosses::default();
    for e in &evals {
        finite("joint loss", e.value, &e.grads)?;
        grads.axpy(scale, &e.grads);
        for (k, v) in &e.parts {
            *out.parts.entry(k.clone()).or_default() += v * scale;
        }
    }
    out.pri = out.parts.get("pri").copied().unwrap_or_default();
    out.aux = out.parts.get("aux").copied().unwrap_or_default();
    let adam = AdamConfig::default();
    for g in [Group::Shar, Group::Pri, Group::Aux, Group::Balance] {
        let scale = if g == Group::Shar { cfg.encoder_lr_scale } else { 1.0 };
        p.store_mut(g).adam_step(grads.get(g).expect("trainable group"), lr * scale, &adam)?;
    }
    track_target(model, p, cfg.ema_tau, &cfg.flags)?;
    Ok(out)
}

/// Meta-auxiliary update over one batch. For every element: adapt a copy of
/// `theta` on `L_aux`, take the primary-loss gradient at the adapted
/// parameters, and step `theta`'s auxiliary stores on `L_aux` with rate
/// `alpha`. Then apply the summed first-order primary gradients to the shared
/// and primary stores with rate `beta`, and update the BYOL target.
pub fn meta_outer_step<M: TaskModel>(
    model: &M,
    theta: &mut ParamPartition,
    batch: &[(&M::Input, &M::Label)],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<StepLosses> {
    if batch.is_empty() {
        return Err(Error::Empty("meta batch"));
    }
    let mut outer = PartitionGrads::default();
    let mut out = StepLosses::default();
    let scale = 1.0 / batch.len() as f64;
    for (x, y) in batch {
        let draw = model.sample_draw(x, rng)?;
        let adapted = inner_adapt(model, theta, x, &draw, cfg.alpha, cfg.inner_steps, false)?;
        let pri = model.pri_loss(&adapted.phi, x, y, Some(Trainable { shar: true, pri: true, aux: false, balance: false }))?;
        finite("primary loss at adapted parameters", pri.value, &pri.grads)?;
        outer.axpy(1.0, &pri.grads);
        out.pri += pri.value * scale;
        out.aux += adapted.trace.first().copied().unwrap_or_default() * scale;

        // auxiliary branch and balancing scalars: gradient at theta, full rate alpha
        let aux_grad = if cfg.inner_steps > 0 {
            let mut g = adapted.first_grad.clone();
            let bal = model.aux_loss(theta, x, &draw, Some(Trainable { shar: false, pri: false, aux: false, balance: true }))?;
            g.balance = bal.grads.balance;
            g
        } else {
            PartitionGrads::default()
        };
        finite("auxiliary gradient", 0.0, &aux_grad)?;
        sgd_groups(theta, &aux_grad, cfg.alpha, &[Group::Aux, Group::Balance])?;
    }
    match cfg.outer_optimizer {
        OuterOptimizer::Sgd => sgd_groups(theta, &outer, cfg.beta, &[Group::Shar, Group::Pri])?,
        OuterOptimizer::Adam => {
            let adam = AdamConfig::default();
            for g in [Group::Shar, Group::Pri] {
                theta.store_mut(g).adam_step(outer.get(g).expect("trainable group"), cfg.beta, &adam)?;
            }
        }
    }
    track_target(model, theta, cfg.ema_tau, &cfg.flags)?;
    Ok(out)
}

/// Per-epoch training record. The epoch-0 meta entry carries only `val_pri`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: String,
    pub epoch: usize,
    pub lr: f64,
    pub pri: f64,
    pub aux: f64,
    /// validation primary loss at adapted parameters, when a validation set is given
    pub val_pri: Option<f64>,
}

/// Everything needed to continue training bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub partition: ParamPartition,
    pub config: TrainConfig,
    /// `joint` or `meta`
    pub phase: String,
    /// completed epochs of `phase`
    pub epoch: usize,
    pub rng: Rng,
    pub history: Vec<EpochLog>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    format: String,
    encoder: EncoderConfig,
    train: TrainConfig,
    phase: String,
    epoch: usize,
    rng: Rng,
    history: Vec<EpochLog>,
    adam_steps: BTreeMap<String, u64>,
}

const CHECKPOINT_FORMAT: &str = "ptta-checkpoint-1";

impl Checkpoint {
    pub fn new(partition: ParamPartition, config: TrainConfig) -> Self {
        let rng = substream(config.seed, "train");
        Self {
            partition,
            config,
            phase: "joint".into(),
            epoch: 0,
            rng,
            history: Vec::new(),
        }
    }

    /// Fresh partition from the `init` substream of `config.seed`.
    pub fn initial(encoder: EncoderConfig, config: TrainConfig) -> Result<Self> {
        let p = ParamPartition::init(encoder, &mut substream(config.seed, "init"))?;
        Ok(Self::new(p, config))
    }

    pub fn to_tensors(&self) -> (String, BTreeMap<String, Tensor>) {
        let mut tensors = BTreeMap::new();
        let mut adam_steps = BTreeMap::new();
        for g in Group::ALL {
            let s = self.partition.store(g);
            for (n, t) in s.iter() {
                tensors.insert(format!("{}/{n}", g.as_str()), t.clone());
            }
            for (n, t) in &s.adam.m {
                tensors.insert(format!("adam_m/{}/{n}", g.as_str()), t.clone());
            }
            for (n, t) in &s.adam.v {
                tensors.insert(format!("adam_v/{}/{n}", g.as_str()), t.clone());
            }
            adam_steps.insert(g.as_str().to_string(), s.adam.step);
        }
        let meta = CheckpointMeta {
            format: CHECKPOINT_FORMAT.into(),
            encoder: self.partition.config,
            train: self.config.clone(),
            phase: self.phase.clone(),
            epoch: self.epoch,
            rng: self.rng.clone(),
            history: self.history.clone(),
            adam_steps,
        };
        (serde_json::to_string(&meta).expect("checkpoint metadata serializes"), tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let (meta, tensors) = self.to_tensors();
        write_named_tensors(path, &meta, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors) = read_named_tensors(path)?;
        let meta: CheckpointMeta =
            serde_json::from_str(&meta).map_err(|e| Error::corrupt(path, format!("metadata: {e}")))?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(Error::corrupt(path, format!("unknown checkpoint format {}", meta.format)));
        }
        let mut stores: BTreeMap<&str, (BTreeMap<String, Tensor>, AdamState)> = Group::ALL
            .iter()
            .map(|g| (g.as_str(), Default::default()))
            .collect();
        for (key, t) in tensors {
            let mut parts = key.splitn(3, '/');
            let (a, b, c) = (parts.next(), parts.next(), parts.next());
            let (group, name, slot) = match (a, b, c) {
                (Some(kind @ ("adam_m" | "adam_v")), Some(g), Some(n)) => (g, n, kind),
                (Some(g), Some(n), None) => (g, n, "param"),
                _ => return Err(Error::corrupt(path, format!("unexpected tensor {key}"))),
            };
            let entry = stores
                .get_mut(group)
                .ok_or_else(|| Error::corrupt(path, format!("unknown store in {key}")))?;
            let map = match slot {
                "param" => &mut entry.0,
                "adam_m" => &mut entry.1.m,
                _ => &mut entry.1.v,
            };
            map.insert(name.to_string(), t);
        }
        let mut take = |g: Group| -> ParamStore {
            let (tensors, mut adam) = stores.remove(g.as_str()).unwrap_or_default();
            adam.step = meta.adam_steps.get(g.as_str()).copied().unwrap_or(0);
            let mut s = ParamStore::from_tensors(tensors);
            s.adam = adam;
            s
        };
        let partition = ParamPartition {
            config: meta.encoder,
            shar: take(Group::Shar),
            pri: take(Group::Pri),
            aux: take(Group::Aux),
            balance: take(Group::Balance),
            byol_target: take(Group::Target),
        };
        partition
            .validate()
            .map_err(|e| Error::corrupt(path, format!("parameters do not match the encoder: {e}")))?;
        meta.train
            .validate()
            .map_err(|e| Error::corrupt(path, format!("training config: {e}")))?;
        Ok(Self {
            partition,
            config: meta.train,
            phase: meta.phase,
            epoch: meta.epoch,
            rng: meta.rng,
            history: meta.history,
        })
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let (meta, tensors) = self.to_tensors();
        hex::encode(Sha256::digest(crate::autodiff::checkpoint::encode_named_tensors(&meta, &tensors)))
    }
}

/// Called after every completed epoch; returning `false` stops training early.
pub type EpochHook<'a> = dyn FnMut(&Checkpoint) -> Result<bool> + 'a;

fn batches(n: usize, b: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(b).map(|c| c.to_vec()).collect()
}

/// Joint training up to `ckpt.config.joint_epochs`, resuming from `ckpt.epoch`.
pub fn joint_train<M: TaskModel>(
    model: &M,
    mut ckpt: Checkpoint,
    data: &[(M::Input, M::Label)],
    hook: &mut EpochHook<'_>,
) -> Result<Checkpoint> {
    ckpt.config.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if ckpt.phase != "joint" {
        return Err(Error::Config(format!("checkpoint is in phase {}, expected joint", ckpt.phase)));
    }
    let cfg = ckpt.config.clone();
    while ckpt.epoch < cfg.joint_epochs {
        let lr = cfg.joint_lr * cfg.lr_decay.powi(ckpt.epoch as i32);
        let mut log = EpochLog { phase: "joint".into(), epoch: ckpt.epoch + 1, lr, ..Default::default() };
        let order = batches(data.len(), cfg.batch_size, &mut ckpt.rng);
        for idx in &order {
            let batch: Vec<_> = idx.iter().map(|&i| (&data[i].0, &data[i].1)).collect();
            let mut step_rng = Rng::from_seed_u64(child_seed(&mut ckpt.rng));
            let l = joint_train_step(model, &mut ckpt.partition, &batch, lr, &cfg, &mut step_rng)?;
            log.pri += l.pri / order.len() as f64;
            log.aux += l.aux / order.len() as f64;
        }
        ckpt.epoch += 1;
        ckpt.history.push(log);
        if !hook(&ckpt)? {
            break;
        }
    }
    Ok(ckpt)
}

/// Mean primary loss at parameters adapted on each validation pair.
pub fn validation_pri<M: TaskModel>(
    model: &M,
    theta: &ParamPartition,
    val: &[(M::Input, M::Label)],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<f64> {
    let losses = val
        .par_iter()
        .enumerate()
        .map(|(i, (x, y))| {
            let mut rng = substream(seed, &format!("val/{i}"));
            let draw = model.sample_draw(x, &mut rng)?;
            let a = inner_adapt(model, theta, x, &draw, cfg.alpha, cfg.inner_steps, false)?;
            Ok(model.pri_loss(&a.phi, x, y, None)?.value)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Meta-auxiliary training up to `ckpt.config.meta_epochs`. A joint-phase
/// checkpoint is switched to the meta phase with fresh optimizer moments.
pub fn meta_train<M: TaskModel>(
    model: &M,
    mut ckpt: Checkpoint,
    data: &[(M::Input, M::Label)],
    val: &[(M::Input, M::Label)],
    hook: &mut EpochHook<'_>,
) -> Result<Checkpoint> {
    ckpt.config.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let cfg = ckpt.config.clone();
    if ckpt.phase != "meta" {
        if cfg.meta_epochs == 0 {
            return Ok(ckpt);
        }
        ckpt.phase = "meta".into();
        ckpt.epoch = 0;
        for g in Group::ALL {
            ckpt.partition.store_mut(g).adam = AdamState::default();
        }
        ckpt.rng = substream(cfg.seed, "meta");
        if !val.is_empty() {
            let v = validation_pri(model, &ckpt.partition, val, &cfg, cfg.seed)?;
            ckpt.history.push(EpochLog { phase: "meta".into(), epoch: 0, lr: cfg.beta, val_pri: Some(v), ..Default::default() });
        }
    }
    while ckpt.epoch < cfg.meta_epochs {
        let mut log = EpochLog { phase: "meta".into(), epoch: ckpt.epoch + 1, lr: cfg.beta, ..Default::default() };
        let order = batches(data.len(), cfg.batch_size, &mut ckpt.rng);
        for idx in &order {
            let batch: Vec<_> = idx.iter().map(|&i| (&data[i].0, &data[i].1)).collect();
            let mut step_rng = Rng::from_seed_u64(child_seed(&mut ckpt.rng));
            let l = meta_outer_step(model, &mut ckpt.partition, &batch, &cfg, &mut step_rng)?;
            log.pri += l.pri / order.len() as f64;
            log.aux += l.aux / order.len() as f64;
        }
        if !val.is_empty() {
            log.val_pri = Some(validation_pri(model, &ckpt.partition, val, &cfg, cfg.seed)?);
        }
        ckpt.epoch += 1;
        ckpt.history.push(log);
        if !hook(&ckpt)? {
            break;
        }
    }
    Ok(ckpt)
}

trait SeedU64 {
    fn from_seed_u64(seed: u64) -> Self;
}

impl SeedU64 for Rng {
    fn from_seed_u64(seed: u64) -> Self {
        rand::SeedableRng::seed_from_u64(seed)
    }
}

/// The registration network as a [`TaskModel`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistrationTask {
    pub primary: PrimaryConfig,
    pub aux: AuxConfig,
}

impl RegistrationTask {
    /// Defaults tied to a voxel size: inlier radius `2 * voxel`, jitter `voxel / 2`.
    pub fn for_voxel(voxel: f64, flags: AuxFlags) -> Self {
        Self {
            primary: PrimaryConfig { tau_in: 2.0 * voxel, ..PrimaryConfig::default() },
            aux: AuxConfig { flags, ..AuxConfig::for_voxel(voxel) },
        }
    }
}

/// Unlabeled registration instance: two prepared clouds.
#[derive(Debug, Clone)]
pub struct PairInput {
    pub pair_id: String,
    pub source: PreparedCloud,
    pub target: PreparedCloud,
}

impl PairInput {
    pub fn new(pair: &ScenePair, k: usize) -> Result<Self> {
        Ok(Self {
            pair_id: pair.pair_id.clone(),
            source: PreparedCloud::new(&pair.source, k)?,
            target: PreparedCloud::new(&pair.target, k)?,
        })
    }
}

/// Splits labeled pairs into model inputs and ground-truth labels.
pub fn prepare_pairs(pairs: &[ScenePair], k: usize) -> Result<Vec<(PairInput, RigidTransform)>> {
    pairs
        .par_iter()
        .map(|p| Ok((PairInput::new(p, k)?, p.gt)))
        .collect()
}

impl TaskModel for RegistrationTask {
    type Input = PairInput;
    type Label = RigidTransform;
    type Draw = (AuxInputs, AuxInputs);

    fn sample_draw(&self, input: &PairInput, rng: &mut Rng) -> Result<Self::Draw> {
        Ok((
            AuxInputs::sample(&input.source, &self.aux, rng)?,
            AuxInputs::sample(&input.target, &self.aux, rng)?,
        ))
    }

    fn aux_loss(&self, p: &ParamPartition, _: &PairInput, draw: &Self::Draw, grad: Option<Trainable>) -> Result<LossEval> {
        let mut tape = Tape::new();
        let b = Bound::bind(&mut tape, p, grad.unwrap_or(Trainable::NONE));
        let l = aux_total_loss(&mut tape, &b, &draw.0, &draw.1, &self.aux)?;
        let value = tape.value(l.total).item();
        let grads = match grad {
            Some(_) => b.grads(&tape, &tape.backward(l.total)?),
            None => PartitionGrads::default(),
        };
        let parts = BTreeMap::from([("rec".into(), l.rec), ("byol".into(), l.byol), ("cc".into(), l.cc)]);
        Ok(LossEval { value, grads, parts })
    }

    fn pri_loss(&self, p: &ParamPartition, x: &PairInput, gt: &RigidTransform, grad: Option<Trainable>) -> Result<LossEval> {
        let mut tape = Tape::new();
        let b = Bound::bind(&mut tape, p, grad.unwrap_or(Trainable::NONE));
        let l = primary_loss(&mut tape, &b, &x.source, &x.target, gt, &self.primary)?;
        let value = tape.value(l.total).item();
        let parts = BTreeMap::from([
            ("bce".into(), tape.value(l.bce).item()),
            ("transform".into(), tape.value(l.transform).item()),
        ]);
        let grads = match grad {
            Some(_) => b.grads(&tape, &tape.backward(l.total)?),
            None => PartitionGrads::default(),
        };
        Ok(LossEval { value, grads, parts })
    }

    fn joint_loss(&self, p: &ParamPartition, x: &PairInput, gt: &RigidTransform, draw: &Self::Draw) -> Result<LossEval> {
        let mut tape = Tape::new();
        let b = Bound::bind(&mut tape, p, Trainable::ALL);
        let pri = primary_loss(&mut tape, &b, &x.source, &x.target, gt, &self.primary)?;
        let mut parts = BTreeMap::from([("pri".to_string(), tape.value(pri.total).item())]);
        let total = if self.aux.flags.any() {
            let aux = aux_total_loss(&mut tape, &b, &draw.0, &draw.1, &self.aux)?;
            parts.insert("aux".into(), tape.value(aux.total).item());
            parts.insert("rec".into(), aux.rec);
            parts.insert("byol".into(), aux.byol);
            parts.insert("cc".into(), aux.cc);
            tape.add(pri.total, aux.total)?
        } else {
            pri.total
        };
        let grads = b.grads(&tape, &tape.backward(total)?);
        Ok(LossEval { value: tape.value(total).item(), grads, parts })
    }

    fn uses_target(&self) -> bool {
        self.aux.flags.use_byol
    }
}

/// Outcome of test-time adaptation on one pair.
#[derive(Debug, Clone)]
pub struct TtaOutcome {
    pub registration: Registration,
    /// `L_aux` trace of the accepted adaptation (or of the last attempt on fallback)
    pub trace: Vec<f64>,
    /// learning rate of the accepted adaptation; `None` after fallback
    pub alpha_used: Option<f64>,
    pub fallback: bool,
}

/// Adapts a copy of `theta` to one pair on `L_aux`, then registers with the
/// adapted parameters. If `L_aux` ends above its start the adaptation is
/// retried once with `alpha / 2`, and otherwise `theta` itself is used.
/// Randomness comes from `seed` only, and the same draw is used at every step.
pub fn tta_register(
    task: &RegistrationTask,
    theta: &ParamPartition,
    input: &PairInput,
    alpha: f64,
    steps: usize,
    seed: u64,
) -> Result<TtaOutcome> {
    if steps == 0 {
        return Ok(TtaOutcome {
            registration: register_prepared(theta, &input.source, &input.target, task.primary.mutual)?,
            trace: Vec::new(),
            alpha_used: Some(alpha),
            fallback: false,
        });
    }
    let draw = task.sample_draw(input, &mut substream(seed, "tta"))?;
    let mut last_trace = Vec::new();
    for a in [alpha, alpha / 2.0] {
        match inner_adapt(task, theta, input, &draw, a, steps, true) {
            Ok(adapted) => {
                let descended = adapted.trace.last() <= adapted.trace.first();
                last_trace = adapted.trace.clone();
                if descended {
                    if let Ok(r) = register_prepared(&adapted.phi, &input.source, &input.target, task.primary.mutual) {
                        return Ok(TtaOutcome {
                            registration: r,
                            trace: adapted.trace,
                            alpha_used: Some(a),
                            fallback: false,
                        });
                    }
                }
            }
            Err(e) if e.class() == crate::error::ErrorClass::Numeric => {}
            Err(e) => return Err(e),
        }
    }
    Ok(TtaOutcome {
        registration: register_prepared(theta, &input.source, &input.target, task.primary.mutual)?,
        trace: last_trace,
        alpha_used: None,
        fallback: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Plain,
    Tta,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(EvalMode::Plain),
            "tta" => Ok(EvalMode::Tta),
            other => Err(Error::Config(format!("unknown mode {other}"))),
        }
    }
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalMode::Plain => "plain",
            EvalMode::Tta => "tta",
        })
    }
}

/// Per-pair evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairOutcome {
    pub pair_id: String,
    pub profile: String,
    pub result: RegistrationResult,
    pub fallback: bool,
    /// numeric failure of the pipeline on this pair, counted as unsuccessful
    pub error: Option<String>,
}

/// Registers every pair with read-only `theta` and scores it against its ground truth.
pub fn evaluate(
    task: &RegistrationTask,
    theta: &ParamPartition,
    pairs: &[ScenePair],
    thresholds: &EvalThresholds,
    mode: EvalMode,
    alpha: f64,
    steps: usize,
    seed: u64,
) -> Result<Vec<PairOutcome>> {
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    pairs
        .par_iter()
        .map(|pair| {
            let input = PairInput::new(pair, theta.config.k)?;
            let attempt = match mode {
                EvalMode::Plain => register_prepared(theta, &input.source, &input.target, task.primary.mutual).map(|r| {
                    TtaOutcome { registration: r, trace: Vec::new(), alpha_used: None, fallback: false }
                }),
                EvalMode::Tta => {
                    let s = child_seed(&mut substream(seed, &format!("tta/{}", pair.pair_id)));
                    tta_register(task, theta, &input, alpha, steps, s)
                }
            };
            let (predicted, trace, fallback, error) = match attempt {
                Ok(o) => (o.registration.transform, o.trace, o.fallback, None),
                Err(e) if e.class() == crate::error::ErrorClass::Numeric => {
                    (RigidTransform::identity(), Vec::new(), false, Some(e.to_string()))
                }
                Err(e) => return Err(e),
            };
            Ok(PairOutcome {
                pair_id: pair.pair_id.clone(),
                profile: pair.profile_name.clone(),
                result: RegistrationResult::evaluate(predicted, &pair.gt, thresholds, trace),
                fallback,
                error,
            })
        })
        .collect()
}

/// The scalar quadratic model used to check the meta-learning mechanics:
/// shared `w`, primary `v`, auxiliary `u`, with
/// `L_aux = a/2 (w - c)^2 + 1/2 (u - d)^2` and `L_pri = 1/2 (w + v - y)^2`.
pub mod toy {
    use super::*;

    #[derive(Debug, Clone, Copy, PartialEq)]
    pub struct Quadratic {
        pub a: f64,
        pub c: f64,
        pub d: f64,
    }

    pub fn partition(w: f64, v: f64, u: f64) -> ParamPartition {
        let one = |name: &str, x: f64| {
            let mut s = ParamStore::new();
            s.insert(name, Tensor::scalar(x)).expect("fresh store");
            s
        };
        ParamPartition {
            config: EncoderConfig::default(),
            shar: one("w", w),
            pri: one("v", v),
            aux: one("u", u),
            balance: ParamStore::new(),
            byol_target: ParamStore::new(),
        }
    }

    fn get(p: &ParamPartition, g: Group, n: &str) -> f64 {
        p.store(g).get(n).expect("toy parameter").item()
    }

    pub fn values(p: &ParamPartition) -> (f64, f64, f64) {
        (get(p, Group::Shar, "w"), get(p, Group::Pri, "v"), get(p, Group::Aux, "u"))
    }

    fn grads(pairs: &[(Group, &str, f64)], mask: Trainable) -> PartitionGrads {
        let mut g = PartitionGrads::default();
        for &(grp, n, v) in pairs {
            let on = match grp {
                Group::Shar => mask.shar,
                Group::Pri => mask.pri,
                Group::Aux => mask.aux,
                _ => false,
            };
            if on {
                g.get_mut(grp).expect("trainable").insert(n.to_string(), Tensor::scalar(v));
            }
        }
        g
    }

    impl TaskModel for Quadratic {
        type Input = ();
        type Label = f64;
        type Draw = ();

        fn sample_draw(&self, _: &(), _: &mut Rng) -> Result<()> {
            Ok(())
        }

        fn aux_loss(&self, p: &ParamPartition, _: &(), _: &(), grad: Option<Trainable>) -> Result<LossEval> {
            let (w, _, u) = values(p);
            let value = 0.5 * self.a * (w - self.c).powi(2) + 0.5 * (u - self.d).powi(2);
            let g = grad.map_or_else(PartitionGrads::default, |m| {
                grads(&[(Group::Shar, "w", self.a * (w - self.c)), (Group::Aux, "u", u - self.d)], m)
            });
            Ok(LossEval { value, grads: g, parts: BTreeMap::new() })
        }

        fn pri_loss(&self, p: &ParamPartition, _: &(), y: &f64, grad: Option<Trainable>) -> Result<LossEval> {
            let (w, v, _) = values(p);
            let r = w + v - y;
            let g = grad.map_or_else(PartitionGrads::default, |m| {
                grads(&[(Group::Shar, "w", r), (Group::Pri, "v", r)], m)
            });
            Ok(LossEval { value: 0.5 * r * r, grads: g, parts: BTreeMap::new() })
        }

        fn uses_target(&self) -> bool {
            false
        }
    }
}
