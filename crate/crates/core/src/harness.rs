//! Run configuration, the command drivers behind the binary, and report files.
//!
//! A run is described by one TOML document. Keys may be written as tables or
//! as flat dotted keys (`train.alpha = 1e-4`); unknown keys are rejected and
//! `--set key=value` overrides any of them. The resolved configuration is
//! echoed into every report.
//!
//! Output layout under `out_dir`:
//!
//! ```text
//! data/            generated dataset (manifest.jsonl + clouds/)
//! joint.ckpt       joint-training checkpoint, rewritten after every epoch
//! meta.ckpt        meta-training checkpoint
//! losses.csv       per-epoch losses of the last training command
//! report.csv       one row per evaluated pair
//! report.txt       the full report as JSON
//! curves.csv       recall against swept RE and TE thresholds
//! register.json    result of the register command
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotation_error, translation_error, EvalThresholds, PointCloud, RigidTransform};
use crate::meta::{
    evaluate, joint_train, meta_train, prepare_pairs, tta_register, Checkpoint, EpochLog, EvalMode, PairInput,
    PairOutcome, RegistrationTask, TrainConfig,
};
use crate::networks::EncoderConfig;
use crate::rng::{child_seed, substream};
use crate::synth::{
    generate_pairs, load_pair, read_cloud, read_manifest, write_dataset, DatasetManifest, DomainProfile, ScenePair,
    Split,
};

pub const DATA_DIR: &str = "data";
pub const JOINT_CHECKPOINT: &str = "joint.ckpt";
pub const META_CHECKPOINT: &str = "meta.ckpt";
pub const LOSSES_CSV: &str = "losses.csv";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_TXT: &str = "report.txt";
pub const CURVES_CSV: &str = "curves.csv";
pub const REGISTER_JSON: &str = "register.json";
pub const REPORT_FORMAT: &str = "ptta-report-1";

/// Rotation thresholds of the recall curve, degrees.
pub fn re_sweep() -> Vec<f64> {
    (1..=20).map(f64::from).collect()
}

/// Translation thresholds of the recall curve, meters.
pub fn te_sweep() -> Vec<f64> {
    (1..=12).map(|i| f64::from(i) / 20.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// domain of the train and validation splits
    pub train_profile: DomainProfile,
    /// one test split per profile; names must differ from the train profile
    pub test_profiles: Vec<DomainProfile>,
    pub train_pairs: usize,
    pub val_pairs: usize,
    /// pairs per test profile
    pub test_pairs: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let train = DomainProfile::indoor("indoor");
        Self {
            test_profiles: vec![train.shifted("shifted")],
            train_profile: train,
            train_pairs: 128,
            val_pairs: 32,
            test_pairs: 200,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        self.train_profile.validate()?;
        let mut names = vec![self.train_profile.name.as_str()];
        for p in &self.test_profiles {
            p.validate()?;
            if names.contains(&p.name.as_str()) {
                return Err(Error::Config(format!("duplicate profile name {}", p.name)));
            }
            names.push(&p.name);
        }
        if self.train_pairs == 0 {
            return Err(Error::Config("data.train_pairs must be positive".into()));
        }
        Ok(())
    }
}

/// Registration-task settings that are not part of [`TrainConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub mutual: bool,
    pub lambda_t: f64,
    /// inlier radius, meters; twice the train voxel when absent
    pub tau_in: Option<f64>,
    /// correspondence-classification jitter, meters; half the train voxel when absent
    pub cc_jitter: Option<f64>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            mutual: true,
            lambda_t: 1.0,
            tau_in: None,
            cc_jitter: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub mode: EvalMode,
    pub split: Split,
    /// degrees
    pub re_max: f64,
    /// meters
    pub te_max: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: EvalMode::Plain,
            split: Split::Test,
            re_max: EvalThresholds::INDOOR.re_max,
            te_max: EvalThresholds::INDOOR.te_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// root of every random substream; copied into `train.seed`, which may
    /// only repeat this value
    pub seed: u64,
    pub out_dir: PathBuf,
    /// dataset location; `out_dir/data` when absent
    pub data_dir: Option<PathBuf>,
    /// input checkpoint of train-joint (resume), train-meta, eval and register
    pub checkpoint: Option<PathBuf>,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub task: TaskConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data_dir: None,
            checkpoint: None,
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            task: TaskConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Command-line overrides, applied after the config file and `--set` pairs.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// `dotted.key=value` pairs; values are TOML literals, bare words are strings
    pub set: Vec<String>,
    pub seed: Option<u64>,
    pub checkpoint: Option<PathBuf>,
    pub mode: Option<EvalMode>,
    pub use_rec: Option<bool>,
    pub use_byol: Option<bool>,
    pub use_cc: Option<bool>,
    pub use_meta: Option<bool>,
    pub tta_steps: Option<usize>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub out_dir: Option<PathBuf>,
}

fn parse_literal(text: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {text}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}

/// Recursive merge: tables combine key by key, any other value replaces.
fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn set_dotted(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut table = root;
    for part in &path[..path.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: {part} is not a table")))?;
    }
    table.insert(path[path.len() - 1].to_string(), parse_literal(value.trim()));
    Ok(())
}

impl RunConfig {
    /// Parses a TOML document with `--set` style overrides applied on top.
    /// Tables merge into the defaults key by key; arrays replace them.
    pub fn from_toml(text: &str, set: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for s in set {
            set_dotted(&mut table, s)?;
        }
        let seed = table.get("seed").cloned();
        let train_seed = table.get("train").and_then(|t| t.as_table()).and_then(|t| t.get("seed")).cloned();
        if train_seed.is_some_and(|t| Some(&t) != seed.as_ref()) {
            return Err(Error::Config("train.seed is derived from the top-level seed; set seed instead".into()));
        }
        let mut merged = toml::Table::try_from(RunConfig::default()).map_err(|e| Error::Invariant(e.to_string()))?;
        merge_tables(&mut merged, table);
        let mut cfg: RunConfig = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    /// Reads `path` (defaults when `None`), then applies `ov` and validates.
    pub fn load(path: Option<&Path>, ov: &Overrides) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut cfg = Self::from_toml(&text, &ov.set)?;
        cfg.apply(ov);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, ov: &Overrides) {
        if let Some(s) = ov.seed {
            self.seed = s;
        }
        self.train.seed = self.seed;
        if let Some(c) = &ov.checkpoint {
            self.checkpoint = Some(c.clone());
        }
        if let Some(m) = ov.mode {
            self.eval.mode = m;
        }
        let f = &mut self.train.flags;
        for (slot, v) in [(&mut f.use_rec, ov.use_rec), (&mut f.use_byol, ov.use_byol), (&mut f.use_cc, ov.use_cc)] {
            if let Some(v) = v {
                *slot = v;
            }
        }
        if let Some(v) = ov.use_meta {
            self.train.use_meta = v;
        }
        if let Some(v) = ov.tta_steps {
            self.train.tta_steps = v;
        }
        if let Some(v) = ov.alpha {
            self.train.alpha = v;
        }
        if let Some(v) = ov.beta {
            self.train.beta = v;
        }
        if let Some(d) = &ov.out_dir {
            self.out_dir = d.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.seed != self.seed {
            return Err(Error::Config("train.seed must equal seed".into()));
        }
        self.data.validate()?;
        self.encoder.validate()?;
        self.train.validate()?;
        self.thresholds()?;
        let t = &self.task;
        let positive = |v: Option<f64>| v.is_none_or(|x| x > 0.0 && x.is_finite());
        if !(t.lambda_t >= 0.0 && t.lambda_t.is_finite()) || !positive(t.tau_in) || !positive(t.cc_jitter) {
            return Err(Error::Config(format!("invalid task settings {t:?}")));
        }
        if self.eval.mode == EvalMode::Tta && !self.train.use_tta {
            return Err(Error::Config("eval mode tta needs train.use_tta = true".into()));
        }
        Ok(())
    }

    pub fn thresholds(&self) -> Result<EvalThresholds> {
        EvalThresholds::new(self.eval.re_max, self.eval.te_max)
    }

    pub fn task(&self) -> RegistrationTask {
        let mut task = RegistrationTask::for_voxel(self.data.train_profile.voxel, self.train.flags);
        task.primary.mutual = self.task.mutual;
        task.primary.lambda_t = self.task.lambda_t;
        if let Some(v) = self.task.tau_in {
            task.primary.tau_in = v;
            task.aux.tau_in = v;
        }
        if let Some(v) = self.task.cc_jitter {
            task.aux.cc_jitter = v;
        }
        task
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.out_dir.join(DATA_DIR))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

/// Sizes the global worker pool from `PTTA_THREADS` when it is set.
pub fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("PTTA_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Config(format!("PTTA_THREADS={v:?} is not a positive integer")))?;
    // a pool built earlier in the process keeps its size
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

// ---------------------------------------------------------------- data

/// Every pair of the run, with the manifest that assigns splits: the first
/// `train_pairs` of the train profile are train, the rest validation, and
/// each test profile forms its own test group.
pub fn generate_dataset(cfg: &RunConfig) -> Result<(Vec<ScenePair>, DatasetManifest)> {
    let d = &cfg.data;
    let mut pairs = generate_pairs(&d.train_profile, d.train_pairs + d.val_pairs, cfg.seed)?;
    let mut splits: Vec<Split> = (0..pairs.len())
        .map(|i| if i < d.train_pairs { Split::Train } else { Split::Val })
        .collect();
    for p in &d.test_profiles {
        let test = generate_pairs(p, d.test_pairs, cfg.seed)?;
        splits.extend(std::iter::repeat_n(Split::Test, test.len()));
        pairs.extend(test);
    }
    let mut profiles = vec![d.train_profile.clone()];
    profiles.extend(d.test_profiles.iter().cloned());
    let mut manifest = DatasetManifest::new(cfg.seed, profiles, &pairs);
    for (e, s) in manifest.entries.iter_mut().zip(splits) {
        e.split = s;
    }
    Ok((pairs, manifest))
}

/// Generates the dataset into `cfg.data_dir()` and returns the written manifest.
pub fn cmd_generate(cfg: &RunConfig) -> Result<DatasetManifest> {
    let (pairs, manifest) = generate_dataset(cfg)?;
    write_dataset(&pairs, &manifest, &cfg.data_dir())
}

pub fn manifest_summary(m: &DatasetManifest) -> String {
    let mut counts: BTreeMap<(Split, &str), usize> = BTreeMap::new();
    for e in &m.entries {
        *counts.entry((e.split, &e.profile)).or_default() += 1;
    }
    let mut out = format!("seed {} pairs {}\n", m.seed, m.entries.len());
    for ((split, profile), n) in counts {
        out.push_str(&format!("{split:<5} {profile:<16} {n}\n"));
    }
    out
}

pub fn load_split(dir: &Path, split: Split) -> Result<Vec<ScenePair>> {
    let manifest = read_manifest(dir)?;
    manifest
        .entries
        .iter()
        .filter(|e| e.split == split)
        .map(|e| load_pair(dir, e))
        .collect()
}

// ---------------------------------------------------------------- training

fn adopt_checkpoint(cfg: &RunConfig, mut ckpt: Checkpoint) -> Result<Checkpoint> {
    if ckpt.partition.config != cfg.encoder {
        return Err(Error::Config(format!(
            "checkpoint encoder {:?} differs from the configured {:?}",
            ckpt.partition.config, cfg.encoder
        )));
    }
    ckpt.config = cfg.train.clone();
    Ok(ckpt)
}

pub fn write_losses(path: &Path, history: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for h in history {
        w.serialize(h).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::corrupt(path, format!("{other:?}")),
    }
}

/// Joint training on `train`, starting from `start` or a fresh initialization.
pub fn train_joint(
    cfg: &RunConfig,
    start: Option<Checkpoint>,
    train: &[ScenePair],
    hook: &mut dyn FnMut(&Checkpoint) -> Result<bool>,
) -> Result<Checkpoint> {
    let ckpt = match start {
        Some(c) => adopt_checkpoint(cfg, c)?,
        None => Checkpoint::initial(cfg.encoder, cfg.train.clone())?,
    };
    let data = prepare_pairs(train, cfg.encoder.k)?;
    joint_train(&cfg.task(), ckpt, &data, hook)
}

/// Meta-auxiliary training from a joint checkpoint. Without `use_meta` the
/// checkpoint is returned unchanged.
pub fn train_meta(
    cfg: &RunConfig,
    start: Checkpoint,
    train: &[ScenePair],
    val: &[ScenePair],
    hook: &mut dyn FnMut(&Checkpoint) -> Result<bool>,
) -> Result<Checkpoint> {
    let ckpt = adopt_checkpoint(cfg, start)?;
    if !cfg.train.use_meta {
        return Ok(ckpt);
    }
    let data = prepare_pairs(train, cfg.encoder.k)?;
    let vdata = prepare_pairs(val, cfg.encoder.k)?;
    meta_train(&cfg.task(), ckpt, &data, &vdata, hook)
}

fn saving_hook<'a>(
    path: &'a Path,
    losses: &'a Path,
    progress: &'a mut dyn FnMut(&EpochLog),
) -> impl FnMut(&Checkpoint) -> Result<bool> + 'a {
    move |c: &Checkpoint| {
        c.save(path)?;
        write_losses(losses, &c.history)?;
        if let Some(h) = c.history.last() {
            progress(h);
        }
        Ok(true)
    }
}

fn create_out_dir(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))
}

/// Joint training from the on-disk train split; `cfg.checkpoint` resumes.
/// Writes `joint.ckpt` and `losses.csv` after every epoch and returns the checkpoint path.
pub fn cmd_train_joint(cfg: &RunConfig, progress: &mut dyn FnMut(&EpochLog)) -> Result<PathBuf> {
    create_out_dir(cfg)?;
    let train = load_split(&cfg.data_dir(), Split::Train)?;
    let start = cfg.checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    let path = cfg.out_dir.join(JOINT_CHECKPOINT);
    let losses = cfg.out_dir.join(LOSSES_CSV);
    let ckpt = train_joint(cfg, start, &train, &mut saving_hook(&path, &losses, progress))?;
    ckpt.save(&path)?;
    write_losses(&losses, &ckpt.history)?;
    Ok(path)
}

/// Meta-training from `cfg.checkpoint` (default `out_dir/joint.ckpt`).
/// Writes `meta.ckpt` and `losses.csv` and returns the checkpoint path.
pub fn cmd_train_meta(cfg: &RunConfig, progress: &mut dyn FnMut(&EpochLog)) -> Result<PathBuf> {
    create_out_dir(cfg)?;
    let input = cfg.checkpoint.clone().unwrap_or_else(|| cfg.out_dir.join(JOINT_CHECKPOINT));
    let start = Checkpoint::load(&input)?;
    let dir = cfg.data_dir();
    let train = load_split(&dir, Split::Train)?;
    let val = load_split(&dir, Split::Val)?;
    let path = cfg.out_dir.join(META_CHECKPOINT);
    let losses = cfg.out_dir.join(LOSSES_CSV);
    let ckpt = train_meta(cfg, start, &train, &val, &mut saving_hook(&path, &losses, progress))?;
    ckpt.save(&path)?;
    write_losses(&losses, &ckpt.history)?;
    Ok(path)
}

/// `cfg.checkpoint`, else `meta.ckpt`, else `joint.ckpt` under `out_dir`.
pub fn resolve_checkpoint(cfg: &RunConfig) -> Result<PathBuf> {
    if let Some(p) = &cfg.checkpoint {
        return Ok(p.clone());
    }
    [META_CHECKPOINT, JOINT_CHECKPOINT]
        .iter()
        .map(|n| cfg.out_dir.join(n))
        .find(|p| p.exists())
        .ok_or_else(|| Error::MissingFile(cfg.out_dir.join(JOINT_CHECKPOINT)))
}

// ---------------------------------------------------------------- reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub pair_id: String,
    pub profile: String,
    /// degrees
    pub re: f64,
    /// meters
    pub te: f64,
    pub success: bool,
    pub fallback: bool,
    pub error: Option<String>,
    pub aux_trace: Vec<f64>,
}

impl PairRow {
    pub fn aux_delta(&self) -> Option<f64> {
        Some(self.aux_trace.last()? - self.aux_trace.first()?)
    }
}

/// Flat form of [`PairRow`] for `report.csv`; the trace is `;`-separated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub pair_id: String,
    pub profile: String,
    pub re: f64,
    pub te: f64,
    pub success: bool,
    pub fallback: bool,
    pub error: String,
    pub aux_trace: String,
}

impl From<&PairRow> for CsvRow {
    fn from(r: &PairRow) -> Self {
        Self {
            pair_id: r.pair_id.clone(),
            profile: r.profile.clone(),
            re: r.re,
            te: r.te,
            success: r.success,
            fallback: r.fallback,
            error: r.error.clone().unwrap_or_default(),
            aux_trace: r.aux_trace.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";"),
        }
    }
}

impl CsvRow {
    pub fn to_row(&self) -> Result<PairRow> {
        let aux_trace = if self.aux_trace.is_empty() {
            Vec::new()
        } else {
            self.aux_trace
                .split(';')
                .map(|v| v.parse().map_err(|_| Error::Parse(format!("aux trace value {v:?}"))))
                .collect::<Result<_>>()?
        };
        Ok(PairRow {
            pair_id: self.pair_id.clone(),
            profile: self.profile.clone(),
            re: self.re,
            te: self.te,
            success: self.success,
            fallback: self.fallback,
            error: (!self.error.is_empty()).then(|| self.error.clone()),
            aux_trace,
        })
    }
}

/// Aggregates over the rows of one profile, or over all rows when `profile` is `all`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub profile: String,
    pub pairs: usize,
    pub rr: f64,
    pub mean_re: f64,
    pub median_re: f64,
    pub mean_te: f64,
    pub median_te: f64,
    pub fallback_rate: f64,
    /// pairs whose pipeline failed numerically
    pub failures: usize,
    /// median of final minus initial `L_aux` over adapted pairs
    pub median_aux_delta: Option<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Some(if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) })
}

impl Summary {
    pub fn of(profile: &str, rows: &[&PairRow]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("report rows"));
        }
        let n = rows.len() as f64;
        let re: Vec<f64> = rows.iter().map(|r| r.re).collect();
        let te: Vec<f64> = rows.iter().map(|r| r.te).collect();
        let deltas: Vec<f64> = rows.iter().filter_map(|r| r.aux_delta()).collect();
        Ok(Self {
            profile: profile.to_string(),
            pairs: rows.len(),
            rr: rows.iter().filter(|r| r.success).count() as f64 / n,
            mean_re: mean(&re),
            median_re: median(&re).unwrap_or(f64::NAN),
            mean_te: mean(&te),
            median_te: median(&te).unwrap_or(f64::NAN),
            fallback_rate: rows.iter().filter(|r| r.fallback).count() as f64 / n,
            failures: rows.iter().filter(|r| r.error.is_some()).count(),
            median_aux_delta: median(&deltas),
        })
    }
}

/// Per-profile summaries in first-appearance order, then `all` when there are several profiles.
pub fn summarize(rows: &[PairRow]) -> Result<Vec<Summary>> {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.profile.as_str()) {
            order.push(&r.profile);
        }
    }
    let mut out = order
        .iter()
        .map(|p| Summary::of(p, &rows.iter().filter(|r| r.profile == *p).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    if order.len() > 1 {
        out.push(Summary::of("all", &rows.iter().collect::<Vec<_>>())?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub profile: String,
    /// `re` sweeps the rotation threshold at the fixed translation threshold, `te` the reverse
    pub axis: String,
    pub threshold: f64,
    pub recall: f64,
}

pub fn recall_curves(rows: &[PairRow], thresholds: &EvalThresholds) -> Vec<CurvePoint> {
    let mut profiles: Vec<&str> = Vec::new();
    for r in rows {
        if !profiles.contains(&r.profile.as_str()) {
            profiles.push(&r.profile);
        }
    }
    if profiles.len() > 1 {
        profiles.push("all");
    }
    let mut out = Vec::new();
    for p in profiles {
        let sel: Vec<&PairRow> = rows.iter().filter(|r| p == "all" || r.profile == p).collect();
        let recall = |th: EvalThresholds| {
            sel.iter().filter(|r| r.error.is_none() && th.accepts(r.re, r.te)).count() as f64 / sel.len() as f64
        };
        for re in re_sweep() {
            out.push(CurvePoint {
                profile: p.into(),
                axis: "re".into(),
                threshold: re,
                recall: recall(EvalThresholds { re_max: re, ..*thresholds }),
            });
        }
        for te in te_sweep() {
            out.push(CurvePoint {
                profile: p.into(),
                axis: "te".into(),
                threshold: te,
                recall: recall(EvalThresholds { te_max: te, ..*thresholds }),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub format: String,
    pub mode: EvalMode,
    pub split: Split,
    pub thresholds: EvalThresholds,
    /// SHA-256 of the serialized checkpoint
    pub checkpoint_hash: String,
    pub config: RunConfig,
    pub summaries: Vec<Summary>,
    pub rows: Vec<PairRow>,
}

impl Report {
    pub fn new(cfg: &RunConfig, mode: EvalMode, checkpoint_hash: String, outcomes: Vec<PairOutcome>) -> Result<Self> {
        let rows: Vec<PairRow> = outcomes
            .into_iter()
            .map(|o| PairRow {
                pair_id: o.pair_id,
                profile: o.profile,
                re: o.result.re,
                te: o.result.te,
                success: o.result.success && o.error.is_none(),
                fallback: o.fallback,
                error: o.error,
                aux_trace: o.result.aux_loss_trace,
            })
            .collect();
        let mut config = cfg.clone();
        config.eval.mode = mode;
        Ok(Self {
            format: REPORT_FORMAT.into(),
            mode,
            split: cfg.eval.split,
            thresholds: cfg.thresholds()?,
            checkpoint_hash,
            config,
            summaries: summarize(&rows)?,
            rows,
        })
    }

    /// Summary over every row.
    pub fn overall(&self) -> &Summary {
        self.summaries.last().expect("a report has at least one summary")
    }

    pub fn summary(&self, profile: &str) -> Option<&Summary> {
        self.summaries.iter().find(|s| s.profile == profile)
    }

    pub fn curves(&self) -> Vec<CurvePoint> {
        recall_curves(&self.rows, &self.thresholds)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(REPORT_TXT);
        fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))?;
        let path = dir.join(REPORT_CSV);
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
        for r in &self.rows {
            w.serialize(CsvRow::from(r)).map_err(|e| csv_error(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        let path = dir.join(CURVES_CSV);
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
        for c in self.curves() {
            w.serialize(c).map_err(|e| csv_error(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::corrupt(path, e.to_string()))
    }
}

pub fn read_report_csv(path: &Path) -> Result<Vec<PairRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize::<CsvRow>()
        .map(|row| row.map_err(|e| csv_error(path, e))?.to_row())
        .collect()
}

// ---------------------------------------------------------------- evaluation

/// Evaluates `ckpt` on `pairs` in `mode` with the run's thresholds and TTA settings.
pub fn eval_report(cfg: &RunConfig, ckpt: &Checkpoint, pairs: &[ScenePair], mode: EvalMode) -> Result<Report> {
    let outcomes = evaluate(
        &cfg.task(),
        &ckpt.partition,
        pairs,
        &cfg.thresholds()?,
        mode,
        cfg.train.alpha,
        cfg.train.tta_steps,
        cfg.seed,
    )?;
    Report::new(cfg, mode, ckpt.content_hash(), outcomes)
}

/// Evaluates the resolved checkpoint on `cfg.eval.split` and writes the report files to `out_dir`.
pub fn cmd_eval(cfg: &RunConfig) -> Result<Report> {
    let ckpt = Checkpoint::load(&resolve_checkpoint(cfg)?)?;
    if ckpt.partition.config != cfg.encoder {
        return Err(Error::Config("checkpoint encoder differs from the configured encoder".into()));
    }
    let pairs = load_split(&cfg.data_dir(), cfg.eval.split)?;
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let report = eval_report(cfg, &ckpt, &pairs, cfg.eval.mode)?;
    report.write(&cfg.out_dir)?;
    Ok(report)
}

/// Reads a cloud: `.ptta` files use the binary format, anything else is
/// text with three numbers per line (comma or whitespace separated, `#` comments).
pub fn read_cloud_file(path: &Path) -> Result<PointCloud> {
    if path.extension().is_some_and(|e| e == "ptta") {
        return read_cloud(path);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let v = parse_numbers(line).map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if v.len() != 3 {
            return Err(Error::Parse(format!("{}:{}: expected 3 coordinates, found {}", path.display(), i + 1, v.len())));
        }
        points.push([v[0], v[1], v[2]]);
    }
    if points.is_empty() {
        return Err(Error::Parse(format!("{}: no points", path.display())));
    }
    PointCloud::new(points).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn parse_numbers(text: &str) -> std::result::Result<Vec<f64>, String> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| format!("bad number {t:?}"))
        })
        .collect()
}

/// Reads a ground-truth transform: 12 numbers, row-major 3x4.
pub fn read_transform_file(path: &Path) -> Result<RigidTransform> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let body: String = text.lines().map(|l| l.split('#').next().unwrap_or("")).collect::<Vec<_>>().join(" ");
    let v = parse_numbers(&body).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    if v.len() != 12 {
        return Err(Error::Parse(format!("{}: expected 12 numbers, found {}", path.display(), v.len())));
    }
    RigidTransform::from_row_major_3x4(&v).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisterOutput {
    pub mode: EvalMode,
    /// row-major 3x4
    pub transform: Vec<f64>,
    pub fallback: bool,
    pub aux_trace: Vec<f64>,
    /// degrees, when a ground truth was given
    pub re: Option<f64>,
    /// meters, when a ground truth was given
    pub te: Option<f64>,
    pub checkpoint_hash: String,
}

/// Registers one pair of files. `pair_id` names the TTA substream, so a pair
/// registered here with its dataset id matches its evaluation row.
pub fn register_files(
    cfg: &RunConfig,
    ckpt: &Checkpoint,
    source: &Path,
    target: &Path,
    gt: Option<&Path>,
    pair_id: &str,
) -> Result<RegisterOutput> {
    let src = read_cloud_file(source)?;
    let tgt = read_cloud_file(target)?;
    let gt = gt.map(read_transform_file).transpose()?;
    let pair = ScenePair {
        source: src,
        target: tgt,
        gt: RigidTransform::identity(),
        profile_name: String::new(),
        pair_id: pair_id.to_string(),
    };
    let input = PairInput::new(&pair, ckpt.partition.config.k)?;
    let mode = cfg.eval.mode;
    let steps = match mode {
        EvalMode::Plain => 0,
        EvalMode::Tta => cfg.train.tta_steps,
    };
    let seed = child_seed(&mut substream(cfg.seed, &format!("tta/{pair_id}")));
    let o = tta_register(&cfg.task(), &ckpt.partition, &input, cfg.train.alpha, steps, seed)?;
    let t = o.registration.transform;
    Ok(RegisterOutput {
        mode,
        transform: t.to_row_major_3x4().to_vec(),
        fallback: o.fallback,
        aux_trace: o.trace,
        re: gt.map(|g| rotation_error(&t, &g)),
        te: gt.map(|g| translation_error(&t, &g)),
        checkpoint_hash: ckpt.content_hash(),
    })
}

/// Registers `source` onto `target` with the resolved checkpoint and writes `register.json`.
pub fn cmd_register(cfg: &RunConfig, source: &Path, target: &Path, gt: Option<&Path>) -> Result<RegisterOutput> {
    let ckpt = Checkpoint::load(&resolve_checkpoint(cfg)?)?;
    let stem = source.file_stem().and_then(|s| s.to_str()).unwrap_or("pair");
    let pair_id = stem.strip_suffix(".src").unwrap_or(stem);
    let out = register_files(cfg, &ckpt, source, target, gt, pair_id)?;
    create_out_dir(cfg)?;
    let path = cfg.out_dir.join(REGISTER_JSON);
    fs::write(&path, serde_json::to_string_pretty(&out).expect("register output serializes"))
        .map_err(|e| Error::io(&path, e))?;
    Ok(out)
}

// ---------------------------------------------------------------- ablation

/// One cell row of the ablation table: which components were active and the outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub aux: bool,
    pub meta: bool,
    pub tta: bool,
    pub pairs: usize,
    pub rr: f64,
    /// degrees
    pub mean_re: f64,
    /// meters
    pub mean_te: f64,
    pub fallback_rate: f64,
    pub median_aux_delta: Option<f64>,
}

impl AblationRow {
    pub fn from_report(label: &str, aux: bool, meta: bool, report: &Report) -> Self {
        let s = report.overall();
        Self {
            label: label.into(),
            aux,
            meta,
            tta: report.mode == EvalMode::Tta,
            pairs: s.pairs,
            rr: s.rr,
            mean_re: s.mean_re,
            mean_te: s.mean_te,
            fallback_rate: s.fallback_rate,
            median_aux_delta: s.median_aux_delta,
        }
    }
}

/// Renders rows with one check-mark column per component, then recall and mean errors.
pub fn format_ablation_table(rows: &[AblationRow]) -> String {
    let mark = |b: bool| if b { "x" } else { "" };
    let mut out = format!(
        "| {:<10} | {:^4} | {:^4} | {:^4} | {:>7} | {:>8} | {:>7} | {:>8} |\n",
        "run", "Aux", "Meta", "TTA", "RR (%)", "RE (deg)", "TE (cm)", "fallback"
    );
    out.push_str("|------------|------|------|------|---------|----------|---------|----------|\n");
    for r in rows {
        out.push_str(&format!(
            "| {:<10} | {:^4} | {:^4} | {:^4} | {:>7.2} | {:>8.3} | {:>7.3} | {:>8.3} |\n",
            r.label,
            mark(r.aux),
            mark(r.meta),
            mark(r.tta),
            100.0 * r.rr,
            r.mean_re,
            100.0 * r.mean_te,
            r.fallback_rate
        ));
    }
    out
}

/// Everything one seed of the four-regime comparison produces.
#[derive(Debug, Clone)]
pub struct Ablation {
    pub joint: Checkpoint,
    pub meta: Checkpoint,
    /// plain, +TTA, +meta, full
    pub reports: [Report; 4],
    pub rows: [AblationRow; 4],
}

pub const REGIMES: [(&str, bool, bool); 4] =
    [("plain", false, false), ("+TTA", false, true), ("+meta", true, false), ("full", true, true)];

/// Generates the run's data in memory, joint-trains, meta-trains, and
/// evaluates the test split with and without meta-training and TTA.
pub fn run_ablation(cfg: &RunConfig, progress: &mut dyn FnMut(&EpochLog)) -> Result<Ablation> {
    let (pairs, manifest) = generate_dataset(cfg)?;
    let split_of = |s: Split| -> Vec<ScenePair> {
        pairs
            .iter()
            .zip(&manifest.entries)
            .filter(|(_, e)| e.split == s)
            .map(|(p, _)| p.clone())
            .collect()
    };
    let (train, val, test) = (split_of(Split::Train), split_of(Split::Val), split_of(cfg.eval.split));
    let mut hook = |c: &Checkpoint| {
        if let Some(h) = c.history.last() {
            progress(h);
        }
        Ok(true)
    };
    let joint = train_joint(cfg, None, &train, &mut hook)?;
    let meta_cfg = RunConfig { train: TrainConfig { use_meta: true, ..cfg.train.clone() }, ..cfg.clone() };
    let meta = train_meta(&meta_cfg, joint.clone(), &train, &val, &mut hook)?;
    let aux = cfg.train.flags.any();
    let run = |(label, use_meta, tta): (&str, bool, bool)| -> Result<(Report, AblationRow)> {
        let ckpt = if use_meta { &meta } else { &joint };
        let mode = if tta { EvalMode::Tta } else { EvalMode::Plain };
        let report = eval_report(cfg, ckpt, &test, mode)?;
        let row = AblationRow::from_report(label, aux, use_meta, &report);
        Ok((report, row))
    };
    let [a, b, c, d] = REGIMES.map(run);
    let (ra, wa) = a?;
    let (rb, wb) = b?;
    let (rc, wc) = c?;
    let (rd, wd) = d?;
    Ok(Ablation { joint, meta, reports: [ra, rb, rc, rd], rows: [wa, wb, wc, wd] })
}
