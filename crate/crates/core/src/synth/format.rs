//! On-disk dataset layout.
//!
//! Each cloud is a `.ptta` blob (little-endian):
//!
//! ```text
//! "PTTA" | version u32 | count u64 | count x (x f64, y f64, z f64)
//! | feature_dim u32 (0 = none) | count x feature_dim f64
//! ```
//!
//! `manifest.jsonl` holds one JSON object per line: a header with the format
//! version, seed and domain profiles, then one line per pair with its split,
//! ground truth (row-major 3x4) and the SHA-256 of both cloud files.

use std::collections::HashSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DomainProfile, ScenePair};
use crate::error::{Error, Result};
use crate::geometry::{Features, PointCloud, RigidTransform};
use crate::rng::Rng;

pub const CLOUD_MAGIC: &[u8; 4] = b"PTTA";
pub const CLOUD_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileRef {
    /// relative to the dataset directory
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairEntry {
    pub pair_id: String,
    pub split: Split,
    pub profile: String,
    pub source: FileRef,
    pub target: FileRef,
    pub gt: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub profiles: Vec<DomainProfile>,
    pub entries: Vec<PairEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    seed: u64,
    profiles: Vec<DomainProfile>,
}

impl DatasetManifest {
    /// Manifest for `pairs`, all in the train split, file references filled in on write.
    pub fn new(seed: u64, profiles: Vec<DomainProfile>, pairs: &[ScenePair]) -> Self {
        let entries = pairs
            .iter()
            .map(|p| PairEntry {
                pair_id: p.pair_id.clone(),
                split: Split::Train,
                profile: p.profile_name.clone(),
                source: FileRef {
                    path: format!("clouds/{}.src.ptta", p.pair_id),
                    sha256: String::new(),
                },
                target: FileRef {
                    path: format!("clouds/{}.tgt.ptta", p.pair_id),
                    sha256: String::new(),
                },
                gt: p.gt.to_row_major_3x4().to_vec(),
            })
            .collect();
        Self {
            seed,
            profiles,
            entries,
        }
    }

    pub fn split_of(&self, pair_id: &str) -> Option<Split> {
        self.entries.iter().find(|e| e.pair_id == pair_id).map(|e| e.split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    fn to_jsonl(&self) -> String {
        let header = Header {
            format: "ptta-manifest".into(),
            version: MANIFEST_VERSION,
            seed: self.seed,
            profiles: self.profiles.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        out
    }

    fn from_jsonl(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let first = lines.next().ok_or_else(|| Error::corrupt(path, "empty manifest"))?;
        let raw: serde_json::Value =
            serde_json::from_str(first).map_err(|e| Error::corrupt(path, format!("header: {e}")))?;
        if let Some(v) = raw.get("version").and_then(|v| v.as_u64()) {
            if v != MANIFEST_VERSION as u64 {
                return Err(Error::VersionMismatch {
                    path: path.to_path_buf(),
                    expected: MANIFEST_VERSION,
                    found: v as u32,
                });
            }
        }
        let header: Header =
            serde_json::from_value(raw).map_err(|e| Error::corrupt(path, format!("header: {e}")))?;
        let entries = lines
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str::<PairEntry>(l).map_err(|e| Error::corrupt(path, format!("line {}: {e}", i + 2)))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut seen = HashSet::new();
        if let Some(dup) = entries.iter().find(|e| !seen.insert(e.pair_id.as_str())) {
            return Err(Error::corrupt(path, format!("duplicate pair id {}", dup.pair_id)));
        }
        Ok(Self {
            seed: header.seed,
            profiles: header.profiles,
            entries,
        })
    }
}

pub fn encode_cloud(cloud: &PointCloud) -> Vec<u8> {
    let mut buf = Vec::with_capacity(20 + cloud.len() * 24);
    buf.extend_from_slice(CLOUD_MAGIC);
    buf.extend_from_slice(&CLOUD_VERSION.to_le_bytes());
    buf.extend_from_slice(&(cloud.len() as u64).to_le_bytes());
    for p in cloud.points() {
        for c in p {
            buf.extend_from_slice(&c.to_le_bytes());
        }
    }
    match cloud.features() {
        None => buf.extend_from_slice(&0u32.to_le_bytes()),
        Some(f) => {
            buf.extend_from_slice(&(f.dim as u32).to_le_bytes());
            for v in &f.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    buf
}

pub fn decode_cloud(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    let corrupt = |why: &str| Error::corrupt(path, why);
    if bytes.len() < 16 || &bytes[..4] != CLOUD_MAGIC {
        return Err(corrupt("bad magic or truncated header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CLOUD_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            expected: CLOUD_VERSION,
            found: version,
        });
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let coords_end = count
        .checked_mul(24)
        .and_then(|n| n.checked_add(16))
        .filter(|&end| end + 4 <= bytes.len())
        .ok_or_else(|| corrupt("truncated point block"))?;
    let f64s = |s: &[u8]| -> Vec<f64> {
        s.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect()
    };
    let coords = f64s(&bytes[16..coords_end]);
    let points = coords.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    let dim = u32::from_le_bytes(bytes[coords_end..coords_end + 4].try_into().expect("4 bytes")) as usize;
    let feat_start = coords_end + 4;
    let expected_end = dim
        .checked_mul(count)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(feat_start))
        .ok_or_else(|| corrupt("implausible feature block"))?;
    if expected_end != bytes.len() {
        return Err(corrupt("feature block size does not match file length"));
    }
    let features = (dim > 0).then(|| Features {
        dim,
        values: f64s(&bytes[feat_start..]),
    });
    PointCloud::with_features(points, features).map_err(|e| corrupt(&e.to_string()))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })
}

pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<String> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes = encode_cloud(cloud);
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    decode_cloud(&read_file(path)?, path)
}

/// Writes every pair's clouds and the manifest; returns the manifest with checksums filled in.
pub fn write_dataset(pairs: &[ScenePair], manifest: &DatasetManifest, dir: &Path) -> Result<DatasetManifest> {
    let mut out = manifest.clone();
    for entry in out.entries.iter_mut() {
        let pair = pairs
            .iter()
            .find(|p| p.pair_id == entry.pair_id)
            .ok_or_else(|| Error::InvalidArgument(format!("manifest lists unknown pair {}", entry.pair_id)))?;
        entry.source.sha256 = write_cloud(&dir.join(&entry.source.path), &pair.source)?;
        entry.target.sha256 = write_cloud(&dir.join(&entry.target.path), &pair.target)?;
        entry.gt = pair.gt.to_row_major_3x4().to_vec();
    }
    let path = dir.join(MANIFEST_FILE);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(out.to_jsonl().as_bytes()).map_err(|e| Error::io(&path, e))?;
    Ok(out)
}

fn load_checked(dir: &Path, file: &FileRef) -> Result<PointCloud> {
    let path: PathBuf = dir.join(&file.path);
    let bytes = read_file(&path)?;
    let found = hex::encode(Sha256::digest(&bytes));
    if found != file.sha256 {
        return Err(Error::ChecksumMismatch {
            path,
            expected: file.sha256.clone(),
            found,
        });
    }
    decode_cloud(&bytes, &path)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = read_file(&path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::corrupt(&path, "manifest is not UTF-8"))?;
    DatasetManifest::from_jsonl(&text, &path)
}

pub fn load_pair(dir: &Path, entry: &PairEntry) -> Result<ScenePair> {
    Ok(ScenePair {
        source: load_checked(dir, &entry.source)?,
        target: load_checked(dir, &entry.target)?,
        gt: RigidTransform::from_row_major_3x4(&entry.gt)?,
        profile_name: entry.profile.clone(),
        pair_id: entry.pair_id.clone(),
    })
}

pub fn read_dataset(dir: &Path) -> Result<(Vec<ScenePair>, DatasetManifest)> {
    let manifest = read_manifest(dir)?;
    let pairs = manifest
        .entries
        .iter()
        .map(|e| load_pair(dir, e))
        .collect::<Result<Vec<_>>>()?;
    Ok((pairs, manifest))
}

/// Reassigns splits by shuffling entries with `rng`; counts are rounded
/// fractions of the total and the test split takes the remainder.
pub fn split_dataset(manifest: &DatasetManifest, fractions: [f64; 3], rng: &mut Rng) -> Result<DatasetManifest> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be non-negative and sum to 1")));
    }
    let n = manifest.entries.len();
    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
    let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let mut out = manifest.clone();
    for (rank, &i) in order.iter().enumerate() {
        out.entries[i].split = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(out)
}
