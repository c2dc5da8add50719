//! Dataset layout on disk.
//!
//! ```text
//! root/manifest.txt
//! root/clean/<id>.pgm
//! root/noisy/<id>.pgm
//! ```
//!
//! The manifest starts with `#size=HxW`, `#seed=N` and `#fractions=a,b,c`
//! header lines, then an `id,split` header and one record per sample.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;

use super::pgm::{self, GrayImage};
use super::synth::{generate_pair, GenConfig};
use super::{DataError, SamplePair, Split};
use crate::Rng;

pub const MANIFEST_FILE: &str = "manifest.txt";
/// Stream of the seeded generator used for the split shuffle; sample streams
/// use their index.
const SPLIT_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub id: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub fractions: [f64; 3],
    pub entries: Vec<Entry>,
}

/// Train/val/test sizes: each of the first two is `floor(fraction * count)`
/// and test takes the remainder.
pub fn split_sizes(count: usize, fractions: [f64; 3]) -> [usize; 3] {
    let take = |f: f64| ((f * count as f64) + 1e-9).floor() as usize;
    let train = take(fractions[0]).min(count);
    let val = take(fractions[1]).min(count - train);
    [train, val, count - train - val]
}

fn check_fractions(fractions: [f64; 3]) -> Result<(), DataError> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (sum - 1.0).abs() > 1e-6 {
        return Err(DataError::InvalidConfig(format!("split fractions {fractions:?} must be in [0, 1] and sum to 1")));
    }
    Ok(())
}

/// Seeded assignment of ids `0..count` to splits; the result is in id order.
pub fn assign_splits(count: usize, fractions: [f64; 3], seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..count).collect();
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(SPLIT_STREAM);
    order.shuffle(&mut rng);
    let [train, val, _] = split_sizes(count, fractions);
    let mut splits = vec![Split::Test; count];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

fn create_dir(path: &Path) -> Result<(), DataError> {
    fs::create_dir_all(path).map_err(|e| DataError::io(path, e))
}

/// Generates `cfg.count` pairs under `root` and writes the manifest.
pub fn write_dataset(cfg: &GenConfig, root: &Path, fractions: [f64; 3]) -> Result<DatasetManifest, DataError> {
    cfg.validate()?;
    check_fractions(fractions)?;
    create_dir(&root.join("clean"))?;
    create_dir(&root.join("noisy"))?;
    let splits = assign_splits(cfg.count, fractions, cfg.seed);
    let mut entries = Vec::with_capacity(cfg.count);
    for (index, split) in splits.into_iter().enumerate() {
        let pair = generate_pair(cfg, index);
        pgm::write(&root.join("clean").join(format!("{}.pgm", pair.id)), &GrayImage::from_tensor(&pair.clean))?;
        pgm::write(&root.join("noisy").join(format!("{}.pgm", pair.id)), &GrayImage::from_tensor(&pair.noisy))?;
        entries.push(Entry { id: pair.id, split });
    }
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        height: cfg.height,
        width: cfg.width,
        seed: cfg.seed,
        fractions,
        entries,
    };
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, manifest.render()).map_err(|e| DataError::io(&path, e))?;
    Ok(manifest)
}

fn manifest_err(line: usize, message: impl Into<String>) -> DataError {
    DataError::Manifest {
        line,
        message: message.into(),
    }
}

/// Reads and validates `root/manifest.txt`, checking that every id has both
/// image files.
pub fn load_dataset(root: &Path) -> Result<DatasetManifest, DataError> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
    let mut size = None;
    let mut seed = None;
    let mut fractions = None;
    let mut entries = Vec::new();
    let mut seen = BTreeSet::new();
    let mut header_seen = false;
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(meta) = line.strip_prefix('#') {
            let (key, value) = meta.split_once('=').ok_or_else(|| manifest_err(line_no, "expected #key=value"))?;
            match key.trim() {
                "size" => {
                    let (h, w) = value
                        .split_once('x')
                        .and_then(|(h, w)| Some((h.trim().parse().ok()?, w.trim().parse().ok()?)))
                        .ok_or_else(|| manifest_err(line_no, format!("bad size {value:?}")))?;
                    size = Some((h, w));
                }
                "seed" => seed = Some(value.trim().parse().map_err(|_| manifest_err(line_no, "bad seed"))?),
                "fractions" => {
                    let parts: Vec<f64> = value
                        .split(',')
                        .map(|p| p.trim().parse())
                        .collect::<Result<_, _>>()
                        .map_err(|_| manifest_err(line_no, "bad fractions"))?;
                    let f: [f64; 3] = parts.try_into().map_err(|_| manifest_err(line_no, "expected 3 fractions"))?;
                    fractions = Some(f);
                }
                _ => {}
            }
            continue;
        }
        if !header_seen {
            if line != "id,split" {
                return Err(manifest_err(line_no, "expected header id,split"));
            }
            header_seen = true;
            continue;
        }
        let (id, split) = line.split_once(',').ok_or_else(|| manifest_err(line_no, "expected id,split"))?;
        let split: Split = split.trim().parse().map_err(|m: String| manifest_err(line_no, m))?;
        let id = id.trim().to_string();
        if id.is_empty() || !seen.insert(id.clone()) {
            return Err(manifest_err(line_no, format!("empty or duplicate id {id:?}")));
        }
        entries.push(Entry { id, split });
    }
    let (height, width) = size.ok_or_else(|| manifest_err(0, "missing #size header"))?;
    let fractions = fractions.unwrap_or([0.8, 0.1, 0.1]);
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        height,
        width,
        seed: seed.unwrap_or(0),
        fractions,
        entries,
    };
    let missing: Vec<String> = manifest
        .entries
        .iter()
        .filter(|e| !manifest.clean_path(&e.id).is_file() || !manifest.noisy_path(&e.id).is_file())
        .map(|e| e.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(DataError::MissingFiles(missing));
    }
    for split in Split::ALL {
        if manifest.ids(split).is_empty() {
            log::warn!("dataset {}: {split} split is empty", root.display());
        }
    }
    Ok(manifest)
}

impl DatasetManifest {
    pub fn clean_path(&self, id: &str) -> PathBuf {
        self.root.join("clean").join(format!("{id}.pgm"))
    }

    pub fn noisy_path(&self, id: &str) -> PathBuf {
        self.root.join("noisy").join(format!("{id}.pgm"))
    }

    /// Ids of `split` in stable (sorted) order.
    pub fn ids(&self, split: Split) -> Vec<&str> {
        let mut ids: Vec<&str> = self.entries.iter().filter(|e| e.split == split).map(|e| e.id.as_str()).collect();
        ids.sort_unstable();
        ids
    }

    pub fn load_pair(&self, id: &str) -> Result<SamplePair, DataError> {
        Ok(SamplePair {
            id: id.to_string(),
            clean: pgm::read(&self.clean_path(id))?.to_tensor(),
            noisy: pgm::read(&self.noisy_path(id))?.to_tensor(),
        })
    }

    /// All pairs of `split`, in id order.
    pub fn load_split(&self, split: Split) -> Result<Vec<SamplePair>, DataError> {
        self.ids(split).into_iter().map(|id| self.load_pair(id)).collect()
    }

    fn render(&self) -> String {
        let [a, b, c] = self.fractions;
        let mut out = format!("#size={}x{}\n#seed={}\n#fractions={a},{b},{c}\nid,split\n", self.height, self.width, self.seed);
        for e in &self.entries {
            let _ = writeln!(out, "{},{}", e.id, e.split);
        }
        out
    }
}
