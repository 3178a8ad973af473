//! Manifest-based corpus management.
//!
//! A manifest is a JSON document `{schema: 1, id, records: [...]}`. Record
//! paths are relative to the directory holding the manifest. Harvested images
//! live in a content-addressed PNG store next to it.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::label::{ExpressionLabel, NUM_CLASSES};

pub const MANIFEST_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSource {
    Seed,
    Harvest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub path: String,
    pub label: ExpressionLabel,
    pub source: SampleSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_id: Option<String>,
    /// Engine probability of the target at harvest time. Harvest records only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    /// UTC seconds.
    pub ts: i64,
}

impl SampleRecord {
    fn validate(&self) -> Result<()> {
        match (self.source, self.confidence) {
            (SampleSource::Harvest, Some(c)) if (0.0..=1.0).contains(&c) => Ok(()),
            (SampleSource::Harvest, Some(c)) => Err(Error::contract(format!("confidence {c} outside [0,1]"))),
            (SampleSource::Harvest, None) => Err(Error::contract("harvest record without confidence")),
            (SampleSource::Seed, Some(_)) => Err(Error::contract("seed record carries a confidence")),
            (SampleSource::Seed, None) => Ok(()),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFile {
    schema: u32,
    id: String,
    records: Vec<SampleRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    id: String,
    records: Vec<SampleRecord>,
    counts: [usize; NUM_CLASSES],
}

impl DatasetManifest {
    pub fn new(id: impl Into<String>) -> Self {
        DatasetManifest {
            id: id.into(),
            records: Vec::new(),
            counts: [0; NUM_CLASSES],
        }
    }

    /// Validates record invariants and path uniqueness.
    pub fn from_records(id: impl Into<String>, records: Vec<SampleRecord>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        let mut counts = [0; NUM_CLASSES];
        for r in &records {
            r.validate()?;
            if !seen.insert(r.path.as_str()) {
                return Err(Error::DuplicatePath(r.path.clone()));
            }
            counts[r.label.index()] += 1;
        }
        Ok(DatasetManifest {
            id: id.into(),
            records,
            counts,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn contains_path(&self, path: &str) -> bool {
        self.records.iter().any(|r| r.path == path)
    }

    /// Appends a record, rejecting duplicates without mutating.
    pub fn push(&mut self, record: SampleRecord) -> Result<()> {
        record.validate()?;
        if self.contains_path(&record.path) {
            return Err(Error::DuplicatePath(record.path));
        }
        self.counts[record.label.index()] += 1;
        self.records.push(record);
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ManifestFile {
            schema: MANIFEST_SCHEMA,
            id: self.id.clone(),
            records: self.records.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ManifestFile = serde_json::from_str(text)?;
        if file.schema != MANIFEST_SCHEMA {
            return Err(Error::Format(format!("unsupported manifest schema {}", file.schema)));
        }
        DatasetManifest::from_records(file.id, file.records)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        DatasetManifest::from_json(&text)
    }

    /// Writes through a temporary file so readers never see a partial manifest.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, self.to_json()?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    fn with_records(&self, id: String, records: Vec<SampleRecord>) -> DatasetManifest {
        let mut counts = [0; NUM_CLASSES];
        for r in &records {
            counts[r.label.index()] += 1;
        }
        DatasetManifest { id, records, counts }
    }

    /// Record indices grouped by class, in manifest order.
    fn by_class(&self) -> [Vec<usize>; NUM_CLASSES] {
        let mut groups: [Vec<usize>; NUM_CLASSES] = Default::default();
        for (i, r) in self.records.iter().enumerate() {
            groups[r.label.index()].push(i);
        }
        groups
    }
}

pub fn class_counts(m: &DatasetManifest) -> [usize; NUM_CLASSES] {
    m.counts
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_fraction: 0.7,
            seed: 0,
        }
    }
}

/// Train-side count for one class: `fraction · count` rounded half up.
pub fn train_count(fraction: f64, count: usize) -> usize {
    // The epsilon keeps exact halves such as 0.7 · 975 = 682.5 from landing
    // just below the midpoint in binary.
    let exact = fraction * count as f64;
    ((exact + 0.5 + 1e-9).floor() as usize).min(count)
}

fn require_all_classes(m: &DatasetManifest) -> Result<()> {
    if let Some(empty) = m.counts.iter().position(|&c| c == 0) {
        return Err(Error::contract(format!(
            "class {} has no samples",
            ExpressionLabel::from_index(empty).expect("index < 7")
        )));
    }
    Ok(())
}

/// Per-class seeded split; train gets `round_half_up(fraction · count)`.
pub fn stratified_split(m: &DatasetManifest, cfg: &SplitConfig) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) {
        return Err(Error::config(format!("train fraction {} outside (0,1)", cfg.train_fraction)));
    }
    require_all_classes(m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for mut group in m.by_class() {
        group.shuffle(&mut rng);
        let n_train = train_count(cfg.train_fraction, group.len());
        train.extend(group[..n_train].iter().map(|&i| m.records[i].clone()));
        test.extend(group[n_train..].iter().map(|&i| m.records[i].clone()));
    }
    Ok((
        m.with_records(format!("{}-train", m.id), train),
        m.with_records(format!("{}-test", m.id), test),
    ))
}

/// Downsamples every class (uniformly, without replacement) to the smallest
/// class count.
pub fn balanced_subset(m: &DatasetManifest, seed: u64) -> Result<DatasetManifest> {
    require_all_classes(m)?;
    let min = *m.counts.iter().min().expect("7 classes");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(min * NUM_CLASSES);
    for mut group in m.by_class() {
        group.shuffle(&mut rng);
        records.extend(group[..min].iter().map(|&i| m.records[i].clone()));
    }
    Ok(m.with_records(format!("{}-balanced", m.id), records))
}

/// Content-addressed PNG store: `images/<first two hex>/<sha256>.png` under
/// `root`. Returned paths are relative to `root`.
#[derive(Debug, Clone)]
pub struct ImageStore {
    root: PathBuf,
}

impl ImageStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ImageStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Relative path the image would be stored under.
    pub fn path_for(png: &[u8]) -> String {
        let digest = hex::encode(Sha256::digest(png));
        format!("images/{}/{}.png", &digest[..2], digest)
    }

    pub fn put(&self, image: &Image) -> Result<String> {
        let png = image.encode_png();
        let rel = Self::path_for(&png);
        let full = self.root.join(&rel);
        if let Some(dir) = full.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(&full, png).map_err(|e| Error::io(&full, e))?;
        Ok(rel)
    }

    pub fn load(&self, rel: &str) -> Result<Image> {
        Image::load(&self.root.join(rel))
    }
}

/// Stores a matched frame and appends a harvest record. On any failure the
/// manifest is left untouched; a frame whose content is already present is
/// rejected as a duplicate path.
pub fn record_harvest(
    m: &mut DatasetManifest,
    store: &ImageStore,
    image: &Image,
    target: ExpressionLabel,
    confidence: f64,
    user_id: Option<String>,
    ts: i64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&confidence) {
        return Err(Error::contract(format!("confidence {confidence} outside [0,1]")));
    }
    let rel = ImageStore::path_for(&image.encode_png());
    if m.contains_path(&rel) {
        return Err(Error::DuplicatePath(rel));
    }
    let rel = store.put(image)?;
    m.push(SampleRecord {
        path: rel,
        label: target,
        source: SampleSource::Harvest,
        user_id,
        confidence: Some(confidence),
        ts,
    })
}

/// Loads every record's image, resolving paths against `root`.
pub fn load_samples(m: &DatasetManifest, root: &Path) -> Result<Vec<(Image, ExpressionLabel)>> {
    m.records
        .iter()
        .map(|r| Ok((Image::load(&root.join(&r.path))?, r.label)))
        .collect()
}
