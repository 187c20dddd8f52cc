//! Age-labelled face samples: curation, 5-year age bins, seeded stratified
//! splitting and inverse-square-root bin weights.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use image::RgbImage;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::ErrorKind;
use crate::seed;

/// Upper end of the supported age range, in years.
pub const MAX_AGE: f64 = 116.0;
pub const BIN_WIDTH: f64 = 5.0;
/// Number of 5-year bins covering `[0, 116]`.
pub const NUM_BINS: u32 = 24;
/// Bins with fewer samples than this go wholly to the training split.
pub const MIN_STRATIFIED_BIN: usize = 3;

const IMAGE_EXTENSIONS: &[&str] = &["jpg", "jpeg", "png"];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("no usable samples after curation ({0})")]
    NoUsableSamples(CurationLog),
    #[error("invalid sample {id}: {reason}")]
    InvalidSample { id: String, reason: String },
    #[error("invalid split ratios {0:?}: must be positive and sum to 1")]
    InvalidRatios((f64, f64, f64)),
    #[error("cannot split an empty sample set")]
    EmptySampleSet,
    #[error("manifest has no training samples")]
    EmptyTrainSplit,
    #[error("manifest is inconsistent: {0}")]
    InconsistentManifest(String),
    #[error("sample {0} is not part of the corpus")]
    UnknownSample(String),
    #[error("index file {path}:{line}: {reason}")]
    BadIndexLine { path: PathBuf, line: usize, reason: String },
    #[error("cannot load image for sample {id}: {reason}")]
    ImageLoad { id: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed document {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl DatasetError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            DatasetError::InvalidRatios(_) => ErrorKind::Config,
            DatasetError::Io { .. } => ErrorKind::Io,
            _ => ErrorKind::Data,
        }
    }
}

pub fn age_bin(age: f64) -> u32 {
    (age / BIN_WIDTH).floor() as u32
}

fn valid_age(age: f64) -> bool {
    age.is_finite() && (0.0..=MAX_AGE).contains(&age)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub image_ref: PathBuf,
    pub age: f64,
    pub bin: u32,
}

impl Sample {
    pub fn new(
        id: impl Into<String>,
        image_ref: impl Into<PathBuf>,
        age: f64,
    ) -> Result<Self, DatasetError> {
        let id = id.into();
        if !valid_age(age) {
            return Err(DatasetError::InvalidSample {
                id,
                reason: format!("age {age} outside [0, {MAX_AGE}]"),
            });
        }
        Ok(Sample {
            id,
            image_ref: image_ref.into(),
            age,
            bin: age_bin(age),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split '{other}' (expected train, val or test)")),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One unvalidated input row: an image path and the age text as found.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub id: String,
    pub image_ref: PathBuf,
    pub raw_age: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageProbe {
    Ok,
    Missing,
    Unreadable,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationLog {
    pub total: usize,
    pub kept: usize,
    pub missing_image: usize,
    pub unreadable_image: usize,
    pub missing_age: usize,
    pub out_of_range_age: usize,
    pub non_numeric_age: usize,
    pub duplicate_id: usize,
}

impl std::fmt::Display for CurationLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} records, {} kept; rejected: missing image {}, unreadable image {}, missing age {}, \
             out-of-range age {}, non-numeric age {}, duplicate id {}",
            self.total,
            self.kept,
            self.missing_image,
            self.unreadable_image,
            self.missing_age,
            self.out_of_range_age,
            self.non_numeric_age,
            self.duplicate_id
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgeParseError {
    Missing,
    NonNumeric,
}

/// Reads the age from a face-crop file name of the form
/// `<age>_<gender>_<race>_<timestamp>.jpg`.
pub fn parse_age_from_name(filename: &str) -> Result<f64, AgeParseError> {
    let token = filename.split('_').next().unwrap_or("");
    let token = if filename.contains('_') {
        token
    } else {
        // no delimiter: the whole stem would be the token, which is not the format
        return Err(if filename.is_empty() {
            AgeParseError::Missing
        } else {
            AgeParseError::NonNumeric
        });
    };
    if token.is_empty() {
        return Err(AgeParseError::Missing);
    }
    if !token.bytes().all(|b| b.is_ascii_digit()) {
        return Err(AgeParseError::NonNumeric);
    }
    token
        .parse::<u32>()
        .map(f64::from)
        .map_err(|_| AgeParseError::NonNumeric)
}

/// Full decode of the referenced file.
pub fn probe_image_file(path: &Path) -> ImageProbe {
    if !path.is_file() {
        return ImageProbe::Missing;
    }
    match image::ImageReader::open(path)
        .and_then(|r| r.with_guessed_format())
        .map_err(|_| ())
        .and_then(|r| r.decode().map_err(|_| ()))
    {
        Ok(_) => ImageProbe::Ok,
        Err(()) => ImageProbe::Unreadable,
    }
}

/// Keeps records with a decodable image and a numeric age in `[0, 116]`,
/// counting every rejection by reason. Age is checked before the image so
/// that label problems are reported without decoding.
pub fn curate<I, P>(records: I, probe: P) -> Result<(Vec<Sample>, CurationLog), DatasetError>
where
    I: IntoIterator<Item = RawRecord>,
    P: Fn(&Path) -> ImageProbe,
{
    let mut log = CurationLog::default();
    let mut kept = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for rec in records {
        log.total += 1;
        let age = match rec.raw_age.as_deref().map(str::trim) {
            None | Some("") => {
                log.missing_age += 1;
                continue;
            }
            Some(text) => match text.parse::<f64>() {
                Ok(v) if v.is_finite() => v,
                _ => {
                    log.non_numeric_age += 1;
                    continue;
                }
            },
        };
        if !valid_age(age) {
            log.out_of_range_age += 1;
            continue;
        }
        match probe(&rec.image_ref) {
            ImageProbe::Missing => {
                log.missing_image += 1;
                continue;
            }
            ImageProbe::Unreadable => {
                log.unreadable_image += 1;
                continue;
            }
            ImageProbe::Ok => {}
        }
        if !seen.insert(rec.id.clone()) {
            log.duplicate_id += 1;
            continue;
        }
        kept.push(Sample::new(rec.id, rec.image_ref, age)?);
    }
    log.kept = kept.len();
    if kept.is_empty() {
        return Err(DatasetError::NoUsableSamples(log));
    }
    Ok((kept, log))
}

/// Raw records for every image file in `dir` (non-recursive, sorted by
/// name), with ages taken from the file names.
pub fn records_from_dir(dir: &Path) -> Result<Vec<RawRecord>, DatasetError> {
    let io_err = |source| DatasetError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err)? {
        let entry = entry.map_err(io_err)?;
        let path = entry.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if is_image {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                names.push(name.to_string());
            }
        }
    }
    names.sort();
    Ok(names
        .into_iter()
        .map(|name| {
            let raw_age = match parse_age_from_name(&name) {
                Ok(age) => Some(format!("{age}")),
                Err(AgeParseError::Missing) => None,
                Err(AgeParseError::NonNumeric) => Some(name.split('_').next().unwrap_or("").to_string()),
            };
            RawRecord {
                id: name.clone(),
                image_ref: dir.join(&name),
                raw_age,
            }
        })
        .collect())
}

/// Raw records from a two-column `path,age` (or tab separated) index file.
/// Relative paths resolve against the index file's directory; a first row
/// whose second column reads `age` is treated as a header.
pub fn records_from_index(index: &Path) -> Result<Vec<RawRecord>, DatasetError> {
    let text = fs::read_to_string(index).map_err(|source| DatasetError::Io {
        path: index.to_path_buf(),
        source,
    })?;
    let base = index.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let mut cols = line.splitn(2, [',', '\t']);
        let path = cols.next().unwrap_or("").trim();
        let age = cols.next().map(|s| s.trim().to_string());
        if out.is_empty() && age.as_deref().is_some_and(|a| a.eq_ignore_ascii_case("age")) {
            continue;
        }
        if path.is_empty() {
            return Err(DatasetError::BadIndexLine {
                path: index.to_path_buf(),
                line: lineno + 1,
                reason: "empty path column".into(),
            });
        }
        let image_ref = if Path::new(path).is_absolute() {
            PathBuf::from(path)
        } else {
            base.join(path)
        };
        out.push(RawRecord {
            id: path.to_string(),
            image_ref,
            raw_age: age,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for Ratios {
    fn default() -> Self {
        Ratios {
            train: 0.70,
            val: 0.10,
            test: 0.20,
        }
    }
}

impl Ratios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self, DatasetError> {
        let r = Ratios { train, val, test };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let parts = [self.train, self.val, self.test];
        let ok = parts.iter().all(|p| p.is_finite() && *p > 0.0)
            && (parts.iter().sum::<f64>() - 1.0).abs() < 1e-9;
        if ok {
            Ok(())
        } else {
            Err(DatasetError::InvalidRatios((self.train, self.val, self.test)))
        }
    }

    pub fn get(&self, split: Split) -> f64 {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

/// Per-split counts for one bin.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl BinCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// Split counts for a bin of `n` samples: each split gets the floor of its
/// quota and the samples left over go to the largest fractional remainders
/// (ties favour test, then val), so every count is within one sample of
/// `ratio · n`.
pub fn split_counts(n: usize, ratios: &Ratios) -> BinCounts {
    // tolerance keeps e.g. 0.29 * 100 from flooring to 28
    let quota = |r: f64| n as f64 * r;
    let floors = [Split::Train, Split::Val, Split::Test].map(|s| (quota(ratios.get(s)) + 1e-9).floor() as usize);
    let mut counts = floors;
    let assigned: usize = floors.iter().sum();
    let mut left = n.saturating_sub(assigned);
    let mut order: Vec<(f64, usize)> = Split::ALL
        .iter()
        .map(|&s| {
            let q = quota(ratios.get(s));
            ((q - floors[s.index()] as f64).max(0.0), s.index())
        })
        .collect();
    order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(b.1.cmp(&a.1)));
    for &(_, idx) in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[idx] += 1;
        left -= 1;
    }
    BinCounts {
        train: counts[0],
        val: counts[1],
        test: counts[2],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: Ratios,
    pub assignment: BTreeMap<String, Split>,
    pub bins: BTreeMap<String, u32>,
    pub bin_counts: BTreeMap<u32, BinCounts>,
    pub weights: BTreeMap<String, f64>,
    pub degenerate_bins: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curation_log: Option<CurationLog>,
}

/// Seeded, bin-stratified train/val/test assignment.
///
/// Each bin's samples are ordered by id, shuffled with a generator seeded
/// from `(seed, bin)` and cut by [`split_counts`]. Bins with fewer than
/// [`MIN_STRATIFIED_BIN`] samples go entirely to training.
pub fn stratified_split(
    samples: &[Sample],
    ratios: Ratios,
    seed: u64,
) -> Result<SplitManifest, DatasetError> {
    ratios.validate()?;
    if samples.is_empty() {
        return Err(DatasetError::EmptySampleSet);
    }
    let mut by_bin: BTreeMap<u32, Vec<&Sample>> = BTreeMap::new();
    for s in samples {
        if s.bin != age_bin(s.age) {
            return Err(DatasetError::InvalidSample {
                id: s.id.clone(),
                reason: format!("bin {} does not match age {}", s.bin, s.age),
            });
        }
        by_bin.entry(s.bin).or_default().push(s);
    }
    let mut manifest = SplitManifest {
        seed,
        ratios,
        assignment: BTreeMap::new(),
        bins: BTreeMap::new(),
        bin_counts: BTreeMap::new(),
        weights: BTreeMap::new(),
        degenerate_bins: Vec::new(),
        curation_log: None,
    };
    for (bin, mut members) in by_bin {
        members.sort_by(|a, b| a.id.cmp(&b.id));
        let before = members.len();
        members.dedup_by(|a, b| a.id == b.id);
        if members.len() != before {
            return Err(DatasetError::InvalidSample {
                id: members[0].id.clone(),
                reason: "duplicate sample id".into(),
            });
        }
        let mut rng = seed::rng_for(seed, &[bin as u64]);
        members.shuffle(&mut rng);
        let counts = if members.len() < MIN_STRATIFIED_BIN {
            log::info!(
                "bin {bin} has {} sample(s); assigning all of them to train",
                members.len()
            );
            manifest.degenerate_bins.push(bin);
            BinCounts {
                train: members.len(),
                ..BinCounts::default()
            }
        } else {
            split_counts(members.len(), &ratios)
        };
        for (i, s) in members.iter().enumerate() {
            let split = if i < counts.train {
                Split::Train
            } else if i < counts.train + counts.val {
                Split::Val
            } else {
                Split::Test
            };
            manifest.assignment.insert(s.id.clone(), split);
            manifest.bins.insert(s.id.clone(), bin);
        }
        manifest.bin_counts.insert(bin, counts);
    }
    manifest.weights = compute_bin_weights(&manifest)?;
    Ok(manifest)
}

/// `1 / sqrt(n_b)` for every training sample, where `n_b` is the number of
/// training samples in its bin. Stored as metadata only.
pub fn compute_bin_weights(manifest: &SplitManifest) -> Result<BTreeMap<String, f64>, DatasetError> {
    let mut weights = BTreeMap::new();
    for (id, split) in &manifest.assignment {
        if *split != Split::Train {
            continue;
        }
        let bin = manifest.bins.get(id).ok_or_else(|| {
            DatasetError::InconsistentManifest(format!("sample {id} has no bin"))
        })?;
        let n = manifest.bin_counts.get(bin).map_or(0, |c| c.train);
        if n == 0 {
            return Err(DatasetError::InconsistentManifest(format!(
                "bin {bin} has a training sample but zero training count"
            )));
        }
        weights.insert(id.clone(), 1.0 / (n as f64).sqrt());
    }
    if weights.is_empty() {
        return Err(DatasetError::EmptyTrainSplit);
    }
    Ok(weights)
}

impl SplitManifest {
    /// Pretty JSON with a fixed key order; equal manifests give equal bytes.
    pub fn to_canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        crate::io::write_atomic(path, self.to_canonical_json().as_bytes()).map_err(|source| {
            DatasetError::Io {
                path: path.to_path_buf(),
                source,
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let m = Self::from_json(&text).map_err(|source| DatasetError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        m.validate()?;
        Ok(m)
    }

    /// Structural checks: counts agree with the assignment and weights are
    /// defined exactly for training samples.
    pub fn validate(&self) -> Result<(), DatasetError> {
        self.ratios.validate()?;
        let mut counted: BTreeMap<u32, BinCounts> = BTreeMap::new();
        for (id, split) in &self.assignment {
            let bin = self.bins.get(id).ok_or_else(|| {
                DatasetError::InconsistentManifest(format!("sample {id} has no bin"))
            })?;
            let c = counted.entry(*bin).or_default();
            match split {
                Split::Train => c.train += 1,
                Split::Val => c.val += 1,
                Split::Test => c.test += 1,
            }
        }
        if counted != self.bin_counts {
            return Err(DatasetError::InconsistentManifest(
                "bin_counts disagree with assignment".into(),
            ));
        }
        if self.bins.len() != self.assignment.len() {
            return Err(DatasetError::InconsistentManifest(
                "bins and assignment cover different ids".into(),
            ));
        }
        let train_ids: Vec<&String> = self
            .assignment
            .iter()
            .filter(|(_, s)| **s == Split::Train)
            .map(|(id, _)| id)
            .collect();
        if train_ids.len() != self.weights.len() || train_ids.iter().any(|id| !self.weights.contains_key(*id)) {
            return Err(DatasetError::InconsistentManifest(
                "weights must cover exactly the training samples".into(),
            ));
        }
        Ok(())
    }

    /// Ids assigned to `split`, sorted.
    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, s)| **s == split)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.assignment.values().filter(|s| **s == split).count()
    }
}

/// Decoded RGB images by sample.
pub trait ImageSource: Send + Sync {
    fn load(&self, sample: &Sample) -> Result<RgbImage, DatasetError>;
}

/// Decodes `image_ref` from disk, converting to 8-bit RGB.
#[derive(Debug, Clone, Copy, Default)]
pub struct FsImageSource;

impl ImageSource for FsImageSource {
    fn load(&self, sample: &Sample) -> Result<RgbImage, DatasetError> {
        let img = image::ImageReader::open(&sample.image_ref)
            .map_err(|e| DatasetError::ImageLoad {
                id: sample.id.clone(),
                reason: e.to_string(),
            })?
            .with_guessed_format()
            .map_err(|e| DatasetError::ImageLoad {
                id: sample.id.clone(),
                reason: e.to_string(),
            })?
            .decode()
            .map_err(|e| DatasetError::ImageLoad {
                id: sample.id.clone(),
                reason: e.to_string(),
            })?;
        Ok(img.to_rgb8())
    }
}

/// In-memory images keyed by sample id.
#[derive(Debug, Clone, Default)]
pub struct MemoryImageSource {
    images: HashMap<String, RgbImage>,
}

impl MemoryImageSource {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, image: RgbImage) {
        self.images.insert(id.into(), image);
    }
}

impl ImageSource for MemoryImageSource {
    fn load(&self, sample: &Sample) -> Result<RgbImage, DatasetError> {
        self.images
            .get(&sample.id)
            .cloned()
            .ok_or_else(|| DatasetError::ImageLoad {
                id: sample.id.clone(),
                reason: "not in memory source".into(),
            })
    }
}

/// Counts reads of each split, so that code paths which must not touch the
/// held-out split can prove they did not.
#[derive(Debug, Default)]
pub struct AccessAudit {
    reads: [AtomicUsize; 3],
}

impl AccessAudit {
    pub fn record(&self, split: Split) {
        self.reads[split.index()].fetch_add(1, Ordering::SeqCst);
    }

    pub fn reads(&self, split: Split) -> usize {
        self.reads[split.index()].load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        for r in &self.reads {
            r.store(0, Ordering::SeqCst);
        }
    }
}

/// Samples, their split assignment and the image source, with audited
/// access per split.
pub struct Corpus {
    samples: BTreeMap<String, Sample>,
    manifest: SplitManifest,
    source: Box<dyn ImageSource>,
    audit: AccessAudit,
}

impl Corpus {
    pub fn new(
        samples: Vec<Sample>,
        manifest: SplitManifest,
        source: Box<dyn ImageSource>,
    ) -> Result<Self, DatasetError> {
        let samples: BTreeMap<String, Sample> =
            samples.into_iter().map(|s| (s.id.clone(), s)).collect();
        if let Some(id) = manifest.assignment.keys().find(|id| !samples.contains_key(*id)) {
            return Err(DatasetError::UnknownSample(id.clone()));
        }
        Ok(Corpus {
            samples,
            manifest,
            source,
            audit: AccessAudit::default(),
        })
    }

    pub fn manifest(&self) -> &SplitManifest {
        &self.manifest
    }

    pub fn audit(&self) -> &AccessAudit {
        &self.audit
    }

    /// Samples of `split` in canonical (id) order. Recorded in the audit.
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.audit.record(split);
        self.manifest
            .ids(split)
            .into_iter()
            .map(|id| &self.samples[id])
            .collect()
    }

    pub fn load_image(&self, sample: &Sample) -> Result<RgbImage, DatasetError> {
        self.source.load(sample)
    }

    pub fn sample(&self, id: &str) -> Option<&Sample> {
        self.samples.get(id)
    }
}

pub fn save_samples(path: &Path, samples: &[Sample], log: &CurationLog) -> Result<(), DatasetError> {
    #[derive(Serialize)]
    struct Doc<'a> {
        curation_log: &'a CurationLog,
        samples: &'a [Sample],
    }
    let mut text = serde_json::to_string_pretty(&Doc {
        curation_log: log,
        samples,
    })
    .expect("samples serialize");
    text.push('\n');
    crate::io::write_atomic(path, text.as_bytes()).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_samples(path: &Path) -> Result<(Vec<Sample>, CurationLog), DatasetError> {
    #[derive(Deserialize)]
    struct Doc {
        curation_log: CurationLog,
        samples: Vec<Sample>,
    }
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let doc: Doc = serde_json::from_str(&text).map_err(|source| DatasetError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    for s in &doc.samples {
        if !valid_age(s.age) || s.bin != age_bin(s.age) {
            return Err(DatasetError::InvalidSample {
                id: s.id.clone(),
                reason: "age/bin invariant violated".into(),
            });
        }
    }
    Ok((doc.samples, doc.curation_log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples_with_ages(ages: &[f64]) -> Vec<Sample> {
        ages.iter()
            .enumerate()
            .map(|(i, &a)| Sample::new(format!("s{i:05}"), format!("s{i}.png"), a).unwrap())
            .collect()
    }

    #[test]
    fn bins_are_half_open_five_year_buckets() {
        assert_eq!(age_bin(25.0), 5);
        assert_eq!(age_bin(24.999), 4);
        assert_eq!(age_bin(0.0), 0);
        assert_eq!(age_bin(116.0), 23);
    }

    #[test]
    fn parse_age_examples() {
        assert_eq!(parse_age_from_name("25_1_0_20170109.jpg"), Ok(25.0));
        assert_eq!(parse_age_from_name("_1_0_x.jpg"), Err(AgeParseError::Missing));
        assert_eq!(parse_age_from_name("0_0_0_x.jpg"), Ok(0.0));
        assert_eq!(parse_age_from_name("abc_1_0_x.jpg"), Err(AgeParseError::NonNumeric));
        assert_eq!(parse_age_from_name("-3_1_0_x.jpg"), Err(AgeParseError::NonNumeric));
        assert_eq!(parse_age_from_name("noage.jpg"), Err(AgeParseError::NonNumeric));
    }

    #[test]
    fn parse_age_on_face_crop_naming_convention() {
        // [age]_[gender]_[race]_[date&time].jpg.chip.jpg, including the
        // known malformed names that lack the race field.
        let cases = [
            ("1_0_0_20161219140623097.jpg.chip.jpg", 1.0),
            ("100_0_0_20170112213500903.jpg.chip.jpg", 100.0),
            ("116_1_0_20170120134921760.jpg.chip.jpg", 116.0),
            ("26_1_2_20170116161525880.jpg.chip.jpg", 26.0),
            ("35_0_1_20170117135627383.jpg.chip.jpg", 35.0),
            ("45_0_3_20170119171417728.jpg.chip.jpg", 45.0),
            ("9_1_4_20170103213057382.jpg.chip.jpg", 9.0),
            ("80_1_0_20170110131953974.jpg.chip.jpg", 80.0),
            ("39_1_20170116174525125.jpg.chip.jpg", 39.0),
            ("61_1_20170109150557335.jpg.chip.jpg", 61.0),
        ];
        for (name, age) in cases {
            assert_eq!(parse_age_from_name(name), Ok(age), "{name}");
        }
    }

    #[test]
    fn curate_counts_each_rejection_reason() {
        let rec = |id: &str, age: Option<&str>| RawRecord {
            id: id.into(),
            image_ref: PathBuf::from(id),
            raw_age: age.map(String::from),
        };
        let records = vec![
            rec("img.jpg", Some("25.0")),
            rec("old.jpg", Some("130")),
            rec("missing.jpg", Some("40")),
            rec("corrupt.jpg", Some("40")),
            rec("noage.jpg", None),
            rec("blank.jpg", Some("  ")),
            rec("text.jpg", Some("forty")),
            rec("nan.jpg", Some("NaN")),
            rec("neg.jpg", Some("-1")),
            rec("img.jpg", Some("30")),
        ];
        let probe = |p: &Path| match p.to_str().unwrap() {
            "missing.jpg" => ImageProbe::Missing,
            "corrupt.jpg" => ImageProbe::Unreadable,
            _ => ImageProbe::Ok,
        };
        let (kept, log) = curate(records, probe).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].bin, 5);
        assert_eq!(
            log,
            CurationLog {
                total: 10,
                kept: 1,
                missing_image: 1,
                unreadable_image: 1,
                missing_age: 2,
                out_of_range_age: 2,
                non_numeric_age: 2,
                duplicate_id: 1,
            }
        );
    }

    #[test]
    fn curate_with_nothing_usable_is_fatal() {
        let records = vec![RawRecord {
            id: "a".into(),
            image_ref: "a".into(),
            raw_age: Some("200".into()),
        }];
        assert!(matches!(
            curate(records, |_| ImageProbe::Ok),
            Err(DatasetError::NoUsableSamples(_))
        ));
    }

    #[test]
    fn split_count_examples() {
        let r = Ratios::default();
        assert_eq!(split_counts(100, &r), BinCounts { train: 70, val: 10, test: 20 });
        assert_eq!(split_counts(23, &r), BinCounts { train: 16, val: 2, test: 5 });
    }

    /// Brute force: the count vector closest to the quotas in max-norm among
    /// all vectors summing to n, checked against the implementation.
    #[test]
    fn split_counts_within_one_of_quota_brute_force() {
        let r = Ratios::default();
        for n in 3..400 {
            let c = split_counts(n, &r);
            assert_eq!(c.total(), n);
            let mut best = f64::INFINITY;
            for t in 0..=n {
                for v in 0..=(n - t) {
                    let te = n - t - v;
                    let dev = [(t, r.train), (v, r.val), (te, r.test)]
                        .iter()
                        .map(|&(k, q)| (k as f64 - q * n as f64).abs())
                        .fold(0.0, f64::max);
                    best = best.min(dev);
                }
            }
            let got = Split::ALL
                .iter()
                .map(|&s| (c.get(s) as f64 - r.get(s) * n as f64).abs())
                .fold(0.0, f64::max);
            assert!(best < 1.0);
            assert!(got < 1.0, "n={n}: {c:?} deviates by {got}");
        }
    }

    #[test]
    fn floor_floor_remainder_can_exceed_one_sample() {
        // why the leftover goes to the largest remainders instead of always to test
        let n = 19.0;
        let test = 19 - (n * 0.7f64).floor() as usize - (n * 0.1f64).floor() as usize;
        assert!((test as f64 - 0.2 * n).abs() > 1.0);
        assert_eq!(split_counts(19, &Ratios::default()), BinCounts { train: 13, val: 2, test: 4 });
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let ages: Vec<f64> = (0..300).map(|i| (i % 90) as f64 + 0.5).collect();
        let samples = samples_with_ages(&ages);
        let a = stratified_split(&samples, Ratios::default(), 42).unwrap();
        let mut reversed = samples.clone();
        reversed.reverse();
        let b = stratified_split(&reversed, Ratios::default(), 42).unwrap();
        assert_eq!(a.to_canonical_json(), b.to_canonical_json());
        assert_eq!(a.assignment.len(), samples.len());
        let c = stratified_split(&samples, Ratios::default(), 7).unwrap();
        assert_ne!(a.assignment, c.assignment);
        a.validate().unwrap();
    }

    #[test]
    fn adding_a_bin_leaves_other_bins_untouched() {
        let base = samples_with_ages(&[10.0; 40]);
        let mut extended = base.clone();
        extended.extend((0..20).map(|i| Sample::new(format!("z{i}"), "z.png", 70.0).unwrap()));
        let a = stratified_split(&base, Ratios::default(), 42).unwrap();
        let b = stratified_split(&extended, Ratios::default(), 42).unwrap();
        for (id, split) in &a.assignment {
            assert_eq!(b.assignment[id], *split);
        }
    }

    #[test]
    fn degenerate_bins_go_to_train() {
        let samples = samples_with_ages(&[3.0, 3.5, 50.0, 51.0, 52.0, 53.0, 54.0]);
        let m = stratified_split(&samples, Ratios::default(), 1).unwrap();
        assert_eq!(m.degenerate_bins, vec![0]);
        assert_eq!(m.bin_counts[&0], BinCounts { train: 2, val: 0, test: 0 });
    }

    #[test]
    fn bin_weight_examples() {
        let mut ages = vec![1.0];
        ages.extend([12.0; 4]);
        let mut samples = samples_with_ages(&ages);
        // bins: 0 has one sample, 2 has four; put everything in train
        let mut m = stratified_split(&samples, Ratios::default(), 0).unwrap();
        for v in m.assignment.values_mut() {
            *v = Split::Train;
        }
        m.bin_counts = BTreeMap::from([
            (0, BinCounts { train: 1, ..Default::default() }),
            (2, BinCounts { train: 4, ..Default::default() }),
        ]);
        let w = compute_bin_weights(&m).unwrap();
        assert_eq!(w[&samples[0].id], 1.0);
        assert_eq!(w[&samples[1].id], 0.5);

        samples = samples_with_ages(&[40.0; 50]);
        let mut m = stratified_split(&samples, Ratios::default(), 0).unwrap();
        for v in m.assignment.values_mut() {
            *v = Split::Train;
        }
        m.bin_counts = BTreeMap::from([(8, BinCounts { train: 50, ..Default::default() })]);
        let w = compute_bin_weights(&m).unwrap();
        let expected = 1.0 / 50f64.sqrt();
        assert!((w[&samples[0].id] - expected).abs() < 1e-15);
        assert!((expected - 0.141_421_356_237_309_5).abs() < 1e-15);
    }

    #[test]
    fn invalid_ratios_rejected() {
        assert!(Ratios::new(0.7, 0.2, 0.2).is_err());
        assert!(Ratios::new(1.0, 0.0, 0.0).is_err());
        let samples = samples_with_ages(&[5.0; 10]);
        let bad = Ratios { train: 0.5, val: 0.5, test: 0.5 };
        assert!(stratified_split(&samples, bad, 0).is_err());
    }

    #[test]
    fn index_file_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let idx = dir.path().join("index.csv");
        fs::write(&idx, "path,age\na.jpg,25\n# comment\nb.jpg\t\n/abs/c.jpg,x\n").unwrap();
        let recs = records_from_index(&idx).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0].image_ref, dir.path().join("a.jpg"));
        assert_eq!(recs[0].raw_age.as_deref(), Some("25"));
        assert_eq!(recs[1].raw_age.as_deref(), Some(""));
        assert_eq!(recs[2].image_ref, PathBuf::from("/abs/c.jpg"));
    }
}
