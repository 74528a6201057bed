//! Per-beat dataset loading.
//!
//! The on-disk format is the public pre-segmented beat CSV: one beat per row,
//! `L` normalized samples followed by an integer class label (often written
//! as a float such as `2.0`). There is no header. Labels follow the file
//! convention `0=N, 1=S, 2=V, 3=F, 4=Q`; reports list classes alphabetically.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slack allowed on the `[0, 1]` sample range before a row is rejected.
pub const RANGE_TOLERANCE: f64 = 1e-6;

/// Beat length of the public per-beat files.
pub const DEFAULT_BEAT_LEN: usize = 187;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("row {row}: {reason}")]
    Malformed { row: usize, reason: String },
    #[error("row {row}: unknown label {value}")]
    UnknownLabel { row: usize, value: String },
    #[error("row {row}: expected {expected} fields, found {found}")]
    InconsistentLength {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("row {row}, column {column}: sample {value} outside [0, 1]")]
    OutOfRange { row: usize, column: usize, value: f64 },
    #[error("{0} contains no beats")]
    Empty(PathBuf),
}

/// AAMI EC57 beat class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassLabel {
    N,
    S,
    V,
    F,
    Q,
}

impl ClassLabel {
    /// Classes in file-ordinal order (also the model's output unit order).
    pub const ALL: [ClassLabel; 5] = [
        ClassLabel::N,
        ClassLabel::S,
        ClassLabel::V,
        ClassLabel::F,
        ClassLabel::Q,
    ];

    /// Classes in report (alphabetical) order.
    pub const REPORT_ORDER: [ClassLabel; 5] = [
        ClassLabel::F,
        ClassLabel::N,
        ClassLabel::Q,
        ClassLabel::S,
        ClassLabel::V,
    ];

    pub fn ordinal(self) -> usize {
        match self {
            ClassLabel::N => 0,
            ClassLabel::S => 1,
            ClassLabel::V => 2,
            ClassLabel::F => 3,
            ClassLabel::Q => 4,
        }
    }

    pub fn from_ordinal(ordinal: usize) -> Option<Self> {
        Self::ALL.get(ordinal).copied()
    }

    pub fn report_index(self) -> usize {
        match self {
            ClassLabel::F => 0,
            ClassLabel::N => 1,
            ClassLabel::Q => 2,
            ClassLabel::S => 3,
            ClassLabel::V => 4,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            ClassLabel::N => "N",
            ClassLabel::S => "S",
            ClassLabel::V => "V",
            ClassLabel::F => "F",
            ClassLabel::Q => "Q",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for ClassLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "N" | "n" => Ok(ClassLabel::N),
            "S" | "s" => Ok(ClassLabel::S),
            "V" | "v" => Ok(ClassLabel::V),
            "F" | "f" => Ok(ClassLabel::F),
            "Q" | "q" => Ok(ClassLabel::Q),
            other => Err(format!("unknown class code {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeatRecord {
    pub samples: Vec<f64>,
    pub label: ClassLabel,
    pub source_id: Option<String>,
}

impl BeatRecord {
    pub fn new(samples: Vec<f64>, label: ClassLabel) -> Self {
        Self {
            samples,
            label,
            source_id: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
}

impl FromStr for SplitTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitTag::Train),
            "test" => Ok(SplitTag::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Per-class record counts, keyed in report order.
pub type ClassCounts = BTreeMap<ClassLabel, usize>;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<BeatRecord>,
    pub split_tag: SplitTag,
}

impl Dataset {
    pub fn new(records: Vec<BeatRecord>, split_tag: SplitTag) -> Self {
        Self { records, split_tag }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Beat length `L`, taken from the first record.
    pub fn beat_len(&self) -> Option<usize> {
        self.records.first().map(|r| r.samples.len())
    }

    pub fn labels(&self) -> Vec<ClassLabel> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Keeps only records whose label passes `keep`.
    pub fn filter_labels(&self, keep: impl Fn(ClassLabel) -> bool) -> Dataset {
        Dataset {
            records: self
                .records
                .iter()
                .filter(|r| keep(r.label))
                .cloned()
                .collect(),
            split_tag: self.split_tag,
        }
    }
}

/// Counts reported for the public per-beat files.
pub fn reference_counts(split: SplitTag) -> ClassCounts {
    let values = match split {
        SplitTag::Train => [641, 72471, 6431, 2223, 5788],
        SplitTag::Test => [162, 18118, 1608, 556, 1448],
    };
    ClassLabel::REPORT_ORDER
        .iter()
        .copied()
        .zip(values)
        .collect()
}

/// Classes whose counts differ from [`reference_counts`], as
/// `(class, expected, found)`.
pub fn reference_mismatches(ds: &Dataset) -> Vec<(ClassLabel, usize, usize)> {
    let found = class_distribution(ds);
    reference_counts(ds.split_tag)
        .into_iter()
        .filter_map(|(class, expected)| {
            let got = found[&class];
            (got != expected).then_some((class, expected, got))
        })
        .collect()
}

fn parse_label(row: usize, field: &str) -> Result<ClassLabel, IngestError> {
    let unknown = || IngestError::UnknownLabel {
        row,
        value: field.to_string(),
    };
    let value: f64 = field.trim().parse().map_err(|_| unknown())?;
    if value.fract() != 0.0 || !(0.0..=4.0).contains(&value) {
        return Err(unknown());
    }
    ClassLabel::from_ordinal(value as usize).ok_or_else(unknown)
}

/// Parses beat rows from any reader. `source` is only used in error messages.
pub fn read_beat_csv<R: std::io::Read>(
    reader: R,
    split_tag: SplitTag,
    source: &Path,
) -> Result<Dataset, IngestError> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut records = Vec::new();
    let mut width: Option<usize> = None;
    for (row, result) in csv.records().enumerate() {
        let fields = result.map_err(|e| IngestError::Malformed {
            row,
            reason: e.to_string(),
        })?;
        let expected = *width.get_or_insert(fields.len());
        if fields.len() != expected {
            return Err(IngestError::InconsistentLength {
                row,
                expected,
                found: fields.len(),
            });
        }
        if expected < 2 {
            return Err(IngestError::Malformed {
                row,
                reason: "need at least one sample and a label".into(),
            });
        }
        let mut samples = Vec::with_capacity(expected - 1);
        for (column, field) in fields.iter().take(expected - 1).enumerate() {
            let value: f64 = field.parse().map_err(|_| IngestError::Malformed {
                row,
                reason: format!("column {column}: not a number: {field:?}"),
            })?;
            if !(-RANGE_TOLERANCE..=1.0 + RANGE_TOLERANCE).contains(&value) {
                return Err(IngestError::OutOfRange { row, column, value });
            }
            samples.push(value.clamp(0.0, 1.0));
        }
        let label = parse_label(row, &fields[expected - 1])?;
        records.push(BeatRecord::new(samples, label));
    }
    if records.is_empty() {
        return Err(IngestError::Empty(source.to_path_buf()));
    }
    Ok(Dataset::new(records, split_tag))
}

/// Loads a beat CSV. The split tag is inferred from the file name
/// (`*test*` → test, anything else → train); use [`read_beat_csv`] to set it
/// explicitly.
pub fn load_beat_csv(path: &Path) -> Result<Dataset, IngestError> {
    let split = infer_split(path);
    load_beat_csv_as(path, split)
}

pub fn load_beat_csv_as(path: &Path, split_tag: SplitTag) -> Result<Dataset, IngestError> {
    let file = File::open(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_beat_csv(BufReader::with_capacity(1 << 20, file), split_tag, path)
}

pub fn infer_split(path: &Path) -> SplitTag {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().to_lowercase())
        .unwrap_or_default();
    if name.contains("test") {
        SplitTag::Test
    } else {
        SplitTag::Train
    }
}

/// Sidecar written next to every beat CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub count: usize,
    pub beat_len: usize,
    pub split_tag: SplitTag,
    pub counts: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub notes: serde_json::Map<String, serde_json::Value>,
}

impl DatasetManifest {
    pub fn describe(ds: &Dataset) -> Self {
        Self {
            count: ds.len(),
            beat_len: ds.beat_len().unwrap_or(0),
            split_tag: ds.split_tag,
            counts: class_distribution(ds)
                .into_iter()
                .map(|(k, v)| (k.code().to_string(), v))
                .collect(),
            notes: serde_json::Map::new(),
        }
    }
}

/// `beats.csv` → `beats.csv.manifest.json`.
pub fn manifest_path(csv_path: &Path) -> PathBuf {
    let mut name = csv_path.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes rows in the ingest format (labels as `k.0`) and returns the
/// manifest written alongside.
pub fn write_beat_csv(
    ds: &Dataset,
    path: &Path,
    notes: serde_json::Map<String, serde_json::Value>,
) -> Result<DatasetManifest, IngestError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    let mut line = String::new();
    for record in &ds.records {
        line.clear();
        for v in &record.samples {
            // `Display` for f64 is the shortest representation that parses
            // back to the same value.
            line.push_str(&v.to_string());
            line.push(',');
        }
        line.push_str(&format!("{:.1}\n", record.label.ordinal() as f64));
        out.write_all(line.as_bytes()).map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))?;

    let mut manifest = DatasetManifest::describe(ds);
    manifest.notes = notes;
    let mpath = manifest_path(path);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&mpath, json + "\n").map_err(io_err(&mpath))?;
    Ok(manifest)
}

pub fn class_distribution(ds: &Dataset) -> ClassCounts {
    let mut counts: ClassCounts = ClassLabel::ALL.iter().map(|&c| (c, 0)).collect();
    for r in &ds.records {
        *counts.entry(r.label).or_default() += 1;
    }
    counts
}

/// Draws at most `cap_per_class` records of each class, without replacement.
/// Selected records keep their relative order from `ds`.
pub fn stratified_subset(ds: &Dataset, cap_per_class: usize, seed: u64) -> Dataset {
    assert!(cap_per_class >= 1, "cap_per_class must be at least 1");
    let mut by_class: BTreeMap<ClassLabel, Vec<usize>> = BTreeMap::new();
    for (i, r) in ds.records.iter().enumerate() {
        by_class.entry(r.label).or_default().push(i);
    }
    let mut keep = Vec::new();
    for (class, indices) in by_class {
        if indices.len() <= cap_per_class {
            keep.extend(indices);
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, class.ordinal() as u64, 0));
        keep.extend(
            sample(&mut rng, indices.len(), cap_per_class)
                .into_iter()
                .map(|j| indices[j]),
        );
    }
    keep.sort_unstable();
    Dataset {
        records: keep.into_iter().map(|i| ds.records[i].clone()).collect(),
        split_tag: ds.split_tag,
    }
}

/// Derives an independent stream seed from `(root, a, b)` (splitmix64
/// finalizer applied to each component).
pub fn mix_seed(root: u64, a: u64, b: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix(splitmix(splitmix(root) ^ a) ^ b)
}
