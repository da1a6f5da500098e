//! Utterance records and manifest arithmetic.
//!
//! A manifest file is JSON Lines: one flat object per utterance with the
//! field names of [`UtteranceRecord`]; optional fields are omitted when
//! unset. Field order on disk follows the struct declaration so that a
//! load/save cycle is byte-stable.
//!
//! Splitting and downsampling are stratified by label. Candidates are sorted
//! by `utt_id` before a seeded shuffle, so membership is independent of the
//! on-disk order of the input.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate utt_id `{0}`")]
    DuplicateId(String),
    #[error("line {line}: invalid record `{utt_id}`: {reason}")]
    InvalidRecord {
        line: usize,
        utt_id: String,
        reason: String,
    },
    #[error("manifest `{0}` is empty")]
    Empty(String),
    #[error("invalid split ratio {train}:{valid}; both parts must be positive")]
    InvalidRatio { train: u32, valid: u32 },
    #[error("downsample target {target} exceeds manifest size {available}")]
    TargetTooLarge { target: usize, available: usize },
    #[error("downsample target must be positive")]
    ZeroTarget,
    #[error("unknown group key `{0}` (expected label, language, source or portion)")]
    UnknownGroupKey(String),
}

pub type Result<T> = std::result::Result<T, ManifestError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    BonaFide,
    Spoof,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::BonaFide, Label::Spoof];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::BonaFide => "bona_fide",
            Label::Spoof => "spoof",
        }
    }

    /// Class index used by the classifiers: 0 = bona fide, 1 = spoof.
    pub fn class_index(self) -> usize {
        match self {
            Label::BonaFide => 0,
            Label::Spoof => 1,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Training-set partition an utterance belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Portion {
    /// Public corpora.
    I,
    /// Accent-expanded synthesis output; always spoof.
    II,
    /// Private data, ingested by manifest only.
    III,
    #[serde(rename = "test")]
    Test,
}

impl Portion {
    pub fn as_str(self) -> &'static str {
        match self {
            Portion::I => "I",
            Portion::II => "II",
            Portion::III => "III",
            Portion::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub utt_id: String,
    /// Relative paths are resolved against the manifest root.
    pub audio_path: PathBuf,
    pub label: Label,
    pub language: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accent: Option<String>,
    pub source: String,
    pub portion: Portion,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_sec: Option<f64>,
    /// Speaker identity where the source corpus provides one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker_id: Option<String>,
    /// For derived spoofs: the bona fide utterance that was converted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_utt: Option<String>,
    /// For converted spoofs: the utterance used as target-speaker reference.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_ref: Option<String>,
}

impl UtteranceRecord {
    pub fn new(
        utt_id: impl Into<String>,
        audio_path: impl Into<PathBuf>,
        label: Label,
        language: impl Into<String>,
        source: impl Into<String>,
        portion: Portion,
    ) -> Self {
        Self {
            utt_id: utt_id.into(),
            audio_path: audio_path.into(),
            label,
            language: language.into(),
            accent: None,
            source: source.into(),
            portion,
            duration_sec: None,
            speaker_id: None,
            source_utt: None,
            target_ref: None,
        }
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.utt_id.is_empty() {
            return Err("utt_id is empty".into());
        }
        if self.language.is_empty() {
            return Err("language is empty".into());
        }
        if self.portion == Portion::II && self.label != Label::Spoof {
            return Err("portion II records must be spoof".into());
        }
        if let Some(d) = self.duration_sec {
            if !(d.is_finite() && d >= 0.0) {
                return Err(format!("duration_sec {d} is not a non-negative number"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub name: String,
    pub root: Option<PathBuf>,
    records: Vec<UtteranceRecord>,
}

impl Manifest {
    pub fn new(name: impl Into<String>, records: Vec<UtteranceRecord>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if !seen.insert(r.utt_id.as_str()) {
                return Err(ManifestError::DuplicateId(r.utt_id.clone()));
            }
            r.check().map_err(|reason| ManifestError::InvalidRecord {
                line: i + 1,
                utt_id: r.utt_id.clone(),
                reason,
            })?;
        }
        Ok(Self {
            name: name.into(),
            root: None,
            records,
        })
    }

    pub fn empty(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            root: None,
            records: Vec::new(),
        }
    }

    pub fn with_root(mut self, root: impl Into<PathBuf>) -> Self {
        self.root = Some(root.into());
        self
    }

    pub fn records(&self) -> &[UtteranceRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<UtteranceRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, utt_id: &str) -> Option<&UtteranceRecord> {
        self.records.iter().find(|r| r.utt_id == utt_id)
    }

    pub fn count(&self, label: Label) -> usize {
        self.records.iter().filter(|r| r.label == label).count()
    }

    /// Absolute (or root-relative) location of a record's audio.
    pub fn resolve_audio(&self, record: &UtteranceRecord) -> PathBuf {
        match &self.root {
            Some(root) if record.audio_path.is_relative() => root.join(&record.audio_path),
            _ => record.audio_path.clone(),
        }
    }

    /// Stratified train/validation split.
    ///
    /// The training side receives `floor(N * train / (train + valid))`
    /// records; the remainder goes to validation. Per-class counts are
    /// apportioned by largest remainder so every class is within one record
    /// of its exact share.
    pub fn split(&self, ratio_train: u32, ratio_valid: u32, seed: u64) -> Result<(Manifest, Manifest)> {
        if ratio_train == 0 || ratio_valid == 0 {
            return Err(ManifestError::InvalidRatio {
                train: ratio_train,
                valid: ratio_valid,
            });
        }
        if self.records.is_empty() {
            return Err(ManifestError::Empty(self.name.clone()));
        }
        let n = self.records.len();
        let n_train =
            (n as u128 * ratio_train as u128 / (ratio_train as u128 + ratio_valid as u128)) as usize;

        let by_class = self.shuffled_by_class(seed, "manifest.split");
        let counts: Vec<usize> = by_class.iter().map(|c| c.len()).collect();
        let quotas = apportion(&counts, n_train);

        let mut train = Vec::with_capacity(n_train);
        let mut valid = Vec::with_capacity(n - n_train);
        for (members, quota) in by_class.into_iter().zip(quotas) {
            let (t, v) = members.split_at(quota);
            train.extend(t.iter().map(|&i| self.records[i].clone()));
            valid.extend(v.iter().map(|&i| self.records[i].clone()));
        }
        train.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
        valid.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
        Ok((
            self.derived(format!("{}.train", self.name), train),
            self.derived(format!("{}.valid", self.name), valid),
        ))
    }

    /// Stratified random subset of exactly `target` records, sorted by `utt_id`.
    pub fn downsample(&self, target: usize, seed: u64) -> Result<Manifest> {
        if target == 0 {
            return Err(ManifestError::ZeroTarget);
        }
        if target > self.records.len() {
            return Err(ManifestError::TargetTooLarge {
                target,
                available: self.records.len(),
            });
        }
        let by_class = self.shuffled_by_class(seed, "manifest.downsample");
        let counts: Vec<usize> = by_class.iter().map(|c| c.len()).collect();
        let quotas = apportion(&counts, target);
        let mut out: Vec<UtteranceRecord> = by_class
            .into_iter()
            .zip(quotas)
            .flat_map(|(members, q)| members.into_iter().take(q))
            .map(|i| self.records[i].clone())
            .collect();
        out.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
        Ok(self.derived(format!("{}.ds{}", self.name, target), out))
    }

    /// Per-class index lists, each sorted by utt_id then shuffled with a
    /// class-keyed stream.
    fn shuffled_by_class(&self, seed: u64, stream: &str) -> Vec<Vec<usize>> {
        Label::ALL
            .iter()
            .map(|&label| {
                let mut idx: Vec<usize> = (0..self.records.len())
                    .filter(|&i| self.records[i].label == label)
                    .collect();
                idx.sort_by(|&a, &b| self.records[a].utt_id.cmp(&self.records[b].utt_id));
                let mut rng = seed::rng(seed, stream, &[label.as_str().as_bytes()]);
                idx.shuffle(&mut rng);
                idx
            })
            .collect()
    }

    fn derived(&self, name: String, records: Vec<UtteranceRecord>) -> Manifest {
        Manifest {
            name,
            root: self.root.clone(),
            records,
        }
    }

    /// Count table grouped by any subset of label, language, source, portion.
    pub fn summarize(&self, group_by: &[GroupKey]) -> Summary {
        let mut rows: BTreeMap<Vec<String>, (usize, usize)> = BTreeMap::new();
        for r in &self.records {
            let key = group_by.iter().map(|k| k.value(r).to_string()).collect();
            let entry = rows.entry(key).or_default();
            match r.label {
                Label::BonaFide => entry.0 += 1,
                Label::Spoof => entry.1 += 1,
            }
        }
        Summary {
            group_by: group_by.to_vec(),
            rows: rows
                .into_iter()
                .map(|(key, (bona_fide, spoof))| SummaryRow {
                    key,
                    bona_fide,
                    spoof,
                })
                .collect(),
        }
    }
}

/// Concatenate manifests in order. Ids must be globally unique.
///
/// When the inputs do not share a root, relative audio paths are rewritten
/// against their own manifest's root and the result has no root.
pub fn merge(manifests: &[Manifest], name: impl Into<String>) -> Result<Manifest> {
    let shared_root = match manifests.split_first() {
        Some((first, rest)) if rest.iter().all(|m| m.root == first.root) => first.root.clone(),
        _ => None,
    };
    let total = manifests.iter().map(Manifest::len).sum();
    let mut records = Vec::with_capacity(total);
    let mut seen = HashSet::with_capacity(total);
    for m in manifests {
        for r in &m.records {
            if !seen.insert(r.utt_id.clone()) {
                return Err(ManifestError::DuplicateId(r.utt_id.clone()));
            }
            let mut r = r.clone();
            if shared_root.is_none() {
                r.audio_path = m.resolve_audio(&r);
            }
            records.push(r);
        }
    }
    Ok(Manifest {
        name: name.into(),
        root: shared_root,
        records,
    })
}

/// Split `total` across groups proportionally to `counts` (largest remainder,
/// ties to the earlier group).
pub fn apportion(counts: &[usize], total: usize) -> Vec<usize> {
    let n: u128 = counts.iter().map(|&c| c as u128).sum();
    if n == 0 {
        return vec![0; counts.len()];
    }
    let mut quotas: Vec<usize> = counts
        .iter()
        .map(|&c| (c as u128 * total as u128 / n) as usize)
        .collect();
    let mut rema: Vec<(u128, usize)> = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| (c as u128 * total as u128 % n, i))
        .collect();
    rema.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let assigned: usize = quotas.iter().sum();
    for &(_, i) in rema.iter().take(total - assigned) {
        quotas[i] += 1;
    }
    quotas
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let io_err = |source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: UtteranceRecord =
            serde_json::from_str(&line).map_err(|e| ManifestError::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
        record.check().map_err(|reason| ManifestError::InvalidRecord {
            line: lineno,
            utt_id: record.utt_id.clone(),
            reason,
        })?;
        if !seen.insert(record.utt_id.clone()) {
            return Err(ManifestError::DuplicateId(record.utt_id));
        }
        records.push(record);
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Manifest {
        name,
        root: path.parent().map(Path::to_path_buf),
        records,
    })
}

pub fn save_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for r in &manifest.records {
        let line = serde_json::to_string(r).expect("records always serialize");
        out.write_all(line.as_bytes()).map_err(io_err)?;
        out.write_all(b"\n").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GroupKey {
    Label,
    Language,
    Source,
    Portion,
}

impl GroupKey {
    pub fn as_str(self) -> &'static str {
        match self {
            GroupKey::Label => "label",
            GroupKey::Language => "language",
            GroupKey::Source => "source",
            GroupKey::Portion => "portion",
        }
    }

    fn value(self, r: &UtteranceRecord) -> &str {
        match self {
            GroupKey::Label => r.label.as_str(),
            GroupKey::Language => &r.language,
            GroupKey::Source => &r.source,
            GroupKey::Portion => r.portion.as_str(),
        }
    }

    /// Parse a comma-separated list such as `language,portion`.
    pub fn parse_list(s: &str) -> Result<Vec<GroupKey>> {
        s.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(GroupKey::from_str)
            .collect()
    }
}

impl FromStr for GroupKey {
    type Err = ManifestError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "label" => Ok(GroupKey::Label),
            "language" => Ok(GroupKey::Language),
            "source" => Ok(GroupKey::Source),
            "portion" => Ok(GroupKey::Portion),
            other => Err(ManifestError::UnknownGroupKey(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SummaryRow {
    pub key: Vec<String>,
    pub bona_fide: usize,
    pub spoof: usize,
}

impl SummaryRow {
    pub fn total(&self) -> usize {
        self.bona_fide + self.spoof
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Summary {
    pub group_by: Vec<GroupKey>,
    pub rows: Vec<SummaryRow>,
}

impl Summary {
    pub fn total(&self) -> usize {
        self.rows.iter().map(SummaryRow::total).sum()
    }

    pub fn row(&self, key: &[&str]) -> Option<&SummaryRow> {
        self.rows
            .iter()
            .find(|r| r.key.iter().map(String::as_str).eq(key.iter().copied()))
    }

    /// Delimiter-separated rendering with a header line.
    pub fn to_table(&self, delimiter: char) -> String {
        let mut out = String::new();
        let mut header: Vec<&str> = self.group_by.iter().map(|k| k.as_str()).collect();
        header.extend(["bona_fide", "spoof", "total"]);
        push_row(&mut out, header.iter().copied(), delimiter);
        for row in &self.rows {
            let counts = [
                row.bona_fide.to_string(),
                row.spoof.to_string(),
                row.total().to_string(),
            ];
            push_row(
                &mut out,
                row.key.iter().map(String::as_str).chain(counts.iter().map(String::as_str)),
                delimiter,
            );
        }
        out
    }
}

fn push_row<'a>(out: &mut String, cells: impl Iterator<Item = &'a str>, delimiter: char) {
    for (i, c) in cells.enumerate() {
        if i > 0 {
            out.push(delimiter);
        }
        out.push_str(c);
    }
    out.push('\n');
}
