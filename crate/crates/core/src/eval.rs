//! Equal error rate, relative-change metrics and per-language reports.
//!
//! Score polarity is fixed: a higher score means "more bona fide". A
//! threshold `t` rejects bona fide utterances scored below it (false
//! rejection) and accepts spoofs scored above it (false acceptance).

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::{Label, Manifest};

pub const SCORE_POLARITY: &str = "higher_is_bona_fide";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("EER needs both classes; got {bona_fide} bona fide and {spoof} spoof scores")]
    SingleClass { bona_fide: usize, spoof: usize },
    #[error("non-finite score for `{0}`")]
    NonFinite(String),
    #[error("reference EER must be positive, got {0}")]
    ZeroReference(f64),
    #[error("benchmark has {benchmark} entries but treated has {treated}")]
    LengthMismatch { benchmark: usize, treated: usize },
    #[error("score for `{0}` has no matching manifest record")]
    UnknownUtterance(String),
    #[error("duplicate score for `{0}`")]
    DuplicateScore(String),
    #[error("score file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub utt_id: String,
    pub score: f64,
    pub label: Label,
}

impl ScoreRecord {
    pub fn new(utt_id: impl Into<String>, score: f64, label: Label) -> Self {
        Self {
            utt_id: utt_id.into(),
            score,
            label,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eer {
    /// Fraction in [0, 1].
    pub eer: f64,
    pub threshold: f64,
}

/// EER by threshold sweep with linear interpolation at the crossing.
///
/// Operating points sit below the lowest score, between every pair of
/// adjacent distinct scores, and above the highest score. Where
/// `FRR - FAR` changes sign between two neighbouring points, both rates and
/// the threshold are interpolated linearly to the point where they meet.
pub fn compute_eer(scores: &[ScoreRecord]) -> Result<Eer, EvalError> {
    let mut pairs = Vec::with_capacity(scores.len());
    for s in scores {
        if !s.score.is_finite() {
            return Err(EvalError::NonFinite(s.utt_id.clone()));
        }
        pairs.push((s.score, s.label));
    }
    eer_from_pairs(&mut pairs)
}

pub fn eer_from_pairs(pairs: &mut [(f64, Label)]) -> Result<Eer, EvalError> {
    let n_bona = pairs.iter().filter(|p| p.1 == Label::BonaFide).count();
    let n_spoof = pairs.len() - n_bona;
    if n_bona == 0 || n_spoof == 0 {
        return Err(EvalError::SingleClass {
            bona_fide: n_bona,
            spoof: n_spoof,
        });
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

    // thresholds and cumulative counts at each operating point
    let lo = pairs[0].0;
    let hi = pairs[pairs.len() - 1].0;
    let mut points: Vec<(f64, usize, usize)> = Vec::new(); // (threshold, bona below, spoof below)
    points.push((lo - 1.0, 0, 0));
    let (mut bona_below, mut spoof_below) = (0usize, 0usize);
    let mut i = 0;
    while i < pairs.len() {
        let value = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == value {
            match pairs[i].1 {
                Label::BonaFide => bona_below += 1,
                Label::Spoof => spoof_below += 1,
            }
            i += 1;
        }
        let threshold = if i < pairs.len() {
            value + (pairs[i].0 - value) / 2.0
        } else {
            hi + 1.0
        };
        points.push((threshold, bona_below, spoof_below));
    }

    let rates = |&(t, b, s): &(f64, usize, usize)| {
        let frr = b as f64 / n_bona as f64;
        let far = (n_spoof - s) as f64 / n_spoof as f64;
        (t, frr, far)
    };
    let mut prev = rates(&points[0]);
    for p in &points[1..] {
        let cur = rates(p);
        let d = cur.1 - cur.2;
        if d == 0.0 {
            return Ok(Eer {
                eer: cur.1,
                threshold: cur.0,
            });
        }
        if d > 0.0 {
            return Ok(interpolate(prev, cur));
        }
        prev = cur;
    }
    unreachable!("FRR - FAR reaches +1 at the last operating point")
}

fn interpolate((t0, frr0, far0): (f64, f64, f64), (t1, frr1, far1): (f64, f64, f64)) -> Eer {
    let alpha = (far0 - frr0) / ((frr1 - frr0) - (far1 - far0));
    Eer {
        eer: frr0 + alpha * (frr1 - frr0),
        threshold: t0 + alpha * (t1 - t0),
    }
}

/// Percentage change `100 * (new - ref) / ref`.
pub fn relative_change(eer_ref: f64, eer_new: f64) -> Result<f64, EvalError> {
    if !(eer_ref > 0.0) {
        return Err(EvalError::ZeroReference(eer_ref));
    }
    Ok(100.0 * (eer_new - eer_ref) / eer_ref)
}

/// Mean relative change over aligned test sets; negative means a reduction.
pub fn avg_relative_reduction(benchmark: &[f64], treated: &[f64]) -> Result<f64, EvalError> {
    if benchmark.len() != treated.len() {
        return Err(EvalError::LengthMismatch {
            benchmark: benchmark.len(),
            treated: treated.len(),
        });
    }
    if benchmark.is_empty() {
        return Err(EvalError::LengthMismatch {
            benchmark: 0,
            treated: 0,
        });
    }
    let total = benchmark
        .iter()
        .zip(treated)
        .map(|(&b, &t)| relative_change(b, t))
        .sum::<Result<f64, _>>()?;
    Ok(total / benchmark.len() as f64)
}

/// Attach labels from the manifest. Every score must match one record.
pub fn join_scores(raw: &[(String, f64)], manifest: &Manifest) -> Result<Vec<ScoreRecord>, EvalError> {
    let labels: HashMap<&str, Label> = manifest
        .records()
        .iter()
        .map(|r| (r.utt_id.as_str(), r.label))
        .collect();
    let mut seen = std::collections::HashSet::new();
    raw.iter()
        .map(|(id, score)| {
            if !seen.insert(id.as_str()) {
                return Err(EvalError::DuplicateScore(id.clone()));
            }
            let label = *labels
                .get(id.as_str())
                .ok_or_else(|| EvalError::UnknownUtterance(id.clone()))?;
            if !score.is_finite() {
                return Err(EvalError::NonFinite(id.clone()));
            }
            Ok(ScoreRecord::new(id.clone(), *score, label))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEer {
    pub group: String,
    pub bona_fide: usize,
    pub spoof: usize,
    /// `None` when the group lacks one of the classes.
    pub eer: Option<f64>,
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeChangeEntry {
    pub name: String,
    pub reference: f64,
    pub value: f64,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub manifest: String,
    pub config_hash: Option<String>,
    pub overall: GroupEer,
    pub per_language: Vec<GroupEer>,
    #[serde(default)]
    pub relative_changes: Vec<RelativeChangeEntry>,
}

fn group_eer(group: String, scores: &[ScoreRecord]) -> GroupEer {
    let bona_fide = scores.iter().filter(|s| s.label == Label::BonaFide).count();
    let spoof = scores.len() - bona_fide;
    let result = compute_eer(scores).ok();
    GroupEer {
        group,
        bona_fide,
        spoof,
        eer: result.map(|r| r.eer),
        threshold: result.map(|r| r.threshold),
    }
}

/// One EER per language (sorted by code) plus the pooled overall EER.
pub fn per_language_report(
    scores: &[ScoreRecord],
    manifest: &Manifest,
    model_id: &str,
) -> Result<EvalReport, EvalError> {
    let language: HashMap<&str, &str> = manifest
        .records()
        .iter()
        .map(|r| (r.utt_id.as_str(), r.language.as_str()))
        .collect();
    let mut groups: BTreeMap<&str, Vec<ScoreRecord>> = BTreeMap::new();
    for s in scores {
        let lang = language
            .get(s.utt_id.as_str())
            .ok_or_else(|| EvalError::UnknownUtterance(s.utt_id.clone()))?;
        groups.entry(lang).or_default().push(s.clone());
    }
    Ok(EvalReport {
        model_id: model_id.to_string(),
        manifest: manifest.name.clone(),
        config_hash: None,
        overall: group_eer("overall".into(), scores),
        per_language: groups
            .into_iter()
            .map(|(lang, s)| group_eer(lang.to_string(), &s))
            .collect(),
        relative_changes: Vec::new(),
    })
}

fn fmt_eer(eer: Option<f64>) -> String {
    match eer {
        Some(e) => format!("{:.4}", 100.0 * e),
        None => "undefined".to_string(),
    }
}

impl EvalReport {
    /// Tab-separated table, EER in percent.
    pub fn to_table(&self) -> String {
        let mut out = String::from("group\tbona_fide\tspoof\teer_percent\n");
        for g in self.per_language.iter().chain(std::iter::once(&self.overall)) {
            let _ = writeln!(out, "{}\t{}\t{}\t{}", g.group, g.bona_fide, g.spoof, fmt_eer(g.eer));
        }
        out
    }

    /// Radar data: one `(language, eer)` row per axis, axes in code order.
    pub fn radar_table(&self) -> String {
        let mut out = String::from("language\teer_percent\n");
        for g in &self.per_language {
            let _ = writeln!(out, "{}\t{}", g.group, fmt_eer(g.eer));
        }
        out
    }

    pub fn radar_svg(&self) -> String {
        radar_svg(&self.per_language)
    }

    /// Writes `report.tsv`, `radar.tsv`, `radar.svg` and `report.json`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<(), EvalError> {
        let io = |path: PathBuf| move |source| EvalError::Io { path, source };
        fs::create_dir_all(dir).map_err(io(dir.to_path_buf()))?;
        let files = [
            ("report.tsv", self.to_table()),
            ("radar.tsv", self.radar_table()),
            ("radar.svg", self.radar_svg()),
            (
                "report.json",
                serde_json::to_string_pretty(self).expect("report serializes"),
            ),
        ];
        for (name, body) in files {
            let p = dir.join(name);
            fs::write(&p, body).map_err(io(p.clone()))?;
        }
        Ok(())
    }
}

fn radar_svg(groups: &[GroupEer]) -> String {
    const SIZE: f64 = 400.0;
    const RADIUS: f64 = 150.0;
    let c = SIZE / 2.0;
    let n = groups.len().max(1) as f64;
    let max_eer = groups
        .iter()
        .filter_map(|g| g.eer)
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let point = |i: usize, r: f64| {
        let angle = -std::f64::consts::FRAC_PI_2 + 2.0 * std::f64::consts::PI * i as f64 / n;
        (c + r * angle.cos(), c + r * angle.sin())
    };
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">\n"
    );
    for ring in 1..=4 {
        let _ = writeln!(
            svg,
            "  <circle cx=\"{c}\" cy=\"{c}\" r=\"{:.1}\" fill=\"none\" stroke=\"#ccc\"/>",
            RADIUS * ring as f64 / 4.0
        );
    }
    let mut poly = Vec::new();
    for (i, g) in groups.iter().enumerate() {
        let (x, y) = point(i, RADIUS);
        let (lx, ly) = point(i, RADIUS + 20.0);
        let _ = writeln!(svg, "  <line x1=\"{c}\" y1=\"{c}\" x2=\"{x:.1}\" y2=\"{y:.1}\" stroke=\"#999\"/>");
        let _ = writeln!(
            svg,
            "  <text x=\"{lx:.1}\" y=\"{ly:.1}\" text-anchor=\"middle\" font-size=\"12\">{} ({})</text>",
            g.group,
            fmt_eer(g.eer)
        );
        if let Some(e) = g.eer {
            let (px, py) = point(i, RADIUS * e / max_eer);
            poly.push(format!("{px:.1},{py:.1}"));
        }
    }
    let _ = writeln!(
        svg,
        "  <polygon points=\"{}\" fill=\"steelblue\" fill-opacity=\"0.3\" stroke=\"steelblue\"/>",
        poly.join(" ")
    );
    svg.push_str("</svg>\n");
    svg
}

/// Score file: a `#` header declaring polarity and model, then
/// `utt_id<space>score` per line.
pub fn write_scores(path: &Path, model_id: &str, scores: &[(String, f64)]) -> Result<(), EvalError> {
    let io = |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
    writeln!(f, "# polarity={SCORE_POLARITY} model={model_id}").map_err(io)?;
    for (id, s) in scores {
        writeln!(f, "{id} {s:?}").map_err(io)?;
    }
    f.flush().map_err(io)
}

pub fn read_scores(path: &Path) -> Result<Vec<(String, f64)>, EvalError> {
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(header) = line.strip_prefix('#') {
            if let Some(p) = header.split_whitespace().find_map(|kv| kv.strip_prefix("polarity=")) {
                if p != SCORE_POLARITY {
                    return Err(EvalError::Parse {
                        line: i + 1,
                        message: format!("unsupported polarity `{p}`"),
                    });
                }
            }
            continue;
        }
        let (id, score) = line.rsplit_once(' ').ok_or_else(|| EvalError::Parse {
            line: i + 1,
            message: "expected `utt_id score`".into(),
        })?;
        let score: f64 = score.parse().map_err(|e| EvalError::Parse {
            line: i + 1,
            message: format!("bad score: {e}"),
        })?;
        out.push((id.to_string(), score));
    }
    Ok(out)
}
