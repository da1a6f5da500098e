//! Accent-based data expansion.
//!
//! English transcripts are voiced by TTS engines drawn from one of two
//! groups: English-accent engines, or engines for other languages that read
//! the English text with their own accent. Every rendering becomes a spoof
//! record in portion II with `language = "en"`.
//!
//! Synthesis goes through [`SynthesisBackend`]. [`MockBackend`] is a
//! deterministic offline backend; [`RemoteBackend`] is an HTTP adapter with
//! bounded retries and a request-rate cap.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::audio::{self, Waveform};
use crate::manifest::{Label, Manifest, Portion, UtteranceRecord};
use crate::seed;

pub const ENDPOINT_ENV: &str = "ACCENT_FORGE_TTS_ENDPOINT";
pub const API_KEY_ENV: &str = "ACCENT_FORGE_TTS_API_KEY";

#[derive(Debug, Error)]
pub enum ExpandError {
    #[error("duplicate engine_id `{0}` in registry")]
    DuplicateEngine(String),
    #[error("engine group `{0}` is empty")]
    EmptyGroup(EngineGroup),
    #[error("registry {path}: {message}")]
    Registry { path: PathBuf, message: String },
    #[error("transcript {0}: text is empty")]
    EmptyTranscript(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("backend unreachable: all {attempted} syntheses failed; first error: {first}")]
    BackendUnreachable { attempted: usize, first: String },
    #[error(transparent)]
    Manifest(#[from] crate::manifest::ManifestError),
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SynthesisError {
    #[error("text is empty")]
    EmptyText,
    #[error("text of {len} characters exceeds backend limit {max}")]
    TextTooLong { len: usize, max: usize },
    #[error("engine `{0}` is not supported by this backend")]
    UnknownEngine(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend error: {0}")]
    Backend(String),
}

/// Which family of engines to draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EngineGroup {
    /// English voices with regional accents.
    #[serde(rename = "english-accents")]
    EnglishAccents,
    /// Engines for other languages reading English text.
    #[serde(rename = "other-language")]
    OtherLanguage,
}

impl EngineGroup {
    pub fn of_language(language_code: &str) -> Self {
        let primary = language_code.split(['-', '_']).next().unwrap_or("");
        if primary.eq_ignore_ascii_case("en") {
            EngineGroup::EnglishAccents
        } else {
            EngineGroup::OtherLanguage
        }
    }
}

impl fmt::Display for EngineGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EngineGroup::EnglishAccents => "english-accents",
            EngineGroup::OtherLanguage => "other-language",
        })
    }
}

impl FromStr for EngineGroup {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "eng" | "english-accents" => Ok(EngineGroup::EnglishAccents),
            "mix" | "other-language" => Ok(EngineGroup::OtherLanguage),
            other => Err(format!("unknown engine group `{other}` (expected eng or mix)")),
        }
    }
}

fn default_rate() -> u32 {
    24_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TtsEngineSpec {
    pub engine_id: String,
    pub language_code: String,
    /// Regional accent for English engines; empty otherwise.
    #[serde(default)]
    pub accent_tag: String,
    #[serde(default = "default_rate")]
    pub output_sample_rate: u32,
}

impl TtsEngineSpec {
    pub fn new(engine_id: &str, language_code: &str, accent_tag: &str) -> Self {
        Self {
            engine_id: engine_id.to_string(),
            language_code: language_code.to_string(),
            accent_tag: accent_tag.to_string(),
            output_sample_rate: default_rate(),
        }
    }

    pub fn group(&self) -> EngineGroup {
        EngineGroup::of_language(&self.language_code)
    }

    /// Accent written to output records: the accent tag, or the engine's
    /// language for other-language engines.
    pub fn accent_label(&self) -> &str {
        if self.accent_tag.is_empty() {
            &self.language_code
        } else {
            &self.accent_tag
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct EngineRegistry {
    engines: Vec<TtsEngineSpec>,
    index: HashMap<String, usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RegistryFile {
    #[serde(default)]
    engine: Vec<TtsEngineSpec>,
}

impl EngineRegistry {
    pub fn register(specs: Vec<TtsEngineSpec>) -> Result<Self, ExpandError> {
        let mut index = HashMap::with_capacity(specs.len());
        for (i, s) in specs.iter().enumerate() {
            if index.insert(s.engine_id.clone(), i).is_some() {
                return Err(ExpandError::DuplicateEngine(s.engine_id.clone()));
            }
        }
        Ok(Self {
            engines: specs,
            index,
        })
    }

    /// Parse a TOML registry made of `[[engine]]` tables.
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, ExpandError> {
        let file: RegistryFile = toml::from_str(text).map_err(|e| ExpandError::Registry {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::register(file.engine)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExpandError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ExpandError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path)
    }

    pub fn len(&self) -> usize {
        self.engines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.engines.is_empty()
    }

    pub fn engines(&self) -> &[TtsEngineSpec] {
        &self.engines
    }

    pub fn get(&self, engine_id: &str) -> Option<&TtsEngineSpec> {
        self.index.get(engine_id).map(|&i| &self.engines[i])
    }

    pub fn by_language(&self, language_code: &str) -> Vec<&TtsEngineSpec> {
        self.engines
            .iter()
            .filter(|e| e.language_code == language_code)
            .collect()
    }

    /// Engines of a group, in registry order.
    pub fn group(&self, group: EngineGroup) -> Vec<&TtsEngineSpec> {
        self.engines.iter().filter(|e| e.group() == group).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transcript {
    pub transcript_id: String,
    pub text: String,
    pub source: String,
}

impl Transcript {
    pub fn new(transcript_id: &str, text: &str, source: &str) -> Result<Self, ExpandError> {
        if text.trim().is_empty() {
            return Err(ExpandError::EmptyTranscript(transcript_id.to_string()));
        }
        Ok(Self {
            transcript_id: transcript_id.to_string(),
            text: text.trim().to_string(),
            source: source.to_string(),
        })
    }
}

/// Read one transcript per non-blank line from a `.txt` file. Ids are
/// `<file-stem>-<line-number>` with 1-based line numbers.
pub fn load_transcript_file(path: &Path) -> Result<Vec<Transcript>, ExpandError> {
    let text = fs::read_to_string(path).map_err(|source| ExpandError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(i, line)| Transcript::new(&format!("{stem}-{}", i + 1), line, &stem))
        .collect()
}

/// All `.txt` files of a directory in file-name order.
pub fn load_transcripts(dir: impl AsRef<Path>) -> Result<Vec<Transcript>, ExpandError> {
    let dir = dir.as_ref();
    let io = |source| ExpandError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    files.sort();
    let mut out = Vec::new();
    for f in files {
        out.extend(load_transcript_file(&f)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendCapabilities {
    /// `None` accepts any registered engine.
    pub supported_engines: Option<BTreeSet<String>>,
    pub max_text_len: usize,
    pub requests_per_second: Option<f64>,
}

impl Default for BackendCapabilities {
    fn default() -> Self {
        Self {
            supported_engines: None,
            max_text_len: 5000,
            requests_per_second: None,
        }
    }
}

pub trait SynthesisBackend: Send + Sync {
    fn capabilities(&self) -> &BackendCapabilities;

    /// Render `text` with `engine`. Implementations may assume the checks in
    /// [`synthesize`] have passed.
    fn render(&self, engine: &TtsEngineSpec, text: &str) -> Result<Waveform, SynthesisError>;
}

/// Validate and run one synthesis request.
pub fn synthesize(
    backend: &dyn SynthesisBackend,
    engine: &TtsEngineSpec,
    text: &str,
) -> Result<Waveform, SynthesisError> {
    let caps = backend.capabilities();
    if text.trim().is_empty() {
        return Err(SynthesisError::EmptyText);
    }
    let len = text.chars().count();
    if len > caps.max_text_len {
        return Err(SynthesisError::TextTooLong {
            len,
            max: caps.max_text_len,
        });
    }
    if let Some(supported) = &caps.supported_engines {
        if !supported.contains(&engine.engine_id) {
            return Err(SynthesisError::UnknownEngine(engine.engine_id.clone()));
        }
    }
    let wave = backend.render(engine, text)?;
    if wave.is_empty() {
        return Err(SynthesisError::Backend("backend returned no audio".into()));
    }
    Ok(wave)
}

pub const MOCK_DURATION_SEC: f64 = 1.0;
const MOCK_PARTIALS: usize = 4;

/// Offline backend: a fixed-length sum of sinusoids whose frequencies and
/// phases come from SHA-256 of `(engine_id, text)`.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    caps: BackendCapabilities,
    failing_texts: HashSet<String>,
}

impl MockBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capabilities(mut self, caps: BackendCapabilities) -> Self {
        self.caps = caps;
        self
    }

    /// Make requests for this exact text fail, for failure-path testing.
    pub fn fail_on(mut self, text: &str) -> Self {
        self.failing_texts.insert(text.to_string());
        self
    }
}

pub fn mock_waveform(engine_id: &str, text: &str, sample_rate: u32) -> Waveform {
    let mut h = Sha256::new();
    h.update(engine_id.as_bytes());
    h.update([0u8]);
    h.update(text.as_bytes());
    let digest = h.finalize();
    let partials: Vec<(f64, f64)> = (0..MOCK_PARTIALS)
        .map(|p| {
            let b = &digest[p * 4..p * 4 + 4];
            let freq = 80.0 + (u16::from_le_bytes([b[0], b[1]]) % 3000) as f64;
            let phase = u16::from_le_bytes([b[2], b[3]]) as f64 / 65536.0 * std::f64::consts::TAU;
            (freq, phase)
        })
        .collect();
    let n = (MOCK_DURATION_SEC * sample_rate as f64).round() as usize;
    let amp = 0.8 / MOCK_PARTIALS as f64;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sample_rate as f64;
            partials
                .iter()
                .map(|(f, ph)| amp * (std::f64::consts::TAU * f * t + ph).sin())
                .sum::<f64>() as f32
        })
        .collect();
    Waveform::new(samples, sample_rate)
}

impl SynthesisBackend for MockBackend {
    fn capabilities(&self) -> &BackendCapabilities {
        &self.caps
    }

    fn render(&self, engine: &TtsEngineSpec, text: &str) -> Result<Waveform, SynthesisError> {
        if self.failing_texts.contains(text) {
            return Err(SynthesisError::Backend(format!("injected failure for `{text}`")));
        }
        Ok(mock_waveform(&engine.engine_id, text, engine.output_sample_rate))
    }
}

/// HTTP synthesis adapter.
///
/// Sends `POST {endpoint}/synthesize` with a JSON body
/// `{engine_id, language_code, accent_tag, text}` and expects RIFF audio
/// back. Transport failures, 429 and 5xx responses are retried with
/// exponential backoff.
pub struct RemoteBackend {
    endpoint: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    caps: BackendCapabilities,
    max_retries: u32,
    backoff: Duration,
    next_slot: Mutex<Instant>,
}

#[derive(Serialize)]
struct SynthesisRequest<'a> {
    engine_id: &'a str,
    language_code: &'a str,
    accent_tag: &'a str,
    text: &'a str,
}

impl RemoteBackend {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            api_key,
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(60))
                .build()
                .expect("http client builds"),
            caps: BackendCapabilities {
                requests_per_second: Some(5.0),
                ..BackendCapabilities::default()
            },
            max_retries: 3,
            backoff: Duration::from_millis(500),
            next_slot: Mutex::new(Instant::now()),
        }
    }

    /// Endpoint and key from `ACCENT_FORGE_TTS_ENDPOINT` / `ACCENT_FORGE_TTS_API_KEY`.
    pub fn from_env() -> Option<Self> {
        let endpoint = std::env::var(ENDPOINT_ENV).ok()?;
        Some(Self::new(endpoint, std::env::var(API_KEY_ENV).ok()))
    }

    pub fn with_retries(mut self, max_retries: u32, backoff: Duration) -> Self {
        self.max_retries = max_retries;
        self.backoff = backoff;
        self
    }

    pub fn with_rate_limit(mut self, requests_per_second: Option<f64>) -> Self {
        self.caps.requests_per_second = requests_per_second;
        self
    }

    fn wait_for_slot(&self) {
        let Some(rps) = self.caps.requests_per_second.filter(|r| *r > 0.0) else {
            return;
        };
        let interval = Duration::from_secs_f64(1.0 / rps);
        let wait = {
            let mut next = self.next_slot.lock().expect("rate limiter lock");
            let now = Instant::now();
            let slot = (*next).max(now);
            *next = slot + interval;
            slot - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }

    fn attempt(&self, engine: &TtsEngineSpec, text: &str) -> Result<Waveform, (bool, SynthesisError)> {
        self.wait_for_slot();
        let body = serde_json::to_vec(&SynthesisRequest {
            engine_id: &engine.engine_id,
            language_code: &engine.language_code,
            accent_tag: &engine.accent_tag,
            text,
        })
        .expect("request serializes");
        let mut req = self
            .client
            .post(format!("{}/synthesize", self.endpoint))
            .header("content-type", "application/json")
            .body(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| (true, SynthesisError::Transport(e.to_string())))?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err((true, SynthesisError::Transport(format!("HTTP {status}"))));
        }
        if !status.is_success() {
            let msg = resp.text().unwrap_or_default();
            return Err((false, SynthesisError::Backend(format!("HTTP {status}: {msg}"))));
        }
        let bytes = resp
            .bytes()
            .map_err(|e| (true, SynthesisError::Transport(e.to_string())))?;
        audio::read_wav_bytes(&bytes, Path::new(&self.endpoint))
            .map_err(|e| (false, SynthesisError::Backend(e.to_string())))
    }
}

impl SynthesisBackend for RemoteBackend {
    fn capabilities(&self) -> &BackendCapabilities {
        &self.caps
    }

    fn render(&self, engine: &TtsEngineSpec, text: &str) -> Result<Waveform, SynthesisError> {
        let mut delay = self.backoff;
        let mut attempt = 0;
        loop {
            match self.attempt(engine, text) {
                Ok(w) => return Ok(w),
                Err((true, e)) if attempt < self.max_retries => {
                    tracing::warn!(engine = %engine.engine_id, attempt, error = %e, "retrying synthesis");
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                Err((_, e)) => return Err(e),
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentPolicy {
    UniformRandom,
    RoundRobin,
}

impl FromStr for AssignmentPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "uniform_random" => Ok(AssignmentPolicy::UniformRandom),
            "round_robin" => Ok(AssignmentPolicy::RoundRobin),
            other => Err(format!("unknown policy `{other}`")),
        }
    }
}

/// Pick one engine per transcript.
///
/// `RoundRobin` cycles through `engines` in order. `UniformRandom` draws
/// from a stream keyed by `(seed, transcript_id)`, so a transcript's engine
/// does not depend on its position in the list.
pub fn assign_engines(
    transcripts: &[Transcript],
    engines: &[&TtsEngineSpec],
    group: EngineGroup,
    policy: AssignmentPolicy,
    seed: u64,
) -> Result<Vec<(String, String)>, ExpandError> {
    if engines.is_empty() {
        return Err(ExpandError::EmptyGroup(group));
    }
    Ok(transcripts
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let k = match policy {
                AssignmentPolicy::RoundRobin => i % engines.len(),
                AssignmentPolicy::UniformRandom => {
                    seed::rng(seed, "accent.assign", &[t.transcript_id.as_bytes()])
                        .gen_range(0..engines.len())
                }
            };
            (t.transcript_id.clone(), engines[k].engine_id.clone())
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct ExpandOptions {
    pub group: EngineGroup,
    pub policy: AssignmentPolicy,
    pub seed: u64,
    /// Concurrent synthesis requests.
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisFailure {
    pub transcript_id: String,
    pub engine_id: String,
    pub error: SynthesisError,
}

#[derive(Debug)]
pub struct ExpandReport {
    pub manifest: Manifest,
    pub failures: Vec<SynthesisFailure>,
}

pub const FAILURE_LOG: &str = "failures.tsv";

/// Voice every transcript with its assigned engine.
///
/// Audio goes to `<output_dir>/audio/<utt_id>.wav`; the returned manifest is
/// rooted at `output_dir` and ordered by transcript id. Failed syntheses are
/// written to `<output_dir>/failures.tsv` and left out of the manifest.
pub fn expand(
    transcripts: &[Transcript],
    registry: &EngineRegistry,
    options: &ExpandOptions,
    backend: &dyn SynthesisBackend,
    output_dir: &Path,
) -> Result<ExpandReport, ExpandError> {
    let engines = registry.group(options.group);
    let assignment = assign_engines(transcripts, &engines, options.group, options.policy, options.seed)?;
    let audio_dir = output_dir.join("audio");
    fs::create_dir_all(&audio_dir).map_err(|source| ExpandError::Io {
        path: audio_dir.clone(),
        source,
    })?;

    let work: Vec<(&Transcript, &TtsEngineSpec)> = transcripts
        .iter()
        .zip(&assignment)
        .map(|(t, (_, eid))| (t, registry.get(eid).expect("assigned engine is registered")))
        .collect();

    let run_one = |(t, engine): &(&Transcript, &TtsEngineSpec)| -> Result<UtteranceRecord, SynthesisFailure> {
        let fail = |error| SynthesisFailure {
            transcript_id: t.transcript_id.clone(),
            engine_id: engine.engine_id.clone(),
            error,
        };
        let wave = synthesize(backend, engine, &t.text).map_err(fail)?;
        let utt_id = format!("{}-{}", t.transcript_id, engine.engine_id);
        let rel = PathBuf::from("audio").join(format!("{utt_id}.wav"));
        wave.write_wav(output_dir.join(&rel))
            .map_err(|e| fail(SynthesisError::Backend(e.to_string())))?;
        let mut r = UtteranceRecord::new(utt_id, rel, Label::Spoof, "en", &engine.engine_id, Portion::II);
        r.accent = Some(engine.accent_label().to_string());
        r.duration_sec = Some(wave.duration_sec());
        Ok(r)
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.workers.max(1))
        .build()
        .expect("thread pool builds");
    let results: Vec<Result<UtteranceRecord, SynthesisFailure>> =
        pool.install(|| work.par_iter().map(run_one).collect());

    let mut ordered: Vec<(&str, Result<UtteranceRecord, SynthesisFailure>)> = work
        .iter()
        .map(|(t, _)| t.transcript_id.as_str())
        .zip(results)
        .collect();
    ordered.sort_by(|a, b| a.0.cmp(b.0));

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (_, r) in ordered {
        match r {
            Ok(rec) => records.push(rec),
            Err(f) => failures.push(f),
        }
    }
    write_failure_log(&output_dir.join(FAILURE_LOG), &failures)?;

    if records.is_empty()
        && !failures.is_empty()
        && failures.iter().all(|f| matches!(f.error, SynthesisError::Transport(_)))
    {
        return Err(ExpandError::BackendUnreachable {
            attempted: failures.len(),
            first: failures[0].error.to_string(),
        });
    }
    for f in &failures {
        tracing::warn!(transcript = %f.transcript_id, engine = %f.engine_id, error = %f.error, "synthesis failed");
    }
    let name = match options.group {
        EngineGroup::EnglishAccents => "accent-eng",
        EngineGroup::OtherLanguage => "accent-mix",
    };
    let manifest = Manifest::new(name, records)?.with_root(output_dir);
    Ok(ExpandReport { manifest, failures })
}

fn write_failure_log(path: &Path, failures: &[SynthesisFailure]) -> Result<(), ExpandError> {
    let mut body = String::from("transcript_id\tengine_id\terror\n");
    for f in failures {
        body.push_str(&format!("{}\t{}\t{}\n", f.transcript_id, f.engine_id, f.error));
    }
    fs::write(path, body).map_err(|source| ExpandError::Io {
        path: path.to_path_buf(),
        source,
    })
}
