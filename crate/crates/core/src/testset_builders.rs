//! Cross-lingual evaluation sets.
//!
//! VC-CL3 pairs every bona fide utterance with exactly one voice-converted
//! copy whose target speaker comes from the same language. TTS-CL adds
//! synthetic speech per language from a TTS engine and a vocoder.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::accent_expand::{synthesize, EngineRegistry, SynthesisBackend, SynthesisError, Transcript};
use crate::audio::{self, AudioError, Waveform};
use crate::manifest::{Label, Manifest, ManifestError, Portion, UtteranceRecord};
use crate::seed;

#[derive(Debug, Error)]
pub enum TestsetError {
    #[error("record {0} is not bona fide; builders take bona fide input only")]
    NotBonaFide(String),
    #[error("language `{language}` has {size} record(s); at least 2 are needed to pick a distinct target")]
    LanguageTooSmall { language: String, size: usize },
    #[error("no engine supports language `{0}`")]
    UnsupportedLanguage(String),
    #[error("no transcripts for language `{0}`")]
    MissingTranscripts(String),
    #[error("spoof_per_bona must be positive and finite, got {0}")]
    InvalidRatio(f64),
    #[error("conversion of {utt_id} failed: {message}")]
    Conversion { utt_id: String, message: String },
    #[error("synthesis of {utt_id} failed: {source}")]
    Synthesis {
        utt_id: String,
        #[source]
        source: SynthesisError,
    },
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
}

pub trait VoiceConversionBackend: Send + Sync {
    /// Tag written to the `source` field of converted records.
    fn tag(&self) -> &str;

    fn convert(
        &self,
        source: &Waveform,
        source_id: &str,
        target: &Waveform,
        target_id: &str,
    ) -> Result<Waveform, String>;
}

/// Deterministic stand-in for a real converter. The output keeps the source
/// timing, rescales it, and adds a faint tone whose frequency is a hash of
/// `(source_id, target_id)`.
#[derive(Debug, Clone, Default)]
pub struct MockVoiceConversion;

impl VoiceConversionBackend for MockVoiceConversion {
    fn tag(&self) -> &str {
        "mock-vc"
    }

    fn convert(
        &self,
        source: &Waveform,
        source_id: &str,
        target: &Waveform,
        target_id: &str,
    ) -> Result<Waveform, String> {
        if source.is_empty() {
            return Err("empty source audio".into());
        }
        let mut h = Sha256::new();
        h.update(source_id.as_bytes());
        h.update([0u8]);
        h.update(target_id.as_bytes());
        let d = h.finalize();
        let freq = 100.0 + (u16::from_le_bytes([d[0], d[1]]) % 2000) as f64;
        let gain = 0.5 + d[2] as f32 / 512.0;
        let level = target.peak().clamp(0.05, 1.0) * 0.1;
        let rate = source.sample_rate as f64;
        let samples = source
            .samples
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                gain * s + level * (std::f64::consts::TAU * freq * i as f64 / rate).sin() as f32
            })
            .collect();
        Ok(Waveform::new(samples, source.sample_rate).limit_peak())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TestsetError + '_ {
    move |source| TestsetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn group_by_language(bona: &Manifest) -> Result<BTreeMap<&str, Vec<&UtteranceRecord>>, TestsetError> {
    let mut groups: BTreeMap<&str, Vec<&UtteranceRecord>> = BTreeMap::new();
    for r in bona.records() {
        if r.label != Label::BonaFide {
            return Err(TestsetError::NotBonaFide(r.utt_id.clone()));
        }
        groups.entry(r.language.as_str()).or_default().push(r);
    }
    Ok(groups)
}

fn absolute_bona(bona: &Manifest, r: &UtteranceRecord) -> UtteranceRecord {
    let mut out = r.clone();
    let p = bona.resolve_audio(r);
    out.audio_path = std::path::absolute(&p).unwrap_or(p);
    out
}

/// Pick the conversion target for `src` within its language group.
///
/// When the source has a speaker id and other speakers exist, a speaker is
/// drawn first and then one of that speaker's records. Otherwise a record is
/// drawn from the group. The source record itself is never chosen.
pub fn select_target<'a>(
    src: &UtteranceRecord,
    group: &[&'a UtteranceRecord],
    seed: u64,
) -> &'a UtteranceRecord {
    let mut rng = seed::rng(seed, "vc.target", &[src.utt_id.as_bytes()]);
    if let Some(spk) = &src.speaker_id {
        let speakers: BTreeSet<&str> = group
            .iter()
            .filter_map(|r| r.speaker_id.as_deref())
            .filter(|s| *s != spk)
            .collect();
        if !speakers.is_empty() {
            let speakers: Vec<&str> = speakers.into_iter().collect();
            let chosen = speakers[rng.gen_range(0..speakers.len())];
            let pool: Vec<&&UtteranceRecord> = group
                .iter()
                .filter(|r| r.speaker_id.as_deref() == Some(chosen))
                .collect();
            return pool[rng.gen_range(0..pool.len())];
        }
    }
    let others: Vec<&&UtteranceRecord> = group.iter().filter(|r| r.utt_id != src.utt_id).collect();
    others[rng.gen_range(0..others.len())]
}

/// Build VC-CL3 from a bona fide manifest.
///
/// The result holds the bona fide records (with absolute audio paths) in
/// input order, followed by one converted spoof per bona record in the same
/// order. Converted audio is written under `<out_dir>/audio/`.
pub fn build_vc_cl3(
    bona: &Manifest,
    backend: &dyn VoiceConversionBackend,
    seed: u64,
    out_dir: &Path,
    workers: usize,
) -> Result<Manifest, TestsetError> {
    let groups = group_by_language(bona)?;
    for (lang, g) in &groups {
        if g.len() < 2 {
            return Err(TestsetError::LanguageTooSmall {
                language: lang.to_string(),
                size: g.len(),
            });
        }
    }
    let pairs: Vec<(&UtteranceRecord, &UtteranceRecord)> = bona
        .records()
        .iter()
        .map(|r| (r, select_target(r, &groups[r.language.as_str()], seed)))
        .collect();

    let audio_dir = out_dir.join("audio");
    fs::create_dir_all(&audio_dir).map_err(io_err(&audio_dir))?;

    let convert = |(src, tgt): &(&UtteranceRecord, &UtteranceRecord)| -> Result<UtteranceRecord, TestsetError> {
        let source = audio::read_wav(bona.resolve_audio(src))?;
        let target = audio::read_wav(bona.resolve_audio(tgt))?;
        let out = backend
            .convert(&source, &src.utt_id, &target, &tgt.utt_id)
            .map_err(|message| TestsetError::Conversion {
                utt_id: src.utt_id.clone(),
                message,
            })?;
        let utt_id = format!("{}-vc", src.utt_id);
        let rel = PathBuf::from("audio").join(format!("{utt_id}.wav"));
        out.write_wav(out_dir.join(&rel))?;
        let mut r = UtteranceRecord::new(utt_id, rel, Label::Spoof, &src.language, backend.tag(), Portion::Test);
        r.duration_sec = Some(out.duration_sec());
        r.speaker_id = tgt.speaker_id.clone();
        r.source_utt = Some(src.utt_id.clone());
        r.target_ref = Some(tgt.utt_id.clone());
        Ok(r)
    };
    let spoofs = run_pool(workers, || pairs.par_iter().map(convert).collect::<Result<Vec<_>, _>>())?;

    let mut records: Vec<UtteranceRecord> = bona.records().iter().map(|r| absolute_bona(bona, r)).collect();
    records.extend(spoofs);
    Ok(Manifest::new(format!("{}.vc-cl3", bona.name), records)?.with_root(out_dir))
}

#[derive(Debug, Clone)]
pub struct TtsClOptions {
    pub vocoder_tag: String,
    /// Spoof records generated per bona fide record.
    pub spoof_per_bona: f64,
    pub seed: u64,
    pub workers: usize,
}

impl Default for TtsClOptions {
    fn default() -> Self {
        Self {
            vocoder_tag: "wavernn".into(),
            spoof_per_bona: 5.0,
            seed: 0,
            workers: 4,
        }
    }
}

/// Build TTS-CL from a bona fide manifest and per-language transcripts.
///
/// Each language gets `round(n_bona * spoof_per_bona)` spoofs, voiced by the
/// first registered engine for that language. Transcripts are shuffled per
/// language and reused cyclically when there are fewer than needed.
pub fn build_tts_cl(
    bona: &Manifest,
    transcripts: &BTreeMap<String, Vec<Transcript>>,
    registry: &EngineRegistry,
    backend: &dyn SynthesisBackend,
    options: &TtsClOptions,
    out_dir: &Path,
) -> Result<Manifest, TestsetError> {
    if !(options.spoof_per_bona.is_finite() && options.spoof_per_bona > 0.0) {
        return Err(TestsetError::InvalidRatio(options.spoof_per_bona));
    }
    let groups = group_by_language(bona)?;
    let caps = backend.capabilities();

    let mut jobs = Vec::new();
    for (lang, g) in &groups {
        let engine = registry
            .by_language(lang)
            .into_iter()
            .find(|e| {
                caps.supported_engines
                    .as_ref()
                    .map_or(true, |s| s.contains(&e.engine_id))
            })
            .ok_or_else(|| TestsetError::UnsupportedLanguage(lang.to_string()))?;
        let mut texts: Vec<&Transcript> = transcripts
            .get(*lang)
            .map(|v| v.iter().collect())
            .unwrap_or_default();
        if texts.is_empty() {
            return Err(TestsetError::MissingTranscripts(lang.to_string()));
        }
        texts.sort_by(|a, b| a.transcript_id.cmp(&b.transcript_id));
        texts.shuffle(&mut seed::rng(options.seed, "tts-cl.transcripts", &[lang.as_bytes()]));
        let n = (g.len() as f64 * options.spoof_per_bona).round() as usize;
        for i in 0..n {
            jobs.push((*lang, engine, texts[i % texts.len()], i));
        }
    }

    let audio_dir = out_dir.join("audio");
    fs::create_dir_all(&audio_dir).map_err(io_err(&audio_dir))?;
    let source_tag = |engine_id: &str| format!("{engine_id}/{}", options.vocoder_tag);

    let spoofs = run_pool(options.workers, || {
        jobs.par_iter()
            .map(|(lang, engine, t, i)| {
                let utt_id = format!("{lang}-tts-{i:06}");
                let wave = synthesize(backend, engine, &t.text).map_err(|source| TestsetError::Synthesis {
                    utt_id: utt_id.clone(),
                    source,
                })?;
                let rel = PathBuf::from("audio").join(format!("{utt_id}.wav"));
                wave.write_wav(out_dir.join(&rel))?;
                let mut r = UtteranceRecord::new(
                    utt_id,
                    rel,
                    Label::Spoof,
                    *lang,
                    source_tag(&engine.engine_id),
                    Portion::Test,
                );
                r.duration_sec = Some(wave.duration_sec());
                Ok(r)
            })
            .collect::<Result<Vec<_>, TestsetError>>()
    })?;

    let mut records: Vec<UtteranceRecord> = bona.records().iter().map(|r| absolute_bona(bona, r)).collect();
    records.extend(spoofs);
    Ok(Manifest::new(format!("{}.tts-cl", bona.name), records)?.with_root(out_dir))
}

fn run_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool builds")
        .install(f)
}
