//! Audio loading, duration normalisation and log filterbank features.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::audio::{self, AudioError, Waveform};
use crate::seed;

#[derive(Debug, Error)]
pub enum FrontendError {
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("waveform of {samples} samples is shorter than one analysis window ({window})")]
    TooShort { samples: usize, window: usize },
    #[error("waveform is at {actual} Hz but the feature configuration expects {expected} Hz")]
    RateMismatch { expected: u32, actual: u32 },
    #[error("target duration must be positive, got {0}")]
    BadDuration(f64),
    #[error("empty waveform")]
    Empty,
    #[error("feature cache {path}: {message}")]
    Cache { path: PathBuf, message: String },
}

/// Load a PCM file as mono at `target_rate`, resampling if needed.
/// Samples are peak-normalised only when they exceed full scale.
pub fn load_audio(path: impl AsRef<Path>, target_rate: u32) -> Result<Waveform, FrontendError> {
    let wave = audio::read_wav(path)?;
    let wave = if wave.sample_rate == target_rate {
        wave
    } else {
        let samples = audio::resample(&wave.samples, wave.sample_rate as f64, target_rate as f64);
        Waveform::new(samples, target_rate)
    };
    Ok(wave.limit_peak())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DurationMode {
    CropRandom,
    CropCenter,
    Tile,
}

/// Force a waveform to exactly `round(target_sec * rate)` samples.
///
/// Inputs shorter than the target are tiled and cropped in every mode.
/// Longer inputs are cropped: from the start (`Tile`), around the centre
/// (`CropCenter`), or at an offset drawn from `rng_key` (`CropRandom`).
pub fn fix_duration(
    wave: &Waveform,
    target_sec: f64,
    mode: DurationMode,
    rng_key: u64,
) -> Result<Waveform, FrontendError> {
    if !(target_sec > 0.0 && target_sec.is_finite()) {
        return Err(FrontendError::BadDuration(target_sec));
    }
    if wave.is_empty() {
        return Err(FrontendError::Empty);
    }
    let target = (target_sec * wave.sample_rate as f64).round() as usize;
    let n = wave.len();
    let samples = if n < target {
        wave.samples.iter().copied().cycle().take(target).collect()
    } else {
        let start = match mode {
            DurationMode::Tile => 0,
            DurationMode::CropCenter => (n - target) / 2,
            DurationMode::CropRandom => {
                seed::rng(rng_key, "frontend.crop", &[]).gen_range(0..=n - target)
            }
        };
        wave.samples[start..start + target].to_vec()
    };
    Ok(Waveform::new(samples, wave.sample_rate))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureSpec {
    pub sample_rate: u32,
    /// Analysis window in samples.
    pub window: usize,
    pub hop: usize,
    pub n_fft: usize,
    /// Number of linearly spaced triangular filters.
    pub n_bins: usize,
    pub f_min: f64,
    /// Upper band edge; Nyquist when unset.
    pub f_max: Option<f64>,
    pub log_floor: f64,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window: 400,
            hop: 160,
            n_fft: 512,
            n_bins: 60,
            f_min: 0.0,
            f_max: None,
            log_floor: 1e-10,
        }
    }
}

impl FeatureSpec {
    pub fn n_frames(&self, n_samples: usize) -> usize {
        if n_samples < self.window {
            0
        } else {
            (n_samples - self.window) / self.hop + 1
        }
    }

    fn upper(&self) -> f64 {
        self.f_max.unwrap_or(self.sample_rate as f64 / 2.0)
    }

    /// Centre frequency of each filter in Hz.
    pub fn bin_centers(&self) -> Vec<f64> {
        let spacing = (self.upper() - self.f_min) / (self.n_bins + 1) as f64;
        (0..self.n_bins)
            .map(|k| self.f_min + (k + 1) as f64 * spacing)
            .collect()
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        hex(&Sha256::digest(json.as_bytes()))[..16].to_string()
    }
}

/// Frontend section of a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    pub features: FeatureSpec,
    pub duration_sec: f64,
    /// Cropping used while training; evaluation always crops the centre.
    pub train_mode: DurationMode,
    pub cache_dir: Option<PathBuf>,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            features: FeatureSpec::default(),
            duration_sec: 4.0,
            train_mode: DurationMode::CropRandom,
            cache_dir: None,
        }
    }
}

/// Log filterbank energies, row-major `[bins x frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: Vec<f32>,
    pub n_bins: usize,
    pub n_frames: usize,
    pub frame_hop_sec: f64,
}

impl FeatureMatrix {
    pub fn at(&self, bin: usize, frame: usize) -> f32 {
        self.values[bin * self.n_frames + frame]
    }

    pub fn frame(&self, t: usize) -> Vec<f32> {
        (0..self.n_bins).map(|b| self.at(b, t)).collect()
    }
}

/// Reusable extractor holding the FFT plan, window and filterbank.
pub struct FeatureExtractor {
    spec: FeatureSpec,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    // (first fft bin, weights) per filter
    filters: Vec<(usize, Vec<f64>)>,
}

impl FeatureExtractor {
    pub fn new(spec: FeatureSpec) -> Self {
        assert!(spec.n_fft >= spec.window, "n_fft must cover the analysis window");
        let fft = FftPlanner::new().plan_fft_forward(spec.n_fft);
        let window = (0..spec.window)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / spec.window as f64).cos())
            .collect();
        let bin_hz = spec.sample_rate as f64 / spec.n_fft as f64;
        let n_spec = spec.n_fft / 2 + 1;
        let spacing = (spec.upper() - spec.f_min) / (spec.n_bins + 1) as f64;
        let filters = spec
            .bin_centers()
            .into_iter()
            .map(|center| {
                let weights: Vec<(usize, f64)> = (0..n_spec)
                    .filter_map(|j| {
                        let w = 1.0 - (j as f64 * bin_hz - center).abs() / spacing;
                        (w > 0.0).then_some((j, w))
                    })
                    .collect();
                let first = weights.first().map(|w| w.0).unwrap_or(0);
                (first, weights.into_iter().map(|w| w.1).collect())
            })
            .collect();
        Self {
            spec,
            fft,
            window,
            filters,
        }
    }

    pub fn spec(&self) -> &FeatureSpec {
        &self.spec
    }

    pub fn extract(&self, wave: &Waveform) -> Result<FeatureMatrix, FrontendError> {
        let spec = &self.spec;
        if wave.sample_rate != spec.sample_rate {
            return Err(FrontendError::RateMismatch {
                expected: spec.sample_rate,
                actual: wave.sample_rate,
            });
        }
        let n_frames = spec.n_frames(wave.len());
        if n_frames == 0 {
            return Err(FrontendError::TooShort {
                samples: wave.len(),
                window: spec.window,
            });
        }
        let mut values = vec![0f32; spec.n_bins * n_frames];
        let mut buf = vec![Complex::new(0.0, 0.0); spec.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0f64; spec.n_fft / 2 + 1];
        for t in 0..n_frames {
            let start = t * spec.hop;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = if i < spec.window {
                    Complex::new(wave.samples[start + i] as f64 * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for (b, (first, weights)) in self.filters.iter().enumerate() {
                let energy: f64 = weights
                    .iter()
                    .enumerate()
                    .map(|(k, w)| w * power[first + k])
                    .sum();
                values[b * n_frames + t] = energy.max(spec.log_floor).ln() as f32;
            }
        }
        Ok(FeatureMatrix {
            values,
            n_bins: spec.n_bins,
            n_frames,
            frame_hop_sec: spec.hop as f64 / spec.sample_rate as f64,
        })
    }
}

pub fn extract_features(wave: &Waveform, spec: &FeatureSpec) -> Result<FeatureMatrix, FrontendError> {
    FeatureExtractor::new(spec.clone()).extract(wave)
}

/// On-disk feature cache keyed by (utt_id, feature configuration digest).
pub struct FeatureCache {
    dir: PathBuf,
}

const CACHE_MAGIC: &[u8; 4] = b"AFFM";

impl FeatureCache {
    pub fn new(root: impl AsRef<Path>, spec: &FeatureSpec) -> Self {
        Self {
            dir: root.as_ref().join(spec.digest()),
        }
    }

    fn path(&self, utt_id: &str) -> PathBuf {
        self.dir
            .join(format!("{}.feat", &hex(&Sha256::digest(utt_id.as_bytes()))[..32]))
    }

    pub fn get(&self, utt_id: &str) -> Option<FeatureMatrix> {
        let bytes = fs::read(self.path(utt_id)).ok()?;
        if bytes.len() < 20 || &bytes[..4] != CACHE_MAGIC {
            return None;
        }
        let n_bins = u32::from_le_bytes(bytes[4..8].try_into().ok()?) as usize;
        let n_frames = u32::from_le_bytes(bytes[8..12].try_into().ok()?) as usize;
        let frame_hop_sec = f64::from_le_bytes(bytes[12..20].try_into().ok()?);
        let body = &bytes[20..];
        if body.len() != n_bins * n_frames * 4 {
            return None;
        }
        let values = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        Some(FeatureMatrix {
            values,
            n_bins,
            n_frames,
            frame_hop_sec,
        })
    }

    pub fn put(&self, utt_id: &str, features: &FeatureMatrix) -> Result<(), FrontendError> {
        let err = |e: std::io::Error| FrontendError::Cache {
            path: self.dir.clone(),
            message: e.to_string(),
        };
        fs::create_dir_all(&self.dir).map_err(err)?;
        let mut bytes = Vec::with_capacity(20 + features.values.len() * 4);
        bytes.extend_from_slice(CACHE_MAGIC);
        bytes.extend_from_slice(&(features.n_bins as u32).to_le_bytes());
        bytes.extend_from_slice(&(features.n_frames as u32).to_le_bytes());
        bytes.extend_from_slice(&features.frame_hop_sec.to_le_bytes());
        for v in &features.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(self.path(utt_id), bytes).map_err(err)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, rate: u32, n: usize) -> Waveform {
        Waveform::new(
            (0..n)
                .map(|i| (0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin()) as f32)
                .collect(),
            rate,
        )
    }

    #[test]
    fn one_second_gives_98_frames() {
        let spec = FeatureSpec::default();
        assert_eq!(spec.n_frames(16_000), 98);
        let f = extract_features(&tone(300.0, 16_000, 16_000), &spec).unwrap();
        assert_eq!((f.n_bins, f.n_frames), (60, 98));
    }

    #[test]
    fn silence_hits_the_floor() {
        let spec = FeatureSpec::default();
        let f = extract_features(&Waveform::new(vec![0.0; 4000], 16_000), &spec).unwrap();
        let floor = (1e-10f64).ln() as f32;
        assert!(f.values.iter().all(|&v| v == floor));
    }

    #[test]
    fn tone_lands_in_nearest_filter() {
        let spec = FeatureSpec::default();
        let f = extract_features(&tone(440.0, 16_000, 8000), &spec).unwrap();
        // independent mapping: nearest centre frequency to 440 Hz
        let spacing = 8000.0 / 61.0;
        let expected = ((440.0 / spacing) as f64).round() as usize - 1;
        for t in 0..f.n_frames {
            let col = f.frame(t);
            let argmax = (0..col.len()).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap();
            assert_eq!(argmax, expected);
        }
    }

    #[test]
    fn too_short_and_wrong_rate() {
        let spec = FeatureSpec::default();
        assert!(matches!(
            extract_features(&Waveform::new(vec![0.1; 399], 16_000), &spec),
            Err(FrontendError::TooShort { .. })
        ));
        assert!(matches!(
            extract_features(&Waveform::new(vec![0.1; 800], 8_000), &spec),
            Err(FrontendError::RateMismatch { .. })
        ));
    }

    #[test]
    fn fix_duration_modes() {
        let rate = 10;
        let w = Waveform::new((0..20).map(|i| i as f32 / 100.0).collect(), rate);
        // identity
        assert_eq!(fix_duration(&w, 2.0, DurationMode::CropCenter, 0).unwrap(), w);
        // tile
        let t = fix_duration(&w, 4.0, DurationMode::Tile, 0).unwrap();
        assert_eq!(&t.samples[..20], &w.samples[..]);
        assert_eq!(&t.samples[20..], &w.samples[..]);
        // centre crop of a 6 s signal to 4 s
        let long = Waveform::new((0..60).map(|i| i as f32 / 100.0).collect(), rate);
        let c = fix_duration(&long, 4.0, DurationMode::CropCenter, 0).unwrap();
        assert_eq!(c.samples, long.samples[10..50].to_vec());
        let r1 = fix_duration(&long, 4.0, DurationMode::CropRandom, 3).unwrap();
        let r2 = fix_duration(&long, 4.0, DurationMode::CropRandom, 3).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.len(), 40);
        assert!(fix_duration(&w, 0.0, DurationMode::Tile, 0).is_err());
    }

    #[test]
    fn load_resamples_to_target() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        tone(200.0, 8000, 8000).write_wav(&p).unwrap();
        let w = load_audio(&p, 16_000).unwrap();
        assert!((w.len() as i64 - 16_000).abs() <= 1);
        let same = load_audio(&p, 8000).unwrap();
        assert_eq!(same.len(), 8000);
        std::fs::write(dir.path().join("bad.wav"), b"RIFF????WAVEjunk").unwrap();
        assert!(load_audio(dir.path().join("bad.wav"), 16_000).is_err());
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = FeatureSpec::default();
        let cache = FeatureCache::new(dir.path(), &spec);
        let f = extract_features(&tone(500.0, 16_000, 1600), &spec).unwrap();
        assert!(cache.get("u/1").is_none());
        cache.put("u/1", &f).unwrap();
        assert_eq!(cache.get("u/1").unwrap(), f);
    }
}
