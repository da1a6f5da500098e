//! Training-time waveform augmentation: additive Gaussian noise, pitch
//! shifting and time stretching.
//!
//! Stretching uses a phase vocoder (1024-point Hann STFT, hop 256); pitch
//! shifting stretches by `2^(-semitones/12)` and resamples back to the
//! original length. Random draws in [`apply_random`] are a pure function of
//! `(global_seed, utt_id, epoch)`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{self, Waveform};
use crate::seed;

pub const STFT_SIZE: usize = 1024;
pub const HOP: usize = 256;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("signal has zero power; SNR is undefined")]
    ZeroPower,
    #[error("empty waveform")]
    Empty,
    #[error("pitch shift of {0} semitones is outside [-12, 12]")]
    PitchOutOfRange(f64),
    #[error("stretch rate {0} is outside (0.25, 4)")]
    RateOutOfRange(f64),
    #[error("invalid augmentation config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub noise_snr_db_range: [f64; 2],
    pub pitch_semitone_range: [f64; 2],
    pub stretch_rate_range: [f64; 2],
    pub apply_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            noise_snr_db_range: [10.0, 40.0],
            pitch_semitone_range: [-2.0, 2.0],
            stretch_rate_range: [0.9, 1.1],
            apply_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let ranges = [
            ("noise_snr_db_range", self.noise_snr_db_range),
            ("pitch_semitone_range", self.pitch_semitone_range),
            ("stretch_rate_range", self.stretch_rate_range),
        ];
        for (name, [lo, hi]) in ranges {
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(AugmentError::InvalidConfig(format!("{name}: low {lo} > high {hi}")));
            }
        }
        if !(0.0..=1.0).contains(&self.apply_prob) {
            return Err(AugmentError::InvalidConfig(format!(
                "apply_prob {} not in [0, 1]",
                self.apply_prob
            )));
        }
        let [p_lo, p_hi] = self.pitch_semitone_range;
        if p_lo < -12.0 || p_hi > 12.0 {
            return Err(AugmentError::InvalidConfig("pitch range exceeds one octave".into()));
        }
        let [r_lo, r_hi] = self.stretch_rate_range;
        if r_lo <= 0.25 || r_hi >= 4.0 {
            return Err(AugmentError::InvalidConfig("stretch range outside (0.25, 4)".into()));
        }
        Ok(())
    }
}

fn power(x: &[f32]) -> f64 {
    x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len() as f64
}

/// Gaussian noise scaled so that signal power over noise power is exactly
/// `snr_db`. An infinite `snr_db` returns silence.
pub fn noise_for_snr(wave: &[f32], snr_db: f64, rng_key: u64) -> Result<Vec<f32>, AugmentError> {
    if wave.is_empty() {
        return Err(AugmentError::Empty);
    }
    let p_signal = power(wave);
    if p_signal == 0.0 {
        return Err(AugmentError::ZeroPower);
    }
    if snr_db == f64::INFINITY {
        return Ok(vec![0.0; wave.len()]);
    }
    let mut rng = seed::rng(rng_key, "augment.noise", &[]);
    let raw: Vec<f64> = (0..wave.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let p_raw = raw.iter().map(|v| v * v).sum::<f64>() / raw.len() as f64;
    let gain = (p_signal / 10f64.powf(snr_db / 10.0) / p_raw).sqrt();
    Ok(raw.into_iter().map(|v| (v * gain) as f32).collect())
}

/// Add Gaussian noise at `snr_db`. No amplitude limiting is applied here;
/// [`apply_random`] limits the final output.
pub fn add_gaussian_noise(wave: &[f32], snr_db: f64, rng_key: u64) -> Result<Vec<f32>, AugmentError> {
    let noise = noise_for_snr(wave, snr_db, rng_key)?;
    Ok(wave.iter().zip(noise).map(|(s, n)| s + n).collect())
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Centred STFT (zero padding of half a window on both sides).
fn stft(x: &[f32], window: &[f64]) -> Vec<Vec<Complex<f64>>> {
    let n_fft = window.len();
    let pad = n_fft / 2;
    let n_frames = 1 + x.len() / HOP;
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    let sample = |i: isize| -> f64 {
        if i < 0 || i as usize >= x.len() {
            0.0
        } else {
            x[i as usize] as f64
        }
    };
    (0..n_frames)
        .map(|t| {
            let start = (t * HOP) as isize - pad as isize;
            let mut buf: Vec<Complex<f64>> = (0..n_fft)
                .map(|i| Complex::new(sample(start + i as isize) * window[i], 0.0))
                .collect();
            fft.process(&mut buf);
            buf.truncate(n_fft / 2 + 1);
            buf
        })
        .collect()
}

/// Weighted overlap-add inverse of [`stft`], trimmed to `length` samples.
fn istft(frames: &[Vec<Complex<f64>>], window: &[f64], length: usize) -> Vec<f32> {
    let n_fft = window.len();
    let pad = n_fft / 2;
    let ifft = FftPlanner::new().plan_fft_inverse(n_fft);
    let total = n_fft + HOP * frames.len().saturating_sub(1);
    let mut out = vec![0.0f64; total];
    let mut norm = vec![0.0f64; total];
    for (t, half) in frames.iter().enumerate() {
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        buf[..half.len()].copy_from_slice(half);
        for k in 1..n_fft - half.len() + 1 {
            buf[n_fft - k] = half[k].conj();
        }
        ifft.process(&mut buf);
        let start = t * HOP;
        for i in 0..n_fft {
            out[start + i] += buf[i].re / n_fft as f64 * window[i];
            norm[start + i] += window[i] * window[i];
        }
    }
    (0..length)
        .map(|i| {
            let j = i + pad;
            if j < total && norm[j] > 1e-8 {
                (out[j] / norm[j]) as f32
            } else {
                0.0
            }
        })
        .collect()
}

/// Change duration by `1/rate` while keeping pitch.
///
/// The output has exactly `round(len / rate)` samples.
pub fn time_stretch(wave: &[f32], rate: f64) -> Result<Vec<f32>, AugmentError> {
    if !(rate > 0.25 && rate < 4.0) {
        return Err(AugmentError::RateOutOfRange(rate));
    }
    if wave.is_empty() {
        return Err(AugmentError::Empty);
    }
    if rate == 1.0 {
        return Ok(wave.to_vec());
    }
    let window = hann(STFT_SIZE);
    let spec = stft(wave, &window);
    let n_bins = STFT_SIZE / 2 + 1;
    let advance: Vec<f64> = (0..n_bins)
        .map(|k| 2.0 * std::f64::consts::PI * HOP as f64 * k as f64 / STFT_SIZE as f64)
        .collect();
    let zero = vec![Complex::new(0.0, 0.0); n_bins];
    let column = |i: usize| spec.get(i).unwrap_or(&zero);

    let mut phase: Vec<f64> = spec[0].iter().map(|c| c.arg()).collect();
    let mut out = Vec::new();
    let mut step = 0.0f64;
    while step < spec.len() as f64 {
        let i = step.floor() as usize;
        let alpha = step - i as f64;
        let (c0, c1) = (column(i), column(i + 1));
        let frame = (0..n_bins)
            .map(|k| {
                let mag = (1.0 - alpha) * c0[k].norm() + alpha * c1[k].norm();
                Complex::from_polar(mag, phase[k])
            })
            .collect();
        out.push(frame);
        for k in 0..n_bins {
            let mut dphi = c1[k].arg() - c0[k].arg() - advance[k];
            dphi -= 2.0 * std::f64::consts::PI * (dphi / (2.0 * std::f64::consts::PI)).round();
            phase[k] += advance[k] + dphi;
        }
        step += rate;
    }
    let length = (wave.len() as f64 / rate).round() as usize;
    Ok(istft(&out, &window, length))
}

/// Scale the fundamental by `2^(semitones/12)`, keeping the length.
pub fn pitch_shift(wave: &[f32], semitones: f64, sample_rate: u32) -> Result<Vec<f32>, AugmentError> {
    if !(-12.0..=12.0).contains(&semitones) {
        return Err(AugmentError::PitchOutOfRange(semitones));
    }
    if wave.is_empty() {
        return Err(AugmentError::Empty);
    }
    if semitones == 0.0 {
        return Ok(wave.to_vec());
    }
    let rate = 2f64.powf(-semitones / 12.0);
    let stretched = time_stretch(wave, rate)?;
    let sr = sample_rate as f64;
    Ok(audio::resample_to_len(&stretched, sr / rate, sr, wave.len()))
}

/// Parameters drawn for one `(seed, utt_id, epoch)` key.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub stretch_rate: Option<f64>,
    pub pitch_semitones: Option<f64>,
    pub snr_db: Option<f64>,
    pub noise_key: u64,
}

pub fn draw(config: &AugmentConfig, utt_id: &str, epoch: u64, global_seed: u64) -> AugmentDraw {
    let mut rng = seed::rng(global_seed, "augment.draw", &[utt_id.as_bytes(), &epoch.to_le_bytes()]);
    let mut pick = |[lo, hi]: [f64; 2]| -> Option<f64> {
        let apply = rng.gen::<f64>() < config.apply_prob;
        let value = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        apply.then_some(value)
    };
    let stretch_rate = pick(config.stretch_rate_range);
    let pitch_semitones = pick(config.pitch_semitone_range);
    let snr_db = pick(config.noise_snr_db_range);
    AugmentDraw {
        stretch_rate,
        pitch_semitones,
        snr_db,
        noise_key: seed::derive(global_seed, "augment.noise_key", &[utt_id.as_bytes(), &epoch.to_le_bytes()]),
    }
}

/// Stretch, then pitch shift, then noise, each applied with `apply_prob`.
/// The result never exceeds full scale.
pub fn apply_random(
    wave: &Waveform,
    config: &AugmentConfig,
    utt_id: &str,
    epoch: u64,
    global_seed: u64,
) -> Result<Waveform, AugmentError> {
    if !config.enabled {
        return Ok(wave.clone());
    }
    config.validate()?;
    let d = draw(config, utt_id, epoch, global_seed);
    let mut samples = wave.samples.clone();
    if let Some(rate) = d.stretch_rate {
        samples = time_stretch(&samples, rate)?;
    }
    if let Some(semitones) = d.pitch_semitones {
        samples = pitch_shift(&samples, semitones, wave.sample_rate)?;
    }
    if let Some(snr) = d.snr_db {
        match add_gaussian_noise(&samples, snr, d.noise_key) {
            Ok(noisy) => samples = noisy,
            // silent input stays silent
            Err(AugmentError::ZeroPower) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(Waveform::new(samples, wave.sample_rate).limit_peak())
}
