//! Waveform type, RIFF/PCM I/O and sample-rate conversion.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("cannot decode {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
    #[error("cannot encode {path}: {source}")]
    Encode {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
    #[error("{0} contains no samples")]
    NoSamples(PathBuf),
    #[error("unsupported sample format in {path}: {bits}-bit {format:?}")]
    UnsupportedFormat {
        path: PathBuf,
        bits: u16,
        format: hound::SampleFormat,
    },
}

/// Mono audio at a known sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_sec(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        peak(&self.samples)
    }

    /// Scale down so that no sample exceeds full scale. No-op otherwise.
    pub fn limit_peak(mut self) -> Self {
        limit_peak(&mut self.samples);
        self
    }

    /// 16-bit PCM RIFF bytes.
    pub fn to_wav_bytes(&self) -> Vec<u8> {
        let mut buf = Cursor::new(Vec::new());
        {
            let mut w = hound::WavWriter::new(&mut buf, pcm16_spec(self.sample_rate))
                .expect("in-memory writer");
            for &s in &self.samples {
                w.write_sample(to_pcm16(s)).expect("in-memory write");
            }
            w.finalize().expect("in-memory finalize");
        }
        buf.into_inner()
    }

    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<(), AudioError> {
        let path = path.as_ref();
        let enc = |source| AudioError::Encode {
            path: path.to_path_buf(),
            source,
        };
        let mut w = hound::WavWriter::create(path, pcm16_spec(self.sample_rate)).map_err(enc)?;
        for &s in &self.samples {
            w.write_sample(to_pcm16(s)).map_err(enc)?;
        }
        w.finalize().map_err(enc)
    }
}

pub fn peak(samples: &[f32]) -> f32 {
    samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
}

pub fn limit_peak(samples: &mut [f32]) {
    let p = peak(samples);
    if p > 1.0 {
        let g = 1.0 / p;
        samples.iter_mut().for_each(|s| *s *= g);
    }
}

fn pcm16_spec(sample_rate: u32) -> hound::WavSpec {
    hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    }
}

fn to_pcm16(s: f32) -> i16 {
    (s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16
}

/// Decode a RIFF file to mono (channel average) at its native rate.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform, AudioError> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|source| AudioError::Decode {
        path: path.to_path_buf(),
        source,
    })?;
    decode(reader, path)
}

pub fn read_wav_bytes(bytes: &[u8], origin: &Path) -> Result<Waveform, AudioError> {
    let reader = hound::WavReader::new(Cursor::new(bytes)).map_err(|source| AudioError::Decode {
        path: origin.to_path_buf(),
        source,
    })?;
    decode(reader, origin)
}

fn decode<R: std::io::Read>(reader: hound::WavReader<R>, path: &Path) -> Result<Waveform, AudioError> {
    let spec = reader.spec();
    let dec = |source| AudioError::Decode {
        path: path.to_path_buf(),
        source,
    };
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<Result<_, _>>()
            .map_err(dec)?,
        (hound::SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f32;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<Result<_, _>>()
                .map_err(dec)?
        }
        (format, bits) => {
            return Err(AudioError::UnsupportedFormat {
                path: path.to_path_buf(),
                bits,
                format,
            })
        }
    };
    let channels = spec.channels.max(1) as usize;
    let samples: Vec<f32> = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f32>() / channels as f32)
            .collect()
    };
    if samples.is_empty() {
        return Err(AudioError::NoSamples(path.to_path_buf()));
    }
    Ok(Waveform::new(samples, spec.sample_rate))
}

/// Band-limited resampling by Hann-windowed sinc interpolation.
///
/// Output length is `round(len * to / from)`.
pub fn resample(samples: &[f32], from_rate: f64, to_rate: f64) -> Vec<f32> {
    assert!(from_rate > 0.0 && to_rate > 0.0, "sample rates must be positive");
    let out_len = (samples.len() as f64 * to_rate / from_rate).round() as usize;
    resample_to_len(samples, from_rate, to_rate, out_len)
}

pub fn resample_to_len(samples: &[f32], from_rate: f64, to_rate: f64, out_len: usize) -> Vec<f32> {
    if (from_rate - to_rate).abs() < f64::EPSILON && out_len == samples.len() {
        return samples.to_vec();
    }
    const ZERO_CROSSINGS: f64 = 16.0;
    let step = from_rate / to_rate;
    // cutoff relative to the input Nyquist; lowered when decimating
    let cutoff = (to_rate / from_rate).min(1.0) * 0.97;
    let half_width = ZERO_CROSSINGS / cutoff;
    let n = samples.len() as isize;
    (0..out_len)
        .map(|j| {
            let center = j as f64 * step;
            let lo = (center - half_width).ceil() as isize;
            let hi = (center + half_width).floor() as isize;
            let mut acc = 0.0f64;
            for i in lo.max(0)..=hi.min(n - 1) {
                let x = i as f64 - center;
                let w = 0.5 + 0.5 * (std::f64::consts::PI * x / half_width).cos();
                acc += samples[i as usize] as f64 * cutoff * sinc(cutoff * x) * w;
            }
            acc as f32
        })
        .collect()
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, rate: u32, secs: f64, amp: f32) -> Vec<f32> {
        let n = (rate as f64 * secs) as usize;
        (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin() as f32)
            .collect()
    }

    #[test]
    fn wav_round_trip_is_quantization_exact() {
        let dir = tempfile::tempdir().unwrap();
        let w = Waveform::new(tone(300.0, 8000, 0.1, 0.5), 8000);
        let p = dir.path().join("t.wav");
        w.write_wav(&p).unwrap();
        let r = read_wav(&p).unwrap();
        assert_eq!(r.sample_rate, 8000);
        assert_eq!(r.len(), w.len());
        for (a, b) in r.samples.iter().zip(&w.samples) {
            assert!((a - b).abs() <= 1.0 / 32767.0);
        }
        assert_eq!(w.to_wav_bytes(), std::fs::read(&p).unwrap());
    }

    #[test]
    fn upsampling_preserves_tone() {
        let x = tone(440.0, 8000, 1.0, 0.5);
        let y = resample(&x, 8000.0, 16000.0);
        assert_eq!(y.len(), 16000);
        let reference = tone(440.0, 16000, 1.0, 0.5);
        // ignore edges where the kernel is truncated
        let err: f32 = y[400..15600]
            .iter()
            .zip(&reference[400..15600])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max);
        assert!(err < 0.01, "max error {err}");
    }

    #[test]
    fn garbage_is_a_decode_error() {
        let r = read_wav_bytes(b"not a riff file", Path::new("mem"));
        assert!(matches!(r, Err(AudioError::Decode { .. })));
    }
}
