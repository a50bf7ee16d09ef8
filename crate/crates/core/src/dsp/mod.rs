//! Waveform ingestion and signal-processing primitives.
//!
//! Every feature is computed on a shared frame grid: 22050 Hz audio, a
//! 1024-sample Hann window and a 256-sample hop with reflect-padded centering,
//! giving `ceil(len / 256)` frames. Mel spectrograms and pitch contours built
//! from the same waveform therefore always have equal lengths.

mod griffin_lim;
mod mel;
mod pitch_shift;
mod resample;
mod stft;
mod wav;
mod yin;

pub use griffin_lim::griffin_lim;
pub use mel::{hz_to_mel, mel_filterbank, mel_spectrogram, mel_to_hz};
pub use pitch_shift::pitch_shift;
pub use resample::resample_to_len;
pub use stft::{istft, n_frames, stft, Spectrum};
pub use wav::{ingest_audio, read_wav, write_wav};
pub use yin::yin_pitch;

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 22050;
pub const N_FFT: usize = 1024;
pub const WIN_LENGTH: usize = 1024;
pub const HOP: usize = 256;
pub const N_MELS: usize = 80;
pub const F_MIN: f64 = 0.0;
pub const F_MAX: f64 = 8000.0;
/// Magnitude floor applied before the natural log.
pub const LOG_EPS: f64 = 1e-5;

pub const YIN_FMIN: f64 = 50.0;
pub const YIN_FMAX: f64 = 800.0;
pub const YIN_THRESHOLD: f64 = 0.15;

/// Minimum standard deviation for per-speaker pitch statistics, Hz.
pub const PITCH_STD_FLOOR: f64 = 1.0;

/// Seconds of audio per mel frame.
pub const fn hop_seconds() -> f64 {
    HOP as f64 / SAMPLE_RATE as f64
}

/// Mono audio at [`SAMPLE_RATE`].
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Audio("zero-length audio".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Audio("non-finite sample".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }

    /// Concatenation of several waveforms at the same rate.
    pub fn concat(parts: &[Waveform]) -> Result<Self> {
        let rate = parts.first().map_or(SAMPLE_RATE, |w| w.sample_rate);
        let samples = parts
            .iter()
            .flat_map(|w| w.samples.iter().copied())
            .collect();
        Self::new(samples, rate)
    }

    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        let end = (start + len).min(self.samples.len());
        Self::new(self.samples[start.min(end)..end].to_vec(), self.sample_rate)
    }
}

/// `T × 80` log-mel matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    data: Vec<f32>,
    n_frames: usize,
}

impl MelSpectrogram {
    pub fn from_data(n_frames: usize, data: Vec<f32>) -> Result<Self> {
        if n_frames == 0 {
            return Err(Error::Audio(
                "mel spectrogram needs at least one frame".into(),
            ));
        }
        if data.len() != n_frames * N_MELS {
            return Err(Error::Shape(format!(
                "mel data has {} values, expected {}x{N_MELS}",
                data.len(),
                n_frames
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Audio("non-finite mel value".into()));
        }
        Ok(Self { data, n_frames })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_mels(&self) -> usize {
        N_MELS
    }

    pub fn hop_s(&self) -> f64 {
        hop_seconds()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * N_MELS..(t + 1) * N_MELS]
    }

    /// Rows `[start, start + len)`, clamped to the available frames.
    pub fn crop(&self, start: usize, len: usize) -> Result<Self> {
        let end = (start + len).min(self.n_frames);
        let start = start.min(end);
        Self::from_data(
            end - start,
            self.data[start * N_MELS..end * N_MELS].to_vec(),
        )
    }

    pub fn to_tensor(&self) -> acevc_nn::Tensor<f32> {
        acevc_nn::Tensor::from_vec(self.n_frames, N_MELS, self.data.clone())
    }

    pub fn from_tensor(t: &acevc_nn::Tensor<f32>) -> Result<Self> {
        if t.cols() != N_MELS {
            return Err(Error::Shape(format!(
                "expected {N_MELS} mel bands, got {}",
                t.cols()
            )));
        }
        Self::from_data(t.rows(), t.data().to_vec())
    }

    /// Mean squared difference over the overlapping leading frames.
    pub fn mse(&self, other: &MelSpectrogram) -> f64 {
        let n = self.n_frames.min(other.n_frames) * N_MELS;
        let s: f64 = self.data[..n]
            .iter()
            .zip(&other.data[..n])
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum();
        s / n.max(1) as f64
    }
}

/// Per-frame fundamental frequency in Hz; 0 marks unvoiced frames.
#[derive(Clone, Debug, PartialEq)]
pub struct PitchContour {
    pub f0: Vec<f32>,
}

impl PitchContour {
    pub fn new(f0: Vec<f32>) -> Self {
        Self { f0 }
    }

    pub fn len(&self) -> usize {
        self.f0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0.is_empty()
    }

    pub fn voiced(&self) -> impl Iterator<Item = f32> + '_ {
        self.f0.iter().copied().filter(|&f| f > 0.0)
    }

    pub fn voiced_count(&self) -> usize {
        self.voiced().count()
    }

    /// Mean over voiced frames, or `None` when fully unvoiced.
    pub fn voiced_mean(&self) -> Option<f64> {
        let (s, n) = self
            .voiced()
            .fold((0.0f64, 0usize), |(s, n), f| (s + f as f64, n + 1));
        (n > 0).then(|| s / n as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpeakerPitchStats {
    pub mean_hz: f64,
    pub std_hz: f64,
}

/// Mean and population standard deviation over all voiced frames, std
/// floored at [`PITCH_STD_FLOOR`].
pub fn speaker_pitch_stats(contours: &[PitchContour]) -> Result<SpeakerPitchStats> {
    let voiced: Vec<f64> = contours
        .iter()
        .flat_map(|c| c.voiced().map(f64::from))
        .collect();
    if voiced.is_empty() {
        return Err(Error::Audio("no voiced frames for pitch statistics".into()));
    }
    let n = voiced.len() as f64;
    let mean = voiced.iter().sum::<f64>() / n;
    let var = voiced.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(SpeakerPitchStats {
        mean_hz: mean,
        std_hz: var.sqrt().max(PITCH_STD_FLOOR),
    })
}

/// `(f0 - mean) / std` on voiced frames, 0 on unvoiced frames.
pub fn normalize_pitch(p: &PitchContour, stats: &SpeakerPitchStats) -> Vec<f32> {
    p.f0.iter()
        .map(|&f| {
            if f > 0.0 {
                ((f as f64 - stats.mean_hz) / stats.std_hz) as f32
            } else {
                0.0
            }
        })
        .collect()
}

/// Inverse of [`normalize_pitch`] on the frames flagged voiced in `voicing`.
pub fn denormalize_pitch(
    norm: &[f32],
    voicing: &PitchContour,
    stats: &SpeakerPitchStats,
) -> PitchContour {
    PitchContour::new(
        norm.iter()
            .zip(&voicing.f0)
            .map(|(&z, &f)| {
                if f > 0.0 {
                    (z as f64 * stats.std_hz + stats.mean_hz) as f32
                } else {
                    0.0
                }
            })
            .collect(),
    )
}

/// Pure sine at [`SAMPLE_RATE`], handy for tests and calibration.
pub fn sine(freq_hz: f64, seconds: f64, amplitude: f32) -> Waveform {
    let n = (seconds * SAMPLE_RATE as f64).round() as usize;
    let samples = (0..n)
        .map(|i| {
            amplitude
                * (2.0 * std::f64::consts::PI * freq_hz * i as f64 / SAMPLE_RATE as f64).sin()
                    as f32
        })
        .collect();
    Waveform::new(samples, SAMPLE_RATE).expect("non-empty sine")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_floor_and_population_std() {
        let s = speaker_pitch_stats(&[PitchContour::new(vec![220.0, 220.0, 0.0])]).unwrap();
        assert_eq!((s.mean_hz, s.std_hz), (220.0, 1.0));
        let s = speaker_pitch_stats(&[
            PitchContour::new(vec![200.0]),
            PitchContour::new(vec![0.0, 240.0]),
        ])
        .unwrap();
        assert_eq!((s.mean_hz, s.std_hz), (220.0, 20.0));
        assert!(speaker_pitch_stats(&[PitchContour::new(vec![0.0, 0.0])]).is_err());
    }

    #[test]
    fn normalize_conventions() {
        let stats = SpeakerPitchStats {
            mean_hz: 200.0,
            std_hz: 25.0,
        };
        let p = PitchContour::new(vec![200.0, 225.0, 0.0, 200.0]);
        assert_eq!(normalize_pitch(&p, &stats), vec![0.0, 1.0, 0.0, 0.0]);
        let unvoiced = PitchContour::new(vec![0.0; 4]);
        assert!(normalize_pitch(&unvoiced, &stats).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn waveform_rejects_empty_and_nan() {
        assert!(Waveform::new(vec![], SAMPLE_RATE).is_err());
        assert!(Waveform::new(vec![0.0, f32::NAN], SAMPLE_RATE).is_err());
    }
}
