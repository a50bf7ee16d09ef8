use std::sync::OnceLock;

use super::stft::{Planner, N_BINS};
use super::{MelSpectrogram, Waveform, F_MAX, F_MIN, LOG_EPS, N_FFT, N_MELS, SAMPLE_RATE};
use crate::error::{Error, Result};

const F_SP: f64 = 200.0 / 3.0;
const MIN_LOG_HZ: f64 = 1000.0;
const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;

fn log_step() -> f64 {
    6.4f64.ln() / 27.0
}

/// Slaney mel scale: linear below 1 kHz, logarithmic above.
pub fn hz_to_mel(hz: f64) -> f64 {
    if hz >= MIN_LOG_HZ {
        MIN_LOG_MEL + (hz / MIN_LOG_HZ).ln() / log_step()
    } else {
        hz / F_SP
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    if mel >= MIN_LOG_MEL {
        MIN_LOG_HZ * (log_step() * (mel - MIN_LOG_MEL)).exp()
    } else {
        F_SP * mel
    }
}

/// `N_MELS × N_BINS` triangular filters with Slaney area normalization.
pub fn mel_filterbank() -> &'static [Vec<f64>] {
    static BANK: OnceLock<Vec<Vec<f64>>> = OnceLock::new();
    BANK.get_or_init(|| {
        let (lo, hi) = (hz_to_mel(F_MIN), hz_to_mel(F_MAX));
        let points: Vec<f64> = (0..N_MELS + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (N_MELS + 1) as f64))
            .collect();
        let fft_freqs: Vec<f64> = (0..N_BINS)
            .map(|k| k as f64 * SAMPLE_RATE as f64 / N_FFT as f64)
            .collect();
        (0..N_MELS)
            .map(|m| {
                let (left, center, right) = (points[m], points[m + 1], points[m + 2]);
                let enorm = 2.0 / (right - left);
                fft_freqs
                    .iter()
                    .map(|&f| {
                        let lower = (f - left) / (center - left);
                        let upper = (right - f) / (right - center);
                        lower.min(upper).max(0.0) * enorm
                    })
                    .collect()
            })
            .collect()
    })
}

pub(crate) fn mel_from_magnitudes(mags: &[f64], n_frames: usize) -> Vec<f32> {
    let bank = mel_filterbank();
    let mut out = Vec::with_capacity(n_frames * N_MELS);
    for t in 0..n_frames {
        let frame = &mags[t * N_BINS..(t + 1) * N_BINS];
        for filt in bank {
            let e: f64 = filt.iter().zip(frame).map(|(w, m)| w * m).sum();
            out.push(e.max(LOG_EPS).ln() as f32);
        }
    }
    out
}

pub(crate) fn mel_with(planner: &Planner, w: &Waveform) -> Result<MelSpectrogram> {
    if w.len() < N_FFT {
        return Err(Error::Audio(format!(
            "waveform of {} samples is shorter than one {N_FFT}-sample window",
            w.len()
        )));
    }
    let spec = planner.stft(w.samples());
    MelSpectrogram::from_data(
        spec.n_frames,
        mel_from_magnitudes(&spec.magnitudes(), spec.n_frames),
    )
}

/// Natural-log mel magnitudes, `ceil(len / 256)` frames of 80 bands.
pub fn mel_spectrogram(w: &Waveform) -> Result<MelSpectrogram> {
    mel_with(&Planner::new(), w)
}
