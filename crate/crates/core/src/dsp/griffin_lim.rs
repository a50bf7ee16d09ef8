use std::sync::OnceLock;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;

use super::mel::mel_filterbank;
use super::stft::{Planner, Spectrum, N_BINS};
use super::{MelSpectrogram, Waveform, HOP, N_MELS, SAMPLE_RATE};

const MOMENTUM: f64 = 0.99;
/// Fixed seed for the initial phase so inversion is a pure function.
const PHASE_SEED: u64 = 0x6c1f_0a3d;

/// `N_BINS × N_MELS` Moore-Penrose pseudo-inverse of the mel basis.
fn mel_pinv() -> &'static DMatrix<f64> {
    static PINV: OnceLock<DMatrix<f64>> = OnceLock::new();
    PINV.get_or_init(|| {
        let bank = mel_filterbank();
        let basis = DMatrix::from_fn(N_MELS, N_BINS, |m, k| bank[m][k]);
        basis
            .pseudo_inverse(1e-10)
            .expect("mel basis pseudo-inverse")
    })
}

/// Linear magnitudes from log-mel via the pseudo-inverse, clamped at zero.
fn linear_magnitudes(m: &MelSpectrogram) -> Vec<f64> {
    let pinv = mel_pinv();
    let mut out = Vec::with_capacity(m.n_frames() * N_BINS);
    for t in 0..m.n_frames() {
        let mel: Vec<f64> = m.frame(t).iter().map(|&v| (v as f64).exp()).collect();
        for k in 0..N_BINS {
            let row = pinv.row(k);
            let s: f64 = (0..N_MELS).map(|j| row[j] * mel[j]).sum();
            out.push(s.max(0.0));
        }
    }
    out
}

/// Waveform of `T × 256` samples whose mel spectrogram approximates `m`,
/// by fast Griffin-Lim (momentum 0.99) from a fixed random phase.
pub fn griffin_lim(m: &MelSpectrogram, iters: usize) -> Waveform {
    let iters = iters.max(1);
    let planner = Planner::new();
    let mags = linear_magnitudes(m);
    let len = m.n_frames() * HOP;
    let mut rng = ChaCha8Rng::seed_from_u64(PHASE_SEED);
    let mut angles: Vec<Complex64> = (0..mags.len())
        .map(|_| Complex64::from_polar(1.0, rng.gen_range(0.0..std::f64::consts::TAU)))
        .collect();
    let project = |angles: &[Complex64]| Spectrum {
        n_frames: m.n_frames(),
        bins: mags.iter().zip(angles).map(|(&a, &p)| p * a).collect(),
    };
    let mut prev = vec![Complex64::new(0.0, 0.0); mags.len()];
    for _ in 0..iters {
        let y = planner.istft(&project(&angles), len);
        let rebuilt = planner.stft(&y);
        for ((a, r), p) in angles.iter_mut().zip(&rebuilt.bins).zip(&prev) {
            let v = r - p * (MOMENTUM / (1.0 + MOMENTUM));
            let n = v.norm();
            *a = if n > 1e-16 {
                v / n
            } else {
                Complex64::new(1.0, 0.0)
            };
        }
        prev = rebuilt.bins;
    }
    let samples = planner.istft(&project(&angles), len);
    Waveform::new(samples, SAMPLE_RATE).expect("griffin-lim output is finite")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{mel_spectrogram, sine, yin_pitch, LOG_EPS};

    #[test]
    fn sine_round_trip_keeps_pitch() {
        let m = mel_spectrogram(&sine(220.0, 1.0, 0.5)).unwrap();
        let w = griffin_lim(&m, 32);
        assert_eq!(w.len(), m.n_frames() * HOP);
        let f = yin_pitch(&w).voiced_mean().unwrap();
        assert!((f - 220.0).abs() / 220.0 < 0.03, "{f}");
    }

    #[test]
    fn silence_inverts_to_near_zero() {
        let m = MelSpectrogram::from_data(20, vec![(LOG_EPS as f32).ln(); 20 * N_MELS]).unwrap();
        assert!(griffin_lim(&m, 4).peak() < 1e-2);
    }
}
