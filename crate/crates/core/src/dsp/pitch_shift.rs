use std::f64::consts::PI;

use rustfft::num_complex::Complex64;

use super::resample::resample_to_len;
use super::stft::{Planner, Spectrum, N_BINS};
use super::{Waveform, HOP, N_FFT};

fn wrap(phase: f64) -> f64 {
    phase - 2.0 * PI * ((phase + PI) / (2.0 * PI)).floor()
}

/// Phase-vocoder time stretch: output lasts `factor` times longer.
fn time_stretch(planner: &Planner, x: &[f32], factor: f64) -> Vec<f32> {
    let spec = planner.stft(x);
    let rate = 1.0 / factor;
    let n = spec.n_frames;
    let omega: Vec<f64> = (0..N_BINS)
        .map(|k| 2.0 * PI * k as f64 * HOP as f64 / N_FFT as f64)
        .collect();
    let zero = vec![Complex64::new(0.0, 0.0); N_BINS];
    let frame = |t: usize| if t < n { spec.frame(t) } else { &zero[..] };

    let mut phase: Vec<f64> = spec.frame(0).iter().map(|c| c.arg()).collect();
    let mut out = Vec::new();
    let mut steps = 0usize;
    loop {
        let pos = steps as f64 * rate;
        if pos >= n as f64 {
            break;
        }
        let left = pos.floor() as usize;
        let frac = pos - left as f64;
        let (a, b) = (frame(left), frame(left + 1));
        for k in 0..N_BINS {
            let mag = (1.0 - frac) * a[k].norm() + frac * b[k].norm();
            out.push(Complex64::from_polar(mag, phase[k]));
            let dphi = wrap(b[k].arg() - a[k].arg() - omega[k]);
            phase[k] += omega[k] + dphi;
        }
        steps += 1;
    }
    let stretched = Spectrum {
        n_frames: steps,
        bins: out,
    };
    let len = (x.len() as f64 * factor).round() as usize;
    planner.istft(&stretched, len)
}

/// Shifts pitch by `semitones` while keeping the sample count: the signal is
/// time-stretched by `2^(semitones/12)` and resampled back to its length.
pub fn pitch_shift(w: &Waveform, semitones: f64) -> Waveform {
    assert!(semitones.abs() <= 12.0, "pitch shift limited to one octave");
    if semitones == 0.0 || w.len() < N_FFT {
        return w.clone();
    }
    let factor = 2f64.powf(semitones / 12.0);
    let planner = Planner::new();
    let stretched = time_stretch(&planner, w.samples(), factor);
    let samples = resample_to_len(&stretched, w.len());
    Waveform::new(samples, w.sample_rate()).expect("shifted waveform is non-empty and finite")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{sine, yin_pitch};

    #[test]
    fn octave_up_doubles_f0_and_keeps_length() {
        let w = sine(220.0, 1.0, 0.5);
        let s = pitch_shift(&w, 12.0);
        assert_eq!(s.len(), w.len());
        let f = yin_pitch(&s).voiced_mean().unwrap();
        assert!((f - 440.0).abs() / 440.0 < 0.02, "{f}");
    }

    #[test]
    fn zero_shift_is_identity() {
        let w = sine(180.0, 0.5, 0.5);
        assert_eq!(pitch_shift(&w, 0.0), w);
    }
}
