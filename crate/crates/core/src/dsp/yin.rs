//! Frame-synchronous Yin f0 tracker.

use super::stft::n_frames;
use super::{PitchContour, Waveform, HOP, WIN_LENGTH, YIN_FMAX, YIN_FMIN, YIN_THRESHOLD};

/// One f0 estimate per mel frame; unvoiced frames are 0.
///
/// Frame `t` analyses the 1024 samples centered on `t * 256`, shifted inward
/// at the signal edges so every frame sees real audio rather than padding.
pub fn yin_pitch(w: &Waveform) -> PitchContour {
    let x = w.samples();
    let sr = w.sample_rate() as f64;
    let frames = n_frames(x.len());
    let tau_min = ((sr / YIN_FMAX).floor() as usize).max(2);
    let tau_max = (sr / YIN_FMIN).floor() as usize;
    let win = WIN_LENGTH.min(x.len());
    if win <= tau_max + 2 {
        return PitchContour::new(vec![0.0; frames]);
    }
    let integ = win - tau_max;
    let mut diff = vec![0.0f64; tau_max + 1];
    let mut cmnd = vec![1.0f64; tau_max + 1];
    let f0 = (0..frames)
        .map(|t| {
            let centre = (t * HOP) as isize - (WIN_LENGTH / 2) as isize;
            let start = centre.clamp(0, (x.len() - win) as isize) as usize;
            let frame = &x[start..start + win];
            estimate(frame, integ, tau_min, tau_max, sr, &mut diff, &mut cmnd)
        })
        .collect();
    PitchContour::new(f0)
}

fn estimate(
    frame: &[f32],
    integ: usize,
    tau_min: usize,
    tau_max: usize,
    sr: f64,
    diff: &mut [f64],
    cmnd: &mut [f64],
) -> f32 {
    let energy: f64 = frame[..integ].iter().map(|&v| (v as f64).powi(2)).sum();
    if energy <= 1e-10 {
        return 0.0;
    }
    diff[0] = 0.0;
    for tau in 1..=tau_max {
        let mut s = 0.0f64;
        for j in 0..integ {
            let d = frame[j] as f64 - frame[j + tau] as f64;
            s += d * d;
        }
        diff[tau] = s;
    }
    cmnd[0] = 1.0;
    let mut running = 0.0;
    for tau in 1..=tau_max {
        running += diff[tau];
        cmnd[tau] = if running > 0.0 {
            diff[tau] * tau as f64 / running
        } else {
            1.0
        };
    }
    let mut tau = tau_min;
    let found = loop {
        if tau > tau_max {
            break None;
        }
        if cmnd[tau] < YIN_THRESHOLD {
            while tau < tau_max && cmnd[tau + 1] < cmnd[tau] {
                tau += 1;
            }
            break Some(tau);
        }
        tau += 1;
    };
    let Some(tau) = found else { return 0.0 };
    let refined = if tau > 1 && tau < tau_max {
        let (a, b, c) = (cmnd[tau - 1], cmnd[tau], cmnd[tau + 1]);
        let denom = a - 2.0 * b + c;
        if denom.abs() > 1e-12 {
            tau as f64 + 0.5 * (a - c) / denom
        } else {
            tau as f64
        }
    } else {
        tau as f64
    };
    let f = sr / refined;
    if (YIN_FMIN..=YIN_FMAX).contains(&f) {
        f as f32
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{mel_spectrogram, sine, SAMPLE_RATE};

    #[test]
    fn sines_within_one_percent() {
        for f in [220.0, 440.0] {
            let p = yin_pitch(&sine(f, 1.0, 0.5));
            assert!(p.voiced_count() > 0);
            for v in p.voiced() {
                assert!((v as f64 - f).abs() / f < 0.01, "{f}: {v}");
            }
        }
    }

    #[test]
    fn silence_is_unvoiced() {
        let w = Waveform::new(vec![0.0; 8000], SAMPLE_RATE).unwrap();
        assert!(yin_pitch(&w).f0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn contour_aligns_with_mel_frames() {
        for n in [1024, 1025, 5000, 22050] {
            let w = sine(150.0, n as f64 / SAMPLE_RATE as f64, 0.3);
            assert_eq!(yin_pitch(&w).len(), mel_spectrogram(&w).unwrap().n_frames());
        }
    }
}
