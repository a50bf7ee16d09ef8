use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::{HOP, N_FFT};

/// Complex STFT, `frames × (N_FFT/2 + 1)` row-major.
#[derive(Clone, Debug)]
pub struct Spectrum {
    pub n_frames: usize,
    pub bins: Vec<Complex64>,
}

pub const N_BINS: usize = N_FFT / 2 + 1;

impl Spectrum {
    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.bins[t * N_BINS..(t + 1) * N_BINS]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [Complex64] {
        &mut self.bins[t * N_BINS..(t + 1) * N_BINS]
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.bins.iter().map(|c| c.norm()).collect()
    }
}

/// `ceil(len / hop)` frames on the centered grid.
pub fn n_frames(len: usize) -> usize {
    len.div_ceil(HOP)
}

pub(crate) fn hann() -> Vec<f64> {
    (0..N_FFT)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / N_FFT as f64).cos())
        .collect()
}

fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    let mut i = i;
    // A single reflection suffices whenever len > N_FFT / 2.
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i.clamp(0, n - 1) as usize
}

pub(crate) struct Planner {
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
}

impl Planner {
    pub(crate) fn new() -> Self {
        let mut p = FftPlanner::new();
        Self {
            fwd: p.plan_fft_forward(N_FFT),
            inv: p.plan_fft_inverse(N_FFT),
            window: hann(),
        }
    }

    /// Centered, reflect-padded STFT with `ceil(len / HOP)` frames.
    pub(crate) fn stft(&self, x: &[f32]) -> Spectrum {
        let frames = n_frames(x.len());
        let half = (N_FFT / 2) as isize;
        let mut bins = Vec::with_capacity(frames * N_BINS);
        let mut buf = vec![Complex64::new(0.0, 0.0); N_FFT];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.fwd.get_inplace_scratch_len()];
        for t in 0..frames {
            let start = (t * HOP) as isize - half;
            for (j, b) in buf.iter_mut().enumerate() {
                let s = x[reflect(start + j as isize, x.len())] as f64;
                *b = Complex64::new(s * self.window[j], 0.0);
            }
            self.fwd.process_with_scratch(&mut buf, &mut scratch);
            bins.extend_from_slice(&buf[..N_BINS]);
        }
        Spectrum {
            n_frames: frames,
            bins,
        }
    }

    /// Weighted overlap-add inverse of [`Planner::stft`], trimmed to `length`.
    pub(crate) fn istft(&self, spec: &Spectrum, length: usize) -> Vec<f32> {
        let half = N_FFT / 2;
        let total = (spec.n_frames.saturating_sub(1)) * HOP + N_FFT;
        let mut out = vec![0.0f64; total];
        let mut wsum = vec![0.0f64; total];
        let mut buf = vec![Complex64::new(0.0, 0.0); N_FFT];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.inv.get_inplace_scratch_len()];
        for t in 0..spec.n_frames {
            let f = spec.frame(t);
            buf[..N_BINS].copy_from_slice(f);
            for k in N_BINS..N_FFT {
                buf[k] = f[N_FFT - k].conj();
            }
            self.inv.process_with_scratch(&mut buf, &mut scratch);
            let off = t * HOP;
            for j in 0..N_FFT {
                let w = self.window[j];
                out[off + j] += buf[j].re / N_FFT as f64 * w;
                wsum[off + j] += w * w;
            }
        }
        (0..length)
            .map(|i| {
                let j = i + half;
                if j >= total {
                    return 0.0;
                }
                let w = wsum[j];
                (if w > 1e-8 { out[j] / w } else { out[j] }) as f32
            })
            .collect()
    }
}

pub fn stft(x: &[f32]) -> Spectrum {
    Planner::new().stft(x)
}

pub fn istft(spec: &Spectrum, length: usize) -> Vec<f32> {
    Planner::new().istft(spec, length)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_is_ceil_of_hop_division() {
        assert_eq!(n_frames(22050), 87);
        assert_eq!(n_frames(1024), 4);
        assert_eq!(n_frames(1025), 5);
    }

    #[test]
    fn istft_inverts_stft_in_the_interior() {
        let x: Vec<f32> = (0..5000)
            .map(|i| ((i as f32) * 0.037).sin() * 0.5 + ((i * 7 % 13) as f32 - 6.0) * 0.01)
            .collect();
        let p = Planner::new();
        let y = p.istft(&p.stft(&x), x.len());
        let err = x[600..4400]
            .iter()
            .zip(&y[600..4400])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(err < 1e-4, "max err {err}");
    }
}
