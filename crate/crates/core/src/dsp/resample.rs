use std::f64::consts::PI;

/// Zero crossings of the sinc kernel on each side of the output sample.
const ZERO_CROSSINGS: f64 = 16.0;
/// Kernel table entries across one side of the kernel.
const TABLE_DENSITY: usize = 16 * 512;

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Band-limited resampling of `x` to exactly `out_len` samples.
///
/// Output sample `i` reads input position `i * len / out_len`; when shrinking,
/// the kernel cutoff drops to the new Nyquist rate to suppress aliasing.
pub fn resample_to_len(x: &[f32], out_len: usize) -> Vec<f32> {
    if x.is_empty() || out_len == 0 {
        return vec![0.0; out_len];
    }
    if out_len == x.len() {
        return x.to_vec();
    }
    let ratio = out_len as f64 / x.len() as f64;
    let cutoff = ratio.min(1.0);
    let half_width = ZERO_CROSSINGS / cutoff;
    // Kernel sampled on |d| in [0, half_width], read with linear interpolation.
    let per_unit = TABLE_DENSITY as f64 / half_width;
    let table: Vec<f64> = (0..=TABLE_DENSITY + 1)
        .map(|k| {
            let d = k as f64 / per_unit;
            if d > half_width {
                0.0
            } else {
                cutoff * sinc(cutoff * d) * (0.5 + 0.5 * (PI * d / half_width).cos())
            }
        })
        .collect();
    let kernel = |d: f64| {
        let u = d.abs() * per_unit;
        let k = u as usize;
        if k >= TABLE_DENSITY {
            return 0.0;
        }
        let f = u - k as f64;
        table[k] + f * (table[k + 1] - table[k])
    };
    let n = x.len() as isize;
    (0..out_len)
        .map(|i| {
            let pos = i as f64 / ratio;
            let lo = (pos - half_width).ceil() as isize;
            let hi = (pos + half_width).floor() as isize;
            let mut acc = 0.0f64;
            for j in lo.max(0)..=hi.min(n - 1) {
                acc += x[j as usize] as f64 * kernel(pos - j as f64);
            }
            acc as f32
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_exact_length() {
        let x: Vec<f32> = (0..100).map(|i| (i as f32 * 0.1).sin()).collect();
        assert_eq!(resample_to_len(&x, 100), x);
        assert_eq!(resample_to_len(&x, 37).len(), 37);
        assert_eq!(resample_to_len(&x, 251).len(), 251);
    }

    #[test]
    fn decimating_a_low_tone_preserves_it() {
        let f = 300.0;
        let x: Vec<f32> = (0..44100)
            .map(|i| (2.0 * PI * f * i as f64 / 44100.0).sin() as f32)
            .collect();
        let y = resample_to_len(&x, 22050);
        let err = (2000..20000)
            .map(|i| (y[i] as f64 - (2.0 * PI * f * i as f64 / 22050.0).sin()).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-2, "{err}");
    }
}
