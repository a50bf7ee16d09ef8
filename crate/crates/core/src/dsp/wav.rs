use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::resample::resample_to_len;
use super::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

const MIN_RATE: u32 = 8000;
const MAX_RATE: u32 = 48000;

/// Raw decode: channel-averaged samples and the file's sample rate.
pub fn read_wav(path: &Path) -> Result<(Vec<f32>, u32)> {
    let reader = WavReader::open(path)
        .map_err(|e| Error::Audio(format!("unreadable file {}: {e}", path.display())))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 || channels > 2 {
        return Err(Error::Audio(format!(
            "unsupported encoding: {channels} channels"
        )));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Audio(format!("unreadable file: {e}")))?,
        (SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f32;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Audio(format!("unreadable file: {e}")))?
        }
        (fmt, bits) => {
            return Err(Error::Audio(format!(
                "unsupported encoding: {fmt:?} {bits}-bit"
            )))
        }
    };
    let mono: Vec<f32> = interleaved
        .chunks(channels)
        .map(|c| c.iter().sum::<f32>() / channels as f32)
        .collect();
    Ok((mono, spec.sample_rate))
}

/// Mono, 22050 Hz, peak at most 1.
///
/// Inputs already within `[-1, 1]` keep their level; louder float files are
/// scaled down so the peak is exactly 1.
pub fn ingest_audio(path: &Path) -> Result<Waveform> {
    let (mono, rate) = read_wav(path)?;
    if !(MIN_RATE..=MAX_RATE).contains(&rate) {
        return Err(Error::Audio(format!(
            "unsupported encoding: sample rate {rate} Hz"
        )));
    }
    if mono.is_empty() {
        return Err(Error::Audio("zero-length audio".into()));
    }
    let out_len =
        ((mono.len() as u64 * SAMPLE_RATE as u64 + rate as u64 / 2) / rate as u64).max(1) as usize;
    let mut samples = resample_to_len(&mono, out_len);
    let peak = samples.iter().fold(0.0f32, |m, s| m.max(s.abs()));
    if peak > 1.0 {
        samples.iter_mut().for_each(|s| *s /= peak);
    }
    Waveform::new(samples, SAMPLE_RATE)
}

/// 16-bit PCM mono; samples are clipped to `[-1, 1]`.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let io = |e: hound::Error| Error::Io(format!("writing {}: {e}", path.display()));
    let mut writer = WavWriter::create(path, spec).map_err(io)?;
    for &s in w.samples() {
        writer
            .write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)
            .map_err(io)?;
    }
    writer.finalize().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::sine;

    fn write_raw(path: &Path, rate: u32, channels: u16, frames: usize) {
        let spec = WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut w = WavWriter::create(path, spec).unwrap();
        for i in 0..frames * channels as usize {
            w.write_sample(((i as f32 * 0.01).sin() * 10000.0) as i16)
                .unwrap();
        }
        w.finalize().unwrap();
    }

    #[test]
    fn mono_native_rate_is_identity_length() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_raw(&p, 22050, 1, 22050);
        assert_eq!(ingest_audio(&p).unwrap().len(), 22050);
    }

    #[test]
    fn stereo_44k_decimates_to_half() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.wav");
        write_raw(&p, 44100, 2, 44100);
        let w = ingest_audio(&p).unwrap();
        assert_eq!((w.len(), w.sample_rate()), (22050, SAMPLE_RATE));
        assert!(w.peak() <= 1.0);
    }

    #[test]
    fn empty_and_missing_files_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.wav");
        write_raw(&p, 22050, 1, 0);
        let err = ingest_audio(&p).unwrap_err().to_string();
        assert!(err.contains("zero-length audio"), "{err}");
        assert!(ingest_audio(&dir.path().join("missing.wav")).is_err());
    }

    #[test]
    fn write_then_read_round_trips_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.wav");
        let w = sine(330.0, 0.2, 0.7);
        write_wav(&p, &w).unwrap();
        let r = ingest_audio(&p).unwrap();
        let err = w
            .samples()
            .iter()
            .zip(r.samples())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(err < 1e-4);
    }
}
