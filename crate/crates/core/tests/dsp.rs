use acevc_core::dsp::*;
use proptest::prelude::*;

fn voiced_ratio_error(w: &Waveform, expect: f64) -> f64 {
    yin_pitch(w)
        .voiced()
        .map(|f| (f as f64 / expect - 1.0).abs())
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn yin_has_no_octave_errors_on_sines(freq in 80.0f64..500.0, amp in 0.05f32..1.0) {
        let w = sine(freq, 0.5, amp);
        let p = yin_pitch(&w);
        prop_assert!(p.voiced_count() > 0);
        prop_assert!(voiced_ratio_error(&w, freq) <= 0.05);
    }

    #[test]
    fn pitch_and_mel_frames_align(len in 1024usize..9000, freq in 60.0f64..700.0) {
        let w = Waveform::new(sine(freq, 1.0, 0.5).samples()[..len].to_vec(), SAMPLE_RATE).unwrap();
        let m = mel_spectrogram(&w).unwrap();
        prop_assert_eq!(m.n_frames(), len.div_ceil(HOP));
        prop_assert_eq!(yin_pitch(&w).len(), m.n_frames());
        prop_assert!(m.data().iter().all(|v| v.is_finite()));
        prop_assert_eq!(mel_spectrogram(&w).unwrap(), m);
    }

    #[test]
    fn pitch_shift_preserves_sample_count(len in 1024usize..12000, semis in -12.0f64..12.0) {
        let w = Waveform::new(sine(200.0, 1.0, 0.5).samples()[..len].to_vec(), SAMPLE_RATE).unwrap();
        prop_assert_eq!(pitch_shift(&w, semis).len(), len);
    }

    #[test]
    fn pitch_normalization_round_trips(f0 in prop::collection::vec(prop_oneof![Just(0.0f32), 60.0f32..700.0], 1..60), mean in 80.0f64..300.0, std in 1.0f64..80.0) {
        let p = PitchContour::new(f0);
        let stats = SpeakerPitchStats { mean_hz: mean, std_hz: std };
        let back = denormalize_pitch(&normalize_pitch(&p, &stats), &p, &stats);
        for (a, b) in p.f0.iter().zip(&back.f0) {
            prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0) * 8.0, "{} vs {}", a, b);
        }
    }
}

#[test]
fn documented_framing_and_silence() {
    let one_second = sine(220.0, 1.0, 0.5);
    assert_eq!(one_second.len(), 22050);
    let m = mel_spectrogram(&one_second).unwrap();
    assert_eq!((m.n_frames(), m.n_mels()), (87, 80));
    let silence = Waveform::new(vec![0.0; 22050], SAMPLE_RATE).unwrap();
    let floor = (LOG_EPS as f32).ln();
    assert!(mel_spectrogram(&silence)
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == floor));
    assert_eq!(yin_pitch(&silence).voiced_count(), 0);
}

/// Slaney mel scale written out independently of the library.
fn slaney_mel(hz: f64) -> f64 {
    let (f_sp, min_log_hz) = (200.0 / 3.0, 1000.0);
    let min_log_mel = min_log_hz / f_sp;
    let logstep = (6.4f64).ln() / 27.0;
    if hz < min_log_hz {
        hz / f_sp
    } else {
        min_log_mel + (hz / min_log_hz).ln() / logstep
    }
}

fn slaney_hz(mel: f64) -> f64 {
    let (f_sp, min_log_hz) = (200.0 / 3.0, 1000.0);
    let min_log_mel = min_log_hz / f_sp;
    let logstep = (6.4f64).ln() / 27.0;
    if mel < min_log_mel {
        mel * f_sp
    } else {
        min_log_hz * (logstep * (mel - min_log_mel)).exp()
    }
}

#[test]
fn sine_energy_peaks_in_the_band_centred_on_it() {
    let (lo, hi) = (slaney_mel(F_MIN), slaney_mel(F_MAX));
    let centres: Vec<f64> = (1..=N_MELS)
        .map(|i| slaney_hz(lo + (hi - lo) * i as f64 / (N_MELS + 1) as f64))
        .collect();
    for freq in [220.0, 440.0, 1500.0] {
        let expect = (0..N_MELS)
            .min_by(|&a, &b| {
                (centres[a] - freq)
                    .abs()
                    .total_cmp(&(centres[b] - freq).abs())
            })
            .unwrap();
        let m = mel_spectrogram(&sine(freq, 1.0, 0.5)).unwrap();
        let frame = m.frame(40);
        let got = (0..N_MELS)
            .max_by(|&a, &b| frame[a].total_cmp(&frame[b]))
            .unwrap();
        assert_eq!(got, expect, "{freq} Hz");
    }
}

#[test]
fn yin_reads_reference_sines_within_one_percent() {
    for freq in [80.0, 110.0, 165.0, 220.0, 330.0, 440.0] {
        assert!(
            voiced_ratio_error(&sine(freq, 1.0, 0.5), freq) <= 0.01,
            "{freq} Hz"
        );
    }
}

#[test]
fn pitch_shift_scales_f0_by_the_semitone_ratio() {
    let w = sine(220.0, 1.0, 0.5);
    for semis in [1.0, 2.0, 4.0, 12.0, -1.0, -2.0, -4.0, -12.0] {
        let shifted = pitch_shift(&w, semis);
        assert_eq!(shifted.len(), w.len());
        let expect = 220.0 * 2f64.powf(semis / 12.0);
        let p = yin_pitch(&shifted);
        let mean = p.voiced_mean().unwrap();
        assert!(
            (mean / expect - 1.0).abs() <= 0.02,
            "{semis}: {mean} vs {expect}"
        );
    }
    let same = pitch_shift(&w, 0.0);
    let (a, b) = (yin_pitch(&w), yin_pitch(&same));
    for (x, y) in a.f0.iter().zip(&b.f0) {
        assert!((x - y).abs() <= 0.005 * x.max(1.0));
    }
}

#[test]
fn griffin_lim_round_trip_is_bounded() {
    let w = sine(220.0, 1.0, 0.5);
    let m = mel_spectrogram(&w).unwrap();
    let back = griffin_lim(&m, 60);
    assert_eq!(back.len(), m.n_frames() * HOP);
    let f0 = yin_pitch(&back).voiced_mean().unwrap();
    assert!((f0 / 220.0 - 1.0).abs() < 0.03);
    let again = mel_spectrogram(&back).unwrap();
    let mae = m
        .data()
        .iter()
        .zip(again.data())
        .map(|(a, b)| (a - b).abs() as f64)
        .sum::<f64>()
        / m.data().len() as f64;
    assert!(mae < 0.5, "mean abs log-mel error {mae}");
}

fn write_pcm(path: &std::path::Path, channels: u16, rate: u32, frames: &[Vec<i16>]) {
    let spec = hound::WavSpec {
        channels,
        sample_rate: rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    for f in frames {
        for &s in f {
            w.write_sample(s).unwrap();
        }
    }
    w.finalize().unwrap();
}

#[test]
fn ingestion_downmixes_and_resamples() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stereo.wav");
    let frames: Vec<Vec<i16>> = (0..44100)
        .map(|i| {
            let v =
                (8000.0 * (2.0 * std::f64::consts::PI * 300.0 * i as f64 / 44100.0).sin()) as i16;
            vec![v, v / 2]
        })
        .collect();
    write_pcm(&path, 2, 44100, &frames);
    let w = ingest_audio(&path).unwrap();
    assert_eq!((w.len(), w.sample_rate()), (22050, SAMPLE_RATE));
    assert!(w.peak() <= 1.0);
    assert!((yin_pitch(&w).voiced_mean().unwrap() / 300.0 - 1.0).abs() < 0.01);

    let empty = dir.path().join("empty.wav");
    write_pcm(&empty, 1, 22050, &[]);
    let err = ingest_audio(&empty).unwrap_err().to_string();
    assert!(err.contains("zero-length audio"), "{err}");
}
