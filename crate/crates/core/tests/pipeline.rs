use acevc_core::config::SreConfig;
use acevc_core::dsp::{mel_spectrogram, sine, Waveform, SAMPLE_RATE};
use acevc_core::pipeline::target_speaker_embedding;
use acevc_core::sre::Sre;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sre() -> Sre {
    let cfg = SreConfig {
        width: 16,
        blocks: 1,
        heads: 2,
        ff_dim: 16,
        conv_kernel: 3,
        content_dim: 4,
        speaker_dim: 6,
        n_speakers: 2,
        ..SreConfig::default()
    };
    Sre::new(&cfg, &mut ChaCha8Rng::seed_from_u64(4))
}

#[test]
fn identical_slices_average_to_the_single_slice_embedding() {
    let sre = sre();
    let slice = sine(150.0, 2.0, 0.4);
    let audio = Waveform::concat(&vec![slice.clone(); 5]).unwrap();
    let single = sre.extract(&mel_spectrogram(&slice).unwrap()).unwrap().1;
    let pooled = target_speaker_embedding(&sre, &audio, 10.0, 2.0).unwrap();
    for (a, b) in single.z_s.iter().zip(&pooled.z_s) {
        assert!((a - b).abs() < 1e-6);
    }
    let norm: f64 = pooled
        .z_s
        .iter()
        .map(|&v| (v as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    assert!((norm - 1.0).abs() < 1e-6);
}

#[test]
fn mixed_enrollment_is_unit_norm() {
    let sre = sre();
    let parts: Vec<Waveform> = [120.0, 180.0, 240.0, 300.0, 140.0, 90.0]
        .iter()
        .map(|&f| sine(f, 2.0, 0.3))
        .collect();
    let e = target_speaker_embedding(&sre, &Waveform::concat(&parts).unwrap(), 10.0, 2.0).unwrap();
    let norm: f64 = e
        .z_s
        .iter()
        .map(|&v| (v as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    assert!((norm - 1.0).abs() < 1e-6);
}

#[test]
fn short_enrollment_is_rejected() {
    let sre = sre();
    let nine = Waveform::new(vec![0.1; 9 * SAMPLE_RATE as usize], SAMPLE_RATE).unwrap();
    let err = target_speaker_embedding(&sre, &nine, 10.0, 2.0)
        .unwrap_err()
        .to_string();
    assert!(err.contains("insufficient target audio"), "{err}");
}
