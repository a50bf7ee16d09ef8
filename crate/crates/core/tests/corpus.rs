use std::path::Path;

use acevc_core::corpus::*;
use acevc_core::dsp::{speaker_pitch_stats, PitchContour};

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn speakers() -> Vec<String> {
    vec!["spk0".into(), "spk1".into()]
}

#[test]
fn manifest_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("a.wav"), b"").unwrap();
    let cases = [
        (
            "a.wav|aei|spk0|1.0\nb.wav|aei|spk0|1.0\n",
            "line 2",
            "missing file",
        ),
        (
            "a.wav|aei|spk0|1.0\n\na.wav|aei|spk9|1.0\n",
            "line 3",
            "unknown speaker",
        ),
        ("a.wav|axe|spk1|1.0\n", "line 1", "out-of-vocabulary"),
        ("a.wav|aei|spk1\n", "line 1", "expected 4 fields"),
        ("a.wav|aei|spk1|soon\n", "line 1", "bad duration"),
    ];
    for (text, line, what) in cases {
        let m = write(dir.path(), "m.txt", text);
        let err = load_manifest(&m, &speakers(), None)
            .unwrap_err()
            .to_string();
        assert!(err.contains(line) && err.contains(what), "{err}");
    }
}

#[test]
fn empty_manifest_and_duration_filter() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("a.wav"), b"").unwrap();
    let m = write(dir.path(), "m.txt", "");
    assert!(load_manifest(&m, &speakers(), None).unwrap().is_empty());
    let m = write(
        dir.path(),
        "m.txt",
        "a.wav|a|spk0|1.0\na.wav|e|spk1|5.0\na.wav|i|spk1|20.0\n",
    );
    assert_eq!(load_manifest(&m, &speakers(), None).unwrap().len(), 3);
    let kept = load_manifest(&m, &speakers(), Some((4.0, 16.0))).unwrap();
    assert_eq!(kept.len(), 1);
    assert_eq!(kept[0].transcript, "e");
    assert_eq!(kept[0].tokens(), vec![token_id('e').unwrap()]);
}

#[test]
fn generator_is_deterministic_and_faithful() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ca = generate_toy_corpus(a.path(), 3, 3, 21).unwrap();
    generate_toy_corpus(b.path(), 3, 3, 21).unwrap();
    for u in &ca.utterances {
        let rel = u.path.strip_prefix(a.path()).unwrap();
        assert_eq!(
            std::fs::read(&u.path).unwrap(),
            std::fs::read(b.path().join(rel)).unwrap()
        );
    }
    for f in [MANIFEST_FILE, SPEAKERS_FILE] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap()
        );
    }
    assert_eq!(
        load_speakers(&a.path().join(SPEAKERS_FILE)).unwrap(),
        ca.speakers
    );

    let data = Dataset::load(a.path(), None).unwrap();
    assert_eq!(data.examples.len(), 9);
    for (s, idx) in data.by_speaker().iter().enumerate() {
        let spec = &ca.speakers[s];
        assert!((90.0..=320.0).contains(&spec.f0_hz));
        assert!(spec.timbre.iter().all(|t| (300.0..=3500.0).contains(t)));
        let contours: Vec<PitchContour> =
            idx.iter().map(|&i| data.examples[i].f0.clone()).collect();
        let mean = speaker_pitch_stats(&contours).unwrap().mean_hz;
        assert!(
            (mean / spec.f0_hz - 1.0).abs() < 0.05,
            "{}: {mean} vs {}",
            spec.name,
            spec.f0_hz
        );
    }
    let (train, test) = data.split(2, 1).unwrap();
    assert!(train.iter().all(|i| !test.contains(i)));
    assert!(data.split(3, 1).is_err());
}

#[test]
fn different_seeds_give_different_corpora() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ca = generate_toy_corpus(a.path(), 2, 1, 1).unwrap();
    let cb = generate_toy_corpus(b.path(), 2, 1, 2).unwrap();
    assert_ne!(
        std::fs::read(&ca.utterances[0].path).unwrap(),
        std::fs::read(&cb.utterances[0].path).unwrap()
    );
}

#[test]
fn too_few_speakers_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(generate_toy_corpus(dir.path(), 1, 1, 0).is_err());
    assert!(generate_toy_corpus(dir.path(), 17, 1, 0).is_err());
}
