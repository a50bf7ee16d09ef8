use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[dsp]
griffin_lim_iters = 4

[sre]
width = 16
blocks = 1
heads = 2
ff_dim = 32
conv_kernel = 3
content_dim = 8
speaker_dim = 8
n_speakers = 2

[synth]
hidden = 16
encoder_blocks = 1
decoder_blocks = 1
heads = 2
ff_dim = 32
predictor_dim = 16
content_dim = 8
speaker_dim = 8

[train]
seed = 11
sre_steps = 3
synth_steps = 3
synth_warmup = 1
asr_batch = 2
sv_batch = 2
synth_batch = 2

[eval]
probe_hidden = 8
probe_steps = 5
train_per_speaker = 4
test_per_speaker = 2
target_seconds = 4.0
trials = 2
"#;

fn acevc(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acevc"))
        .args(args)
        .env("ACEVC_RUN_DIR", root)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = acevc(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = acevc(dir.path(), &["train-sre", "--corpus", "x", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    let out = acevc(dir.path(), &["--help"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_2_with_a_hint() {
    let dir = tempfile::tempdir().unwrap();
    let out = acevc(
        dir.path(),
        &["extract", "--sre", "missing.ckpt", "--wav", "a.wav"],
    );
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("missing checkpoint") && err.contains("hint:"),
        "{err}"
    );

    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nbogus = 1\n").unwrap();
    let out = acevc(
        dir.path(),
        &["--config", s(&cfg), "gen-corpus", "--out", "c"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--config"));
}

fn checkpoint_bytes(root: &Path, run: &str, file: &str) -> Vec<u8> {
    std::fs::read(root.join(run).join(file)).unwrap()
}

#[test]
fn end_to_end_tiny_run_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("runs");
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let corpus = dir.path().join("corpus");
    ok(&acevc(
        &root,
        &[
            "--config",
            s(&cfg),
            "gen-corpus",
            "--out",
            s(&corpus),
            "--speakers",
            "2",
            "--utts",
            "6",
        ],
    ));
    assert!(corpus.join("manifest.txt").is_file());

    ok(&acevc(
        &root,
        &[
            "--config",
            s(&cfg),
            "--run",
            "sre-a",
            "train-sre",
            "--corpus",
            s(&corpus),
        ],
    ));
    let record = std::fs::read_to_string(root.join("sre-a/run.txt")).unwrap();
    assert!(
        record.contains("seed: 11") && record.contains("output.sre:") && record.contains("sha256=")
    );
    let snapshot = root.join("sre-a/config.toml");
    ok(&acevc(
        &root,
        &[
            "--config",
            s(&snapshot),
            "--run",
            "sre-b",
            "train-sre",
            "--corpus",
            s(&corpus),
        ],
    ));
    assert_eq!(
        checkpoint_bytes(&root, "sre-a", "sre.ckpt"),
        checkpoint_bytes(&root, "sre-b", "sre.ckpt")
    );

    ok(&acevc(
        &root,
        &[
            "--config",
            s(&cfg),
            "--run",
            "abl",
            "train-sre",
            "--corpus",
            s(&corpus),
            "--no-disentangle",
        ],
    ));
    let abl = std::fs::read_to_string(root.join("abl/config.toml")).unwrap();
    assert!(abl.contains("beta = 0.0"), "{abl}");

    let sre = root.join("sre-a/sre.ckpt");
    ok(&acevc(
        &root,
        &[
            "--config",
            s(&cfg),
            "train-synth",
            "--corpus",
            s(&corpus),
            "--sre",
            s(&sre),
        ],
    ));
    let synth = root.join("train-synth/synth.ckpt");

    let wavs: Vec<PathBuf> = {
        let mut v: Vec<PathBuf> = std::fs::read_dir(corpus.join("wav"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        v.sort();
        v
    };
    let extracted = ok(&acevc(
        &root,
        &["extract", "--sre", s(&sre), "--wav", s(&wavs[0])],
    ));
    assert!(extracted.contains("speaker_embedding:"));

    let target_dir = dir.path().join("target");
    std::fs::create_dir(&target_dir).unwrap();
    for w in wavs.iter().filter(|p| s(p).contains("spk1_")) {
        std::fs::copy(w, target_dir.join(w.file_name().unwrap())).unwrap();
    }
    let mut outs = Vec::new();
    for run in ["conv-a", "conv-b"] {
        let out = dir.path().join(format!("{run}.wav"));
        let args = [
            "--config",
            s(&cfg),
            "--run",
            run,
            "convert",
            "--mode",
            "mimic",
            "--src",
            s(&wavs[0]),
            "--target-dir",
            s(&target_dir),
            "--sre",
            s(&sre),
            "--synth",
            s(&synth),
            "-o",
            s(&out),
        ];
        ok(&acevc(&root, &args));
        let report = std::fs::read_to_string(out.with_extension("report.txt")).unwrap();
        assert!(report.contains("mode: mimic") && report.contains("durations:"));
        outs.push(std::fs::read(&out).unwrap());
    }
    assert_eq!(outs[0], outs[1]);
}
