use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use acevc_core::config::RunConfig;
use acevc_core::corpus::{generate_toy_corpus, tokens_to_string, Dataset};
use acevc_core::dsp::{ingest_audio, mel_spectrogram, write_wav, Waveform};
use acevc_core::eval::{equal_error_rate, probe_extractor, transcribe_cer, TrialSet};
use acevc_core::grouper::group_content;
use acevc_core::losses::ctc_greedy_decode;
use acevc_core::pipeline::{
    convert, enrollment_audio, extreme_speakers, run_vc_trials, target_speaker_embedding,
};
use acevc_core::sre::Sre;
use acevc_core::synth::{Mode, Synthesizer};
use acevc_core::train::{speaker_stats, stream, synth_examples, train_sre, train_synth, Stream};
use acevc_core::Error;
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::Rng;

use crate::run_dir::RunDir;

#[derive(Parser, Debug)]
#[command(
    name = "acevc",
    version,
    about = "Voice conversion with disentangled speech representations"
)]
pub struct Cli {
    /// TOML config with [dsp], [sre], [synth], [train] and [eval] sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides train.seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory name under the output root; defaults to the command name.
    #[arg(long, global = true)]
    pub run: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the synthetic multi-speaker corpus.
    GenCorpus(GenCorpus),
    /// Train the representation extractor.
    TrainSre(TrainSre),
    /// Train the synthesizer on a trained extractor's representations.
    TrainSynth(TrainSynth),
    /// Print content groups and the speaker embedding of one file.
    Extract(Extract),
    /// Convert a source utterance to a target speaker's voice.
    Convert(Convert),
    /// Speaker-probe accuracy on content and speaker embeddings.
    EvalProbe(EvalProbe),
    /// Cross-speaker conversion trials: pitch direction, CER and SV-EER.
    EvalVc(EvalVc),
}

#[derive(Args, Debug)]
pub struct GenCorpus {
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub speakers: usize,
    #[arg(long, default_value_t = 30)]
    pub utts: usize,
}

#[derive(Args, Debug)]
pub struct TrainSre {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Drop the disentanglement term (beta = 0).
    #[arg(long)]
    pub no_disentangle: bool,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainSynth {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub sre: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct Extract {
    #[arg(long)]
    pub sre: PathBuf,
    #[arg(long)]
    pub wav: PathBuf,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct Convert {
    #[arg(long, default_value = "adaptive")]
    pub mode: Mode,
    #[arg(long)]
    pub src: PathBuf,
    /// Directory of WAV files from the target speaker, read in name order.
    #[arg(long)]
    pub target_dir: PathBuf,
    #[arg(long)]
    pub sre: PathBuf,
    #[arg(long)]
    pub synth: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalProbe {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub sre: PathBuf,
    /// Extractor trained without the disentanglement term, for the ablation row.
    #[arg(long)]
    pub ablation: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalVc {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub sre: PathBuf,
    #[arg(long)]
    pub synth: PathBuf,
    /// Independently trained extractor used for transcription and speaker scoring.
    #[arg(long)]
    pub scorer: Option<PathBuf>,
    #[arg(long, default_value = "adaptive")]
    pub mode: Mode,
    #[arg(long)]
    pub trials: Option<usize>,
}

/// Remediation text for common failures.
pub fn hint(e: &anyhow::Error) -> Option<&'static str> {
    match e.downcast_ref::<Error>()? {
        Error::Config(_) => Some("check the --config file; omitted keys take their defaults and unknown keys are rejected"),
        Error::Nn(_) => Some("the checkpoint is missing, corrupt or of the wrong kind; train it with train-sre or train-synth"),
        Error::Io(_) => Some("check that the input paths exist and the output directory is writable"),
        Error::Data(_) => Some("check the corpus manifest and speaker table; gen-corpus writes a valid pair"),
        Error::Audio(_) => Some("inputs must be 8-48 kHz PCM or float WAV with enough voiced speech"),
        _ => None,
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn load_sre(path: &Path) -> Result<Sre> {
    if !path.is_file() {
        bail!(Error::Io(format!(
            "missing checkpoint {}; produce one with train-sre",
            path.display()
        )));
    }
    Ok(Sre::load(path)
        .with_context(|| format!("loading extractor {}", path.display()))?
        .0)
}

fn load_synth(path: &Path) -> Result<Synthesizer> {
    if !path.is_file() {
        bail!(Error::Io(format!(
            "missing checkpoint {}; produce one with train-synth",
            path.display()
        )));
    }
    Ok(Synthesizer::load(path)
        .with_context(|| format!("loading synthesizer {}", path.display()))?
        .0)
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve_config(&cli)?;
    let name = |default: &str| cli.run.clone().unwrap_or_else(|| default.to_string());
    match &cli.command {
        Command::GenCorpus(a) => {
            let mut rd = RunDir::create(&name("gen-corpus"), &cfg)?;
            let corpus = generate_toy_corpus(&a.out, a.speakers, a.utts, cfg.train.seed)?;
            rd.output("manifest", &corpus.manifest);
            rd.output("speakers", &a.out.join(acevc_core::corpus::SPEAKERS_FILE));
            for u in &corpus.utterances {
                rd.output("wav", &u.path);
            }
            rd.finish("gen-corpus", cfg.train.seed)?;
            println!(
                "wrote {} utterances to {}",
                corpus.utterances.len(),
                a.out.display()
            );
        }
        Command::TrainSre(a) => {
            if a.no_disentangle {
                cfg.train.beta = 0.0;
            }
            if let Some(s) = a.steps {
                cfg.train.sre_steps = s;
            }
            let mut rd = RunDir::create(&name("train-sre"), &cfg)?;
            let data = Dataset::load(&a.corpus, None)?;
            let (train, _) = data.split(cfg.eval.train_per_speaker, cfg.eval.test_per_speaker)?;
            let mut log = String::new();
            let (sre, adam) = train_sre(&cfg, &data, &train, |step, l| {
                let _ = writeln!(
                    log,
                    "step: {step} content: {:.6} sv: {:.6} disentangle: {:.6} total: {:.6}",
                    l.content, l.sv, l.disentangle, l.total
                );
            })?;
            let ckpt = rd.file("sre.ckpt");
            sre.save(&ckpt, &adam)?;
            std::fs::write(rd.file("losses.txt"), log)?;
            rd.input(
                "manifest",
                &a.corpus.join(acevc_core::corpus::MANIFEST_FILE),
            );
            rd.output("sre", &ckpt);
            rd.finish("train-sre", cfg.train.seed)?;
            println!("{}", ckpt.display());
        }
        Command::TrainSynth(a) => {
            if let Some(s) = a.steps {
                cfg.train.synth_steps = s;
            }
            let mut rd = RunDir::create(&name("train-synth"), &cfg)?;
            let sre = load_sre(&a.sre)?;
            let data = Dataset::load(&a.corpus, None)?;
            let (train, _) = data.split(cfg.eval.train_per_speaker, cfg.eval.test_per_speaker)?;
            let examples = synth_examples(&sre, &data, &train)?;
            let mut log = String::new();
            let (synth, adam) = train_synth(&cfg, &examples, |step, l| {
                let _ = writeln!(
                    log,
                    "step: {step} mel: {:.6} pitch: {:.6} duration: {:.6} total: {:.6}",
                    l.mel, l.pitch, l.duration, l.total
                );
            })?;
            let ckpt = rd.file("synth.ckpt");
            synth.save(&ckpt, &adam)?;
            std::fs::write(rd.file("losses.txt"), log)?;
            rd.input(
                "manifest",
                &a.corpus.join(acevc_core::corpus::MANIFEST_FILE),
            );
            rd.input("sre", &a.sre);
            rd.output("synth", &ckpt);
            rd.finish("train-synth", cfg.train.seed)?;
            println!("{}", ckpt.display());
        }
        Command::Extract(a) => {
            let mut rd = RunDir::create(&name("extract"), &cfg)?;
            let sre = load_sre(&a.sre)?;
            let wave = ingest_audio(&a.wav)?;
            let (content, speaker) = sre.extract(&mel_spectrogram(&wave)?)?;
            let grouped = group_content(&content)?;
            let join = |v: Vec<String>| v.join(" ");
            let mut s = String::new();
            let _ = writeln!(s, "content_steps: {}", content.len());
            let _ = writeln!(
                s,
                "transcript: {}",
                tokens_to_string(&ctc_greedy_decode(&content.p_c))
            );
            let _ = writeln!(
                s,
                "group_tokens: {}",
                join(grouped.tokens.iter().map(|t| t.to_string()).collect())
            );
            let _ = writeln!(
                s,
                "group_durations: {}",
                join(grouped.durations.iter().map(|d| d.to_string()).collect())
            );
            let _ = writeln!(
                s,
                "speaker_embedding: {}",
                join(speaker.z_s.iter().map(|v| format!("{v:.6}")).collect())
            );
            let out = a.out.clone().unwrap_or_else(|| rd.file("extract.txt"));
            std::fs::write(&out, &s)?;
            rd.input("wav", &a.wav);
            rd.input("sre", &a.sre);
            rd.output("extract", &out);
            rd.finish("extract", cfg.train.seed)?;
            print!("{s}");
        }
        Command::Convert(a) => {
            let mut rd = RunDir::create(&name("convert"), &cfg)?;
            let sre = load_sre(&a.sre)?;
            let synth = load_synth(&a.synth)?;
            let source = ingest_audio(&a.src)?;
            let target_files = wav_files(&a.target_dir)?;
            let parts = target_files
                .iter()
                .map(|p| Ok(ingest_audio(p)?))
                .collect::<Result<Vec<Waveform>>>()?;
            let target_audio = Waveform::concat(&parts)?;
            let e = &cfg.eval;
            let target =
                target_speaker_embedding(&sre, &target_audio, e.target_seconds, e.slice_seconds)?;
            let conv = convert(
                &sre,
                &synth,
                &source,
                &target,
                a.mode,
                cfg.dsp.griffin_lim_iters,
            )?;
            write_wav(&a.out, &conv.wave)?;
            let report = a.out.with_extension("report.txt");
            std::fs::write(&report, conv.report.to_text())?;
            rd.input("src", &a.src);
            for p in &target_files {
                rd.input("target", p);
            }
            rd.input("sre", &a.sre);
            rd.input("synth", &a.synth);
            rd.output("wav", &a.out);
            rd.output("report", &report);
            rd.finish("convert", cfg.train.seed)?;
            println!("{}", a.out.display());
        }
        Command::EvalProbe(a) => {
            let mut rd = RunDir::create(&name("eval-probe"), &cfg)?;
            let data = Dataset::load(&a.corpus, None)?;
            let (train, test) =
                data.split(cfg.eval.train_per_speaker, cfg.eval.test_per_speaker)?;
            let seed = stream(cfg.train.seed, Stream::Probe).gen();
            let main = probe_extractor(&load_sre(&a.sre)?, &data, &train, &test, &cfg.eval, seed)?;
            let mut s = String::new();
            let _ = writeln!(s, "speaker_embedding_accuracy: {:.4}", main.speaker);
            let _ = writeln!(s, "content_embedding_accuracy: {:.4}", main.content);
            rd.input("sre", &a.sre);
            if let Some(path) = &a.ablation {
                let abl = probe_extractor(&load_sre(path)?, &data, &train, &test, &cfg.eval, seed)?;
                let _ = writeln!(s, "ablation_content_embedding_accuracy: {:.4}", abl.content);
                let _ = writeln!(s, "ablation_speaker_embedding_accuracy: {:.4}", abl.speaker);
                let trend = main.speaker > abl.content && abl.content > main.content;
                let _ = writeln!(s, "trend_holds: {trend}");
                rd.input("ablation", path);
            }
            std::fs::write(rd.file("metrics.txt"), &s)?;
            rd.output("metrics", &rd.file("metrics.txt"));
            rd.finish("eval-probe", cfg.train.seed)?;
            print!("{s}");
        }
        Command::EvalVc(a) => {
            let mut rd = RunDir::create(&name("eval-vc"), &cfg)?;
            let sre = load_sre(&a.sre)?;
            let synth = load_synth(&a.synth)?;
            let scorer = a.scorer.as_deref().map(load_sre).transpose()?;
            let data = Dataset::load(&a.corpus, None)?;
            let (train, test) =
                data.split(cfg.eval.train_per_speaker, cfg.eval.test_per_speaker)?;
            let stats = speaker_stats(&data, &train)?;
            let (low, high) =
                extreme_speakers(&stats).context("need two speakers with voiced audio")?;
            let by_spk = data.by_speaker();
            let mut enrollment = vec![Vec::new(); data.n_speakers()];
            for &i in &test {
                enrollment[data.examples[i].speaker].push(i);
            }
            let n = a.trials.unwrap_or(cfg.eval.trials);
            let pairs: Vec<(usize, usize)> = (0..n)
                .map(|k| {
                    let (src, tgt) = if k % 2 == 0 { (low, high) } else { (high, low) };
                    (by_spk[src][(k / 2) % by_spk[src].len()], tgt)
                })
                .collect();
            let trials = run_vc_trials(&sre, &synth, &data, &pairs, &enrollment, &cfg, a.mode)?;
            let asr = scorer.as_ref().unwrap_or(&sre);
            let mut closer = 0usize;
            let mut cer = 0.0;
            let mut details = String::new();
            for t in &trials {
                let hit = t.closer_to_target(&stats).unwrap_or(false);
                closer += usize::from(hit);
                let c = transcribe_cer(asr, &data.examples[t.source].wave, &t.conversion.wave)?;
                cer += c;
                let _ = writeln!(
                    details,
                    "trial: source={} target_speaker={} output_f0_hz={} closer_to_target={hit} cer={c:.4}",
                    data.examples[t.source].utterance.path.display(),
                    data.speakers[t.target_speaker].name,
                    t.output_f0_hz.map_or("unvoiced".to_string(), |f| format!("{f:.2}")),
                );
            }
            let mut s = String::new();
            let _ = writeln!(s, "mode: {}", a.mode);
            let _ = writeln!(s, "trials: {}", trials.len());
            let _ = writeln!(
                s,
                "source_speakers: {} {}",
                data.speakers[low].name, data.speakers[high].name
            );
            let _ = writeln!(
                s,
                "f0_closer_to_target_fraction: {:.4}",
                closer as f64 / trials.len().max(1) as f64
            );
            let _ = writeln!(s, "mean_cer: {:.4}", cer / trials.len().max(1) as f64);
            if let Some(sc) = &scorer {
                let e = &cfg.eval;
                let mut set = TrialSet::default();
                for t in &trials {
                    let converted = sc.extract(&mel_spectrogram(&t.conversion.wave)?)?.1;
                    for (spk, same) in [(t.target_speaker, true), (t.source_speaker, false)] {
                        let audio = enrollment_audio(&data, &enrollment[spk], e.target_seconds)?;
                        let reference = target_speaker_embedding(
                            sc,
                            &audio,
                            e.target_seconds,
                            e.slice_seconds,
                        )?;
                        set.pairs.push((converted.z_s.clone(), reference.z_s, same));
                    }
                }
                let _ = writeln!(s, "sv_eer: {:.4}", equal_error_rate(&set)?);
                rd.input("scorer", a.scorer.as_deref().expect("scorer present"));
            }
            std::fs::write(rd.file("metrics.txt"), &s)?;
            std::fs::write(rd.file("trials.txt"), details)?;
            rd.input("sre", &a.sre);
            rd.input("synth", &a.synth);
            rd.output("metrics", &rd.file("metrics.txt"));
            rd.output("trials", &rd.file("trials.txt"));
            rd.finish("eval-vc", cfg.train.seed)?;
            print!("{s}");
        }
    }
    Ok(())
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading target directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!(Error::Audio(format!("no WAV files in {}", dir.display())));
    }
    Ok(files)
}
