//! End-to-end conversion: target embedding from enrollment audio, then
//! source audio through extraction, grouping, synthesis and phase
//! reconstruction.

use std::fmt::Write as _;

use crate::config::{RunConfig, SUBSAMPLE};
use crate::corpus::{tokens_to_string, Dataset};
use crate::dsp::{
    griffin_lim, mel_spectrogram, normalize_pitch, speaker_pitch_stats, yin_pitch,
    SpeakerPitchStats, Waveform, HOP,
};
use crate::error::{Error, Result};
use crate::grouper::{group_content, segment_pitch};
use crate::losses::BLANK;
use crate::sre::{SpeakerEmbedding, Sre};
use crate::synth::{Mode, Synthesizer};

/// Mean of the per-slice embeddings over non-overlapping `slice_s` windows,
/// renormalized. A trailing partial slice is dropped.
pub fn target_speaker_embedding(
    sre: &Sre,
    audio: &Waveform,
    min_s: f64,
    slice_s: f64,
) -> Result<SpeakerEmbedding> {
    if !(slice_s > 0.0) {
        return Err(Error::Config("slice length must be positive".into()));
    }
    if audio.duration_s() + 1e-9 < min_s {
        return Err(Error::Audio(format!(
            "insufficient target audio: {:.2} s, need at least {min_s} s",
            audio.duration_s()
        )));
    }
    let slice = (slice_s * audio.sample_rate() as f64).round() as usize;
    let n = audio.len() / slice;
    if n == 0 {
        return Err(Error::Audio(
            "target audio is shorter than one slice".into(),
        ));
    }
    let embeddings = (0..n)
        .map(|i| {
            let mel = mel_spectrogram(&audio.slice(i * slice, slice)?)?;
            Ok(sre.extract(&mel)?.1)
        })
        .collect::<Result<Vec<_>>>()?;
    SpeakerEmbedding::mean(&embeddings)
}

/// Sidecar data describing one conversion.
#[derive(Clone, Debug, PartialEq)]
pub struct ConversionReport {
    pub mode: Mode,
    pub source_frames: usize,
    pub output_frames: usize,
    pub tokens: Vec<usize>,
    pub durations: Vec<usize>,
    pub source_pitch: SpeakerPitchStats,
    pub group_pitch: Vec<f32>,
    pub output_samples: usize,
}

impl ConversionReport {
    /// Line-oriented `key: value` text.
    pub fn to_text(&self) -> String {
        let join = |v: &mut dyn Iterator<Item = String>| v.collect::<Vec<_>>().join(" ");
        let mut s = String::new();
        let _ = writeln!(s, "mode: {}", self.mode);
        let _ = writeln!(s, "source_frames: {}", self.source_frames);
        let _ = writeln!(s, "output_frames: {}", self.output_frames);
        let _ = writeln!(s, "output_samples: {}", self.output_samples);
        let _ = writeln!(s, "groups: {}", self.tokens.len());
        let _ = writeln!(s, "transcript: {}", tokens_to_string(&self.tokens));
        let _ = writeln!(
            s,
            "tokens: {}",
            join(&mut self.tokens.iter().map(|t| t.to_string()))
        );
        let _ = writeln!(
            s,
            "durations: {}",
            join(&mut self.durations.iter().map(|d| d.to_string()))
        );
        let _ = writeln!(s, "source_f0_mean_hz: {:.3}", self.source_pitch.mean_hz);
        let _ = writeln!(s, "source_f0_std_hz: {:.3}", self.source_pitch.std_hz);
        let _ = writeln!(
            s,
            "group_pitch: {}",
            join(&mut self.group_pitch.iter().map(|p| format!("{p:.4}")))
        );
        s
    }
}

#[derive(Clone, Debug)]
pub struct Conversion {
    pub wave: Waveform,
    pub report: ConversionReport,
}

/// Converts `source` to the voice carried by `target`. Source pitch is
/// normalized by statistics of the source utterance itself.
pub fn convert(
    sre: &Sre,
    synth: &Synthesizer,
    source: &Waveform,
    target: &SpeakerEmbedding,
    mode: Mode,
    griffin_lim_iters: usize,
) -> Result<Conversion> {
    let mel = mel_spectrogram(source)?;
    let (content, _) = sre.extract(&mel)?;
    let mut grouped = group_content(&content)?;
    if grouped.tokens.iter().all(|&t| t == BLANK) {
        return Err(Error::Data("no content detected".into()));
    }
    let f0 = yin_pitch(source);
    let stats = speaker_pitch_stats(std::slice::from_ref(&f0))?;
    grouped.group_pitch =
        segment_pitch(&normalize_pitch(&f0, &stats), &grouped.durations, SUBSAMPLE)?;
    let out = synth.infer(&grouped, target, mode)?;
    let wave = griffin_lim(&out.mel, griffin_lim_iters);
    debug_assert_eq!(wave.len(), out.mel.n_frames() * HOP);
    let report = ConversionReport {
        mode,
        source_frames: mel.n_frames(),
        output_frames: out.mel.n_frames(),
        tokens: grouped.tokens,
        durations: out.durations,
        source_pitch: stats,
        group_pitch: out.pitch,
        output_samples: wave.len(),
    };
    Ok(Conversion { wave, report })
}

/// Concatenation of the given utterances, in order, stopping once `min_s`
/// seconds are collected.
pub fn enrollment_audio(data: &Dataset, utterances: &[usize], min_s: f64) -> Result<Waveform> {
    let mut parts = Vec::new();
    let mut total = 0.0;
    for &i in utterances {
        if total >= min_s {
            break;
        }
        let w = &data.examples[i].wave;
        total += w.duration_s();
        parts.push(w.clone());
    }
    if total + 1e-9 < min_s {
        return Err(Error::Audio(format!(
            "insufficient target audio: {total:.2} s, need at least {min_s} s"
        )));
    }
    Waveform::concat(&parts)
}

/// Lowest and highest mean-f0 speakers among those with voiced audio.
pub fn extreme_speakers(stats: &[Option<SpeakerPitchStats>]) -> Option<(usize, usize)> {
    let voiced: Vec<(usize, f64)> = stats
        .iter()
        .enumerate()
        .filter_map(|(i, s)| Some((i, s.as_ref()?.mean_hz)))
        .collect();
    let low = voiced.iter().min_by(|a, b| a.1.total_cmp(&b.1))?.0;
    let high = voiced.iter().max_by(|a, b| a.1.total_cmp(&b.1))?.0;
    (low != high).then_some((low, high))
}

/// One cross-speaker conversion with its pitch outcome.
#[derive(Clone, Debug)]
pub struct VcTrial {
    pub source: usize,
    pub source_speaker: usize,
    pub target_speaker: usize,
    pub conversion: Conversion,
    /// Voiced-frame mean f0 of the converted audio.
    pub output_f0_hz: Option<f64>,
}

impl VcTrial {
    /// Whether the output mean f0 lies strictly closer to the target
    /// speaker's mean than to the source speaker's.
    pub fn closer_to_target(&self, stats: &[Option<SpeakerPitchStats>]) -> Option<bool> {
        let out = self.output_f0_hz?;
        let src = stats[self.source_speaker]?.mean_hz;
        let tgt = stats[self.target_speaker]?.mean_hz;
        Some((out - tgt).abs() < (out - src).abs())
    }
}

/// Converts each `(example, target speaker)` pair, embedding each target
/// once from its `enrollment` utterances.
pub fn run_vc_trials(
    sre: &Sre,
    synth: &Synthesizer,
    data: &Dataset,
    pairs: &[(usize, usize)],
    enrollment: &[Vec<usize>],
    cfg: &RunConfig,
    mode: Mode,
) -> Result<Vec<VcTrial>> {
    let e = &cfg.eval;
    let mut cache: Vec<Option<SpeakerEmbedding>> = vec![None; data.n_speakers()];
    let mut out = Vec::with_capacity(pairs.len());
    for &(src, tgt) in pairs {
        if cache[tgt].is_none() {
            let audio = enrollment_audio(data, &enrollment[tgt], e.target_seconds)?;
            cache[tgt] = Some(target_speaker_embedding(
                sre,
                &audio,
                e.target_seconds,
                e.slice_seconds,
            )?);
        }
        let target = cache[tgt].as_ref().expect("cached above");
        let ex = &data.examples[src];
        let conversion = convert(
            sre,
            synth,
            &ex.wave,
            target,
            mode,
            cfg.dsp.griffin_lim_iters,
        )?;
        let output_f0_hz = yin_pitch(&conversion.wave).voiced_mean();
        out.push(VcTrial {
            source: src,
            source_speaker: ex.speaker,
            target_speaker: tgt,
            conversion,
            output_f0_hz,
        });
    }
    Ok(out)
}
