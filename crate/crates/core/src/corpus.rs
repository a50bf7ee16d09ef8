//! Manifests, speaker tables and the synthetic multi-speaker toy corpus.
//!
//! A manifest holds one `path|transcript|speaker|duration` record per line,
//! paths relative to the manifest's directory. The speaker table beside it
//! (`speakers.txt`) lists one speaker per line as
//! `name|f0|jitter|timbre1|timbre2|rate`; a speaker's line
//! index is its class label.

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::{
    ingest_audio, mel_spectrogram, write_wav, yin_pitch, MelSpectrogram, PitchContour, Waveform,
    SAMPLE_RATE,
};
use crate::error::{Error, Result};

/// Token alphabet; token `i + 1` renders as `ALPHABET[i]`, 0 is the CTC blank.
pub const ALPHABET: [char; 5] = ['a', 'e', 'i', 'o', 'u'];
pub const VOCAB: usize = ALPHABET.len() + 1;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const SPEAKERS_FILE: &str = "speakers.txt";

/// (F1, F2) in Hz for each token before speaker scaling.
const TOKEN_FORMANTS: [(f64, f64); 5] = [
    (730.0, 1090.0),
    (530.0, 1840.0),
    (300.0, 2290.0),
    (570.0, 840.0),
    (320.0, 870.0),
];
const F0_RANGE: (f64, f64) = (90.0, 320.0);
pub const MIN_F0_SPACING: f64 = 15.0;
const TOKENS_PER_UTT: (usize, usize) = (8, 12);
const TOKEN_MS: (f64, f64) = (120.0, 250.0);
const GAP_MS: f64 = 35.0;
const EDGE_MS: f64 = 120.0;
const RAMP_MS: f64 = 12.0;
const PEAK: f32 = 0.6;
const NOISE: f64 = 1e-3;
const MAX_HARMONIC_HZ: f64 = 7600.0;
/// Samples per block sharing one set of harmonic amplitudes.
const BLOCK: usize = 32;

pub fn token_char(token: usize) -> Result<char> {
    token
        .checked_sub(1)
        .and_then(|i| ALPHABET.get(i).copied())
        .ok_or_else(|| Error::Data(format!("token id {token} has no character")))
}

pub fn token_id(c: char) -> Option<usize> {
    ALPHABET.iter().position(|&a| a == c).map(|i| i + 1)
}

pub fn tokens_to_string(tokens: &[usize]) -> String {
    tokens.iter().filter_map(|&t| token_char(t).ok()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub path: PathBuf,
    pub transcript: String,
    pub speaker: String,
    pub duration_s: f64,
}

impl Utterance {
    pub fn tokens(&self) -> Vec<usize> {
        self.transcript.chars().filter_map(token_id).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToySpeakerSpec {
    pub name: String,
    pub f0_hz: f64,
    /// Relative depth of the slow f0 drift.
    pub jitter: f64,
    /// Speaker-fixed resonances, Hz.
    pub timbre: [f64; 2],
    /// Speaking-rate multiplier; token durations are divided by it.
    pub rate: f64,
}

impl ToySpeakerSpec {
    fn to_line(&self) -> String {
        format!(
            "{}|{}|{}|{}|{}|{}",
            self.name, self.f0_hz, self.jitter, self.timbre[0], self.timbre[1], self.rate
        )
    }

    fn parse(line: &str, lineno: usize) -> Result<Self> {
        let f: Vec<&str> = line.split('|').collect();
        let bad = |what: &str| Error::Data(format!("speakers line {lineno}: {what}"));
        if f.len() != 6 {
            return Err(bad("expected 6 fields"));
        }
        let num = |i: usize| {
            f[i].trim()
                .parse::<f64>()
                .map_err(|_| bad(&format!("field {} is not a number", i + 1)))
        };
        Ok(Self {
            name: f[0].trim().to_string(),
            f0_hz: num(1)?,
            jitter: num(2)?,
            timbre: [num(3)?, num(4)?],
            rate: num(5)?,
        })
    }
}

pub fn load_speakers(path: &Path) -> Result<Vec<ToySpeakerSpec>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| ToySpeakerSpec::parse(l, i + 1))
        .collect()
}

/// Validated records. When `duration_s` is given, records outside the
/// inclusive range are dropped.
pub fn load_manifest(
    path: &Path,
    speakers: &[String],
    duration_s: Option<(f64, f64)>,
) -> Result<Vec<Utterance>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: String| Error::Data(format!("manifest line {}: {what}", i + 1));
        let f: Vec<&str> = line.split('|').collect();
        if f.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", f.len())));
        }
        let transcript = f[1].trim().to_string();
        if let Some(c) = transcript.chars().find(|&c| token_id(c).is_none()) {
            return Err(bad(format!("out-of-vocabulary token '{c}'")));
        }
        let speaker = f[2].trim().to_string();
        if !speakers.contains(&speaker) {
            return Err(bad(format!("unknown speaker '{speaker}'")));
        }
        let dur: f64 = f[3]
            .trim()
            .parse()
            .ok()
            .filter(|d: &f64| d.is_finite() && *d >= 0.0)
            .ok_or_else(|| bad(format!("bad duration '{}'", f[3].trim())))?;
        let rel = PathBuf::from(f[0].trim());
        let audio = if rel.is_absolute() {
            rel
        } else {
            base.join(rel)
        };
        if !audio.is_file() {
            return Err(bad(format!("missing file {}", audio.display())));
        }
        if let Some((lo, hi)) = duration_s {
            if dur < lo || dur > hi {
                continue;
            }
        }
        out.push(Utterance {
            path: audio,
            transcript,
            speaker,
            duration_s: dur,
        });
    }
    Ok(out)
}

/// Speakers with base f0 spread over [90, 320] Hz at least 15 Hz apart,
/// in random order.
pub fn toy_speakers(n: usize, rng: &mut impl Rng) -> Result<Vec<ToySpeakerSpec>> {
    if n < 2 {
        return Err(Error::Data("toy corpus needs at least 2 speakers".into()));
    }
    let spacing = (F0_RANGE.1 - F0_RANGE.0) / (n - 1) as f64;
    if spacing < MIN_F0_SPACING {
        return Err(Error::Data(format!(
            "at most 16 toy speakers fit the f0 range, asked for {n}"
        )));
    }
    let slack = ((spacing - MIN_F0_SPACING) / 2.0).min(4.0);
    let mut f0s: Vec<f64> = (0..n)
        .map(|i| {
            let centre = F0_RANGE.0 + spacing * i as f64;
            (centre + rng.gen_range(-slack..=slack)).clamp(F0_RANGE.0, F0_RANGE.1)
        })
        .collect();
    f0s.shuffle(rng);
    Ok(f0s
        .into_iter()
        .enumerate()
        .map(|(i, f0)| ToySpeakerSpec {
            name: format!("spk{i}"),
            f0_hz: (f0 * 100.0).round() / 100.0,
            jitter: 0.02,
            timbre: [
                round3(rng.gen_range(2400.0..2900.0)),
                round3(rng.gen_range(3000.0..3500.0)),
            ],
            rate: round3(rng.gen_range(0.75..1.3)),
        })
        .collect())
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

fn resonance(f: f64, centre: f64, bandwidth: f64) -> f64 {
    let x = (f - centre) / bandwidth;
    1.0 / (1.0 + x * x)
}

/// Spectral envelope: token formants, fixed speaker resonances and a gentle
/// high-frequency tilt.
fn envelope(f: f64, formants: (f64, f64), spk: &ToySpeakerSpec) -> f64 {
    let tilt = 1.0 / (1.0 + f / 1500.0);
    let peaks = resonance(f, formants.0, 90.0)
        + 0.7 * resonance(f, formants.1, 120.0)
        + 0.25 * resonance(f, spk.timbre[0], 200.0)
        + 0.2 * resonance(f, spk.timbre[1], 250.0);
    tilt * (0.02 + peaks)
}

/// Rendered audio plus the sample span of each token.
#[derive(Clone, Debug)]
pub struct Rendered {
    pub wave: Waveform,
    pub segments: Vec<(usize, usize)>,
}

/// Harmonic-source rendering of `tokens` in the voice of `spk`. Tokens are
/// separated by short gaps so repeated tokens stay distinguishable.
pub fn render_utterance(
    spk: &ToySpeakerSpec,
    tokens: &[usize],
    rng: &mut impl Rng,
) -> Result<Rendered> {
    let sr = SAMPLE_RATE as f64;
    let ms = |m: f64| (m * sr / 1000.0).round() as usize;
    let mut segments = Vec::with_capacity(tokens.len());
    let mut pos = ms(EDGE_MS);
    for (i, &t) in tokens.iter().enumerate() {
        token_char(t)?;
        let len = ms(rng.gen_range(TOKEN_MS.0..=TOKEN_MS.1) / spk.rate);
        segments.push((pos, pos + len));
        pos += len;
        if i + 1 < tokens.len() {
            pos += ms(GAP_MS / spk.rate);
        }
    }
    let total = pos + ms(EDGE_MS);
    let ramp = ms(RAMP_MS).max(1);
    let drift_rate = rng.gen_range(1.5..3.0);
    let drift_phase = rng.gen_range(0.0..TAU);

    // Per-sample gain and formant targets; formants glide across gaps.
    let mut gain = vec![0.0f64; total];
    let mut formants = vec![(0.0f64, 0.0f64); total];
    for (k, (&(a, b), &t)) in segments.iter().zip(tokens).enumerate() {
        let target = TOKEN_FORMANTS[t - 1];
        let lo = if k == 0 {
            0
        } else {
            (segments[k - 1].1 + a) / 2
        };
        let hi = if k + 1 == segments.len() {
            total
        } else {
            (b + segments[k + 1].0) / 2
        };
        formants[lo..hi].iter_mut().for_each(|f| *f = target);
        for (j, g) in gain[a..b].iter_mut().enumerate() {
            let edge = j.min(b - a - 1 - j);
            *g = (edge as f64 / ramp as f64).min(1.0);
        }
    }

    let mut phase = 0.0f64;
    let mut out = vec![0.0f64; total];
    let mut amps = Vec::new();
    for start in (0..total).step_by(BLOCK) {
        let end = (start + BLOCK).min(total);
        let mid = (start + end) / 2;
        let t = mid as f64 / sr;
        let f0 = spk.f0_hz * (1.0 + spk.jitter * (TAU * drift_rate * t + drift_phase).sin());
        let n_harm = (MAX_HARMONIC_HZ / f0).floor() as usize;
        amps.clear();
        amps.extend((1..=n_harm).map(|h| envelope(h as f64 * f0, formants[mid], spk)));
        for s in start..end {
            phase = (phase + TAU * f0 / sr) % TAU;
            if gain[s] == 0.0 {
                continue;
            }
            let v: f64 = amps
                .iter()
                .enumerate()
                .map(|(h, a)| a * ((h + 1) as f64 * phase).sin())
                .sum();
            out[s] = gain[s] * v;
        }
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let samples = out
        .iter()
        .map(|&v| (v / peak * PEAK as f64 + NOISE * rng.gen_range(-1.0..1.0)) as f32)
        .collect();
    Ok(Rendered {
        wave: Waveform::new(samples, SAMPLE_RATE)?,
        segments,
    })
}

/// Paths of a generated corpus.
#[derive(Clone, Debug)]
pub struct ToyCorpus {
    pub dir: PathBuf,
    pub manifest: PathBuf,
    pub speakers: Vec<ToySpeakerSpec>,
    pub utterances: Vec<Utterance>,
}

/// Writes `n_speakers × n_utts` WAV files plus manifest and speaker table
/// under `dir`. Identical arguments produce bit-identical files.
pub fn generate_toy_corpus(
    dir: &Path,
    n_speakers: usize,
    n_utts: usize,
    seed: u64,
) -> Result<ToyCorpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let speakers = toy_speakers(n_speakers, &mut rng)?;
    std::fs::create_dir_all(dir.join("wav"))?;
    let mut manifest = String::new();
    let mut utterances = Vec::new();
    for (si, spk) in speakers.iter().enumerate() {
        let mut srng = ChaCha8Rng::seed_from_u64(seed);
        srng.set_stream(si as u64 + 1);
        for ui in 0..n_utts {
            let n = srng.gen_range(TOKENS_PER_UTT.0..=TOKENS_PER_UTT.1);
            let tokens: Vec<usize> = (0..n).map(|_| srng.gen_range(1..VOCAB)).collect();
            let r = render_utterance(spk, &tokens, &mut srng)?;
            let rel = format!("wav/{}_{ui:03}.wav", spk.name);
            let path = dir.join(&rel);
            write_wav(&path, &r.wave)?;
            let transcript = tokens_to_string(&tokens);
            let dur = r.wave.duration_s();
            writeln!(manifest, "{rel}|{transcript}|{}|{dur:.4}", spk.name).expect("string write");
            utterances.push(Utterance {
                path,
                transcript,
                speaker: spk.name.clone(),
                duration_s: dur,
            });
        }
    }
    let manifest_path = dir.join(MANIFEST_FILE);
    std::fs::write(&manifest_path, manifest)?;
    let table: String = speakers.iter().map(|s| s.to_line() + "\n").collect();
    std::fs::write(dir.join(SPEAKERS_FILE), table)?;
    Ok(ToyCorpus {
        dir: dir.to_path_buf(),
        manifest: manifest_path,
        speakers,
        utterances,
    })
}

/// An utterance decoded into model-ready features.
#[derive(Clone, Debug)]
pub struct Example {
    pub utterance: Utterance,
    pub speaker: usize,
    pub tokens: Vec<usize>,
    pub wave: Waveform,
    pub mel: MelSpectrogram,
    pub f0: PitchContour,
}

/// A manifest plus its speaker table, audio decoded.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub speakers: Vec<ToySpeakerSpec>,
    pub examples: Vec<Example>,
}

impl Dataset {
    /// Loads `dir/manifest.txt` against `dir/speakers.txt`.
    pub fn load(dir: &Path, duration_s: Option<(f64, f64)>) -> Result<Self> {
        let speakers = load_speakers(&dir.join(SPEAKERS_FILE))?;
        let names: Vec<String> = speakers.iter().map(|s| s.name.clone()).collect();
        let utts = load_manifest(&dir.join(MANIFEST_FILE), &names, duration_s)?;
        let mut examples = Vec::with_capacity(utts.len());
        for u in utts {
            let wave = ingest_audio(&u.path)?;
            let mel = mel_spectrogram(&wave)?;
            let f0 = yin_pitch(&wave);
            examples.push(Example {
                speaker: names
                    .iter()
                    .position(|n| *n == u.speaker)
                    .expect("validated speaker"),
                tokens: u.tokens(),
                wave,
                mel,
                f0,
                utterance: u,
            });
        }
        Ok(Self { speakers, examples })
    }

    pub fn n_speakers(&self) -> usize {
        self.speakers.len()
    }

    /// Indices of each speaker's examples in manifest order.
    pub fn by_speaker(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.speakers.len()];
        for (i, e) in self.examples.iter().enumerate() {
            out[e.speaker].push(i);
        }
        out
    }

    /// Per speaker, the first `n_train` examples for training and the next
    /// `n_test` held out. Fails if any speaker has too few examples.
    pub fn split(&self, n_train: usize, n_test: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (s, idx) in self.by_speaker().iter().enumerate() {
            if idx.len() < n_train + n_test {
                return Err(Error::Data(format!(
                    "speaker {} has {} utterances, split needs {}",
                    self.speakers[s].name,
                    idx.len(),
                    n_train + n_test
                )));
            }
            train.extend_from_slice(&idx[..n_train]);
            test.extend_from_slice(&idx[n_train..n_train + n_test]);
        }
        Ok((train, test))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn speakers_are_spread_in_f0() {
        let s = toy_speakers(16, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        for a in &s {
            assert!((90.0..=320.0).contains(&a.f0_hz));
            for b in &s {
                if a.name != b.name {
                    assert!((a.f0_hz - b.f0_hz).abs() >= MIN_F0_SPACING);
                }
            }
        }
        assert!(toy_speakers(17, &mut ChaCha8Rng::seed_from_u64(4)).is_err());
        assert!(toy_speakers(1, &mut ChaCha8Rng::seed_from_u64(4)).is_err());
    }

    #[test]
    fn rendering_has_one_segment_per_token() {
        let spk = &toy_speakers(2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()[0];
        let r = render_utterance(spk, &[1, 1, 3, 5], &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert_eq!(r.segments.len(), 4);
        assert!(r.wave.peak() <= 0.61);
        assert!(render_utterance(spk, &[0], &mut ChaCha8Rng::seed_from_u64(6)).is_err());
    }

    #[test]
    fn token_text_round_trip() {
        assert_eq!(tokens_to_string(&[1, 5, 2]), "aue");
        assert_eq!(token_id('z'), None);
    }
}
