//! Training loops for both stages, driven by a [`RunConfig`] and a single
//! master seed.
//!
//! The master seed fans out into independent ChaCha streams, one per
//! consumer, so changing how many draws one consumer makes never perturbs
//! another.

use acevc_nn::Adam;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, TrainConfig, SUBSAMPLE};
use crate::corpus::{Dataset, Example};
use crate::dsp::{normalize_pitch, speaker_pitch_stats, SpeakerPitchStats};
use crate::error::{Error, Result};
use crate::grouper::{group_content, segment_pitch};
use crate::losses::ctc_min_frames;
use crate::sre::{AsrExample, Sre, SreStepLosses, SreTrainer, SvExample};
use crate::synth::{SynthExample, SynthStepLosses, SynthTrainer, Synthesizer};

/// Independent random streams derived from the master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    SreInit = 1,
    SreData = 2,
    SreAugment = 3,
    SynthInit = 4,
    SynthData = 5,
    Probe = 6,
    Trials = 7,
}

pub fn stream(seed: u64, s: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s as u64);
    rng
}

/// Indices of `subset` usable for the content task: within the frame
/// bounds and long enough for their CTC targets.
pub fn asr_eligible(cfg: &RunConfig, data: &Dataset, subset: &[usize]) -> Vec<usize> {
    subset
        .iter()
        .copied()
        .filter(|&i| {
            let e = &data.examples[i];
            let t = e.mel.n_frames();
            (cfg.train.min_frames..=cfg.train.max_frames).contains(&t)
                && ctc_min_frames(&e.tokens) <= t / SUBSAMPLE
        })
        .collect()
}

fn sv_crop(e: &Example, frames: usize, rng: &mut impl Rng) -> Result<SvExample> {
    let t = e.mel.n_frames();
    let mel = if t > frames {
        e.mel.crop(rng.gen_range(0..=t - frames), frames)?
    } else {
        e.mel.clone()
    };
    Ok(SvExample {
        mel,
        speaker: e.speaker,
    })
}

/// Trains an extractor on `subset` for `cfg.train.sre_steps` steps.
/// `on_step` sees every step's losses.
pub fn train_sre(
    cfg: &RunConfig,
    data: &Dataset,
    subset: &[usize],
    mut on_step: impl FnMut(usize, &SreStepLosses),
) -> Result<(Sre, Adam)> {
    if cfg.sre.n_speakers < data.n_speakers() {
        return Err(Error::Config(format!(
            "sre.n_speakers = {} but the corpus has {} speakers",
            cfg.sre.n_speakers,
            data.n_speakers()
        )));
    }
    let t = &cfg.train;
    let asr_pool = asr_eligible(cfg, data, subset);
    if asr_pool.is_empty() || subset.is_empty() {
        return Err(Error::Data(
            "no utterances pass the ASR length filter".into(),
        ));
    }
    let sre = Sre::new(&cfg.sre, &mut stream(t.seed, Stream::SreInit));
    let adam = Adam::new(&sre.store);
    let mut trainer = SreTrainer::new(
        sre,
        adam,
        t.sre_weights(),
        (cfg.dsp.shift_min, cfg.dsp.shift_max),
        stream(t.seed, Stream::SreAugment).gen(),
    );
    trainer.set_learning_rates(t.lr_backbone, t.lr_heads);
    let mut rng = stream(t.seed, Stream::SreData);
    let asr_examples: Vec<AsrExample> = asr_pool
        .iter()
        .map(|&i| {
            let e = &data.examples[i];
            AsrExample {
                wave: e.wave.clone(),
                mel: e.mel.clone(),
                tokens: e.tokens.clone(),
            }
        })
        .collect();
    for step in 0..t.sre_steps {
        let asr: Vec<&AsrExample> = (0..t.asr_batch.max(1))
            .map(|_| &asr_examples[rng.gen_range(0..asr_examples.len())])
            .collect();
        let sv = (0..t.sv_batch)
            .map(|_| {
                sv_crop(
                    &data.examples[subset[rng.gen_range(0..subset.len())]],
                    t.sv_crop_frames,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let losses = trainer.step(&asr, &sv)?;
        on_step(step, &losses);
    }
    Ok((trainer.sre, trainer.adam))
}

/// Pitch statistics for every speaker over the examples in `subset`.
pub fn speaker_stats(data: &Dataset, subset: &[usize]) -> Result<Vec<Option<SpeakerPitchStats>>> {
    let mut contours = vec![Vec::new(); data.n_speakers()];
    for &i in subset {
        let e = &data.examples[i];
        contours[e.speaker].push(e.f0.clone());
    }
    Ok(contours
        .iter()
        .map(|c| {
            if c.is_empty() {
                None
            } else {
                speaker_pitch_stats(c).ok()
            }
        })
        .collect())
}

/// Synthesizer training items: grouped content, per-utterance speaker
/// embedding and group pitch normalized by the speaker's statistics.
pub fn synth_examples(sre: &Sre, data: &Dataset, subset: &[usize]) -> Result<Vec<SynthExample>> {
    let stats = speaker_stats(data, subset)?;
    subset
        .iter()
        .map(|&i| {
            let e = &data.examples[i];
            let st = stats[e.speaker].ok_or_else(|| {
                Error::Data(format!("speaker {} has no voiced frames", e.speaker))
            })?;
            let (content, speaker) = sre.extract(&e.mel)?;
            let mut grouped = group_content(&content)?;
            grouped.group_pitch =
                segment_pitch(&normalize_pitch(&e.f0, &st), &grouped.durations, SUBSAMPLE)?;
            Ok(SynthExample {
                grouped,
                speaker,
                mel: e.mel.clone(),
            })
        })
        .collect()
}

/// Learning rate at `step`: `lr_synth` times a linear warmup ramp over
/// `synth_warmup` steps times a cosine decay that reaches zero at `synth_steps`.
pub fn synth_learning_rate(t: &TrainConfig, step: usize) -> f32 {
    let warm = ((step + 1) as f64 / t.synth_warmup.max(1) as f64).min(1.0);
    let progress = step as f64 / t.synth_steps.max(1) as f64;
    let decay = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    (t.lr_synth as f64 * warm * decay) as f32
}

/// Trains a synthesizer for `cfg.train.synth_steps` steps on `examples`.
pub fn train_synth(
    cfg: &RunConfig,
    examples: &[SynthExample],
    mut on_step: impl FnMut(usize, &SynthStepLosses),
) -> Result<(Synthesizer, Adam)> {
    if examples.is_empty() {
        return Err(Error::Data("no synthesizer training examples".into()));
    }
    let t = &cfg.train;
    let synth = Synthesizer::new(&cfg.synth, &mut stream(t.seed, Stream::SynthInit));
    let adam = Adam::new(&synth.store);
    let mut trainer = SynthTrainer::new(synth, adam, t.synth_weights());
    let mut rng = stream(t.seed, Stream::SynthData);
    let batch = t.synth_batch.clamp(1, examples.len());
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut cursor = order.len();
    for step in 0..t.synth_steps {
        let mut items = Vec::with_capacity(batch);
        for _ in 0..batch {
            if cursor == order.len() {
                rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
                cursor = 0;
            }
            items.push(&examples[order[cursor]]);
            cursor += 1;
        }
        trainer.set_learning_rate(synth_learning_rate(t, step));
        let losses = trainer.step(&items)?;
        on_step(step, &losses);
    }
    Ok((trainer.synth, trainer.adam))
}
