//! Run configuration: a TOML document with `[dsp]`, `[sre]`, `[synth]`,
//! `[train]` and `[eval]` sections. Missing keys take their defaults;
//! unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{SreLossWeights, SynthLossWeights};

/// Mel frames per content step.
pub const SUBSAMPLE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DspConfig {
    /// Smallest augmentation shift magnitude, semitones.
    pub shift_min: f64,
    /// Largest augmentation shift magnitude, semitones.
    pub shift_max: f64,
    pub griffin_lim_iters: usize,
}

impl Default for DspConfig {
    fn default() -> Self {
        Self {
            shift_min: 1.0,
            shift_max: 4.0,
            griffin_lim_iters: 60,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SreConfig {
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub conv_kernel: usize,
    pub content_dim: usize,
    pub speaker_dim: usize,
    /// Output classes of the content head, blank included.
    pub vocab: usize,
    pub n_speakers: usize,
    pub margin: u32,
    pub scale: f64,
}

impl Default for SreConfig {
    fn default() -> Self {
        Self {
            width: 128,
            blocks: 2,
            heads: 4,
            ff_dim: 256,
            conv_kernel: 7,
            content_dim: 64,
            speaker_dim: 64,
            vocab: 6,
            n_speakers: 8,
            margin: 2,
            scale: 30.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub hidden: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub ff_kernel: usize,
    pub predictor_dim: usize,
    pub predictor_kernel: usize,
    pub content_dim: usize,
    pub speaker_dim: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            hidden: 192,
            encoder_blocks: 2,
            decoder_blocks: 2,
            heads: 2,
            ff_dim: 384,
            ff_kernel: 3,
            predictor_dim: 192,
            predictor_kernel: 3,
            content_dim: 64,
            speaker_dim: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub sre_steps: usize,
    pub synth_steps: usize,
    pub asr_batch: usize,
    pub sv_batch: usize,
    /// SV crop length in mel frames (2 s).
    pub sv_crop_frames: usize,
    /// ASR utterance length filter, mel frames.
    pub min_frames: usize,
    pub max_frames: usize,
    pub lr_backbone: f32,
    pub lr_heads: f32,
    pub lr_synth: f32,
    /// Linear warmup steps; multiplies a cosine decay of `lr_synth` that spans
    /// all `synth_steps`.
    pub synth_warmup: usize,
    pub synth_batch: usize,
    pub alpha: f64,
    pub beta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            sre_steps: 600,
            synth_steps: 1500,
            asr_batch: 4,
            sv_batch: 4,
            sv_crop_frames: 172,
            min_frames: 64,
            max_frames: 1400,
            lr_backbone: 1e-3,
            lr_heads: 1e-3,
            lr_synth: 1e-3,
            synth_warmup: 100,
            synth_batch: 4,
            alpha: 0.1,
            beta: 10.0,
            lambda1: 0.1,
            lambda2: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn sre_weights(&self) -> SreLossWeights {
        SreLossWeights {
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn synth_weights(&self) -> SynthLossWeights {
        SynthLossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub probe_hidden: usize,
    pub probe_steps: usize,
    pub probe_lr: f32,
    pub probe_standardize: bool,
    pub train_per_speaker: usize,
    pub test_per_speaker: usize,
    /// Minimum enrollment audio for a target embedding, seconds.
    pub target_seconds: f64,
    pub slice_seconds: f64,
    pub trials: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            probe_hidden: 256,
            probe_steps: 400,
            probe_lr: 1e-3,
            probe_standardize: false,
            train_per_speaker: 25,
            test_per_speaker: 5,
            target_seconds: 10.0,
            slice_seconds: 2.0,
            trials: 20,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dsp: DspConfig,
    pub sre: SreConfig,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let s = &self.sre;
        if s.width == 0 || s.heads == 0 || s.width % s.heads != 0 {
            return bad(format!(
                "sre.width {} must be a positive multiple of sre.heads {}",
                s.width, s.heads
            ));
        }
        if s.conv_kernel % 2 == 0 {
            return bad("sre.conv_kernel must be odd".into());
        }
        if s.vocab < 2 || s.n_speakers < 2 {
            return bad("sre.vocab and sre.n_speakers must be at least 2".into());
        }
        let y = &self.synth;
        if y.hidden == 0 || y.heads == 0 || y.hidden % y.heads != 0 {
            return bad(format!(
                "synth.hidden {} must be a positive multiple of synth.heads {}",
                y.hidden, y.heads
            ));
        }
        if y.ff_kernel % 2 == 0 || y.predictor_kernel % 2 == 0 {
            return bad("synth kernels must be odd".into());
        }
        if y.content_dim != s.content_dim || y.speaker_dim != s.speaker_dim {
            return bad("synth.content_dim/speaker_dim must match the sre section".into());
        }
        let t = &self.train;
        if t.alpha < 0.0 || t.beta < 0.0 || t.lambda1 < 0.0 || t.lambda2 < 0.0 {
            return bad("loss weights must be non-negative".into());
        }
        if t.min_frames < SUBSAMPLE || t.min_frames > t.max_frames {
            return bad("train.min_frames must be at least 4 and at most train.max_frames".into());
        }
        let d = &self.dsp;
        if !(0.0..=d.shift_max).contains(&d.shift_min) || d.shift_max > 12.0 {
            return bad("dsp shift range must satisfy 0 <= shift_min <= shift_max <= 12".into());
        }
        if d.griffin_lim_iters == 0 {
            return bad("dsp.griffin_lim_iters must be at least 1".into());
        }
        let e = &self.eval;
        if e.train_per_speaker == 0 || e.test_per_speaker == 0 {
            return bad("eval split sizes must be positive".into());
        }
        Ok(())
    }
}

/// First 8 bytes (little-endian) of `sha256(kind + "\n" + text)`.
pub fn fingerprint(kind: &str, text: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(kind.as_bytes());
    h.update(b"\n");
    h.update(text.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}
