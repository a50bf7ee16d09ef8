//! Speech representation extractor.
//!
//! A 4× subsampling convolutional front end feeds a stack of conformer-lite
//! blocks. Two heads read the backbone output: a content head producing
//! per-step content vectors and token log-probabilities, and a speaker head
//! that maps the first time step to a unit-norm speaker embedding.

use std::path::Path;

use acevc_nn::checkpoint::{pack_model, unpack_model};
use acevc_nn::layers::{
    sinusoidal_positions, Conv1d, DepthwiseConv1d, LayerNorm, Linear, MultiHeadAttention,
};
use acevc_nn::{Adam, Bound, Builder, Container, Graph, NodeId, ParamId, ParamStore, Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{fingerprint, SreConfig, SUBSAMPLE};
use crate::dsp::{mel_spectrogram, pitch_shift, MelSpectrogram, Waveform, N_MELS};
use crate::error::{Error, Result};
use crate::losses::{
    angular_softmax_node, cosine_disentangle_node, ctc_node, sre_loss_node, SreLossWeights,
};

pub const CHECKPOINT_KIND: &str = "sre";
/// Fixed input normalization applied to log-mel values.
pub const MEL_MEAN: f32 = -5.0;
pub const MEL_SCALE: f32 = 3.0;

pub const GROUP_BACKBONE: &str = "backbone";
pub const GROUP_HEADS: &str = "heads";

/// Content-head outputs over `T'` steps.
#[derive(Clone, Debug, PartialEq)]
pub struct ContentSequence {
    /// `T' × D_c` content vectors.
    pub z_c: Tensor<f32>,
    /// `T' × V` token log-probabilities.
    pub p_c: Tensor<f32>,
}

impl ContentSequence {
    pub fn len(&self) -> usize {
        self.z_c.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.z_c.rows() == 0
    }
}

/// Unit-norm speaker embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerEmbedding {
    pub z_s: Vec<f32>,
}

impl SpeakerEmbedding {
    /// Normalizes `v`; a zero vector is rejected.
    pub fn from_vec(v: Vec<f32>) -> Result<Self> {
        let n = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Shape(
                "speaker embedding has zero or non-finite norm".into(),
            ));
        }
        Ok(Self {
            z_s: v.iter().map(|&x| (x as f64 / n) as f32).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.z_s.len()
    }

    pub fn cosine(&self, other: &SpeakerEmbedding) -> f64 {
        self.z_s
            .iter()
            .zip(&other.z_s)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    }

    /// Mean of several embeddings, renormalized.
    pub fn mean(items: &[SpeakerEmbedding]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("no embeddings to average".into()))?;
        let mut acc = vec![0.0f64; first.dim()];
        for e in items {
            for (a, &x) in acc.iter_mut().zip(&e.z_s) {
                *a += x as f64;
            }
        }
        Self::from_vec(
            acc.iter()
                .map(|&x| (x / items.len() as f64) as f32)
                .collect(),
        )
    }
}

#[derive(Clone, Debug)]
struct ConformerBlock {
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    ln_conv: LayerNorm,
    pointwise_in: Linear,
    depthwise: DepthwiseConv1d,
    pointwise_out: Linear,
    ln_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
    ln_out: LayerNorm,
}

impl ConformerBlock {
    fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, cfg: &SreConfig) -> Self {
        let w = cfg.width;
        b.scope(name, |b| Self {
            ln_attn: LayerNorm::new(b, "ln_attn", w),
            attn: MultiHeadAttention::new(b, "attn", w, cfg.heads),
            ln_conv: LayerNorm::new(b, "ln_conv", w),
            pointwise_in: Linear::new(b, "pointwise_in", w, 2 * w),
            depthwise: DepthwiseConv1d::new(b, "depthwise", w, cfg.conv_kernel),
            pointwise_out: Linear::new(b, "pointwise_out", w, w),
            ln_ff: LayerNorm::new(b, "ln_ff", w),
            ff_in: Linear::new(b, "ff_in", w, cfg.ff_dim),
            ff_out: Linear::new(b, "ff_out", cfg.ff_dim, w),
            ln_out: LayerNorm::new(b, "ln_out", w),
        })
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: NodeId) -> NodeId {
        let h = self.ln_attn.forward(g, p, x);
        let h = self.attn.forward(g, p, h);
        let x = g.add(x, h);

        let h = self.ln_conv.forward(g, p, x);
        let h = self.pointwise_in.forward(g, p, h);
        let h = g.glu(h);
        let h = self.depthwise.forward(g, p, h);
        let h = g.silu(h);
        let h = self.pointwise_out.forward(g, p, h);
        let x = g.add(x, h);

        let h = self.ln_ff.forward(g, p, x);
        let h = self.ff_in.forward(g, p, h);
        let h = g.silu(h);
        let h = self.ff_out.forward(g, p, h);
        let x = g.add(x, h);
        self.ln_out.forward(g, p, x)
    }
}

/// Layer layout of the extractor; parameter values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct SreModel {
    pub cfg: SreConfig,
    sub_in: Conv1d,
    sub_down: Conv1d,
    blocks: Vec<ConformerBlock>,
    content_proj: Linear,
    content_out: Linear,
    speaker_proj: Linear,
    speaker_classes: ParamId,
}

impl SreModel {
    /// Registers all parameters in `store` under the two learning-rate groups.
    pub fn build<R: Rng>(cfg: &SreConfig, store: &mut ParamStore<f32>, rng: &mut R) -> Self {
        let backbone = store.group(GROUP_BACKBONE, 1e-5);
        let heads = store.group(GROUP_HEADS, 1e-4);
        let mut b = Builder::new(store, rng, backbone);
        let w = cfg.width;
        let sub_in = Conv1d::new(&mut b, "sub_in", N_MELS, w, 3, 1, 1);
        let sub_down = Conv1d::new(&mut b, "sub_down", w, w, SUBSAMPLE, SUBSAMPLE, 0);
        let blocks = (0..cfg.blocks)
            .map(|i| ConformerBlock::new(&mut b, &format!("block{i}"), cfg))
            .collect();
        b.set_group(heads);
        let content_proj = Linear::new(&mut b, "content_proj", w, cfg.content_dim);
        let content_out = Linear::new(&mut b, "content_out", cfg.content_dim, cfg.vocab);
        let speaker_proj = Linear::new(&mut b, "speaker_proj", w, cfg.speaker_dim);
        let speaker_classes = b.normal("speaker_classes", cfg.n_speakers, cfg.speaker_dim);
        Self {
            cfg: cfg.clone(),
            sub_in,
            sub_down,
            blocks,
            content_proj,
            content_out,
            speaker_proj,
            speaker_classes,
        }
    }

    /// `T × 80` normalized mel → `T' × W` encoding, `T' = floor(T / 4)`.
    pub fn backbone<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: NodeId) -> NodeId {
        let h = self.sub_in.forward(g, p, x);
        let h = g.silu(h);
        let h = self.sub_down.forward(g, p, h);
        let h = g.silu(h);
        let (t, w) = g.shape(h);
        // Features scaled by sqrt(W) so positions do not swamp them.
        let h = g.scale(h, T::of((w as f64).sqrt()));
        let pos = g.constant(sinusoidal_positions(t, w));
        let mut h = g.add(h, pos);
        for block in &self.blocks {
            h = block.forward(g, p, h);
        }
        h
    }

    /// `(z_c, p_c)` nodes.
    pub fn content<T: Real>(&self, g: &mut Graph<T>, p: &Bound, z: NodeId) -> (NodeId, NodeId) {
        let zc = self.content_proj.forward(g, p, z);
        let logits = self.content_out.forward(g, p, zc);
        (zc, g.log_softmax(logits))
    }

    /// Unnormalized speaker projection of the first time step, `1 × D_s`.
    pub fn speaker_raw<T: Real>(&self, g: &mut Graph<T>, p: &Bound, z: NodeId) -> NodeId {
        let first = g.slice_rows(z, 0, 1);
        self.speaker_proj.forward(g, p, first)
    }

    pub fn speaker<T: Real>(&self, g: &mut Graph<T>, p: &Bound, z: NodeId) -> NodeId {
        let raw = self.speaker_raw(g, p, z);
        g.row_normalize(raw)
    }

    pub fn speaker_classes(&self) -> ParamId {
        self.speaker_classes
    }
}

/// Normalized mel tensor ready for the front end.
pub fn input_tensor<T: Real>(mel: &MelSpectrogram) -> Tensor<T> {
    Tensor::from_vec(
        mel.n_frames(),
        N_MELS,
        mel.data()
            .iter()
            .map(|&v| T::of(((v - MEL_MEAN) / MEL_SCALE) as f64))
            .collect(),
    )
}

fn check_len(mel: &MelSpectrogram) -> Result<()> {
    if mel.n_frames() < SUBSAMPLE {
        return Err(Error::Shape(format!(
            "{} mel frames is fewer than the subsampling factor {SUBSAMPLE}",
            mel.n_frames()
        )));
    }
    Ok(())
}

/// A built extractor together with its parameter values.
#[derive(Clone, Debug)]
pub struct Sre {
    pub model: SreModel,
    pub store: ParamStore<f32>,
}

impl Sre {
    pub fn new(cfg: &SreConfig, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let model = SreModel::build(cfg, &mut store, rng);
        Self { model, store }
    }

    pub fn config(&self) -> &SreConfig {
        &self.model.cfg
    }

    pub fn encode(&self, mel: &MelSpectrogram) -> Result<Tensor<f32>> {
        check_len(mel)?;
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let x = g.constant(input_tensor(mel));
        let z = self.model.backbone(&mut g, &p, x);
        Ok(g.value(z).clone())
    }

    /// Content sequence and speaker embedding from one forward pass.
    pub fn extract(&self, mel: &MelSpectrogram) -> Result<(ContentSequence, SpeakerEmbedding)> {
        check_len(mel)?;
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let x = g.constant(input_tensor(mel));
        let z = self.model.backbone(&mut g, &p, x);
        let (zc, pc) = self.model.content(&mut g, &p, z);
        let zs = self.model.speaker_raw(&mut g, &p, z);
        let content = ContentSequence {
            z_c: g.value(zc).clone(),
            p_c: g.value(pc).clone(),
        };
        let speaker = SpeakerEmbedding::from_vec(g.value(zs).data().to_vec())?;
        Ok((content, speaker))
    }

    pub fn config_text(&self) -> String {
        toml::to_string(&self.model.cfg).expect("config serializes")
    }

    pub fn to_container(&self, adam: &Adam) -> Container {
        let text = self.config_text();
        pack_model(
            fingerprint(CHECKPOINT_KIND, &text),
            &text,
            &self.store,
            adam,
        )
    }

    pub fn save(&self, path: &Path, adam: &Adam) -> Result<()> {
        Ok(self.to_container(adam).save(path)?)
    }

    /// Rebuilds the model from the embedded config and restores parameters
    /// and optimizer state. Non-SRE checkpoints fail the fingerprint check.
    pub fn from_container(c: &Container) -> Result<(Self, Adam)> {
        let text = std::str::from_utf8(c.bytes_entry("config")?)
            .map_err(|_| Error::Config("checkpoint config is not UTF-8".into()))?
            .to_string();
        c.check_fingerprint(fingerprint(CHECKPOINT_KIND, &text))?;
        let cfg: SreConfig = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        let mut sre = Self::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let adam = unpack_model(c, &mut sre.store)?;
        Ok((sre, adam))
    }

    pub fn load(path: &Path) -> Result<(Self, Adam)> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Transcribed utterance for the content task.
#[derive(Clone, Debug)]
pub struct AsrExample {
    pub wave: Waveform,
    pub mel: MelSpectrogram,
    pub tokens: Vec<usize>,
}

/// Labeled crop for the speaker task.
#[derive(Clone, Debug)]
pub struct SvExample {
    pub mel: MelSpectrogram,
    pub speaker: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SreStepLosses {
    pub content: f64,
    pub sv: f64,
    pub disentangle: f64,
    pub total: f64,
}

/// Draws a shift uniformly from `[-max, -min] ∪ [min, max]` semitones.
pub fn draw_shift(rng: &mut impl Rng, min: f64, max: f64) -> f64 {
    let mag = if max > min {
        rng.gen_range(min..=max)
    } else {
        min
    };
    if rng.gen_bool(0.5) {
        mag
    } else {
        -mag
    }
}

/// Mel spectrogram of a pitch-shifted copy; same frame count as the input.
pub fn shifted_mel(wave: &Waveform, semitones: f64) -> Result<MelSpectrogram> {
    mel_spectrogram(&pitch_shift(wave, semitones))
}

/// Multi-task objective on one pair of mini-batches, recorded in `g`.
///
/// Each ASR item contributes its per-token CTC loss and, when `shifted` is
/// given, the cosine loss between the content sequences of the original and
/// the shifted copy; both branches share all weights and both receive
/// gradients. Batch terms are averaged.
pub fn sre_objective<T: Real>(
    model: &SreModel,
    g: &mut Graph<T>,
    p: &Bound,
    asr: &[(&MelSpectrogram, &[usize])],
    shifted: Option<&[MelSpectrogram]>,
    sv: &[(&MelSpectrogram, usize)],
    weights: SreLossWeights,
) -> Result<(NodeId, [Option<NodeId>; 3])> {
    if asr.is_empty() {
        return Err(Error::Data("empty ASR batch".into()));
    }
    let mut content_terms = Vec::new();
    let mut dis_terms = Vec::new();
    for (i, (mel, tokens)) in asr.iter().enumerate() {
        check_len(mel)?;
        let x = g.constant(input_tensor(mel));
        let z = model.backbone(g, p, x);
        let (zc, pc) = model.content(g, p, z);
        content_terms.push(ctc_node(g, pc, tokens, true)?);
        if let Some(sh) = shifted {
            let xs = g.constant(input_tensor(&sh[i]));
            let zs = model.backbone(g, p, xs);
            let (zcs, _) = model.content(g, p, zs);
            dis_terms.push(cosine_disentangle_node(g, zc, zcs)?);
        }
    }
    let mean = |g: &mut Graph<T>, terms: &[NodeId]| {
        let cat = g.concat_rows(terms);
        g.mean_all(cat)
    };
    let content = mean(g, &content_terms);
    let dis = (!dis_terms.is_empty()).then(|| mean(g, &dis_terms));
    let sv_loss = if sv.is_empty() {
        None
    } else {
        let mut rows = Vec::with_capacity(sv.len());
        for (mel, _) in sv {
            check_len(mel)?;
            let x = g.constant(input_tensor(mel));
            let z = model.backbone(g, p, x);
            rows.push(model.speaker_raw(g, p, z));
        }
        let emb = g.concat_rows(&rows);
        let labels: Vec<usize> = sv.iter().map(|&(_, l)| l).collect();
        let classes = p.node(model.speaker_classes());
        Some(angular_softmax_node(
            g,
            emb,
            classes,
            &labels,
            model.cfg.margin,
            model.cfg.scale,
        )?)
    };
    let total = sre_loss_node(g, content, sv_loss, dis, weights);
    Ok((total, [Some(content), sv_loss, dis]))
}

/// Optimizer state plus the augmentation stream for SRE training.
pub struct SreTrainer {
    pub sre: Sre,
    pub adam: Adam,
    pub weights: SreLossWeights,
    pub shift_range: (f64, f64),
    rng: ChaCha8Rng,
}

impl SreTrainer {
    pub fn new(
        sre: Sre,
        adam: Adam,
        weights: SreLossWeights,
        shift_range: (f64, f64),
        seed: u64,
    ) -> Self {
        Self {
            sre,
            adam,
            weights,
            shift_range,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn set_learning_rates(&mut self, backbone: f32, heads: f32) {
        self.sre.store.set_learning_rate(GROUP_BACKBONE, backbone);
        self.sre.store.set_learning_rate(GROUP_HEADS, heads);
    }

    /// One combined forward/backward pass and one Adam update. Pitch-shifted
    /// copies are only rendered when the disentanglement weight is non-zero.
    pub fn step(&mut self, asr: &[&AsrExample], sv: &[SvExample]) -> Result<SreStepLosses> {
        let shifted = if self.weights.beta != 0.0 {
            let (lo, hi) = self.shift_range;
            let mut out = Vec::with_capacity(asr.len());
            for ex in asr {
                let s = draw_shift(&mut self.rng, lo, hi);
                out.push(shifted_mel(&ex.wave, s)?);
            }
            Some(out)
        } else {
            None
        };
        let batch: Vec<(&MelSpectrogram, &[usize])> =
            asr.iter().map(|e| (&e.mel, e.tokens.as_slice())).collect();
        let svb: Vec<(&MelSpectrogram, usize)> = sv.iter().map(|e| (&e.mel, e.speaker)).collect();
        let mut g = Graph::new();
        let p = self.sre.store.bind(&mut g);
        let (total, [content, sv_loss, dis]) = sre_objective(
            &self.sre.model,
            &mut g,
            &p,
            &batch,
            shifted.as_deref(),
            &svb,
            self.weights,
        )?;
        let read = |id: Option<NodeId>, name: &str| -> Result<f64> {
            match id {
                Some(id) => Ok(acevc_nn::ensure_finite(name, g.value(id).item().f64())?),
                None => Ok(0.0),
            }
        };
        let losses = SreStepLosses {
            content: read(content, "content")?,
            sv: read(sv_loss, "sv")?,
            disentangle: read(dis, "disentangle")?,
            total: read(Some(total), "total")?,
        };
        let mut grads = g.backward(total);
        let grads = p.grads(&mut grads);
        self.adam.step(&mut self.sre.store, &grads)?;
        Ok(losses)
    }
}
