//! Mel synthesizer conditioned on grouped content and a speaker embedding.
//!
//! The encoder reads `[g_c | z_s]` per group. Duration and pitch predictors
//! read the encoder output; the pitch (ground truth while training) is
//! embedded and added back, each group is repeated `4·d` times, and the
//! decoder maps the regulated sequence to 80 mel bands. Mel values live in
//! the same fixed normalization as the extractor's input.

use std::path::Path;

use acevc_nn::checkpoint::{pack_model, unpack_model};
use acevc_nn::layers::{sinusoidal_positions, Conv1d, LayerNorm, Linear, MultiHeadAttention};
use acevc_nn::{Adam, Bound, Builder, Container, Graph, NodeId, ParamStore, Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{fingerprint, SynthConfig, SUBSAMPLE};
use crate::dsp::{MelSpectrogram, N_MELS};
use crate::error::{Error, Result};
use crate::grouper::GroupedContent;
use crate::losses::{duration_from_log, synth_loss_node, SynthLossWeights};
use crate::sre::{SpeakerEmbedding, MEL_MEAN, MEL_SCALE};

pub const CHECKPOINT_KIND: &str = "synth";
pub const GROUP_SYNTH: &str = "synth";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Source durations and pitch.
    Mimic,
    /// Predicted durations and pitch.
    Adaptive,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mimic" => Ok(Mode::Mimic),
            "adaptive" => Ok(Mode::Adaptive),
            other => Err(Error::Config(format!(
                "unknown mode '{other}', expected mimic or adaptive"
            ))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Mimic => "mimic",
            Mode::Adaptive => "adaptive",
        })
    }
}

/// Post-norm transformer block with a convolutional feed-forward.
#[derive(Clone, Debug)]
struct FftBlock {
    attn: MultiHeadAttention,
    ln_attn: LayerNorm,
    conv_in: Conv1d,
    conv_out: Conv1d,
    ln_ff: LayerNorm,
}

impl FftBlock {
    fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, cfg: &SynthConfig) -> Self {
        let h = cfg.hidden;
        b.scope(name, |b| Self {
            attn: MultiHeadAttention::new(b, "attn", h, cfg.heads),
            ln_attn: LayerNorm::new(b, "ln_attn", h),
            conv_in: Conv1d::same(b, "conv_in", h, cfg.ff_dim, cfg.ff_kernel),
            conv_out: Conv1d::same(b, "conv_out", cfg.ff_dim, h, cfg.ff_kernel),
            ln_ff: LayerNorm::new(b, "ln_ff", h),
        })
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: NodeId) -> NodeId {
        let a = self.attn.forward(g, p, x);
        let x = g.add(x, a);
        let x = self.ln_attn.forward(g, p, x);
        let f = self.conv_in.forward(g, p, x);
        let f = g.relu(f);
        let f = self.conv_out.forward(g, p, f);
        let x = g.add(x, f);
        self.ln_ff.forward(g, p, x)
    }
}

/// Two conv–ReLU–LayerNorm stages and a scalar projection per step.
#[derive(Clone, Debug)]
struct VariancePredictor {
    conv1: Conv1d,
    ln1: LayerNorm,
    conv2: Conv1d,
    ln2: LayerNorm,
    out: Linear,
}

impl VariancePredictor {
    fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, cfg: &SynthConfig) -> Self {
        let d = cfg.predictor_dim;
        b.scope(name, |b| Self {
            conv1: Conv1d::same(b, "conv1", cfg.hidden, d, cfg.predictor_kernel),
            ln1: LayerNorm::new(b, "ln1", d),
            conv2: Conv1d::same(b, "conv2", d, d, cfg.predictor_kernel),
            ln2: LayerNorm::new(b, "ln2", d),
            out: Linear::new(b, "out", d, 1),
        })
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, h: NodeId) -> NodeId {
        let x = self.conv1.forward(g, p, h);
        let x = g.relu(x);
        let x = self.ln1.forward(g, p, x);
        let x = self.conv2.forward(g, p, x);
        let x = g.relu(x);
        let x = self.ln2.forward(g, p, x);
        self.out.forward(g, p, x)
    }
}

#[derive(Clone, Debug)]
pub struct SynthModel {
    pub cfg: SynthConfig,
    input: Linear,
    encoder: Vec<FftBlock>,
    duration: VariancePredictor,
    pitch: VariancePredictor,
    pitch_embed: Linear,
    decoder: Vec<FftBlock>,
    mel_out: Linear,
}

/// Nodes of one synthesizer pass.
pub struct SynthPass {
    pub h: NodeId,
    pub k: NodeId,
    pub duration: NodeId,
    pub pitch: NodeId,
    pub mel: NodeId,
}

impl SynthModel {
    pub fn build<R: Rng>(cfg: &SynthConfig, store: &mut ParamStore<f32>, rng: &mut R) -> Self {
        let group = store.group(GROUP_SYNTH, 1e-4);
        let mut b = Builder::new(store, rng, group);
        let h = cfg.hidden;
        Self {
            cfg: cfg.clone(),
            input: Linear::new(&mut b, "input", cfg.content_dim + cfg.speaker_dim, h),
            encoder: (0..cfg.encoder_blocks)
                .map(|i| FftBlock::new(&mut b, &format!("encoder{i}"), cfg))
                .collect(),
            duration: VariancePredictor::new(&mut b, "duration", cfg),
            pitch: VariancePredictor::new(&mut b, "pitch", cfg),
            pitch_embed: Linear::new(&mut b, "pitch_embed", 1, h),
            decoder: (0..cfg.decoder_blocks)
                .map(|i| FftBlock::new(&mut b, &format!("decoder{i}"), cfg))
                .collect(),
            mel_out: Linear::new(&mut b, "mel_out", h, N_MELS),
        }
    }

    /// `h = F_e([g_c | z_s])`, `M × H`.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, p: &Bound, g_c: NodeId, z_s: NodeId) -> NodeId {
        let (m, _) = g.shape(g_c);
        let zs = g.broadcast_rows(z_s, m);
        let x = g.concat_cols(&[g_c, zs]);
        let x = self.input.forward(g, p, x);
        let pos = g.constant(sinusoidal_positions(m, self.cfg.hidden));
        let mut x = g.add(x, pos);
        for blk in &self.encoder {
            x = blk.forward(g, p, x);
        }
        x
    }

    /// Log-domain duration predictions, `M × 1`.
    pub fn predict_duration<T: Real>(&self, g: &mut Graph<T>, p: &Bound, h: NodeId) -> NodeId {
        self.duration.forward(g, p, h)
    }

    /// Normalized pitch predictions, `M × 1`.
    pub fn predict_pitch<T: Real>(&self, g: &mut Graph<T>, p: &Bound, h: NodeId) -> NodeId {
        self.pitch.forward(g, p, h)
    }

    /// `k = h + PitchEmbedding(pitch)`; `pitch` is `M × 1`.
    pub fn add_pitch_embedding<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        h: NodeId,
        pitch: NodeId,
    ) -> NodeId {
        let e = self.pitch_embed.forward(g, p, pitch);
        g.add(h, e)
    }

    /// Decoder over an already regulated sequence, `L × 80` normalized mel.
    pub fn decode<T: Real>(&self, g: &mut Graph<T>, p: &Bound, regulated: NodeId) -> NodeId {
        let (l, _) = g.shape(regulated);
        let pos = g.constant(sinusoidal_positions(l, self.cfg.hidden));
        let mut x = g.add(regulated, pos);
        for blk in &self.decoder {
            x = blk.forward(g, p, x);
        }
        self.mel_out.forward(g, p, x)
    }

    /// Full pass with the given conditioning pitch and durations.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        g_c: NodeId,
        z_s: NodeId,
        pitch: NodeId,
        durations: &[usize],
    ) -> Result<SynthPass> {
        let h = self.encode(g, p, g_c, z_s);
        let duration = self.predict_duration(g, p, h);
        let pitch_pred = self.predict_pitch(g, p, h);
        let k = self.add_pitch_embedding(g, p, h, pitch);
        let reg = duration_regulate(g, k, durations, SUBSAMPLE)?;
        let mel = self.decode(g, p, reg);
        Ok(SynthPass {
            h,
            k,
            duration,
            pitch: pitch_pred,
            mel,
        })
    }
}

/// Repeats step `m` of `k` `durations[m]·r` times.
pub fn duration_regulate<T: Real>(
    g: &mut Graph<T>,
    k: NodeId,
    durations: &[usize],
    r: usize,
) -> Result<NodeId> {
    if durations.len() != g.shape(k).0 {
        return Err(Error::Shape(format!(
            "{} durations for {} steps",
            durations.len(),
            g.shape(k).0
        )));
    }
    if durations.iter().all(|&d| d == 0) {
        return Err(Error::Shape(
            "empty regulation: every duration is zero".into(),
        ));
    }
    let counts: Vec<usize> = durations.iter().map(|&d| d * r).collect();
    Ok(g.repeat_rows(k, &counts))
}

fn column<T: Real>(values: &[f32]) -> Tensor<T> {
    Tensor::from_vec(
        values.len(),
        1,
        values.iter().map(|&v| T::of(v as f64)).collect(),
    )
}

fn row<T: Real>(values: &[f32]) -> Tensor<T> {
    Tensor::from_vec(
        1,
        values.len(),
        values.iter().map(|&v| T::of(v as f64)).collect(),
    )
}

/// Normalized mel target, first `rows` frames.
pub fn mel_target<T: Real>(mel: &MelSpectrogram, rows: usize) -> Result<Tensor<T>> {
    if rows > mel.n_frames() {
        return Err(Error::Shape(format!(
            "target has {} frames, regulation needs {rows}",
            mel.n_frames()
        )));
    }
    Ok(Tensor::from_vec(
        rows,
        N_MELS,
        mel.data()[..rows * N_MELS]
            .iter()
            .map(|&v| T::of(((v - MEL_MEAN) / MEL_SCALE) as f64))
            .collect(),
    ))
}

/// One training item: grouped content of an utterance, its speaker
/// embedding and its mel spectrogram.
#[derive(Clone, Debug)]
pub struct SynthExample {
    pub grouped: GroupedContent,
    pub speaker: SpeakerEmbedding,
    pub mel: MelSpectrogram,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SynthStepLosses {
    pub mel: f64,
    pub pitch: f64,
    pub duration: f64,
    pub total: f64,
}

/// Teacher-forced objective averaged over `batch`; returns the total node
/// and the three averaged term nodes.
pub fn synth_objective<T: Real>(
    model: &SynthModel,
    g: &mut Graph<T>,
    p: &Bound,
    batch: &[&SynthExample],
    w: SynthLossWeights,
) -> Result<(NodeId, [NodeId; 3])> {
    if batch.is_empty() {
        return Err(Error::Data("empty synthesizer batch".into()));
    }
    let mut totals = Vec::new();
    let mut terms = [Vec::new(), Vec::new(), Vec::new()];
    for ex in batch {
        let gc = &ex.grouped;
        if gc.group_pitch.len() != gc.len() {
            return Err(Error::Shape(
                "grouped content is missing group pitch".into(),
            ));
        }
        let gcn = g.constant(gc.g_c.cast());
        let zs = g.constant(row(&ex.speaker.z_s));
        let pitch = g.constant(column(&gc.group_pitch));
        let pass = model.forward(g, p, gcn, zs, pitch, &gc.durations)?;
        let rows = g.shape(pass.mel).0;
        let y = g.constant(mel_target(&ex.mel, rows)?);
        let t = synth_loss_node(
            g,
            pass.mel,
            y,
            pass.pitch,
            &gc.group_pitch,
            pass.duration,
            &gc.durations,
            w,
        )?;
        totals.push(t.total);
        terms[0].push(t.mel);
        terms[1].push(t.pitch);
        terms[2].push(t.duration);
    }
    let mut mean = |ids: &[NodeId]| {
        let cat = g.concat_rows(ids);
        g.mean_all(cat)
    };
    let total = mean(&totals);
    let [a, b, c] = &terms;
    Ok((total, [mean(a), mean(b), mean(c)]))
}

/// A built synthesizer together with its parameter values.
#[derive(Clone, Debug)]
pub struct Synthesizer {
    pub model: SynthModel,
    pub store: ParamStore<f32>,
}

/// Inference result in raw log-mel units.
#[derive(Clone, Debug, PartialEq)]
pub struct Synthesis {
    pub mel: MelSpectrogram,
    pub durations: Vec<usize>,
    pub pitch: Vec<f32>,
}

impl Synthesizer {
    pub fn new(cfg: &SynthConfig, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let model = SynthModel::build(cfg, &mut store, rng);
        Self { model, store }
    }

    fn check_inputs(&self, gc: &GroupedContent, zs: &SpeakerEmbedding) -> Result<()> {
        let c = &self.model.cfg;
        if gc.g_c.cols() != c.content_dim || zs.dim() != c.speaker_dim {
            return Err(Error::Shape(format!(
                "synthesizer expects content dim {} and speaker dim {}, got {} and {}",
                c.content_dim,
                c.speaker_dim,
                gc.g_c.cols(),
                zs.dim()
            )));
        }
        if gc.is_empty() {
            return Err(Error::Shape("no groups to synthesize".into()));
        }
        Ok(())
    }

    /// Encoder output and predictor outputs for inspection.
    pub fn predict(
        &self,
        gc: &GroupedContent,
        zs: &SpeakerEmbedding,
    ) -> Result<(Tensor<f32>, Vec<f32>, Vec<f32>)> {
        self.check_inputs(gc, zs)?;
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let gcn = g.constant(gc.g_c.clone());
        let z = g.constant(row(&zs.z_s));
        let h = self.model.encode(&mut g, &p, gcn, z);
        let d = self.model.predict_duration(&mut g, &p, h);
        let pi = self.model.predict_pitch(&mut g, &p, h);
        Ok((
            g.value(h).clone(),
            g.value(d).data().to_vec(),
            g.value(pi).data().to_vec(),
        ))
    }

    /// Mimic mode never evaluates the predictors; adaptive mode never reads
    /// the source durations or pitch.
    pub fn infer(
        &self,
        gc: &GroupedContent,
        zs: &SpeakerEmbedding,
        mode: Mode,
    ) -> Result<Synthesis> {
        self.check_inputs(gc, zs)?;
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let gcn = g.constant(gc.g_c.clone());
        let z = g.constant(row(&zs.z_s));
        let h = self.model.encode(&mut g, &p, gcn, z);
        let (durations, pitch) = match mode {
            Mode::Mimic => {
                if gc.group_pitch.len() != gc.len() {
                    return Err(Error::Shape("mimic mode needs source group pitch".into()));
                }
                (gc.durations.clone(), gc.group_pitch.clone())
            }
            Mode::Adaptive => {
                let d = self.model.predict_duration(&mut g, &p, h);
                let pi = self.model.predict_pitch(&mut g, &p, h);
                let durations: Vec<usize> = g
                    .value(d)
                    .data()
                    .iter()
                    .map(|&x| duration_from_log(x as f64))
                    .collect();
                if durations.iter().all(|&x| x == 0) {
                    return Err(Error::Shape(
                        "adaptive mode predicted zero total duration".into(),
                    ));
                }
                (durations, g.value(pi).data().to_vec())
            }
        };
        let pn = g.constant(column(&pitch));
        let k = self.model.add_pitch_embedding(&mut g, &p, h, pn);
        let reg = duration_regulate(&mut g, k, &durations, SUBSAMPLE)?;
        let out = self.model.decode(&mut g, &p, reg);
        let v = g.value(out);
        let mel = MelSpectrogram::from_data(
            v.rows(),
            v.data().iter().map(|&x| x * MEL_SCALE + MEL_MEAN).collect(),
        )?;
        Ok(Synthesis {
            mel,
            durations,
            pitch,
        })
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

    pub fn from_container(c: &Container) -> Result<(Self, Adam)> {
        let text = std::str::from_utf8(c.bytes_entry("config")?)
            .map_err(|_| Error::Config("checkpoint config is not UTF-8".into()))?
            .to_string();
        c.check_fingerprint(fingerprint(CHECKPOINT_KIND, &text))?;
        let cfg: SynthConfig = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        let mut s = Self::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let adam = unpack_model(c, &mut s.store)?;
        Ok((s, adam))
    }

    pub fn load(path: &Path) -> Result<(Self, Adam)> {
        Self::from_container(&Container::load(path)?)
    }
}

pub struct SynthTrainer {
    pub synth: Synthesizer,
    pub adam: Adam,
    pub weights: SynthLossWeights,
}

impl SynthTrainer {
    pub fn new(synth: Synthesizer, adam: Adam, weights: SynthLossWeights) -> Self {
        Self {
            synth,
            adam,
            weights,
        }
    }

    pub fn set_learning_rate(&mut self, lr: f32) {
        self.synth.store.set_learning_rate(GROUP_SYNTH, lr);
    }

    pub fn step(&mut self, batch: &[&SynthExample]) -> Result<SynthStepLosses> {
        let mut g = Graph::new();
        let p = self.synth.store.bind(&mut g);
        let (total, [mel, pitch, duration]) =
            synth_objective(&self.synth.model, &mut g, &p, batch, self.weights)?;
        let read =
            |id: NodeId, name: &str| acevc_nn::ensure_finite(name, g.value(id).item() as f64);
        let losses = SynthStepLosses {
            mel: read(mel, "mel")?,
            pitch: read(pitch, "pitch")?,
            duration: read(duration, "duration")?,
            total: read(total, "total")?,
        };
        let mut grads = g.backward(total);
        let grads = p.grads(&mut grads);
        self.adam.step(&mut self.synth.store, &grads)?;
        Ok(losses)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> SynthConfig {
        SynthConfig {
            hidden: 8,
            encoder_blocks: 1,
            decoder_blocks: 1,
            heads: 2,
            ff_dim: 8,
            ff_kernel: 3,
            predictor_dim: 8,
            predictor_kernel: 3,
            content_dim: 4,
            speaker_dim: 3,
        }
    }

    fn grouped(durations: Vec<usize>) -> GroupedContent {
        let m = durations.len();
        GroupedContent {
            g_c: Tensor::from_vec(m, 4, (0..m * 4).map(|i| (i as f32 * 0.3).sin()).collect()),
            tokens: (0..m).map(|i| i % 3).collect(),
            group_pitch: vec![0.5; m],
            durations,
        }
    }

    #[test]
    fn regulation_contract() {
        let mut g = Graph::<f64>::new();
        let k = g.constant(Tensor::from_rows(&[vec![1.0], vec![2.0]]));
        let r = duration_regulate(&mut g, k, &[2, 1], 1).unwrap();
        assert_eq!(g.value(r).data(), &[1.0, 1.0, 2.0]);
        let r = duration_regulate(&mut g, k, &[0, 3], 1).unwrap();
        assert_eq!(g.value(r).data(), &[2.0, 2.0, 2.0]);
        assert!(duration_regulate(&mut g, k, &[0, 0], 4).is_err());
    }

    #[test]
    fn mimic_length_law_and_determinism() {
        let s = Synthesizer::new(&tiny(), &mut ChaCha8Rng::seed_from_u64(0));
        let zs = SpeakerEmbedding::from_vec(vec![1.0, 2.0, 2.0]).unwrap();
        let gc = grouped(vec![2, 1, 3]);
        let out = s.infer(&gc, &zs, Mode::Mimic).unwrap();
        assert_eq!(out.mel.n_frames(), 4 * 6);
        assert_eq!(out, s.infer(&gc, &zs, Mode::Mimic).unwrap());
        let (h, d, p) = s.predict(&gc, &zs).unwrap();
        assert_eq!((h.shape(), d.len(), p.len()), ((3, 8), 3, 3));
    }

    #[test]
    fn zero_pitch_with_zero_bias_embedding_is_identity() {
        let s = Synthesizer::new(&tiny(), &mut ChaCha8Rng::seed_from_u64(1));
        let mut g = Graph::<f64>::new();
        let p = s.store.cast::<f64>().bind_frozen(&mut g);
        let h = g.constant(Tensor::full(3, 8, 0.7));
        let zero = g.constant(Tensor::zeros(3, 1));
        let k = s.model.add_pitch_embedding(&mut g, &p, h, zero);
        assert_eq!(g.value(k), g.value(h));
    }

    #[test]
    fn wrong_dims_are_rejected() {
        let s = Synthesizer::new(&tiny(), &mut ChaCha8Rng::seed_from_u64(2));
        let zs = SpeakerEmbedding::from_vec(vec![1.0; 5]).unwrap();
        assert!(s.infer(&grouped(vec![1]), &zs, Mode::Mimic).is_err());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("mimic".parse::<Mode>().unwrap(), Mode::Mimic);
        assert!("other".parse::<Mode>().is_err());
    }
}
