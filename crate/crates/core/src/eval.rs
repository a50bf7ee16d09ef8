//! Metrics: character error rate, equal error rate over cosine-scored
//! trials, and the speaker-probe classifier used to measure how much
//! speaker information an embedding carries.

use acevc_nn::layers::Linear;
use acevc_nn::{Adam, Builder, Graph, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::EvalConfig;
use crate::corpus::Dataset;
use crate::dsp::{mel_spectrogram, Waveform};
use crate::error::{Error, Result};
use crate::losses::{argmax_rows, ctc_greedy_decode};
use crate::sre::Sre;

/// Unit-cost edit distance.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn char_error_rate(reference: &str, hypothesis: &str) -> Result<f64> {
    let r: Vec<char> = reference.chars().collect();
    if r.is_empty() {
        return Err(Error::Data(
            "character error rate needs a non-empty reference".into(),
        ));
    }
    let h: Vec<char> = hypothesis.chars().collect();
    Ok(levenshtein(&r, &h) as f64 / r.len() as f64)
}

/// Verification trials: `(embedding_a, embedding_b, same_speaker)`.
#[derive(Clone, Debug, Default)]
pub struct TrialSet {
    pub pairs: Vec<(Vec<f32>, Vec<f32>, bool)>,
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Interpolated crossing of FAR and FRR given the integer counts at two
/// adjacent thresholds: `(accepted negatives, rejected positives)` at the
/// lower threshold `i` and the upper threshold `j`. The crossing is formed
/// as one exact integer ratio and rounded once.
pub fn crossing(i: (usize, usize), j: (usize, usize), n_neg: usize, n_pos: usize) -> f64 {
    let d = |(a, r): (usize, usize)| a as i128 * n_pos as i128 - r as i128 * n_neg as i128;
    let (di, dj) = (d(i), d(j));
    if di == 0 {
        return i.0 as f64 / n_neg as f64;
    }
    // FAR at weight w = di / (di - dj) along the segment, over n_neg.
    let den = di - dj;
    let (a0, a1) = (i.0 as i128, j.0 as i128);
    (a0 * den + di * (a1 - a0)) as f64 / (den * n_neg as i128) as f64
}

/// Equal error rate over raw scores; a trial is accepted when its score is
/// at least the threshold. Thresholds are the distinct scores plus +∞.
pub fn equal_error_rate_scores(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Data(
            "EER needs at least one positive and one negative trial".into(),
        ));
    }
    if positives.iter().chain(negatives).any(|s| !s.is_finite()) {
        return Err(Error::Data("non-finite trial score".into()));
    }
    let mut all: Vec<(f64, bool)> = positives
        .iter()
        .map(|&s| (s, true))
        .chain(negatives.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (np, nn) = (positives.len(), negatives.len());
    // Counts at threshold θ: negatives with score ≥ θ, positives with score < θ.
    let mut counts = Vec::new();
    let (mut below_pos, mut below_neg) = (0usize, 0usize);
    let mut k = 0;
    while k < all.len() {
        counts.push((nn - below_neg, below_pos));
        let s = all[k].0;
        while k < all.len() && all[k].0 == s {
            if all[k].1 {
                below_pos += 1;
            } else {
                below_neg += 1;
            }
            k += 1;
        }
    }
    counts.push((0, np));
    let d = |(a, r): (usize, usize)| a as i128 * np as i128 - r as i128 * nn as i128;
    for w in counts.windows(2) {
        if d(w[0]) == 0 {
            return Ok(crossing(w[0], w[0], nn, np));
        }
        if d(w[0]) > 0 && d(w[1]) <= 0 {
            return Ok(crossing(w[0], w[1], nn, np));
        }
    }
    unreachable!("FAR - FRR goes from non-negative to -1 across the sweep")
}

pub fn equal_error_rate(t: &TrialSet) -> Result<f64> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (a, b, same) in &t.pairs {
        let s = cosine(a, b);
        if *same {
            pos.push(s);
        } else {
            neg.push(s);
        }
    }
    equal_error_rate_scores(&pos, &neg)
}

/// Time-mean of a `T × D` sequence.
pub fn mean_pool(z: &Tensor<f32>) -> Vec<f32> {
    let mut acc = vec![0.0f64; z.cols()];
    for r in 0..z.rows() {
        for (a, &v) in acc.iter_mut().zip(z.row(r)) {
            *a += v as f64;
        }
    }
    acc.iter()
        .map(|&a| (a / z.rows().max(1) as f64) as f32)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub steps: usize,
    pub lr: f32,
    pub seed: u64,
    /// Scale each input feature to zero mean and unit variance over `train`.
    pub standardize: bool,
}

/// Trains a three-layer ReLU classifier on `train` features
/// (full batch) and returns its accuracy on `test`.
pub fn probe_accuracy(
    train: &[Vec<f32>],
    train_labels: &[usize],
    test: &[Vec<f32>],
    test_labels: &[usize],
    cfg: ProbeConfig,
) -> Result<f64> {
    if train.is_empty()
        || test.is_empty()
        || train.len() != train_labels.len()
        || test.len() != test_labels.len()
    {
        return Err(Error::Data(
            "probe needs matching non-empty feature and label sets".into(),
        ));
    }
    let n_classes = train_labels
        .iter()
        .chain(test_labels)
        .max()
        .map_or(0, |&m| m + 1);
    let distinct: std::collections::BTreeSet<usize> = train_labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::Data("probe needs at least two classes".into()));
    }
    let dim = train[0].len();
    if train.iter().chain(test).any(|v| v.len() != dim) {
        return Err(Error::Shape(
            "probe features have inconsistent widths".into(),
        ));
    }
    let n = train.len() as f64;
    let (mean, std): (Vec<f64>, Vec<f64>) = if cfg.standardize {
        (0..dim)
            .map(|j| {
                let m = train.iter().map(|v| v[j] as f64).sum::<f64>() / n;
                let var = train.iter().map(|v| (v[j] as f64 - m).powi(2)).sum::<f64>() / n;
                (m, var.sqrt().max(1e-8))
            })
            .unzip()
    } else {
        (vec![0.0; dim], vec![1.0; dim])
    };
    let standardize = |rows: &[Vec<f32>]| {
        Tensor::from_vec(
            rows.len(),
            dim,
            rows.iter()
                .flat_map(|v| {
                    v.iter()
                        .enumerate()
                        .map(|(j, &x)| ((x as f64 - mean[j]) / std[j]) as f32)
                })
                .collect(),
        )
    };
    let (xtr, xte) = (standardize(train), standardize(test));

    let mut store = ParamStore::new();
    let group = store.group("probe", cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let layers = {
        let mut b = Builder::new(&mut store, &mut rng, group);
        [
            Linear::new(&mut b, "l1", dim, cfg.hidden),
            Linear::new(&mut b, "l2", cfg.hidden, cfg.hidden),
            Linear::new(&mut b, "l3", cfg.hidden, n_classes),
        ]
    };
    let forward = |g: &mut Graph<f32>, p: &acevc_nn::Bound, x| {
        let h = layers[0].forward(g, p, x);
        let h = g.relu(h);
        let h = layers[1].forward(g, p, h);
        let h = g.relu(h);
        layers[2].forward(g, p, h)
    };
    let mut onehot = Tensor::zeros(train.len(), n_classes);
    for (i, &l) in train_labels.iter().enumerate() {
        onehot.set(i, l, -1.0 / train.len() as f32);
    }
    let mut adam = Adam::new(&store);
    for _ in 0..cfg.steps {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(xtr.clone());
        let logits = forward(&mut g, &p, x);
        let logp = g.log_softmax(logits);
        let y = g.constant(onehot.clone());
        let picked = g.mul(logp, y);
        let loss = g.sum_all(picked);
        acevc_nn::ensure_finite("probe", g.value(loss).item() as f64)?;
        let mut grads = g.backward(loss);
        let grads = p.grads(&mut grads);
        adam.step(&mut store, &grads)?;
    }
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let x = g.constant(xte);
    let logits = forward(&mut g, &p, x);
    let pred = argmax_rows(g.value(logits));
    let correct = pred.iter().zip(test_labels).filter(|(a, b)| a == b).count();
    Ok(correct as f64 / test.len() as f64)
}

/// Held-out probe accuracies on time-pooled content embeddings and on
/// speaker embeddings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeResult {
    pub content: f64,
    pub speaker: f64,
}

/// Extracts embeddings for `train` and `test` with a frozen extractor and
/// trains one probe per embedding type.
pub fn probe_extractor(
    sre: &Sre,
    data: &Dataset,
    train: &[usize],
    test: &[usize],
    cfg: &EvalConfig,
    seed: u64,
) -> Result<ProbeResult> {
    let features = |idx: &[usize]| -> Result<(Vec<Vec<f32>>, Vec<Vec<f32>>, Vec<usize>)> {
        let mut content = Vec::with_capacity(idx.len());
        let mut speaker = Vec::with_capacity(idx.len());
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            let e = &data.examples[i];
            let (c, s) = sre.extract(&e.mel)?;
            content.push(mean_pool(&c.z_c));
            speaker.push(s.z_s);
            labels.push(e.speaker);
        }
        Ok((content, speaker, labels))
    };
    let (ctr, str_, ytr) = features(train)?;
    let (cte, ste, yte) = features(test)?;
    let pc = ProbeConfig {
        hidden: cfg.probe_hidden,
        steps: cfg.probe_steps,
        lr: cfg.probe_lr,
        seed,
        standardize: cfg.probe_standardize,
    };
    Ok(ProbeResult {
        content: probe_accuracy(&ctr, &ytr, &cte, &yte, pc)?,
        speaker: probe_accuracy(&str_, &ytr, &ste, &yte, pc)?,
    })
}

/// CER between greedy transcriptions of two waveforms by the extractor's
/// content head; the source transcription is the reference.
pub fn transcribe_cer(sre: &Sre, source: &Waveform, converted: &Waveform) -> Result<f64> {
    let decode = |w: &Waveform| -> Result<String> {
        let (c, _) = sre.extract(&mel_spectrogram(w)?)?;
        Ok(crate::corpus::tokens_to_string(&ctc_greedy_decode(&c.p_c)))
    };
    let reference = decode(source)?;
    if reference.is_empty() {
        return Err(Error::Data("source transcription is empty".into()));
    }
    char_error_rate(&reference, &decode(converted)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cer_reference_values() {
        assert_eq!(char_error_rate("abc", "abc").unwrap(), 0.0);
        assert!((char_error_rate("abc", "axc").unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(char_error_rate("abc", "").unwrap(), 1.0);
        assert!(char_error_rate("", "a").is_err());
    }

    #[test]
    fn eer_reference_values() {
        assert_eq!(
            equal_error_rate_scores(&[0.9, 0.8], &[0.2, 0.1]).unwrap(),
            0.0
        );
        assert_eq!(
            equal_error_rate_scores(&[0.9, 0.1], &[0.8, 0.2]).unwrap(),
            0.5
        );
        assert_eq!(
            equal_error_rate_scores(&[0.3, 0.7], &[0.7, 0.3]).unwrap(),
            0.5
        );
        assert!(equal_error_rate_scores(&[0.3], &[]).is_err());
    }

    #[test]
    fn separable_probe_is_perfect() {
        let mk = |c: usize, i: usize| {
            vec![
                c as f32 * 3.0 + (i as f32 * 0.1).sin() * 0.2,
                (c as f32 - 1.0) * 2.0,
            ]
        };
        let train: Vec<Vec<f32>> = (0..30).map(|i| mk(i % 3, i)).collect();
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let test: Vec<Vec<f32>> = (0..9).map(|i| mk(i % 3, i + 100)).collect();
        let tl: Vec<usize> = (0..9).map(|i| i % 3).collect();
        let cfg = ProbeConfig {
            hidden: 16,
            steps: 100,
            lr: 1e-2,
            seed: 0,
            standardize: true,
        };
        assert_eq!(
            probe_accuracy(&train, &labels, &test, &tl, cfg).unwrap(),
            1.0
        );
        assert!(probe_accuracy(&train, &[0; 30], &test, &tl, cfg).is_err());
    }
}
