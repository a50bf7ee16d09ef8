//! Training objectives for the speech representation extractor and the
//! synthesizer.
//!
//! Every loss has a graph form (differentiable, generic over precision) and
//! a plain evaluator for tests and metrics. CTC is the only one with a
//! hand-written backward rule; the rest are compositions of graph ops.

use acevc_nn::{Graph, NodeId, Real, Tensor};

use crate::error::{Error, Result};

/// CTC blank token index; language tokens occupy `1..V`.
pub const BLANK: usize = 0;

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Frames needed to emit `target`: one per token plus a blank between repeats.
pub fn ctc_min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_target(t: usize, v: usize, target: &[usize]) -> Result<()> {
    if let Some(&bad) = target.iter().find(|&&k| k == BLANK || k >= v) {
        return Err(Error::Loss(format!("target token {bad} outside 1..{v}")));
    }
    let need = ctc_min_frames(target);
    if need > t {
        return Err(Error::Loss(format!(
            "inadmissible CTC target: {} tokens need {need} frames, only {t} available",
            target.len()
        )));
    }
    Ok(())
}

/// Negative log-likelihood and its gradient with respect to `log_probs`.
///
/// The gradient is minus the posterior occupancy of each (frame, symbol)
/// cell, which is exact for unconstrained log-probability inputs.
pub fn ctc_loss_and_grad(log_probs: &Tensor<f64>, target: &[usize]) -> Result<(f64, Tensor<f64>)> {
    let (t_len, v) = log_probs.shape();
    check_target(t_len, v, target)?;
    let ext: Vec<usize> = std::iter::once(BLANK)
        .chain(target.iter().flat_map(|&k| [k, BLANK]))
        .collect();
    let s_len = ext.len();
    let lp = |t: usize, s: usize| log_probs.get(t, ext[s]);
    let skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_sum_exp(a, prev[s - 1]);
            }
            if skip(s) {
                a = log_sum_exp(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == ninf { ninf } else { a + lp(t, s) };
        }
    }
    let last = &alpha[(t_len - 1) * s_len..];
    let log_p = if s_len > 1 {
        log_sum_exp(last[s_len - 1], last[s_len - 2])
    } else {
        last[0]
    };

    let mut beta = vec![ninf; t_len * s_len];
    let tl = t_len - 1;
    beta[tl * s_len + s_len - 1] = lp(tl, s_len - 1);
    if s_len > 1 {
        beta[tl * s_len + s_len - 2] = lp(tl, s_len - 2);
    }
    for t in (0..tl).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut b = next[s];
            if s + 1 < s_len {
                b = log_sum_exp(b, next[s + 1]);
            }
            if s + 2 < s_len && skip(s + 2) {
                b = log_sum_exp(b, next[s + 2]);
            }
            beta[t * s_len + s] = if b == ninf { ninf } else { b + lp(t, s) };
        }
    }

    let mut grad = Tensor::zeros(t_len, v);
    for t in 0..t_len {
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if ab == ninf {
                continue;
            }
            let k = ext[s];
            let occ = (ab - lp(t, s) - log_p).exp();
            grad.set(t, k, grad.get(t, k) - occ);
        }
    }
    Ok((-log_p, grad))
}

pub fn ctc_loss(log_probs: &Tensor<f64>, target: &[usize]) -> Result<f64> {
    ctc_loss_and_grad(log_probs, target).map(|(l, _)| l)
}

/// Graph node for the CTC loss of one utterance, divided by the target
/// length when `per_token` is set (empty targets divide by 1).
pub fn ctc_node<T: Real>(
    g: &mut Graph<T>,
    log_probs: NodeId,
    target: &[usize],
    per_token: bool,
) -> Result<NodeId> {
    let lp = g.value(log_probs).cast::<f64>();
    let (loss, grad) = ctc_loss_and_grad(&lp, target)?;
    let norm = if per_token {
        target.len().max(1) as f64
    } else {
        1.0
    };
    let grad: Tensor<T> = grad.map(|x| x / norm).cast();
    let value = Tensor::scalar(T::of(loss / norm));
    Ok(g.custom(
        &[log_probs],
        value,
        Box::new(move |up, _| {
            let s = up.item();
            vec![Some(grad.map(|x| x * s))]
        }),
    ))
}

pub fn argmax_rows<T: Real>(m: &Tensor<T>) -> Vec<usize> {
    (0..m.rows())
        .map(|r| {
            m.row(r)
                .iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}

/// Per-frame argmax, repeats collapsed, blanks dropped.
pub fn ctc_greedy_decode<T: Real>(log_probs: &Tensor<T>) -> Vec<usize> {
    collapse_tokens(&argmax_rows(log_probs))
}

pub fn collapse_tokens(frames: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in frames {
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

fn chebyshev(m: u32, c: f64) -> (f64, f64) {
    // T_m(c) and its derivative m·U_{m-1}(c) by the three-term recurrences.
    let (mut t0, mut t1) = (1.0, c);
    let (mut u0, mut u1) = (1.0, 2.0 * c);
    if m == 0 {
        return (1.0, 0.0);
    }
    for _ in 1..m {
        (t0, t1) = (t1, 2.0 * c * t1 - t0);
        (u0, u1) = (u1, 2.0 * c * u1 - u0);
    }
    (t1, m as f64 * u0)
}

/// Target-class angle function `(-1)^k cos(mθ) - 2k`, monotone in θ on [0, π].
pub fn psi(margin: u32, cos: f64) -> (f64, f64) {
    let c = cos.clamp(-1.0, 1.0);
    let theta = c.acos();
    let k = ((margin as f64 * theta) / std::f64::consts::PI)
        .floor()
        .min(margin as f64 - 1.0)
        .max(0.0);
    let sign = if k as u64 % 2 == 0 { 1.0 } else { -1.0 };
    let (tm, dtm) = chebyshev(margin, c);
    (sign * tm - 2.0 * k, sign * dtm)
}

/// Angular-margin softmax cross-entropy averaged over the batch.
///
/// `embeddings` is `N × D`, `class_weights` is `C × D`; both are row
/// normalized inside the graph.
pub fn angular_softmax_node<T: Real>(
    g: &mut Graph<T>,
    embeddings: NodeId,
    class_weights: NodeId,
    labels: &[usize],
    margin: u32,
    scale: f64,
) -> Result<NodeId> {
    let (n, _) = g.shape(embeddings);
    let (c, _) = g.shape(class_weights);
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for {n} embeddings",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Loss(format!(
            "speaker label {bad} out of range for {c} classes"
        )));
    }
    if margin == 0 {
        return Err(Error::Loss("angular margin must be at least 1".into()));
    }
    let e = g.row_normalize(embeddings);
    let w = g.row_normalize(class_weights);
    let cos = g.matmul_t(e, false, w, true);
    let cv = g.value(cos).clone();
    let mut logits = Tensor::zeros(n, c);
    let mut deriv = Tensor::zeros(n, c);
    for i in 0..n {
        for j in 0..c {
            let x = cv.get(i, j).f64();
            let (v, d) = if j == labels[i] {
                psi(margin, x)
            } else {
                (x, 1.0)
            };
            logits.set(i, j, T::of(scale * v));
            deriv.set(i, j, T::of(scale * d));
        }
    }
    let logits = g.custom(
        &[cos],
        logits,
        Box::new(move |up, _| {
            let mut gx = up.clone();
            gx.data_mut()
                .iter_mut()
                .zip(deriv.data())
                .for_each(|(a, &b)| *a = *a * b);
            vec![Some(gx)]
        }),
    );
    let logp = g.log_softmax(logits);
    let mut onehot = Tensor::zeros(n, c);
    for (i, &l) in labels.iter().enumerate() {
        onehot.set(i, l, T::of(-1.0 / n as f64));
    }
    let onehot = g.constant(onehot);
    let picked = g.mul(logp, onehot);
    Ok(g.sum_all(picked))
}

pub fn angular_softmax_loss(
    embeddings: &Tensor<f64>,
    class_weights: &Tensor<f64>,
    labels: &[usize],
    margin: u32,
    scale: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let e = g.constant(embeddings.clone());
    let w = g.constant(class_weights.clone());
    let l = angular_softmax_node(&mut g, e, w, labels, margin, scale)?;
    Ok(g.value(l).item())
}

/// `1 − mean_t cos(a_t, b_t)`; zero-norm frames count as similarity 0.
pub fn cosine_disentangle_node<T: Real>(g: &mut Graph<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Shape(format!(
            "content sequences differ: {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    let an = g.row_normalize(a);
    let bn = g.row_normalize(b);
    let cos = g.row_dot(an, bn);
    let mean = g.mean_all(cos);
    let one = g.constant(Tensor::scalar(T::one()));
    Ok(g.sub(one, mean))
}

pub fn cosine_disentangle_loss(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(a.clone()), g.constant(b.clone()));
    let l = cosine_disentangle_node(&mut g, a, b)?;
    Ok(g.value(l).item())
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SreLossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for SreLossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

pub fn sre_loss(l_content: f64, l_sv: f64, l_dis: f64, w: SreLossWeights) -> f64 {
    l_content + w.alpha * l_sv + w.beta * l_dis
}

/// Graph form of [`sre_loss`]; a zero weight drops its term from the graph.
pub fn sre_loss_node<T: Real>(
    g: &mut Graph<T>,
    content: NodeId,
    sv: Option<NodeId>,
    dis: Option<NodeId>,
    w: SreLossWeights,
) -> NodeId {
    let mut total = content;
    for (term, weight) in [(sv, w.alpha), (dis, w.beta)] {
        if let Some(t) = term.filter(|_| weight != 0.0) {
            let scaled = g.scale(t, T::of(weight));
            total = g.add(total, scaled);
        }
    }
    total
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthLossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for SynthLossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.1,
        }
    }
}

/// Regression target for an integer duration.
pub fn log_duration(d: usize) -> f64 {
    (d as f64).ln_1p()
}

/// Inverse of [`log_duration`] for predictions: `round(expm1(x))`, floored at 0.
pub fn duration_from_log(x: f64) -> usize {
    x.exp_m1().round().max(0.0) as usize
}

/// Individual synthesizer loss terms as graph nodes.
pub struct SynthTerms {
    pub mel: NodeId,
    pub pitch: NodeId,
    pub duration: NodeId,
    pub total: NodeId,
}

/// Mel MSE plus weighted pitch and log-duration MSEs. `durations` are the
/// integer targets; `dur_pred` lives in log(1+d) space.
pub fn synth_loss_node<T: Real>(
    g: &mut Graph<T>,
    mel_pred: NodeId,
    mel_target: NodeId,
    pitch_pred: NodeId,
    pitch_target: &[f32],
    dur_pred: NodeId,
    durations: &[usize],
    w: SynthLossWeights,
) -> Result<SynthTerms> {
    let check = |name: &str, got: (usize, usize), want: (usize, usize)| {
        if got == want {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{name}: prediction {got:?} vs target {want:?}"
            )))
        }
    };
    check("mel", g.shape(mel_pred), g.shape(mel_target))?;
    check("pitch", g.shape(pitch_pred), (pitch_target.len(), 1))?;
    check("duration", g.shape(dur_pred), (durations.len(), 1))?;
    let p = g.constant(Tensor::from_vec(
        pitch_target.len(),
        1,
        pitch_target.iter().map(|&x| T::of(x as f64)).collect(),
    ));
    let d = g.constant(Tensor::from_vec(
        durations.len(),
        1,
        durations.iter().map(|&x| T::of(log_duration(x))).collect(),
    ));
    let mel = g.mse(mel_pred, mel_target);
    let pitch = g.mse(pitch_pred, p);
    let duration = g.mse(dur_pred, d);
    let wp = g.scale(pitch, T::of(w.lambda1));
    let wd = g.scale(duration, T::of(w.lambda2));
    let partial = g.add(mel, wp);
    let total = g.add(partial, wd);
    Ok(SynthTerms {
        mel,
        pitch,
        duration,
        total,
    })
}

/// Plain evaluator of the synthesizer objective.
pub fn synth_loss(
    mel_pred: &Tensor<f64>,
    mel_target: &Tensor<f64>,
    pitch_pred: &[f64],
    pitch_target: &[f32],
    dur_pred: &[f64],
    durations: &[usize],
    w: SynthLossWeights,
) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(mel_pred.clone());
    let b = g.constant(mel_target.clone());
    let pp = g.constant(Tensor::from_vec(pitch_pred.len(), 1, pitch_pred.to_vec()));
    let dp = g.constant(Tensor::from_vec(dur_pred.len(), 1, dur_pred.to_vec()));
    let t = synth_loss_node(&mut g, a, b, pp, pitch_target, dp, durations, w)?;
    Ok(g.value(t.total).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(t: usize, v: usize) -> Tensor<f64> {
        Tensor::full(t, v, -(v as f64).ln())
    }

    #[test]
    fn ctc_small_cases() {
        let mut lp = Tensor::full(1, 2, f64::NEG_INFINITY);
        lp.set(0, 1, 0.0);
        assert_eq!(ctc_loss(&lp, &[1]).unwrap(), 0.0);
        let l = ctc_loss(&uniform(2, 3), &[1]).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ctc_rejects_inadmissible_targets() {
        assert!(ctc_loss(&uniform(2, 3), &[1, 1]).is_err());
        assert!(ctc_loss(&uniform(3, 3), &[1, 1]).is_ok());
        assert!(ctc_loss(&uniform(3, 3), &[0]).is_err());
    }

    #[test]
    fn greedy_decode_rules() {
        let rows = |ids: &[usize]| {
            let mut t = Tensor::<f64>::zeros(ids.len(), 3);
            for (i, &k) in ids.iter().enumerate() {
                t.set(i, k, 1.0);
            }
            t
        };
        assert_eq!(ctc_greedy_decode(&rows(&[1, 1, 0, 2, 2])), vec![1, 2]);
        assert_eq!(ctc_greedy_decode(&rows(&[0, 0, 0])), Vec::<usize>::new());
        assert_eq!(ctc_greedy_decode(&rows(&[1, 0, 1])), vec![1, 1]);
    }

    #[test]
    fn asoftmax_two_class_hand_value() {
        let e = Tensor::from_rows(&[vec![1.0, 0.0]]);
        let w = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let l = angular_softmax_loss(&e, &w, &[0], 1, 1.0).unwrap();
        let expect = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((l - expect).abs() < 1e-12);
        let wrong = angular_softmax_loss(&e, &w, &[1], 2, 30.0).unwrap();
        let right = angular_softmax_loss(&e, &w, &[0], 2, 30.0).unwrap();
        assert!(wrong > right);
        assert!(angular_softmax_loss(&e, &w, &[2], 2, 30.0).is_err());
    }

    #[test]
    fn psi_is_continuous_and_decreasing() {
        let mut prev = f64::INFINITY;
        for i in 0..=1000 {
            let theta = std::f64::consts::PI * i as f64 / 1000.0;
            let (v, _) = psi(2, theta.cos());
            assert!(v <= prev + 1e-9, "psi increased at {theta}");
            prev = v;
        }
        assert!((psi(2, -1.0).0 + 3.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_loss_reference_points() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]);
        let neg = a.map(|x| -x);
        let orth = Tensor::from_rows(&[vec![-2.0, 1.0], vec![0.5, 1.0]]);
        assert!(cosine_disentangle_loss(&a, &a).unwrap().abs() < 1e-12);
        assert!((cosine_disentangle_loss(&a, &neg).unwrap() - 2.0).abs() < 1e-12);
        assert!((cosine_disentangle_loss(&a, &orth).unwrap() - 1.0).abs() < 1e-12);
        let zero = Tensor::zeros(2, 2);
        assert!((cosine_disentangle_loss(&a, &zero).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn combined_weights() {
        assert_eq!(
            sre_loss(
                1.0,
                2.0,
                0.0,
                SreLossWeights {
                    alpha: 0.5,
                    beta: 1.0
                }
            ),
            2.0
        );
        assert_eq!(sre_loss(0.0, 0.0, 0.0, SreLossWeights::default()), 0.0);
        let y = Tensor::full(3, 2, 1.0);
        let off = y.map(|v| v + 0.5);
        let d = [2usize, 0];
        let dp: Vec<f64> = d.iter().map(|&x| log_duration(x)).collect();
        let l = synth_loss(
            &off,
            &y,
            &[0.1, 0.2],
            &[0.1, 0.2],
            &dp,
            &d,
            SynthLossWeights::default(),
        )
        .unwrap();
        assert!((l - 0.25).abs() < 1e-7, "{l}");
    }

    #[test]
    fn duration_rounding_clamps_negative() {
        assert_eq!(duration_from_log((-0.2f64).ln_1p()), 0);
        assert_eq!(duration_from_log(log_duration(7)), 7);
    }
}
