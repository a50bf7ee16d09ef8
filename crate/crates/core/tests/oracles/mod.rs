//! Independent reference implementations shared by the property suites.
#![allow(dead_code)]

use acevc_nn::Tensor;

const BLANK: usize = 0;

/// Negative log-probability of `target` summed over every one of the
/// `V^T` frame paths whose collapse equals it.
pub fn ctc_by_enumeration(log_probs: &Tensor<f64>, target: &[usize]) -> f64 {
    let (t, v) = log_probs.shape();
    let mut path = vec![0usize; t];
    let mut terms = Vec::new();
    loop {
        let mut collapsed = Vec::new();
        let mut prev = None;
        for &k in &path {
            if Some(k) != prev && k != BLANK {
                collapsed.push(k);
            }
            prev = Some(k);
        }
        if collapsed == target {
            terms.push(
                path.iter()
                    .enumerate()
                    .map(|(i, &k)| log_probs.get(i, k))
                    .sum::<f64>(),
            );
        }
        // Odometer increment over the path.
        let mut i = 0;
        loop {
            if i == t {
                let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if m == f64::NEG_INFINITY {
                    return f64::INFINITY;
                }
                return -(m + terms.iter().map(|x| (x - m).exp()).sum::<f64>().ln());
            }
            path[i] += 1;
            if path[i] < v {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Row-wise log-softmax of raw logits.
pub fn log_softmax_rows(logits: &Tensor<f64>) -> Tensor<f64> {
    let (t, v) = logits.shape();
    let mut out = Tensor::zeros(t, v);
    for r in 0..t {
        let row = logits.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        for c in 0..v {
            out.set(r, c, row[c] - lse);
        }
    }
    out
}

/// Minimum frames a CTC alignment of `target` needs.
pub fn ctc_needed(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Exact rational `p / q`.
#[derive(Clone, Copy, Debug)]
pub struct Ratio(pub i128, pub i128);

impl Ratio {
    pub fn to_f64(self) -> f64 {
        self.0 as f64 / self.1 as f64
    }
}

/// EER by brute force: every candidate threshold (each score and +∞) is
/// scored by direct counting, the thresholds are visited in increasing
/// order and the first sign change of FAR − FRR is interpolated in exact
/// rational arithmetic.
pub fn eer_by_sweep(pos: &[f64], neg: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = pos.iter().chain(neg).cloned().collect();
    thresholds.push(f64::INFINITY);
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let (np, nn) = (pos.len() as i128, neg.len() as i128);
    // FAR = fa / nn, FRR = fr / np; compare on the common denominator.
    let rates: Vec<(i128, i128)> = thresholds
        .iter()
        .map(|&th| {
            let fa = neg.iter().filter(|&&s| s >= th).count() as i128;
            let fr = pos.iter().filter(|&&s| s < th).count() as i128;
            (fa, fr)
        })
        .collect();
    let diff = |(fa, fr): (i128, i128)| fa * np - fr * nn;
    for k in 0..rates.len() {
        let dk = diff(rates[k]);
        if dk == 0 {
            return Ratio(rates[k].0, nn).to_f64();
        }
        if dk < 0 {
            assert!(k > 0, "FAR below FRR at the lowest threshold");
            let (a0, r0) = rates[k - 1];
            let (a1, r1) = rates[k];
            // Solve on the segment: FAR(t) = FRR(t) with t in (0, 1).
            // (a0 + t(a1 - a0)) np = (r0 + t(r1 - r0)) nn
            let num = a0 * np - r0 * nn;
            let den = num - ((a1 * np) - (r1 * nn));
            // EER = (a0 + num/den (a1 - a0)) / nn = (a0 den + num (a1 - a0)) / (den nn)
            return Ratio(a0 * den + num * (a1 - a0), den * nn).to_f64();
        }
    }
    unreachable!("FRR reaches 1 at +inf")
}
