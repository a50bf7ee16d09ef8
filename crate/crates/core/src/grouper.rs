//! Collapses runs of equal predicted tokens into averaged content vectors
//! with integer durations, and projects pitch onto the resulting groups.

use acevc_nn::Tensor;

use crate::error::{Error, Result};
use crate::losses::argmax_rows;
use crate::sre::ContentSequence;

#[derive(Clone, Debug, PartialEq)]
pub struct GroupedContent {
    /// `M × D_c` group means.
    pub g_c: Tensor<f32>,
    /// Run lengths in content steps; all ≥ 1 and summing to `T'`.
    pub durations: Vec<usize>,
    pub tokens: Vec<usize>,
    /// Mean normalized pitch per group; empty until [`segment_pitch`] runs.
    pub group_pitch: Vec<f32>,
}

impl GroupedContent {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn total_steps(&self) -> usize {
        self.durations.iter().sum()
    }
}

/// `(token, start, length)` for each maximal run.
pub fn runs(frames: &[usize]) -> Vec<(usize, usize, usize)> {
    let mut out: Vec<(usize, usize, usize)> = Vec::new();
    for (i, &k) in frames.iter().enumerate() {
        match out.last_mut() {
            Some((tok, _, len)) if *tok == k => *len += 1,
            _ => out.push((k, i, 1)),
        }
    }
    out
}

/// Inverse of grouping at the token level.
pub fn expand_tokens(tokens: &[usize], durations: &[usize]) -> Vec<usize> {
    tokens
        .iter()
        .zip(durations)
        .flat_map(|(&k, &d)| std::iter::repeat(k).take(d))
        .collect()
}

/// Groups consecutive steps with the same argmax token; blank runs form
/// groups like any other token.
pub fn group_content(c: &ContentSequence) -> Result<GroupedContent> {
    let (t, dim) = c.z_c.shape();
    if t == 0 {
        return Err(Error::Shape(
            "cannot group an empty content sequence".into(),
        ));
    }
    if c.p_c.rows() != t {
        return Err(Error::Shape(format!(
            "z_c has {t} steps but p_c has {}",
            c.p_c.rows()
        )));
    }
    let r = runs(&argmax_rows(&c.p_c));
    let mut data = Vec::with_capacity(r.len() * dim);
    for &(_, start, len) in &r {
        let mut acc = vec![0.0f64; dim];
        for row in start..start + len {
            for (a, &v) in acc.iter_mut().zip(c.z_c.row(row)) {
                *a += v as f64;
            }
        }
        data.extend(acc.iter().map(|&a| (a / len as f64) as f32));
    }
    Ok(GroupedContent {
        g_c: Tensor::from_vec(r.len(), dim, data),
        durations: r.iter().map(|x| x.2).collect(),
        tokens: r.iter().map(|x| x.0).collect(),
        group_pitch: Vec::new(),
    })
}

/// Mean of `norm_pitch` over mel frames `[r·start, r·(start + d))` for each
/// group, unvoiced zeros included. Spans are clipped to the available frames;
/// a fully clipped span yields 0.
pub fn segment_pitch(norm_pitch: &[f32], durations: &[usize], r: usize) -> Result<Vec<f32>> {
    if durations.is_empty() || durations.contains(&0) {
        return Err(Error::Shape("segment_pitch needs non-empty groups".into()));
    }
    let total = r * durations.iter().sum::<usize>();
    if norm_pitch.len() + r < total {
        return Err(Error::Shape(format!(
            "pitch contour of {} frames cannot cover {total} regulated frames",
            norm_pitch.len()
        )));
    }
    let mut start = 0;
    Ok(durations
        .iter()
        .map(|&d| {
            let lo = (r * start).min(norm_pitch.len());
            let hi = (r * (start + d)).min(norm_pitch.len());
            start += d;
            if hi > lo {
                (norm_pitch[lo..hi].iter().map(|&v| v as f64).sum::<f64>() / (hi - lo) as f64)
                    as f32
            } else {
                0.0
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(tokens: &[usize], vocab: usize) -> ContentSequence {
        let t = tokens.len();
        let mut p = Tensor::full(t, vocab, -5.0f32);
        for (i, &k) in tokens.iter().enumerate() {
            p.set(i, k, -0.1);
        }
        let z = Tensor::from_vec(t, 2, (0..2 * t).map(|i| i as f32).collect());
        ContentSequence { z_c: z, p_c: p }
    }

    #[test]
    fn documented_groupings() {
        let g = group_content(&seq(&[1, 1, 2, 2, 2, 0], 3)).unwrap();
        assert_eq!(
            (g.durations.clone(), g.tokens.clone()),
            (vec![2, 3, 1], vec![1, 2, 0])
        );
        let c = seq(&[1; 5], 3);
        let g = group_content(&c).unwrap();
        assert_eq!(g.durations, vec![5]);
        assert_eq!(g.g_c.data(), &[4.0, 5.0]);
        let c = seq(&[1, 2, 1, 2], 3);
        let g = group_content(&c).unwrap();
        assert_eq!(g.durations, vec![1; 4]);
        assert_eq!(g.g_c, c.z_c);
    }

    #[test]
    fn pitch_segments() {
        assert_eq!(segment_pitch(&[1.0; 4], &[1], 4).unwrap(), vec![1.0]);
        assert_eq!(
            segment_pitch(&[0., 0., 2., 2., 2., 2., 0., 0.], &[2], 4).unwrap(),
            vec![1.0]
        );
        assert_eq!(
            segment_pitch(&[0.0; 12], &[1, 2], 4).unwrap(),
            vec![0.0, 0.0]
        );
        assert!(segment_pitch(&[0.0; 3], &[2], 4).is_err());
        assert!(segment_pitch(&[0.0; 8], &[0, 2], 4).is_err());
    }
}
