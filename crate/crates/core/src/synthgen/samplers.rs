//! Binary self-supervision samples: frame order, playback direction, and
//! cross-modal temporal alignment. Label 1 always means "unmodified".

use rand::seq::SliceRandom;
use rand::Rng;

use super::{Modality, MultiModalClip};
use crate::error::{Error, Result};
use crate::numerics::DenseArray;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleKind {
    Shuffle,
    Reverse,
    Align,
}

/// How a misaligned pair was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NegativeKind {
    /// Second window taken from the same clip at a different time.
    Shifted,
    /// Second window taken from another clip.
    OtherClip,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSample {
    pub kind: SampleKind,
    /// One `frames × frame_len` matrix, or two for alignment.
    pub inputs: Vec<DenseArray>,
    pub label: f64,
    /// Frame indices of each input, in order.
    pub frame_index: Vec<Vec<usize>>,
    pub negative: Option<NegativeKind>,
}

fn pick_rows(m: &DenseArray, rows: &[usize]) -> DenseArray {
    let c = m.cols();
    let mut data = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        data.extend_from_slice(m.row(r));
    }
    DenseArray::new(vec![rows.len(), c], data).unwrap()
}

/// Uniform permutation of `0..n` other than the identity.
pub(crate) fn non_identity_permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        p.shuffle(rng);
        if p.iter().enumerate().any(|(i, &v)| i != v) {
            return p;
        }
    }
}

fn order_sample<R: Rng + ?Sized>(
    clip: &MultiModalClip,
    modality: Modality,
    kind: SampleKind,
    rng: &mut R,
) -> Result<TaskSample> {
    let f = clip.frames();
    if f < 3 {
        return Err(Error::invalid("ordering samples need at least 3 frames"));
    }
    let frames = clip.frame_matrix(modality);
    let keep = rng.random_bool(0.5);
    let order: Vec<usize> = if keep {
        (0..f).collect()
    } else if kind == SampleKind::Shuffle {
        non_identity_permutation(f, rng)
    } else {
        (0..f).rev().collect()
    };
    Ok(TaskSample {
        kind,
        inputs: vec![pick_rows(&frames, &order)],
        label: if keep { 1.0 } else { 0.0 },
        frame_index: vec![order],
        negative: None,
    })
}

/// Half the time the original frames (label 1), otherwise a random
/// non-identity frame permutation (label 0).
pub fn make_shuffled<R: Rng + ?Sized>(
    clip: &MultiModalClip,
    modality: Modality,
    rng: &mut R,
) -> Result<TaskSample> {
    order_sample(clip, modality, SampleKind::Shuffle, rng)
}

/// Half the time the original frames (label 1), otherwise time-reversed
/// (label 0).
pub fn make_reversed<R: Rng + ?Sized>(
    clip: &MultiModalClip,
    modality: Modality,
    rng: &mut R,
) -> Result<TaskSample> {
    order_sample(clip, modality, SampleKind::Reverse, rng)
}

/// Start indices `(first, second)` with `|first - second| >= offset`, drawn
/// uniformly from all such pairs.
fn shifted_starts<R: Rng + ?Sized>(max_start: usize, offset: usize, rng: &mut R) -> (usize, usize) {
    let pairs: Vec<(usize, usize)> = (0..=max_start)
        .flat_map(|a| (0..=max_start).map(move |b| (a, b)))
        .filter(|&(a, b)| a.abs_diff(b) >= offset)
        .collect();
    pairs[rng.random_range(0..pairs.len())]
}

/// A `(first, second)` window pair of length `window`. Positives share
/// frame indices within `clip_a`; negatives either shift the second window
/// by at least `offset_frames` within `clip_a` or take it from `clip_b`,
/// with equal probability.
#[allow(clippy::too_many_arguments)]
pub fn make_misaligned<R: Rng + ?Sized>(
    clip_a: &MultiModalClip,
    clip_b: &MultiModalClip,
    first: Modality,
    second: Modality,
    window: usize,
    offset_frames: usize,
    rng: &mut R,
) -> Result<TaskSample> {
    if offset_frames == 0 {
        return Err(Error::invalid("alignment offset must be at least 1 frame"));
    }
    let f = clip_a.frames();
    if window == 0 || window > f || f - window < offset_frames || clip_b.frames() != f {
        return Err(Error::invalid(format!(
            "window {window} with offset {offset_frames} does not fit {f} frames"
        )));
    }
    let max_start = f - window;
    let a_frames = clip_a.frame_matrix(first);
    let positive = rng.random_bool(0.5);
    let (s1, s2, source, negative) = if positive {
        let s = rng.random_range(0..=max_start);
        (s, s, clip_a, None)
    } else if rng.random_bool(0.5) {
        let (s1, s2) = shifted_starts(max_start, offset_frames, rng);
        (s1, s2, clip_a, Some(NegativeKind::Shifted))
    } else {
        let s = rng.random_range(0..=max_start);
        (s, s, clip_b, Some(NegativeKind::OtherClip))
    };
    let idx1: Vec<usize> = (s1..s1 + window).collect();
    let idx2: Vec<usize> = (s2..s2 + window).collect();
    let second_frames = source.frame_matrix(second);
    Ok(TaskSample {
        kind: SampleKind::Align,
        inputs: vec![pick_rows(&a_frames, &idx1), pick_rows(&second_frames, &idx2)],
        label: if positive { 1.0 } else { 0.0 },
        frame_index: vec![idx1, idx2],
        negative,
    })
}
