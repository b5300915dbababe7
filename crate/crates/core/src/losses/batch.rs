//! Mini-batch assembly for every task a genome layout needs.

use std::collections::BTreeMap;

use rand::Rng;

use super::keys::{partner, transfer_target, GenomeLayout, LossKey, TaskKind};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::DenseArray;
use crate::synthgen::{make_misaligned, make_reversed, make_shuffled, Modality, MultiModalClip, TaskSample};

/// Binary task inputs, `[B·frames × frame_len]` with one label per clip.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryBatch {
    pub x: DenseArray,
    pub frames: usize,
    pub labels: Vec<f64>,
}

/// Alignment windows from two modalities, one label per pair.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignBatch {
    pub first: DenseArray,
    pub second: DenseArray,
    pub window: usize,
    pub labels: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub clip_ids: Vec<u64>,
    pub frames: usize,
    /// Whole clips per modality, `[B·F × frame_len]`.
    pub full: BTreeMap<Modality, DenseArray>,
    pub shuffle: BTreeMap<Modality, BinaryBatch>,
    pub reverse: BTreeMap<Modality, BinaryBatch>,
    /// Keyed by the first modality; the second is its partner.
    pub align: BTreeMap<Modality, AlignBatch>,
}

fn stack_rows(blocks: &[DenseArray]) -> Result<DenseArray> {
    let cols = blocks.first().map(|b| b.cols()).unwrap_or(0);
    let rows: usize = blocks.iter().map(|b| b.rows()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for b in blocks {
        data.extend_from_slice(b.data());
    }
    DenseArray::new(vec![rows, cols], data)
}

fn binary_batch(samples: Vec<TaskSample>, frames: usize) -> Result<BinaryBatch> {
    let labels = samples.iter().map(|s| s.label).collect();
    let blocks: Vec<DenseArray> = samples.into_iter().map(|mut s| s.inputs.remove(0)).collect();
    Ok(BinaryBatch {
        x: stack_rows(&blocks)?,
        frames,
        labels,
    })
}

impl Batch {
    /// Whole-clip matrices for `modalities` only; no binary-task samples.
    pub fn from_clips(clips: &[&MultiModalClip], modalities: &[Modality]) -> Result<Self> {
        let first = clips.first().ok_or_else(|| Error::invalid("empty batch"))?;
        let frames = first.frames();
        let mut full = BTreeMap::new();
        for &m in modalities {
            let blocks: Vec<DenseArray> = clips.iter().map(|c| c.frame_matrix(m)).collect();
            full.insert(m, stack_rows(&blocks)?);
        }
        Ok(Self {
            clip_ids: clips.iter().map(|c| c.clip_id).collect(),
            frames,
            full,
            shuffle: BTreeMap::new(),
            reverse: BTreeMap::new(),
            align: BTreeMap::new(),
        })
    }

    /// Everything the terms of `layout` read. Alignment negatives from
    /// another clip use the next clip in the batch.
    pub fn sample<R: Rng + ?Sized>(
        clips: &[&MultiModalClip],
        layout: &GenomeLayout,
        config: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let mut modalities = vec![Modality::Main];
        for key in layout.keys() {
            match *key {
                LossKey::Task(m, TaskKind::Transfer | TaskKind::Colorize) => {
                    modalities.extend([m, transfer_target(m)])
                }
                LossKey::Task(_, TaskKind::Shuffle | TaskKind::Backward | TaskKind::Align) => {}
                _ => modalities.extend(key.encoders()),
            }
        }
        modalities.sort();
        modalities.dedup();
        let mut batch = Self::from_clips(clips, &modalities)?;
        let n = clips.len();
        for key in layout.keys() {
            let LossKey::Task(m, task) = *key else { continue };
            match task {
                TaskKind::Shuffle => {
                    let s = clips.iter().map(|c| make_shuffled(c, m, rng)).collect::<Result<_>>()?;
                    batch.shuffle.insert(m, binary_batch(s, batch.frames)?);
                }
                TaskKind::Backward => {
                    let s = clips.iter().map(|c| make_reversed(c, m, rng)).collect::<Result<_>>()?;
                    batch.reverse.insert(m, binary_batch(s, batch.frames)?);
                }
                TaskKind::Align => {
                    let mut firsts = Vec::with_capacity(n);
                    let mut seconds = Vec::with_capacity(n);
                    let mut labels = Vec::with_capacity(n);
                    for i in 0..n {
                        let s = make_misaligned(
                            clips[i],
                            clips[(i + 1) % n],
                            m,
                            partner(m),
                            config.align_window,
                            config.align_offset,
                            rng,
                        )?;
                        labels.push(s.label);
                        let mut inputs = s.inputs.into_iter();
                        firsts.push(inputs.next().expect("first window"));
                        seconds.push(inputs.next().expect("second window"));
                    }
                    batch.align.insert(
                        m,
                        AlignBatch {
                            first: stack_rows(&firsts)?,
                            second: stack_rows(&seconds)?,
                            window: config.align_window,
                            labels,
                        },
                    );
                }
                _ => {}
            }
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.clip_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clip_ids.is_empty()
    }

    pub fn full(&self, m: Modality, key: &LossKey) -> Result<&DenseArray> {
        self.full
            .get(&m)
            .ok_or_else(|| Error::MissingInput(format!("{key} needs modality {} in the batch", m.letter())))
    }

    /// Rows of frames `range` of every clip in `m`, `[B·len(range) × frame_len]`.
    pub fn frame_range(&self, m: Modality, key: &LossKey, range: std::ops::Range<usize>) -> Result<DenseArray> {
        let full = self.full(m, key)?;
        let c = full.cols();
        let mut data = Vec::with_capacity(self.len() * range.len() * c);
        for i in 0..self.len() {
            for t in range.clone() {
                data.extend_from_slice(full.row(i * self.frames + t));
            }
        }
        DenseArray::new(vec![self.len() * range.len(), c], data)
    }
}
