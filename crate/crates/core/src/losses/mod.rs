//! Self-supervised task losses, distillation, and the weighted combiner.

mod batch;
mod keys;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use batch::{AlignBatch, Batch, BinaryBatch};
pub use keys::{partner, transfer_target, GenomeLayout, LossKey, LossWeights, TaskKind};

use crate::error::{Error, Result};
use crate::model::{EncoderVars, ModelBundle};
use crate::numerics::{bce_term, DenseArray, Tape, Var};
use crate::synthgen::{Modality, SampleKind, TaskSample};


fn check_same(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(op, &[a.len()], &[b.len()]));
    }
    Ok(())
}

fn mse(op: &'static str, a: &DenseArray, b: &DenseArray) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    let n = a.len().max(1) as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// Mean squared elementwise difference.
pub fn recon_loss(predicted: &DenseArray, target: &DenseArray) -> Result<f64> {
    mse("recon_loss", predicted, target)
}

/// Binary cross-entropy with `p` clamped to `[1e-12, 1 - 1e-12]`.
pub fn bce_loss(p: f64, y: f64) -> f64 {
    bce_term(p, y)
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `‖x1 - x2‖ + max(0, alpha - ‖x1 - xn‖)` with unsquared norms.
pub fn contrastive_loss(x1: &[f64], x2: &[f64], xn: &[f64], alpha: f64) -> Result<f64> {
    check_same("contrastive_loss", x1, x2)?;
    check_same("contrastive_loss", x1, xn)?;
    if !(alpha > 0.0) {
        return Err(Error::invalid("contrastive margin must be positive"));
    }
    Ok(l2(x1, x2) + (alpha - l2(x1, xn)).max(0.0))
}

/// Mean squared difference between a main tap and an auxiliary tap.
pub fn distill_loss(aux_tap: &DenseArray, main_tap: &DenseArray) -> Result<f64> {
    mse("distill_loss", main_tap, aux_tap)
}

/// Recorded distillation term; no gradient reaches `aux`.
pub fn distill_var(tape: &mut Tape, aux: Var, main: Var) -> Result<Var> {
    let aux = tape.detach(aux);
    tape.mean_squared_diff(main, aux)
}

/// Recorded contrastive term averaged over rows of `[n × D]` inputs.
pub fn contrastive_var(tape: &mut Tape, x1: Var, x2: Var, xn: Var, alpha: f64) -> Result<Var> {
    let pos = tape.sub(x1, x2)?;
    let pos = tape.row_norm(pos)?;
    let pos = tape.mean(pos);
    let neg = tape.sub(x1, xn)?;
    let neg = tape.row_norm(neg)?;
    let neg = tape.scale_shift(neg, -1.0, alpha);
    let neg = tape.relu(neg);
    let neg = tape.mean(neg);
    tape.weighted_sum(&[(pos, 1.0), (neg, 1.0)])
}

/// Embeds both windows of an alignment sample for `key`, concatenates the
/// embeddings and scores them with that key's binary head.
pub fn alignment_loss(bundle: &ModelBundle, key: &LossKey, sample: &TaskSample) -> Result<f64> {
    let LossKey::Task(m, TaskKind::Align) = *key else {
        return Err(Error::invalid(format!("{key} is not an alignment term")));
    };
    if sample.kind != SampleKind::Align || sample.inputs.len() != 2 {
        return Err(Error::invalid("alignment_loss needs a two-window alignment sample"));
    }
    let mut tape = Tape::new();
    let window = sample.inputs[0].rows();
    let a = tape.input(sample.inputs[0].clone());
    let b = tape.input(sample.inputs[1].clone());
    let loss = align_term(&mut tape, bundle, key, m, a, b, window, vec![sample.label])?;
    Ok(tape.scalar(loss))
}

#[allow(clippy::too_many_arguments)]
fn align_term(
    tape: &mut Tape,
    bundle: &ModelBundle,
    key: &LossKey,
    m: Modality,
    first: Var,
    second: Var,
    window: usize,
    labels: Vec<f64>,
) -> Result<Var> {
    let e1 = bundle.embed_var(tape, m, first, window)?;
    let e2 = bundle.embed_var(tape, partner(m), second, window)?;
    let cat = tape.concat_cols(e1.embedding, e2.embedding)?;
    let p = bundle.head_var(tape, key, cat)?;
    tape.bce(p, labels)
}

/// Unweighted value of each computed term and the weighted total.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub parts: BTreeMap<LossKey, f64>,
    pub weights: BTreeMap<LossKey, f64>,
    /// Terms not computed because their weight was zero.
    pub skipped: Vec<LossKey>,
    pub total: f64,
}

impl LossBreakdown {
    /// `Σ weight·part` in canonical order.
    pub fn weighted_sum(&self) -> f64 {
        self.parts.iter().map(|(k, v)| self.weights[k] * v).sum()
    }
}

struct Encoded<'a> {
    bundle: &'a ModelBundle,
    batch: &'a Batch,
    full: BTreeMap<Modality, EncoderVars>,
}

impl Encoded<'_> {
    fn get(&mut self, tape: &mut Tape, m: Modality, key: &LossKey) -> Result<EncoderVars> {
        if let Some(e) = self.full.get(&m) {
            return Ok(e.clone());
        }
        let x = tape.input(self.batch.full(m, key)?.clone());
        let e = self.bundle.embed_var(tape, m, x, self.batch.frames)?;
        self.full.insert(m, e.clone());
        Ok(e)
    }
}

fn term(tape: &mut Tape, enc: &mut Encoded, key: &LossKey) -> Result<Var> {
    let (bundle, batch) = (enc.bundle, enc.batch);
    let b = batch.len();
    let f = batch.frames;
    let reshaped = |tape: &mut Tape, x: DenseArray, rows_per: usize| -> Result<Var> {
        let cols = x.cols() * rows_per;
        let v = tape.input(x.reshape(&[b, cols])?);
        Ok(v)
    };
    match *key {
        LossKey::Task(m, TaskKind::Reconstruct) => {
            let e = enc.get(tape, m, key)?;
            let y = bundle.decode_var(tape, key, e.embedding)?;
            let target = reshaped(tape, batch.full(m, key)?.clone(), f)?;
            tape.mean_squared_diff(y, target)
        }
        LossKey::Task(m, TaskKind::FuturePredict) => {
            let t = bundle.config.future_frames;
            let x = tape.input(batch.frame_range(m, key, 0..t)?);
            let e = bundle.embed_var(tape, m, x, t)?;
            let y = bundle.decode_var(tape, key, e.embedding)?;
            let target = reshaped(tape, batch.frame_range(m, key, t..f)?, f - t)?;
            tape.mean_squared_diff(y, target)
        }
        LossKey::Task(m, TaskKind::Transfer | TaskKind::Colorize) => {
            let e = enc.get(tape, m, key)?;
            let y = bundle.decode_var(tape, key, e.embedding)?;
            let target = reshaped(tape, batch.full(transfer_target(m), key)?.clone(), f)?;
            tape.mean_squared_diff(y, target)
        }
        LossKey::Task(m, task @ (TaskKind::Shuffle | TaskKind::Backward)) => {
            let source = if task == TaskKind::Shuffle { &batch.shuffle } else { &batch.reverse };
            let s = source
                .get(&m)
                .ok_or_else(|| Error::MissingInput(format!("{key} has no samples in the batch")))?;
            let x = tape.input(s.x.clone());
            let e = bundle.embed_var(tape, m, x, s.frames)?;
            let p = bundle.head_var(tape, key, e.embedding)?;
            tape.bce(p, s.labels.clone())
        }
        LossKey::Task(m, TaskKind::Align) => {
            let s = batch
                .align
                .get(&m)
                .ok_or_else(|| Error::MissingInput(format!("{key} has no samples in the batch")))?;
            let a = tape.input(s.first.clone());
            let c = tape.input(s.second.clone());
            align_term(tape, bundle, key, m, a, c, s.window, s.labels.clone())
        }
        LossKey::Task(m, TaskKind::Embed) => {
            if b < 2 {
                return Err(Error::invalid(format!("{key} needs at least 2 clips per batch")));
            }
            let x1 = enc.get(tape, m, key)?.embedding;
            let x2 = enc.get(tape, partner(m), key)?.embedding;
            let xn = tape.gather_rows(x2, (0..b).map(|i| (i + 1) % b).collect())?;
            contrastive_var(tape, x1, x2, xn, bundle.config.contrastive_margin)
        }
        LossKey::Distill(m, layer) => {
            let main = enc.get(tape, Modality::Main, key)?;
            let aux = enc.get(tape, m, key)?;
            let (mt, at) = (main.taps.get(layer - 1), aux.taps.get(layer - 1));
            match (mt, at) {
                (Some(&mt), Some(&at)) => distill_var(tape, at, mt),
                _ => Err(Error::invalid(format!("{key} refers to a missing tap"))),
            }
        }
    }
}

/// Records the weighted loss on `tape` and returns its node with the
/// breakdown. With `skip_zero_weights`, zero-weight terms are not computed
/// and are listed in [`LossBreakdown::skipped`].
pub fn record_total_loss(
    tape: &mut Tape,
    weights: &LossWeights,
    bundle: &ModelBundle,
    batch: &Batch,
    skip_zero_weights: bool,
) -> Result<(Var, LossBreakdown)> {
    weights.check_layout(&bundle.layout)?;
    let mut enc = Encoded {
        bundle,
        batch,
        full: BTreeMap::new(),
    };
    let mut terms = Vec::new();
    let mut parts = BTreeMap::new();
    let mut skipped = Vec::new();
    for (key, &w) in weights.iter() {
        if skip_zero_weights && w == 0.0 {
            skipped.push(*key);
            continue;
        }
        let v = term(tape, &mut enc, key)?;
        let value = tape.scalar(v);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss term {key}")));
        }
        parts.insert(*key, value);
        terms.push((v, w));
    }
    let total = if terms.is_empty() {
        tape.input(DenseArray::scalar(0.0))
    } else {
        tape.weighted_sum(&terms)?
    };
    let breakdown = LossBreakdown {
        parts,
        weights: weights.iter().map(|(k, &w)| (*k, w)).collect(),
        skipped,
        total: tape.scalar(total),
    };
    Ok((total, breakdown))
}

/// Every term's unweighted value and the weighted total.
pub fn total_loss(weights: &LossWeights, bundle: &ModelBundle, batch: &Batch) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    record_total_loss(&mut tape, weights, bundle, batch, false).map(|(_, b)| b)
}
