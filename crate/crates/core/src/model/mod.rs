//! Per-modality encoders, decoders and binary heads, held together in a
//! [`ModelBundle`] whose parameters live in a single [`ParamSet`].
//!
//! Parameter names:
//! - `enc.<M>.l<i>.{w,b}` hidden layer `i` (0-based) of modality `M`
//! - `enc.<M>.out.{w,b}` temporal-pair projection to the embedding
//! - `dec.<key>.l0` / `dec.<key>.l1` decoder layers for a loss key
//! - `head.<key>` binary head for a loss key

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::losses::{transfer_target, GenomeLayout, LossKey, TaskKind};
use crate::numerics::{affine_forward, logistic, DenseArray, ParamSet, Tape, Var};
use crate::synthgen::{DatasetConfig, Modality, MultiModalClip};

#[cfg(test)]
mod tests;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Widths of the per-frame hidden layers; one tap per entry.
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub decoder_hidden: usize,
    /// Leading frames fed to future prediction; the rest are targets.
    pub future_frames: usize,
    pub align_window: usize,
    pub align_offset: usize,
    pub contrastive_margin: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 64],
            embed_dim: 32,
            decoder_hidden: 64,
            future_frames: 6,
            align_window: 4,
            align_offset: 2,
            contrastive_margin: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, frames: usize) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::invalid("encoder needs at least one non-empty hidden layer"));
        }
        if self.embed_dim == 0 || self.decoder_hidden == 0 {
            return Err(Error::invalid("embed_dim and decoder_hidden must be positive"));
        }
        if self.future_frames < 2 || self.future_frames >= frames {
            return Err(Error::invalid(format!(
                "future_frames {} must be in [2, {})",
                self.future_frames, frames
            )));
        }
        if self.align_window < 2
            || self.align_offset == 0
            || self.align_window + self.align_offset > frames
        {
            return Err(Error::invalid(format!(
                "alignment window {} with offset {} does not fit {frames} frames",
                self.align_window, self.align_offset
            )));
        }
        if !(self.contrastive_margin > 0.0) {
            return Err(Error::invalid("contrastive margin must be positive"));
        }
        Ok(())
    }
}

/// Hidden activations captured during a forward pass, by 1-based layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TapActivations(pub Vec<(usize, DenseArray)>);

/// Output of a recorded encoder pass.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    /// `[n × D]`
    pub embedding: Var,
    /// Post-rectifier hidden activations, `[n·F × hidden[i]]`.
    pub taps: Vec<Var>,
}

/// Per-frame affine+rectifier stack, a kernel-2 temporal projection to `D`,
/// then a mean over the `F - 1` frame pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityEncoder {
    pub modality: Modality,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

impl ModalityEncoder {
    pub fn prefix(&self) -> String {
        format!("enc.{}", self.modality.letter())
    }

    pub fn init_params(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<()> {
        let p = self.prefix();
        let mut fan_in = self.input_dim;
        for (i, &h) in self.hidden.iter().enumerate() {
            params.insert_affine(&format!("{p}.l{i}"), fan_in, h, rng)?;
            fan_in = h;
        }
        params.insert_affine(&format!("{p}.out"), 2 * fan_in, self.embed_dim, rng)
    }

    /// `x` is `[n·frames × input_dim]`, frames of each clip contiguous.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        x: Var,
        frames: usize,
    ) -> Result<EncoderVars> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.input_dim || frames < 2 || shape[0] % frames != 0 {
            return Err(Error::shape(
                "embed",
                &shape,
                &[frames, self.input_dim],
            ));
        }
        let p = self.prefix();
        let mut h = x;
        let mut taps = Vec::with_capacity(self.hidden.len());
        for i in 0..self.hidden.len() {
            let z = affine_forward(tape, params, &format!("{p}.l{i}"), h)?;
            h = tape.relu(z);
            taps.push(h);
        }
        let pairs = tape.temporal_pairs(h, frames)?;
        let e = affine_forward(tape, params, &format!("{p}.out"), pairs)?;
        let embedding = tape.mean_groups(e, frames - 1)?;
        Ok(EncoderVars { embedding, taps })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderKind {
    Reconstruct,
    FuturePredict,
    CrossModal(Modality),
}

/// Embedding → rectified hidden layer → flattened target frame block.
/// No temporal structure: every target frame comes from the one embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderHead {
    pub key: LossKey,
    pub kind: DecoderKind,
    pub embed_dim: usize,
    pub hidden: usize,
    /// Values in one output row.
    pub output_dim: usize,
}

impl DecoderHead {
    pub fn prefix(&self) -> String {
        format!("dec.{}", self.key)
    }

    pub fn init_params(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<()> {
        let p = self.prefix();
        params.insert_affine(&format!("{p}.l0"), self.embed_dim, self.hidden, rng)?;
        params.insert_affine(&format!("{p}.l1"), self.hidden, self.output_dim, rng)
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, embedding: Var) -> Result<Var> {
        let p = self.prefix();
        let h = affine_forward(tape, params, &format!("{p}.l0"), embedding)?;
        let h = tape.relu(h);
        affine_forward(tape, params, &format!("{p}.l1"), h)
    }
}

/// Single fully-connected layer with a logistic output.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryHead {
    pub w: Vec<f64>,
    pub b: f64,
}

impl BinaryHead {
    pub fn zeros(dim: usize) -> Self {
        Self { w: vec![0.0; dim], b: 0.0 }
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.w.len() {
            return Err(Error::shape("binary_predict", &[x.len()], &[self.w.len()]));
        }
        let z: f64 = self.w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + self.b;
        Ok(logistic(z))
    }
}

/// All trainable networks needed by a genome layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub data: DatasetConfig,
    pub layout: GenomeLayout,
    pub params: ParamSet,
}

impl ModelBundle {
    /// Fresh Glorot-initialized bundle. Sections are initialized in a fixed
    /// order from one seeded stream, so `seed` fixes every value.
    pub fn new(
        layout: &GenomeLayout,
        data: &DatasetConfig,
        config: &ModelConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut bundle = Self {
            config: config.clone(),
            data: data.clone(),
            layout: layout.clone(),
            params: ParamSet::new(),
        };
        bundle.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for m in bundle.modalities() {
            bundle.encoder(m).init_params(&mut params, &mut rng)?;
        }
        for key in layout.keys() {
            if let Some(dec) = bundle.decoder(key) {
                dec.init_params(&mut params, &mut rng)?;
            }
            if let Some(dim) = bundle.head_dim(key) {
                params.insert_affine(&format!("head.{key}"), dim, 1, &mut rng)?;
            }
        }
        bundle.params = params;
        Ok(bundle)
    }

    /// Wraps loaded parameters, checking names and shapes against a fresh
    /// bundle of the same configuration.
    pub fn from_params(
        layout: &GenomeLayout,
        data: &DatasetConfig,
        config: &ModelConfig,
        params: ParamSet,
    ) -> Result<Self> {
        let mut bundle = Self::new(layout, data, config, 0)?;
        if !bundle.params.same_layout(&params) {
            return Err(Error::format(
                "checkpoint",
                "parameter names or shapes do not match the configured model",
            ));
        }
        bundle.params = params;
        Ok(bundle)
    }

    fn check(&self) -> Result<()> {
        self.data.validate()?;
        self.config.validate(self.data.frames)?;
        for key in self.layout.distill_keys() {
            if let LossKey::Distill(_, l) = key {
                if *l > self.config.hidden.len() {
                    return Err(Error::invalid(format!(
                        "{key} taps layer {l} but the encoder has {} hidden layers",
                        self.config.hidden.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.data.frames
    }

    pub fn frame_len(&self, m: Modality) -> usize {
        m.frame_len(&self.data)
    }

    /// Encoders present: Main plus every modality a loss term runs.
    pub fn modalities(&self) -> Vec<Modality> {
        let mut ms = vec![Modality::Main];
        for key in self.layout.keys() {
            ms.extend(key.encoders());
        }
        ms.sort();
        ms.dedup();
        ms
    }

    pub fn encoder(&self, m: Modality) -> ModalityEncoder {
        ModalityEncoder {
            modality: m,
            input_dim: self.frame_len(m),
            hidden: self.config.hidden.clone(),
            embed_dim: self.config.embed_dim,
        }
    }

    pub fn decoder(&self, key: &LossKey) -> Option<DecoderHead> {
        let LossKey::Task(m, task) = *key else {
            return None;
        };
        let f = self.frames();
        let (kind, output_dim) = match task {
            TaskKind::Reconstruct => (DecoderKind::Reconstruct, f * self.frame_len(m)),
            TaskKind::FuturePredict => (
                DecoderKind::FuturePredict,
                (f - self.config.future_frames) * self.frame_len(m),
            ),
            TaskKind::Transfer | TaskKind::Colorize => {
                let t = transfer_target(m);
                (DecoderKind::CrossModal(t), f * self.frame_len(t))
            }
            _ => return None,
        };
        Some(DecoderHead {
            key: *key,
            kind,
            embed_dim: self.config.embed_dim,
            hidden: self.config.decoder_hidden,
            output_dim,
        })
    }

    /// Input width of the binary head for `key`, if it has one.
    pub fn head_dim(&self, key: &LossKey) -> Option<usize> {
        match key {
            LossKey::Task(_, TaskKind::Shuffle | TaskKind::Backward) => Some(self.config.embed_dim),
            LossKey::Task(_, TaskKind::Align) => Some(2 * self.config.embed_dim),
            _ => None,
        }
    }

    /// Records the encoder of `m` on `x` (`[n·frames × frame_len]`).
    pub fn embed_var(&self, tape: &mut Tape, m: Modality, x: Var, frames: usize) -> Result<EncoderVars> {
        if !self.params.contains(&format!("enc.{}.out.w", m.letter())) {
            return Err(Error::MissingInput(format!("no encoder for modality {}", m.letter())));
        }
        self.encoder(m).forward(tape, &self.params, x, frames)
    }

    pub fn decode_var(&self, tape: &mut Tape, key: &LossKey, embedding: Var) -> Result<Var> {
        let dec = self
            .decoder(key)
            .ok_or_else(|| Error::invalid(format!("{key} has no decoder")))?;
        dec.forward(tape, &self.params, embedding)
    }

    /// Probabilities `[n]` from the binary head of `key`.
    pub fn head_var(&self, tape: &mut Tape, key: &LossKey, x: Var) -> Result<Var> {
        let z = affine_forward(tape, &self.params, &format!("head.{key}"), x)?;
        let p = tape.sigmoid(z);
        let n = tape.value(p).rows();
        tape.reshape(p, &[n])
    }

    /// Embedding `[n × D]` and taps for `x` without recording gradients.
    pub fn embed(&self, m: Modality, x: &DenseArray, frames: usize) -> Result<(DenseArray, TapActivations)> {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let out = self.embed_var(&mut tape, m, xv, frames)?;
        let taps = out
            .taps
            .iter()
            .enumerate()
            .map(|(i, &t)| (i + 1, tape.value(t).clone()))
            .collect();
        Ok((tape.value(out.embedding).clone(), TapActivations(taps)))
    }

    pub fn decode(&self, key: &LossKey, embedding: &DenseArray) -> Result<DenseArray> {
        let mut tape = Tape::new();
        let e = tape.input(embedding.clone());
        let y = self.decode_var(&mut tape, key, e)?;
        Ok(tape.value(y).clone())
    }

    pub fn binary_head(&self, key: &LossKey) -> Result<BinaryHead> {
        let w = self
            .params
            .get(&format!("head.{key}.w"))
            .ok_or_else(|| Error::invalid(format!("{key} has no binary head")))?;
        let b = self.params.get(&format!("head.{key}.b")).expect("head bias");
        Ok(BinaryHead {
            w: w.data().to_vec(),
            b: b.data()[0],
        })
    }

    /// Main-encoder embeddings `[n × D]` of whole clips, in input order.
    pub fn embed_clips(&self, clips: &[&MultiModalClip], exec: Exec) -> Result<DenseArray> {
        const CHUNK: usize = 64;
        let f = self.frames();
        let len = self.frame_len(Modality::Main);
        let chunks = clips.len().div_ceil(CHUNK);
        let parts = exec.map(chunks, |c| {
            let group = &clips[c * CHUNK..((c + 1) * CHUNK).min(clips.len())];
            let mut data = Vec::with_capacity(group.len() * f * len);
            for clip in group {
                data.extend_from_slice(clip.main.data());
            }
            let x = DenseArray::new(vec![group.len() * f, len], data)?;
            self.embed(Modality::Main, &x, f).map(|(e, _)| e)
        });
        let d = self.config.embed_dim;
        let mut out = Vec::with_capacity(clips.len() * d);
        for p in parts {
            out.extend_from_slice(p?.data());
        }
        DenseArray::new(vec![clips.len(), d], out)
    }
}
