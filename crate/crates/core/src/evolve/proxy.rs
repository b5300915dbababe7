//! Proxy training: a short run that turns a genome into embeddings to score.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Evaluation, FitnessFn};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::fitness::{elo_fitness, weak_fitness};
use crate::losses::{record_total_loss, Batch, GenomeLayout, LossBreakdown, LossWeights};
use crate::model::{ModelBundle, ModelConfig};
use crate::numerics::{cosine_warmup_lr, sgd_step, DenseArray, Tape};
use crate::synthgen::{Dataset, MultiModalClip};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderScale {
    /// Hidden and decoder widths halved, embedding width kept.
    Small,
    Full,
}

impl EncoderScale {
    pub fn apply(self, config: &ModelConfig) -> ModelConfig {
        match self {
            EncoderScale::Full => config.clone(),
            EncoderScale::Small => ModelConfig {
                hidden: config.hidden.iter().map(|&h| (h / 2).max(1)).collect(),
                decoder_hidden: (config.decoder_hidden / 2).max(1),
                ..config.clone()
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitnessKind {
    Elo,
    Weak,
}

impl std::str::FromStr for FitnessKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "elo" => Ok(FitnessKind::Elo),
            "weak" => Ok(FitnessKind::Weak),
            _ => Err(Error::invalid(format!("unknown fitness {s:?} (expected elo or weak)"))),
        }
    }
}

impl std::fmt::Display for FitnessKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FitnessKind::Elo => "elo",
            FitnessKind::Weak => "weak",
        })
    }
}

/// Mini-batch SGD settings shared by proxy and final training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 16,
            lr: 0.05,
            warmup_steps: 100,
            clip_norm: Some(5.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProxyConfig {
    pub train_steps: usize,
    pub batch_size: usize,
    /// Leading share of the clips used for training.
    pub dataset_fraction: f64,
    pub encoder_scale: EncoderScale,
    pub lr: f64,
    pub warmup_steps: usize,
    pub clip_norm: Option<f64>,
    /// Leading clips embedded and scored; `None` scores every clip.
    pub eval_clips: Option<usize>,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self {
            train_steps: 600,
            batch_size: 16,
            dataset_fraction: 1.0,
            encoder_scale: EncoderScale::Small,
            lr: 0.05,
            warmup_steps: 30,
            clip_norm: Some(5.0),
            eval_clips: None,
        }
    }
}

impl ProxyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_steps < 1 {
            return Err(Error::invalid("proxy train_steps must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("proxy batch_size must be at least 1"));
        }
        if !(self.dataset_fraction > 0.0 && self.dataset_fraction <= 1.0) {
            return Err(Error::invalid("dataset_fraction must be in (0, 1]"));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train_steps,
            batch_size: self.batch_size,
            lr: self.lr,
            warmup_steps: self.warmup_steps,
            clip_norm: self.clip_norm,
        }
    }
}

/// `cfg.steps` SGD steps on the weighted loss over shuffled mini-batches
/// of `clips`. `observer` sees every step's breakdown before the update.
pub fn train_bundle<F>(
    bundle: &mut ModelBundle,
    weights: &LossWeights,
    clips: &[&MultiModalClip],
    cfg: &TrainConfig,
    seed: u64,
    mut observer: F,
) -> Result<()>
where
    F: FnMut(usize, &LossBreakdown),
{
    weights.check_layout(&bundle.layout)?;
    if cfg.steps == 0 {
        return Ok(());
    }
    if clips.is_empty() {
        return Err(Error::invalid("training needs at least one clip"));
    }
    let bs = cfg.batch_size.clamp(1, clips.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..clips.len()).collect();
    let mut cursor = order.len();
    for step in 0..cfg.steps {
        let mut picked = Vec::with_capacity(bs);
        while picked.len() < bs {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(clips[order[cursor]]);
            cursor += 1;
        }
        let batch = Batch::sample(&picked, &bundle.layout, &bundle.config, &mut rng)?;
        let mut tape = Tape::new();
        let (loss, breakdown) = record_total_loss(&mut tape, weights, bundle, &batch, true)?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite(format!("total loss at step {step}")));
        }
        observer(step, &breakdown);
        let mut grads = tape.backward(loss, &bundle.params)?;
        if let Some(max) = cfg.clip_norm {
            let norm = grads.global_norm();
            if norm > max {
                grads.scale(max / norm);
            }
        }
        let lr = cosine_warmup_lr(step, cfg.warmup_steps, cfg.steps, cfg.lr);
        sgd_step(&mut bundle.params, &grads, lr)?;
    }
    Ok(())
}

/// Clips used for training and for scoring under `proxy`.
pub fn proxy_splits<'a>(dataset: &'a Dataset, proxy: &ProxyConfig) -> (Vec<&'a MultiModalClip>, Vec<&'a MultiModalClip>) {
    let n = dataset.len();
    let n_train = ((n as f64 * proxy.dataset_fraction).ceil() as usize).clamp(n.min(1), n);
    let n_eval = proxy.eval_clips.map_or(n, |e| e.min(n));
    (
        dataset.clips[..n_train].iter().collect(),
        dataset.clips[..n_eval].iter().collect(),
    )
}

/// Trains a fresh bundle seeded with `seed` on `weights` and returns the
/// Main-encoder embeddings of the scoring clips with their clip ids.
pub fn proxy_train(
    weights: &LossWeights,
    dataset: &Dataset,
    layout: &GenomeLayout,
    model: &ModelConfig,
    proxy: &ProxyConfig,
    seed: u64,
    exec: Exec,
) -> Result<(DenseArray, Vec<u64>)> {
    let (train, eval) = proxy_splits(dataset, proxy);
    if eval.is_empty() {
        return Err(Error::invalid("dataset has no clips to score"));
    }
    let config = proxy.encoder_scale.apply(model);
    let mut bundle = ModelBundle::new(layout, &dataset.config, &config, seed)?;
    train_bundle(&mut bundle, weights, &train, &proxy.train_config(), seed ^ 0x9e37_79b9_7f4a_7c15, |_, _| {})?;
    let emb = bundle.embed_clips(&eval, exec)?;
    Ok((emb, eval.iter().map(|c| c.clip_id).collect()))
}

/// Genome scorer: proxy training followed by ELo (and, when labels are
/// supplied, weak) fitness.
pub struct ProxyEvaluator<'a> {
    pub dataset: &'a Dataset,
    pub layout: GenomeLayout,
    pub model: ModelConfig,
    pub proxy: ProxyConfig,
    pub kind: FitnessKind,
    pub k: usize,
    pub zipf_s: f64,
    pub trials: usize,
    /// Class of every clip, indexed by clip id. Required for weak fitness.
    pub labels: Option<&'a [usize]>,
    pub exec: Exec,
}

impl ProxyEvaluator<'_> {
    pub fn score_embeddings(&self, emb: &DenseArray, ids: &[u64], seed: u64) -> Result<Evaluation> {
        let elo = elo_fitness(emb, self.k, self.zipf_s, self.trials, seed, self.exec)?;
        let weak = match self.labels {
            Some(labels) => {
                let y: Vec<usize> = ids
                    .iter()
                    .map(|&id| {
                        labels
                            .get(id as usize)
                            .copied()
                            .ok_or_else(|| Error::invalid(format!("no label for clip {id}")))
                    })
                    .collect::<Result<_>>()?;
                Some(weak_fitness(emb, &y, ids, self.k, self.trials, seed, self.exec)?)
            }
            None => None,
        };
        let fitness = match self.kind {
            FitnessKind::Elo => elo.fitness,
            FitnessKind::Weak => weak.ok_or(Error::LabelAccess("weak fitness requires labels".into()))?,
        };
        Ok(Evaluation {
            fitness,
            per_trial_kl: elo.per_trial_kl,
            weak_fitness: weak,
            elo_fitness: Some(elo.fitness),
        })
    }
}

impl FitnessFn for ProxyEvaluator<'_> {
    fn evaluate(&self, genome: &[f64], eval_seed: u64) -> Result<Evaluation> {
        let weights = LossWeights::from_genome(&self.layout, genome)?;
        let (emb, ids) = proxy_train(
            &weights,
            self.dataset,
            &self.layout,
            &self.model,
            &self.proxy,
            eval_seed,
            self.exec,
        )?;
        self.score_embeddings(&emb, &ids, eval_seed)
    }
}
