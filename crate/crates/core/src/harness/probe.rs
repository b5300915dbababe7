//! Evaluation protocols on labeled clips. Clips with even ids form the fit
//! split and clips with odd ids the held-out split.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::fitness::weak_fitness;
use crate::model::ModelBundle;
use crate::numerics::{affine_forward, cosine_warmup_lr, sgd_step, DenseArray, ParamSet, Tape};
use crate::synthgen::{Modality, MultiModalClip};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    #[serde(rename = "kmeans")]
    KMeansProbe,
    #[serde(rename = "linear")]
    LinearProbe,
    #[serde(rename = "finetune")]
    FineTune,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::KMeansProbe, Protocol::LinearProbe, Protocol::FineTune];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::KMeansProbe => "kmeans",
            Protocol::LinearProbe => "linear",
            Protocol::FineTune => "finetune",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "kmeans" | "kmeansprobe" => Ok(Protocol::KMeansProbe),
            "linear" | "linearprobe" => Ok(Protocol::LinearProbe),
            "finetune" => Ok(Protocol::FineTune),
            _ => Err(Error::invalid(format!(
                "unknown protocol {s:?} (expected kmeans, linear or finetune)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    pub finetune_batch: usize,
    pub kmeans_trials: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr: 0.05,
            finetune_steps: 300,
            finetune_lr: 0.01,
            finetune_batch: 64,
            kmeans_trials: 20,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.finetune_batch == 0 || self.kmeans_trials == 0 {
            return Err(Error::invalid("probe batch size and trials must be positive"));
        }
        if !(self.lr >= 0.0 && self.finetune_lr >= 0.0) {
            return Err(Error::invalid("probe learning rates must be non-negative"));
        }
        Ok(())
    }
}

/// Row indices of the fit (even id) and held-out (odd id) splits.
pub fn parity_split(clip_ids: &[u64]) -> (Vec<usize>, Vec<usize>) {
    (0..clip_ids.len()).partition(|&i| clip_ids[i] % 2 == 0)
}

/// Affine softmax classifier acting on raw (unstandardized) features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    /// `[D × C]`.
    pub w: DenseArray,
    /// `[C]`.
    pub b: DenseArray,
}

impl LinearHead {
    pub fn classes(&self) -> usize {
        self.b.len()
    }

    pub fn logits(&self, x: &DenseArray) -> Result<DenseArray> {
        let mut z = x.matmul(&self.w)?;
        let c = self.classes();
        for r in 0..z.rows() {
            for (v, b) in z.row_mut(r).iter_mut().zip(self.b.data()) {
                *v += b;
            }
        }
        debug_assert_eq!(z.cols(), c);
        Ok(z)
    }

    pub fn predict(&self, x: &DenseArray) -> Result<Vec<usize>> {
        let z = self.logits(x)?;
        Ok((0..z.rows())
            .map(|r| {
                let row = z.row(r);
                (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect())
    }

    fn insert_into(&self, params: &mut ParamSet, prefix: &str) -> Result<()> {
        params.insert(format!("{prefix}.w"), self.w.clone())?;
        params.insert(format!("{prefix}.b"), self.b.clone())
    }

    fn from_params(params: &ParamSet, prefix: &str) -> Result<Self> {
        let get = |n: &str| {
            params
                .get(&format!("{prefix}.{n}"))
                .cloned()
                .ok_or_else(|| Error::invalid(format!("missing parameter {prefix}.{n}")))
        };
        Ok(Self { w: get("w")?, b: get("b")? })
    }
}

fn pick_rows(x: &DenseArray, rows: &[usize]) -> Result<DenseArray> {
    let d = x.cols();
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        data.extend_from_slice(x.row(r));
    }
    DenseArray::new(vec![rows.len(), d], data)
}

/// Fraction of `rows` whose predicted class equals the label.
pub fn accuracy(head: &LinearHead, x: &DenseArray, labels: &[usize], rows: &[usize]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::invalid("accuracy over an empty split"));
    }
    let pred = head.predict(&pick_rows(x, rows)?)?;
    let hits = rows.iter().zip(&pred).filter(|(&r, &p)| labels[r] == p).count();
    Ok(hits as f64 / rows.len() as f64)
}

/// Full-batch softmax regression on standardized features of `rows`, with
/// a cosine-decayed learning rate from zero-initialized weights. The
/// returned head has the standardization folded in.
pub fn train_linear_probe(
    x: &DenseArray,
    labels: &[usize],
    rows: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<LinearHead> {
    if rows.is_empty() {
        return Err(Error::invalid("linear probe needs a non-empty fit split"));
    }
    if labels.len() != x.rows() {
        return Err(Error::shape("linear_probe", &[x.rows()], &[labels.len()]));
    }
    let d = x.cols();
    let m = rows.len() as f64;
    let mut mu = vec![0.0; d];
    for &r in rows {
        for (a, v) in mu.iter_mut().zip(x.row(r)) {
            *a += v / m;
        }
    }
    let mut sd = vec![0.0; d];
    for &r in rows {
        for j in 0..d {
            sd[j] += (x.row(r)[j] - mu[j]).powi(2) / m;
        }
    }
    let sd: Vec<f64> = sd.into_iter().map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 }).collect();
    let mut z = pick_rows(x, rows)?;
    for r in 0..z.rows() {
        for (j, v) in z.row_mut(r).iter_mut().enumerate() {
            *v = (*v - mu[j]) / sd[j];
        }
    }
    let y: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
    if y.iter().any(|&c| c >= classes) {
        return Err(Error::invalid("label outside the class range"));
    }
    let mut params = ParamSet::new();
    params.insert("probe.w", DenseArray::zeros(&[d, classes]))?;
    params.insert("probe.b", DenseArray::zeros(&[classes]))?;
    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        let xin = tape.input(z.clone());
        let logits = affine_forward(&mut tape, &params, "probe", xin)?;
        let loss = tape.softmax_xent(logits, y.clone())?;
        let grads = tape.backward(loss, &params)?;
        sgd_step(&mut params, &grads, cosine_warmup_lr(step, 0, cfg.steps, cfg.lr))?;
    }
    let w = params.get("probe.w").expect("inserted");
    let b = params.get("probe.b").expect("inserted");
    let mut raw_w = DenseArray::zeros(&[d, classes]);
    let mut raw_b = b.data().to_vec();
    for j in 0..d {
        for c in 0..classes {
            let v = w.row(j)[c] / sd[j];
            raw_w.row_mut(j)[c] = v;
            raw_b[c] -= mu[j] * v;
        }
    }
    Ok(LinearHead {
        w: raw_w,
        b: DenseArray::from_vec(raw_b),
    })
}

/// Linear probe fitted on even ids, scored on odd ids.
pub fn linear_probe(
    embeddings: &DenseArray,
    labels: &[usize],
    clip_ids: &[u64],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<f64> {
    let (fit, eval) = parity_split(clip_ids);
    let head = train_linear_probe(embeddings, labels, &fit, classes, cfg)?;
    accuracy(&head, embeddings, labels, &eval)
}

/// Cluster-majority accuracy (the weak-fitness machinery) on frozen
/// embeddings.
pub fn kmeans_probe(
    embeddings: &DenseArray,
    labels: &[usize],
    clip_ids: &[u64],
    k: usize,
    cfg: &ProbeConfig,
    seed: u64,
    exec: Exec,
) -> Result<f64> {
    weak_fitness(embeddings, labels, clip_ids, k, cfg.kmeans_trials, seed, exec)
}

/// Linear probe first, then the head and every Main-encoder parameter are
/// trained together on mini-batches of the fit split. Returns held-out
/// accuracy.
pub fn fine_tune(
    bundle: &ModelBundle,
    clips: &[&MultiModalClip],
    labels: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
    seed: u64,
    exec: Exec,
) -> Result<f64> {
    if labels.len() != clips.len() {
        return Err(Error::shape("fine_tune", &[clips.len()], &[labels.len()]));
    }
    let ids: Vec<u64> = clips.iter().map(|c| c.clip_id).collect();
    let (fit, eval) = parity_split(&ids);
    let emb = bundle.embed_clips(clips, exec)?;
    let head = train_linear_probe(&emb, labels, &fit, classes, cfg)?;

    let mut tuned = bundle.clone();
    head.insert_into(&mut tuned.params, "ft")?;
    let f = bundle.frames();
    let len = bundle.frame_len(Modality::Main);
    let bs = cfg.finetune_batch.min(fit.len()).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = fit.clone();
    let mut cursor = order.len();
    for step in 0..cfg.finetune_steps {
        let mut picked = Vec::with_capacity(bs);
        while picked.len() < bs {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(order[cursor]);
            cursor += 1;
        }
        let mut data = Vec::with_capacity(bs * f * len);
        for &i in &picked {
            data.extend_from_slice(clips[i].main.data());
        }
        let mut tape = Tape::new();
        let x = tape.input(DenseArray::new(vec![bs * f, len], data)?);
        let enc = tuned.embed_var(&mut tape, Modality::Main, x, f)?;
        let logits = affine_forward(&mut tape, &tuned.params, "ft", enc.embedding)?;
        let loss = tape.softmax_xent(logits, picked.iter().map(|&i| labels[i]).collect())?;
        let grads = tape.backward(loss, &tuned.params)?;
        let lr = cosine_warmup_lr(step, 0, cfg.finetune_steps, cfg.finetune_lr);
        sgd_step(&mut tuned.params, &grads, lr)?;
    }
    let head = LinearHead::from_params(&tuned.params, "ft")?;
    let eval_clips: Vec<&MultiModalClip> = eval.iter().map(|&i| clips[i]).collect();
    let emb = tuned.embed_clips(&eval_clips, exec)?;
    let eval_labels: Vec<usize> = eval.iter().map(|&i| labels[i]).collect();
    let all: Vec<usize> = (0..eval.len()).collect();
    accuracy(&head, &emb, &eval_labels, &all)
}
