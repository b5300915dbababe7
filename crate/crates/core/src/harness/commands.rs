use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evolve::{
    evolve, history_to_ndjson, train_bundle, Evaluation, FitnessFn, FitnessKind, Individual, ProxyEvaluator,
};
use crate::exec::Exec;
use crate::losses::LossWeights;
use crate::model::ModelBundle;
use crate::numerics::ParamSet;
use crate::synthgen::write_labels;
use crate::synthgen::{Dataset, MultiModalClip};

use super::config::*;
use super::fsio::{load_dataset, load_labels, write_atomic, write_text};
use super::labels::{LabelCapability, LabelPurpose};
use super::probe::{fine_tune, kmeans_probe, linear_probe, Protocol};

#[derive(Clone, Debug, PartialEq)]
pub struct GenDataSummary {
    pub dataset: PathBuf,
    pub labels: PathBuf,
    pub histogram: Vec<usize>,
}

/// Generates the dataset container and its label sidecar.
pub fn gen_data(cfg: &ExperimentConfig, exec: Exec) -> Result<GenDataSummary> {
    let (data, labels) = Dataset::generate(&cfg.dataset, exec)?;
    let dataset = cfg.dataset_file();
    let labels_path = cfg.labels_file();
    write_atomic(&dataset, |w| data.write_to(w))?;
    // writing the sidecar is the one place labels leave the generator
    let _cap = LabelCapability::request(LabelPurpose::DataGeneration)?;
    write_atomic(&labels_path, |w| write_labels(&labels, w))?;
    Ok(GenDataSummary {
        dataset,
        labels: labels_path,
        histogram: labels.histogram(cfg.dataset.num_classes),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvolveSummary {
    pub best: Individual,
    pub evaluations: usize,
    pub history: PathBuf,
    pub best_weights: PathBuf,
}

/// Wall-clock seconds per evaluated genome, kept apart from the history.
struct Timed<'a, F: ?Sized> {
    inner: &'a F,
    times: Mutex<HashMap<Vec<u64>, f64>>,
}

impl<F: FitnessFn + ?Sized> FitnessFn for Timed<'_, F> {
    fn evaluate(&self, genome: &[f64], eval_seed: u64) -> Result<Evaluation> {
        let start = Instant::now();
        let out = self.inner.evaluate(genome, eval_seed);
        let key = genome.iter().map(|g| g.to_bits()).collect();
        self.times
            .lock()
            .expect("timing lock")
            .insert(key, start.elapsed().as_secs_f64());
        out
    }
}

#[derive(Serialize, Deserialize)]
struct TimingRecord {
    round: usize,
    index: usize,
    wall_seconds: f64,
}

/// Runs the configured search and writes `history.ndjson`, `best.weights`
/// and `timings.ndjson`. Labels are loaded only for weak fitness.
pub fn run_evolve(cfg: &ExperimentConfig, exec: Exec) -> Result<EvolveSummary> {
    cfg.validate()?;
    let layout = cfg.layout()?;
    let data = load_dataset(&cfg.dataset_file())?;
    let labels = match cfg.fitness.kind {
        FitnessKind::Weak => {
            let cap = LabelCapability::request(LabelPurpose::Fitness(FitnessKind::Weak))?;
            Some(load_labels(&cfg.labels_file(), &cap)?)
        }
        FitnessKind::Elo => None,
    };
    let evaluator = ProxyEvaluator {
        dataset: &data,
        layout: layout.clone(),
        model: cfg.model.clone(),
        proxy: cfg.proxy.clone(),
        kind: cfg.fitness.kind,
        k: cfg.clusters(),
        zipf_s: cfg.fitness.zipf_s,
        trials: cfg.fitness.trials,
        labels: labels.as_ref().map(|l| l.0.as_slice()),
        exec,
    };
    let timed = Timed {
        inner: &evaluator,
        times: Mutex::new(HashMap::new()),
    };
    let keys = layout.names();
    let (best, state) = evolve(&cfg.evolve, &keys, &timed, exec)?;

    let history = cfg.out_path(HISTORY_FILE);
    write_text(&history, &history_to_ndjson(&state.history))?;
    let weights = LossWeights::from_genome(&layout, best.genome())?;
    let best_weights = cfg.out_path(BEST_WEIGHTS_FILE);
    write_text(&best_weights, &weights.to_text())?;
    let times = timed.times.into_inner().expect("timing lock");
    write_atomic(&cfg.out_path(TIMINGS_FILE), |w| {
        for r in &state.history {
            let g = r.genome_in(&keys)?;
            let key: Vec<u64> = g.iter().map(|v| v.to_bits()).collect();
            let rec = TimingRecord {
                round: r.round,
                index: r.index,
                wall_seconds: times.get(&key).copied().unwrap_or(0.0),
            };
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        }
        Ok(())
    })?;
    Ok(EvolveSummary {
        best,
        evaluations: state.history.len(),
        history,
        best_weights,
    })
}

pub fn load_weights(path: &Path, cfg: &ExperimentConfig) -> Result<LossWeights> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::MissingInput(format!("weights {}: {e}", path.display())))?;
    let weights = LossWeights::parse_text(&text)?;
    weights.check_layout(&cfg.layout()?)?;
    Ok(weights)
}

pub fn load_checkpoint(path: &Path, cfg: &ExperimentConfig, data: &Dataset) -> Result<ModelBundle> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::MissingInput(format!("checkpoint {}: {e}", path.display())))?;
    let params = ParamSet::from_bytes(&bytes)?;
    ModelBundle::from_params(&cfg.layout()?, &data.config, &cfg.model, params)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    /// Weighted total loss at every step.
    pub losses: Vec<f64>,
}

/// Trains a fresh bundle on every clip with the given weights and writes
/// `model.ckpt` and `train_log.csv`.
pub fn train_final(cfg: &ExperimentConfig, weights_path: Option<&Path>, exec: Exec) -> Result<TrainSummary> {
    cfg.validate()?;
    let path = weights_path.map_or_else(|| cfg.out_path(BEST_WEIGHTS_FILE), Path::to_path_buf);
    let weights = load_weights(&path, cfg)?;
    let data = load_dataset(&cfg.dataset_file())?;
    let bundle = train_with(cfg, &weights, &data, exec)?;
    let checkpoint = cfg.out_path(CHECKPOINT_FILE);
    write_atomic(&checkpoint, |w| bundle.0.params.write_to(w))?;
    write_atomic(&cfg.out_path(TRAIN_LOG_FILE), |w| {
        writeln!(w, "step,total_loss")?;
        for (i, l) in bundle.1.iter().enumerate() {
            writeln!(w, "{i},{l:?}")?;
        }
        Ok(())
    })?;
    Ok(TrainSummary {
        checkpoint,
        losses: bundle.1,
    })
}

/// Final training without touching the file system.
pub fn train_with(
    cfg: &ExperimentConfig,
    weights: &LossWeights,
    data: &Dataset,
    _exec: Exec,
) -> Result<(ModelBundle, Vec<f64>)> {
    let layout = cfg.layout()?;
    let mut bundle = ModelBundle::new(&layout, &data.config, &cfg.model, cfg.seed)?;
    let clips: Vec<&MultiModalClip> = data.clips.iter().collect();
    let mut losses = Vec::with_capacity(cfg.train.steps);
    let seed = cfg.seed ^ 0x5851_f42d_4c95_7f2d;
    train_bundle(&mut bundle, weights, &clips, &cfg.train, seed, |_, b| losses.push(b.total))?;
    Ok((bundle, losses))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub protocol: Protocol,
    pub accuracy: f64,
    pub seed: u64,
    pub checkpoint: String,
    pub config: ExperimentConfig,
}

/// Scores a bundle under `protocol` using every clip.
pub fn evaluate_bundle(
    cfg: &ExperimentConfig,
    bundle: &ModelBundle,
    data: &Dataset,
    labels: &[usize],
    protocol: Protocol,
    exec: Exec,
) -> Result<f64> {
    let clips: Vec<&MultiModalClip> = data.clips.iter().collect();
    let y: Vec<usize> = clips
        .iter()
        .map(|c| {
            labels
                .get(c.clip_id as usize)
                .copied()
                .ok_or_else(|| Error::invalid(format!("no label for clip {}", c.clip_id)))
        })
        .collect::<Result<_>>()?;
    let ids: Vec<u64> = clips.iter().map(|c| c.clip_id).collect();
    let classes = data.config.num_classes;
    match protocol {
        Protocol::FineTune => fine_tune(bundle, &clips, &y, classes, &cfg.probe, cfg.seed, exec),
        Protocol::LinearProbe => {
            let emb = bundle.embed_clips(&clips, exec)?;
            linear_probe(&emb, &y, &ids, classes, &cfg.probe)
        }
        Protocol::KMeansProbe => {
            let emb = bundle.embed_clips(&clips, exec)?;
            kmeans_probe(&emb, &y, &ids, cfg.clusters(), &cfg.probe, cfg.seed, exec)
        }
    }
}

pub fn eval_file_name(protocol: Protocol) -> String {
    format!("eval_{}.json", protocol.name())
}

/// Evaluates a checkpoint (default `model.ckpt`) and writes
/// `eval_<protocol>.json`.
pub fn run_eval(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    protocol: Protocol,
    exec: Exec,
) -> Result<EvalResult> {
    cfg.validate()?;
    let path = checkpoint.map_or_else(|| cfg.out_path(CHECKPOINT_FILE), Path::to_path_buf);
    let data = load_dataset(&cfg.dataset_file())?;
    let bundle = load_checkpoint(&path, cfg, &data)?;
    let cap = LabelCapability::request(LabelPurpose::Evaluation)?;
    let labels = load_labels(&cfg.labels_file(), &cap)?;
    let accuracy = evaluate_bundle(cfg, &bundle, &data, &labels.0, protocol, exec)?;
    let result = EvalResult {
        protocol,
        accuracy,
        seed: cfg.seed,
        checkpoint: path.display().to_string(),
        config: cfg.clone(),
    };
    let text = serde_json::to_string_pretty(&result)?;
    write_text(&cfg.out_path(&eval_file_name(protocol)), &text)?;
    Ok(result)
}
