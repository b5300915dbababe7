//! CSV tables derived from evolution histories and evaluation results.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::evolve::{parse_history, HistoryRecord, Strategy};
use crate::losses::{LossKey, TaskKind};
use crate::synthgen::Modality;

use super::commands::EvalResult;
use super::fsio::write_text;

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len();
    if n != b.len() || n < 2 {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    let den = (saa * sbb).sqrt();
    (den > 0.0).then(|| sab / den)
}

/// Ranks starting at 1; ties share their average rank.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    pearson(&ranks(a), &ranks(b))
}

fn num(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x:?}"),
        _ => String::new(),
    }
}

/// One row per (record, weight).
pub fn weights_trajectory_csv(records: &[HistoryRecord]) -> String {
    let mut s = String::from("strategy,seed,round,index,weight,value\n");
    for r in records {
        for (k, v) in &r.genome {
            let _ = writeln!(s, "{},{},{},{},{k},{v:?}", r.strategy, r.seed, r.round, r.index);
        }
    }
    s
}

fn modality_name(m: Modality) -> &'static str {
    match m {
        Modality::Main => "main",
        Modality::Grey => "grey",
        Modality::Flow => "flow",
        Modality::Audio => "audio",
    }
}

fn task_name(t: TaskKind) -> &'static str {
    match t {
        TaskKind::Reconstruct => "reconstruct",
        TaskKind::FuturePredict => "predict",
        TaskKind::Transfer => "transfer",
        TaskKind::Colorize => "colorize",
        TaskKind::Shuffle => "shuffle",
        TaskKind::Backward => "backward",
        TaskKind::Align => "align",
        TaskKind::Embed => "embed",
    }
}

/// Modality × task grid of one genome, one cell per weight.
pub fn heatmap_csv(record: &HistoryRecord) -> Result<String> {
    let mut s = String::from("modality,task,key,value\n");
    for (k, v) in &record.genome {
        let key: LossKey = k.parse()?;
        let task = match key {
            LossKey::Task(_, t) => task_name(t).to_string(),
            LossKey::Distill(_, l) => format!("distill_l{l}"),
        };
        let _ = writeln!(s, "{},{task},{k},{v:?}", modality_name(key.modality()));
    }
    Ok(s)
}

/// Genomes scored by both fitness functions.
pub fn fitness_pairs(records: &[HistoryRecord]) -> Vec<&HistoryRecord> {
    records
        .iter()
        .filter(|r| r.weak_fitness.is_some() && r.elo_fitness.is_some_and(f64::is_finite))
        .collect()
}

pub fn fitness_scatter_csv(records: &[HistoryRecord]) -> String {
    let mut s = String::from("strategy,seed,round,index,weak_fitness,elo_fitness\n");
    for r in fitness_pairs(records) {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.strategy,
            r.seed,
            r.round,
            r.index,
            num(r.weak_fitness),
            num(r.elo_fitness)
        );
    }
    s
}

pub fn correlation_csv(records: &[HistoryRecord]) -> String {
    let pairs = fitness_pairs(records);
    let weak: Vec<f64> = pairs.iter().map(|r| r.weak_fitness.unwrap()).collect();
    let elo: Vec<f64> = pairs.iter().map(|r| r.elo_fitness.unwrap()).collect();
    format!(
        "n,pearson,spearman\n{},{},{}\n",
        pairs.len(),
        num(pearson(&weak, &elo)),
        num(spearman(&weak, &elo))
    )
}

/// Best, mean and population standard deviation of fitness per run.
pub fn strategy_summary_csv(records: &[HistoryRecord]) -> String {
    let mut groups: BTreeMap<(String, u64), Vec<f64>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.strategy.to_string(), r.seed))
            .or_default()
            .push(r.score());
    }
    let mut s = String::from("strategy,seed,evaluations,failed,best,mean,std\n");
    for ((strategy, seed), scores) in groups {
        let ok: Vec<f64> = scores.iter().copied().filter(|v| v.is_finite()).collect();
        let best = ok.iter().copied().fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
        let mean = (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64);
        let std = mean.map(|m| (ok.iter().map(|v| (v - m).powi(2)).sum::<f64>() / ok.len() as f64).sqrt());
        let _ = writeln!(
            s,
            "{strategy},{seed},{},{},{},{},{}",
            scores.len(),
            scores.len() - ok.len(),
            num(best),
            num(mean),
            num(std)
        );
    }
    s
}

pub fn eval_results_csv(results: &[EvalResult]) -> String {
    let mut s = String::from("protocol,accuracy,seed,checkpoint\n");
    for r in results {
        let _ = writeln!(s, "{},{:?},{},{}", r.protocol, r.accuracy, r.seed, r.checkpoint);
    }
    s
}

/// Highest-fitness record; ties go to the earliest.
pub fn best_record(records: &[HistoryRecord]) -> Option<&HistoryRecord> {
    records.iter().fold(None, |best: Option<&HistoryRecord>, r| match best {
        Some(b) if b.score() >= r.score() => Some(b),
        _ => Some(r),
    })
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::MissingInput(format!("history {}: {e}", path.display())))?;
    parse_history(&text)
}

pub fn read_eval(path: &Path) -> Result<EvalResult> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::MissingInput(format!("eval result {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportSummary {
    pub files: Vec<PathBuf>,
    pub records: usize,
}

/// Writes every table under `dir`.
pub fn write_report(dir: &Path, records: &[HistoryRecord], evals: &[EvalResult]) -> Result<ReportSummary> {
    if records.is_empty() {
        return Err(Error::invalid("report needs at least one history record"));
    }
    let best = best_record(records).expect("non-empty");
    let tables = [
        ("weights_trajectory.csv", weights_trajectory_csv(records)),
        ("heatmap.csv", heatmap_csv(best)?),
        ("fitness_scatter.csv", fitness_scatter_csv(records)),
        ("fitness_correlation.csv", correlation_csv(records)),
        ("strategy_summary.csv", strategy_summary_csv(records)),
        ("eval_results.csv", eval_results_csv(evals)),
    ];
    let mut files = Vec::new();
    for (name, text) in tables {
        let path = dir.join(name);
        write_text(&path, &text)?;
        files.push(path);
    }
    Ok(ReportSummary {
        files,
        records: records.len(),
    })
}

/// Strategies present in `records`, in first-seen order.
pub fn strategies(records: &[HistoryRecord]) -> Vec<Strategy> {
    let mut out = Vec::new();
    for r in records {
        if !out.contains(&r.strategy) {
            out.push(r.strategy);
        }
    }
    out
}
