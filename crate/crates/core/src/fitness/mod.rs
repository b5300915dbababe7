//! Scoring a representation: the unsupervised cluster-distribution fitness
//! (sorted soft k-means masses vs. a Zipf prior) and the weakly supervised
//! nearest-centroid accuracy baseline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::numerics::DenseArray;
use crate::synthgen::zipf_probabilities;

#[cfg(test)]
mod tests;

pub const DEFAULT_MAX_ITER: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    /// `[k × D]`
    pub centroids: DenseArray,
    pub k: usize,
    pub seed: u64,
    /// Within-cluster sum of squares after each assignment step.
    pub sse_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &DenseArray) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sq_dist(x, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn check_points(x: &DenseArray) -> Result<()> {
    if x.shape().len() != 2 {
        return Err(Error::invalid(format!("expected an [n × D] matrix, got {:?}", x.shape())));
    }
    if !x.all_finite() {
        return Err(Error::NonFinite("embeddings".into()));
    }
    Ok(())
}

/// k-means++ seeding: first centre uniform, each next one drawn with
/// probability proportional to squared distance from the nearest chosen.
fn plus_plus_init(x: &DenseArray, k: usize, rng: &mut ChaCha8Rng) -> DenseArray {
    let n = x.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            // every point coincides with a centre already
            rng.random_range(0..n)
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), x.row(next)));
        }
    }
    let rows: Vec<Vec<f64>> = chosen.iter().map(|&i| x.row(i).to_vec()).collect();
    DenseArray::from_rows(&rows).expect("equal row lengths")
}

/// Rows sorted lexicographically, so results do not depend on input order.
fn canonical_rows(x: &DenseArray) -> DenseArray {
    let mut idx: Vec<usize> = (0..x.rows()).collect();
    idx.sort_by(|&a, &b| {
        x.row(a)
            .iter()
            .zip(x.row(b))
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut data = Vec::with_capacity(x.len());
    for i in idx {
        data.extend_from_slice(x.row(i));
    }
    DenseArray::new(vec![x.rows(), x.cols()], data).expect("same shape")
}

/// Lloyd iterations from a k-means++ start until the assignment stops
/// changing or `max_iter` updates. A cluster that loses all its points
/// keeps its previous centroid. The result does not depend on row order.
pub fn kmeans(x: &DenseArray, k: usize, seed: u64, max_iter: usize) -> Result<ClusterModel> {
    check_points(x)?;
    let n = x.rows();
    if k == 0 || n < k {
        return Err(Error::invalid(format!("k-means needs n >= k >= 1, got n = {n}, k = {k}")));
    }
    let x = &canonical_rows(x);
    let d = x.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(x, k, &mut rng);
    let mut assign = vec![usize::MAX; n];
    let mut sse_history = Vec::new();
    for iter in 0..=max_iter {
        let mut changed = false;
        let mut sse = 0.0;
        for (i, a) in assign.iter_mut().enumerate() {
            let (c, dist) = nearest(x.row(i), &centroids);
            sse += dist;
            if *a != c {
                *a = c;
                changed = true;
            }
        }
        sse_history.push(sse);
        if !changed || iter == max_iter {
            break;
        }
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &c) in assign.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c * d..(c + 1) * d].iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(&sums[c * d..(c + 1) * d]) {
                    *dst = s * inv;
                }
            }
        }
    }
    Ok(ClusterModel {
        centroids,
        k,
        seed,
        sse_history,
    })
}

/// Index of the nearest centroid for every row.
pub fn assign(x: &DenseArray, model: &ClusterModel) -> Vec<usize> {
    (0..x.rows()).map(|i| nearest(x.row(i), &model.centroids).0).collect()
}

/// `softmax(-‖x - c_i‖²)` over centroids.
pub fn soft_membership(x: &[f64], model: &ClusterModel) -> Vec<f64> {
    let logits: Vec<f64> = (0..model.k).map(|c| -sq_dist(x, model.centroids.row(c))).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Soft memberships of every row, `[n × k]`.
pub fn soft_memberships(x: &DenseArray, model: &ClusterModel) -> DenseArray {
    let mut out = Vec::with_capacity(x.rows() * model.k);
    for i in 0..x.rows() {
        out.extend(soft_membership(x.row(i), model));
    }
    DenseArray::new(vec![x.rows(), model.k], out).expect("n × k")
}

/// `q_i = i^-s / H_{k,s}` for ranks `i = 1..=k`.
pub fn zipf_prior(k: usize, s: f64) -> Result<Vec<f64>> {
    if k == 0 || !(s > 0.0) {
        return Err(Error::invalid(format!("zipf prior needs k >= 1 and s > 0, got k = {k}, s = {s}")));
    }
    Ok(zipf_probabilities(k, s))
}

/// Column means of an `[n × k]` membership matrix.
pub fn cluster_mass(memberships: &DenseArray) -> Vec<f64> {
    let (n, k) = (memberships.rows(), memberships.cols());
    let mut mass = vec![0.0; k];
    for i in 0..n {
        for (m, v) in mass.iter_mut().zip(memberships.row(i)) {
            *m += v;
        }
    }
    let inv = 1.0 / n.max(1) as f64;
    mass.iter_mut().for_each(|m| *m *= inv);
    mass
}

/// `Σ p_i ln(p_i / q_i)`, with `0 ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape("kl_divergence", &[p.len()], &[q.len()]));
    }
    for (name, v) in [("p", p), ("q", q)] {
        let s: f64 = v.iter().sum();
        if (s - 1.0).abs() > 1e-6 || v.iter().any(|x| *x < 0.0 || !x.is_finite()) {
            return Err(Error::invalid(format!("{name} is not a distribution (sum {s})")));
        }
    }
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(Error::invalid("q has a zero where p is positive"));
            }
            kl += pi * (pi / qi).ln();
        }
    }
    Ok(kl.max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitnessConfig {
    /// Clusters; `None` means one per synthetic class.
    pub k: Option<usize>,
    pub zipf_s: f64,
    pub trials: usize,
    /// Trial `t` seeds k-means with `seed + t`.
    pub seed: u64,
    pub max_iter: usize,
}

impl Default for FitnessConfig {
    fn default() -> Self {
        Self {
            k: None,
            zipf_s: 1.0,
            trials: 20,
            seed: 0,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitnessReport {
    pub per_trial_kl: Vec<f64>,
    pub mean_kl: f64,
    /// `-mean_kl`; higher is better.
    pub fitness: f64,
    /// Sorted descending, from the last trial.
    pub cluster_masses: Vec<f64>,
    pub prior: Vec<f64>,
}

impl FitnessReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain data serializes")
    }
}

/// Negative mean KL between sorted soft-cluster masses and a Zipf prior,
/// averaged over `trials` k-means fits with seeds `seed + t`.
pub fn elo_fitness(
    embeddings: &DenseArray,
    k: usize,
    s: f64,
    trials: usize,
    seed: u64,
    exec: Exec,
) -> Result<FitnessReport> {
    elo_fitness_with(embeddings, k, s, trials, seed, DEFAULT_MAX_ITER, exec)
}

pub fn elo_fitness_with(
    embeddings: &DenseArray,
    k: usize,
    s: f64,
    trials: usize,
    seed: u64,
    max_iter: usize,
    exec: Exec,
) -> Result<FitnessReport> {
    if trials == 0 {
        return Err(Error::invalid("at least one fitness trial is required"));
    }
    let prior = zipf_prior(k, s)?;
    let results = exec.map(trials, |t| -> Result<(f64, Vec<f64>)> {
        let model = kmeans(embeddings, k, seed.wrapping_add(t as u64), max_iter)?;
        let mut mass = cluster_mass(&soft_memberships(embeddings, &model));
        mass.sort_by(|a, b| b.total_cmp(a));
        Ok((kl_divergence(&mass, &prior)?, mass))
    });
    let mut per_trial_kl = Vec::with_capacity(trials);
    let mut cluster_masses = Vec::new();
    for r in results {
        let (kl, mass) = r?;
        per_trial_kl.push(kl);
        cluster_masses = mass;
    }
    let mean_kl = per_trial_kl.iter().sum::<f64>() / trials as f64;
    Ok(FitnessReport {
        per_trial_kl,
        mean_kl,
        fitness: -mean_kl,
        cluster_masses,
        prior,
    })
}

/// Nearest-centroid accuracy. Rows with even `clip_ids` fit the clusters
/// and vote a majority label per cluster (ties to the smaller label); rows
/// with odd ids are scored. A cluster with no fit-half members abstains and
/// every point it receives counts as wrong. Mean over `trials` seeds.
pub fn weak_fitness(
    embeddings: &DenseArray,
    labels: &[usize],
    clip_ids: &[u64],
    k: usize,
    trials: usize,
    seed: u64,
    exec: Exec,
) -> Result<f64> {
    check_points(embeddings)?;
    let n = embeddings.rows();
    if labels.len() != n || clip_ids.len() != n {
        return Err(Error::shape("weak_fitness", &[n], &[labels.len(), clip_ids.len()]));
    }
    if trials == 0 {
        return Err(Error::invalid("at least one fitness trial is required"));
    }
    let fit: Vec<usize> = (0..n).filter(|&i| clip_ids[i] % 2 == 0).collect();
    let eval: Vec<usize> = (0..n).filter(|&i| clip_ids[i] % 2 == 1).collect();
    if eval.is_empty() {
        return Err(Error::invalid("weak fitness needs clips with odd ids to score"));
    }
    let pick = |idx: &[usize]| {
        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| embeddings.row(i).to_vec()).collect();
        DenseArray::from_rows(&rows)
    };
    let fit_x = pick(&fit)?;
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let accs = exec.map(trials, |t| -> Result<f64> {
        let model = kmeans(&fit_x, k, seed.wrapping_add(t as u64), DEFAULT_MAX_ITER)?;
        let mut votes = vec![vec![0usize; classes]; k];
        for (row, &i) in fit.iter().enumerate() {
            votes[nearest(fit_x.row(row), &model.centroids).0][labels[i]] += 1;
        }
        let cluster_label: Vec<Option<usize>> = votes
            .iter()
            .map(|v| {
                let best = v.iter().copied().max().unwrap_or(0);
                (best > 0).then(|| v.iter().position(|&c| c == best).expect("max present"))
            })
            .collect();
        let correct = eval
            .iter()
            .filter(|&&i| cluster_label[nearest(embeddings.row(i), &model.centroids).0] == Some(labels[i]))
            .count();
        Ok(correct as f64 / eval.len() as f64)
    });
    let mut sum = 0.0;
    for a in accs {
        sum += a?;
    }
    Ok(sum / trials as f64)
}
