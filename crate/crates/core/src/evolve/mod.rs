//! Black-box search over loss-weight genomes in `[0, 1]^d`.

mod cma;
mod proxy;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;

pub use cma::{default_popsize, CmaConfig, CmaState, EIGEN_FLOOR};
pub use proxy::{proxy_splits, proxy_train, train_bundle, EncoderScale, FitnessKind, ProxyConfig, ProxyEvaluator, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Tournament,
    #[serde(rename = "cmaes")]
    CmaEs,
    Random,
    Grid,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Tournament, Strategy::CmaEs, Strategy::Random, Strategy::Grid];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Tournament => "tournament",
            Strategy::CmaEs => "cmaes",
            Strategy::Random => "random",
            Strategy::Grid => "grid",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        match lower.as_str() {
            "tournament" => Ok(Strategy::Tournament),
            "cmaes" | "cma-es" | "cma" => Ok(Strategy::CmaEs),
            "random" => Ok(Strategy::Random),
            "grid" => Ok(Strategy::Grid),
            _ => Err(Error::invalid(format!(
                "unknown strategy {s:?} (expected tournament, cmaes, random or grid)"
            ))),
        }
    }
}

/// One scored (or not yet scored) genome.
#[derive(Clone, Debug, PartialEq)]
pub struct Individual {
    genome: Vec<f64>,
    fitness: Option<f64>,
    pub eval_seed: u64,
    pub round_born: usize,
}

impl Individual {
    /// Coordinates are clamped into `[0, 1]`; NaN becomes 0.
    pub fn new(genome: Vec<f64>, eval_seed: u64, round_born: usize) -> Self {
        let genome = genome
            .into_iter()
            .map(|g| if g.is_nan() { 0.0 } else { g.clamp(0.0, 1.0) })
            .collect();
        Self {
            genome,
            fitness: None,
            eval_seed,
            round_born,
        }
    }

    pub fn genome(&self) -> &[f64] {
        &self.genome
    }

    pub fn fitness(&self) -> Option<f64> {
        self.fitness
    }

    /// Fitness used for ranking: unscored individuals rank last.
    pub fn score(&self) -> f64 {
        self.fitness.unwrap_or(f64::NEG_INFINITY)
    }

    pub fn set_fitness(&mut self, fitness: f64) -> Result<()> {
        if self.fitness.is_some() {
            return Err(Error::invalid("fitness of an individual can only be set once"));
        }
        if fitness.is_nan() {
            return Err(Error::NonFinite("fitness".into()));
        }
        self.fitness = Some(fitness);
        Ok(())
    }
}

/// Copy of `parent` with one uniformly chosen coordinate resampled from
/// `Uniform[0, 1]`.
pub fn mutate<R: Rng + ?Sized>(parent: &Individual, rng: &mut R, round: usize) -> Result<Individual> {
    let d = parent.genome.len();
    if d == 0 {
        return Err(Error::invalid("cannot mutate an empty genome"));
    }
    let mut genome = parent.genome.clone();
    let i = rng.random_range(0..d);
    genome[i] = rng.random::<f64>();
    Ok(Individual::new(genome, parent.eval_seed, round))
}

/// Result of scoring one genome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub fitness: f64,
    #[serde(default)]
    pub per_trial_kl: Vec<f64>,
    #[serde(default)]
    pub weak_fitness: Option<f64>,
    #[serde(default)]
    pub elo_fitness: Option<f64>,
}

impl Evaluation {
    pub fn scalar(fitness: f64) -> Self {
        Self {
            fitness,
            per_trial_kl: Vec::new(),
            weak_fitness: None,
            elo_fitness: None,
        }
    }
}

pub trait FitnessFn: Sync {
    fn evaluate(&self, genome: &[f64], eval_seed: u64) -> Result<Evaluation>;
}

impl<F> FitnessFn for F
where
    F: Fn(&[f64], u64) -> Result<Evaluation> + Sync,
{
    fn evaluate(&self, genome: &[f64], eval_seed: u64) -> Result<Evaluation> {
        self(genome, eval_seed)
    }
}

/// Memoizes evaluations by exact genome bits and evaluation seed.
#[derive(Debug, Default)]
pub struct FitnessCache {
    entries: Mutex<HashMap<(Vec<u64>, u64), Evaluation>>,
    hits: Mutex<usize>,
}

impl FitnessCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn key(genome: &[f64], seed: u64) -> (Vec<u64>, u64) {
        (genome.iter().map(|g| g.to_bits()).collect(), seed)
    }

    pub fn get(&self, genome: &[f64], seed: u64) -> Option<Evaluation> {
        let found = self.entries.lock().expect("cache lock").get(&Self::key(genome, seed)).cloned();
        if found.is_some() {
            *self.hits.lock().expect("cache lock") += 1;
        }
        found
    }

    pub fn insert(&self, genome: &[f64], seed: u64, eval: Evaluation) {
        self.entries.lock().expect("cache lock").insert(Self::key(genome, seed), eval);
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hits(&self) -> usize {
        *self.hits.lock().expect("cache lock")
    }

    /// Cached or fresh evaluation. Failures are not cached.
    pub fn evaluate<F: FitnessFn + ?Sized>(&self, f: &F, genome: &[f64], seed: u64) -> Result<Evaluation> {
        if let Some(e) = self.get(genome, seed) {
            return Ok(e);
        }
        let e = f.evaluate(genome, seed)?;
        self.insert(genome, seed, e.clone());
        Ok(e)
    }
}

/// One line of `history.ndjson`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub round: usize,
    pub index: usize,
    pub strategy: Strategy,
    pub seed: u64,
    pub eval_seed: u64,
    pub genome: BTreeMap<String, f64>,
    /// `None` when the evaluation failed (fitness −∞).
    pub fitness: Option<f64>,
    #[serde(default)]
    pub elo_fitness: Option<f64>,
    #[serde(default)]
    pub weak_fitness: Option<f64>,
    #[serde(default)]
    pub per_trial_kl: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl HistoryRecord {
    pub fn score(&self) -> f64 {
        self.fitness.unwrap_or(f64::NEG_INFINITY)
    }

    /// Genome values in the order of `keys`.
    pub fn genome_in(&self, keys: &[String]) -> Result<Vec<f64>> {
        keys.iter()
            .map(|k| {
                self.genome
                    .get(k)
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("history record lacks weight {k}")))
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain data serializes")
    }
}

/// Writes one JSON object per line.
pub fn history_to_ndjson(records: &[HistoryRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&r.to_json());
        s.push('\n');
    }
    s
}

/// Parses NDJSON history; errors name the 1-based line.
pub fn parse_history(text: &str) -> Result<Vec<HistoryRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: HistoryRecord = serde_json::from_str(line)
            .map_err(|e| Error::History {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TournamentConfig {
    pub capacity: usize,
    pub t_size: usize,
}

impl Default for TournamentConfig {
    fn default() -> Self {
        Self { capacity: 25, t_size: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvolveConfig {
    pub strategy: Strategy,
    /// Total fitness evaluations.
    pub budget: usize,
    pub seed: u64,
    pub tournament: TournamentConfig,
    pub cma: CmaConfig,
    /// Levels per axis for grid search; `None` picks the largest that fits.
    pub grid_levels: Option<usize>,
}

impl Default for EvolveConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::CmaEs,
            budget: 60,
            seed: 0,
            tournament: TournamentConfig::default(),
            cma: CmaConfig::default(),
            grid_levels: None,
        }
    }
}

/// Search state. `history` is append-only and ordered by `(round, index)`.
#[derive(Clone, Debug)]
pub struct EvolutionState {
    pub strategy: Strategy,
    pub keys: Vec<String>,
    pub population: Vec<Individual>,
    pub history: Vec<HistoryRecord>,
    pub cma_state: Option<CmaState>,
    pub rng_seed: u64,
    /// Seed every genome is trained and scored with.
    pub eval_seed: u64,
    pub capacity: usize,
    rng: ChaCha8Rng,
    round: usize,
}

impl EvolutionState {
    pub fn new(config: &EvolveConfig, keys: &[String]) -> Result<Self> {
        if keys.is_empty() {
            return Err(Error::invalid("genome has no coordinates"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let eval_seed = rng.random::<u64>();
        let cma_state = match config.strategy {
            Strategy::CmaEs => Some(CmaState::new(keys.len(), &config.cma)?),
            _ => None,
        };
        Ok(Self {
            strategy: config.strategy,
            keys: keys.to_vec(),
            population: Vec::new(),
            history: Vec::new(),
            cma_state,
            rng_seed: config.seed,
            eval_seed,
            capacity: config.tournament.capacity.max(1),
            rng,
            round: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.keys.len()
    }

    pub fn rounds(&self) -> usize {
        self.round
    }

    pub fn best(&self) -> Option<&HistoryRecord> {
        self.history
            .iter()
            .fold(None, |best: Option<&HistoryRecord>, r| match best {
                Some(b) if b.score() >= r.score() => Some(b),
                _ => Some(r),
            })
    }

    /// Best fitness after each evaluation.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = f64::NEG_INFINITY;
        self.history
            .iter()
            .map(|r| {
                best = best.max(r.score());
                best
            })
            .collect()
    }

    fn random_genome(&mut self) -> Vec<f64> {
        (0..self.dim()).map(|_| self.rng.random::<f64>()).collect()
    }

    /// Scores `inds` concurrently, then appends them to the history in
    /// order as round `self.round`. Failed evaluations get fitness −∞.
    fn evaluate_round<F: FitnessFn + ?Sized>(
        &mut self,
        inds: &mut [Individual],
        fitness: &F,
        cache: &FitnessCache,
        exec: Exec,
    ) -> Result<()> {
        let results = exec.map(inds.len(), |i| cache.evaluate(fitness, inds[i].genome(), inds[i].eval_seed));
        for (index, (ind, res)) in inds.iter_mut().zip(results).enumerate() {
            let (eval, error) = match res {
                Ok(e) if !e.fitness.is_nan() => (e, None),
                Ok(_) => (Evaluation::scalar(f64::NEG_INFINITY), Some("fitness is NaN".to_string())),
                Err(e) => {
                    log::warn!("round {} individual {index}: evaluation failed: {e}", self.round);
                    (Evaluation::scalar(f64::NEG_INFINITY), Some(e.to_string()))
                }
            };
            ind.set_fitness(eval.fitness)?;
            self.history.push(HistoryRecord {
                round: self.round,
                index,
                strategy: self.strategy,
                seed: self.rng_seed,
                eval_seed: ind.eval_seed,
                genome: self.keys.iter().cloned().zip(ind.genome().iter().copied()).collect(),
                fitness: eval.fitness.is_finite().then_some(eval.fitness),
                elo_fitness: eval.elo_fitness,
                weak_fitness: eval.weak_fitness,
                per_trial_kl: eval.per_trial_kl,
                error,
            });
        }
        self.round += 1;
        Ok(())
    }

    fn insert(&mut self, ind: Individual) {
        self.population.push(ind);
        if self.population.len() > self.capacity {
            let oldest = (0..self.population.len())
                .min_by_key(|&i| (self.population[i].round_born, i))
                .expect("non-empty population");
            self.population.remove(oldest);
        }
    }
}

/// Index of the fittest of `t_size` distinct population members drawn
/// uniformly; ties go to the earliest drawn.
pub fn tournament_select<R: Rng + ?Sized>(population: &[Individual], t_size: usize, rng: &mut R) -> Result<usize> {
    if population.is_empty() {
        return Err(Error::invalid("tournament needs a non-empty population"));
    }
    if t_size == 0 || t_size > population.len() {
        return Err(Error::invalid(format!(
            "tournament size {t_size} must be in 1..={}",
            population.len()
        )));
    }
    let mut best: Option<usize> = None;
    for i in sample(rng, population.len(), t_size) {
        if best.is_none_or(|b| population[i].score() > population[b].score()) {
            best = Some(i);
        }
    }
    Ok(best.expect("t_size >= 1"))
}

/// Mutates the tournament winner, scores the child, inserts it and evicts
/// the oldest member past capacity. Returns the scored child.
pub fn tournament_step<F: FitnessFn + ?Sized>(
    state: &mut EvolutionState,
    t_size: usize,
    fitness: &F,
    cache: &FitnessCache,
) -> Result<Individual> {
    let parent = tournament_select(&state.population, t_size, &mut state.rng)?;
    let child = mutate(&state.population[parent], &mut state.rng, state.round)?;
    let mut batch = [child];
    state.evaluate_round(&mut batch, fitness, cache, Exec::Sequential)?;
    let [child] = batch;
    state.insert(child.clone());
    Ok(child)
}

/// Samples one CMA-ES generation as unscored individuals.
pub fn cma_ask(state: &mut EvolutionState) -> Result<Vec<Individual>> {
    let cma = state
        .cma_state
        .as_ref()
        .ok_or_else(|| Error::invalid("state has no CMA-ES component"))?;
    let round = state.round;
    let seed = state.eval_seed;
    Ok(cma
        .ask(&mut state.rng)
        .into_iter()
        .map(|g| Individual::new(g, seed, round))
        .collect())
}

/// Updates the CMA-ES distribution from scored individuals.
pub fn cma_tell(state: &mut EvolutionState, evaluated: &[Individual]) -> Result<()> {
    let cma = state
        .cma_state
        .as_mut()
        .ok_or_else(|| Error::invalid("state has no CMA-ES component"))?;
    let samples: Vec<(Vec<f64>, f64)> = evaluated
        .iter()
        .map(|i| (i.genome().to_vec(), i.score()))
        .collect();
    cma.tell(&samples)
}

/// Largest `L ≥ 2` with `L^d ≤ budget`, or `None` when even `2^d` does not fit.
pub fn grid_levels_for(d: usize, budget: usize) -> Option<usize> {
    let fits = |l: usize| -> bool {
        let mut n: usize = 1;
        for _ in 0..d {
            n = match n.checked_mul(l) {
                Some(v) if v <= budget => v,
                _ => return false,
            };
        }
        true
    };
    if !fits(2) {
        return None;
    }
    let mut l = 2;
    while fits(l + 1) {
        l += 1;
    }
    Some(l)
}

/// Grid point `index` (mixed radix, first coordinate fastest) with values
/// `j / (levels - 1)`.
pub fn grid_point(index: usize, d: usize, levels: usize) -> Vec<f64> {
    let mut rest = index;
    (0..d)
        .map(|_| {
            let j = rest % levels;
            rest /= levels;
            j as f64 / (levels - 1) as f64
        })
        .collect()
}

/// Points evaluated by grid search. When the full grid exceeds the budget,
/// a seeded sample without replacement of the 3-level grid is used.
fn grid_points<R: Rng + ?Sized>(d: usize, budget: usize, levels: Option<usize>, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let levels = match levels {
        Some(l) if l < 2 => return Err(Error::invalid("grid needs at least 2 levels per axis")),
        Some(l) => l,
        None => grid_levels_for(d, budget).unwrap_or(3),
    };
    let total = (0..d).try_fold(1usize, |n, _| n.checked_mul(levels));
    match total {
        Some(n) if n <= budget => Ok((0..n).map(|i| grid_point(i, d, levels)).collect()),
        _ => {
            // index sampling over a grid too large for usize falls back to
            // independent per-axis draws, rejecting duplicates
            let mut seen = std::collections::BTreeSet::new();
            let mut out = Vec::with_capacity(budget);
            if let Some(n) = total {
                for i in sample(rng, n, budget) {
                    out.push(grid_point(i, d, levels));
                }
                return Ok(out);
            }
            while out.len() < budget {
                let idx: Vec<usize> = (0..d).map(|_| rng.random_range(0..levels)).collect();
                if seen.insert(idx.clone()) {
                    out.push(idx.iter().map(|&j| j as f64 / (levels - 1) as f64).collect());
                }
            }
            Ok(out)
        }
    }
}

/// Runs `config.strategy` for `config.budget` evaluations and returns the
/// best individual with the full state. Failed evaluations score −∞ and
/// the search continues.
pub fn evolve<F: FitnessFn + ?Sized>(
    config: &EvolveConfig,
    keys: &[String],
    fitness: &F,
    exec: Exec,
) -> Result<(Individual, EvolutionState)> {
    let cache = FitnessCache::new();
    evolve_with_cache(config, keys, fitness, &cache, exec)
}

pub fn evolve_with_cache<F: FitnessFn + ?Sized>(
    config: &EvolveConfig,
    keys: &[String],
    fitness: &F,
    cache: &FitnessCache,
    exec: Exec,
) -> Result<(Individual, EvolutionState)> {
    if config.budget == 0 {
        return Err(Error::invalid("evolution budget must be at least 1"));
    }
    let mut state = EvolutionState::new(config, keys)?;
    let budget = config.budget;
    let seed = state.eval_seed;
    match config.strategy {
        Strategy::Random => {
            let mut inds: Vec<Individual> = (0..budget)
                .map(|_| Individual::new(state.random_genome(), seed, 0))
                .collect();
            state.evaluate_round(&mut inds, fitness, cache, exec)?;
            state.population = inds;
        }
        Strategy::Grid => {
            let points = grid_points(state.dim(), budget, config.grid_levels, &mut state.rng)?;
            let mut inds: Vec<Individual> = points.into_iter().map(|g| Individual::new(g, seed, 0)).collect();
            state.evaluate_round(&mut inds, fitness, cache, exec)?;
            state.population = inds;
        }
        Strategy::Tournament => {
            let initial = state.capacity.min(budget);
            let mut inds: Vec<Individual> = (0..initial)
                .map(|_| Individual::new(state.random_genome(), seed, 0))
                .collect();
            state.evaluate_round(&mut inds, fitness, cache, exec)?;
            state.population = inds;
            let t_size = config.tournament.t_size.min(state.population.len());
            for _ in initial..budget {
                tournament_step(&mut state, t_size, fitness, cache)?;
            }
        }
        Strategy::CmaEs => {
            let mut left = budget;
            while left > 0 {
                let mut inds = cma_ask(&mut state)?;
                // a final partial generation spends the remaining budget
                // without an update
                let full = inds.len() <= left;
                inds.truncate(left);
                left -= inds.len();
                state.evaluate_round(&mut inds, fitness, cache, exec)?;
                if full {
                    cma_tell(&mut state, &inds)?;
                }
                state.population = inds;
            }
        }
    }
    let best = state.best().expect("budget >= 1 produced a record");
    let genome = best.genome_in(&state.keys)?;
    let mut ind = Individual::new(genome, best.eval_seed, best.round);
    ind.set_fitness(best.score())?;
    Ok((ind, state))
}

#[cfg(test)]
mod tests;
