use proptest::prelude::{any, prop, prop_assert, prop_assert_eq, proptest, ProptestConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::losses::{GenomeLayout, LossKey, LossWeights};
use crate::model::ModelBundle;
use crate::synthgen::Dataset;
use crate::testutil::{tiny_data, tiny_model};

fn keys(d: usize) -> Vec<String> {
    (0..d).map(|i| format!("w{i}")).collect()
}

fn sphere(center: f64) -> impl Fn(&[f64], u64) -> Result<Evaluation> + Sync {
    move |g: &[f64], _| Ok(Evaluation::scalar(-g.iter().map(|x| (x - center).powi(2)).sum::<f64>()))
}

fn config(strategy: Strategy, budget: usize, seed: u64) -> EvolveConfig {
    EvolveConfig {
        strategy,
        budget,
        seed,
        ..EvolveConfig::default()
    }
}

#[test]
fn mutate_changes_exactly_one_coordinate() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let parent = Individual::new(vec![0.25; 6], 9, 0);
    for _ in 0..200 {
        let child = mutate(&parent, &mut rng, 1).unwrap();
        let changed = parent.genome().iter().zip(child.genome()).filter(|(a, b)| a != b).count();
        assert_eq!(changed, 1);
        assert_eq!(child.eval_seed, 9);
        assert_eq!(child.round_born, 1);
        assert!(child.fitness().is_none());
    }
    let single = Individual::new(vec![0.5], 0, 0);
    assert_ne!(mutate(&single, &mut rng, 1).unwrap().genome(), single.genome());
    assert!(mutate(&Individual::new(vec![], 0, 0), &mut rng, 1).is_err());
}

#[test]
fn mutate_picks_coordinates_uniformly() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let parent = Individual::new(vec![2.0; 10], 0, 0);
    let mut counts = [0usize; 10];
    let mut values = Vec::new();
    for _ in 0..10_000 {
        let child = mutate(&parent, &mut rng, 1).unwrap();
        let i = child.genome().iter().position(|&v| v != 1.0).unwrap();
        counts[i] += 1;
        values.push(child.genome()[i]);
    }
    for c in counts {
        assert!((900..=1100).contains(&c), "{counts:?}");
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    assert!((mean - 0.5).abs() < 0.02, "{mean}");
}

#[test]
fn individual_clamps_and_sets_fitness_once() {
    let mut ind = Individual::new(vec![-0.5, 0.3, 7.0, f64::NAN], 0, 0);
    assert_eq!(ind.genome(), &[0.0, 0.3, 1.0, 0.0]);
    assert_eq!(ind.score(), f64::NEG_INFINITY);
    ind.set_fitness(-1.0).unwrap();
    assert!(ind.set_fitness(0.0).is_err());
    assert_eq!(ind.fitness(), Some(-1.0));
    assert!(Individual::new(vec![0.1], 0, 0).set_fitness(f64::NAN).is_err());
}

fn scored(values: &[f64]) -> Vec<Individual> {
    values
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            let mut ind = Individual::new(vec![i as f64 / 10.0], 0, i);
            ind.set_fitness(f).unwrap();
            ind
        })
        .collect()
}

#[test]
fn full_tournament_picks_global_best() {
    let pop = scored(&[0.1, -3.0, 0.9, 0.4, 0.2]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..50 {
        assert_eq!(tournament_select(&pop, 5, &mut rng).unwrap(), 2);
    }
}

#[test]
fn unit_tournament_is_uniform() {
    let pop = scored(&[0.1, -3.0, 0.9, 0.4, 0.2]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut counts = [0usize; 5];
    for _ in 0..5000 {
        counts[tournament_select(&pop, 1, &mut rng).unwrap()] += 1;
    }
    for c in counts {
        assert!((880..=1120).contains(&c), "{counts:?}");
    }
}

#[test]
fn tournament_rejects_bad_sizes() {
    let pop = scored(&[0.1, 0.2]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert!(tournament_select(&pop, 3, &mut rng).is_err());
    assert!(tournament_select(&pop, 0, &mut rng).is_err());
    assert!(tournament_select(&[], 1, &mut rng).is_err());
}

#[test]
fn tournament_step_evicts_oldest() {
    let cfg = EvolveConfig {
        tournament: TournamentConfig { capacity: 3, t_size: 2 },
        ..config(Strategy::Tournament, 3, 0)
    };
    let f = sphere(0.5);
    let cache = FitnessCache::new();
    let (_, mut state) = evolve_with_cache(&cfg, &keys(4), &f, &cache, Exec::Sequential).unwrap();
    assert_eq!(state.population.len(), 3);
    let first = state.population[0].clone();
    let child = tournament_step(&mut state, 2, &f, &cache).unwrap();
    assert_eq!(state.population.len(), 3);
    assert!(!state.population.contains(&first));
    assert_eq!(state.population.last(), Some(&child));
    assert_eq!(child.round_born, 1);
    assert_eq!(state.history.len(), 4);
}

fn tournament_sphere_successes(t_size: usize) -> usize {
    (0..5)
        .filter(|&seed| {
            let cfg = EvolveConfig {
                tournament: TournamentConfig { capacity: 25, t_size },
                ..config(Strategy::Tournament, 500, seed)
            };
            let (best, _) = evolve(&cfg, &keys(8), &sphere(0.5), Exec::Sequential).unwrap();
            best.score() > -0.01
        })
        .count()
}

#[test]
fn tournament_solves_sphere() {
    assert!(tournament_sphere_successes(15) >= 4);
}

#[test]
fn cma_zero_step_samples_the_mean() {
    let mut cma = CmaState::new(
        3,
        &CmaConfig {
            sigma0: 0.0,
            mean0: 0.7,
            popsize: Some(4),
        },
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for s in cma.ask(&mut rng) {
        assert_eq!(s, vec![0.7; 3]);
    }
    cma.mean[0] = 1.0;
    assert!(cma.ask(&mut rng).iter().all(|s| s[0] == 1.0));
}

#[test]
fn cma_rejects_small_population() {
    let bad = CmaConfig {
        popsize: Some(1),
        ..CmaConfig::default()
    };
    assert!(CmaState::new(4, &bad).is_err());
    assert!(CmaState::new(0, &CmaConfig::default()).is_err());
}

#[test]
fn cma_default_population() {
    assert_eq!(default_popsize(8), 10);
    assert_eq!(default_popsize(21), 13);
    let s = CmaState::new(8, &CmaConfig::default()).unwrap();
    assert_eq!((s.lambda, s.mu), (10, 5));
    assert!((s.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(s.weights.windows(2).all(|w| w[0] > w[1]));
}

/// Generations until the mean is within `tol` (Euclidean) of `center`.
fn cma_generations(seed: u64, center: f64, tol: f64, limit: usize) -> Option<usize> {
    let mut cma = CmaState::new(8, &CmaConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = sphere(center);
    for g in 0..limit {
        let samples: Vec<(Vec<f64>, f64)> = cma
            .ask(&mut rng)
            .into_iter()
            .map(|x| {
                let v = f(&x, 0).unwrap().fitness;
                (x, v)
            })
            .collect();
        cma.tell(&samples).unwrap();
        assert!(cma.mean.iter().all(|m| (0.0..=1.0).contains(m)));
        let dist = cma.mean.iter().map(|m| (m - center).powi(2)).sum::<f64>().sqrt();
        if dist < tol {
            return Some(g + 1);
        }
    }
    None
}

#[test]
fn cma_solves_sphere() {
    let hits = (0..5).filter(|&s| cma_generations(s, 0.3, 1e-3, 250).is_some()).count();
    assert!(hits >= 4, "{hits}/5");
}

#[test]
fn cma_mean_stays_in_box_for_corner_optimum() {
    let mut cma = CmaState::new(4, &CmaConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..60 {
        let samples: Vec<(Vec<f64>, f64)> = cma
            .ask(&mut rng)
            .into_iter()
            .map(|x| {
                let v = x.iter().sum::<f64>();
                (x, v)
            })
            .collect();
        assert!(samples.iter().all(|(x, _)| x.iter().all(|v| (0.0..=1.0).contains(v))));
        cma.tell(&samples).unwrap();
        assert!(cma.mean.iter().all(|m| (0.0..=1.0).contains(m)));
    }
    assert!(cma.mean.iter().all(|&m| m > 0.9));
}

#[test]
fn cma_floors_collapsed_covariance() {
    let mut cma = CmaState::new(3, &CmaConfig::default()).unwrap();
    // identical samples drive the rank-μ update towards a singular matrix
    let same = vec![(vec![0.5, 0.5, 0.5], 1.0); 7];
    for _ in 0..400 {
        cma.tell(&same).unwrap();
    }
    let eig = nalgebra::SymmetricEigen::new(cma.cov.clone());
    assert!(eig.eigenvalues.iter().all(|&v| v >= EIGEN_FLOOR * 0.999));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(cma.ask(&mut rng).iter().flatten().all(|v| v.is_finite()));
}

#[test]
fn random_budget_one() {
    let (best, state) = evolve(&config(Strategy::Random, 1, 5), &keys(3), &sphere(0.5), Exec::Sequential).unwrap();
    assert_eq!(state.history.len(), 1);
    assert_eq!(best.genome(), state.history[0].genome_in(&state.keys).unwrap());
    assert!(evolve(&config(Strategy::Random, 0, 5), &keys(3), &sphere(0.5), Exec::Sequential).is_err());
}

#[test]
fn grid_two_axes_three_levels() {
    let (_, state) = evolve(&config(Strategy::Grid, 9, 0), &keys(2), &sphere(0.5), Exec::Sequential).unwrap();
    assert_eq!(state.history.len(), 9);
    let mut points: Vec<Vec<f64>> = state
        .history
        .iter()
        .map(|r| r.genome_in(&state.keys).unwrap())
        .collect();
    points.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut expected = Vec::new();
    for a in [0.0, 0.5, 1.0] {
        for b in [0.0, 0.5, 1.0] {
            expected.push(vec![a, b]);
        }
    }
    assert_eq!(points, expected);
}

#[test]
fn grid_level_choice() {
    assert_eq!(grid_levels_for(2, 9), Some(3));
    assert_eq!(grid_levels_for(2, 15), Some(3));
    assert_eq!(grid_levels_for(2, 16), Some(4));
    assert_eq!(grid_levels_for(21, 60), None);
    assert_eq!(grid_point(5, 2, 3), vec![1.0, 0.5]);
}

#[test]
fn grid_subsamples_large_spaces() {
    let (_, state) = evolve(&config(Strategy::Grid, 60, 4), &keys(21), &sphere(0.5), Exec::Sequential).unwrap();
    assert_eq!(state.history.len(), 60);
    let mut seen = std::collections::BTreeSet::new();
    for r in &state.history {
        let g = r.genome_in(&state.keys).unwrap();
        assert!(g.iter().all(|v| [0.0, 0.5, 1.0].contains(v)));
        assert!(seen.insert(g.iter().map(|v| v.to_bits()).collect::<Vec<_>>()));
    }
}

#[test]
fn cma_spends_exact_budget() {
    let (_, state) = evolve(&config(Strategy::CmaEs, 25, 1), &keys(8), &sphere(0.3), Exec::Sequential).unwrap();
    assert_eq!(state.history.len(), 25);
    assert_eq!(state.cma_state.as_ref().unwrap().generation, 2);
    let rounds: Vec<usize> = state.history.iter().map(|r| r.round).collect();
    assert_eq!(rounds.iter().filter(|&&r| r == 2).count(), 5);
}

#[test]
fn failures_score_negative_infinity() {
    let f = |g: &[f64], _: u64| -> Result<Evaluation> {
        if g[0] > 0.5 {
            Err(crate::Error::NonFinite("loss".into()))
        } else {
            Ok(Evaluation::scalar(g[0]))
        }
    };
    let (best, state) = evolve(&config(Strategy::Random, 40, 2), &keys(2), &f, Exec::Sequential).unwrap();
    assert_eq!(state.history.len(), 40);
    let failed: Vec<_> = state.history.iter().filter(|r| r.fitness.is_none()).collect();
    assert!(!failed.is_empty());
    assert!(failed.iter().all(|r| r.error.is_some() && r.score() == f64::NEG_INFINITY));
    assert!(best.score() <= 0.5 && best.score() > 0.0);
}

#[test]
fn every_strategy_is_reproducible_and_monotone() {
    for strategy in Strategy::ALL {
        let cfg = config(strategy, 40, 7);
        let (b1, s1) = evolve(&cfg, &keys(5), &sphere(0.2), Exec::Sequential).unwrap();
        let (b2, s2) = evolve(&cfg, &keys(5), &sphere(0.2), Exec::Parallel).unwrap();
        assert_eq!(history_to_ndjson(&s1.history), history_to_ndjson(&s2.history), "{strategy}");
        assert_eq!(b1, b2);
        assert!(s1.history.len() <= 40 && !s1.history.is_empty());
        let best = s1.best_so_far();
        assert!(best.windows(2).all(|w| w[1] >= w[0]), "{strategy}");
        assert_eq!(*best.last().unwrap(), b1.score());
        for r in &s1.history {
            assert!(r.genome.values().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(r.strategy, strategy);
        }
        let keys_ordered: Vec<(usize, usize)> = s1.history.iter().map(|r| (r.round, r.index)).collect();
        let mut sorted = keys_ordered.clone();
        sorted.sort();
        assert_eq!(keys_ordered, sorted);
    }
}

#[test]
fn different_seeds_differ() {
    let a = evolve(&config(Strategy::Random, 5, 1), &keys(3), &sphere(0.5), Exec::Sequential).unwrap().1;
    let b = evolve(&config(Strategy::Random, 5, 2), &keys(3), &sphere(0.5), Exec::Sequential).unwrap().1;
    assert_ne!(history_to_ndjson(&a.history), history_to_ndjson(&b.history));
}

#[test]
fn cache_skips_repeat_evaluations() {
    let calls = std::sync::atomic::AtomicUsize::new(0);
    let f = |g: &[f64], seed: u64| -> Result<Evaluation> {
        calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        Ok(Evaluation::scalar(g[0] + seed as f64))
    };
    let cache = FitnessCache::new();
    let a = cache.evaluate(&f, &[0.25, 0.5], 1).unwrap();
    let b = cache.evaluate(&f, &[0.25, 0.5], 1).unwrap();
    assert_eq!(a, b);
    assert_eq!(calls.load(std::sync::atomic::Ordering::SeqCst), 1);
    assert_eq!(cache.hits(), 1);
    cache.evaluate(&f, &[0.25, 0.5], 2).unwrap();
    cache.evaluate(&f, &[0.25, 0.5000000000000001], 1).unwrap();
    assert_eq!(calls.load(std::sync::atomic::Ordering::SeqCst), 3);
    assert_eq!(cache.len(), 3);
}

#[test]
fn grid_repeats_hit_the_cache() {
    let cache = FitnessCache::new();
    let cfg = config(Strategy::Grid, 9, 0);
    evolve_with_cache(&cfg, &keys(2), &sphere(0.5), &cache, Exec::Sequential).unwrap();
    evolve_with_cache(&cfg, &keys(2), &sphere(0.5), &cache, Exec::Sequential).unwrap();
    assert_eq!(cache.len(), 9);
    assert_eq!(cache.hits(), 9);
}

#[test]
fn history_round_trips_and_reports_bad_lines() {
    let (_, state) = evolve(&config(Strategy::CmaEs, 12, 3), &keys(3), &sphere(0.5), Exec::Sequential).unwrap();
    let text = history_to_ndjson(&state.history);
    assert_eq!(parse_history(&text).unwrap(), state.history);
    let broken = format!("{}\n{{not json\n", state.history[0].to_json());
    match parse_history(&broken) {
        Err(crate::Error::History { line, .. }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }
}

#[test]
fn strategy_names_parse() {
    for s in Strategy::ALL {
        assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.name()));
    }
    assert!("annealing".parse::<Strategy>().is_err());
}

// proxy training

fn proxy_fixture() -> (Dataset, GenomeLayout) {
    let (data, _) = Dataset::generate(&tiny_data(12), Exec::Sequential).unwrap();
    let layout = GenomeLayout::parse(&["RR", "GR", "RS", "GD1"]).unwrap();
    (data, layout)
}

fn small_proxy(steps: usize) -> ProxyConfig {
    ProxyConfig {
        train_steps: steps,
        batch_size: 4,
        encoder_scale: EncoderScale::Full,
        lr: 0.1,
        warmup_steps: 2,
        ..ProxyConfig::default()
    }
}

#[test]
fn zero_genome_keeps_the_initialization() {
    let (data, layout) = proxy_fixture();
    let clips: Vec<_> = data.clips.iter().collect();
    let init = ModelBundle::new(&layout, &data.config, &tiny_model(), 4).unwrap();
    let expected = init.embed_clips(&clips, Exec::Sequential).unwrap();
    let zero = LossWeights::from_genome(&layout, &[0.0; 4]).unwrap();
    let (emb, ids) = proxy_train(&zero, &data, &layout, &tiny_model(), &small_proxy(5), 4, Exec::Sequential).unwrap();
    assert_eq!(emb, expected);
    assert_eq!(ids, (0..12).collect::<Vec<u64>>());
    let some = LossWeights::from_genome(&layout, &[0.9, 0.1, 0.4, 0.7]).unwrap();
    let (none, _) = proxy_train(&some, &data, &layout, &tiny_model(), &small_proxy(0), 4, Exec::Sequential).unwrap();
    assert_eq!(none, expected);
    let (trained, _) = proxy_train(&some, &data, &layout, &tiny_model(), &small_proxy(5), 4, Exec::Sequential).unwrap();
    assert_ne!(trained, expected);
}

#[test]
fn reconstruction_only_genome_learns() {
    let (data, _) = Dataset::generate(&tiny_data(32), Exec::Sequential).unwrap();
    let layout = GenomeLayout::full();
    let mut genome = vec![0.0; layout.dim()];
    let rr: LossKey = "RR".parse().unwrap();
    genome[layout.index_of(&rr).unwrap()] = 1.0;
    let weights = LossWeights::from_genome(&layout, &genome).unwrap();
    let clips: Vec<_> = data.clips.iter().collect();
    let cfg = TrainConfig {
        steps: 200,
        batch_size: 8,
        lr: 0.1,
        warmup_steps: 10,
        clip_norm: Some(5.0),
    };
    let mut wins = 0;
    for seed in 0..5 {
        let mut bundle = ModelBundle::new(&layout, &data.config, &tiny_model(), seed).unwrap();
        let mut trace = Vec::new();
        train_bundle(&mut bundle, &weights, &clips, &cfg, seed, |_, b| trace.push(b.parts[&rr])).unwrap();
        assert_eq!(trace.len(), 200);
        let head: f64 = trace[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = trace[180..].iter().sum::<f64>() / 20.0;
        if tail < head {
            wins += 1;
        }
    }
    assert!(wins >= 4, "{wins}/5");
}

#[test]
fn training_rejects_mismatched_weights() {
    let (data, layout) = proxy_fixture();
    let other = GenomeLayout::parse(&["RR"]).unwrap();
    let w = LossWeights::uniform(&other, 0.5).unwrap();
    let mut bundle = ModelBundle::new(&layout, &data.config, &tiny_model(), 0).unwrap();
    let clips: Vec<_> = data.clips.iter().collect();
    assert!(matches!(
        train_bundle(&mut bundle, &w, &clips, &TrainConfig::default(), 0, |_, _| {}),
        Err(crate::Error::KeyMismatch { .. })
    ));
}

#[test]
fn proxy_evaluator_scores_and_replays() {
    let (data, layout) = proxy_fixture();
    let (_, labels) = Dataset::generate(&tiny_data(12), Exec::Sequential).unwrap();
    let eval = ProxyEvaluator {
        dataset: &data,
        layout: layout.clone(),
        model: tiny_model(),
        proxy: small_proxy(4),
        kind: FitnessKind::Elo,
        k: 3,
        zipf_s: 1.0,
        trials: 3,
        labels: Some(&labels.0),
        exec: Exec::Sequential,
    };
    let g = [0.3, 0.6, 0.1, 0.8];
    let a = eval.evaluate(&g, 5).unwrap();
    let b = eval.evaluate(&g, 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.per_trial_kl.len(), 3);
    assert_eq!(Some(a.fitness), a.elo_fitness);
    assert!(a.fitness <= 0.0);
    let w = a.weak_fitness.unwrap();
    assert!((0.0..=1.0).contains(&w));
    let blind = ProxyEvaluator {
        labels: None,
        kind: FitnessKind::Weak,
        ..eval
    };
    assert!(matches!(blind.evaluate(&g, 5), Err(crate::Error::LabelAccess(_))));
}

#[test]
fn proxy_config_validation_and_scale() {
    assert!(ProxyConfig::default().validate().is_ok());
    let zero = ProxyConfig {
        train_steps: 0,
        ..ProxyConfig::default()
    };
    assert!(zero.validate().is_err());
    let frac = ProxyConfig {
        dataset_fraction: 0.0,
        ..ProxyConfig::default()
    };
    assert!(frac.validate().is_err());
    let small = EncoderScale::Small.apply(&crate::model::ModelConfig::default());
    assert_eq!(small.hidden, vec![64, 32]);
    assert_eq!(small.embed_dim, 32);
}

#[test]
fn dataset_fraction_limits_training_clips() {
    let (data, _) = proxy_fixture();
    let p = ProxyConfig {
        dataset_fraction: 0.25,
        eval_clips: Some(5),
        ..ProxyConfig::default()
    };
    let (train, eval) = proxy_splits(&data, &p);
    assert_eq!(train.len(), 3);
    assert_eq!(eval.len(), 5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mutation_stays_in_unit_box(genome in prop::collection::vec(0.0f64..=1.0, 1..12), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ind = Individual::new(genome, 0, 0);
        for r in 0..20 {
            ind = mutate(&ind, &mut rng, r).unwrap();
            prop_assert!(ind.genome().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn best_so_far_never_drops(seed in 0u64..1000, budget in 1usize..40, s in 0usize..4) {
        let strategy = Strategy::ALL[s];
        let f = |g: &[f64], _: u64| Ok(Evaluation::scalar((g[0] * 13.0).sin() - g[1]));
        let (best, state) = evolve(&config(strategy, budget, seed), &keys(3), &f, Exec::Sequential).unwrap();
        prop_assert!(state.history.len() <= budget);
        if strategy != Strategy::Grid {
            prop_assert_eq!(state.history.len(), budget);
        }
        let trace = state.best_so_far();
        prop_assert!(trace.windows(2).all(|w| w[1] >= w[0]));
        prop_assert_eq!(best.score(), *trace.last().unwrap());
    }
}

