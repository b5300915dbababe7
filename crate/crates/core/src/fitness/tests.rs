use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;

fn model(rows: &[Vec<f64>]) -> ClusterModel {
    let centroids = DenseArray::from_rows(rows).unwrap();
    ClusterModel {
        k: rows.len(),
        centroids,
        seed: 0,
        sse_history: vec![],
    }
}

/// Groups of points tightly packed around far-apart centres.
fn groups(sizes: &[usize], dim: usize, seed: u64) -> DenseArray {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.01).unwrap();
    let mut rows = Vec::new();
    for (g, &n) in sizes.iter().enumerate() {
        for _ in 0..n {
            let mut r: Vec<f64> = (0..dim).map(|_| noise.sample(&mut rng)).collect();
            r[g % dim] += 100.0 * (1 + g / dim) as f64;
            rows.push(r);
        }
    }
    DenseArray::from_rows(&rows).unwrap()
}

fn kl_oracle(p: &[f64], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        if p[i] != 0.0 {
            s += p[i] * (p[i].ln() - q[i].ln());
        }
    }
    s
}

#[test]
fn kmeans_single_cluster_is_the_mean() {
    let x = DenseArray::from_rows(&[vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0, 8.0]]).unwrap();
    let m = kmeans(&x, 1, 3, 100).unwrap();
    assert!((m.centroids.row(0)[0] - 2.0).abs() < 1e-12);
    assert!((m.centroids.row(0)[1] - 4.0).abs() < 1e-12);
}

#[test]
fn kmeans_finds_two_blobs() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let noise = Normal::new(0.0, 0.1).unwrap();
    let means = [[0.0, 0.0], [10.0, 0.0]];
    let rows: Vec<Vec<f64>> = (0..200)
        .map(|i| {
            let m = means[i % 2];
            vec![m[0] + noise.sample(&mut rng), m[1] + noise.sample(&mut rng)]
        })
        .collect();
    let x = DenseArray::from_rows(&rows).unwrap();
    for seed in 0..5 {
        let m = kmeans(&x, 2, seed, 100).unwrap();
        for mean in means {
            let best = (0..2)
                .map(|c| sq_dist(m.centroids.row(c), &mean).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 0.2, "seed {seed}: {best}");
        }
    }
}

#[test]
fn kmeans_is_deterministic_and_checks_sizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rows: Vec<Vec<f64>> = (0..50).map(|_| (0..3).map(|_| rng.random()).collect()).collect();
    let x = DenseArray::from_rows(&rows).unwrap();
    let a = kmeans(&x, 4, 7, 100).unwrap();
    let b = kmeans(&x, 4, 7, 100).unwrap();
    let bits = |m: &ClusterModel| m.centroids.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert!(kmeans(&x, 51, 0, 100).is_err());
    assert!(kmeans(&x, 0, 0, 100).is_err());
}

#[test]
fn zipf_prior_values() {
    assert_eq!(zipf_prior(1, 1.0).unwrap(), vec![1.0]);
    let q = zipf_prior(3, 1.0).unwrap();
    for (a, b) in q.iter().zip([6.0 / 11.0, 3.0 / 11.0, 2.0 / 11.0]) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(zipf_prior(3, 10.0).unwrap()[0] > 0.99);
    assert!(zipf_prior(0, 1.0).is_err());
    assert!(zipf_prior(3, 0.0).is_err());
}

#[test]
fn soft_membership_values() {
    let m = model(&[vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]]);
    for p in soft_membership(&[0.0, 0.0], &m) {
        assert!((p - 0.25).abs() < 1e-15);
    }
    let m = model(&[vec![0.0], vec![9f64.ln().sqrt()]]);
    let p = soft_membership(&[0.0], &m);
    assert!((p[0] - 0.9).abs() < 1e-12 && (p[1] - 0.1).abs() < 1e-12);
    // far from everything: no overflow
    let p = soft_membership(&[1e6], &m);
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn cluster_mass_values() {
    let one = DenseArray::from_rows(&[vec![0.2, 0.8]]).unwrap();
    assert_eq!(cluster_mass(&one), vec![0.2, 0.8]);
    let two = DenseArray::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    assert_eq!(cluster_mass(&two), vec![0.5, 0.5]);
}

#[test]
fn kl_values() {
    let p = [0.2, 0.3, 0.5];
    assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-12);
    let v = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
    assert!((v - std::f64::consts::LN_2).abs() < 1e-9);
    assert!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).is_err());
    assert!(kl_divergence(&[0.5, 0.6], &[0.5, 0.5]).is_err());
    assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
}

#[test]
fn elo_fitness_of_zipf_shaped_and_uniform_groups() {
    // 66 : 33 : 22 is exactly 6/11 : 3/11 : 2/11
    let x = groups(&[66, 33, 22], 3, 0);
    let r = elo_fitness(&x, 3, 1.0, 5, 0, Exec::Sequential).unwrap();
    assert!(r.mean_kl < 1e-9, "{}", r.mean_kl);
    let x = groups(&[40, 40, 40], 3, 1);
    let r = elo_fitness(&x, 3, 1.0, 5, 0, Exec::Sequential).unwrap();
    let q: [f64; 3] = [6.0 / 11.0, 3.0 / 11.0, 2.0 / 11.0];
    let want: f64 = q.iter().map(|qi| (1.0 / 3.0) * ((1.0 / 3.0) / qi).ln()).sum();
    assert!((r.mean_kl - want).abs() < 1e-9);
    // (1/3)(ln(11/18) + ln(11/9) + ln(11/6))
    assert!((want - 0.104777).abs() < 1e-6);
    assert_eq!(r.per_trial_kl.len(), 5);
    assert_eq!(r.fitness, -r.mean_kl);
    assert!((r.cluster_masses.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!((r.prior.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn elo_parallel_matches_sequential() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rows: Vec<Vec<f64>> = (0..300).map(|_| (0..4).map(|_| rng.random()).collect()).collect();
    let x = DenseArray::from_rows(&rows).unwrap();
    let a = elo_fitness(&x, 5, 1.0, 8, 3, Exec::Sequential).unwrap();
    let b = elo_fitness(&x, 5, 1.0, 8, 3, Exec::Parallel).unwrap();
    assert_eq!(a, b);
    assert!(FitnessReport::to_json(&a).contains("per_trial_kl"));
}

#[test]
fn elo_invariant_under_rotation_within_trial_spread() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let centres = [[0.0, 0.0], [3.0, 1.0], [-2.0, 4.0], [5.0, -3.0]];
    let rows: Vec<Vec<f64>> = (0..400)
        .map(|i| {
            let c = centres[(i * i) % 4];
            vec![c[0] + normal.sample(&mut rng) * 0.7, c[1] + normal.sample(&mut rng) * 0.7]
        })
        .collect();
    let x = DenseArray::from_rows(&rows).unwrap();
    let (s, c) = (0.7f64.sin(), 0.7f64.cos());
    let rotated: Vec<Vec<f64>> = rows.iter().map(|r| vec![c * r[0] - s * r[1], s * r[0] + c * r[1]]).collect();
    let xr = DenseArray::from_rows(&rotated).unwrap();
    let a = elo_fitness(&x, 4, 1.0, 20, 0, Exec::default()).unwrap();
    let b = elo_fitness(&xr, 4, 1.0, 20, 0, Exec::default()).unwrap();
    let spread = |r: &FitnessReport| {
        let m = r.mean_kl;
        (r.per_trial_kl.iter().map(|v| (v - m).powi(2)).sum::<f64>() / r.per_trial_kl.len() as f64).sqrt()
    };
    let tol = spread(&a).max(spread(&b)).max(1e-9);
    assert!((a.fitness - b.fitness).abs() <= tol, "{} vs {} (tol {tol})", a.fitness, b.fitness);
}

#[test]
fn weak_fitness_separable_is_perfect() {
    let labels: Vec<usize> = (0..200).map(|i| (i / 2 + i / 7) % 4).collect();
    let rows: Vec<Vec<f64>> = labels
        .iter()
        .map(|&l| (0..4).map(|j| if j == l { 1.0 } else { 0.0 }).collect())
        .collect();
    let x = DenseArray::from_rows(&rows).unwrap();
    let ids: Vec<u64> = (0..200).collect();
    let acc = weak_fitness(&x, &labels, &ids, 4, 5, 0, Exec::Sequential).unwrap();
    assert_eq!(acc, 1.0);
}

#[test]
fn weak_fitness_on_noise_is_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 2000;
    let classes = 4;
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..8).map(|_| rng.random::<f64>()).collect()).collect();
    let x = DenseArray::from_rows(&rows).unwrap();
    let ids: Vec<u64> = (0..n as u64).map(|i| (i / 2) * 2 + (i / 4) % 2).collect();
    let acc = weak_fitness(&x, &labels, &ids, classes, 5, 0, Exec::default()).unwrap();
    assert!((acc - 0.25).abs() < 0.05, "{acc}");
}

#[test]
fn weak_fitness_abstaining_cluster_counts_as_wrong() {
    // fit half: two points at 0; eval half: one point at 0, one far away.
    // With k = 2 on identical fit points one centroid gets no members.
    let x = DenseArray::from_rows(&[vec![0.0], vec![0.0], vec![0.0], vec![100.0]]).unwrap();
    let ids = [0, 2, 1, 3];
    let labels = [1, 1, 1, 1];
    let acc = weak_fitness(&x, &labels, &ids, 2, 1, 0, Exec::Sequential).unwrap();
    assert!(acc <= 1.0);
    assert!(weak_fitness(&x, &labels[..3], &ids, 2, 1, 0, Exec::Sequential).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn kmeans_sse_never_increases(seed in 0u64..500, k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..60).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let x = DenseArray::from_rows(&rows).unwrap();
        let m = kmeans(&x, k, seed, 100).unwrap();
        for w in m.sse_history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn memberships_sum_to_one(seed in 0u64..500, k in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c: Vec<Vec<f64>> = (0..k).map(|_| (0..3).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
        let m = model(&c);
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-20.0..20.0)).collect();
        let p = soft_membership(&x, &m);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn cluster_mass_matches_scalar_loop(seed in 0u64..500, n in 1usize..30, k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| {
            let r: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
            let s: f64 = r.iter().sum();
            r.into_iter().map(|v| v / s).collect()
        }).collect();
        let m = cluster_mass(&DenseArray::from_rows(&rows).unwrap());
        for j in 0..k {
            let mut s = 0.0;
            for r in &rows {
                s += r[j];
            }
            prop_assert!((m[j] - s / n as f64).abs() <= 1e-12);
        }
        prop_assert!((m.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn kl_matches_scalar_loop_and_is_nonnegative(seed in 0u64..500, k in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |zero: bool| {
            let mut v: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-3).collect();
            if zero && k > 1 { v[0] = 0.0; }
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect::<Vec<f64>>()
        };
        let p = draw(true);
        let q = draw(false);
        let kl = kl_divergence(&p, &q).unwrap();
        prop_assert!(kl >= 0.0);
        prop_assert!((kl - kl_oracle(&p, &q).max(0.0)).abs() <= 1e-12);
        prop_assert!(kl_divergence(&q, &q).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn elo_is_nonpositive_and_row_order_free(seed in 0u64..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..40).map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let x = DenseArray::from_rows(&rows).unwrap();
        let r = elo_fitness(&x, 3, 1.0, 3, seed, Exec::Sequential).unwrap();
        prop_assert!(r.fitness <= 0.0);
        let mut shuffled = rows.clone();
        shuffled.shuffle(&mut rng);
        let rs = elo_fitness(&DenseArray::from_rows(&shuffled).unwrap(), 3, 1.0, 3, seed, Exec::Sequential).unwrap();
        prop_assert!((rs.fitness - r.fitness).abs() <= 1e-12);
    }

    #[test]
    fn weak_fitness_ignores_clip_order(seed in 0u64..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 60;
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let rows: Vec<Vec<f64>> = labels.iter().map(|&l| vec![l as f64 * 3.0 + rng.random::<f64>(), rng.random()]).collect();
        let ids: Vec<u64> = (0..n as u64).collect();
        let x = DenseArray::from_rows(&rows).unwrap();
        let a = weak_fitness(&x, &labels, &ids, 3, 2, seed, Exec::Sequential).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let px = DenseArray::from_rows(&perm.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>()).unwrap();
        let pl: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let pi: Vec<u64> = perm.iter().map(|&i| ids[i]).collect();
        let b = weak_fitness(&px, &pl, &pi, 3, 2, seed, Exec::Sequential).unwrap();
        prop_assert_eq!(a, b);
    }
}
