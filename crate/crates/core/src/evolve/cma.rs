//! Rank-μ CMA-ES with samples clamped into the unit box.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EIGEN_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CmaConfig {
    /// Samples per generation; `None` uses `4 + ⌊3 ln d⌋`.
    pub popsize: Option<usize>,
    pub sigma0: f64,
    pub mean0: f64,
}

impl Default for CmaConfig {
    fn default() -> Self {
        Self {
            popsize: None,
            sigma0: 0.3,
            mean0: 0.5,
        }
    }
}

pub fn default_popsize(d: usize) -> usize {
    4 + (3.0 * (d as f64).ln()).floor() as usize
}

#[derive(Clone, Debug)]
pub struct CmaState {
    pub dim: usize,
    pub lambda: usize,
    pub mu: usize,
    pub weights: Vec<f64>,
    pub mueff: f64,
    pub mean: DVector<f64>,
    pub sigma: f64,
    pub cov: DMatrix<f64>,
    pub pc: DVector<f64>,
    pub ps: DVector<f64>,
    pub generation: usize,
    cc: f64,
    cs: f64,
    c1: f64,
    cmu: f64,
    damps: f64,
    chi_n: f64,
    basis: DMatrix<f64>,
    scales: DVector<f64>,
}

impl CmaState {
    pub fn new(dim: usize, config: &CmaConfig) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("CMA-ES needs at least one dimension"));
        }
        let lambda = config.popsize.unwrap_or_else(|| default_popsize(dim));
        if lambda < 2 {
            return Err(Error::invalid("CMA-ES population must be at least 2"));
        }
        if !(config.sigma0 >= 0.0) {
            return Err(Error::invalid("CMA-ES step size must be non-negative"));
        }
        let mu = lambda / 2;
        let raw: Vec<f64> = (1..=mu).map(|i| (mu as f64 + 0.5).ln() - (i as f64).ln()).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mueff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        let n = dim as f64;
        let cc = (4.0 + mueff / n) / (n + 4.0 + 2.0 * mueff / n);
        let cs = (mueff + 2.0) / (n + mueff + 5.0);
        let c1 = 2.0 / ((n + 1.3).powi(2) + mueff);
        let cmu = (1.0 - c1).min(2.0 * (mueff - 2.0 + 1.0 / mueff) / ((n + 2.0).powi(2) + mueff));
        let damps = 1.0 + 2.0 * (((mueff - 1.0) / (n + 1.0)).sqrt() - 1.0).max(0.0) + cs;
        let chi_n = n.sqrt() * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));
        Ok(Self {
            dim,
            lambda,
            mu,
            weights,
            mueff,
            mean: DVector::from_element(dim, config.mean0.clamp(0.0, 1.0)),
            sigma: config.sigma0,
            cov: DMatrix::identity(dim, dim),
            pc: DVector::zeros(dim),
            ps: DVector::zeros(dim),
            generation: 0,
            cc,
            cs,
            c1,
            cmu,
            damps,
            chi_n,
            basis: DMatrix::identity(dim, dim),
            scales: DVector::from_element(dim, 1.0),
        })
    }

    pub fn mean(&self) -> Vec<f64> {
        self.mean.iter().copied().collect()
    }

    /// `λ` samples from `N(mean, σ²C)`, each coordinate clamped to `[0, 1]`.
    pub fn ask<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Vec<f64>> {
        (0..self.lambda)
            .map(|_| {
                let z = DVector::from_fn(self.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
                let y = &self.basis * z.component_mul(&self.scales);
                (0..self.dim)
                    .map(|i| (self.mean[i] + self.sigma * y[i]).clamp(0.0, 1.0))
                    .collect()
            })
            .collect()
    }

    /// Update from evaluated samples (higher fitness is better).
    pub fn tell(&mut self, samples: &[(Vec<f64>, f64)]) -> Result<()> {
        if samples.len() < self.mu {
            return Err(Error::invalid(format!(
                "CMA-ES update needs at least {} samples, got {}",
                self.mu,
                samples.len()
            )));
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.sort_by(|&a, &b| samples[b].1.total_cmp(&samples[a].1));
        let old = self.mean.clone();
        let sigma = if self.sigma > 0.0 { self.sigma } else { 1.0 };
        let ys: Vec<DVector<f64>> = order[..self.mu]
            .iter()
            .map(|&i| (DVector::from_column_slice(&samples[i].0) - &old) / sigma)
            .collect();
        let mut yw = DVector::zeros(self.dim);
        for (w, y) in self.weights.iter().zip(&ys) {
            yw += y * *w;
        }
        self.mean = (&old + &yw * self.sigma).map(|v| v.clamp(0.0, 1.0));

        // C^{-1/2} y_w through the cached eigenbasis
        let inv_sqrt = &self.basis
            * DMatrix::from_diagonal(&self.scales.map(|s| 1.0 / s))
            * self.basis.transpose();
        let cs = self.cs;
        self.ps = &self.ps * (1.0 - cs) + inv_sqrt * &yw * (cs * (2.0 - cs) * self.mueff).sqrt();
        let gen = (self.generation + 1) as f64;
        let ps_norm = self.ps.norm();
        let hsig = ps_norm / (1.0 - (1.0 - cs).powf(2.0 * gen)).sqrt() / self.chi_n
            < 1.4 + 2.0 / (self.dim as f64 + 1.0);
        let hs = if hsig { 1.0 } else { 0.0 };
        let cc = self.cc;
        self.pc = &self.pc * (1.0 - cc) + &yw * (hs * (cc * (2.0 - cc) * self.mueff).sqrt());
        let mut rank_mu = DMatrix::zeros(self.dim, self.dim);
        for (w, y) in self.weights.iter().zip(&ys) {
            rank_mu += y * y.transpose() * *w;
        }
        let rank_one = &self.pc * self.pc.transpose() + &self.cov * ((1.0 - hs) * cc * (2.0 - cc));
        self.cov = &self.cov * (1.0 - self.c1 - self.cmu) + rank_one * self.c1 + rank_mu * self.cmu;
        self.sigma *= ((cs / self.damps) * (ps_norm / self.chi_n - 1.0)).exp();
        if !self.sigma.is_finite() {
            return Err(Error::NonFinite("CMA-ES step size".into()));
        }
        self.generation += 1;
        self.refresh_eigen();
        Ok(())
    }

    fn refresh_eigen(&mut self) {
        // symmetrize against round-off before decomposing
        let sym = (&self.cov + self.cov.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let mut floored = false;
        let values = eig.eigenvalues.map(|v| {
            if v < EIGEN_FLOOR {
                floored = true;
                EIGEN_FLOOR
            } else {
                v
            }
        });
        if floored {
            log::warn!(
                "CMA-ES covariance lost positive definiteness at generation {}; eigenvalues floored at {EIGEN_FLOOR}",
                self.generation
            );
            self.cov = &eig.eigenvectors * DMatrix::from_diagonal(&values) * eig.eigenvectors.transpose();
        }
        self.scales = values.map(f64::sqrt);
        self.basis = eig.eigenvectors;
    }
}
