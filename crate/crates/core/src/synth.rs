//! Teacher datasets: the Mattis model and the correlated two-pattern Hopfield model.
//!
//! Samples are returned as ±1 spins, one per row.

use ndarray::{Array1, Array2};
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Phase, Result};

/// Nonnegative fixed point of `m = tanh(beta m)`.
pub fn solve_mattis_magnetization(beta: f64) -> f64 {
    if beta <= 1.0 {
        return 0.0;
    }
    let f = |m: f64| m - (beta * m).tanh();
    // f < 0 on (0, m*) and f > 0 on (m*, 1]
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    let mut m = 0.5 * (lo + hi);
    for _ in 0..5 {
        let t = (beta * m).tanh();
        let d = 1.0 - beta * (1.0 - t * t);
        if d.abs() < 1e-300 {
            break;
        }
        let next = m - (m - t) / d;
        if !(next > lo * 0.5 && next <= 1.0) {
            break;
        }
        m = next;
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MattisSpec {
    pub n_visible: usize,
    pub beta: f64,
    pub xi: Vec<i8>,
}

impl MattisSpec {
    pub fn new(beta: f64, xi: Vec<i8>) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(invalid(format!("beta must be positive, got {beta}")));
        }
        if xi.is_empty() || xi.iter().any(|&x| x != 1 && x != -1) {
            return Err(invalid("pattern entries must be +1 or -1"));
        }
        Ok(MattisSpec { n_visible: xi.len(), beta, xi })
    }

    /// Ferromagnetic pattern: the Curie-Weiss model.
    pub fn curie_weiss(n_visible: usize, beta: f64) -> Result<Self> {
        Self::new(beta, vec![1; n_visible])
    }

    pub fn random<R: Rng + ?Sized>(n_visible: usize, beta: f64, rng: &mut R) -> Result<Self> {
        Self::new(beta, (0..n_visible).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect())
    }

    pub fn magnetization(&self) -> f64 {
        solve_mattis_magnetization(self.beta)
    }

    pub fn xi_f64(&self) -> Array1<f64> {
        self.xi.iter().map(|&x| x as f64).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SampleMode {
    /// Factorized sampling around the mean-field lumps.
    MeanField,
    /// Single-spin Metropolis; sweeps between recorded samples and burn-in sweeps.
    Mcmc { sweeps_per_sample: usize, burn_in: usize },
}

impl SampleMode {
    pub fn mcmc_default() -> Self {
        SampleMode::Mcmc { sweeps_per_sample: 10, burn_in: 100 }
    }
}

fn spin<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> f64 {
    if rng.random::<f64>() < 0.5 * (1.0 + mean) {
        1.0
    } else {
        -1.0
    }
}

/// Metropolis sampler for `-(beta / 2N) sum_mu (p_mu . v)^2` with exact symmetry moves.
struct QuadraticMetropolis {
    beta_over_n: f64,
    patterns: Vec<Vec<f64>>,
    /// Site sets whose joint flip leaves the energy invariant.
    symmetries: Vec<Vec<usize>>,
}

impl QuadraticMetropolis {
    fn overlaps(&self, v: &[f64]) -> Vec<f64> {
        self.patterns.iter().map(|p| p.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
    }

    fn sweep<R: Rng + ?Sized>(&self, v: &mut [f64], o: &mut [f64], rng: &mut R) {
        let n = v.len();
        for _ in 0..n {
            let i = rng.random_range(0..n);
            let mut delta = 0.0;
            for (p, om) in self.patterns.iter().zip(o.iter()) {
                let new = om - 2.0 * v[i] * p[i];
                delta += new * new - om * om;
            }
            // energy change is -(beta/2N) delta
            let de = -0.5 * self.beta_over_n * delta;
            if de <= 0.0 || rng.random::<f64>() < (-de).exp() {
                for (p, om) in self.patterns.iter().zip(o.iter_mut()) {
                    *om -= 2.0 * v[i] * p[i];
                }
                v[i] = -v[i];
            }
        }
    }

    fn symmetry_moves<R: Rng + ?Sized>(&self, v: &mut [f64], o: &mut Vec<f64>, rng: &mut R) {
        for set in &self.symmetries {
            if rng.random::<bool>() {
                for &i in set {
                    v[i] = -v[i];
                }
            }
        }
        *o = self.overlaps(v);
    }

    fn run<R: Rng + ?Sized>(
        &self,
        n: usize,
        n_samples: usize,
        sweeps: usize,
        burn_in: usize,
        rng: &mut R,
    ) -> Array2<f64> {
        let mut v: Vec<f64> = (0..n).map(|_| spin(0.0, rng)).collect();
        let mut o = self.overlaps(&v);
        for _ in 0..burn_in {
            self.sweep(&mut v, &mut o, rng);
        }
        let mut out = Array2::zeros((n_samples, n));
        for s in 0..n_samples {
            for _ in 0..sweeps {
                self.sweep(&mut v, &mut o, rng);
            }
            out.row_mut(s).assign(&Array1::from(v.clone()));
            self.symmetry_moves(&mut v, &mut o, rng);
        }
        out
    }
}

pub fn sample_mattis<R: Rng + ?Sized>(
    spec: &MattisSpec,
    n_samples: usize,
    mode: SampleMode,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let n = spec.n_visible;
    match mode {
        SampleMode::MeanField => {
            if spec.beta <= 1.0 {
                return Err(invalid(format!(
                    "mean-field sampling needs beta > 1 (got {}); use MCMC for a single lump",
                    spec.beta
                )));
            }
            let m = spec.magnetization();
            let mut out = Array2::zeros((n_samples, n));
            for mut row in out.rows_mut() {
                let sigma = if rng.random::<bool>() { 1.0 } else { -1.0 };
                for (x, &xi) in row.iter_mut().zip(&spec.xi) {
                    *x = spin(sigma * xi as f64 * m, rng);
                }
            }
            Ok(out)
        }
        SampleMode::Mcmc { sweeps_per_sample, burn_in } => {
            let sampler = QuadraticMetropolis {
                beta_over_n: spec.beta / n as f64,
                patterns: vec![spec.xi.iter().map(|&x| x as f64).collect()],
                symmetries: vec![(0..n).collect()],
            };
            Ok(sampler.run(n, n_samples, sweeps_per_sample.max(1), burn_in, rng))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairPatternSpec {
    pub n_visible: usize,
    pub beta: f64,
    pub kappa: f64,
    pub eta1: Vec<i8>,
    pub eta2: Vec<i8>,
    pub xi1: Vec<i8>,
    pub xi2: Vec<i8>,
}

impl PairPatternSpec {
    fn from_signs(n_visible: usize, beta: f64, kappa: f64, signs: &[i8]) -> Result<Self> {
        if !(kappa > 0.0 && kappa < 1.0) {
            return Err(invalid(format!("kappa must lie in (0, 1), got {kappa}")));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(invalid(format!("beta must be positive, got {beta}")));
        }
        let n1 = Self::support_size(n_visible, kappa);
        if n1 == 0 || n1 >= n_visible {
            return Err(invalid(format!("N_v = {n_visible} too small for kappa = {kappa}")));
        }
        let eta1: Vec<i8> = (0..n_visible).map(|i| if i < n1 { signs[i] } else { 0 }).collect();
        let eta2: Vec<i8> = (0..n_visible).map(|i| if i >= n1 { signs[i] } else { 0 }).collect();
        let xi1 = eta1.iter().zip(&eta2).map(|(a, b)| a + b).collect();
        let xi2 = eta1.iter().zip(&eta2).map(|(a, b)| a - b).collect();
        Ok(PairPatternSpec { n_visible, beta, kappa, eta1, eta2, xi1, xi2 })
    }

    /// Size of the support of eta1, `N_v (1 + kappa) / 2` rounded to nearest.
    pub fn support_size(n_visible: usize, kappa: f64) -> usize {
        (n_visible as f64 * (1.0 + kappa) / 2.0).round() as usize
    }

    pub fn n_eta1(&self) -> usize {
        self.eta1.iter().filter(|&&x| x != 0).count()
    }

    pub fn n_eta2(&self) -> usize {
        self.eta2.iter().filter(|&&x| x != 0).count()
    }

    pub fn vec(p: &[i8]) -> Array1<f64> {
        p.iter().map(|&x| x as f64).collect()
    }

    /// Unit vectors along eta1 and eta2.
    pub fn eta_hat(&self) -> (Array1<f64>, Array1<f64>) {
        let a = Self::vec(&self.eta1);
        let b = Self::vec(&self.eta2);
        let na = a.dot(&a).sqrt();
        let nb = b.dot(&b).sqrt();
        (a / na, b / nb)
    }
}

/// Random-sign correlated patterns.
pub fn build_correlated_patterns<R: Rng + ?Sized>(
    n_visible: usize,
    beta: f64,
    kappa: f64,
    rng: &mut R,
) -> Result<PairPatternSpec> {
    let signs: Vec<i8> = (0..n_visible).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
    PairPatternSpec::from_signs(n_visible, beta, kappa, &signs)
}

/// Correlated patterns with all nonzero entries +1.
pub fn aligned_correlated_patterns(n_visible: usize, beta: f64, kappa: f64) -> Result<PairPatternSpec> {
    PairPatternSpec::from_signs(n_visible, beta, kappa, &vec![1; n_visible])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MagnetizationSolution {
    pub m_plus: f64,
    pub m_minus: f64,
    pub r: f64,
    pub p: f64,
}

/// Four-lump solution of the pair-pattern saddle point. The equations decouple in
/// `S = m1 + m2` and `D = m1 - m2`, each a rescaled Curie-Weiss equation.
pub fn solve_pair_magnetizations(beta: f64, kappa: f64) -> Result<MagnetizationSolution> {
    if !(kappa > 0.0 && kappa < 1.0) || !(beta > 0.0) {
        return Err(invalid(format!("need beta > 0 and kappa in (0,1), got beta={beta}, kappa={kappa}")));
    }
    let t = 1.0 / beta;
    if t >= 1.0 + kappa {
        return Err(Error::Phase(Phase::Paramagnetic));
    }
    if t >= 1.0 - kappa {
        return Err(Error::Phase(Phase::PairRetrieval));
    }
    let r = solve_mattis_magnetization(beta * (1.0 + kappa));
    let p = solve_mattis_magnetization(beta * (1.0 - kappa));
    let s = (1.0 + kappa) * r;
    let d = (1.0 - kappa) * p;
    Ok(MagnetizationSolution { m_plus: 0.5 * (s + d), m_minus: 0.5 * (s - d), r, p })
}

impl MagnetizationSolution {
    /// Residuals of both saddle-point equations at this solution.
    pub fn residuals(&self, beta: f64, kappa: f64) -> (f64, f64) {
        let (m1, m2) = (self.m_plus, self.m_minus);
        let a = 0.5 * (1.0 + kappa) * (beta * (m1 + m2)).tanh();
        let b = 0.5 * (1.0 - kappa) * (beta * (m1 - m2)).tanh();
        (m1 - a - b, m2 - a + b)
    }
}

pub fn sample_hopfield_pair<R: Rng + ?Sized>(
    spec: &PairPatternSpec,
    n_samples: usize,
    mode: SampleMode,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let n = spec.n_visible;
    let x1 = PairPatternSpec::vec(&spec.xi1);
    let x2 = PairPatternSpec::vec(&spec.xi2);
    match mode {
        SampleMode::MeanField => {
            let sol = solve_pair_magnetizations(spec.beta, spec.kappa)?;
            let lumps = [
                (sol.m_plus, sol.m_minus),
                (sol.m_minus, sol.m_plus),
                (-sol.m_plus, -sol.m_minus),
                (-sol.m_minus, -sol.m_plus),
            ];
            let means: Vec<Vec<f64>> = lumps
                .iter()
                .map(|&(m1, m2)| (0..n).map(|i| (spec.beta * (m1 * x1[i] + m2 * x2[i])).tanh()).collect())
                .collect();
            let mut out = Array2::zeros((n_samples, n));
            for mut row in out.rows_mut() {
                let lump = means.choose(rng).expect("four lumps");
                for (x, &mu) in row.iter_mut().zip(lump) {
                    *x = spin(mu, rng);
                }
            }
            Ok(out)
        }
        SampleMode::Mcmc { sweeps_per_sample, burn_in } => {
            let sampler = QuadraticMetropolis {
                beta_over_n: spec.beta / n as f64,
                patterns: vec![x1.to_vec(), x2.to_vec()],
                symmetries: vec![(0..n).collect(), (0..n).filter(|&i| spec.eta2[i] != 0).collect()],
            };
            Ok(sampler.run(n, n_samples, sweeps_per_sample.max(1), burn_in, rng))
        }
    }
}

/// Closed-form data correlation `r^2 eta1 eta1^T + p^2 eta2 eta2^T` (off-diagonal part).
pub fn pair_data_correlation(spec: &PairPatternSpec, sol: &MagnetizationSolution) -> Array2<f64> {
    let e1 = PairPatternSpec::vec(&spec.eta1);
    let e2 = PairPatternSpec::vec(&spec.eta2);
    let n = spec.n_visible;
    Array2::from_shape_fn((n, n), |(i, j)| sol.r * sol.r * e1[i] * e1[j] + sol.p * sol.p * e2[i] * e2[j])
}
