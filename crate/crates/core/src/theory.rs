//! Mean-field learning dynamics of small RBMs trained on Mattis and pair-pattern
//! data, and the fixed-point equations they depend on.
//!
//! Time is measured as `t = epsilon * n` where `n` counts gradient updates, so the
//! ODEs below are written without the learning rate.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Phase, Result};
use crate::synth::{MagnetizationSolution, MattisSpec, PairPatternSpec};

const NEWTON_MAX: usize = 200;

/// Small random initial weights, uniform in `(-scale, scale) / sqrt(N_v)`, one
/// column per hidden unit.
pub fn initial_theory_weights(n_visible: usize, n_hidden: usize, scale: f64, seed: u64) -> Array2<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let s = scale / (n_visible as f64).sqrt();
    Array2::from_shape_fn((n_visible, n_hidden), |_| rng.random_range(-s..s))
}

/// Largest nonnegative root of `h = (1/N) sum_k w_k tanh(h w_k)`.
pub fn solve_hstar(w: ArrayView1<f64>) -> Result<f64> {
    solve_hstar_from(w, None)
}

/// As [`solve_hstar`], optionally starting Newton from a previous value.
///
/// `g(h) = h - (1/N) sum w tanh(h w)` is convex on `h >= 0` with `g(0) = 0`, so a
/// positive root exists iff `g'(0) < 0` and Newton started where `g > 0` decreases
/// monotonically onto it.
pub fn solve_hstar_from(w: ArrayView1<f64>, warm: Option<f64>) -> Result<f64> {
    let n = w.len() as f64;
    if n == 0.0 {
        return Ok(0.0);
    }
    let q: f64 = w.iter().map(|x| x * x).sum::<f64>() / n;
    if q <= 1.0 {
        return Ok(0.0);
    }
    let g = |h: f64| {
        let (mut s, mut ds) = (0.0, 0.0);
        for &x in w.iter() {
            let t = (h * x).tanh();
            s += x * t;
            ds += x * x * (1.0 - t * t);
        }
        (h - s / n, 1.0 - ds / n)
    };
    let upper = w.iter().map(|x| x.abs()).sum::<f64>() / n;
    let mut h = match warm {
        Some(h0) if h0 > 0.0 && g(h0).0 > 0.0 => h0,
        _ => upper.max(f64::MIN_POSITIVE),
    };
    for _ in 0..NEWTON_MAX {
        let (val, der) = g(h);
        if val <= 0.0 || der <= 0.0 {
            return Ok(h);
        }
        let next = h - val / der;
        if !(next < h) || (h - next) <= 1e-15 * h {
            return Ok(next.max(0.0));
        }
        h = next;
    }
    Err(Error::Numerical(format!("h* iteration did not converge (q = {q})")))
}

/// Susceptibility of a single-hidden-unit Gaussian RBM along `xi`:
/// `(xi . w)^2 / (N (1 - |w|^2 / N))`.
pub fn bg_susceptibility(w: ArrayView1<f64>, xi: ArrayView1<f64>) -> Result<f64> {
    if w.len() != xi.len() {
        return Err(crate::error::dim(format!("weights {} vs pattern {}", w.len(), xi.len())));
    }
    let n = w.len() as f64;
    let q = w.dot(&w) / n;
    if q >= 1.0 {
        return Err(Error::Phase(Phase::Condensed));
    }
    let u = w.dot(&xi);
    Ok(u * u / (n * (1.0 - q)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BgTheoryState {
    pub weights: Array1<f64>,
    pub time: f64,
    pub learning_rate: f64,
}

impl BgTheoryState {
    /// Number of gradient updates corresponding to `time`.
    pub fn updates(&self) -> f64 {
        self.time / self.learning_rate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BgPoint {
    pub time: f64,
    /// `xi . w / sqrt(N)`
    pub u_xi: f64,
    pub hstar: f64,
    /// `|w| / sqrt(N)`
    pub norm_w: f64,
}

#[derive(Debug, Clone)]
pub struct BgTrajectory {
    pub points: Vec<BgPoint>,
    pub last: BgTheoryState,
}

fn check_step(t_max: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0 && t_max >= 0.0 && dt.is_finite() && t_max.is_finite()) {
        return Err(invalid(format!("need dt > 0 and t_max >= 0, got dt={dt}, t_max={t_max}")));
    }
    Ok((t_max / dt).round() as usize)
}

fn rk4_step<F>(w: &Array1<f64>, dt: f64, f: &mut F) -> Result<Array1<f64>>
where
    F: FnMut(&Array1<f64>) -> Result<Array1<f64>>,
{
    let k1 = f(w)?;
    let k2 = f(&(w + &(&k1 * (dt / 2.0))))?;
    let k3 = f(&(w + &(&k2 * (dt / 2.0))))?;
    let k4 = f(&(w + &(&k3 * dt)))?;
    Ok(w + &((k1 + &k2 * 2.0 + &k3 * 2.0 + k4) * (dt / 6.0)))
}

/// Integrates `dw_i/dt = xi_i (xi . w) m^2 / N - h* tanh(h* w_i)` with RK4.
pub fn integrate_bg_dynamics(
    spec: &MattisSpec,
    w0: ArrayView1<f64>,
    epsilon: f64,
    t_max: f64,
    dt: f64,
) -> Result<BgTrajectory> {
    if w0.len() != spec.n_visible {
        return Err(crate::error::dim(format!("w0 has {} entries, N_v = {}", w0.len(), spec.n_visible)));
    }
    if spec.beta <= 1.0 {
        return Err(invalid("the Mattis data must be in the ferromagnetic phase (beta > 1)"));
    }
    let steps = check_step(t_max, dt)?;
    let n = spec.n_visible as f64;
    let xi = spec.xi_f64();
    let m2 = spec.magnetization().powi(2);
    let mut hstar = 0.0;
    let mut rhs = |w: &Array1<f64>| -> Result<Array1<f64>> {
        hstar = solve_hstar_from(w.view(), Some(hstar))?;
        let drive = xi.dot(w) * m2 / n;
        Ok(Array1::from_shape_fn(w.len(), |i| xi[i] * drive - hstar * (hstar * w[i]).tanh()))
    };
    let mut w = w0.to_owned();
    let record = |w: &Array1<f64>, t: f64| -> Result<BgPoint> {
        Ok(BgPoint {
            time: t,
            u_xi: xi.dot(w) / n.sqrt(),
            hstar: solve_hstar(w.view())?,
            norm_w: (w.dot(w) / n).sqrt(),
        })
    };
    let mut points = vec![record(&w, 0.0)?];
    for step in 0..steps {
        w = rk4_step(&w, dt, &mut rhs).map_err(|e| Error::Numerical(format!("step {step}: {e}")))?;
        points.push(record(&w, (step + 1) as f64 * dt)?);
    }
    let time = steps as f64 * dt;
    Ok(BgTrajectory { points, last: BgTheoryState { weights: w, time, learning_rate: epsilon } })
}

/// Largest root in `[0, 1]` of `tau = tanh((1/N_h) sum_j w_j tanh(w_j tau))`.
pub fn solve_tau(w: ArrayView1<f64>, n_hidden: f64) -> Result<f64> {
    let q: f64 = w.iter().map(|x| x * x).sum::<f64>() / n_hidden;
    let f = |tau: f64| {
        let (mut s, mut ds) = (0.0, 0.0);
        for &x in w.iter() {
            let t = (x * tau).tanh();
            s += x * t;
            ds += x * x * (1.0 - t * t);
        }
        let th = (s / n_hidden).tanh();
        (tau - th, 1.0 - (1.0 - th * th) * ds / n_hidden)
    };
    let mut tau = 1.0;
    for _ in 0..NEWTON_MAX {
        let (val, der) = f(tau);
        if val <= 0.0 {
            return Ok(tau);
        }
        if der <= 0.0 {
            break;
        }
        let next = tau - val / der;
        if next <= 0.0 {
            return Ok(0.0);
        }
        if tau - next <= 1e-15 * tau {
            return Ok(next);
        }
        tau = next;
    }
    // Fall back on bisection for the outermost sign change.
    if q <= 1.0 {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    let grid = 1000;
    for k in (1..grid).rev() {
        let x = k as f64 / grid as f64;
        if f(x).0 < 0.0 {
            lo = x;
            hi = (k + 1) as f64 / grid as f64;
            break;
        }
    }
    if lo == 0.0 {
        return Err(Error::Numerical(format!("tau equation has no bracketed root (q = {q})")));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid).0 < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BbPoint {
    pub time: f64,
    pub u_xi: f64,
    pub tau: f64,
    pub norm_w: f64,
}

/// Shared-weight binary RBM with `N_h = alpha N_v` hidden units:
/// `dw_i/dt = xi_i m tanh(m xi . w / N_h) - tau tanh(w_i tau)`.
pub fn integrate_bb_shared_dynamics(
    spec: &MattisSpec,
    alpha: f64,
    w0: ArrayView1<f64>,
    t_max: f64,
    dt: f64,
) -> Result<(Vec<BbPoint>, Array1<f64>)> {
    if w0.len() != spec.n_visible {
        return Err(crate::error::dim(format!("w0 has {} entries, N_v = {}", w0.len(), spec.n_visible)));
    }
    if !(alpha > 0.0) || spec.beta <= 1.0 {
        return Err(invalid("need alpha > 0 and beta > 1"));
    }
    let steps = check_step(t_max, dt)?;
    let n = spec.n_visible as f64;
    let nh = alpha * n;
    let xi = spec.xi_f64();
    let m = spec.magnetization();
    let mut rhs = |w: &Array1<f64>| -> Result<Array1<f64>> {
        let tau = solve_tau(w.view(), nh)?;
        let pos = m * (m * xi.dot(w) / nh).tanh();
        Ok(Array1::from_shape_fn(w.len(), |i| xi[i] * pos - tau * (w[i] * tau).tanh()))
    };
    let record = |w: &Array1<f64>, t: f64| -> Result<BbPoint> {
        Ok(BbPoint {
            time: t,
            u_xi: xi.dot(w) / n.sqrt(),
            tau: solve_tau(w.view(), nh)?,
            norm_w: (w.dot(w) / n).sqrt(),
        })
    };
    let mut w = w0.to_owned();
    let mut points = vec![record(&w, 0.0)?];
    for step in 0..steps {
        w = rk4_step(&w, dt, &mut rhs).map_err(|e| Error::Numerical(format!("step {step}: {e}")))?;
        points.push(record(&w, (step + 1) as f64 * dt)?);
    }
    Ok((points, w))
}

/// Stationary aligned weight `w_i = w xi_i` of the shared-weight dynamics:
/// the first positive `w` where `m tanh(m w / alpha) = tau tanh(w tau)` with
/// `tau = tanh(w tanh(w tau) / alpha)`. Returns `(w, tau)`.
pub fn bb_stationary_weight(m: f64, alpha: f64) -> Result<(f64, f64)> {
    let tau_of = |w: f64| solve_tau(Array1::from_elem(1, w).view(), alpha);
    let d = |w: f64| -> Result<f64> {
        let tau = tau_of(w)?;
        Ok(m * (m * w / alpha).tanh() - tau * (w * tau).tanh())
    };
    let step = 0.01 * alpha.sqrt();
    let mut lo = step;
    let mut dlo = d(lo)?;
    if dlo <= 0.0 {
        return Err(Error::Numerical("shared-weight gradient is not positive at small w".into()));
    }
    let mut hi = lo;
    for _ in 0..100_000 {
        hi = lo + step;
        let dhi = d(hi)?;
        if dhi <= 0.0 {
            break;
        }
        lo = hi;
        dlo = dhi;
    }
    if dlo <= 0.0 || d(hi)? > 0.0 {
        return Err(Error::Numerical("no stationary weight found".into()));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if d(mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let w = 0.5 * (lo + hi);
    Ok((w, tau_of(w)?))
}

/// Projections of the hidden units' weight vectors on the unit vectors along
/// `eta1` (`z`) and `eta2` (`z_tilde`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairProjections {
    pub z: [f64; 2],
    pub z_tilde: [f64; 2],
}

impl PairProjections {
    pub fn of_weights(pair: &PairPatternSpec, w: ArrayView2<f64>) -> Result<Self> {
        if w.dim() != (pair.n_visible, 2) {
            return Err(crate::error::dim(format!("expected {}x2 weights, got {:?}", pair.n_visible, w.dim())));
        }
        let (e1, e2) = pair.eta_hat();
        let c = |a: usize, e: &Array1<f64>| w.column(a).dot(e);
        Ok(PairProjections { z: [c(0, &e1), c(1, &e1)], z_tilde: [c(0, &e2), c(1, &e2)] })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTrajectory {
    pub times: Vec<f64>,
    /// `eta1_hat . w^a(t)` for a = 1, 2.
    pub u_eta1: Vec<[f64; 2]>,
    /// `eta2_hat . w^a(t)` for a = 1, 2.
    pub u_eta2: Vec<[f64; 2]>,
    pub rate1: f64,
    pub rate2: f64,
    pub t_i: f64,
    pub t_ii: f64,
}

/// Growth rates of the linear regime, `r^2 n1 / N` and `p^2 n2 / N`, with the
/// realized support sizes.
pub fn pair_rates(pair: &PairPatternSpec, sol: &MagnetizationSolution) -> (f64, f64) {
    let n = pair.n_visible as f64;
    (sol.r * sol.r * pair.n_eta1() as f64 / n, sol.p * sol.p * pair.n_eta2() as f64 / n)
}

fn crossing_time(n: f64, sq: f64, rate: f64) -> f64 {
    if sq <= 0.0 {
        f64::INFINITY
    } else {
        (n / sq).ln() / (2.0 * rate)
    }
}

/// Closed-form linear-regime trajectory. The transition times are where the
/// corresponding singular value of `W / sqrt(N)` reaches 1:
/// `exp(2 rate t) sum_a z_a^2 / N = 1`.
pub fn predict_pair_trajectory(
    pair: &PairPatternSpec,
    sol: &MagnetizationSolution,
    init: &PairProjections,
    t_max: f64,
    n_points: usize,
) -> PairTrajectory {
    let n = pair.n_visible as f64;
    let (rate1, rate2) = pair_rates(pair, sol);
    let times: Vec<f64> = (0..n_points.max(1))
        .map(|k| if n_points > 1 { t_max * k as f64 / (n_points - 1) as f64 } else { 0.0 })
        .collect();
    let u_eta1 = times.iter().map(|&t| init.z.map(|z| z * (rate1 * t).exp())).collect();
    let u_eta2 = times.iter().map(|&t| init.z_tilde.map(|z| z * (rate2 * t).exp())).collect();
    let sq = |z: [f64; 2]| z[0] * z[0] + z[1] * z[1];
    PairTrajectory {
        times,
        u_eta1,
        u_eta2,
        rate1,
        rate2,
        t_i: crossing_time(n, sq(init.z), rate1),
        t_ii: crossing_time(n, sq(init.z_tilde), rate2),
    }
}

/// Saddle-point description of a Gaussian-hidden RBM with `sigma^2 = 1/N`:
/// `F(h) = N |h|^2 / 2 - sum_i log 2cosh(h . w_i)` over `h` in `R^{N_h}`.
pub fn mean_field_free_energy(w: ArrayView2<f64>, h: ArrayView1<f64>) -> f64 {
    let n = w.nrows() as f64;
    let fields = w.dot(&h);
    n * h.dot(&h) / 2.0 - fields.iter().map(|&x| log_2cosh(x)).sum::<f64>()
}

fn log_2cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p()
}

fn grad_hess(w: ArrayView2<f64>, h: &Array1<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = w.nrows() as f64;
    let k = w.ncols();
    let t = w.dot(h).mapv(f64::tanh);
    let g = h * n - w.t().dot(&t);
    let sech2 = t.mapv(|x| 1.0 - x * x);
    let ws = &w * &sech2.insert_axis(Axis(1));
    let hess = Array2::eye(k) * n - w.t().dot(&ws);
    (g, hess)
}

fn sym_eigen(a: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let k = a.nrows();
    let m = nalgebra::DMatrix::from_fn(k, k, |i, j| a[[i, j]]);
    let e = m.symmetric_eigen();
    let vals = e.eigenvalues.iter().copied().collect();
    let vecs = Array2::from_shape_fn((k, k), |(i, j)| e.eigenvectors[(i, j)]);
    (vals, vecs)
}

/// Damped Newton minimization of `F` from `h0`; `None` if it stalls or ends on a
/// non-minimum. `push` picks the side when leaving a saddle exactly.
fn minimize_from(w: ArrayView2<f64>, h0: Array1<f64>, push: f64) -> Option<Array1<f64>> {
    let n = w.nrows() as f64;
    let mut h = h0;
    let mut f = mean_field_free_energy(w, h.view());
    let sup = |x: &Array1<f64>| x.iter().map(|v| v.abs()).fold(0.0, f64::max);
    for _ in 0..500 {
        let (g, hess) = grad_hess(w, &h);
        let (vals, vecs) = sym_eigen(&hess);
        let convex = vals.iter().all(|&v| v > 0.0);
        if sup(&g) < 1e-11 * n {
            return convex.then_some(h);
        }
        // Saddle-free Newton: curvature magnitudes, plus a push along negative
        // directions so a start sitting on a saddle still leaves it.
        let gp = vecs.t().dot(&g);
        let step_e: Array1<f64> = gp
            .iter()
            .zip(&vals)
            .map(|(&gi, &l)| {
                let d = -gi / l.abs().max(1e-8 * n);
                if l < 0.0 && d.abs() < 1e-2 {
                    if gi == 0.0 {
                        push * 1e-2
                    } else {
                        -gi.signum() * 1e-2
                    }
                } else {
                    d
                }
            })
            .collect();
        let dir = vecs.dot(&step_e);
        // Close to a minimum F is flat to rounding, so take plain Newton steps.
        if convex && sup(&dir) < 1e-4 * (1.0 + sup(&h)) {
            h = &h + &dir;
            if sup(&dir) < 1e-13 * (1.0 + sup(&h)) {
                return Some(h);
            }
            f = mean_field_free_energy(w, h.view());
            continue;
        }
        let mut a = 1.0;
        loop {
            let cand = &h + &(&dir * a);
            let fc = mean_field_free_energy(w, cand.view());
            if fc <= f + 1e-4 * a * g.dot(&dir).min(0.0) {
                h = cand;
                f = fc;
                break;
            }
            a *= 0.5;
            if a < 1e-12 {
                return None;
            }
        }
    }
    None
}

/// Global minima of `F`, found by multi-start damped Newton. With
/// `lambda_max(W^T W / N) <= 1` the origin is the unique minimizer.
pub fn free_energy_minima(w: ArrayView2<f64>, warm: &[Array1<f64>]) -> Vec<Array1<f64>> {
    let n = w.nrows() as f64;
    let k = w.ncols();
    let gram = w.t().dot(&w) / n;
    let (vals, vecs) = sym_eigen(&gram);
    let lmax = vals.iter().copied().fold(0.0, f64::max);
    if lmax <= 1.0 {
        return vec![Array1::zeros(k)];
    }
    let scale = lmax.sqrt();
    let mut starts: Vec<Array1<f64>> = warm.to_vec();
    for (j, &l) in vals.iter().enumerate() {
        if l > 1.0 {
            let v = vecs.column(j).to_owned();
            starts.push(&v * l.sqrt());
            starts.push(&v * -l.sqrt());
        }
    }
    if k == 2 && warm.is_empty() {
        for a in 0..16 {
            let th = std::f64::consts::PI * a as f64 / 8.0 + 0.1;
            starts.push(Array1::from(vec![scale * th.cos(), scale * th.sin()]));
        }
    }
    let mut found: Vec<(f64, Array1<f64>)> = Vec::new();
    for (s, push) in starts.into_iter().flat_map(|s| [(s.clone(), 1.0), (s, -1.0)]) {
        if let Some(h) = minimize_from(w, s, push) {
            let f = mean_field_free_energy(w, h.view());
            let close = found.iter().any(|(_, x)| (x - &h).mapv(f64::abs).sum() < 1e-6 * (1.0 + scale));
            if !close {
                found.push((f, h));
            }
        }
    }
    let fmin = found.iter().map(|(f, _)| *f).fold(f64::INFINITY, f64::min);
    let tol = 1e-9 * fmin.abs().max(1.0);
    found.into_iter().filter(|(f, _)| *f <= fmin + tol).map(|(_, h)| h).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairOdePoint {
    pub time: f64,
    pub u_eta1: [f64; 2],
    pub u_eta2: [f64; 2],
    /// Singular values of `W / sqrt(N)`, descending.
    pub singular: [f64; 2],
    pub n_minima: usize,
}

/// Singular values of an `N x 2` matrix divided by `sqrt(N)`, descending.
pub fn scaled_singular_values(w: ArrayView2<f64>) -> Vec<f64> {
    let n = w.nrows() as f64;
    let (mut vals, _) = sym_eigen(&(w.t().dot(&w) / n));
    vals.sort_by(|a, b| b.total_cmp(a));
    vals.into_iter().map(|v| v.max(0.0).sqrt()).collect()
}

/// Integrates `dW/dt = (C_D - C_RBM) W / N` for the two-hidden-unit Gaussian
/// RBM, with `C_D = r^2 eta1 eta1^T + p^2 eta2 eta2^T` and `C_RBM` the average of
/// `mu mu^T` over the global minima of the saddle-point free energy, where
/// `mu_i = tanh(h . w_i)`. Both correlations are lump averages of magnetization
/// outer products, so the stationary point is `W = sqrt(beta) [xi1 xi2]` up to a
/// rotation. Returns the recorded points and the final weights.
pub fn integrate_pair_dynamics_full(
    pair: &PairPatternSpec,
    sol: &MagnetizationSolution,
    w0: ArrayView2<f64>,
    t_max: f64,
    dt: f64,
    record_every: usize,
) -> Result<(Vec<PairOdePoint>, Array2<f64>)> {
    if w0.dim() != (pair.n_visible, 2) {
        return Err(crate::error::dim(format!("expected {}x2 weights, got {:?}", pair.n_visible, w0.dim())));
    }
    let steps = check_step(t_max, dt)?;
    let n = pair.n_visible as f64;
    let e1 = PairPatternSpec::vec(&pair.eta1);
    let e2 = PairPatternSpec::vec(&pair.eta2);
    let (r2, p2) = (sol.r * sol.r, sol.p * sol.p);
    let mut warm: Vec<Array1<f64>> = Vec::new();
    let mut rhs = |w: &Array2<f64>| -> Result<(Array2<f64>, usize)> {
        let minima = free_energy_minima(w.view(), &warm);
        if minima.is_empty() {
            return Err(Error::Numerical("saddle point search found no minimum".into()));
        }
        let mut out = Array2::zeros(w.dim());
        for a in 0..2 {
            let col = w.column(a);
            let c1 = r2 * e1.dot(&col);
            let c2 = p2 * e2.dot(&col);
            let mut o = out.column_mut(a);
            o.scaled_add(c1 / n, &e1);
            o.scaled_add(c2 / n, &e2);
        }
        let km = minima.len() as f64;
        for h in &minima {
            if h.iter().all(|&x| x == 0.0) {
                continue;
            }
            let mu = w.dot(h).mapv(f64::tanh);
            let proj = w.t().dot(&mu);
            for a in 0..2 {
                out.column_mut(a).scaled_add(-proj[a] / (n * km), &mu);
            }
        }
        let count = minima.len();
        warm = minima;
        Ok((out, count))
    };
    let (h1, h2) = pair.eta_hat();
    let record = |w: &Array2<f64>, t: f64, n_minima: usize| {
        let sv = scaled_singular_values(w.view());
        PairOdePoint {
            time: t,
            u_eta1: [w.column(0).dot(&h1), w.column(1).dot(&h1)],
            u_eta2: [w.column(0).dot(&h2), w.column(1).dot(&h2)],
            singular: [sv[0], sv[1]],
            n_minima,
        }
    };
    let every = record_every.max(1);
    let mut w = w0.to_owned();
    let mut points = vec![record(&w, 0.0, 1)];
    for step in 0..steps {
        let wrap = |e: Error| Error::Numerical(format!("step {step}: {e}"));
        let (k1, count) = rhs(&w).map_err(wrap)?;
        let (k2, _) = rhs(&(&w + &(&k1 * (dt / 2.0)))).map_err(wrap)?;
        let (k3, _) = rhs(&(&w + &(&k2 * (dt / 2.0)))).map_err(wrap)?;
        let (k4, _) = rhs(&(&w + &(&k3 * dt))).map_err(wrap)?;
        w = &w + &((k1 + &k2 * 2.0 + &k3 * 2.0 + k4) * (dt / 6.0));
        if (step + 1) % every == 0 || step + 1 == steps {
            points.push(record(&w, (step + 1) as f64 * dt, count));
        }
    }
    Ok((points, w))
}

/// Largest principal angle between the column spans of two `N x 2` matrices.
pub fn principal_angle(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let qa = orthonormal_columns(a);
    let qb = orthonormal_columns(b);
    let m = qa.t().dot(&qb);
    let nm = nalgebra::DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]]);
    let smin = nm.singular_values().iter().copied().fold(f64::INFINITY, f64::min);
    smin.clamp(-1.0, 1.0).acos()
}

fn orthonormal_columns(a: ArrayView2<f64>) -> Array2<f64> {
    let m = nalgebra::DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]]);
    let q = m.qr().q();
    Array2::from_shape_fn((a.nrows(), a.ncols()), |(i, j)| q[(i, j)])
}

#[derive(Debug, Clone, PartialEq)]
pub struct FreeEnergySurface {
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
    /// `values[[i, j]] = F(h1[i], h2[j])`
    pub values: Array2<f64>,
    /// Grid points lower than all eight neighbours.
    pub grid_minima: Vec<[f64; 2]>,
}

/// `F(h1, h2)` on a regular grid for a two-hidden-unit Gaussian RBM.
pub fn free_energy_surface(w: ArrayView2<f64>, h1: &[f64], h2: &[f64]) -> Result<FreeEnergySurface> {
    if w.ncols() != 2 {
        return Err(crate::error::dim(format!("expected two hidden units, got {}", w.ncols())));
    }
    let values = Array2::from_shape_fn((h1.len(), h2.len()), |(i, j)| {
        mean_field_free_energy(w, Array1::from(vec![h1[i], h2[j]]).view())
    });
    let mut grid_minima = Vec::new();
    let (n1, n2) = values.dim();
    for i in 0..n1 {
        for j in 0..n2 {
            let v = values[[i, j]];
            let lowest = (i.saturating_sub(1)..(i + 2).min(n1))
                .flat_map(|a| (j.saturating_sub(1)..(j + 2).min(n2)).map(move |b| (a, b)))
                .filter(|&(a, b)| (a, b) != (i, j))
                .all(|(a, b)| values[[a, b]] > v);
            let interior = i > 0 && j > 0 && i + 1 < n1 && j + 1 < n2;
            if lowest && interior {
                grid_minima.push([h1[i], h2[j]]);
            }
        }
    }
    Ok(FreeEnergySurface { h1: h1.to_vec(), h2: h2.to_vec(), values, grid_minima })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{build_correlated_patterns, solve_mattis_magnetization, solve_pair_magnetizations};
    use approx::assert_relative_eq;
    use ndarray::Array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn residual(w: &Array1<f64>, h: f64) -> f64 {
        h - w.iter().map(|x| x * (h * x).tanh()).sum::<f64>() / w.len() as f64
    }

    #[test]
    fn hstar_small_weights_vanish() {
        assert_eq!(solve_hstar(Array1::zeros(10).view()).unwrap(), 0.0);
        let w = Array1::from_elem(100, 0.5f64.sqrt());
        assert_eq!(solve_hstar(w.view()).unwrap(), 0.0);
    }

    #[test]
    fn hstar_on_aligned_weights() {
        let beta: f64 = 1.4;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w: Array1<f64> = (0..500).map(|_| if rng.random::<bool>() { beta.sqrt() } else { -beta.sqrt() }).collect();
        let h = solve_hstar(w.view()).unwrap();
        assert_relative_eq!(h, beta.sqrt() * solve_mattis_magnetization(beta), epsilon = 1e-12);
        assert!(residual(&w, h).abs() < 1e-12);
        assert_relative_eq!(h, 0.963763, epsilon = 1e-6);
    }

    #[test]
    fn susceptibility_arithmetic() {
        let xi: Array1<f64> = (0..100).map(|i| if i % 3 == 0 { 1.0 } else { -1.0 }).collect();
        let w = &xi * 0.5;
        assert_relative_eq!(bg_susceptibility(w.view(), xi.view()).unwrap(), 2500.0 / 75.0, epsilon = 1e-10);
        assert_eq!(bg_susceptibility(Array1::zeros(100).view(), xi.view()).unwrap(), 0.0);
        assert!(matches!(bg_susceptibility((&xi * 1.0).view(), xi.view()), Err(Error::Phase(Phase::Condensed))));
    }

    #[test]
    fn susceptibility_exponent_is_one() {
        let xi = Array1::from_elem(400, 1.0);
        let pts: Vec<(f64, f64)> = [0.01, 0.02, 0.05, 0.1]
            .iter()
            .map(|&gap: &f64| {
                let w = &xi * (1.0 - gap).sqrt();
                ((gap).ln(), bg_susceptibility(w.view(), xi.view()).unwrap().ln())
            })
            .collect();
        let x: Vec<f64> = pts.iter().map(|p| p.0).collect();
        let y: Vec<f64> = pts.iter().map(|p| p.1).collect();
        let fit = crate::stats::linear_fit(&x, &y).unwrap();
        assert!((fit.slope + 1.0).abs() < 0.1, "{}", fit.slope);
    }

    fn mattis(n: usize, beta: f64, seed: u64) -> MattisSpec {
        MattisSpec::random(n, beta, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn bg_early_growth_rate_is_m_squared() {
        let spec = mattis(400, 1.5, 1);
        let xi = spec.xi_f64();
        let w0 = &xi * 1e-4;
        let traj = integrate_bg_dynamics(&spec, w0.view(), 0.01, 3.0, 0.01).unwrap();
        let x: Vec<f64> = traj.points.iter().map(|p| p.time).collect();
        let y: Vec<f64> = traj.points.iter().map(|p| p.u_xi.ln()).collect();
        let fit = crate::stats::linear_fit(&x, &y).unwrap();
        let m2 = spec.magnetization().powi(2);
        assert!((fit.slope / m2 - 1.0).abs() < 0.01, "{} vs {m2}", fit.slope);
    }

    #[test]
    fn bg_saturates_at_sqrt_beta() {
        let spec = mattis(300, 1.5, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w0: Array1<f64> =
            (0..300).map(|_| (rng.random::<f64>() - 0.5) * 2e-3).collect::<Array1<f64>>() + &(spec.xi_f64() * 1e-3);
        let traj = integrate_bg_dynamics(&spec, w0.view(), 0.01, 60.0, 0.05).unwrap();
        let last = traj.points.last().unwrap();
        assert!((last.norm_w - 1.5f64.sqrt()).abs() < 1e-3, "{}", last.norm_w);
        let xi = spec.xi_f64();
        let ratios: Vec<f64> = traj.last.weights.iter().zip(xi.iter()).map(|(w, x)| w / x).collect();
        let spread = ratios.iter().cloned().fold(f64::MIN, f64::max) - ratios.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread < 1e-3, "{spread}");
        assert_relative_eq!(traj.last.updates(), 6000.0, epsilon = 1e-9);
    }

    #[test]
    fn bg_orthogonal_component_is_frozen_early() {
        let spec = MattisSpec::curie_weiss(64, 1.5).unwrap();
        let phi: Array1<f64> = (0..64).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let w0 = &phi * 1e-3 + &(spec.xi_f64() * 1e-4);
        let traj = integrate_bg_dynamics(&spec, w0.view(), 0.01, 2.0, 0.01).unwrap();
        let drift = (traj.last.weights.dot(&phi) - w0.dot(&phi)).abs() / 2.0;
        assert!(drift < 1e-8, "{drift}");
    }

    #[test]
    fn rk4_is_fourth_order() {
        let spec = mattis(50, 1.5, 5);
        let w0 = spec.xi_f64() * 0.05;
        let run = |dt: f64| integrate_bg_dynamics(&spec, w0.view(), 0.01, 4.0, dt).unwrap().points.last().unwrap().u_xi;
        let (a, b, c) = (run(0.2), run(0.1), run(0.05));
        let ratio = (a - b) / (b - c);
        assert!((ratio.log2() - 4.0).abs() < 0.5, "observed order {}", ratio.log2());
    }

    #[test]
    fn bb_growth_and_stationarity() {
        let beta = 1.4;
        let spec = mattis(900, beta, 4);
        let m = spec.magnetization();
        for alpha in [4.0 / 9.0, 7.0 / 9.0, 10.0 / 9.0] {
            let w0 = spec.xi_f64() * 1e-4;
            let (pts, _) = integrate_bb_shared_dynamics(&spec, alpha, w0.view(), 1.0, 0.01).unwrap();
            let x: Vec<f64> = pts.iter().map(|p| p.time).collect();
            let y: Vec<f64> = pts.iter().map(|p| p.u_xi.ln()).collect();
            let fit = crate::stats::linear_fit(&x, &y).unwrap();
            assert!((fit.slope / (m * m / alpha) - 1.0).abs() < 0.01, "alpha {alpha}: {}", fit.slope);
        }
        let alpha = 4.0 / 9.0;
        let (w, tau) = bb_stationary_weight(m, alpha).unwrap();
        assert!((m * (m * w / alpha).tanh() - tau * (w * tau).tanh()).abs() < 1e-12);
        assert!((tau - (w * (w * tau).tanh() / alpha).tanh()).abs() < 1e-12);
        let w0 = spec.xi_f64() * 1e-3;
        let (_, wf) = integrate_bb_shared_dynamics(&spec, alpha, w0.view(), 40.0, 0.02).unwrap();
        let per_site = wf.dot(&spec.xi_f64()) / 900.0;
        assert!((per_site - w).abs() < 1e-4, "{per_site} vs {w}");
    }

    #[test]
    fn bb_orthogonal_start_stays_orthogonal() {
        let spec = MattisSpec::curie_weiss(100, 1.4).unwrap();
        let phi: Array1<f64> = (0..100).map(|i| if i < 50 { 1e-3 } else { -1e-3 }).collect();
        let (pts, _) = integrate_bb_shared_dynamics(&spec, 0.5, phi.view(), 2.0, 0.05).unwrap();
        assert!(pts.iter().all(|p| p.u_xi.abs() < 1e-15));
    }

    #[test]
    fn tau_fixed_point() {
        assert_eq!(solve_tau(Array1::from_elem(10, 0.5).view(), 10.0).unwrap(), 0.0);
        let w = Array1::from_elem(10, 2.0);
        let tau = solve_tau(w.view(), 10.0).unwrap();
        assert!(tau > 0.9);
        assert!((tau - (2.0 * (2.0 * tau).tanh()).tanh()).abs() < 1e-12);
    }

    fn pair(n: usize, seed: u64) -> (PairPatternSpec, MagnetizationSolution) {
        let p = build_correlated_patterns(n, 4.0, 0.5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let s = solve_pair_magnetizations(4.0, 0.5).unwrap();
        (p, s)
    }

    #[test]
    fn pair_closed_form_rates_and_order() {
        let (p, sol) = pair(1000, 1);
        let init = PairProjections { z: [0.05, 0.05], z_tilde: [0.05, -0.05] };
        let tr = predict_pair_trajectory(&p, &sol, &init, 10.0, 11);
        assert_relative_eq!(tr.rate1, sol.r * sol.r * 0.75, epsilon = 1e-12);
        assert_relative_eq!(tr.rate2, sol.p * sol.p * 0.25, epsilon = 1e-12);
        let fitted = (tr.u_eta1[10][0] / tr.u_eta1[0][0]).ln() / 10.0;
        assert_relative_eq!(fitted, tr.rate1, epsilon = 1e-12);
        assert!(tr.t_i < tr.t_ii);
        assert_relative_eq!(tr.t_i, 8.1, epsilon = 0.05);
        assert_relative_eq!(tr.t_ii, 26.6, epsilon = 0.1);
        let zero = PairProjections { z: [0.0; 2], z_tilde: [0.0; 2] };
        assert!(predict_pair_trajectory(&p, &sol, &zero, 1.0, 2).t_i.is_infinite());
    }

    #[test]
    fn doubling_size_shifts_first_time() {
        let (p1, sol) = pair(1000, 1);
        let (p2, _) = pair(2000, 1);
        let init = PairProjections { z: [0.03, 0.02], z_tilde: [0.01, -0.01] };
        let a = predict_pair_trajectory(&p1, &sol, &init, 1.0, 2);
        let b = predict_pair_trajectory(&p2, &sol, &init, 1.0, 2);
        assert_relative_eq!(b.t_i - a.t_i, 2f64.ln() / (2.0 * a.rate1), epsilon = 1e-12);
    }

    fn symmetric_start(p: &PairPatternSpec, z: f64, zt: f64) -> Array2<f64> {
        let (e1, e2) = p.eta_hat();
        let mut w = Array2::zeros((p.n_visible, 2));
        w.column_mut(0).assign(&(&e1 * z + &(&e2 * zt)));
        w.column_mut(1).assign(&(&e1 * z - &(&e2 * zt)));
        w
    }

    #[test]
    fn full_pair_ode_matches_closed_form_then_aligns() {
        let (p, sol) = pair(400, 2);
        let w0 = symmetric_start(&p, 0.05, 0.05);
        let init = PairProjections::of_weights(&p, w0.view()).unwrap();
        let pred = predict_pair_trajectory(&p, &sol, &init, 4.0, 2);
        let (pts, _) = integrate_pair_dynamics_full(&p, &sol, w0.view(), 4.0, 0.05, 80).unwrap();
        let last = pts.last().unwrap();
        assert!((last.u_eta1[0] / pred.u_eta1[1][0] - 1.0).abs() < 0.01);
        assert!((last.u_eta2[1] / pred.u_eta2[1][1] - 1.0).abs() < 0.01);

        let (pts, wf) = integrate_pair_dynamics_full(&p, &sol, w0.view(), 60.0, 0.05, 20).unwrap();
        for pt in &pts {
            assert!((pt.u_eta1[0] - pt.u_eta1[1]).abs() < 1e-9 * (1.0 + pt.u_eta1[0].abs()));
            assert!((pt.u_eta2[0] + pt.u_eta2[1]).abs() < 1e-9 * (1.0 + pt.u_eta2[0].abs()));
        }
        let mut xi = Array2::zeros((p.n_visible, 2));
        xi.column_mut(0).assign(&PairPatternSpec::vec(&p.xi1));
        xi.column_mut(1).assign(&PairPatternSpec::vec(&p.xi2));
        let angle = principal_angle(wf.view(), xi.view());
        assert!(angle < 0.05, "{angle}");
        assert_eq!(pts.last().unwrap().n_minima, 4);
    }

    #[test]
    fn free_energy_minima_counts() {
        let (p, _) = pair(400, 3);
        let grid: Vec<f64> = Array::linspace(-3.0, 3.0, 121).to_vec();
        let zero = Array2::zeros((400, 2));
        let s = free_energy_surface(zero.view(), &grid, &grid).unwrap();
        assert_eq!(s.grid_minima, vec![[0.0, 0.0]]);
        assert_eq!(free_energy_minima(zero.view(), &[]).len(), 1);

        let n1 = p.n_eta1() as f64;
        let a = (1.5 * 400.0 / (2.0 * n1)).sqrt();
        let e1 = PairPatternSpec::vec(&p.eta1);
        let e2 = PairPatternSpec::vec(&p.eta2);
        let mut w = Array2::zeros((400, 2));
        w.column_mut(0).assign(&(&e1 * a + &(&e2 * 1e-3)));
        w.column_mut(1).assign(&(&e1 * a - &(&e2 * 1e-3)));
        let mins = free_energy_minima(w.view(), &[]);
        assert_eq!(mins.len(), 2);
        for h in &mins {
            assert!((h[0] - h[1]).abs() < 1e-6 * h[0].abs());
        }
        let s = free_energy_surface(w.view(), &grid, &grid).unwrap();
        assert_eq!(s.grid_minima.len(), 2);

        let b = (1.5 * 400.0 / (2.0 * p.n_eta2() as f64)).sqrt();
        w.column_mut(0).assign(&(&e1 * a + &(&e2 * b)));
        w.column_mut(1).assign(&(&e1 * a - &(&e2 * b)));
        assert_eq!(free_energy_minima(w.view(), &[]).len(), 4);
        let s = free_energy_surface(w.view(), &grid, &grid).unwrap();
        assert_eq!(s.grid_minima.len(), 4);
    }

    proptest! {
        #[test]
        fn hstar_residual_is_tiny(ws in prop::collection::vec(-3.0f64..3.0, 5..60)) {
            let w = Array1::from(ws);
            let h = solve_hstar(w.view()).unwrap();
            prop_assert!(h >= 0.0);
            prop_assert!(residual(&w, h).abs() < 1e-12);
            let h2 = solve_hstar_from(w.view(), Some(h * 1.001 + 1e-3)).unwrap();
            prop_assert!((h - h2).abs() < 1e-10);
        }

        #[test]
        fn tau_residual_is_tiny(ws in prop::collection::vec(-3.0f64..3.0, 5..60), nh in 1.0f64..50.0) {
            let w = Array1::from(ws);
            let tau = solve_tau(w.view(), nh).unwrap();
            let s: f64 = w.iter().map(|x| x * (x * tau).tanh()).sum::<f64>() / nh;
            prop_assert!((0.0..=1.0).contains(&tau));
            prop_assert!((tau - s.tanh()).abs() < 1e-12);
        }
    }
}
