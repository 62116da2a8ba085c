//! Field loops on the tilted measure `H - h sum_i u_i v_i`.

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::chains::{gibbs_sweep, ChainEnsemble};
use crate::error::{dim, invalid, Result};
use crate::spin::RbmModel;
use crate::stats::{jackknife_stderr, ks_two_sample, mean, KsResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopProtocol {
    /// Field amplitude; `None` means `N_v^h_max_exponent`.
    pub h_max: Option<f64>,
    pub h_max_exponent: f64,
    /// Field steps for a full cycle; must be even.
    pub n_loop: usize,
    /// Gibbs sweeps at each field value.
    pub k: usize,
    pub n_chains: usize,
    /// Chain groups for the jackknife error of the loop area.
    pub n_groups: usize,
    pub seed: u64,
}

impl Default for LoopProtocol {
    fn default() -> Self {
        LoopProtocol { h_max: None, h_max_exponent: 0.75, n_loop: 50, k: 100, n_chains: 1000, n_groups: 20, seed: 0 }
    }
}

impl LoopProtocol {
    pub fn amplitude(&self, n_visible: usize) -> f64 {
        self.h_max.unwrap_or_else(|| (n_visible as f64).powf(self.h_max_exponent))
    }

    pub fn field_step(&self, n_visible: usize) -> f64 {
        2.0 * self.amplitude(n_visible) / self.n_loop as f64
    }

    fn validate(&self) -> Result<()> {
        if self.n_loop == 0 || self.n_loop % 2 != 0 {
            return Err(invalid(format!("n_loop must be a positive even number, got {}", self.n_loop)));
        }
        if self.n_chains < 2 || self.n_groups < 2 || self.n_groups > self.n_chains {
            return Err(invalid("need at least two chains and between two and n_chains jackknife groups"));
        }
        if let Some(h) = self.h_max {
            if !(h > 0.0 && h.is_finite()) {
                return Err(invalid(format!("h_max must be positive, got {h}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Leg {
    /// 0 to h_max.
    Rise,
    /// h_max to -h_max.
    Descend,
    /// -h_max back to 0.
    Return,
}

impl Leg {
    pub fn name(self) -> &'static str {
        match self {
            Leg::Rise => "rise",
            Leg::Descend => "descend",
            Leg::Return => "return",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub leg: Leg,
    pub h: f64,
    pub mean_m: f64,
    pub std_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HysteresisTrace {
    pub points: Vec<TracePoint>,
    pub loop_area: f64,
    pub loop_area_stderr: f64,
    pub h_max: f64,
    /// Per point, the magnetization of every chain.
    #[serde(skip)]
    pub samples: Vec<Vec<f64>>,
}

/// Field values in integer units of the step: `0..=n/2`, then down to `-n/2`, then back to 0.
pub fn field_path(n_loop: usize) -> Vec<(Leg, i64)> {
    let half = (n_loop / 2) as i64;
    let mut path: Vec<(Leg, i64)> = (0..=half).map(|j| (Leg::Rise, j)).collect();
    path.extend((-half..half).rev().map(|j| (Leg::Descend, j)));
    path.extend((-half + 1..=0).map(|j| (Leg::Return, j)));
    path
}

/// Signed shoelace area of the closed polygon through `points`. Positive when
/// the magnetization lags the field.
pub fn shoelace_area(points: &[(f64, f64)]) -> f64 {
    let n = points.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let (x0, y0) = points[i];
        let (x1, y1) = points[(i + 1) % n];
        acc += x0 * y1 - x1 * y0;
    }
    acc / 2.0
}

fn group_bounds(n: usize, groups: usize) -> Vec<(usize, usize)> {
    (0..groups).map(|g| (g * n / groups, (g + 1) * n / groups)).collect()
}

/// Runs the field loop, carrying the chains from each field value to the next.
pub fn run_loop(model: &RbmModel, direction: ArrayView1<f64>, protocol: &LoopProtocol) -> Result<HysteresisTrace> {
    protocol.validate()?;
    let nv = model.n_visible();
    if direction.len() != nv {
        return Err(dim("loop direction length does not match N_v"));
    }
    let norm = direction.dot(&direction).sqrt();
    if (norm - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("loop direction must have unit norm, got {norm}")));
    }
    let h_max = protocol.amplitude(nv);
    let dh = protocol.field_step(nv);
    let scale = (nv as f64).sqrt();
    let mut ens = ChainEnsemble::random(model, protocol.n_chains, protocol.seed);
    let mut tilted = model.clone();
    let mut points = Vec::new();
    let mut samples = Vec::new();
    for (leg, j) in field_path(protocol.n_loop) {
        let h = dh * j as f64;
        tilted.visible_bias = &model.visible_bias + &(&direction * h);
        gibbs_sweep(&tilted, &mut ens, protocol.k);
        let m: Array1<f64> = ens.visible.dot(&direction) / scale;
        let m = m.to_vec();
        let mu = mean(&m);
        let sd = (m.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / m.len() as f64).sqrt();
        points.push(TracePoint { leg, h, mean_m: mu, std_m: sd });
        samples.push(m);
    }
    let loop_area = shoelace_area(&points.iter().map(|p| (p.h, p.mean_m)).collect::<Vec<_>>());
    let bounds = group_bounds(protocol.n_chains, protocol.n_groups);
    let loo: Vec<f64> = bounds
        .iter()
        .map(|&(lo, hi)| {
            let kept = (protocol.n_chains - (hi - lo)) as f64;
            let curve: Vec<(f64, f64)> = points
                .iter()
                .zip(&samples)
                .map(|(p, s)| {
                    let total: f64 = s.iter().sum();
                    let left_out: f64 = s[lo..hi].iter().sum();
                    (p.h, (total - left_out) / kept)
                })
                .collect();
            shoelace_area(&curve)
        })
        .collect();
    Ok(HysteresisTrace { points, loop_area, loop_area_stderr: jackknife_stderr(&loo), h_max, samples })
}

/// KS test of `(h, m) -> (-h, -m)` symmetry: the first half of the cycle against
/// the negated second half.
pub fn antisymmetry_test(trace: &HysteresisTrace) -> Result<KsResult> {
    let n = trace.points.len();
    if n < 3 || (n - 1) % 2 != 0 {
        return Err(invalid("trace does not describe a full symmetric loop"));
    }
    let half = (n - 1) / 2;
    let a: Vec<f64> = trace.points[..half].iter().map(|p| p.mean_m).collect();
    let b: Vec<f64> = trace.points[half..2 * half].iter().map(|p| -p.mean_m).collect();
    for (p, q) in trace.points[..half].iter().zip(&trace.points[half..2 * half]) {
        if (p.h + q.h).abs() > 1e-9 * trace.h_max.max(1.0) {
            return Err(invalid("trace fields are not mirror symmetric"));
        }
    }
    Ok(ks_two_sample(&a, &b))
}

/// Largest finite-difference slope of `<m>` against `h` along the trace.
pub fn max_slope(trace: &HysteresisTrace) -> f64 {
    trace
        .points
        .windows(2)
        .filter(|w| w[1].h != w[0].h)
        .map(|w| ((w[1].mean_m - w[0].mean_m) / (w[1].h - w[0].h)).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectra::low_rank_model;
    use crate::spin::{HiddenKind, SpinConvention};

    #[test]
    fn path_is_closed_and_symmetric() {
        let p = field_path(50);
        assert_eq!(p.len(), 101);
        assert_eq!(p.first().unwrap().1, 0);
        assert_eq!(p.last().unwrap().1, 0);
        assert_eq!(p.iter().map(|x| x.1).max(), Some(25));
        assert_eq!(p.iter().map(|x| x.1).min(), Some(-25));
        assert!(p.windows(2).all(|w| (w[1].1 - w[0].1).abs() == 1));
        for k in 0..50 {
            assert_eq!(p[k].1, -p[k + 50].1);
        }
    }

    #[test]
    fn field_step_definition() {
        let proto = LoopProtocol { h_max: Some(10.0), n_loop: 50, ..LoopProtocol::default() };
        assert_eq!(proto.field_step(100), 0.4);
        let auto = LoopProtocol::default();
        assert!((auto.amplitude(10_000) - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn shoelace_orientation() {
        let square = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        assert_eq!(shoelace_area(&square), 1.0);
        let rev: Vec<_> = square.iter().rev().copied().collect();
        assert_eq!(shoelace_area(&rev), -1.0);
    }

    fn pm_model(n: usize, w: f64) -> (RbmModel, Array1<f64>) {
        let u = Array1::from_elem(n, 1.0 / (n as f64).sqrt());
        (low_rank_model(u.view(), u.view(), w, SpinConvention::IsingPM1).unwrap(), u)
    }

    #[test]
    fn paramagnet_has_no_loop_and_is_antisymmetric() {
        let (m, u) = pm_model(100, 2.0);
        let proto = LoopProtocol { h_max: Some(20.0), k: 5, n_chains: 200, seed: 3, ..LoopProtocol::default() };
        let t = run_loop(&m, u.view(), &proto).unwrap();
        assert_eq!(t.points.first().unwrap().h, 0.0);
        assert_eq!(t.points.last().unwrap().h, 0.0);
        assert!(t.loop_area.abs() < 3.0 * t.loop_area_stderr + 1e-12, "{} {}", t.loop_area, t.loop_area_stderr);
        assert!(antisymmetry_test(&t).unwrap().p_value > 0.01);
    }

    #[test]
    fn condensed_model_opens_a_loop() {
        let (m, u) = pm_model(200, 6.0);
        let proto = LoopProtocol { h_max: Some(30.0), k: 10, n_chains: 200, seed: 4, ..LoopProtocol::default() };
        let t = run_loop(&m, u.view(), &proto).unwrap();
        assert!(t.loop_area > 5.0 * t.loop_area_stderr, "{} {}", t.loop_area, t.loop_area_stderr);
    }

    #[test]
    fn loops_are_reproducible() {
        let (m, u) = pm_model(50, 5.0);
        let proto =
            LoopProtocol { h_max: Some(10.0), k: 3, n_chains: 70, n_loop: 10, seed: 9, ..LoopProtocol::default() };
        let a = run_loop(&m, u.view(), &proto).unwrap();
        let b = run_loop(&m, u.view(), &proto).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_protocols_are_rejected() {
        let m = RbmModel::zeros(4, 2, SpinConvention::IsingPM1, HiddenKind::Binary);
        let u = Array1::from_elem(4, 0.5);
        let odd = LoopProtocol { n_loop: 7, n_chains: 10, n_groups: 5, ..LoopProtocol::default() };
        assert!(run_loop(&m, u.view(), &odd).is_err());
        let ok = LoopProtocol { n_chains: 10, n_groups: 5, k: 1, ..LoopProtocol::default() };
        assert!(run_loop(&m, (&u * 2.0).view(), &ok).is_err());
    }
}
