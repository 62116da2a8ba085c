//! Brute-force enumeration of small models, used as an oracle.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{dim, Error, Result};
use crate::spin::{state_from_index, HiddenKind, RbmModel};

pub const MAX_ENUM_BITS: usize = 24;

#[derive(Debug, Clone)]
pub struct ExactDistribution {
    pub n_visible: usize,
    pub n_hidden: usize,
    /// True when `probs` is indexed by visible states only (Gaussian hidden integrated out).
    pub hidden_marginalized: bool,
    /// Joint probabilities indexed by `v_bits | h_bits << n_visible`, or visible-only.
    pub probs: Vec<f64>,
    pub log_z: f64,
}

impl ExactDistribution {
    pub fn visible_marginal(&self) -> Vec<f64> {
        if self.hidden_marginalized {
            return self.probs.clone();
        }
        let nv = 1usize << self.n_visible;
        let mut out = vec![0.0; nv];
        for (idx, p) in self.probs.iter().enumerate() {
            out[idx & (nv - 1)] += p;
        }
        out
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn check_bits(bits: usize) -> Result<()> {
    if bits > MAX_ENUM_BITS {
        return Err(Error::TooLarge { bits, cap: MAX_ENUM_BITS });
    }
    Ok(())
}

/// Full probability table. Binary hidden units are enumerated jointly; Gaussian
/// hidden units are integrated out analytically.
pub fn exact_enumeration(model: &RbmModel) -> Result<ExactDistribution> {
    model.validate()?;
    let (nv, nh) = (model.n_visible(), model.n_hidden());
    match model.hidden_kind {
        HiddenKind::Gaussian { .. } => {
            let (log_p, log_z) = visible_log_probs(model)?;
            Ok(ExactDistribution {
                n_visible: nv,
                n_hidden: nh,
                hidden_marginalized: true,
                probs: log_p.iter().map(|l| l.exp()).collect(),
                log_z,
            })
        }
        HiddenKind::Binary => {
            check_bits(nv + nh)?;
            let conv = model.convention;
            let hs: Vec<Array1<f64>> = (0..1u64 << nh).map(|j| state_from_index(j, nh, conv)).collect();
            let mut neg_e = Vec::with_capacity(1 << (nv + nh));
            let vs: Vec<Array1<f64>> = (0..1u64 << nv).map(|j| state_from_index(j, nv, conv)).collect();
            for h in &hs {
                let wh = model.visible_field(h.view());
                let ch = model.hidden_bias.dot(h);
                for v in &vs {
                    neg_e.push(v.dot(&wh) + ch);
                }
            }
            let log_z = log_sum_exp(&neg_e);
            Ok(ExactDistribution {
                n_visible: nv,
                n_hidden: nh,
                hidden_marginalized: false,
                probs: neg_e.iter().map(|x| (x - log_z).exp()).collect(),
                log_z,
            })
        }
    }
}

/// Log probabilities of every visible state from the free energy, plus log Z.
pub fn visible_log_probs(model: &RbmModel) -> Result<(Vec<f64>, f64)> {
    let nv = model.n_visible();
    check_bits(nv)?;
    let neg_f: Vec<f64> =
        (0..1u64 << nv).map(|j| -model.free_energy(state_from_index(j, nv, model.convention).view())).collect();
    let log_z = log_sum_exp(&neg_f);
    Ok((neg_f.iter().map(|x| x - log_z).collect(), log_z))
}

/// Mean log-likelihood of the rows of `data` under the model.
pub fn log_likelihood(model: &RbmModel, data: ArrayView2<f64>) -> Result<f64> {
    if data.ncols() != model.n_visible() {
        return Err(dim("data width does not match the model"));
    }
    let (_, log_z) = visible_log_probs(model)?;
    let sum: f64 = data.axis_iter(Axis(0)).map(|v| -model.free_energy(v)).sum();
    Ok(sum / data.nrows() as f64 - log_z)
}

/// Exact model averages `<v h^T>`, `<v>`, `<h>`.
#[derive(Debug, Clone)]
pub struct Moments {
    pub vh: Array2<f64>,
    pub v: Array1<f64>,
    pub h: Array1<f64>,
}

pub fn model_moments(model: &RbmModel) -> Result<Moments> {
    let (log_p, _) = visible_log_probs(model)?;
    let (nv, nh) = (model.n_visible(), model.n_hidden());
    let mut m = Moments { vh: Array2::zeros((nv, nh)), v: Array1::zeros(nv), h: Array1::zeros(nh) };
    for (j, lp) in log_p.iter().enumerate() {
        let p = lp.exp();
        let v = state_from_index(j as u64, nv, model.convention);
        let h = model.hidden_field(v.view()).mapv(|x| model.hidden_mean_of_field(x));
        for i in 0..nv {
            if v[i] != 0.0 {
                m.vh.row_mut(i).scaled_add(p * v[i], &h);
            }
        }
        m.v.scaled_add(p, &v);
        m.h.scaled_add(p, &h);
    }
    Ok(m)
}

/// Visible-to-visible kernel of one block-Gibbs sweep, `sum_h p(h|v) p(v'|h)`.
pub fn visible_kernel(model: &RbmModel) -> Result<Array2<f64>> {
    if model.hidden_kind != HiddenKind::Binary {
        return Err(Error::Invalid("kernel enumeration needs binary hidden units".into()));
    }
    let (nv, nh) = (model.n_visible(), model.n_hidden());
    check_bits(2 * nv + nh)?;
    let conv = model.convention;
    let n_vs = 1usize << nv;
    let n_hs = 1usize << nh;
    let prob_of = |p_up: &Array1<f64>, bits: usize| -> f64 {
        p_up.iter().enumerate().map(|(i, &p)| if (bits >> i) & 1 == 1 { p } else { 1.0 - p }).product()
    };
    let p_v_given_h: Vec<Array1<f64>> = (0..n_hs)
        .map(|hb| {
            let h = state_from_index(hb as u64, nh, conv);
            let pu = model.visible_field(h.view()).mapv(|x| conv.p_up(x));
            Array1::from_iter((0..n_vs).map(|vb| prob_of(&pu, vb)))
        })
        .collect();
    let mut k = Array2::zeros((n_vs, n_vs));
    for vb in 0..n_vs {
        let v = state_from_index(vb as u64, nv, conv);
        let pu = model.hidden_field(v.view()).mapv(|x| conv.p_up(x));
        for (hb, pv) in p_v_given_h.iter().enumerate() {
            k.row_mut(vb).scaled_add(prob_of(&pu, hb), pv);
        }
    }
    Ok(k)
}
