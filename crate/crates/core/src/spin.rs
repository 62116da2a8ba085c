//! Spin conventions, the RBM energy model and its factorized conditionals.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{dim, invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpinConvention {
    Binary01,
    IsingPM1,
}

impl SpinConvention {
    pub fn low(self) -> f64 {
        match self {
            SpinConvention::Binary01 => 0.0,
            SpinConvention::IsingPM1 => -1.0,
        }
    }

    pub fn from_bit(self, bit: bool) -> f64 {
        if bit {
            1.0
        } else {
            self.low()
        }
    }

    pub fn is_valid(self, x: f64) -> bool {
        x == 1.0 || x == self.low()
    }

    /// Probability of the up state for a unit with local field `x`.
    pub fn p_up(self, x: f64) -> f64 {
        match self {
            SpinConvention::Binary01 => logistic(x),
            SpinConvention::IsingPM1 => logistic(2.0 * x),
        }
    }

    /// Conditional mean of a unit with local field `x`.
    pub fn mean(self, x: f64) -> f64 {
        match self {
            SpinConvention::Binary01 => logistic(x),
            SpinConvention::IsingPM1 => x.tanh(),
        }
    }

    /// `log sum_s exp(x s)` over the two states.
    pub fn log_partition(self, x: f64) -> f64 {
        match self {
            SpinConvention::Binary01 => softplus(x),
            SpinConvention::IsingPM1 => {
                let a = x.abs();
                a + (-2.0 * a).exp().ln_1p()
            }
        }
    }

    pub fn code(self) -> u8 {
        match self {
            SpinConvention::Binary01 => 0,
            SpinConvention::IsingPM1 => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(SpinConvention::Binary01),
            1 => Some(SpinConvention::IsingPM1),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum HiddenKind {
    Binary,
    Gaussian { variance: f64 },
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum HiddenConditional {
    Bernoulli { p_up: Array1<f64> },
    Gaussian { mean: Array1<f64>, variance: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RbmModel {
    pub weights: Array2<f64>,
    pub visible_bias: Array1<f64>,
    pub hidden_bias: Array1<f64>,
    pub convention: SpinConvention,
    pub hidden_kind: HiddenKind,
}

impl RbmModel {
    pub fn zeros(n_visible: usize, n_hidden: usize, convention: SpinConvention, hidden_kind: HiddenKind) -> Self {
        RbmModel {
            weights: Array2::zeros((n_visible, n_hidden)),
            visible_bias: Array1::zeros(n_visible),
            hidden_bias: Array1::zeros(n_hidden),
            convention,
            hidden_kind,
        }
    }

    pub fn new(
        weights: Array2<f64>,
        visible_bias: Array1<f64>,
        hidden_bias: Array1<f64>,
        convention: SpinConvention,
        hidden_kind: HiddenKind,
    ) -> Result<Self> {
        let m = RbmModel { weights, visible_bias, hidden_bias, convention, hidden_kind };
        m.validate()?;
        Ok(m)
    }

    /// Gaussian hidden units with the extensive variance 1/N_v.
    pub fn gaussian_theory(weights: Array2<f64>) -> Self {
        let (nv, nh) = weights.dim();
        RbmModel {
            weights,
            visible_bias: Array1::zeros(nv),
            hidden_bias: Array1::zeros(nh),
            convention: SpinConvention::IsingPM1,
            hidden_kind: HiddenKind::Gaussian { variance: 1.0 / nv as f64 },
        }
    }

    pub fn n_visible(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_hidden(&self) -> usize {
        self.weights.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (nv, nh) = self.weights.dim();
        if nv == 0 || nh == 0 {
            return Err(invalid("model needs at least one visible and one hidden unit"));
        }
        if self.visible_bias.len() != nv || self.hidden_bias.len() != nh {
            return Err(dim(format!(
                "biases have lengths {}/{} for a {nv}x{nh} weight matrix",
                self.visible_bias.len(),
                self.hidden_bias.len()
            )));
        }
        let finite =
            self.weights.iter().chain(self.visible_bias.iter()).chain(self.hidden_bias.iter()).all(|x| x.is_finite());
        if !finite {
            return Err(invalid("non-finite model parameter"));
        }
        if let HiddenKind::Gaussian { variance } = self.hidden_kind {
            if !(variance > 0.0 && variance.is_finite()) {
                return Err(invalid(format!("gaussian variance must be positive, got {variance}")));
            }
        }
        Ok(())
    }

    /// Theory mode admits Gaussian hidden units only with variance 1/N_v.
    pub fn validate_theory(&self) -> Result<()> {
        self.validate()?;
        if let HiddenKind::Gaussian { variance } = self.hidden_kind {
            let target = 1.0 / self.n_visible() as f64;
            if ((variance - target) / target).abs() > 1e-12 {
                return Err(invalid(format!("theory mode needs variance 1/N_v = {target}, got {variance}")));
            }
        }
        Ok(())
    }

    fn check_visible(&self, v: ArrayView1<f64>) -> Result<()> {
        if v.len() != self.n_visible() {
            return Err(dim(format!("visible vector has length {}, expected {}", v.len(), self.n_visible())));
        }
        Ok(())
    }

    fn check_hidden(&self, h: ArrayView1<f64>) -> Result<()> {
        if h.len() != self.n_hidden() {
            return Err(dim(format!("hidden vector has length {}, expected {}", h.len(), self.n_hidden())));
        }
        Ok(())
    }

    pub fn energy(&self, v: ArrayView1<f64>, h: ArrayView1<f64>) -> Result<f64> {
        self.check_visible(v)?;
        self.check_hidden(h)?;
        let mut e = -v.dot(&self.weights.dot(&h)) - self.visible_bias.dot(&v) - self.hidden_bias.dot(&h);
        if let HiddenKind::Gaussian { variance } = self.hidden_kind {
            e += h.dot(&h) / (2.0 * variance);
        }
        Ok(e)
    }

    /// Local fields `W^T v + c` felt by the hidden layer.
    pub fn hidden_field(&self, v: ArrayView1<f64>) -> Array1<f64> {
        self.weights.t().dot(&v) + &self.hidden_bias
    }

    /// Local fields `W h + b` felt by the visible layer.
    pub fn visible_field(&self, h: ArrayView1<f64>) -> Array1<f64> {
        self.weights.dot(&h) + &self.visible_bias
    }

    pub fn conditional_hidden(&self, v: ArrayView1<f64>) -> Result<HiddenConditional> {
        self.check_visible(v)?;
        let x = self.hidden_field(v);
        Ok(match self.hidden_kind {
            HiddenKind::Binary => HiddenConditional::Bernoulli { p_up: x.mapv(|x| self.convention.p_up(x)) },
            HiddenKind::Gaussian { variance } => HiddenConditional::Gaussian { mean: x * variance, variance },
        })
    }

    /// `p(v_i = up | h)` for every visible unit.
    pub fn conditional_visible(&self, h: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_hidden(h)?;
        Ok(self.visible_field(h).mapv(|x| self.convention.p_up(x)))
    }

    /// Mean of a hidden unit given its local field.
    pub fn hidden_mean_of_field(&self, x: f64) -> f64 {
        match self.hidden_kind {
            HiddenKind::Binary => self.convention.mean(x),
            HiddenKind::Gaussian { variance } => variance * x,
        }
    }

    /// `log sum_h exp(x h)` for one hidden unit with field `x`.
    pub fn hidden_log_partition(&self, x: f64) -> f64 {
        match self.hidden_kind {
            HiddenKind::Binary => self.convention.log_partition(x),
            HiddenKind::Gaussian { variance } => {
                0.5 * variance * x * x + 0.5 * (2.0 * std::f64::consts::PI * variance).ln()
            }
        }
    }

    /// Free energy of a visible configuration, `-log sum_h exp(-E(v,h))`.
    pub fn free_energy(&self, v: ArrayView1<f64>) -> f64 {
        let x = self.hidden_field(v);
        -self.visible_bias.dot(&v) - x.iter().map(|&x| self.hidden_log_partition(x)).sum::<f64>()
    }

    /// Exact conversion to another spin convention preserving the Boltzmann measure.
    /// Gaussian hidden units are real valued, so only the visible layer is remapped.
    pub fn to_convention(&self, target: SpinConvention) -> RbmModel {
        if target == self.convention {
            return self.clone();
        }
        let w = &self.weights;
        let row_sums = w.sum_axis(ndarray::Axis(1));
        let col_sums = w.sum_axis(ndarray::Axis(0));
        let (weights, visible_bias, hidden_bias) = match (self.hidden_kind, target) {
            (HiddenKind::Binary, SpinConvention::IsingPM1) => {
                (w / 4.0, &self.visible_bias / 2.0 + &row_sums / 4.0, &self.hidden_bias / 2.0 + &col_sums / 4.0)
            }
            (HiddenKind::Binary, SpinConvention::Binary01) => {
                (w * 4.0, &self.visible_bias * 2.0 - &row_sums * 2.0, &self.hidden_bias * 2.0 - &col_sums * 2.0)
            }
            (HiddenKind::Gaussian { .. }, SpinConvention::IsingPM1) => {
                (w / 2.0, &self.visible_bias / 2.0, &self.hidden_bias + &col_sums / 2.0)
            }
            (HiddenKind::Gaussian { .. }, SpinConvention::Binary01) => {
                (w * 2.0, &self.visible_bias * 2.0, &self.hidden_bias - &col_sums)
            }
        };
        RbmModel { weights, visible_bias, hidden_bias, convention: target, hidden_kind: self.hidden_kind }
    }
}

/// Decode bit `i` of `index` into unit `i` of a spin vector.
pub fn state_from_index(index: u64, n: usize, convention: SpinConvention) -> Array1<f64> {
    Array1::from_iter((0..n).map(|i| convention.from_bit((index >> i) & 1 == 1)))
}

pub fn index_from_state(s: ArrayView1<f64>) -> u64 {
    s.iter().enumerate().fold(0u64, |acc, (i, &x)| if x == 1.0 { acc | (1 << i) } else { acc })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    #[test]
    fn zero_model_has_zero_energy() {
        let m = RbmModel::zeros(3, 2, SpinConvention::Binary01, HiddenKind::Binary);
        let e = m.energy(array![1.0, 0.0, 1.0].view(), array![1.0, 1.0].view()).unwrap();
        assert_eq!(e, 0.0);
    }

    #[test]
    fn two_spin_energy_by_hand() {
        let mut m = RbmModel::zeros(2, 1, SpinConvention::Binary01, HiddenKind::Binary);
        m.weights = array![[1.0], [1.0]];
        let e = m.energy(array![1.0, 1.0].view(), array![1.0].view()).unwrap();
        assert_eq!(e, -2.0);
    }

    #[test]
    fn gaussian_energy_by_hand() {
        let m = RbmModel::gaussian_theory(array![[1.0], [1.0]]);
        let e = m.energy(array![1.0, 1.0].view(), array![0.5].view()).unwrap();
        assert_relative_eq!(e, -0.75, epsilon = 1e-15);
    }

    #[test]
    fn energy_rejects_wrong_lengths() {
        let m = RbmModel::zeros(3, 2, SpinConvention::IsingPM1, HiddenKind::Binary);
        assert!(m.energy(array![1.0, 1.0].view(), array![1.0, 1.0].view()).is_err());
        assert!(m.energy(array![1.0, 1.0, 1.0].view(), array![1.0].view()).is_err());
    }

    #[test]
    fn zero_field_conditionals() {
        let m = RbmModel::zeros(3, 2, SpinConvention::IsingPM1, HiddenKind::Binary);
        match m.conditional_hidden(array![1.0, -1.0, 1.0].view()).unwrap() {
            HiddenConditional::Bernoulli { p_up } => assert!(p_up.iter().all(|&p| p == 0.5)),
            _ => unreachable!(),
        }
        let g = RbmModel::gaussian_theory(Array2::zeros((3, 2)));
        match g.conditional_hidden(array![1.0, -1.0, 1.0].view()).unwrap() {
            HiddenConditional::Gaussian { mean, variance } => {
                assert!(mean.iter().all(|&x| x == 0.0));
                assert_relative_eq!(variance, 1.0 / 3.0);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn logistic_saturates_without_overflow() {
        assert_eq!(logistic(1e4), 1.0);
        assert_eq!(logistic(-1e4), 0.0);
        assert!(logistic(800.0).is_finite() && logistic(-800.0).is_finite());
        assert_relative_eq!(softplus(-800.0), 0.0);
        assert_relative_eq!(softplus(800.0), 800.0);
        assert_relative_eq!(SpinConvention::IsingPM1.log_partition(800.0), 800.0);
    }

    #[test]
    fn large_field_gives_certain_unit() {
        let mut m = RbmModel::zeros(1, 1, SpinConvention::Binary01, HiddenKind::Binary);
        m.weights[[0, 0]] = 1e3;
        let p = m.conditional_visible(array![1.0].view()).unwrap();
        assert_eq!(p[0], 1.0);
    }

    #[test]
    fn validation_rejects_bad_models() {
        let mut m = RbmModel::zeros(2, 2, SpinConvention::Binary01, HiddenKind::Binary);
        m.weights[[0, 1]] = f64::NAN;
        assert!(m.validate().is_err());
        let g = RbmModel {
            hidden_kind: HiddenKind::Gaussian { variance: 0.3 },
            ..RbmModel::zeros(4, 1, SpinConvention::IsingPM1, HiddenKind::Binary)
        };
        assert!(g.validate().is_ok());
        assert!(g.validate_theory().is_err());
        assert!(RbmModel::gaussian_theory(Array2::zeros((4, 1))).validate_theory().is_ok());
    }

    #[test]
    fn index_round_trip() {
        for idx in 0..16u64 {
            let s = state_from_index(idx, 4, SpinConvention::IsingPM1);
            assert_eq!(index_from_state(s.view()), idx);
        }
    }
}
