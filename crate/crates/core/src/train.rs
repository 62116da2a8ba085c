//! Maximum-likelihood training by stochastic gradient ascent.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::chains::{gibbs_sweep, hidden_means, mean_outer, stream_rng, ChainEnsemble};
use crate::enumerate::model_moments;
use crate::error::{dim, invalid, Error, Result};
use crate::spin::{HiddenKind, RbmModel, SpinConvention};

/// How the negative term of the gradient is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Scheme {
    /// Persistent chains carried across updates.
    Pcd(usize),
    /// Chains restarted at the minibatch.
    Cd(usize),
    /// Chains restarted from uniform random states.
    Rdm(usize),
    /// Exact model averages by enumeration (tiny models only).
    Exact,
}

impl Scheme {
    pub fn sweeps(self) -> usize {
        match self {
            Scheme::Pcd(k) | Scheme::Cd(k) | Scheme::Rdm(k) => k,
            Scheme::Exact => 0,
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::Pcd(k) => write!(f, "pcd-{k}"),
            Scheme::Cd(k) => write!(f, "cd-{k}"),
            Scheme::Rdm(k) => write!(f, "rdm-{k}"),
            Scheme::Exact => write!(f, "exact"),
        }
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        if lower == "exact" {
            return Ok(Scheme::Exact);
        }
        let (name, k) = lower
            .split_once('-')
            .ok_or_else(|| invalid(format!("scheme {s:?} should look like pcd-10, cd-10, rdm-10 or exact")))?;
        let k: usize = k.parse().map_err(|_| invalid(format!("scheme {s:?}: sweep count is not an integer")))?;
        if k == 0 {
            return Err(invalid(format!("scheme {s:?}: need at least one sweep")));
        }
        match name {
            "pcd" => Ok(Scheme::Pcd(k)),
            "cd" => Ok(Scheme::Cd(k)),
            "rdm" => Ok(Scheme::Rdm(k)),
            _ => Err(invalid(format!("unknown scheme {name:?}"))),
        }
    }
}

impl TryFrom<String> for Scheme {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Scheme> for String {
    fn from(s: Scheme) -> String {
        s.to_string()
    }
}

/// `SharedHidden` ties every hidden unit to one weight vector, `W_ia = w_i / N_h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Parametrization {
    #[default]
    Full,
    SharedHidden,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub scheme: Scheme,
    pub learning_rate: f64,
    pub minibatch_size: usize,
    /// Defaults to the minibatch size.
    pub n_chains: Option<usize>,
    pub epochs: usize,
    pub checkpoint_count: usize,
    pub seed: u64,
    /// Standard deviation of the initial weights; defaults to `1e-4 / sqrt(N_v)`.
    pub init_std: Option<f64>,
    pub learn_biases: bool,
    pub parametrization: Parametrization,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            scheme: Scheme::Pcd(10),
            learning_rate: 0.01,
            minibatch_size: 500,
            n_chains: None,
            epochs: 100,
            checkpoint_count: 100,
            seed: 0,
            init_std: None,
            learn_biases: true,
            parametrization: Parametrization::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid(format!("learning_rate must be finite and nonnegative, got {}", self.learning_rate)));
        }
        if self.minibatch_size == 0 || self.epochs == 0 || self.checkpoint_count == 0 {
            return Err(invalid("minibatch_size, epochs and checkpoint_count must be positive"));
        }
        if self.n_chains == Some(0) {
            return Err(invalid("n_chains must be positive"));
        }
        if let Some(s) = self.init_std {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(invalid(format!("init_std must be finite and nonnegative, got {s}")));
            }
        }
        Ok(())
    }

    pub fn chains(&self) -> usize {
        self.n_chains.unwrap_or(self.minibatch_size)
    }
}

/// Independent 64-bit seeds for the different random consumers of a run.
fn derive_seed(seed: u64, purpose: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(mix(mix(seed) ^ purpose) ^ index)
}

const PURPOSE_INIT: u64 = 1;
const PURPOSE_PERM: u64 = 2;
const PURPOSE_CHAINS: u64 = 3;
const PURPOSE_PCD: u64 = 4;

/// Random initial model: Gaussian weights, zero biases.
pub fn initial_model(
    n_visible: usize,
    n_hidden: usize,
    convention: SpinConvention,
    hidden_kind: HiddenKind,
    config: &TrainConfig,
) -> Result<RbmModel> {
    config.validate()?;
    let std = config.init_std.unwrap_or(1e-4 / (n_visible as f64).sqrt());
    let normal = Normal::new(0.0, std).map_err(|e| invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, PURPOSE_INIT, 0));
    let mut model = RbmModel::zeros(n_visible, n_hidden, convention, hidden_kind);
    match config.parametrization {
        Parametrization::Full => model.weights.mapv_inplace(|_| normal.sample(&mut rng)),
        Parametrization::SharedHidden => {
            let w: Array1<f64> = (0..n_visible).map(|_| normal.sample(&mut rng) / n_hidden as f64).collect();
            for mut col in model.weights.axis_iter_mut(Axis(1)) {
                col.assign(&w);
            }
        }
    }
    model.validate()?;
    Ok(model)
}

/// Log-likelihood gradient with respect to `W`, `b` and `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub c: Array1<f64>,
}

impl Gradient {
    pub fn norm(&self) -> f64 {
        self.w.iter().chain(self.b.iter()).chain(self.c.iter()).map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// `<v h^T>`, `<v>` and `<h>` over rows of `visible`, using exact conditional
/// hidden means.
pub fn clamped_moments(model: &RbmModel, visible: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>, Array1<f64>)> {
    if visible.nrows() == 0 {
        return Err(invalid("empty batch"));
    }
    if visible.ncols() != model.n_visible() {
        return Err(dim(format!(
            "batch has {} columns, model has {} visible units",
            visible.ncols(),
            model.n_visible()
        )));
    }
    let h = hidden_means(model, visible);
    let vh = mean_outer(visible, h.view());
    let v = visible.mean_axis(Axis(0)).expect("nonempty");
    let hm = h.mean_axis(Axis(0)).expect("nonempty");
    Ok((vh, v, hm))
}

/// Data term minus model term. The model term uses the chains' visible states
/// with exact hidden means, or exact enumeration when `chains` is `None`.
pub fn gradient_estimate(
    model: &RbmModel,
    batch: ArrayView2<f64>,
    chains: Option<ArrayView2<f64>>,
) -> Result<Gradient> {
    let (pvh, pv, ph) = clamped_moments(model, batch)?;
    let (nvh, nv, nh) = match chains {
        Some(c) => clamped_moments(model, c)?,
        None => {
            let m = model_moments(model)?;
            (m.vh, m.v, m.h)
        }
    };
    Ok(Gradient { w: pvh - nvh, b: pv - nv, c: ph - nh })
}

/// Training state that can be saved and resumed.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: RbmModel,
    pub update_index: u64,
    pub epoch: f64,
    /// Persistent chains (PCD only).
    pub chains: Option<ChainEnsemble>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub update: u64,
    pub epoch: f64,
    pub grad_norm: f64,
}

/// `count` distinct update indices from 1 to `total`, spaced uniformly in log.
pub fn checkpoint_schedule(total: u64, count: usize) -> Vec<u64> {
    if total == 0 || count == 0 {
        return Vec::new();
    }
    let count = (count as u64).min(total) as usize;
    if count == 1 {
        return vec![total];
    }
    let lt = (total as f64).ln();
    let mut out: Vec<u64> = Vec::with_capacity(count);
    for k in 0..count {
        let ideal = (lt * k as f64 / (count - 1) as f64).exp().round() as u64;
        let lo = out.last().map_or(1, |&p| p + 1);
        let hi = total - (count - 1 - k) as u64;
        out.push(ideal.clamp(lo, hi));
    }
    out
}

pub struct Trainer {
    config: TrainConfig,
    data: Array2<f64>,
    model: RbmModel,
    update: u64,
    chains: Option<ChainEnsemble>,
    perm: Vec<usize>,
    perm_epoch: Option<u64>,
}

impl Trainer {
    /// `data` holds one sample per row in the model's spin convention.
    pub fn new(data: Array2<f64>, model: RbmModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        if data.nrows() == 0 {
            return Err(invalid("empty dataset"));
        }
        if data.ncols() != model.n_visible() {
            return Err(dim(format!(
                "dataset has {} columns, model has {} visible units",
                data.ncols(),
                model.n_visible()
            )));
        }
        if !data.iter().all(|&x| model.convention.is_valid(x)) {
            return Err(invalid("dataset convention does not match the model"));
        }
        let chains = match config.scheme {
            Scheme::Pcd(_) => {
                Some(ChainEnsemble::random(&model, config.chains(), derive_seed(config.seed, PURPOSE_PCD, 0)))
            }
            _ => None,
        };
        Ok(Trainer { config, data, model, update: 0, chains, perm: Vec::new(), perm_epoch: None })
    }

    pub fn resume(data: Array2<f64>, checkpoint: Checkpoint, config: TrainConfig) -> Result<Self> {
        let mut t = Trainer::new(data, checkpoint.model, config)?;
        t.update = checkpoint.update_index;
        if matches!(t.config.scheme, Scheme::Pcd(_)) {
            let chains = checkpoint.chains.ok_or_else(|| invalid("PCD checkpoint has no persistent chains"))?;
            chains.validate(&t.model)?;
            t.chains = Some(chains);
        }
        Ok(t)
    }

    pub fn model(&self) -> &RbmModel {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn update_index(&self) -> u64 {
        self.update
    }

    pub fn chains(&self) -> Option<&ChainEnsemble> {
        self.chains.as_ref()
    }

    pub fn batches_per_epoch(&self) -> u64 {
        self.data.nrows().div_ceil(self.config.minibatch_size) as u64
    }

    pub fn total_updates(&self) -> u64 {
        self.batches_per_epoch() * self.config.epochs as u64
    }

    pub fn epoch(&self) -> f64 {
        self.update as f64 / self.batches_per_epoch() as f64
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            update_index: self.update,
            epoch: self.epoch(),
            chains: self.chains.clone(),
        }
    }

    fn batch(&mut self) -> Array2<f64> {
        let bpe = self.batches_per_epoch();
        let epoch = self.update / bpe;
        if self.perm_epoch != Some(epoch) {
            let mut rng = stream_rng(derive_seed(self.config.seed, PURPOSE_PERM, 0), epoch);
            self.perm = (0..self.data.nrows()).collect();
            self.perm.shuffle(&mut rng);
            self.perm_epoch = Some(epoch);
        }
        let pos = (self.update % bpe) as usize * self.config.minibatch_size;
        let end = (pos + self.config.minibatch_size).min(self.data.nrows());
        self.data.select(Axis(0), &self.perm[pos..end])
    }

    /// One gradient update. On a non-finite result the model is left unchanged
    /// and an error is returned.
    pub fn step(&mut self) -> Result<StepReport> {
        let batch = self.batch();
        let seed = derive_seed(self.config.seed, PURPOSE_CHAINS, self.update);
        let mut next_chains = None;
        let grad = match self.config.scheme {
            Scheme::Exact => gradient_estimate(&self.model, batch.view(), None)?,
            Scheme::Pcd(k) => {
                let mut ens = self.chains.clone().expect("PCD trainer holds chains");
                gibbs_sweep(&self.model, &mut ens, k);
                let g = gradient_estimate(&self.model, batch.view(), Some(ens.visible.view()))?;
                next_chains = Some(ens);
                g
            }
            Scheme::Cd(k) => {
                let mut ens = ChainEnsemble::from_visible(&self.model, batch.clone(), seed)?;
                gibbs_sweep(&self.model, &mut ens, k);
                gradient_estimate(&self.model, batch.view(), Some(ens.visible.view()))?
            }
            Scheme::Rdm(k) => {
                let mut ens = ChainEnsemble::random(&self.model, self.config.chains(), seed);
                gibbs_sweep(&self.model, &mut ens, k);
                gradient_estimate(&self.model, batch.view(), Some(ens.visible.view()))?
            }
        };
        let grad_norm = grad.norm();
        let model = self.apply(&grad);
        if let Err(e) = model.validate() {
            return Err(Error::Numerical(format!("update {} produced invalid parameters: {e}", self.update + 1)));
        }
        self.model = model;
        if next_chains.is_some() {
            self.chains = next_chains;
        }
        self.update += 1;
        Ok(StepReport { update: self.update, epoch: self.epoch(), grad_norm })
    }

    fn apply(&self, g: &Gradient) -> RbmModel {
        let eps = self.config.learning_rate;
        let mut m = self.model.clone();
        match self.config.parametrization {
            Parametrization::Full => {
                m.weights.scaled_add(eps, &g.w);
                if self.config.learn_biases {
                    m.hidden_bias.scaled_add(eps, &g.c);
                }
            }
            Parametrization::SharedHidden => {
                let nh = m.n_hidden() as f64;
                let gw = g.w.mean_axis(Axis(1)).expect("hidden units");
                for mut col in m.weights.axis_iter_mut(Axis(1)) {
                    col.scaled_add(eps / nh, &gw);
                }
                if self.config.learn_biases {
                    let gc = g.c.mean().unwrap_or(0.0);
                    m.hidden_bias.mapv_inplace(|c| c + eps * gc);
                }
            }
        }
        if self.config.learn_biases {
            m.visible_bias.scaled_add(eps, &g.b);
        }
        m
    }

    /// Runs until `total_updates`, calling `on_checkpoint` at every scheduled
    /// update index and `on_step` after every update.
    pub fn run<C, S>(&mut self, on_checkpoint: C, on_step: S) -> Result<()>
    where
        C: FnMut(&Checkpoint) -> Result<()>,
        S: FnMut(&StepReport),
    {
        self.run_until(self.total_updates(), on_checkpoint, on_step)
    }

    /// Like [`Trainer::run`] but stops once `stop` updates have been made.
    pub fn run_until<C, S>(&mut self, stop: u64, mut on_checkpoint: C, mut on_step: S) -> Result<()>
    where
        C: FnMut(&Checkpoint) -> Result<()>,
        S: FnMut(&StepReport),
    {
        let total = self.total_updates();
        let schedule = checkpoint_schedule(total, self.config.checkpoint_count);
        let mut next = schedule.partition_point(|&u| u <= self.update);
        while self.update < total.min(stop) {
            let report = self.step()?;
            on_step(&report);
            if next < schedule.len() && schedule[next] == self.update {
                on_checkpoint(&self.checkpoint())?;
                next += 1;
            }
        }
        Ok(())
    }
}
