//! Experiment configuration: a TOML file with one section per stage.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataio::{load_dataset, Dataset, DatasetFormat};
use crate::error::{invalid, Result};
use crate::hysteresis::LoopProtocol;
use crate::spectra::{RelaxConfig, ScanConfig};
use crate::spin::{HiddenKind, SpinConvention};
use crate::synth::{
    build_correlated_patterns, sample_hopfield_pair, sample_mattis, solve_pair_magnetizations, MattisSpec, SampleMode,
};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Master seed; every section's seed is derived from it.
    pub seed: u64,
    /// Worker threads; 0 means all cores.
    pub workers: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { seed: 0, workers: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Mattis,
    Pair,
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatternKind {
    Random,
    Ones,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    MeanField,
    Mcmc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    pub n_visible: usize,
    pub n_samples: usize,
    pub beta: f64,
    /// Pattern correlation for the pair source.
    pub kappa: f64,
    pub pattern: PatternKind,
    pub sampler: SamplerKind,
    pub mcmc_sweeps_per_sample: usize,
    pub mcmc_burn_in: usize,
    /// Input file for the file source.
    pub path: Option<String>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: DataSource::Mattis,
            n_visible: 400,
            n_samples: 10_000,
            beta: 1.4,
            kappa: 0.5,
            pattern: PatternKind::Random,
            sampler: SamplerKind::MeanField,
            mcmc_sweeps_per_sample: 10,
            mcmc_burn_in: 100,
            path: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HiddenChoice {
    Binary,
    /// Gaussian units with variance `1 / N_v`.
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_hidden: usize,
    pub hidden: HiddenChoice,
    pub convention: SpinConvention,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { n_hidden: 100, hidden: HiddenChoice::Binary, convention: SpinConvention::Binary01 }
    }
}

impl ModelSection {
    pub fn hidden_kind(&self, n_visible: usize) -> HiddenKind {
        match self.hidden {
            HiddenChoice::Binary => HiddenKind::Binary,
            HiddenChoice::Gaussian => HiddenKind::Gaussian { variance: 1.0 / n_visible as f64 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TheoryKind {
    /// Gaussian-hidden machine on Mattis data.
    Bg,
    /// Shared-weight binary machine on Mattis data.
    Bb,
    /// Two Gaussian hidden units on correlated-pattern data.
    Pair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheorySection {
    pub kind: TheoryKind,
    pub t_max: f64,
    pub dt: f64,
    /// Learning rate used to convert time to update counts.
    pub epsilon: f64,
    /// `N_h / N_v` for the shared-weight machine.
    pub alpha: f64,
    /// Initial weights are uniform in `(-s, s) / sqrt(N_v)`.
    pub init_scale: f64,
    pub record_every: usize,
}

impl Default for TheorySection {
    fn default() -> Self {
        TheorySection {
            kind: TheoryKind::Bg,
            t_max: 20.0,
            dt: 0.01,
            epsilon: 0.01,
            alpha: 1.0,
            init_scale: 1e-3,
            record_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub scan: ScanConfig,
    pub hysteresis: LoopProtocol,
    pub relax: RelaxConfig,
    pub theory: TheorySection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut cfg = ExperimentConfig {
            run: RunSection::default(),
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            scan: ScanConfig::default(),
            hysteresis: LoopProtocol::default(),
            relax: RelaxConfig::default(),
            theory: TheorySection::default(),
        };
        cfg.set_seed(0);
        cfg
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| invalid(format!("config: {e}")))?;
        cfg.set_seed(cfg.run.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Sets the master seed and the per-section seeds derived from it.
    pub fn set_seed(&mut self, seed: u64) {
        self.run.seed = seed;
        self.train.seed = seed;
        self.scan.seed = seed.wrapping_add(1);
        self.hysteresis.seed = seed.wrapping_add(2);
        self.relax.seed = seed.wrapping_add(3);
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.source != DataSource::File && (d.n_visible == 0 || d.n_samples == 0) {
            return Err(invalid("data.n_visible and data.n_samples must be positive"));
        }
        if d.source == DataSource::Pair && !(d.kappa > 0.0 && d.kappa < 1.0) {
            return Err(invalid(format!("data.kappa must lie in (0, 1), got {}", d.kappa)));
        }
        if d.source != DataSource::File && !(d.beta > 0.0 && d.beta.is_finite()) {
            return Err(invalid(format!("data.beta must be positive, got {}", d.beta)));
        }
        if d.source == DataSource::File && d.path.is_none() {
            return Err(invalid("data.source = \"file\" needs data.path"));
        }
        if self.model.n_hidden == 0 {
            return Err(invalid("model.n_hidden must be positive"));
        }
        self.train.validate()
    }

    fn sample_mode(&self) -> SampleMode {
        match self.data.sampler {
            SamplerKind::MeanField => SampleMode::MeanField,
            SamplerKind::Mcmc => SampleMode::Mcmc {
                sweeps_per_sample: self.data.mcmc_sweeps_per_sample,
                burn_in: self.data.mcmc_burn_in,
            },
        }
    }

    /// Builds the dataset and a JSON description of its source.
    pub fn generate_data(&self) -> Result<(Dataset, serde_json::Value)> {
        let d = &self.data;
        let mut rng = ChaCha8Rng::seed_from_u64(self.run.seed);
        match d.source {
            DataSource::Mattis => {
                let spec = match d.pattern {
                    PatternKind::Random => MattisSpec::random(d.n_visible, d.beta, &mut rng)?,
                    PatternKind::Ones => MattisSpec::curie_weiss(d.n_visible, d.beta)?,
                };
                let samples = sample_mattis(&spec, d.n_samples, self.sample_mode(), &mut rng)?;
                let teacher = json!({
                    "kind": "mattis",
                    "beta": spec.beta,
                    "m": spec.magnetization(),
                    "xi": spec.xi,
                });
                Ok((Dataset::from_spins(samples.view()), teacher))
            }
            DataSource::Pair => {
                let sol = solve_pair_magnetizations(d.beta, d.kappa)?;
                let spec = match d.pattern {
                    PatternKind::Random => build_correlated_patterns(d.n_visible, d.beta, d.kappa, &mut rng)?,
                    PatternKind::Ones => crate::synth::aligned_correlated_patterns(d.n_visible, d.beta, d.kappa)?,
                };
                let samples = sample_hopfield_pair(&spec, d.n_samples, self.sample_mode(), &mut rng)?;
                let teacher = json!({
                    "kind": "pair",
                    "beta": spec.beta,
                    "kappa": spec.kappa,
                    "m_plus": sol.m_plus,
                    "m_minus": sol.m_minus,
                    "r": sol.r,
                    "p": sol.p,
                    "eta1": spec.eta1,
                    "eta2": spec.eta2,
                });
                Ok((Dataset::from_spins(samples.view()), teacher))
            }
            DataSource::File => {
                let path = std::path::PathBuf::from(d.path.as_deref().expect("validated"));
                let ds = load_dataset(&path, DatasetFormat::from_path(&path))?;
                Ok((ds, json!({ "kind": "file", "path": path.display().to_string() })))
            }
        }
    }
}
