//! Training run directories.
//!
//! Layout: `manifest.json` (written first and rewritten after every checkpoint),
//! `data.dset`, `model0.rbm`, `checkpoints/uNNNNNNNNNNNN.rbm`, `chains.chn` with the
//! persistent chains of the latest checkpoint, and `diagnostics.csv`.

use std::cell::RefCell;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::chains::{load_chains, save_chains};
use crate::dataio::{load_dataset, save_dataset, Dataset, DatasetFormat, DatasetManifest};
use crate::error::{invalid, Error, Result};
use crate::modelio::{load_model, save_model};
use crate::spin::{HiddenKind, RbmModel, SpinConvention};
use crate::train::{Checkpoint, StepReport, TrainConfig, Trainer};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
const DATA_FILE: &str = "data.dset";
const MODEL0_FILE: &str = "model0.rbm";
const CHAINS_FILE: &str = "chains.chn";
const LAST_GOOD_FILE: &str = "last_good.rbm";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub update_index: u64,
    pub epoch: f64,
    /// Relative to the run directory.
    pub model: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub config: TrainConfig,
    pub n_visible: usize,
    pub n_hidden: usize,
    pub convention: SpinConvention,
    pub hidden_kind: HiddenKind,
    pub dataset: DatasetManifest,
    pub total_updates: u64,
    pub batches_per_epoch: u64,
    pub checkpoints: Vec<CheckpointEntry>,
    /// Update index of the chains stored in `chains.chn`.
    pub chains_update: Option<u64>,
    pub complete: bool,
    pub aborted: Option<String>,
    /// Free-form description of the data source, e.g. teacher parameters.
    #[serde(default)]
    pub teacher: Option<serde_json::Value>,
}

pub struct RunDir {
    pub path: PathBuf,
    pub manifest: RunManifest,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = BufWriter::new(File::create(&tmp)?);
        f.write_all(bytes)?;
        f.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn checkpoint_name(update: u64) -> String {
    format!("checkpoints/u{update:012}.rbm")
}

impl RunDir {
    /// Creates a fresh run directory. Fails if a manifest already exists.
    pub fn create(
        path: &Path,
        data: &Dataset,
        provenance: &str,
        model0: &RbmModel,
        config: TrainConfig,
        teacher: Option<serde_json::Value>,
    ) -> Result<RunDir> {
        config.validate()?;
        if path.join(MANIFEST_FILE).exists() {
            return Err(invalid(format!("{} already holds a run; use resume", path.display())));
        }
        fs::create_dir_all(path.join("checkpoints"))?;
        let spins = data.to_spins(model0.convention);
        let probe = Trainer::new(spins, model0.clone(), config.clone())?;
        let manifest = RunManifest {
            format_version: 1,
            config,
            n_visible: model0.n_visible(),
            n_hidden: model0.n_hidden(),
            convention: model0.convention,
            hidden_kind: model0.hidden_kind,
            dataset: data.manifest(provenance),
            total_updates: probe.total_updates(),
            batches_per_epoch: probe.batches_per_epoch(),
            checkpoints: Vec::new(),
            chains_update: None,
            complete: false,
            aborted: None,
            teacher,
        };
        let run = RunDir { path: path.to_path_buf(), manifest };
        run.write_manifest()?;
        save_dataset(&path.join(DATA_FILE), data, DatasetFormat::Packed)?;
        save_model(&path.join(MODEL0_FILE), model0)?;
        File::create(path.join(DIAGNOSTICS_FILE))?.write_all(b"update,epoch,grad_norm\n")?;
        Ok(run)
    }

    pub fn open(path: &Path) -> Result<RunDir> {
        let text = fs::read_to_string(path.join(MANIFEST_FILE))?;
        let manifest: RunManifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let mut ordered = manifest.checkpoints.iter().map(|c| c.update_index).collect::<Vec<_>>();
        ordered.dedup();
        if ordered.len() != manifest.checkpoints.len() || ordered.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Format("manifest checkpoints are not strictly increasing".into()));
        }
        Ok(RunDir { path: path.to_path_buf(), manifest })
    }

    pub fn write_manifest(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        write_atomic(&self.path.join(MANIFEST_FILE), text.as_bytes())
    }

    pub fn dataset(&self) -> Result<Dataset> {
        load_dataset(&self.path.join(DATA_FILE), DatasetFormat::Packed)
    }

    pub fn initial_model(&self) -> Result<RbmModel> {
        load_model(&self.path.join(MODEL0_FILE))
    }

    pub fn n_checkpoints(&self) -> usize {
        self.manifest.checkpoints.len()
    }

    pub fn checkpoint_model(&self, i: usize) -> Result<(u64, RbmModel)> {
        let e = self
            .manifest
            .checkpoints
            .get(i)
            .ok_or_else(|| invalid(format!("checkpoint {i} out of range ({} recorded)", self.n_checkpoints())))?;
        let model = load_model(&self.path.join(&e.model)).map_err(|err| match err {
            Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("checkpoint {i} ({}): {io}", e.model))),
            other => other,
        })?;
        Ok((e.update_index, model))
    }

    fn last_checkpoint(&self) -> Result<Option<Checkpoint>> {
        let Some(last) = self.manifest.checkpoints.last() else {
            return Ok(None);
        };
        let (_, model) = self.checkpoint_model(self.n_checkpoints() - 1)?;
        let chains = if self.manifest.chains_update == Some(last.update_index) {
            Some(load_chains(&self.path.join(CHAINS_FILE))?)
        } else {
            None
        };
        Ok(Some(Checkpoint { model, update_index: last.update_index, epoch: last.epoch, chains }))
    }

    /// Keeps only diagnostics rows up to `update`.
    fn truncate_diagnostics(&self, update: u64) -> Result<()> {
        let path = self.path.join(DIAGNOSTICS_FILE);
        let mut kept = String::new();
        for (i, line) in BufReader::new(File::open(&path)?).lines().enumerate() {
            let line = line?;
            let keep =
                i == 0 || line.split(',').next().and_then(|u| u.parse::<u64>().ok()).is_some_and(|u| u <= update);
            if keep {
                kept.push_str(&line);
                kept.push('\n');
            }
        }
        write_atomic(&path, kept.as_bytes())
    }

    /// Trains from the start or from the latest checkpoint until the configured
    /// number of updates. `progress` sees every step.
    pub fn train<P: FnMut(&StepReport)>(&mut self, progress: P) -> Result<()> {
        self.train_until(u64::MAX, progress)
    }

    /// Stops after update `stop`; work past the last checkpoint is redone on resume.
    pub fn train_until<P: FnMut(&StepReport)>(&mut self, stop: u64, mut progress: P) -> Result<()> {
        if self.manifest.complete {
            return Ok(());
        }
        let data: Array2<f64> = self.dataset()?.to_spins(self.manifest.convention);
        let config = self.manifest.config.clone();
        let mut trainer = match self.last_checkpoint()? {
            Some(ck) => {
                self.truncate_diagnostics(ck.update_index)?;
                Trainer::resume(data, ck, config)?
            }
            None => {
                self.truncate_diagnostics(0)?;
                Trainer::new(data, self.initial_model()?, config)?
            }
        };
        self.manifest.aborted = None;
        let diag_path = self.path.join(DIAGNOSTICS_FILE);
        let diag = RefCell::new(BufWriter::new(OpenOptions::new().append(true).open(&diag_path)?));
        let mut io_err: Option<std::io::Error> = None;
        let path = self.path.clone();
        let manifest = &mut self.manifest;
        let result = trainer.run_until(
            stop,
            |ck| {
                diag.borrow_mut().flush()?;
                let name = checkpoint_name(ck.update_index);
                save_model(&path.join(&name), &ck.model)?;
                if let Some(chains) = &ck.chains {
                    let tmp = path.join("chains.tmp");
                    save_chains(&tmp, chains)?;
                    fs::rename(&tmp, path.join(CHAINS_FILE))?;
                    manifest.chains_update = Some(ck.update_index);
                }
                manifest.checkpoints.push(CheckpointEntry {
                    update_index: ck.update_index,
                    epoch: ck.epoch,
                    model: name,
                });
                let text = serde_json::to_string_pretty(&*manifest).expect("manifest serializes");
                write_atomic(&path.join(MANIFEST_FILE), text.as_bytes())
            },
            |r| {
                if io_err.is_none() {
                    if let Err(e) = writeln!(diag.borrow_mut(), "{},{},{}", r.update, r.epoch, r.grad_norm) {
                        io_err = Some(e);
                    }
                }
                progress(r);
            },
        );
        diag.into_inner().flush()?;
        if let Some(e) = io_err {
            return Err(e.into());
        }
        match result {
            Ok(()) => {
                self.manifest.complete = trainer.update_index() == trainer.total_updates();
                self.write_manifest()
            }
            Err(e @ Error::Numerical(_)) => {
                save_model(&self.path.join(LAST_GOOD_FILE), trainer.model())?;
                self.manifest.aborted = Some(e.to_string());
                self.write_manifest()?;
                Err(e)
            }
            Err(e) => Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::{initial_model, Scheme};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(dir: &Path, epochs: usize) -> RunDir {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = Dataset::new(Array2::from_shape_fn((60, 8), |_| u8::from(rng.random::<bool>())));
        let cfg = TrainConfig {
            scheme: Scheme::Pcd(2),
            learning_rate: 0.05,
            minibatch_size: 20,
            epochs,
            checkpoint_count: 6,
            init_std: Some(0.01),
            seed: 5,
            ..TrainConfig::default()
        };
        let m0 = initial_model(8, 3, SpinConvention::Binary01, HiddenKind::Binary, &cfg).unwrap();
        RunDir::create(dir, &data, "test", &m0, cfg, None).unwrap()
    }

    fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        for sub in [dir.to_path_buf(), dir.join("checkpoints")] {
            let mut names: Vec<_> =
                fs::read_dir(&sub).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_file()).collect();
            names.sort();
            for p in names {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
        out
    }

    #[test]
    fn full_run_writes_ordered_manifest() {
        let tmp = tempfile::tempdir().unwrap();
        let mut run = setup(tmp.path(), 5);
        run.train(|_| {}).unwrap();
        let again = RunDir::open(tmp.path()).unwrap();
        assert!(again.manifest.complete);
        assert_eq!(again.n_checkpoints(), 6);
        assert_eq!(again.manifest.checkpoints[0].update_index, 1);
        assert_eq!(again.manifest.checkpoints[5].update_index, 15);
        let diag = fs::read_to_string(tmp.path().join(DIAGNOSTICS_FILE)).unwrap();
        assert_eq!(diag.lines().count(), 16);
        assert!(RunDir::create(
            tmp.path(),
            &again.dataset().unwrap(),
            "x",
            &again.initial_model().unwrap(),
            again.manifest.config.clone(),
            None
        )
        .is_err());
    }

    #[test]
    fn interrupted_run_resumes_to_identical_bytes() {
        let a = tempfile::tempdir().unwrap();
        setup(a.path(), 5).train(|_| {}).unwrap();
        for stop in [1, 7, 13] {
            let b = tempfile::tempdir().unwrap();
            let mut run = setup(b.path(), 5);
            run.train_until(stop, |_| {}).unwrap();
            let mut seen = 0;
            let mut resumed = RunDir::open(b.path()).unwrap();
            assert!(!resumed.manifest.complete);
            resumed.train(|_| seen += 1).unwrap();
            assert!(seen < 15);
            assert_eq!(snapshot(a.path()), snapshot(b.path()), "stop at {stop}");
        }
    }
}
