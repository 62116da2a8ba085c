//! Parallel block-Gibbs chains with one counter-based RNG stream per chain.

use std::collections::hash_map::DefaultHasher;
use std::fs::File;
use std::hash::{Hash, Hasher};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{linalg::general_mat_mul, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim, invalid, Error, Result};
use crate::modelio::{expect_eof, read_exact_or_truncated, read_f64s, read_u32, write_f64s};
use crate::spin::{HiddenKind, RbmModel, SpinConvention};

/// Chains are processed in fixed-size blocks so results do not depend on the worker count.
pub const BLOCK: usize = 64;

/// Full generator state: key, stream id and position in the keystream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }

    pub fn to_bytes(&self) -> [u8; 56] {
        let mut out = [0u8; 56];
        out[..32].copy_from_slice(&self.seed);
        out[32..40].copy_from_slice(&self.stream.to_le_bytes());
        out[40..].copy_from_slice(&self.word_pos.to_le_bytes());
        out
    }

    pub fn from_bytes(b: &[u8; 56]) -> Self {
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&b[..32]);
        RngState {
            seed,
            stream: u64::from_le_bytes(b[32..40].try_into().unwrap()),
            word_pos: u128::from_le_bytes(b[40..].try_into().unwrap()),
        }
    }
}

/// Independent stream `index` derived from a 64-bit seed.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone)]
pub struct ChainEnsemble {
    pub visible: Array2<f64>,
    pub hidden: Array2<f64>,
    rngs: Vec<ChaCha8Rng>,
}

impl ChainEnsemble {
    /// Uniformly random visible states; hidden states drawn from their conditional.
    pub fn random(model: &RbmModel, n_chains: usize, seed: u64) -> Self {
        let mut rngs: Vec<ChaCha8Rng> = (0..n_chains as u64).map(|i| stream_rng(seed, i)).collect();
        let conv = model.convention;
        let mut visible = Array2::zeros((n_chains, model.n_visible()));
        for (mut row, rng) in visible.axis_iter_mut(Axis(0)).zip(rngs.iter_mut()) {
            row.mapv_inplace(|_| conv.from_bit(rng.random::<bool>()));
        }
        Self::with_hidden(model, visible, rngs)
    }

    /// Chains started from given visible states.
    pub fn from_visible(model: &RbmModel, visible: Array2<f64>, seed: u64) -> Result<Self> {
        if visible.ncols() != model.n_visible() {
            return Err(dim(format!("chain states have {} columns, model has {}", visible.ncols(), model.n_visible())));
        }
        if !visible.iter().all(|&x| model.convention.is_valid(x)) {
            return Err(invalid("chain state contains a value that is not a valid spin"));
        }
        let rngs = (0..visible.nrows() as u64).map(|i| stream_rng(seed, i)).collect();
        Ok(Self::with_hidden(model, visible, rngs))
    }

    fn with_hidden(model: &RbmModel, visible: Array2<f64>, mut rngs: Vec<ChaCha8Rng>) -> Self {
        let mut hidden = Array2::zeros((visible.nrows(), model.n_hidden()));
        let vc: Vec<_> = visible.axis_chunks_iter(Axis(0), BLOCK).collect();
        let hc: Vec<_> = hidden.axis_chunks_iter_mut(Axis(0), BLOCK).collect();
        let rc: Vec<_> = rngs.chunks_mut(BLOCK).collect();
        vc.into_par_iter().zip(hc).zip(rc).for_each(|((v, mut h), r)| sample_hidden_block(model, v, &mut h, r));
        ChainEnsemble { visible, hidden, rngs }
    }

    pub fn from_parts(visible: Array2<f64>, hidden: Array2<f64>, states: &[RngState]) -> Result<Self> {
        if visible.nrows() != hidden.nrows() || visible.nrows() != states.len() {
            return Err(dim("chain ensemble parts disagree on the number of chains"));
        }
        Ok(ChainEnsemble { visible, hidden, rngs: states.iter().map(RngState::restore).collect() })
    }

    pub fn n_chains(&self) -> usize {
        self.visible.nrows()
    }

    pub fn rng_states(&self) -> Vec<RngState> {
        self.rngs.iter().map(RngState::capture).collect()
    }

    pub fn validate(&self, model: &RbmModel) -> Result<()> {
        if self.visible.ncols() != model.n_visible() || self.hidden.ncols() != model.n_hidden() {
            return Err(dim("chain ensemble does not match model dimensions"));
        }
        if !self.visible.iter().all(|&x| model.convention.is_valid(x)) {
            return Err(invalid("chain visible state is not a valid spin"));
        }
        if model.hidden_kind == HiddenKind::Binary && !self.hidden.iter().all(|&x| model.convention.is_valid(x)) {
            return Err(invalid("chain hidden state is not a valid spin"));
        }
        Ok(())
    }

    /// Redraw every visible state uniformly using each chain's own stream.
    pub fn randomize_visible(&mut self, convention: SpinConvention) {
        for (mut row, rng) in self.visible.axis_iter_mut(Axis(0)).zip(self.rngs.iter_mut()) {
            row.mapv_inplace(|_| convention.from_bit(rng.random::<bool>()));
        }
    }

    pub fn set_visible(&mut self, visible: ArrayView2<f64>) -> Result<()> {
        if visible.dim() != self.visible.dim() {
            return Err(dim("replacement visible states have the wrong shape"));
        }
        self.visible.assign(&visible);
        Ok(())
    }

    /// Apply `f` to every chain's visible row with that chain's RNG.
    pub fn for_each_visible<F>(&mut self, f: F)
    where
        F: Fn(ndarray::ArrayViewMut1<f64>, &mut ChaCha8Rng) + Sync,
    {
        let vc: Vec<_> = self.visible.axis_iter_mut(Axis(0)).collect();
        vc.into_par_iter().zip(self.rngs.par_iter_mut()).for_each(|(row, rng)| f(row, rng));
    }

    /// Hash of states and RNG positions, for persistence checks.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for x in self.visible.iter().chain(self.hidden.iter()) {
            x.to_bits().hash(&mut h);
        }
        for s in self.rng_states() {
            s.hash(&mut h);
        }
        h.finish()
    }
}

fn sample_hidden_block(model: &RbmModel, v: ArrayView2<f64>, h: &mut ArrayViewMut2<f64>, rngs: &mut [ChaCha8Rng]) {
    let mut field = Array2::from_shape_fn((v.nrows(), model.n_hidden()), |(_, a)| model.hidden_bias[a]);
    general_mat_mul(1.0, &v, &model.weights, 1.0, &mut field);
    let conv = model.convention;
    for ((x, mut out), rng) in field.axis_iter(Axis(0)).zip(h.axis_iter_mut(Axis(0))).zip(rngs.iter_mut()) {
        match model.hidden_kind {
            HiddenKind::Binary => {
                for (o, &x) in out.iter_mut().zip(x.iter()) {
                    *o = conv.from_bit(rng.random::<f64>() < conv.p_up(x));
                }
            }
            HiddenKind::Gaussian { variance } => {
                let sd = variance.sqrt();
                for (o, &x) in out.iter_mut().zip(x.iter()) {
                    let z: f64 = rng.sample(StandardNormal);
                    *o = variance * x + sd * z;
                }
            }
        }
    }
}

fn sample_visible_block(model: &RbmModel, h: ArrayView2<f64>, v: &mut ArrayViewMut2<f64>, rngs: &mut [ChaCha8Rng]) {
    let mut field = Array2::from_shape_fn((h.nrows(), model.n_visible()), |(_, i)| model.visible_bias[i]);
    general_mat_mul(1.0, &h, &model.weights.t(), 1.0, &mut field);
    let conv = model.convention;
    for ((x, mut out), rng) in field.axis_iter(Axis(0)).zip(v.axis_iter_mut(Axis(0))).zip(rngs.iter_mut()) {
        for (o, &x) in out.iter_mut().zip(x.iter()) {
            *o = conv.from_bit(rng.random::<f64>() < conv.p_up(x));
        }
    }
}

/// `k` block updates, hidden given visible then visible given hidden, on every chain.
pub fn gibbs_sweep(model: &RbmModel, ens: &mut ChainEnsemble, k: usize) {
    if k == 0 {
        return;
    }
    let vc: Vec<_> = ens.visible.axis_chunks_iter_mut(Axis(0), BLOCK).collect();
    let hc: Vec<_> = ens.hidden.axis_chunks_iter_mut(Axis(0), BLOCK).collect();
    let rc: Vec<_> = ens.rngs.chunks_mut(BLOCK).collect();
    vc.into_par_iter().zip(hc).zip(rc).for_each(|((mut v, mut h), r)| {
        for _ in 0..k {
            sample_hidden_block(model, v.view(), &mut h, r);
            sample_visible_block(model, h.view(), &mut v, r);
        }
    });
}

/// Like [`gibbs_sweep`] but calls `observe` with the visible block after every sweep.
/// The callback receives the global chain offset of the block.
pub fn gibbs_sweep_observed<F>(model: &RbmModel, ens: &mut ChainEnsemble, k: usize, observe: F)
where
    F: Fn(usize, usize, ArrayView2<f64>) + Sync,
{
    let vc: Vec<_> = ens.visible.axis_chunks_iter_mut(Axis(0), BLOCK).collect();
    let hc: Vec<_> = ens.hidden.axis_chunks_iter_mut(Axis(0), BLOCK).collect();
    let rc: Vec<_> = ens.rngs.chunks_mut(BLOCK).collect();
    vc.into_par_iter().zip(hc).zip(rc).enumerate().for_each(|(b, ((mut v, mut h), r))| {
        for t in 0..k {
            sample_hidden_block(model, v.view(), &mut h, r);
            sample_visible_block(model, h.view(), &mut v, r);
            observe(b * BLOCK, t, v.view());
        }
    });
}

/// Conditional hidden means for a batch of visible rows.
pub fn hidden_means(model: &RbmModel, visible: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((visible.nrows(), model.n_hidden()));
    let vc: Vec<_> = visible.axis_chunks_iter(Axis(0), BLOCK).collect();
    let oc: Vec<_> = out.axis_chunks_iter_mut(Axis(0), BLOCK).collect();
    vc.into_par_iter().zip(oc).for_each(|(v, mut o)| {
        o.assign(&model.hidden_bias);
        general_mat_mul(1.0, &v, &model.weights, 1.0, &mut o);
        o.mapv_inplace(|x| model.hidden_mean_of_field(x));
    });
    out
}

/// `a^T b / n` for row-aligned `a` and `b`, summed block by block in a fixed order.
pub fn mean_outer(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let ac: Vec<_> = a.axis_chunks_iter(Axis(0), 4 * BLOCK).collect();
    let bc: Vec<_> = b.axis_chunks_iter(Axis(0), 4 * BLOCK).collect();
    let parts: Vec<Array2<f64>> = ac.into_par_iter().zip(bc).map(|(x, y)| x.t().dot(&y)).collect();
    let mut acc = Array2::zeros((a.ncols(), b.ncols()));
    for p in parts {
        acc += &p;
    }
    if n > 0 {
        acc /= n as f64;
    }
    acc
}

const CHAINS_MAGIC: &[u8; 4] = b"CHNS";

/// Binary layout: magic `CHNS`, u32 n_chains, u32 N_v, u32 N_h, visible and
/// hidden states as row-major f64, then 56 bytes of RNG state per chain.
pub fn write_chains<W: Write>(ens: &ChainEnsemble, w: &mut W) -> Result<()> {
    w.write_all(CHAINS_MAGIC)?;
    for x in [ens.n_chains(), ens.visible.ncols(), ens.hidden.ncols()] {
        w.write_all(&(x as u32).to_le_bytes())?;
    }
    write_f64s(w, ens.visible.iter().copied())?;
    write_f64s(w, ens.hidden.iter().copied())?;
    for s in ens.rng_states() {
        w.write_all(&s.to_bytes())?;
    }
    Ok(())
}

pub fn read_chains<R: Read>(r: &mut R) -> Result<ChainEnsemble> {
    let mut magic = [0u8; 4];
    read_exact_or_truncated(r, &mut magic, "magic")?;
    if &magic != CHAINS_MAGIC {
        return Err(Error::Format("not a chain file (bad magic)".into()));
    }
    let n = read_u32(r, "n_chains")? as usize;
    let nv = read_u32(r, "N_v")? as usize;
    let nh = read_u32(r, "N_h")? as usize;
    let shape = |e: ndarray::ShapeError| Error::Format(e.to_string());
    let visible = Array2::from_shape_vec((n, nv), read_f64s(r, n * nv, "visible states")?).map_err(shape)?;
    let hidden = Array2::from_shape_vec((n, nh), read_f64s(r, n * nh, "hidden states")?).map_err(shape)?;
    let mut states = Vec::with_capacity(n);
    for _ in 0..n {
        let mut b = [0u8; 56];
        read_exact_or_truncated(r, &mut b, "rng state")?;
        states.push(RngState::from_bytes(&b));
    }
    expect_eof(r)?;
    ChainEnsemble::from_parts(visible, hidden, &states)
}

pub fn save_chains(path: &Path, ens: &ChainEnsemble) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_chains(ens, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_chains(path: &Path) -> Result<ChainEnsemble> {
    read_chains(&mut BufReader::new(File::open(path)?))
}
