//! Binary datasets: CSV and bit-packed files, and the size-rescaling rules.
//!
//! Packed layout: magic `DSET`, u32 n_samples, u32 N_v, then each row packed
//! LSB-first into `ceil(N_v / 8)` bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::modelio::{expect_eof, read_exact_or_truncated, read_u32};
use crate::spin::SpinConvention;

pub const DATASET_MAGIC: &[u8; 4] = b"DSET";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    /// One sample per row, entries 0 or 1.
    pub data: Array2<u8>,
    pub shape: Option<(usize, usize)>,
}

impl Dataset {
    pub fn new(data: Array2<u8>) -> Self {
        Dataset { data, shape: None }
    }

    pub fn n_samples(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_visible(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn to_spins(&self, convention: SpinConvention) -> Array2<f64> {
        self.data.mapv(|b| convention.from_bit(b == 1))
    }

    /// Entries equal to 1 become 1, everything else 0.
    pub fn from_spins(spins: ArrayView2<f64>) -> Self {
        Dataset::new(spins.mapv(|x| u8::from(x == 1.0)))
    }

    pub fn manifest(&self, provenance: &str) -> DatasetManifest {
        DatasetManifest {
            n_samples: self.n_samples(),
            n_visible: self.n_visible(),
            height: self.shape.map(|s| s.0),
            width: self.shape.map(|s| s.1),
            provenance: provenance.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n_samples: usize,
    pub n_visible: usize,
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub provenance: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    Csv01,
    Packed,
}

impl DatasetFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => DatasetFormat::Csv01,
            _ => DatasetFormat::Packed,
        }
    }
}

pub fn read_csv01<R: Read>(r: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(r);
    let mut rows: Vec<u8> = Vec::new();
    let mut width: Option<usize> = None;
    let mut n = 0usize;
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(format!("row {row}: {e}")))?;
        match width {
            None => width = Some(rec.len()),
            Some(w) if w != rec.len() => {
                return Err(Error::Format(format!("row {row} has {} entries, expected {w}", rec.len())))
            }
            _ => {}
        }
        for (col, field) in rec.iter().enumerate() {
            match field {
                "0" => rows.push(0),
                "1" => rows.push(1),
                other => return Err(Error::Format(format!("non-binary value {other:?} at row {row}, column {col}"))),
            }
        }
        n += 1;
    }
    let w = width.unwrap_or(0);
    Ok(Dataset::new(Array2::from_shape_vec((n, w), rows).map_err(|e| Error::Format(e.to_string()))?))
}

pub fn write_csv01<W: Write>(ds: &Dataset, w: W) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    for row in ds.data.axis_iter(Axis(0)) {
        wr.write_record(row.iter().map(|b| if *b == 1 { "1" } else { "0" }))
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_packed<W: Write>(ds: &Dataset, w: &mut W) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&(ds.n_samples() as u32).to_le_bytes())?;
    w.write_all(&(ds.n_visible() as u32).to_le_bytes())?;
    let nbytes = ds.n_visible().div_ceil(8);
    for row in ds.data.axis_iter(Axis(0)) {
        let mut packed = vec![0u8; nbytes];
        for (i, &b) in row.iter().enumerate() {
            if b == 1 {
                packed[i / 8] |= 1 << (i % 8);
            }
        }
        w.write_all(&packed)?;
    }
    Ok(())
}

pub fn read_packed<R: Read>(r: &mut R) -> Result<Dataset> {
    let mut magic = [0u8; 4];
    read_exact_or_truncated(r, &mut magic, "magic")?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format("not a packed dataset (bad magic)".into()));
    }
    let n = read_u32(r, "n_samples")? as usize;
    let nv = read_u32(r, "N_v")? as usize;
    let nbytes = nv.div_ceil(8);
    let mut buf = vec![0u8; n * nbytes];
    read_exact_or_truncated(r, &mut buf, "packed rows")?;
    let data = Array2::from_shape_fn((n, nv), |(s, i)| (buf[s * nbytes + i / 8] >> (i % 8)) & 1);
    expect_eof(r)?;
    Ok(Dataset::new(data))
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Dataset> {
    let f = BufReader::new(File::open(path)?);
    match format {
        DatasetFormat::Csv01 => read_csv01(f),
        DatasetFormat::Packed => {
            let mut f = f;
            read_packed(&mut f)
        }
    }
}

pub fn save_dataset(path: &Path, ds: &Dataset, format: DatasetFormat) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    match format {
        DatasetFormat::Csv01 => write_csv01(ds, &mut f)?,
        DatasetFormat::Packed => write_packed(ds, &mut f)?,
    }
    f.flush()?;
    Ok(())
}

/// One-dimensional coarse graining: window of `kernel` sites starting every
/// `stride` sites, output 1 when at least `threshold` sites are set. A window is
/// kept when its first `stride` sites lie inside the sample; sites beyond the end
/// count as 0. This yields `floor(N_v / stride)` outputs (805 -> 402 -> 201).
pub fn rescale_sequence(ds: &Dataset, kernel: usize, threshold: usize, stride: usize) -> Result<Dataset> {
    let nv = ds.n_visible();
    if kernel == 0 || stride == 0 {
        return Err(invalid("kernel and stride must be positive"));
    }
    if nv < kernel {
        return Err(invalid(format!("sequence length {nv} is shorter than the kernel {kernel}")));
    }
    let n_out = nv / stride;
    let data = Array2::from_shape_fn((ds.n_samples(), n_out), |(s, o)| {
        let start = o * stride;
        let end = (start + kernel).min(nv);
        let sum: usize = (start..end).map(|i| ds.data[[s, i]] as usize).sum();
        u8::from(sum >= threshold)
    });
    Ok(Dataset::new(data))
}

/// Bilinear resize with pixel-centre alignment and edge clamping, thresholded at 0.5.
pub fn rescale_image(ds: &Dataset, old_hw: (usize, usize), new_hw: (usize, usize)) -> Result<Dataset> {
    let (oh, ow) = old_hw;
    let (nh, nw) = new_hw;
    if nh == 0 || nw == 0 {
        return Err(invalid("target image dimensions must be positive"));
    }
    if oh * ow != ds.n_visible() || oh == 0 || ow == 0 {
        return Err(invalid(format!("image shape {oh}x{ow} does not match sample length {}", ds.n_visible())));
    }
    let axis = |n_new: usize, n_old: usize| -> Vec<(usize, usize, f64)> {
        (0..n_new)
            .map(|d| {
                let src = ((d as f64 + 0.5) * n_old as f64 / n_new as f64 - 0.5).clamp(0.0, (n_old - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(n_old - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let ys = axis(nh, oh);
    let xs = axis(nw, ow);
    let mut data = Array2::zeros((ds.n_samples(), nh * nw));
    for (s, row) in ds.data.axis_iter(Axis(0)).enumerate() {
        let px = |y: usize, x: usize| row[y * ow + x] as f64;
        for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = px(y0, x0) * (1.0 - fx) + px(y0, x1) * fx;
                let bot = px(y1, x0) * (1.0 - fx) + px(y1, x1) * fx;
                let val = top * (1.0 - fy) + bot * fy;
                data[[s, y * nw + x]] = u8::from(val >= 0.5);
            }
        }
    }
    Ok(Dataset { data, shape: Some((nh, nw)) })
}
