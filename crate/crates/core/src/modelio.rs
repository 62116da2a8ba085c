//! Little-endian binary and JSON serialization of models.
//!
//! Binary layout: magic `RBMC`, version u32, N_v u32, N_h u32, convention u8,
//! hidden kind u8, variance f64, then row-major W, b and c as f64.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spin::{HiddenKind, RbmModel, SpinConvention};

pub const MODEL_MAGIC: &[u8; 4] = b"RBMC";
pub const MODEL_VERSION: u32 = 1;

pub(crate) fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("file truncated while reading {what}")),
        _ => Error::Io(e),
    })
}

pub(crate) fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or_truncated(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u8<R: Read>(r: &mut R, what: &str) -> Result<u8> {
    let mut b = [0u8; 1];
    read_exact_or_truncated(r, &mut b, what)?;
    Ok(b[0])
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    read_exact_or_truncated(r, &mut buf, what)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

pub(crate) fn write_f64s<W: Write>(w: &mut W, xs: impl IntoIterator<Item = f64>) -> Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn expect_eof<R: Read>(r: &mut R) -> Result<()> {
    let mut b = [0u8; 1];
    match r.read(&mut b)? {
        0 => Ok(()),
        _ => Err(Error::Format("unexpected trailing bytes".into())),
    }
}

pub fn write_model<W: Write>(model: &RbmModel, w: &mut W) -> Result<()> {
    model.validate()?;
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&MODEL_VERSION.to_le_bytes())?;
    w.write_all(&(model.n_visible() as u32).to_le_bytes())?;
    w.write_all(&(model.n_hidden() as u32).to_le_bytes())?;
    w.write_all(&[model.convention.code()])?;
    let (kind, variance) = match model.hidden_kind {
        HiddenKind::Binary => (0u8, 0.0),
        HiddenKind::Gaussian { variance } => (1u8, variance),
    };
    w.write_all(&[kind])?;
    w.write_all(&variance.to_le_bytes())?;
    write_f64s(w, model.weights.iter().copied())?;
    write_f64s(w, model.visible_bias.iter().copied())?;
    write_f64s(w, model.hidden_bias.iter().copied())?;
    Ok(())
}

/// Reads one model; the stream may continue afterwards.
pub fn read_model<R: Read>(r: &mut R) -> Result<RbmModel> {
    let mut magic = [0u8; 4];
    read_exact_or_truncated(r, &mut magic, "magic")?;
    if &magic != MODEL_MAGIC {
        return Err(Error::Format("not a model file (bad magic)".into()));
    }
    let version = read_u32(r, "version")?;
    if version != MODEL_VERSION {
        return Err(Error::Format(format!("unsupported model version {version}")));
    }
    let nv = read_u32(r, "N_v")? as usize;
    let nh = read_u32(r, "N_h")? as usize;
    let convention = SpinConvention::from_code(read_u8(r, "convention")?)
        .ok_or_else(|| Error::Format("unknown spin convention code".into()))?;
    let kind = read_u8(r, "hidden kind")?;
    let variance = read_f64s(r, 1, "variance")?[0];
    let hidden_kind = match kind {
        0 => HiddenKind::Binary,
        1 => HiddenKind::Gaussian { variance },
        k => return Err(Error::Format(format!("unknown hidden kind code {k}"))),
    };
    let weights = Array2::from_shape_vec((nv, nh), read_f64s(r, nv * nh, "weights")?)
        .map_err(|e| Error::Format(e.to_string()))?;
    let visible_bias = Array1::from(read_f64s(r, nv, "visible bias")?);
    let hidden_bias = Array1::from(read_f64s(r, nh, "hidden bias")?);
    RbmModel::new(weights, visible_bias, hidden_bias, convention, hidden_kind)
}

pub fn save_model(path: &Path, model: &RbmModel) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<RbmModel> {
    let mut r = BufReader::new(File::open(path)?);
    let m = read_model(&mut r)?;
    expect_eof(&mut r)?;
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelJson {
    pub n_visible: usize,
    pub n_hidden: usize,
    pub convention: SpinConvention,
    pub hidden_kind: HiddenKind,
    pub weights: Vec<Vec<f64>>,
    pub visible_bias: Vec<f64>,
    pub hidden_bias: Vec<f64>,
}

impl From<&RbmModel> for ModelJson {
    fn from(m: &RbmModel) -> Self {
        ModelJson {
            n_visible: m.n_visible(),
            n_hidden: m.n_hidden(),
            convention: m.convention,
            hidden_kind: m.hidden_kind,
            weights: m.weights.outer_iter().map(|r| r.to_vec()).collect(),
            visible_bias: m.visible_bias.to_vec(),
            hidden_bias: m.hidden_bias.to_vec(),
        }
    }
}

impl ModelJson {
    pub fn into_model(self) -> Result<RbmModel> {
        if self.weights.len() != self.n_visible || self.weights.iter().any(|r| r.len() != self.n_hidden) {
            return Err(Error::Format("weight rows do not match the declared shape".into()));
        }
        let flat: Vec<f64> = self.weights.into_iter().flatten().collect();
        let w =
            Array2::from_shape_vec((self.n_visible, self.n_hidden), flat).map_err(|e| Error::Format(e.to_string()))?;
        RbmModel::new(
            w,
            Array1::from(self.visible_bias),
            Array1::from(self.hidden_bias),
            self.convention,
            self.hidden_kind,
        )
    }
}

pub fn model_to_json(model: &RbmModel) -> String {
    serde_json::to_string_pretty(&ModelJson::from(model)).expect("model serializes")
}

pub fn model_from_json(s: &str) -> Result<RbmModel> {
    let j: ModelJson = serde_json::from_str(s).map_err(|e| Error::Format(e.to_string()))?;
    j.into_model()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample() -> RbmModel {
        let mut m = RbmModel::zeros(3, 2, SpinConvention::IsingPM1, HiddenKind::Gaussian { variance: 0.25 });
        m.weights = array![[0.1, -2.5], [1e-300, 3.0], [f64::MIN_POSITIVE, -0.0]];
        m.visible_bias = array![1.0, 2.0, 3.0];
        m.hidden_bias = array![-1.0, 0.5];
        m
    }

    #[test]
    fn binary_round_trip_is_bit_exact() {
        let m = sample();
        let mut buf = Vec::new();
        write_model(&m, &mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 12 + 2 + 8 + 8 * (6 + 3 + 2));
        assert_eq!(&buf[..4], b"RBMC");
        let back = read_model(&mut buf.as_slice()).unwrap();
        let bits = |m: &RbmModel| m.weights.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&m), bits(&back));
        assert_eq!(m, back);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut buf = Vec::new();
        write_model(&sample(), &mut buf).unwrap();
        buf.pop();
        assert!(matches!(read_model(&mut buf.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn json_round_trip() {
        let m = sample();
        assert_eq!(model_from_json(&model_to_json(&m)).unwrap(), m);
    }
}
