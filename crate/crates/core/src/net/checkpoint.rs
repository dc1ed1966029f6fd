//! `.milc` checkpoints (little-endian):
//!
//! ```text
//! magic "MILC" | version u32 | n_widths u32 | widths u32 x n
//! dropout f32 | bn_momentum f32 | bn_group u32
//! per hidden layer: W (out x in, row-major), b, gamma, beta, running mean, running var
//! W_out, b_out
//! ```
//! All arrays are f32.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{ClassifierParams, HiddenLayer, NetConfig};
use crate::error::{Error, Result};

pub const MILC_MAGIC: [u8; 4] = *b"MILC";
pub const MILC_VERSION: u32 = 1;

pub fn encode_checkpoint(params: &ClassifierParams<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MILC_MAGIC);
    out.extend_from_slice(&MILC_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.widths.len() as u32).to_le_bytes());
    for &w in &params.widths {
        out.extend_from_slice(&(w as u32).to_le_bytes());
    }
    out.extend_from_slice(&params.dropout.to_le_bytes());
    out.extend_from_slice(&params.bn_momentum.to_le_bytes());
    out.extend_from_slice(&params.bn_group.to_le_bytes());
    for t in params.tensors() {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                what,
                expected: (self.pos + n) as u64,
                found: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &'static str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4, "arrays")?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<ClassifierParams<f32>> {
    let mut r = Reader { bytes, pos: 0, path };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != MILC_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: MILC_MAGIC,
            found: magic,
        });
    }
    let version = r.u32("header")?;
    if version != MILC_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    let n = r.u32("header")? as usize;
    if n > 64 {
        return Err(Error::Shape(format!("implausible layer count {n}")));
    }
    let widths = (0..n)
        .map(|_| r.u32("header").map(|w| w as usize))
        .collect::<Result<Vec<_>>>()?;
    let config = NetConfig {
        widths,
        dropout: r.f32("header")?,
        bn_momentum: r.f32("header")?,
    };
    config
        .validate()
        .map_err(|e| Error::Shape(format!("bad checkpoint header: {e}")))?;
    let bn_group = r.u32("header")?;

    let w = &config.widths;
    let mut hidden = Vec::with_capacity(w.len() - 2);
    for k in 0..w.len() - 2 {
        let (fan_in, fan_out) = (w[k], w[k + 1]);
        let weight = Array2::from_shape_vec((fan_out, fan_in), r.vec(fan_out * fan_in)?).unwrap();
        let mut vecs = (0..5)
            .map(|_| r.vec(fan_out).map(Array1::from))
            .collect::<Result<Vec<_>>>()?
            .into_iter();
        hidden.push(HiddenLayer {
            weight,
            bias: vecs.next().unwrap(),
            gamma: vecs.next().unwrap(),
            beta: vecs.next().unwrap(),
            running_mean: vecs.next().unwrap(),
            running_var: vecs.next().unwrap(),
        });
    }
    let last = w[w.len() - 2];
    let out_weight = Array2::from_shape_vec((1, last), r.vec(last)?).unwrap();
    let out_bias = Array1::from(r.vec(1)?);
    if r.pos != bytes.len() {
        return Err(Error::TrailingBytes {
            path: path.to_path_buf(),
            found: (bytes.len() - r.pos) as u64,
        });
    }
    let params = ClassifierParams {
        widths: config.widths.clone(),
        hidden,
        out_weight,
        out_bias,
        dropout: config.dropout,
        bn_momentum: config.bn_momentum,
        bn_group,
        version: 0,
    };
    for (i, t) in params.tensors().iter().enumerate() {
        if let Some(pos) = t.iter().position(|v| !v.is_finite()) {
            return Err(Error::Shape(format!(
                "tensor {i} holds non-finite value {} at {pos}",
                t[pos]
            )));
        }
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ClassifierParams<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ClassifierParams<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

/// Loads and checks the layer widths against what the caller expects.
pub fn load_checkpoint_expecting(path: impl AsRef<Path>, widths: &[usize]) -> Result<ClassifierParams<f32>> {
    let params = load_checkpoint(path.as_ref())?;
    if params.widths != widths {
        return Err(Error::Shape(format!(
            "{}: checkpoint widths {:?}, expected {:?}",
            path.as_ref().display(),
            params.widths,
            widths
        )));
    }
    Ok(params)
}
