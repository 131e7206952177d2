//! Binary checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! magic   b"NLCK"
//! version u32 (= 1)
//! count   u32
//! count × { name_len u32, name utf-8, ndim u32, dims u64 × ndim, data f64 × Π dims }
//! ```
//!
//! A model checkpoint holds every learnable tensor plus the running mean and
//! variance of each batch-norm state.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{Layer, Model};

pub const MAGIC: &[u8; 4] = b"NLCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: Vec<f64>,
}

pub fn encode(blobs: &[Blob]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
    for b in blobs {
        out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
        out.extend_from_slice(b.name.as_bytes());
        out.extend_from_slice(&(b.dims.len() as u32).to_le_bytes());
        for d in &b.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &b.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format_err(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn format_err(reason: String) -> Error {
    Error::Format {
        file: "<checkpoint>".into(),
        reason,
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Blob>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(format_err("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut blobs = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| format_err("blob name is not utf-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let dims = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(usize::try_from(d).ok()?))
            .ok_or_else(|| format_err(format!("blob `{name}` is too large")))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| format_err("blob too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        blobs.push(Blob { name, dims, data });
    }
    if r.pos != bytes.len() {
        return Err(format_err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(blobs)
}

/// Parameter tensors and batch-norm running statistics of a model.
pub fn model_blobs(model: &Model) -> Vec<Blob> {
    let mut blobs = Vec::new();
    let mut push = |name: String, dims: &[usize], data: &[f64]| {
        blobs.push(Blob {
            name,
            dims: dims.iter().map(|&d| d as u64).collect(),
            data: data.to_vec(),
        })
    };
    for (i, layer) in model.layers.iter().enumerate() {
        match layer {
            Layer::Conv(c) => {
                let dims = [c.out_channels, c.in_channels, 3, 3];
                push(format!("layer{i}.conv.weight"), &dims, &c.weight);
                push(format!("layer{i}.conv.bias"), &[c.out_channels], &c.bias);
            }
            Layer::Linear(l) => {
                let dims = [l.out_features, l.in_features];
                push(format!("layer{i}.linear.weight"), &dims, &l.weight);
                push(format!("layer{i}.linear.bias"), &[l.out_features], &l.bias);
            }
            Layer::Norm(n) => {
                let a = n.affine();
                push(format!("layer{i}.norm.gamma"), &[a.gamma.len()], &a.gamma);
                push(format!("layer{i}.norm.beta"), &[a.beta.len()], &a.beta);
                if let Some(l) = n.lambda() {
                    push(format!("layer{i}.norm.lambda"), &[], &[l]);
                }
                if let Some(bn) = n.batch_state() {
                    let c = [bn.channels()];
                    push(format!("layer{i}.norm.running_mean"), &c, &bn.running_mean);
                    push(format!("layer{i}.norm.running_var"), &c, &bn.running_var);
                }
            }
            _ => {}
        }
    }
    blobs
}

/// Copies blobs into a model of the same architecture. Every tensor the
/// model owns must be present with matching dimensions.
pub fn restore_model(model: &mut Model, blobs: &[Blob]) -> Result<()> {
    let expected = model_blobs(model);
    if expected.len() != blobs.len() {
        return Err(Error::Input(format!(
            "checkpoint has {} tensors, model expects {}",
            blobs.len(),
            expected.len()
        )));
    }
    for (e, b) in expected.iter().zip(blobs) {
        if e.name != b.name || e.dims != b.dims {
            return Err(Error::Input(format!(
                "checkpoint tensor `{}` {:?} does not match model tensor `{}` {:?}",
                b.name, b.dims, e.name, e.dims
            )));
        }
    }
    let mut it = blobs.iter();
    let mut next = || &it.next().expect("counted above").data;
    for layer in &mut model.layers {
        match layer {
            Layer::Conv(c) => {
                c.weight.copy_from_slice(next());
                c.bias.copy_from_slice(next());
            }
            Layer::Linear(l) => {
                l.weight.copy_from_slice(next());
                l.bias.copy_from_slice(next());
            }
            Layer::Norm(n) => {
                n.affine_mut().gamma.copy_from_slice(next());
                n.affine_mut().beta.copy_from_slice(next());
                if let Some(l) = n.lambda_mut() {
                    *l = next()[0];
                }
                if let Some(bn) = n.batch_state_mut() {
                    bn.running_mean.copy_from_slice(next());
                    bn.running_var.copy_from_slice(next());
                }
            }
            _ => {}
        }
    }
    Ok(())
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(&model_blobs(model))).map_err(|e| Error::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

pub fn load_into(model: &mut Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let blobs = decode(&bytes).map_err(|e| match e {
        Error::Format { reason, .. } => Error::Format {
            file: path.display().to_string(),
            reason,
        },
        other => other,
    })?;
    restore_model(model, &blobs)
}
