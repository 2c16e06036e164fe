//! GAMS checkpoint files.
//!
//! Layout (little-endian): magic `GAMS`, u32 version = 1, u32 tensor_count,
//! then per tensor: u16 name_len, UTF-8 name, u8 dtype (0 f32, 1 f64),
//! u8 rank, rank × u32 extents, row-major payload.

use std::collections::BTreeSet;
use std::path::Path;

use crate::binio::Reader;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::{dtype_width, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GAMS";
pub const VERSION: u32 = 1;

/// A decoded tensor; values are widened to f64, which is exact for f32.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub dtype: u8,
    pub value: Tensor<f64>,
}

pub fn encode<'a, T: Scalar>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>) -> Vec<u8> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE);
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Vec<StoredTensor>> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let count = r.u32("tensor_count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let at = r.pos();
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Parse {
                offset: at,
                msg: "name is not UTF-8".into(),
            })?
            .to_string();
        let at = r.pos();
        let dtype = r.u8("dtype")?;
        let width = dtype_width(dtype).ok_or_else(|| Error::Parse {
            offset: at,
            msg: format!("unknown dtype {dtype}"),
        })?;
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let start = r.pos();
        let bytes = shape
            .iter()
            .try_fold(width, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Parse {
                offset: start,
                msg: format!("payload of {name} overflows"),
            })?;
        let raw = r.take(bytes, "payload")?;
        let data: Vec<f64> = if dtype == 0 {
            raw.chunks_exact(4).map(|c| f32::read_le(c) as f64).collect()
        } else {
            raw.chunks_exact(8).map(f64::read_le).collect()
        };
        if let Some(k) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parse {
                offset: start + k * width,
                msg: format!("non-finite value in {name}"),
            });
        }
        out.push(StoredTensor {
            name,
            dtype,
            value: Tensor::new(&shape, data)?,
        });
    }
    r.finish()?;
    Ok(out)
}

pub fn encode_store<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    encode(store.iter().map(|(_, p)| (p.name.as_str(), &p.value)))
}

pub fn save_checkpoint<T: Scalar>(store: &ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_store(store))?;
    Ok(())
}

/// Replaces every parameter value from decoded tensors. The name sets must
/// match exactly and shapes must agree.
pub fn load_into<T: Scalar>(store: &mut ParamStore<T>, tensors: &[StoredTensor]) -> Result<()> {
    let have: BTreeSet<&str> = tensors.iter().map(|t| t.name.as_str()).collect();
    let want: BTreeSet<&str> = store.names().collect();
    if have.len() != tensors.len() {
        return Err(Error::Compat("checkpoint contains duplicate tensor names".into()));
    }
    if have != want {
        let missing: Vec<_> = want.difference(&have).take(5).collect();
        let extra: Vec<_> = have.difference(&want).take(5).collect();
        return Err(Error::Compat(format!(
            "parameter names differ (missing {missing:?}, unexpected {extra:?})"
        )));
    }
    for t in tensors {
        let id = store.id(&t.name).expect("name sets are equal");
        let p = store.get_mut(id);
        if p.value.shape() != t.value.shape() {
            return Err(Error::Compat(format!(
                "{}: checkpoint shape {:?} vs model shape {:?}",
                t.name,
                t.value.shape(),
                p.value.shape()
            )));
        }
        p.value = t.value.cast();
    }
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(store: &mut ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    let tensors = decode(&std::fs::read(path)?)?;
    load_into(store, &tensors)
}
