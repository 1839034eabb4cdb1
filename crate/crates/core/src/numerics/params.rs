use std::io::{Read, Write};
use std::sync::Arc;

use super::{DType, Scalar, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"T2PW";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Stop-gradient domain a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// The shared item embedding table.
    Embedding,
    /// User-tower networks (session encoder, activation unit, output net).
    Tower,
    /// The diffusion approximator.
    Diffusion,
}

impl ParamGroup {
    /// Group implied by a parameter name prefix.
    pub fn from_name(name: &str) -> Self {
        if name.starts_with("unet.") {
            ParamGroup::Diffusion
        } else if name.starts_with("item_embedding") {
            ParamGroup::Embedding
        } else {
            ParamGroup::Tower
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param<F: Scalar> {
    pub name: String,
    pub group: ParamGroup,
    value: Arc<Tensor<F>>,
}

impl<F: Scalar> Param<F> {
    pub fn value(&self) -> &Tensor<F> {
        &self.value
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F: Scalar> {
    params: Vec<Param<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let group = ParamGroup::from_name(&name);
        self.params.push(Param {
            name,
            group,
            value: Arc::new(value),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub(crate) fn value_arc(&self, id: ParamId) -> &Arc<Tensor<F>> {
        &self.params[id.0].value
    }

    /// Mutable access; copies the tensor if a graph still shares it.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<F>) -> Result<()> {
        let current = self.value(id);
        if current.shape() != value.shape() {
            return Err(Error::shape(
                "set_param",
                format!("{}: {:?} vs {:?}", self.params[id.0].name, current.shape(), value.shape()),
            ));
        }
        self.params[id.0].value = Arc::new(value);
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total scalar count, optionally restricted to one group.
    pub fn count(&self, group: Option<ParamGroup>) -> usize {
        self.params
            .iter()
            .filter(|p| group.is_none_or(|g| p.group == g))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: Arc::new(p.value.cast()),
                })
                .collect(),
        }
    }

    /// Serialises as `T2PW`, version, dtype, count, then per parameter the
    /// name, shape and raw little-endian values.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.push(CHECKPOINT_VERSION);
        buf.push(F::DTYPE.tag());
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(p.name.as_bytes());
            buf.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
            for &d in p.value.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                v.write_le(&mut buf);
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor::new(&bytes);
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a parameter checkpoint (bad magic)".into()));
        }
        let version = cur.take(1)?[0];
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let dtype = DType::from_tag(cur.take(1)?[0])
            .ok_or_else(|| Error::Format("unknown element type".into()))?;
        if dtype != F::DTYPE {
            return Err(Error::Format(format!(
                "checkpoint holds {dtype:?}, expected {:?}",
                F::DTYPE
            )));
        }
        let count = cur.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
                .to_string();
            let ndim = cur.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| cur.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let width = dtype.width();
            let bytes_len = shape
                .iter()
                .try_fold(width, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("parameter `{name}` shape {shape:?} overflows")))?;
            let raw = cur.take(bytes_len)?;
            let data = raw.chunks_exact(width).map(F::read_le).collect();
            store.add(name, Tensor::new(&shape, data)?);
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(store)
    }
}

/// Byte reader over an in-memory buffer that reports truncation as a
/// format error.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}
