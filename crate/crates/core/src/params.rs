//! Named parameter collections and the `MTWT` weights image.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MTWT" | u32 version = 1 | u32 tensor count
//! per tensor: u16 name length | UTF-8 name | u8 dtype (0 = f32) | u8 rank
//!             | rank × u32 extents | row-major f32 payload
//! ```
//!
//! Tensors are written in ascending name order, so equal stores produce equal
//! bytes.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::autograd::Var;
use crate::error::{Error, Result, WeightsError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MTWT";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 12;
const DTYPE_F32: u8 = 0;

/// Names under this prefix hold optimizer state and are never trained.
pub const OPTIMIZER_PREFIX: &str = "optim.";

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    tensor: Tensor,
    trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
}

fn validate_name(name: &str) -> Result<(), WeightsError> {
    if name.is_empty() {
        return Err(WeightsError::InvalidName("empty name".into()));
    }
    if name.len() > u16::MAX as usize {
        return Err(WeightsError::InvalidName(format!(
            "name of {} bytes exceeds the u16 length field",
            name.len()
        )));
    }
    Ok(())
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adds a new tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        validate_name(&name)?;
        if self.entries.contains_key(&name) {
            return Err(WeightsError::DuplicateName(name).into());
        }
        let trainable = !name.starts_with(OPTIMIZER_PREFIX);
        self.entries.insert(name, Entry { tensor, trainable });
        Ok(())
    }

    /// Inserts or replaces, keeping the trainable flag of an existing entry.
    pub fn set(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        validate_name(&name)?;
        match self.entries.get_mut(&name) {
            Some(e) => e.tensor = tensor,
            None => {
                let trainable = !name.starts_with(OPTIMIZER_PREFIX);
                self.entries.insert(name, Entry { tensor, trainable });
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|e| &mut e.tensor)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.remove(name).map(|e| e.tensor)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.tensor))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|e| e.trainable)
    }

    /// Marks every entry under `prefix` as (not) trainable; optimizer state stays frozen.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (name, e) in self.entries.iter_mut() {
            if name.starts_with(prefix) && !name.starts_with(OPTIMIZER_PREFIX) {
                e.trainable = trainable;
            }
        }
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, _)| k.as_str())
    }

    /// Copies every entry of `other` into `self`, replacing equal names.
    pub fn merge(&mut self, other: &ParamStore) {
        for (k, e) in &other.entries {
            self.entries.insert(k.clone(), e.clone());
        }
    }

    /// Sub-store of entries whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, e)| (k.clone(), e.clone()))
                .collect(),
        }
    }

    pub fn num_scalars(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self
            .entries
            .iter()
            .map(|(k, e)| 2 + k.len() + 2 + 4 * e.tensor.rank() + 4 * e.tensor.numel())
            .sum();
        let mut out = Vec::with_capacity(HEADER_LEN + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, e) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.push(e.tensor.rank() as u8);
            for &d in e.tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in e.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ParamStore, WeightsError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic").map_err(|_| WeightsError::BadMagic)? != MAGIC {
            return Err(WeightsError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(WeightsError::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let count = r.u32("tensor count")?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|e| WeightsError::InvalidName(e.to_string()))?
                .to_string();
            validate_name(&name)?;
            let dtype = r.u8("dtype")?;
            if dtype != DTYPE_F32 {
                return Err(WeightsError::UnsupportedDtype(dtype));
            }
            let rank = r.u8("rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u32("extent").map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            if shape.contains(&0) {
                return Err(WeightsError::ZeroExtent(name));
            }
            let n: usize = shape.iter().product();
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or(WeightsError::Truncated { what: "payload" })?,
                "payload",
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if store.contains(&name) {
                return Err(WeightsError::DuplicateName(name));
            }
            let trainable = !name.starts_with(OPTIMIZER_PREFIX);
            store.entries.insert(
                name,
                Entry {
                    tensor: Tensor::from_parts(shape, data),
                    trainable,
                },
            );
        }
        if r.pos != bytes.len() {
            return Err(WeightsError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ParamStore> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(ParamStore::from_bytes(&bytes)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], WeightsError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(WeightsError::Truncated { what })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, WeightsError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, WeightsError> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, WeightsError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Graph leaves for the tensors of a [`ParamStore`].
///
/// With gradients enabled, trainable entries become named leaves; everything
/// else is a constant.
#[derive(Clone)]
pub struct Params {
    vars: HashMap<String, Var>,
}

impl Params {
    pub fn constants(store: &ParamStore) -> Params {
        Params {
            vars: store
                .iter()
                .map(|(k, t)| (k.to_string(), Var::constant(t.clone())))
                .collect(),
        }
    }

    pub fn trainable(store: &ParamStore) -> Params {
        Params {
            vars: store
                .entries
                .iter()
                .map(|(k, e)| {
                    let v = if e.trainable {
                        Var::param(k.clone(), e.tensor.clone())
                    } else {
                        Var::constant(e.tensor.clone())
                    };
                    (k.clone(), v)
                })
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }
}
