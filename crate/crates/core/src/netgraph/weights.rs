//! Named weight storage and the `EAPW` binary container.
//!
//! Layout (little-endian, no padding):
//!
//! ```text
//! magic "EAPW" | version u32 = 1 | entry count u32
//! per entry: name len u16 | UTF-8 name | rank u8 | rank × u32 dims | f32 payload
//! ```
//!
//! Entry names are `<layer>.<param>`; the parameter name is everything after
//! the last dot.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"EAPW";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    entries: BTreeMap<String, BTreeMap<String, Tensor>>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, layer: &str, param: &str, tensor: Tensor) {
        self.entries
            .entry(layer.to_string())
            .or_default()
            .insert(param.to_string(), tensor);
    }

    pub fn get(&self, layer: &str, param: &str) -> Option<&Tensor> {
        self.entries.get(layer)?.get(param)
    }

    /// Like [`get`](Self::get) but fails with the missing entry's name.
    pub fn param(&self, layer: &str, param: &str) -> Result<&Tensor> {
        self.get(layer, param)
            .ok_or_else(|| Error::Graph(format!("missing weight `{layer}.{param}`")))
    }

    pub fn layer(&self, layer: &str) -> Option<&BTreeMap<String, Tensor>> {
        self.entries.get(layer)
    }

    pub fn layer_names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn remove_layer(&mut self, layer: &str) -> Option<BTreeMap<String, Tensor>> {
        self.entries.remove(layer)
    }

    /// Number of stored tensors.
    pub fn len(&self) -> usize {
        self.entries.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(layer, param, tensor)` in sorted order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, &Tensor)> {
        self.entries
            .iter()
            .flat_map(|(l, ps)| ps.iter().map(move |(p, t)| (l.as_str(), p.as_str(), t)))
    }

    /// Bitwise equality, distinguishing NaN payloads and signed zeros.
    pub fn bitwise_eq(&self, other: &WeightStore) -> bool {
        let a: Vec<_> = self.iter().collect();
        let b: Vec<_> = other.iter().collect();
        a.len() == b.len()
            && a.iter().zip(&b).all(|((la, pa, ta), (lb, pb, tb))| {
                la == lb
                    && pa == pb
                    && ta.shape() == tb.shape()
                    && ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.len()).map_err(|_| Error::Config("too many weight entries".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (layer, param, t) in self.iter() {
            let name = format!("{layer}.{param}");
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Config(format!("weight name `{name}` is too long")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.rank()).map_err(|_| Error::Config(format!("`{name}` has rank > 255")))?;
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::Config(format!("`{name}` dimension too large")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: format!("bad magic {magic:02x?}, expected {MAGIC:02x?} (\"EAPW\")"),
            });
        }
        let at = r.pos;
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format {
                offset: at as u64,
                message: format!("unsupported version {version}"),
            });
        }
        let count = r.u32("entry count")?;
        let mut store = WeightStore::new();
        for i in 0..count {
            let entry_at = r.pos;
            let len = r.u16("name length")? as usize;
            let name_at = r.pos;
            let raw = r.take(len, "entry name")?;
            let name = std::str::from_utf8(raw).map_err(|_| Error::Format {
                offset: name_at as u64,
                message: format!("entry {i} name is not UTF-8"),
            })?;
            let Some((layer, param)) = name.rsplit_once('.') else {
                return Err(Error::Format {
                    offset: name_at as u64,
                    message: format!("entry name `{name}` has no `<layer>.<param>` form"),
                });
            };
            let rank_at = r.pos;
            let rank = r.u8("rank")? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32("dimension")? as usize);
            }
            if rank == 0 || dims.contains(&0) {
                return Err(Error::Format {
                    offset: rank_at as u64,
                    message: format!("entry `{name}` has invalid shape {dims:?}"),
                });
            }
            let n: usize = dims.iter().product();
            let payload = r.take(n * 4, "payload")?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if store.get(layer, param).is_some() {
                return Err(Error::Format {
                    offset: entry_at as u64,
                    message: format!("duplicate entry `{name}`"),
                });
            }
            store.insert(layer, param, Tensor::new(dims, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                message: format!("{} trailing bytes after last entry", bytes.len() - r.pos),
            });
        }
        Ok(store)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn save_weights(store: &WeightStore, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, store.to_bytes()?)?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightStore> {
    WeightStore::from_bytes(&std::fs::read(path)?)
}
