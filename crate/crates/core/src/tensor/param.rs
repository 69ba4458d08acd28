//! Named parameter storage and its checkpoint file format.
//!
//! Layout (little endian):
//!
//! ```text
//! magic   8 bytes  "CHESTPRM"
//! version u32
//! header  u32 length + UTF-8 text (one `key = value` per line)
//! count   u32
//! records count × { u32 name length, name, u32 ndim, ndim × u64 extents, f64 values }
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CHESTPRM";

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Ordered, uniquely named set of trainable arrays.
///
/// This is plain data (`Send + Sync`); [`ParamSet::bind`] turns it into
/// graph leaves for one forward/backward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter and return its slot index.
    pub fn add(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(crate::error::invalid(format!("duplicate parameter name `{name}`")));
        }
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidShape(shape.to_vec()));
        }
        let id = self.entries.len();
        self.entries.push(Entry {
            name: name.to_owned(),
            shape: shape.to_vec(),
            data,
        });
        self.index.insert(name.to_owned(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.entries[id].name
    }

    pub fn shape(&self, id: usize) -> &[usize] {
        &self.entries[id].shape
    }

    pub fn data(&self, id: usize) -> &[f64] {
        &self.entries[id].data
    }

    pub fn data_mut(&mut self, id: usize) -> &mut [f64] {
        &mut self.entries[id].data
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// Total scalar count.
    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Fresh trainable leaves, one per parameter, in registration order.
    pub fn bind(&self) -> Vec<Tensor> {
        self.entries
            .iter()
            .map(|e| Tensor::param(&e.shape, e.data.clone()).expect("validated on insert"))
            .collect()
    }

    /// Constant leaves (no gradient tracking) for inference.
    pub fn bind_frozen(&self) -> Vec<Tensor> {
        self.entries
            .iter()
            .map(|e| Tensor::new(&e.shape, e.data.clone()).expect("validated on insert"))
            .collect()
    }

    /// Copy values from `other`, which must have identical names and shapes.
    pub fn assign(&mut self, other: &ParamSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Format(format!(
                "parameter count {} does not match {}",
                other.entries.len(),
                self.entries.len()
            )));
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if dst.name != src.name || dst.shape != src.shape {
                return Err(Error::Format(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    src.name, src.shape, dst.name, dst.shape
                )));
            }
            dst.data.copy_from_slice(&src.data);
        }
        Ok(())
    }
}

/// Parameter values plus a free-form header echoing the producing config.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Vec<(String, String)>,
    pub params: ParamSet,
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_string(r: &mut impl Read, max: usize) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > max {
        return Err(Error::Format(format!("string length {len} exceeds {max}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}

impl Checkpoint {
    pub fn header_value(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let header: String = self.header.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(header.as_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for e in &self.params.entries {
            w.write_all(&(e.name.len() as u32).to_le_bytes())?;
            w.write_all(e.name.as_bytes())?;
            w.write_all(&(e.shape.len() as u32).to_le_bytes())?;
            for &d in &e.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in &e.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a parameter checkpoint".into()));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let text = read_string(r, 1 << 20)?;
        let header = text
            .lines()
            .filter_map(|l| l.split_once(" = "))
            .map(|(k, v)| (k.to_owned(), v.to_owned()))
            .collect();
        let count = read_u32(r)?;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let name = read_string(r, 4096)?;
            let ndim = read_u32(r)? as usize;
            if ndim == 0 || ndim > 8 {
                return Err(Error::Format(format!("`{name}` has {ndim} dimensions")));
            }
            let shape = (0..ndim)
                .map(|_| read_u64(r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            if n > 1 << 28 {
                return Err(Error::Format(format!("`{name}` is implausibly large")));
            }
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.add(&name, &shape, data)?;
        }
        Ok(Checkpoint { header, params })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
