//! Named, ordered parameter storage with a flat scalar index.
//!
//! Insertion order defines the flat layout, so gradient vectors, optimizer
//! moments, and checkpoints all agree on coordinates. Serialization is a
//! small versioned binary format; round-trips are bit-exact.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::autodiff::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
    pub trainable: bool,
}

/// Ordered collection of named parameter matrices.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    entries: Vec<Param>,
    by_name: HashMap<String, usize>,
}

const MAGIC: &[u8; 4] = b"SGPS";
const VERSION: u32 = 1;

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn insert(&mut self, name: &str, value: Array2<f64>, trainable: bool) {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.by_name.insert(name.to_string(), self.entries.len());
        self.entries.push(Param {
            name: name.to_string(),
            value,
            trainable,
        });
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        let ix = *self
            .by_name
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.entries[ix].value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        let ix = *self
            .by_name
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.entries[ix].value
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn entries(&self) -> &[Param] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar coordinates.
    pub fn flat_len(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    /// Copies every parameter into a flat vector, insertion order, row-major.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for p in &self.entries {
            out.extend(p.value.iter().copied());
        }
        out
    }

    /// Overwrites every parameter from a flat vector produced by `flatten`.
    pub fn unflatten(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.flat_len(), "flat length mismatch");
        let mut off = 0;
        for p in &mut self.entries {
            for v in p.value.iter_mut() {
                *v = flat[off];
                off += 1;
            }
        }
    }

    pub fn get_flat(&self, coord: usize) -> f64 {
        let (entry, inner) = self.locate(coord);
        *self.entries[entry].value.as_slice().unwrap().get(inner).unwrap()
    }

    pub fn set_flat(&mut self, coord: usize, value: f64) {
        let (entry, inner) = self.locate(coord);
        self.entries[entry].value.as_slice_mut().unwrap()[inner] = value;
    }

    /// Name of the parameter owning a flat coordinate, for diagnostics.
    pub fn coord_name(&self, coord: usize) -> String {
        let (entry, inner) = self.locate(coord);
        format!("{}[{}]", self.entries[entry].name, inner)
    }

    fn locate(&self, coord: usize) -> (usize, usize) {
        let mut off = coord;
        for (i, p) in self.entries.iter().enumerate() {
            if off < p.value.len() {
                return (i, off);
            }
            off -= p.value.len();
        }
        panic!("flat coordinate {coord} out of range");
    }

    /// Copies every parameter onto a tape as a leaf and returns the handles.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let mut vars = HashMap::new();
        for p in &self.entries {
            vars.insert(p.name.clone(), tape.constant(p.value.clone()));
        }
        BoundParams { vars }
    }

    /// Reads per-parameter gradients off a tape into flat layout.
    pub fn grads_from_tape(&self, tape: &Tape, bound: &BoundParams) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for p in &self.entries {
            let g = tape.grad(bound.var(&p.name));
            out.extend(g.iter().copied());
        }
        out
    }

    // ---- serialization ----

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for p in &self.entries {
            let name = p.name.as_bytes();
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name);
            buf.push(u8::from(p.trainable));
            buf.extend_from_slice(&(p.value.nrows() as u32).to_le_bytes());
            buf.extend_from_slice(&(p.value.ncols() as u32).to_le_bytes());
            for v in p.value.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint("bad parameter store magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported parameter store version {version}"
            )));
        }
        let count = r.u32()? as usize;
        let mut store = ParameterStore::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let trainable = r.u8()? != 0;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let mut value = Array2::zeros((rows, cols));
            for v in value.iter_mut() {
                *v = r.f64()?;
            }
            store.insert(&name, value, trainable);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// Tape handles for every parameter of a store, keyed by name.
pub struct BoundParams {
    vars: HashMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }
}

pub(crate) struct Cursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated data".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
