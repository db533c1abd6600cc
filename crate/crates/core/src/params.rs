//! Named parameter arrays tagged by model side, tape binding, initialization
//! and the checkpoint container.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Index;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{Array, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Link,
    Route,
}

/// Which parameter arrays an optimizer step may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMask {
    None,
    Link,
    Route,
    All,
}

impl TrainMask {
    pub fn selects(self, side: Side) -> bool {
        matches!(
            (self, side),
            (TrainMask::All, _) | (TrainMask::Link, Side::Link) | (TrainMask::Route, Side::Route)
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    side: Side,
    value: Arc<Array>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

/// Tape variables for every parameter of a store, indexed by [`ParamId`].
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bound {
    /// Binding over caller-made leaves, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, side: Side, value: Array) -> ParamId {
        let name = name.into();
        debug_assert!(self.entries.iter().all(|e| e.name != name), "duplicate parameter {name}");
        self.entries.push(Entry {
            name,
            side,
            value: Arc::new(value),
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn side(&self, id: ParamId) -> Side {
        self.entries[id.0].side
    }

    pub fn value(&self, id: ParamId) -> &Arc<Array> {
        &self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn set(&mut self, id: ParamId, value: Array) -> Result<()> {
        let old = &self.entries[id.0].value;
        if old.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {}: {:?} vs {:?}",
                self.entries[id.0].name,
                old.shape(),
                value.shape()
            )));
        }
        self.entries[id.0].value = Arc::new(value);
        Ok(())
    }

    /// Copies of every array in store order.
    pub fn arrays(&self) -> Vec<Array> {
        self.entries.iter().map(|e| Array::clone(&e.value)).collect()
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    /// Registers every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.entries.iter().map(|e| tape.leaf(Arc::clone(&e.value))).collect())
    }

    /// Scalar count of the arrays selected by `mask`.
    pub fn count(&self, mask: TrainMask) -> usize {
        self.entries
            .iter()
            .filter(|e| mask.selects(e.side))
            .map(|e| e.value.len())
            .sum()
    }

    /// Copies every `side` array from `other`, which must share the layout.
    pub fn copy_side_from(&mut self, other: &ParamStore, side: Side) -> Result<()> {
        self.check_layout(other)?;
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if dst.side == side {
                dst.value = Arc::clone(&src.value);
            }
        }
        Ok(())
    }

    fn check_layout(&self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Shape(format!(
                "parameter layouts differ: {} vs {} arrays",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name || a.side != b.side || a.value.shape() != b.value.shape() {
                return Err(Error::Shape(format!(
                    "parameter layouts differ at {} {:?} / {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W, metadata: &serde_json::Value) -> Result<()> {
        let manifest = Manifest {
            arrays: self
                .entries
                .iter()
                .map(|e| ManifestEntry {
                    name: e.name.clone(),
                    shape: e.value.shape().to_vec(),
                    dtype: "f32".into(),
                    side: e.side,
                })
                .collect(),
            metadata: metadata.clone(),
        };
        let header = serde_json::to_vec(&manifest)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for e in &self.entries {
            for &v in e.value.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(ParamStore, serde_json::Value)> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut header)?;
        let manifest: Manifest = serde_json::from_slice(&header)?;
        let mut store = ParamStore::new();
        for m in manifest.arrays {
            if m.dtype != "f32" || m.shape.len() != 2 {
                return Err(Error::Format(format!("unsupported array {} ({}, {:?})", m.name, m.dtype, m.shape)));
            }
            let n = m.shape[0] * m.shape[1];
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            store.add(m.name, m.side, Array::from_vec(m.shape[0], m.shape[1], data)?);
        }
        Ok((store, manifest.metadata))
    }

    pub fn save_checkpoint(&self, path: &Path, metadata: &serde_json::Value) -> Result<()> {
        self.write_checkpoint(BufWriter::new(File::create(path)?), metadata)
    }

    /// Loads values from a checkpoint into this store; names, sides and
    /// shapes must match.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<serde_json::Value> {
        let (other, meta) = Self::read_checkpoint(BufReader::new(File::open(path)?))?;
        self.check_layout(&other)?;
        *self = other;
        Ok(meta)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"MXCK";

#[derive(Serialize, Deserialize)]
struct Manifest {
    arrays: Vec<ManifestEntry>,
    metadata: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    side: Side,
}

/// Seeded initializer for parameter arrays.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Glorot-uniform weights for a `[fan_in × fan_out]` matrix.
    pub fn glorot(&mut self, fan_in: usize, fan_out: usize) -> Array {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(fan_in, fan_out, a)
    }

    pub fn uniform(&mut self, rows: usize, cols: usize, bound: f64) -> Array {
        let data = (0..rows * cols).map(|_| self.rng.random_range(-bound..=bound)).collect();
        Array::from_vec(rows, cols, data).expect("finite initializer")
    }
}
