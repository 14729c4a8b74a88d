//! Multi-scale local descriptors of one instance and their `.scdf` file
//! format.
//!
//! `.scdf` layout, all little-endian:
//!
//! | field        | type                                   |
//! |--------------|----------------------------------------|
//! | magic        | `b"SCDF"`                              |
//! | version      | u32 = 1                                |
//! | D            | u32                                    |
//! | num_blocks   | u32                                    |
//! | per block    | f32 scale_factor, u32 n, then n × (f32 x, f32 y, D × f32) |
//!
//! Trailing bytes are rejected. The instance id is the file stem.

mod format;
pub mod synth;
pub mod toy;

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub use format::{decode_descriptors, encode_descriptors, read_descriptors, write_descriptors, SCDF_MAGIC, SCDF_VERSION};

pub const SCDF_EXTENSION: &str = "scdf";

/// Image rescale factors at which descriptors are extracted.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleGrid {
    factors: Vec<f64>,
}

impl Default for ScaleGrid {
    /// `0.5, 0.6, ..., 2.5`: 21 factors.
    fn default() -> Self {
        ScaleGrid::arithmetic(0.5, 0.1, 21).expect("default grid is valid")
    }
}

impl ScaleGrid {
    pub fn new(factors: Vec<f64>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::Config("scale grid is empty".into()));
        }
        if factors.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return Err(Error::Config("scale factors must be finite and positive".into()));
        }
        if factors.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("scale factors must be strictly increasing".into()));
        }
        Ok(ScaleGrid { factors })
    }

    /// `lo + step·i` for `i in 0..n`, rounded to 12 decimals so that e.g.
    /// `0.5 + 0.1·6` is exactly the double nearest 1.1.
    pub fn arithmetic(lo: f64, step: f64, n: usize) -> Result<Self> {
        let factors = (0..n)
            .map(|i| ((lo + step * i as f64) * 1e12).round() / 1e12)
            .collect();
        ScaleGrid::new(factors)
    }

    pub fn factors(&self) -> &[f64] {
        &self.factors
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }
}

/// Descriptors extracted at one scale factor.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorBlock {
    pub scale_factor: f32,
    pub positions: Vec<[f32; 2]>,
    /// Row-major `n × D`.
    pub descriptors: Vec<f32>,
}

impl DescriptorBlock {
    pub fn empty(scale_factor: f32) -> Self {
        DescriptorBlock {
            scale_factor,
            positions: Vec::new(),
            descriptors: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// All descriptors of one instance, one block per grid scale in grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceDescriptors {
    pub instance_id: String,
    dim: usize,
    blocks: Vec<DescriptorBlock>,
}

impl InstanceDescriptors {
    pub fn new(instance_id: impl Into<String>, dim: usize, blocks: Vec<DescriptorBlock>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Validation("descriptor dimensionality must be positive".into()));
        }
        for (b, block) in blocks.iter().enumerate() {
            if block.descriptors.len() != block.positions.len() * dim {
                return Err(Error::Validation(format!(
                    "block {b}: {} values for {} descriptors of dimension {dim}",
                    block.descriptors.len(),
                    block.positions.len()
                )));
            }
            if block.descriptors.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("block {b}: non-finite descriptor value")));
            }
        }
        Ok(InstanceDescriptors {
            instance_id: instance_id.into(),
            dim,
            blocks,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn blocks(&self) -> &[DescriptorBlock] {
        &self.blocks
    }

    pub fn total(&self) -> usize {
        self.blocks.iter().map(DescriptorBlock::len).sum()
    }

    /// Descriptor rows of block `b`.
    pub fn rows(&self, b: usize) -> std::slice::ChunksExact<'_, f32> {
        self.blocks[b].descriptors.chunks_exact(self.dim)
    }

    /// Every descriptor row, scale-major.
    pub fn all_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.blocks.iter().flat_map(move |b| b.descriptors.chunks_exact(self.dim))
    }

    /// Checks that blocks line up one-to-one with `grid`.
    pub fn check_grid(&self, grid: &ScaleGrid) -> Result<()> {
        if self.blocks.len() != grid.len() {
            return Err(Error::Validation(format!(
                "instance {:?} has {} scale blocks, grid has {}",
                self.instance_id,
                self.blocks.len(),
                grid.len()
            )));
        }
        for (b, (block, f)) in self.blocks.iter().zip(grid.factors()).enumerate() {
            if block.scale_factor != *f as f32 {
                return Err(Error::Validation(format!(
                    "instance {:?} block {b} has scale factor {}, grid expects {f}",
                    self.instance_id, block.scale_factor
                )));
            }
        }
        Ok(())
    }
}

/// Somewhere descriptors can be looked up by instance id.
pub trait DescriptorSource: Sync {
    fn load(&self, instance_id: &str) -> Result<InstanceDescriptors>;
}

/// A directory of `<instance_id>.scdf` files.
#[derive(Debug, Clone)]
pub struct DescriptorDir {
    root: PathBuf,
}

impl DescriptorDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DescriptorDir { root: root.into() }
    }

    pub fn path_for(&self, instance_id: &str) -> PathBuf {
        self.root.join(format!("{instance_id}.{SCDF_EXTENSION}"))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn store(&self, desc: &InstanceDescriptors) -> Result<()> {
        std::fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        write_descriptors(desc, self.path_for(&desc.instance_id))
    }
}

impl DescriptorSource for DescriptorDir {
    fn load(&self, instance_id: &str) -> Result<InstanceDescriptors> {
        read_descriptors(self.path_for(instance_id))
    }
}

/// In-memory descriptor store.
#[derive(Debug, Clone, Default)]
pub struct MemoryStore {
    items: HashMap<String, InstanceDescriptors>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, desc: InstanceDescriptors) {
        self.items.insert(desc.instance_id.clone(), desc);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

impl FromIterator<InstanceDescriptors> for MemoryStore {
    fn from_iter<I: IntoIterator<Item = InstanceDescriptors>>(iter: I) -> Self {
        let mut store = MemoryStore::new();
        for d in iter {
            store.insert(d);
        }
        store
    }
}

impl DescriptorSource for MemoryStore {
    fn load(&self, instance_id: &str) -> Result<InstanceDescriptors> {
        self.items
            .get(instance_id)
            .cloned()
            .ok_or_else(|| Error::Validation(format!("no descriptors for instance {instance_id:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid() {
        let g = ScaleGrid::default();
        assert_eq!(g.len(), 21);
        assert_eq!(g.factors()[0], 0.5);
        assert_eq!(g.factors()[6], 1.1);
        assert_eq!(g.factors()[13], 1.8);
        assert_eq!(g.factors()[20], 2.5);
    }

    #[test]
    fn grid_rejects_bad_factors() {
        assert!(ScaleGrid::new(vec![]).is_err());
        assert!(ScaleGrid::new(vec![1.0, 1.0]).is_err());
        assert!(ScaleGrid::new(vec![0.0, 1.0]).is_err());
        assert!(ScaleGrid::new(vec![2.0, 1.0]).is_err());
    }

    #[test]
    fn instance_validation() {
        let block = DescriptorBlock {
            scale_factor: 1.0,
            positions: vec![[0.0, 0.0]],
            descriptors: vec![1.0, 2.0],
        };
        assert!(InstanceDescriptors::new("a", 2, vec![block.clone()]).is_ok());
        assert!(InstanceDescriptors::new("a", 3, vec![block.clone()]).is_err());
        assert!(InstanceDescriptors::new("a", 0, vec![]).is_err());
        let mut bad = block;
        bad.descriptors[1] = f32::NAN;
        assert!(InstanceDescriptors::new("a", 2, vec![bad]).is_err());
    }

    #[test]
    fn check_grid_matches_blocks() {
        let grid = ScaleGrid::arithmetic(0.5, 0.5, 2).unwrap();
        let d = InstanceDescriptors::new("a", 1, vec![DescriptorBlock::empty(0.5), DescriptorBlock::empty(1.0)]).unwrap();
        assert!(d.check_grid(&grid).is_ok());
        let d = InstanceDescriptors::new("a", 1, vec![DescriptorBlock::empty(0.5)]).unwrap();
        assert!(d.check_grid(&grid).is_err());
    }
}
