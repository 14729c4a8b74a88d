//! Pooling per-descriptor codes into instance representations.
//!
//! * invariant: one block, the mean code over every descriptor at every
//!   scale;
//! * absolute: grid scales split into partitions by thresholding the
//!   rescale factor, one mean-code block per partition;
//! * relative: the factor is first re-parameterized by the box size,
//!   `ŝ = (B_w + B_h) / (w̄ + h̄) · s`, and each partition's code sum is
//!   divided by the number of grid scales that fall in it.
//!
//! Every block is normalized on its own (empty partitions give zero
//! blocks), blocks are concatenated in partition order and the result is
//! ℓ2-normalized once more. Within a block, codes are summed scale by scale
//! in grid order and row by row in file order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{BoundingBox, Instance, MeanBox};
use crate::descriptors::{DescriptorSource, InstanceDescriptors, ScaleGrid};
use crate::encoding::{l2_normalize, Coder, Normalization};
use crate::error::{Error, Result};
use crate::parallel::{self, Parallelism};

/// Partition index of `value`: the number of thresholds strictly below it,
/// so a value equal to a threshold goes to the lower partition.
pub fn group_index(value: f64, thresholds: &[f64]) -> usize {
    thresholds.iter().take_while(|&&t| t < value).count()
}

pub fn validate_thresholds(thresholds: &[f64]) -> Result<()> {
    if thresholds.iter().any(|t| !t.is_finite()) {
        return Err(Error::Config("scale thresholds must be finite".into()));
    }
    if thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("scale thresholds must be strictly increasing".into()));
    }
    Ok(())
}

fn partition_by(values: impl Iterator<Item = f64>, thresholds: &[f64]) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); thresholds.len() + 1];
    for (s, v) in values.enumerate() {
        groups[group_index(v, thresholds)].push(s);
    }
    groups
}

/// Groups grid scale indices by their rescale factor.
pub fn partition_absolute(grid: &ScaleGrid, thresholds: &[f64]) -> Vec<Vec<usize>> {
    partition_by(grid.factors().iter().copied(), thresholds)
}

pub fn relative_scale(scale: f64, bbox: &BoundingBox, mean_box: MeanBox) -> f64 {
    bbox.perimeter_half() / mean_box.perimeter_half() * scale
}

/// Groups grid scale indices by their box-relative scale.
pub fn partition_relative(grid: &ScaleGrid, thresholds: &[f64], bbox: &BoundingBox, mean_box: MeanBox) -> Vec<Vec<usize>> {
    partition_by(
        grid.factors().iter().map(|&s| relative_scale(s, bbox, mean_box)),
        thresholds,
    )
}

/// Thresholds splitting `grid` into `parts` contiguous partitions of
/// near-equal size: cut points at index quantiles, each threshold halfway
/// between the neighbouring factors.
pub fn quantile_thresholds(grid: &ScaleGrid, parts: usize) -> Result<Vec<f64>> {
    let m = grid.len();
    if parts == 0 || parts > m {
        return Err(Error::Config(format!("cannot split {m} scales into {parts} partitions")));
    }
    let f = grid.factors();
    Ok((1..parts)
        .map(|t| {
            let cut = (t * m + parts / 2) / parts;
            0.5 * (f[cut - 1] + f[cut])
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RepresentationMode {
    Invariant,
    Absolute,
    Relative,
    /// Vectors computed outside this crate (e.g. global FC-layer features).
    #[serde(rename = "fc-external")]
    External,
}

impl RepresentationMode {
    pub fn tag(self) -> u8 {
        match self {
            RepresentationMode::Invariant => 0,
            RepresentationMode::Absolute => 1,
            RepresentationMode::Relative => 2,
            RepresentationMode::External => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => RepresentationMode::Invariant,
            1 => RepresentationMode::Absolute,
            2 => RepresentationMode::Relative,
            3 => RepresentationMode::External,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            RepresentationMode::Invariant => "invariant",
            RepresentationMode::Absolute => "absolute",
            RepresentationMode::Relative => "relative",
            RepresentationMode::External => "fc-external",
        }
    }
}

impl std::fmt::Display for RepresentationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for RepresentationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "invariant" => Ok(RepresentationMode::Invariant),
            "absolute" => Ok(RepresentationMode::Absolute),
            "relative" => Ok(RepresentationMode::Relative),
            "fc-external" | "external" => Ok(RepresentationMode::External),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedRepresentation {
    pub instance_id: String,
    pub mode: RepresentationMode,
    pub partitions: usize,
    pub block_dim: usize,
    pub vector: Vec<f64>,
}

impl EncodedRepresentation {
    pub fn new(
        instance_id: impl Into<String>,
        mode: RepresentationMode,
        partitions: usize,
        block_dim: usize,
        vector: Vec<f64>,
    ) -> Result<Self> {
        if vector.len() != partitions * block_dim {
            return Err(Error::DimensionMismatch {
                expected: partitions * block_dim,
                got: vector.len(),
            });
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("representation has non-finite entries".into()));
        }
        Ok(EncodedRepresentation {
            instance_id: instance_id.into(),
            mode,
            partitions,
            block_dim,
            vector,
        })
    }

    pub fn block(&self, t: usize) -> &[f64] {
        &self.vector[t * self.block_dim..(t + 1) * self.block_dim]
    }
}

/// How a partition's code sum is turned into its block before
/// normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockScaling {
    /// Divide by the number of descriptors pooled.
    MeanOverDescriptors,
    /// Divide by the number of grid scales in the partition.
    PerScale,
}

/// Pools each group of scale indices into one normalized block. Empty
/// groups give zero blocks. Errors when no group holds any descriptor.
pub fn pool_blocks(
    desc: &InstanceDescriptors,
    coder: &dyn Coder,
    normalization: Normalization,
    groups: &[Vec<usize>],
    scaling: BlockScaling,
) -> Result<Vec<Vec<f64>>> {
    if coder.input_dim() != desc.dim() {
        return Err(Error::DimensionMismatch {
            expected: coder.input_dim(),
            got: desc.dim(),
        });
    }
    let q = coder.code_dim();
    let mut x = vec![0.0; desc.dim()];
    let mut any = false;
    let mut blocks = Vec::with_capacity(groups.len());
    for group in groups {
        let mut acc = vec![0.0; q];
        let mut count = 0usize;
        for &s in group {
            if s >= desc.blocks().len() {
                return Err(Error::Validation(format!(
                    "instance {:?} has no scale block {s}",
                    desc.instance_id
                )));
            }
            for row in desc.rows(s) {
                for (dst, &v) in x.iter_mut().zip(row) {
                    *dst = v as f64;
                }
                coder.accumulate(&x, &mut acc);
                count += 1;
            }
        }
        if count > 0 {
            any = true;
            let divisor = match scaling {
                BlockScaling::MeanOverDescriptors => count as f64,
                BlockScaling::PerScale => group.len() as f64,
            };
            for a in acc.iter_mut() {
                *a /= divisor;
            }
            normalization.apply(&mut acc);
        }
        blocks.push(acc);
    }
    if !any {
        return Err(Error::Validation(format!(
            "instance {:?} has no descriptors to pool",
            desc.instance_id
        )));
    }
    Ok(blocks)
}

fn concat(
    desc: &InstanceDescriptors,
    mode: RepresentationMode,
    blocks: Vec<Vec<f64>>,
    block_dim: usize,
    normalization: Normalization,
) -> Result<EncodedRepresentation> {
    let partitions = blocks.len();
    let mut vector = blocks.concat();
    if normalization != Normalization::None {
        l2_normalize(&mut vector);
    }
    EncodedRepresentation::new(desc.instance_id.clone(), mode, partitions, block_dim, vector)
}

/// Mean code over every descriptor at every scale, as a single block.
pub fn pool_invariant(
    desc: &InstanceDescriptors,
    coder: &dyn Coder,
    normalization: Normalization,
) -> Result<EncodedRepresentation> {
    let all: Vec<usize> = (0..desc.blocks().len()).collect();
    let blocks = pool_blocks(desc, coder, normalization, &[all], BlockScaling::MeanOverDescriptors)?;
    concat(desc, RepresentationMode::Invariant, blocks, coder.code_dim(), normalization)
}

pub fn pool_absolute(
    desc: &InstanceDescriptors,
    grid: &ScaleGrid,
    coder: &dyn Coder,
    normalization: Normalization,
    thresholds: &[f64],
) -> Result<EncodedRepresentation> {
    validate_thresholds(thresholds)?;
    desc.check_grid(grid)?;
    let groups = partition_absolute(grid, thresholds);
    let blocks = pool_blocks(desc, coder, normalization, &groups, BlockScaling::MeanOverDescriptors)?;
    concat(desc, RepresentationMode::Absolute, blocks, coder.code_dim(), normalization)
}

/// `bbox` is the instance's original (unexpanded) box.
pub fn pool_relative(
    desc: &InstanceDescriptors,
    grid: &ScaleGrid,
    coder: &dyn Coder,
    normalization: Normalization,
    thresholds: &[f64],
    bbox: &BoundingBox,
    mean_box: MeanBox,
) -> Result<EncodedRepresentation> {
    validate_thresholds(thresholds)?;
    desc.check_grid(grid)?;
    if !(mean_box.perimeter_half() > 0.0) {
        return Err(Error::Validation("mean box must be positive".into()));
    }
    let groups = partition_relative(grid, thresholds, bbox, mean_box);
    let blocks = pool_blocks(desc, coder, normalization, &groups, BlockScaling::PerScale)?;
    concat(desc, RepresentationMode::Relative, blocks, coder.code_dim(), normalization)
}

/// Which pooling to run over a batch of instances.
#[derive(Debug, Clone, PartialEq)]
pub enum Pooling {
    Invariant,
    Absolute { thresholds: Vec<f64> },
    Relative { thresholds: Vec<f64>, mean_box: MeanBox },
}

impl Pooling {
    pub fn mode(&self) -> RepresentationMode {
        match self {
            Pooling::Invariant => RepresentationMode::Invariant,
            Pooling::Absolute { .. } => RepresentationMode::Absolute,
            Pooling::Relative { .. } => RepresentationMode::Relative,
        }
    }

    pub fn encode(
        &self,
        inst: &Instance,
        desc: &InstanceDescriptors,
        grid: &ScaleGrid,
        coder: &dyn Coder,
        normalization: Normalization,
    ) -> Result<EncodedRepresentation> {
        match self {
            Pooling::Invariant => {
                desc.check_grid(grid)?;
                pool_invariant(desc, coder, normalization)
            }
            Pooling::Absolute { thresholds } => pool_absolute(desc, grid, coder, normalization, thresholds),
            Pooling::Relative { thresholds, mean_box } => {
                pool_relative(desc, grid, coder, normalization, thresholds, &inst.bbox, *mean_box)
            }
        }
    }
}

/// Encodes instances independently against a shared coder; output order
/// follows `instances`.
pub fn encode_batch(
    instances: &[Instance],
    source: &dyn DescriptorSource,
    grid: &ScaleGrid,
    coder: &dyn Coder,
    normalization: Normalization,
    pooling: &Pooling,
    policy: Parallelism,
) -> Result<Vec<EncodedRepresentation>> {
    parallel::map(policy, instances, |inst| {
        let desc = source.load(&inst.instance_id)?;
        pooling.encode(inst, &desc, grid, coder, normalization)
    })
    .into_iter()
    .collect()
}

pub const SCRP_MAGIC: [u8; 4] = *b"SCRP";
pub const SCRP_VERSION: u32 = 1;

/// `magic "SCRP" | u32 version | u8 mode | u32 T | u32 q | T·q × f64`,
/// little-endian.
pub fn encode_representation(rep: &EncodedRepresentation) -> Vec<u8> {
    let mut out = Vec::with_capacity(17 + rep.vector.len() * 8);
    out.extend_from_slice(&SCRP_MAGIC);
    out.extend_from_slice(&SCRP_VERSION.to_le_bytes());
    out.push(rep.mode.tag());
    out.extend_from_slice(&(rep.partitions as u32).to_le_bytes());
    out.extend_from_slice(&(rep.block_dim as u32).to_le_bytes());
    for v in &rep.vector {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_representation(bytes: &[u8], instance_id: &str) -> Result<EncodedRepresentation> {
    if bytes.len() < 17 {
        return Err(Error::Format("truncated representation header".into()));
    }
    if bytes[..4] != SCRP_MAGIC {
        return Err(Error::Format("bad magic, not an SCRP file".into()));
    }
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != SCRP_VERSION {
        return Err(Error::Format(format!("unsupported SCRP version {version}")));
    }
    let mode = RepresentationMode::from_tag(bytes[8])
        .ok_or_else(|| Error::Format(format!("unknown mode tag {}", bytes[8])))?;
    let partitions = u32_at(9) as usize;
    let block_dim = u32_at(13) as usize;
    let payload = &bytes[17..];
    let expected = partitions
        .checked_mul(block_dim)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::Format("representation size overflows".into()))?;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "expected {expected} payload bytes for T={partitions}, q={block_dim}, found {}",
            payload.len()
        )));
    }
    let vector = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    EncodedRepresentation::new(instance_id, mode, partitions, block_dim, vector).map_err(|e| Error::Format(e.to_string()))
}

pub fn representation_file_name(instance_id: &str, mode: RepresentationMode) -> String {
    format!("{instance_id}.{}.scrp", mode.name())
}

/// Writes `<dir>/<instance_id>.<mode>.scrp`.
pub fn serialize_representation(rep: &EncodedRepresentation, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(representation_file_name(&rep.instance_id, rep.mode));
    fs::write(&path, encode_representation(rep)).map_err(|e| Error::io(path, e))
}

pub fn load_representation(dir: impl AsRef<Path>, instance_id: &str, mode: RepresentationMode) -> Result<EncodedRepresentation> {
    let path = dir.as_ref().join(representation_file_name(instance_id, mode));
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let rep = decode_representation(&bytes, instance_id)?;
    if rep.mode != mode {
        return Err(Error::Format(format!(
            "{} holds a {} representation",
            path.display(),
            rep.mode
        )));
    }
    Ok(rep)
}
