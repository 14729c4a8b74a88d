use std::fs;
use std::path::Path;

use super::{DescriptorBlock, InstanceDescriptors, SCDF_EXTENSION};
use crate::error::{Error, Result};

pub const SCDF_MAGIC: [u8; 4] = *b"SCDF";
pub const SCDF_VERSION: u32 = 1;

pub fn encode_descriptors(desc: &InstanceDescriptors) -> Vec<u8> {
    let dim = desc.dim();
    let payload: usize = desc.blocks().iter().map(|b| 8 + b.len() * (2 + dim) * 4).sum();
    let mut out = Vec::with_capacity(16 + payload);
    out.extend_from_slice(&SCDF_MAGIC);
    out.extend_from_slice(&SCDF_VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(desc.blocks().len() as u32).to_le_bytes());
    for block in desc.blocks() {
        out.extend_from_slice(&block.scale_factor.to_le_bytes());
        out.extend_from_slice(&(block.len() as u32).to_le_bytes());
        for (pos, row) in block.positions.iter().zip(block.descriptors.chunks_exact(dim)) {
            out.extend_from_slice(&pos[0].to_le_bytes());
            out.extend_from_slice(&pos[1].to_le_bytes());
            for v in row {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let end = self.at + N;
        let chunk = self
            .bytes
            .get(self.at..end)
            .ok_or_else(|| Error::Format(format!("truncated file while reading {what} at byte {}", self.at)))?;
        self.at = end;
        Ok(chunk.try_into().unwrap())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        self.take::<4>(what).map(u32::from_le_bytes)
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        self.take::<4>(what).map(f32::from_le_bytes)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.at
    }
}

pub fn decode_descriptors(bytes: &[u8], instance_id: &str) -> Result<InstanceDescriptors> {
    let mut r = Reader { bytes, at: 0 };
    if r.take::<4>("magic")? != SCDF_MAGIC {
        return Err(Error::Format("bad magic, not an SCDF file".into()));
    }
    let version = r.u32("version")?;
    if version != SCDF_VERSION {
        return Err(Error::Format(format!("unsupported SCDF version {version}")));
    }
    let dim = r.u32("dimension")? as usize;
    if dim == 0 {
        return Err(Error::Format("descriptor dimension D is zero".into()));
    }
    let num_blocks = r.u32("block count")? as usize;
    let mut blocks = Vec::with_capacity(num_blocks.min(1024));
    for b in 0..num_blocks {
        let scale_factor = r.f32("scale factor")?;
        let n = r.u32("block size")? as usize;
        let record = (2 + dim) * 4;
        if n.checked_mul(record).is_none_or(|need| need > r.remaining()) {
            return Err(Error::Format(format!("truncated file in block {b} ({n} records declared)")));
        }
        let mut positions = Vec::with_capacity(n);
        let mut descriptors = Vec::with_capacity(n * dim);
        for _ in 0..n {
            positions.push([r.f32("x")?, r.f32("y")?]);
            for _ in 0..dim {
                let v = r.f32("descriptor")?;
                if !v.is_finite() {
                    return Err(Error::Format(format!("non-finite descriptor value in block {b}")));
                }
                descriptors.push(v);
            }
        }
        blocks.push(DescriptorBlock {
            scale_factor,
            positions,
            descriptors,
        });
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes after last block", r.remaining())));
    }
    InstanceDescriptors::new(instance_id, dim, blocks)
}

pub fn write_descriptors(desc: &InstanceDescriptors, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_descriptors(desc)).map_err(|e| Error::io(path, e))
}

/// Reads a `.scdf` file; the instance id is the file name minus `.scdf`.
pub fn read_descriptors(path: impl AsRef<Path>) -> Result<InstanceDescriptors> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let id = name
        .strip_suffix(&format!(".{SCDF_EXTENSION}"))
        .unwrap_or(name);
    decode_descriptors(&bytes, id).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}
