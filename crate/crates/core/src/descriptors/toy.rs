//! Deterministic stand-in for convolutional features: dense patch
//! descriptors (soft-binned gradient orientation histograms plus intensity
//! statistics) computed on the box crop resampled at every grid factor.

use std::f32::consts::PI;
use std::fs;
use std::path::Path;

use super::{DescriptorBlock, InstanceDescriptors, ScaleGrid};
use crate::dataset::BoundingBox;
use crate::error::{Error, Result};

/// Side of the square patch, in resampled pixels.
pub const PATCH: usize = 8;
const CELLS: usize = 2;
const CELL: usize = PATCH / CELLS;
const ORIENTATIONS: usize = 7;
/// 2×2 cells × 7 orientations + mean, std, mean |gx|, mean |gy|.
pub const TOY_DIM: usize = CELLS * CELLS * ORIENTATIONS + 4;

/// Single-channel image, row-major, values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LumaImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl LumaImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::Validation(format!(
                "image data has {} values for {width}×{height}",
                data.len()
            )));
        }
        Ok(LumaImage { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let data = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        LumaImage { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    fn at(&self, x: isize, y: isize) -> f32 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.data[y * self.width + x]
    }

    /// Bilinear sample at continuous coordinates where pixel `(i, j)`
    /// covers `[i, i+1) × [j, j+1)`; out-of-range samples clamp to the edge.
    pub fn sample(&self, x: f64, y: f64) -> f32 {
        let fx = x - 0.5;
        let fy = y - 0.5;
        let x0 = fx.floor();
        let y0 = fy.floor();
        let tx = (fx - x0) as f32;
        let ty = (fy - y0) as f32;
        let (x0, y0) = (x0 as isize, y0 as isize);
        let lerp = |a: f32, b: f32, t: f32| a + (b - a) * t;
        let top = lerp(self.at(x0, y0), self.at(x0 + 1, y0), tx);
        let bottom = lerp(self.at(x0, y0 + 1), self.at(x0 + 1, y0 + 1), tx);
        lerp(top, bottom, ty)
    }

    /// Reads an 8-bit binary PGM (`P5`) file, scaling values to `[0, 1]`.
    pub fn read_pgm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        parse_pgm(&bytes).map_err(|msg| Error::Parse {
            path: path.to_path_buf(),
            message: msg,
        })
    }
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<LumaImage, String> {
    let mut fields = Vec::with_capacity(4);
    let mut at = 0;
    while fields.len() < 4 {
        while at < bytes.len() && bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if at < bytes.len() && bytes[at] == b'#' {
            while at < bytes.len() && bytes[at] != b'\n' {
                at += 1;
            }
            continue;
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if start == at {
            return Err("truncated PGM header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..at]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(format!("unsupported PGM magic {:?}", fields[0]));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|e| format!("bad PGM header field {s:?}: {e}"));
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(format!("only 8-bit PGM is supported (maxval {maxval})"));
    }
    let pixels = bytes.get(at + 1..).unwrap_or_default();
    if pixels.len() != width * height {
        return Err(format!("expected {} pixel bytes, found {}", width * height, pixels.len()));
    }
    let scale = 1.0 / maxval as f32;
    LumaImage::new(width, height, pixels.iter().map(|&p| p as f32 * scale).collect()).map_err(|e| e.to_string())
}

/// Resamples the `bbox` crop of `image` by `factor`.
fn resample_crop(image: &LumaImage, bbox: BoundingBox, factor: f64) -> (usize, usize, Vec<f32>) {
    let w = (bbox.w * factor).floor().max(0.0) as usize;
    let h = (bbox.h * factor).floor().max(0.0) as usize;
    let mut out = Vec::with_capacity(w * h);
    for v in 0..h {
        let y = bbox.y + (v as f64 + 0.5) / factor;
        for u in 0..w {
            let x = bbox.x + (u as f64 + 0.5) / factor;
            out.push(image.sample(x, y));
        }
    }
    (w, h, out)
}

fn gradients(w: usize, h: usize, px: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let at = |x: isize, y: isize| px[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize];
    let mut gx = Vec::with_capacity(w * h);
    let mut gy = Vec::with_capacity(w * h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            gx.push(0.5 * (at(x + 1, y) - at(x - 1, y)));
            gy.push(0.5 * (at(x, y + 1) - at(x, y - 1)));
        }
    }
    (gx, gy)
}

fn patch_descriptor(w: usize, px: &[f32], gx: &[f32], gy: &[f32], ox: usize, oy: usize, out: &mut Vec<f32>) {
    let start = out.len();
    out.resize(start + TOY_DIM, 0.0);
    let desc = &mut out[start..];
    let norm = 1.0 / (CELL * CELL) as f32;
    let (mut sum, mut sum_sq, mut sum_gx, mut sum_gy) = (0.0f32, 0.0f32, 0.0f32, 0.0f32);
    for dy in 0..PATCH {
        for dx in 0..PATCH {
            let i = (oy + dy) * w + ox + dx;
            let (vx, vy, v) = (gx[i], gy[i], px[i]);
            sum += v;
            sum_sq += v * v;
            sum_gx += vx.abs();
            sum_gy += vy.abs();
            let mag = (vx * vx + vy * vy).sqrt();
            if mag == 0.0 {
                continue;
            }
            // Linear interpolation between the two nearest orientation bins.
            let angle = vy.atan2(vx).rem_euclid(2.0 * PI);
            let pos = angle / (2.0 * PI) * ORIENTATIONS as f32;
            let lo = (pos.floor() as usize) % ORIENTATIONS;
            let hi = (lo + 1) % ORIENTATIONS;
            let t = pos - pos.floor();
            let cell = (dy / CELL) * CELLS + dx / CELL;
            desc[cell * ORIENTATIONS + lo] += (1.0 - t) * mag * norm;
            desc[cell * ORIENTATIONS + hi] += t * mag * norm;
        }
    }
    let n = (PATCH * PATCH) as f32;
    let mean = sum / n;
    let base = CELLS * CELLS * ORIENTATIONS;
    desc[base] = mean;
    desc[base + 1] = (sum_sq / n - mean * mean).max(0.0).sqrt();
    desc[base + 2] = sum_gx / n;
    desc[base + 3] = sum_gy / n;
}

/// Dense toy descriptors of the `bbox` crop (normally the expanded box) at
/// every grid factor. Scales where the resampled crop is smaller than one
/// patch yield empty blocks. Positions are patch centers in crop pixels.
pub fn toy_extract(
    instance_id: &str,
    image: &LumaImage,
    bbox: BoundingBox,
    grid: &ScaleGrid,
    stride: usize,
) -> Result<InstanceDescriptors> {
    if stride == 0 {
        return Err(Error::Config("extraction stride must be at least 1".into()));
    }
    if !bbox.is_valid() {
        return Err(Error::Validation(format!("instance {instance_id:?}: invalid bbox")));
    }
    let blocks = grid
        .factors()
        .iter()
        .map(|&f| {
            let (w, h, px) = resample_crop(image, bbox, f);
            let mut block = DescriptorBlock::empty(f as f32);
            if w < PATCH || h < PATCH {
                return block;
            }
            let (gx, gy) = gradients(w, h, &px);
            for oy in (0..=h - PATCH).step_by(stride) {
                for ox in (0..=w - PATCH).step_by(stride) {
                    let cx = (ox as f64 + PATCH as f64 / 2.0) / f;
                    let cy = (oy as f64 + PATCH as f64 / 2.0) / f;
                    block.positions.push([cx as f32, cy as f32]);
                    patch_descriptor(w, &px, &gx, &gy, ox, oy, &mut block.descriptors);
                }
            }
            block
        })
        .collect();
    InstanceDescriptors::new(instance_id, TOY_DIM, blocks)
}

/// Procedural test image for instances without image files: a few smooth
/// blobs and stripes whose layout is a hash of `key`.
pub fn procedural_image(key: &str, width: usize, height: usize) -> LumaImage {
    // FNV-1a
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in key.bytes() {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    let mut next = move || {
        hash ^= hash << 13;
        hash ^= hash >> 7;
        hash ^= hash << 17;
        (hash >> 11) as f32 / (1u64 << 53) as f32
    };
    let blobs: Vec<[f32; 4]> = (0..6)
        .map(|_| {
            [
                next() * width as f32,
                next() * height as f32,
                4.0 + next() * 0.2 * width.min(height) as f32,
                next() - 0.5,
            ]
        })
        .collect();
    let freq = 0.02 + 0.2 * next();
    let phase = next() * 2.0 * PI;
    LumaImage::from_fn(width, height, |x, y| {
        let (xf, yf) = (x as f32, y as f32);
        let mut v = 0.5 + 0.15 * (freq * (xf + 0.5 * yf) + phase).sin();
        for [bx, by, r, a] in &blobs {
            let d2 = ((xf - bx).powi(2) + (yf - by).powi(2)) / (r * r);
            v += a * (-d2).exp();
        }
        v
    })
}
