//! Dataset manifests: categories, person instances with their boxes, and
//! the train-split mean box used by relative scale coding.
//!
//! Manifest JSON schema:
//!
//! ```json
//! {
//!   "categories": ["riding", "running"],
//!   "images": [{"id": "img0", "width": 640, "height": 480}],
//!   "train": [{"instance_id": "img0_p0", "image_id": "img0",
//!              "bbox": [x, y, w, h], "labels": [0]}],
//!   "test": []
//! }
//! ```
//!
//! `bbox` is `[left, top, width, height]` in pixels; `labels` are indices
//! into `categories`. `mean_box` is never stored: it is recomputed from the
//! original (unexpanded) train boxes on load.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default context expansion: total size ×1.5, i.e. 25% added per side.
pub const DEFAULT_EXPANSION: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BoundingBox {
    fn from([x, y, w, h]: [f64; 4]) -> Self {
        BoundingBox { x, y, w, h }
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BoundingBox { x, y, w, h }
    }

    pub fn is_valid(&self) -> bool {
        [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) && self.w > 0.0 && self.h > 0.0
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    /// Boundary half-length `w + h`, the size measure relative scale uses.
    pub fn perimeter_half(&self) -> f64 {
        self.w + self.h
    }

    fn intersects_image(&self, image_w: f64, image_h: f64) -> bool {
        self.x < image_w && self.x + self.w > 0.0 && self.y < image_h && self.y + self.h > 0.0
    }
}

/// Grows `bbox` about its center by `factor` in both dimensions and clamps
/// the result to the image rectangle. Coordinates may become fractional.
pub fn expand_bbox_by(bbox: BoundingBox, image_w: f64, image_h: f64, factor: f64) -> BoundingBox {
    let (cx, cy) = bbox.center();
    let half_w = 0.5 * factor * bbox.w;
    let half_h = 0.5 * factor * bbox.h;
    let x0 = (cx - half_w).max(0.0);
    let y0 = (cy - half_h).max(0.0);
    let x1 = (cx + half_w).min(image_w);
    let y1 = (cy + half_h).min(image_h);
    BoundingBox::new(x0, y0, x1 - x0, y1 - y0)
}

pub fn expand_bbox(bbox: BoundingBox, image_w: f64, image_h: f64) -> BoundingBox {
    expand_bbox_by(bbox, image_w, image_h, DEFAULT_EXPANSION)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanBox {
    pub w: f64,
    pub h: f64,
}

impl MeanBox {
    pub fn perimeter_half(&self) -> f64 {
        self.w + self.h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: String,
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub instance_id: String,
    pub image_id: String,
    pub image_w: f64,
    pub image_h: f64,
    pub bbox: BoundingBox,
    /// Sorted, deduplicated category indices.
    pub labels: Vec<usize>,
}

impl Instance {
    pub fn expanded_bbox(&self, factor: f64) -> BoundingBox {
        expand_bbox_by(self.bbox, self.image_w, self.image_h, factor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub categories: Vec<String>,
    pub images: Vec<ImageInfo>,
    pub train: Vec<Instance>,
    pub test: Vec<Instance>,
    pub mean_box: MeanBox,
}

/// Arithmetic mean of box widths and heights.
pub fn compute_mean_box(train: &[Instance]) -> Result<MeanBox> {
    if train.is_empty() {
        return Err(Error::Validation("cannot compute mean box of an empty train split".into()));
    }
    let n = train.len() as f64;
    let (sw, sh) = train
        .iter()
        .fold((0.0, 0.0), |(sw, sh), i| (sw + i.bbox.w, sh + i.bbox.h));
    Ok(MeanBox { w: sw / n, h: sh / n })
}

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    instance_id: String,
    image_id: String,
    bbox: BoundingBox,
    labels: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    categories: Vec<String>,
    images: Vec<ImageInfo>,
    train: Vec<InstanceRecord>,
    test: Vec<InstanceRecord>,
}

impl DatasetManifest {
    /// Builds and validates a manifest; `mean_box` is computed from `train`.
    pub fn new(
        categories: Vec<String>,
        images: Vec<ImageInfo>,
        train: Vec<Instance>,
        test: Vec<Instance>,
    ) -> Result<Self> {
        let mean_box = compute_mean_box(&train)?;
        let m = DatasetManifest {
            categories,
            images,
            train,
            test,
            mean_box,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn split(&self, split: Split) -> &[Instance] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn instances(&self) -> impl Iterator<Item = &Instance> {
        self.train.iter().chain(self.test.iter())
    }

    fn validate(&self) -> Result<()> {
        if self.categories.is_empty() {
            return Err(Error::Validation("category list is empty".into()));
        }
        let mut names = HashSet::new();
        for c in &self.categories {
            if !names.insert(c.as_str()) {
                return Err(Error::Validation(format!("duplicate category name {c:?}")));
            }
        }
        let mut ids = HashSet::new();
        for inst in self.instances() {
            if !ids.insert(inst.instance_id.as_str()) {
                return Err(Error::Validation(format!("duplicate instance id {:?}", inst.instance_id)));
            }
            if !inst.bbox.is_valid() {
                return Err(Error::Validation(format!(
                    "instance {:?}: bbox must have positive width and height",
                    inst.instance_id
                )));
            }
            if !inst.bbox.intersects_image(inst.image_w, inst.image_h) {
                return Err(Error::Validation(format!(
                    "instance {:?}: bbox does not intersect its image",
                    inst.instance_id
                )));
            }
            if let Some(&l) = inst.labels.iter().find(|&&l| l >= self.categories.len()) {
                return Err(Error::Validation(format!(
                    "instance {:?}: label {l} out of range",
                    inst.instance_id
                )));
            }
        }
        Ok(())
    }

    pub fn from_json_str(text: &str, origin: &Path) -> Result<Self> {
        let file: ManifestFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut dims = HashMap::new();
        for img in &file.images {
            if !(img.width > 0.0 && img.height > 0.0) {
                return Err(Error::Validation(format!("image {:?} has non-positive size", img.id)));
            }
            if dims.insert(img.id.clone(), (img.width, img.height)).is_some() {
                return Err(Error::Validation(format!("duplicate image id {:?}", img.id)));
            }
        }
        let resolve = |records: Vec<InstanceRecord>| -> Result<Vec<Instance>> {
            records
                .into_iter()
                .map(|r| {
                    let &(image_w, image_h) = dims.get(&r.image_id).ok_or_else(|| {
                        Error::Validation(format!(
                            "instance {:?} references unknown image {:?}",
                            r.instance_id, r.image_id
                        ))
                    })?;
                    let labels: BTreeSet<usize> = r.labels.into_iter().collect();
                    Ok(Instance {
                        instance_id: r.instance_id,
                        image_id: r.image_id,
                        image_w,
                        image_h,
                        bbox: r.bbox,
                        labels: labels.into_iter().collect(),
                    })
                })
                .collect()
        };
        let train = resolve(file.train)?;
        let test = resolve(file.test)?;
        DatasetManifest::new(file.categories, file.images, train, test)
    }

    pub fn to_json_string(&self) -> String {
        let record = |i: &Instance| InstanceRecord {
            instance_id: i.instance_id.clone(),
            image_id: i.image_id.clone(),
            bbox: i.bbox,
            labels: i.labels.clone(),
        };
        let file = ManifestFile {
            categories: self.categories.clone(),
            images: self.images.clone(),
            train: self.train.iter().map(record).collect(),
            test: self.test.iter().map(record).collect(),
        };
        serde_json::to_string_pretty(&file).expect("manifest serializes")
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    DatasetManifest::from_json_str(&text, path)
}

pub fn save_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, manifest.to_json_string()).map_err(|e| Error::io(path, e))
}

/// One recorded read of a split's labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelAccess {
    pub split: Split,
    pub stage: &'static str,
}

/// Gatekeeper for label reads. Pipeline stages fetch labels only through
/// this, so the log shows which stage touched which split.
#[derive(Debug, Default)]
pub struct LabelAudit {
    log: Mutex<Vec<LabelAccess>>,
}

impl LabelAudit {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn labels(&self, manifest: &DatasetManifest, split: Split, stage: &'static str) -> Vec<Vec<usize>> {
        self.log.lock().unwrap().push(LabelAccess { split, stage });
        manifest.split(split).iter().map(|i| i.labels.clone()).collect()
    }

    pub fn accesses(&self) -> Vec<LabelAccess> {
        self.log.lock().unwrap().clone()
    }
}
