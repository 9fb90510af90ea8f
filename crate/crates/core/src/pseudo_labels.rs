//! Rasterizing per-box teacher masks into label maps, and the offline cache.
//!
//! Cache layout: `<cache_root>/<fingerprint>/<image_id>.png`, one 8-bit
//! grayscale PNG per image whose pixel values are class labels `0..=K`. The
//! fingerprint covers the teacher, the overlap policy and box clipping, so a
//! change of teacher never reuses stale masks.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotations::{box_to_pixels, DatasetManifest, ImageRecord, Split};
use crate::error::{Error, Result};
use crate::labels::{LabelMap, PseudoLabelMap};
use crate::teacher::{generate_mask, Teacher, TeacherMask, TeacherRequest};

/// How pixels claimed by several masks are labeled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapPolicy {
    /// The larger label wins. List safety-critical classes last in the
    /// manifest so they outrank cosmetic ones.
    #[default]
    HighestClassPriority,
    /// The mask that comes later in the list wins.
    LastWins,
    /// The mask that comes first in the list wins.
    FirstWins,
}

impl OverlapPolicy {
    pub fn as_str(&self) -> &'static str {
        match self {
            OverlapPolicy::HighestClassPriority => "highest_class_priority",
            OverlapPolicy::LastWins => "last_wins",
            OverlapPolicy::FirstWins => "first_wins",
        }
    }
}

/// Paints `masks` into a `width x height` label map: class id `c` becomes
/// label `c + 1`, untouched pixels stay 0.
pub fn rasterize(
    masks: &[TeacherMask],
    width: u32,
    height: u32,
    policy: OverlapPolicy,
) -> Result<PseudoLabelMap> {
    let mut out = LabelMap::zeros(width, height);
    for (i, tm) in masks.iter().enumerate() {
        if tm.mask.dims() != (width, height) {
            return Err(Error::shape(format!(
                "mask {i} is {}x{}, expected {width}x{height}",
                tm.mask.width(),
                tm.mask.height()
            )));
        }
        if tm.class_id > 254 {
            return Err(Error::invalid(format!(
                "class id {} does not fit a label map",
                tm.class_id
            )));
        }
    }
    let labels = out.as_mut_slice();
    for tm in masks {
        let label = tm.class_id as u8 + 1;
        for (dst, &on) in labels.iter_mut().zip(tm.mask.as_slice()) {
            if !on {
                continue;
            }
            *dst = match policy {
                OverlapPolicy::HighestClassPriority => (*dst).max(label),
                OverlapPolicy::LastWins => label,
                OverlapPolicy::FirstWins if *dst == 0 => label,
                OverlapPolicy::FirstWins => *dst,
            };
        }
    }
    Ok(out)
}

/// Settings that change what ends up in the cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelOptions {
    #[serde(default)]
    pub overlap_policy: OverlapPolicy,
    #[serde(default = "yes")]
    pub clip_to_box: bool,
}

fn yes() -> bool {
    true
}

impl Default for PseudoLabelOptions {
    fn default() -> Self {
        PseudoLabelOptions {
            overlap_policy: OverlapPolicy::default(),
            clip_to_box: true,
        }
    }
}

/// Directory name for a teacher + options combination.
pub fn cache_fingerprint(teacher_fingerprint: &str, opts: &PseudoLabelOptions) -> String {
    let kind: String = teacher_fingerprint
        .split(':')
        .next()
        .unwrap_or("teacher")
        .chars()
        .filter(|c| c.is_ascii_alphanumeric() || *c == '_')
        .collect();
    let key = format!(
        "{teacher_fingerprint}|{}|clip={}",
        opts.overlap_policy.as_str(),
        opts.clip_to_box
    );
    format!("{kind}-{}", crate::util::short_hash(&key))
}

/// Pseudo-label store for one fingerprint.
#[derive(Debug, Clone)]
pub struct LabelCache {
    root: PathBuf,
    fingerprint: String,
    num_classes: usize,
}

impl LabelCache {
    pub fn new(
        cache_root: impl Into<PathBuf>,
        fingerprint: impl Into<String>,
        num_classes: usize,
    ) -> Self {
        LabelCache {
            root: cache_root.into(),
            fingerprint: fingerprint.into(),
            num_classes,
        }
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dir(&self) -> PathBuf {
        self.root.join(&self.fingerprint)
    }

    pub fn path_for(&self, image_id: &str) -> PathBuf {
        self.dir().join(format!("{image_id}.png"))
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.path_for(image_id).is_file()
    }

    /// Validates labels against K, then writes atomically.
    pub fn store(&self, image_id: &str, map: &PseudoLabelMap) -> Result<()> {
        crate::annotations::validate_image_id(image_id)?;
        map.validate(self.num_classes)?;
        map.write_png(&self.path_for(image_id))
    }

    /// `Ok(None)` when the image has no entry.
    pub fn load(&self, image_id: &str) -> Result<Option<PseudoLabelMap>> {
        let path = self.path_for(image_id);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let map = LabelMap::from_png_bytes(&bytes).map_err(|e| Error::CacheIntegrity {
            path: path.clone(),
            message: e.to_string(),
        })?;
        map.validate(self.num_classes)
            .map_err(|e| Error::CacheIntegrity {
                path: path.clone(),
                message: e.to_string(),
            })?;
        Ok(Some(map))
    }

    /// Like [`load`](Self::load) but a missing entry is an error naming the image.
    pub fn require(&self, image_id: &str) -> Result<PseudoLabelMap> {
        self.load(image_id)?
            .ok_or_else(|| Error::CacheMiss(image_id.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageFailure {
    pub image_id: String,
    pub message: String,
    pub retriable: bool,
}

/// Summary of a pseudo-labeling run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabelReport {
    pub fingerprint: String,
    pub images: usize,
    pub boxes: usize,
    pub empty_masks: usize,
    pub generated: usize,
    pub cache_hits: usize,
    pub failures: Vec<ImageFailure>,
}

/// Teacher masks for every box of one image, in box order.
pub fn teacher_masks_for(
    teacher: &dyn Teacher,
    image_id: &str,
    image: &image::RgbImage,
    record_boxes: &[crate::annotations::BoxAnnotation],
    clip_to_box: bool,
) -> Result<Vec<TeacherMask>> {
    let (w, h) = image.dimensions();
    record_boxes
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let req = TeacherRequest {
                image_id,
                image,
                pixel_box: box_to_pixels(b, w, h),
                class_id: b.class_id,
                box_index: i,
                boxes_in_image: record_boxes.len(),
            };
            generate_mask(teacher, &req, clip_to_box)
        })
        .collect()
}

/// Generates and caches pseudo-labels for every train and val image.
///
/// Images already in the cache are skipped. Teacher failures are recorded per
/// image and do not stop the run.
pub fn build_pseudo_labels(
    manifest: &DatasetManifest,
    teacher: &dyn Teacher,
    opts: &PseudoLabelOptions,
    cache: &LabelCache,
) -> PseudoLabelReport {
    let records: Vec<&ImageRecord> = manifest
        .records
        .iter()
        .filter(|r| matches!(r.split, Split::Train | Split::Val))
        .collect();
    let empty = AtomicUsize::new(0);
    let hits = AtomicUsize::new(0);
    let outcomes: Vec<(String, Result<bool>)> = records
        .par_iter()
        .map(|rec| {
            let res = label_one(manifest, rec, teacher, opts, cache, &empty, &hits);
            (rec.image_id.clone(), res)
        })
        .collect();
    let mut report = PseudoLabelReport {
        fingerprint: cache.fingerprint().to_string(),
        images: records.len(),
        boxes: records.iter().map(|r| r.boxes.len()).sum(),
        ..Default::default()
    };
    for (image_id, res) in outcomes {
        match res {
            Ok(true) => report.generated += 1,
            Ok(false) => {}
            Err(e) => {
                let retriable = matches!(
                    e,
                    Error::Teacher {
                        retriable: true,
                        ..
                    }
                );
                log::warn!("pseudo-labeling `{image_id}` failed: {e}");
                report.failures.push(ImageFailure {
                    image_id,
                    message: e.to_string(),
                    retriable,
                });
            }
        }
    }
    report.empty_masks = empty.into_inner();
    report.cache_hits = hits.into_inner();
    report
}

fn label_one(
    manifest: &DatasetManifest,
    rec: &ImageRecord,
    teacher: &dyn Teacher,
    opts: &PseudoLabelOptions,
    cache: &LabelCache,
    empty: &AtomicUsize,
    hits: &AtomicUsize,
) -> Result<bool> {
    if cache.contains(&rec.image_id) {
        hits.fetch_add(1, Ordering::Relaxed);
        return Ok(false);
    }
    let map = if rec.boxes.is_empty() {
        LabelMap::zeros(rec.width, rec.height)
    } else {
        let image = load_rgb(&manifest.image_file(rec))?;
        if image.dimensions() != (rec.width, rec.height) {
            return Err(Error::shape(format!(
                "image `{}` is {:?}, manifest says {}x{}",
                rec.image_id,
                image.dimensions(),
                rec.width,
                rec.height
            )));
        }
        let masks =
            teacher_masks_for(teacher, &rec.image_id, &image, &rec.boxes, opts.clip_to_box)?;
        empty.fetch_add(
            masks.iter().filter(|m| m.mask.is_empty()).count(),
            Ordering::Relaxed,
        );
        rasterize(&masks, rec.width, rec.height, opts.overlap_policy)?
    };
    cache.store(&rec.image_id, &map)?;
    Ok(true)
}

pub(crate) fn load_rgb(path: &Path) -> Result<image::RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}
