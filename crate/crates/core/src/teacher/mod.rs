//! Teachers turn one box prompt into one binary mask.
//!
//! The [`Teacher`] trait is the adapter boundary: any promptable segmenter
//! that accepts an RGB image plus a pixel box and answers with a single
//! binary mask can be plugged in. [`foundation`] holds the reference adapter
//! for an external service; the remaining teachers are deterministic oracles
//! used for testing and the synthetic benchmark.

pub mod foundation;

use std::collections::HashMap;
use std::path::PathBuf;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::annotations::PixelBox;
use crate::error::{Error, Result};
use crate::labels::{BinaryMask, LabelMap};
use crate::synthetic::{noisy_box_mask, NoiseProfile};

pub use foundation::FoundationTeacher;

/// Environment variable that overrides the foundation teacher endpoint.
pub const TEACHER_ENDPOINT_ENV: &str = "BOXDISTILL_TEACHER_ENDPOINT";

/// Everything a teacher sees for one prompt.
#[derive(Debug, Clone, Copy)]
pub struct TeacherRequest<'a> {
    pub image_id: &'a str,
    pub image: &'a RgbImage,
    pub pixel_box: PixelBox,
    pub class_id: u32,
    pub box_index: usize,
    pub boxes_in_image: usize,
}

pub trait Teacher: Send + Sync {
    /// Identifies the teacher and its settings; part of the cache key.
    fn fingerprint(&self) -> String;

    /// Returns one mask with the image's dimensions.
    fn segment(&self, req: &TeacherRequest<'_>) -> Result<BinaryMask>;
}

/// A teacher's answer for one box.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TeacherMask {
    pub mask: BinaryMask,
    pub source_box_index: usize,
    pub class_id: u32,
}

/// Queries `teacher` for one box and optionally clips the mask to the box.
pub fn generate_mask(
    teacher: &dyn Teacher,
    req: &TeacherRequest<'_>,
    clip_to_box: bool,
) -> Result<TeacherMask> {
    let (w, h) = req.image.dimensions();
    if !req.pixel_box.is_valid_for(w, h) {
        return Err(Error::invalid(format!(
            "box {:?} outside {w}x{h} image `{}`",
            req.pixel_box, req.image_id
        )));
    }
    let mut mask = teacher.segment(req)?;
    if mask.dims() != (w, h) {
        return Err(Error::Teacher {
            message: format!(
                "teacher returned a {}x{} mask for a {w}x{h} image",
                mask.width(),
                mask.height()
            ),
            retriable: false,
        });
    }
    if clip_to_box {
        mask.clip_to(req.pixel_box);
    }
    Ok(TeacherMask {
        mask,
        source_box_index: req.box_index,
        class_id: req.class_id,
    })
}

/// Serializable teacher selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
#[derive(Default)]
pub enum TeacherKind {
    /// External promptable segmenter reached over HTTP or a local runner program.
    Foundation {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        endpoint: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        command: Option<PathBuf>,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
        #[serde(default = "default_retries")]
        retries: u32,
    },
    /// The whole box is foreground.
    #[default]
    OracleBoxfill,
    /// Ground-truth pixels of the box's class inside the box.
    OracleGt { gt_dir: PathBuf },
    /// Ground truth corrupted by a [`NoiseProfile`].
    SyntheticNoisy {
        gt_dir: PathBuf,
        #[serde(default)]
        noise: NoiseProfile,
        #[serde(default)]
        seed: u64,
    },
}

fn default_timeout() -> u64 {
    60
}

fn default_retries() -> u32 {
    2
}

impl TeacherKind {
    /// Applies [`TEACHER_ENDPOINT_ENV`] to a foundation teacher, if set.
    pub fn with_env_override(mut self) -> Self {
        if let TeacherKind::Foundation { endpoint, .. } = &mut self {
            if let Ok(v) = std::env::var(TEACHER_ENDPOINT_ENV) {
                if !v.trim().is_empty() {
                    *endpoint = Some(v);
                }
            }
        }
        self
    }

    pub fn build(&self) -> Result<Box<dyn Teacher>> {
        Ok(match self {
            TeacherKind::Foundation {
                endpoint,
                command,
                timeout_secs,
                retries,
            } => {
                let backend = match (endpoint, command) {
                    (Some(url), _) => foundation::Backend::Http(url.clone()),
                    (None, Some(cmd)) => foundation::Backend::Command(cmd.clone()),
                    (None, None) => {
                        return Err(Error::config(format!(
                            "foundation teacher needs `endpoint` or `command` (or ${TEACHER_ENDPOINT_ENV})"
                        )))
                    }
                };
                Box::new(FoundationTeacher::new(
                    backend,
                    std::time::Duration::from_secs(*timeout_secs),
                    *retries,
                ))
            }
            TeacherKind::OracleBoxfill => Box::new(BoxFillTeacher),
            TeacherKind::OracleGt { gt_dir } => {
                Box::new(GroundTruthTeacher::new(GtSource::Dir(gt_dir.clone())))
            }
            TeacherKind::SyntheticNoisy {
                gt_dir,
                noise,
                seed,
            } => Box::new(NoisyTeacher::new(
                GtSource::Dir(gt_dir.clone()),
                noise.clone(),
                *seed,
            )?),
        })
    }
}

/// Fills the prompt box.
#[derive(Debug, Clone, Copy, Default)]
pub struct BoxFillTeacher;

impl Teacher for BoxFillTeacher {
    fn fingerprint(&self) -> String {
        "oracle_boxfill".into()
    }

    fn segment(&self, req: &TeacherRequest<'_>) -> Result<BinaryMask> {
        let (w, h) = req.image.dimensions();
        Ok(BinaryMask::from_box(w, h, req.pixel_box))
    }
}

/// Where oracle teachers find ground-truth label maps.
#[derive(Debug, Clone)]
pub enum GtSource {
    /// `<dir>/<image_id>.png`
    Dir(PathBuf),
    Memory(HashMap<String, LabelMap>),
}

impl GtSource {
    fn load(&self, image_id: &str) -> Result<LabelMap> {
        match self {
            GtSource::Dir(dir) => {
                let path = dir.join(format!("{image_id}.png"));
                if !path.exists() {
                    return Err(Error::MissingMask(image_id.to_string()));
                }
                LabelMap::read_png(&path)
            }
            GtSource::Memory(map) => map
                .get(image_id)
                .cloned()
                .ok_or_else(|| Error::MissingMask(image_id.to_string())),
        }
    }

    fn describe(&self) -> String {
        match self {
            GtSource::Dir(d) => d.display().to_string(),
            GtSource::Memory(m) => format!("memory:{}", m.len()),
        }
    }
}

/// Returns ground-truth pixels of the prompted class inside the box.
#[derive(Debug, Clone)]
pub struct GroundTruthTeacher {
    gt: GtSource,
}

impl GroundTruthTeacher {
    pub fn new(gt: GtSource) -> Self {
        GroundTruthTeacher { gt }
    }
}

pub(crate) fn class_region(gt: &LabelMap, rect: PixelBox, class_id: u32) -> BinaryMask {
    let label = class_id as u8 + 1;
    let mut m = BinaryMask::new(gt.width(), gt.height());
    for y in rect.y0..rect.y1 {
        for x in rect.x0..rect.x1 {
            if gt.get(x, y) == label {
                m.set(x, y, true);
            }
        }
    }
    m
}

fn check_gt_dims(gt: &LabelMap, req: &TeacherRequest<'_>) -> Result<()> {
    if gt.dims() != req.image.dimensions() {
        return Err(Error::shape(format!(
            "ground truth for `{}` is {:?}, image is {:?}",
            req.image_id,
            gt.dims(),
            req.image.dimensions()
        )));
    }
    Ok(())
}

impl Teacher for GroundTruthTeacher {
    fn fingerprint(&self) -> String {
        format!("oracle_gt:{}", self.gt.describe())
    }

    fn segment(&self, req: &TeacherRequest<'_>) -> Result<BinaryMask> {
        let gt = self.gt.load(req.image_id)?;
        check_gt_dims(&gt, req)?;
        Ok(class_region(&gt, req.pixel_box, req.class_id))
    }
}

/// Ground truth passed through the synthetic failure model: components
/// dropped or eroded (false negatives) and spurious blobs (false positives).
/// Each box draws from its own RNG stream keyed by `(seed, image_id, box_index)`.
#[derive(Debug, Clone)]
pub struct NoisyTeacher {
    gt: GtSource,
    noise: NoiseProfile,
    seed: u64,
}

impl NoisyTeacher {
    pub fn new(gt: GtSource, noise: NoiseProfile, seed: u64) -> Result<Self> {
        noise.validate()?;
        Ok(NoisyTeacher { gt, noise, seed })
    }
}

impl Teacher for NoisyTeacher {
    fn fingerprint(&self) -> String {
        format!(
            "synthetic_noisy:{}:{}:{}",
            self.gt.describe(),
            serde_json::to_string(&self.noise).unwrap_or_default(),
            self.seed
        )
    }

    fn segment(&self, req: &TeacherRequest<'_>) -> Result<BinaryMask> {
        let gt = self.gt.load(req.image_id)?;
        check_gt_dims(&gt, req)?;
        Ok(noisy_box_mask(&gt, req, &self.noise, self.seed))
    }
}
