//! Desk-scale synthetic defect scenes and a controllable noisy teacher.
//!
//! Scenes are textured gray surfaces carrying two defect classes: thin dark
//! polyline strokes ("damage", 1-3 px wide) and soft brownish elliptical
//! blobs ("dirt"). Every defect instance is a ground-truth component with a
//! tight bounding box. The [`NoiseProfile`] reproduces the teacher failure
//! modes that matter for self-correction: whole components missed, thin
//! structures eroded away, spurious blobs inside boxes, and defects that never
//! received a box.

pub mod ablation;

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::annotations::{
    save_manifest, BoxAnnotation, DatasetManifest, ImageRecord, PixelBox, Split,
};
use crate::error::{Error, Result};
use crate::labels::{BinaryMask, LabelMap};
use crate::morphology::{connected_components, erode};
use crate::pseudo_labels::{rasterize, OverlapPolicy};
use crate::teacher::{class_region, TeacherKind, TeacherMask, TeacherRequest};
use crate::util::derive_seed;

pub use ablation::{
    format_paired, run_ablation, run_paired, AblationOutcome, AblationSetup, PairedReport,
    PairedRow,
};

/// Class names of the synthetic benchmark; label 2 (damage) outranks label 1.
pub const SYNTHETIC_CLASSES: [&str; 2] = ["dirt", "damage"];
pub const DIRT: u32 = 0;
pub const DAMAGE: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub image_size: u32,
    /// Std-dev of per-pixel Gaussian texture noise (intensity units in [0, 1]).
    pub noise_scale: f32,
    /// Peak-to-peak amplitude of the illumination gradient.
    pub gradient_strength: f32,
    /// Probability that an image carries at least one defect.
    pub defect_image_fraction: f64,
    pub max_defects: u32,
    /// Probability that a defect is a damage stroke rather than a dirt blob.
    pub damage_fraction: f64,
    pub stroke_min_len: f32,
    pub stroke_max_len: f32,
    pub stroke_max_width: u32,
    pub blob_min_radius: f32,
    pub blob_max_radius: f32,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            image_size: 128,
            noise_scale: 0.03,
            gradient_strength: 0.15,
            defect_image_fraction: 0.6,
            max_defects: 3,
            damage_fraction: 0.5,
            stroke_min_len: 16.0,
            stroke_max_len: 44.0,
            stroke_max_width: 3,
            blob_min_radius: 3.0,
            blob_max_radius: 7.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(Error::config("scene image_size must be at least 32"));
        }
        for (name, v) in [
            ("defect_image_fraction", self.defect_image_fraction),
            ("damage_fraction", self.damage_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.stroke_max_width == 0 || self.stroke_min_len > self.stroke_max_len {
            return Err(Error::config("invalid stroke settings"));
        }
        if !(self.blob_min_radius > 0.0 && self.blob_min_radius <= self.blob_max_radius) {
            return Err(Error::config("invalid blob radii"));
        }
        Ok(())
    }
}

/// Synthetic teacher failure model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseProfile {
    /// Probability that a ground-truth component is missing from its box's mask.
    pub fn_component_drop_rate: f64,
    /// Square erosion radius applied to every kept component.
    pub fn_erode_radius: u32,
    /// Expected number of spurious blobs per image, placed inside boxes.
    pub fp_blob_rate: f64,
    /// Probability that a defect receives no bounding box at all.
    pub box_omission_rate: f64,
}

impl Default for NoiseProfile {
    fn default() -> Self {
        NoiseProfile {
            fn_component_drop_rate: 0.3,
            fn_erode_radius: 1,
            fp_blob_rate: 0.5,
            box_omission_rate: 0.15,
        }
    }
}

impl NoiseProfile {
    /// A teacher that reproduces ground truth inside every box.
    pub fn clean() -> Self {
        NoiseProfile {
            fn_component_drop_rate: 0.0,
            fn_erode_radius: 0,
            fp_blob_rate: 0.0,
            box_omission_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("fn_component_drop_rate", self.fn_component_drop_rate),
            ("box_omission_rate", self.box_omission_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.fp_blob_rate >= 0.0 && self.fp_blob_rate.is_finite()) {
            return Err(Error::config(
                "fp_blob_rate must be a finite non-negative number",
            ));
        }
        Ok(())
    }
}

/// One defect instance of a scene.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GtComponent {
    pub class_id: u32,
    /// Pixels whose ground-truth label is this instance's class.
    pub pixels: Vec<(u32, u32)>,
    pub bbox: PixelBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub image: RgbImage,
    pub gt: LabelMap,
    pub components: Vec<GtComponent>,
    /// One tight box per component, same order.
    pub boxes: Vec<BoxAnnotation>,
}

impl SyntheticSample {
    pub fn defect_fraction(&self) -> f64 {
        self.gt.count_nonzero() as f64 / (self.gt.width() as f64 * self.gt.height() as f64)
    }
}

/// Draws one scene. The result depends only on `cfg` and the RNG state.
pub fn generate_scene(cfg: &SceneConfig, rng: &mut impl Rng) -> SyntheticSample {
    let size = cfg.image_size;
    let n = size as usize;
    let mut canvas = background(cfg, rng);
    let mut gt = LabelMap::zeros(size, size);
    // (class, instance mask) in drawing order
    let mut instances: Vec<(u32, BinaryMask)> = Vec::new();

    if rng.gen_bool(cfg.defect_image_fraction) {
        let count = rng.gen_range(1..=cfg.max_defects.max(1));
        for _ in 0..count {
            if rng.gen_bool(cfg.damage_fraction) {
                let mask = draw_stroke(cfg, rng, &mut canvas);
                instances.push((DAMAGE, mask));
            } else {
                let mask = draw_blob(cfg, rng, &mut canvas);
                instances.push((DIRT, mask));
            }
        }
    }

    for (class_id, mask) in &instances {
        let label = *class_id as u8 + 1;
        for (dst, &on) in gt.as_mut_slice().iter_mut().zip(mask.as_slice()) {
            if on {
                *dst = (*dst).max(label);
            }
        }
    }

    let mut components = Vec::new();
    let mut boxes = Vec::new();
    for (class_id, mask) in &instances {
        let label = *class_id as u8 + 1;
        let pixels: Vec<(u32, u32)> = (0..n * n)
            .filter(|&i| mask.as_slice()[i] && gt.as_slice()[i] == label)
            .map(|i| ((i % n) as u32, (i / n) as u32))
            .collect();
        if pixels.is_empty() {
            continue;
        }
        let bbox = tight_box(&pixels);
        boxes.push(BoxAnnotation::from_pixel_box(*class_id, bbox, size, size));
        components.push(GtComponent {
            class_id: *class_id,
            pixels,
            bbox,
        });
    }

    let image = RgbImage::from_fn(size, size, |x, y| {
        let i = (y as usize * n + x as usize) * 3;
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([q(canvas[i]), q(canvas[i + 1]), q(canvas[i + 2])])
    });
    SyntheticSample {
        image,
        gt,
        components,
        boxes,
    }
}

fn tight_box(pixels: &[(u32, u32)]) -> PixelBox {
    let x0 = pixels.iter().map(|p| p.0).min().unwrap();
    let x1 = pixels.iter().map(|p| p.0).max().unwrap() + 1;
    let y0 = pixels.iter().map(|p| p.1).min().unwrap();
    let y1 = pixels.iter().map(|p| p.1).max().unwrap() + 1;
    PixelBox::new(x0, y0, x1, y1)
}

fn background(cfg: &SceneConfig, rng: &mut impl Rng) -> Vec<f32> {
    let n = cfg.image_size as usize;
    let base: f32 = rng.gen_range(0.55..0.8);
    let tint = [
        rng.gen_range(-0.03..0.03f32),
        0.0,
        rng.gen_range(-0.03..0.03f32),
    ];
    let angle: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let noise = Normal::new(0.0f32, cfg.noise_scale.max(1e-6)).expect("positive std");
    let mut out = vec![0f32; n * n * 3];
    for y in 0..n {
        for x in 0..n {
            let t = ((x as f32 / n as f32 - 0.5) * dx + (y as f32 / n as f32 - 0.5) * dy)
                * cfg.gradient_strength;
            let grain = if cfg.noise_scale > 0.0 {
                noise.sample(rng)
            } else {
                0.0
            };
            for c in 0..3 {
                out[(y * n + x) * 3 + c] = base + tint[c] + t + grain;
            }
        }
    }
    out
}

fn draw_stroke(cfg: &SceneConfig, rng: &mut impl Rng, canvas: &mut [f32]) -> BinaryMask {
    let size = cfg.image_size;
    let n = size as i64;
    let width = rng.gen_range(1..=cfg.stroke_max_width) as i64;
    let segments = rng.gen_range(2..=4);
    let total = rng.gen_range(cfg.stroke_min_len..=cfg.stroke_max_len);
    let seg_len = total / segments as f32;
    let margin = 4.0;
    let mut px = rng.gen_range(margin..(size as f32 - margin));
    let mut py = rng.gen_range(margin..(size as f32 - margin));
    let mut heading: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let intensity: f32 = rng.gen_range(0.12..0.3);
    let mut mask = BinaryMask::new(size, size);
    for _ in 0..segments {
        heading += rng.gen_range(-0.7..0.7f32);
        let (ex, ey) = (
            (px + heading.cos() * seg_len).clamp(1.0, size as f32 - 2.0),
            (py + heading.sin() * seg_len).clamp(1.0, size as f32 - 2.0),
        );
        let steps = ((ex - px).abs().max((ey - py).abs()).ceil() as usize).max(1);
        for s in 0..=steps {
            let t = s as f32 / steps as f32;
            let cx = (px + (ex - px) * t).round() as i64;
            let cy = (py + (ey - py) * t).round() as i64;
            // square brush of side `width` anchored at the centerline
            let lo = -(width - 1) / 2;
            for oy in lo..lo + width {
                for ox in lo..lo + width {
                    let (x, y) = (cx + ox, cy + oy);
                    if x >= 0 && y >= 0 && x < n && y < n {
                        mask.set(x as u32, y as u32, true);
                    }
                }
            }
        }
        px = ex;
        py = ey;
    }
    for (i, &on) in mask.as_slice().iter().enumerate() {
        if on {
            for c in 0..3 {
                canvas[i * 3 + c] = intensity;
            }
        }
    }
    mask
}

fn draw_blob(cfg: &SceneConfig, rng: &mut impl Rng, canvas: &mut [f32]) -> BinaryMask {
    let size = cfg.image_size;
    let n = size as usize;
    let ra = rng.gen_range(cfg.blob_min_radius..=cfg.blob_max_radius);
    let rb = rng.gen_range(cfg.blob_min_radius..=cfg.blob_max_radius) * rng.gen_range(0.5..1.0f32);
    let rb = rb.max(cfg.blob_min_radius.min(ra));
    let theta: f32 = rng.gen_range(0.0..std::f32::consts::PI);
    let margin = ra + 1.0;
    let cx = rng.gen_range(margin..(size as f32 - margin));
    let cy = rng.gen_range(margin..(size as f32 - margin));
    let color = [
        rng.gen_range(0.42..0.52f32),
        rng.gen_range(0.30..0.38f32),
        rng.gen_range(0.12..0.22f32),
    ];
    let (c, s) = (theta.cos(), theta.sin());
    let mut mask = BinaryMask::new(size, size);
    let reach = (ra * 1.6).ceil() as i64;
    for y in (cy as i64 - reach).max(0)..(cy as i64 + reach + 1).min(n as i64) {
        for x in (cx as i64 - reach).max(0)..(cx as i64 + reach + 1).min(n as i64) {
            let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
            let u = (dx * c + dy * s) / ra;
            let v = (-dx * s + dy * c) / rb;
            let d2 = u * u + v * v;
            let alpha = 0.9 * (-d2 * d2).exp();
            if alpha < 0.02 {
                continue;
            }
            let i = (y as usize * n + x as usize) * 3;
            for k in 0..3 {
                canvas[i + k] = canvas[i + k] * (1.0 - alpha) + color[k] * alpha;
            }
            if d2 <= 1.0 {
                mask.set(x as u32, y as u32, true);
            }
        }
    }
    mask
}

/// Teacher mask for one box under `noise`, drawn from the RNG stream keyed by
/// `(seed, image_id, box_index)`.
pub fn noisy_box_mask(
    gt: &LabelMap,
    req: &TeacherRequest<'_>,
    noise: &NoiseProfile,
    seed: u64,
) -> BinaryMask {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, req.image_id, req.box_index as u64));
    let (w, h) = gt.dims();
    let rect = req.pixel_box;
    let region = class_region(gt, rect, req.class_id);
    let mut out = BinaryMask::new(w, h);
    for comp in connected_components(&region) {
        if rng.gen_bool(noise.fn_component_drop_rate) {
            continue;
        }
        out.union_with(&erode(&comp.to_mask(w, h), noise.fn_erode_radius));
    }
    let lambda = noise.fp_blob_rate / req.boxes_in_image.max(1) as f64;
    let blobs = if lambda > 0.0 {
        Poisson::new(lambda)
            .map(|p| p.sample(&mut rng) as u32)
            .unwrap_or(0)
    } else {
        0
    };
    for _ in 0..blobs {
        let bx = rng.gen_range(rect.x0 as f32..rect.x1 as f32);
        let by = rng.gen_range(rect.y0 as f32..rect.y1 as f32);
        let rx = rng.gen_range(1.0..3.0f32);
        let ry = rng.gen_range(1.0..3.0f32);
        for y in rect.y0..rect.y1 {
            for x in rect.x0..rect.x1 {
                let (dx, dy) = ((x as f32 + 0.5 - bx) / rx, (y as f32 + 0.5 - by) / ry);
                if dx * dx + dy * dy <= 1.0 {
                    out.set(x, y, true);
                }
            }
        }
    }
    out
}

/// Output of the noisy teacher for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyLabels {
    /// Boxes that survived omission, in component order.
    pub boxes: Vec<BoxAnnotation>,
    /// Index into the scene's components for each kept box.
    pub kept_components: Vec<usize>,
    pub teacher_masks: Vec<TeacherMask>,
    pub pseudo: LabelMap,
}

/// Applies box omission (from `rng`), queries the noisy teacher for every kept
/// box and rasterizes the result.
pub fn corrupt_teacher(
    sample: &SyntheticSample,
    image_id: &str,
    noise: &NoiseProfile,
    teacher_seed: u64,
    rng: &mut impl Rng,
) -> NoisyLabels {
    let (w, h) = sample.gt.dims();
    let mut kept_components = Vec::new();
    for i in 0..sample.components.len() {
        if !rng.gen_bool(noise.box_omission_rate) {
            kept_components.push(i);
        }
    }
    let boxes: Vec<BoxAnnotation> = kept_components.iter().map(|&i| sample.boxes[i]).collect();
    let teacher_masks: Vec<TeacherMask> = kept_components
        .iter()
        .enumerate()
        .map(|(box_index, &ci)| {
            let comp = &sample.components[ci];
            let req = TeacherRequest {
                image_id,
                image: &sample.image,
                pixel_box: crate::annotations::box_to_pixels(&boxes[box_index], w, h),
                class_id: comp.class_id,
                box_index,
                boxes_in_image: boxes.len(),
            };
            let mut mask = noisy_box_mask(&sample.gt, &req, noise, teacher_seed);
            mask.clip_to(req.pixel_box);
            TeacherMask {
                mask,
                source_box_index: box_index,
                class_id: comp.class_id,
            }
        })
        .collect();
    let pseudo = rasterize(&teacher_masks, w, h, OverlapPolicy::HighestClassPriority)
        .expect("masks share the scene dimensions");
    NoisyLabels {
        boxes,
        kept_components,
        teacher_masks,
        pseudo,
    }
}

/// Image counts per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 64,
            val: 16,
            test: 32,
        }
    }
}

/// One generated image with its noisy supervision.
#[derive(Debug, Clone)]
pub struct SyntheticItem {
    pub image_id: String,
    pub split: Split,
    pub sample: SyntheticSample,
    pub labels: NoisyLabels,
}

/// Teacher seed used for a dataset generated from `scene_seed`.
pub fn teacher_seed_for(scene_seed: u64) -> u64 {
    derive_seed(scene_seed, "teacher", 0)
}

/// Generates a full synthetic dataset. Every item depends only on
/// `(cfg, noise, sizes)` and its index.
pub fn generate_dataset(
    cfg: &SceneConfig,
    noise: &NoiseProfile,
    sizes: SplitSizes,
) -> Result<Vec<SyntheticItem>> {
    cfg.validate()?;
    noise.validate()?;
    let teacher_seed = teacher_seed_for(cfg.seed);
    let splits = std::iter::repeat(Split::Train)
        .take(sizes.train)
        .chain(std::iter::repeat(Split::Val).take(sizes.val))
        .chain(std::iter::repeat(Split::Test).take(sizes.test));
    Ok(splits
        .enumerate()
        .map(|(i, split)| {
            let image_id = format!("syn_{i:05}");
            let mut scene_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "scene", i as u64));
            let sample = generate_scene(cfg, &mut scene_rng);
            let mut omit_rng =
                ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "omission", i as u64));
            let labels = corrupt_teacher(&sample, &image_id, noise, teacher_seed, &mut omit_rng);
            SyntheticItem {
                image_id,
                split,
                sample,
                labels,
            }
        })
        .collect())
}

/// Paths of an emitted synthetic dataset.
#[derive(Debug, Clone)]
pub struct EmittedDataset {
    pub manifest_path: PathBuf,
    pub gt_dir: PathBuf,
    pub manifest: DatasetManifest,
    /// Teacher that reproduces the in-memory pseudo-labels from disk.
    pub teacher: TeacherKind,
}

/// Writes a dataset laid out like a real one: `images/`, `labels/` (kept
/// boxes only), `gt/` and `manifest.json`.
pub fn emit_dataset(
    dir: &Path,
    cfg: &SceneConfig,
    noise: &NoiseProfile,
    items: &[SyntheticItem],
) -> Result<EmittedDataset> {
    let images = dir.join("images");
    let gt_dir = dir.join("gt");
    std::fs::create_dir_all(&images)?;
    std::fs::create_dir_all(&gt_dir)?;
    let mut records = Vec::with_capacity(items.len());
    for item in items {
        let (w, h) = item.sample.image.dimensions();
        let img_rel = PathBuf::from(format!("images/{}.png", item.image_id));
        item.sample.image.save(dir.join(&img_rel))?;
        item.sample
            .gt
            .write_png(&gt_dir.join(format!("{}.png", item.image_id)))?;
        records.push(ImageRecord {
            image_id: item.image_id.clone(),
            image_path: img_rel,
            annotation_path: PathBuf::from(format!("labels/{}.txt", item.image_id)),
            width: w,
            height: h,
            split: item.split,
            boxes: item.labels.boxes.clone(),
        });
    }
    let manifest = DatasetManifest {
        class_names: SYNTHETIC_CLASSES.iter().map(|s| s.to_string()).collect(),
        records,
        root: dir.to_path_buf(),
    };
    let manifest_path = dir.join("manifest.json");
    save_manifest(&manifest, &manifest_path)?;
    let teacher = TeacherKind::SyntheticNoisy {
        gt_dir: gt_dir.clone(),
        noise: noise.clone(),
        seed: teacher_seed_for(cfg.seed),
    };
    Ok(EmittedDataset {
        manifest_path,
        gt_dir,
        manifest,
        teacher,
    })
}
