//! YOLO box annotations, pixel rectangles and the dataset manifest.
//!
//! A YOLO annotation file holds one box per line: `class cx cy w h`, all
//! coordinates normalized to `[0, 1]` by the image size. Class identifiers
//! index the manifest's `classes` list; rasterized label maps use
//! `class_id + 1` so that `0` stays background.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Current manifest schema version.
pub const MANIFEST_VERSION: u32 = 1;

/// One normalized YOLO box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub class_id: u32,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxAnnotation {
    /// Builds a box, checking the coordinate ranges and `class_id < num_classes`.
    pub fn new(
        class_id: u32,
        cx: f64,
        cy: f64,
        w: f64,
        h: f64,
        num_classes: usize,
    ) -> Result<Self> {
        let b = BoxAnnotation {
            class_id,
            cx,
            cy,
            w,
            h,
        };
        b.validate(num_classes)?;
        Ok(b)
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if (self.class_id as usize) >= num_classes {
            return Err(Error::Validation(format!(
                "class id {} out of range for {} class(es)",
                self.class_id, num_classes
            )));
        }
        for (name, v) in [("cx", self.cx), ("cy", self.cy)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Validation(format!("{name}={v} outside [0, 1]")));
            }
        }
        for (name, v) in [("w", self.w), ("h", self.h)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Validation(format!("{name}={v} outside (0, 1]")));
            }
        }
        Ok(())
    }

    /// Tight normalized box around the half-open pixel rectangle `px`.
    pub fn from_pixel_box(class_id: u32, px: PixelBox, width: u32, height: u32) -> Self {
        let (w_img, h_img) = (width as f64, height as f64);
        BoxAnnotation {
            class_id,
            cx: (px.x0 + px.x1) as f64 / 2.0 / w_img,
            cy: (px.y0 + px.y1) as f64 / 2.0 / h_img,
            w: (px.x1 - px.x0) as f64 / w_img,
            h: (px.y1 - px.y0) as f64 / h_img,
        }
    }
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl PixelBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        debug_assert!(x0 < x1 && y0 < y1);
        PixelBox { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    /// True when the rectangle is non-empty and lies inside a `width x height` image.
    pub fn is_valid_for(&self, width: u32, height: u32) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && self.x1 <= width && self.y1 <= height
    }
}

/// Parses the contents of one YOLO annotation file.
///
/// Blank lines are skipped. Errors carry the 1-based line number.
pub fn parse_yolo_annotations(text: &str, num_classes: usize) -> Result<Vec<BoxAnnotation>> {
    parse_yolo_named(text, num_classes, "<annotations>")
}

pub(crate) fn parse_yolo_named(
    text: &str,
    num_classes: usize,
    source_name: &str,
) -> Result<Vec<BoxAnnotation>> {
    let mut boxes = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            source_name: source_name.to_string(),
            line: idx + 1,
            message,
        };
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(parse_err(format!(
                "expected 5 fields, found {}",
                fields.len()
            )));
        }
        let class_id: u32 = fields[0].parse().map_err(|_| {
            parse_err(format!(
                "class id `{}` is not a non-negative integer",
                fields[0]
            ))
        })?;
        let mut coords = [0f64; 4];
        for (slot, field) in coords.iter_mut().zip(&fields[1..]) {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(format!("`{field}` is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(format!("`{field}` is not finite")));
            }
            *slot = v;
        }
        let b = BoxAnnotation {
            class_id,
            cx: coords[0],
            cy: coords[1],
            w: coords[2],
            h: coords[3],
        };
        b.validate(num_classes).map_err(|e| match e {
            Error::Validation(msg) => {
                Error::Validation(format!("{source_name}:{}: {msg}", idx + 1))
            }
            other => other,
        })?;
        boxes.push(b);
    }
    Ok(boxes)
}

/// Serializes boxes in YOLO line format. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn format_yolo_annotations(boxes: &[BoxAnnotation]) -> String {
    let mut out = String::new();
    for b in boxes {
        let _ = writeln!(out, "{} {} {} {} {}", b.class_id, b.cx, b.cy, b.w, b.h);
    }
    out
}

/// Converts a normalized box to a pixel rectangle in a `width x height` image.
///
/// Edges are rounded half away from zero and clamped to the image. A box that
/// collapses to zero width or height is widened to one pixel toward the
/// interior of the image.
pub fn box_to_pixels(b: &BoxAnnotation, width: u32, height: u32) -> PixelBox {
    assert!(width >= 1 && height >= 1, "image must be at least 1x1");
    let (x0, x1) = edge_span(b.cx, b.w, width);
    let (y0, y1) = edge_span(b.cy, b.h, height);
    PixelBox { x0, y0, x1, y1 }
}

fn edge_span(center: f64, extent: f64, size: u32) -> (u32, u32) {
    let s = size as f64;
    let clamp = |v: f64| v.round().clamp(0.0, s) as u32;
    let mut lo = clamp((center - extent / 2.0) * s);
    let mut hi = clamp((center + extent / 2.0) * s);
    if hi <= lo {
        if lo < size {
            hi = lo + 1;
        } else {
            lo = size - 1;
            hi = size;
        }
    }
    (lo, hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split `{other}`"))),
        }
    }
}

/// One image of the dataset with its boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    /// Image file, relative to the manifest directory unless absolute.
    pub image_path: PathBuf,
    /// YOLO annotation file, relative to the manifest directory unless absolute.
    pub annotation_path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub split: Split,
    pub boxes: Vec<BoxAnnotation>,
}

/// The dataset: class names, image records and their splits.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub records: Vec<ImageRecord>,
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
}

/// Non-fatal problems found while loading a manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ManifestWarning {
    MissingImage { image_id: String, path: PathBuf },
    MissingAnnotation { image_id: String, path: PathBuf },
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    #[serde(default = "default_version")]
    format_version: u32,
    classes: Vec<String>,
    images: Vec<ManifestEntry>,
}

fn default_version() -> u32 {
    MANIFEST_VERSION
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    path: PathBuf,
    width: u32,
    height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
    annotation_path: PathBuf,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn image_file(&self, rec: &ImageRecord) -> PathBuf {
        self.resolve(&rec.image_path)
    }

    pub fn annotation_file(&self, rec: &ImageRecord) -> PathBuf {
        self.resolve(&rec.annotation_path)
    }

    pub fn split_of(&self, image_id: &str) -> Option<Split> {
        self.records
            .iter()
            .find(|r| r.image_id == image_id)
            .map(|r| r.split)
    }

    pub fn record(&self, image_id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.image_id == image_id)
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Checks class count, id uniqueness, image sizes and every box.
    pub fn validate(&self) -> Result<()> {
        if self.class_names.is_empty() {
            return Err(Error::Manifest("at least one class is required".into()));
        }
        let mut seen = HashSet::new();
        for rec in &self.records {
            validate_image_id(&rec.image_id)?;
            if !seen.insert(rec.image_id.as_str()) {
                return Err(Error::Manifest(format!(
                    "duplicate image id `{}`",
                    rec.image_id
                )));
            }
            if rec.width == 0 || rec.height == 0 {
                return Err(Error::Manifest(format!(
                    "image `{}` has zero size",
                    rec.image_id
                )));
            }
            for b in &rec.boxes {
                b.validate(self.num_classes())?;
            }
        }
        Ok(())
    }

    /// Counts of records per split.
    pub fn split_counts(&self) -> BTreeMap<Split, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.split).or_insert(0) += 1;
        }
        counts
    }
}

/// Image ids become file names in caches and prediction folders.
pub fn validate_image_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::Manifest(format!(
            "image id `{id}` must be non-empty and use only [A-Za-z0-9_.-]"
        )))
    }
}

/// Loads a manifest and the YOLO files it references.
///
/// Missing image files and missing annotation files are reported as
/// warnings; a missing annotation file means the image has no boxes.
pub fn load_manifest(path: &Path) -> Result<(DatasetManifest, Vec<ManifestWarning>)> {
    let text = fs::read_to_string(path)?;
    let file: ManifestFile = serde_json::from_str(&text)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    if file.format_version > MANIFEST_VERSION {
        return Err(Error::Manifest(format!(
            "manifest format version {} is newer than supported version {MANIFEST_VERSION}",
            file.format_version
        )));
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let num_classes = file.classes.len();
    let mut warnings = Vec::new();
    let mut records = Vec::with_capacity(file.images.len());
    for entry in file.images {
        let split = entry
            .split
            .ok_or_else(|| Error::Manifest(format!("image `{}` has no split", entry.id)))?;
        let ann_file = resolve_against(&root, &entry.annotation_path);
        let boxes = match fs::read_to_string(&ann_file) {
            Ok(text) => parse_yolo_named(&text, num_classes, &ann_file.display().to_string())?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                warnings.push(ManifestWarning::MissingAnnotation {
                    image_id: entry.id.clone(),
                    path: ann_file.clone(),
                });
                Vec::new()
            }
            Err(e) => return Err(e.into()),
        };
        let img_file = resolve_against(&root, &entry.path);
        if !img_file.exists() {
            warnings.push(ManifestWarning::MissingImage {
                image_id: entry.id.clone(),
                path: img_file,
            });
        }
        records.push(ImageRecord {
            image_id: entry.id,
            image_path: entry.path,
            annotation_path: entry.annotation_path,
            width: entry.width,
            height: entry.height,
            split,
            boxes,
        });
    }
    let manifest = DatasetManifest {
        class_names: file.classes,
        records,
        root,
    };
    manifest.validate()?;
    Ok((manifest, warnings))
}

/// Writes the manifest document to `path` and every record's annotation file
/// (relative annotation paths are resolved against `path`'s directory).
pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    manifest.validate()?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    for rec in &manifest.records {
        let ann = resolve_against(&root, &rec.annotation_path);
        if let Some(dir) = ann.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&ann, format_yolo_annotations(&rec.boxes))?;
    }
    let file = ManifestFile {
        format_version: MANIFEST_VERSION,
        classes: manifest.class_names.clone(),
        images: manifest
            .records
            .iter()
            .map(|r| ManifestEntry {
                id: r.image_id.clone(),
                path: r.image_path.clone(),
                width: r.width,
                height: r.height,
                split: Some(r.split),
                annotation_path: r.annotation_path.clone(),
            })
            .collect(),
    };
    if !root.as_os_str().is_empty() {
        fs::create_dir_all(&root)?;
    }
    fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

fn resolve_against(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_text_parses_to_no_boxes() {
        assert!(parse_yolo_annotations("", 2).unwrap().is_empty());
        assert!(parse_yolo_annotations("\n  \n", 2).unwrap().is_empty());
    }

    #[test]
    fn single_line_maps_fields() {
        let boxes = parse_yolo_annotations("0 0.5 0.5 0.2 0.1", 2).unwrap();
        assert_eq!(
            boxes,
            vec![BoxAnnotation {
                class_id: 0,
                cx: 0.5,
                cy: 0.5,
                w: 0.2,
                h: 0.1
            }]
        );
        let again = parse_yolo_annotations(&format_yolo_annotations(&boxes), 2).unwrap();
        assert_eq!(again, boxes);
    }

    #[test]
    fn class_out_of_range_is_validation_error() {
        let err = parse_yolo_annotations("2 0.5 0.5 0.2 0.1", 2).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn malformed_lines_report_line_number() {
        let err = parse_yolo_annotations("0 0.5 0.5 0.2 0.1\n1 0.5 0.5 0.2\n", 2).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
        let err = parse_yolo_annotations("0 0.5 abc 0.2 0.1", 2).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = parse_yolo_annotations("-1 0.5 0.5 0.2 0.1", 2).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    #[test]
    fn coordinates_outside_unit_interval_rejected() {
        assert!(matches!(
            parse_yolo_annotations("0 1.5 0.5 0.2 0.1", 2),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            parse_yolo_annotations("0 0.5 0.5 0.0 0.1", 2),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn full_image_box() {
        let b = BoxAnnotation {
            class_id: 0,
            cx: 0.5,
            cy: 0.5,
            w: 1.0,
            h: 1.0,
        };
        assert_eq!(box_to_pixels(&b, 100, 50), PixelBox::new(0, 0, 100, 50));
    }

    #[test]
    fn centered_box_edges() {
        let b = BoxAnnotation {
            class_id: 0,
            cx: 0.5,
            cy: 0.5,
            w: 0.2,
            h: 0.1,
        };
        let px = box_to_pixels(&b, 100, 200);
        assert_eq!(px, PixelBox::new(40, 90, 60, 110));
        // brute-force membership: pixel centers inside the normalized box
        for y in 0..200u32 {
            for x in 0..100u32 {
                let (nx, ny) = ((x as f64 + 0.5) / 100.0, (y as f64 + 0.5) / 200.0);
                let inside = (nx - 0.5).abs() <= 0.1 && (ny - 0.5).abs() <= 0.05;
                assert_eq!(px.contains(x, y), inside, "pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn degenerate_box_expands_to_one_pixel() {
        let b = BoxAnnotation {
            class_id: 0,
            cx: 0.005,
            cy: 0.005,
            w: 0.001,
            h: 0.001,
        };
        let px = box_to_pixels(&b, 100, 100);
        assert_eq!((px.width(), px.height()), (1, 1));
        assert!(px.is_valid_for(100, 100));
        let edge = BoxAnnotation {
            class_id: 0,
            cx: 1.0,
            cy: 1.0,
            w: 0.001,
            h: 0.001,
        };
        assert_eq!(box_to_pixels(&edge, 10, 10), PixelBox::new(9, 9, 10, 10));
    }

    #[test]
    fn overhanging_box_is_clamped() {
        let b = BoxAnnotation {
            class_id: 0,
            cx: 0.95,
            cy: 0.05,
            w: 0.4,
            h: 0.4,
        };
        let px = box_to_pixels(&b, 100, 100);
        assert_eq!(px, PixelBox::new(75, 0, 100, 25));
    }

    fn arb_box() -> impl Strategy<Value = BoxAnnotation> {
        (
            0u32..3,
            0.0..=1.0f64,
            0.0..=1.0f64,
            1e-4..=1.0f64,
            1e-4..=1.0f64,
        )
            .prop_map(|(c, cx, cy, w, h)| BoxAnnotation {
                class_id: c,
                cx,
                cy,
                w,
                h,
            })
    }

    proptest! {
        #[test]
        fn pixel_boxes_always_valid(b in arb_box(), w in 1u32..300, h in 1u32..300) {
            let px = box_to_pixels(&b, w, h);
            prop_assert!(px.is_valid_for(w, h));
        }

        #[test]
        fn serialize_parse_round_trip(boxes in proptest::collection::vec(arb_box(), 0..12)) {
            let text = format_yolo_annotations(&boxes);
            prop_assert_eq!(parse_yolo_annotations(&text, 3).unwrap(), boxes);
        }

        #[test]
        fn membership_matches_pixel_centers(b in arb_box(), w in 1u32..64, h in 1u32..64) {
            let px = box_to_pixels(&b, w, h);
            let (l, r) = ((b.cx - b.w / 2.0) * w as f64, (b.cx + b.w / 2.0) * w as f64);
            let (t, bot) = ((b.cy - b.h / 2.0) * h as f64, (b.cy + b.h / 2.0) * h as f64);
            // boxes widened by the degenerate rule have no center-based analogue
            let collapsed_x = (l.round().clamp(0.0, w as f64)) >= (r.round().clamp(0.0, w as f64));
            let collapsed_y = (t.round().clamp(0.0, h as f64)) >= (bot.round().clamp(0.0, h as f64));
            prop_assume!(!collapsed_x && !collapsed_y);
            for y in 0..h {
                for x in 0..w {
                    let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                    let margin = [(cx - l).abs(), (cx - r).abs(), (cy - t).abs(), (cy - bot).abs()];
                    if margin.iter().any(|m| *m < 1e-9) {
                        continue; // exact half-pixel ties follow the rounding rule
                    }
                    let inside = cx > l && cx < r && cy > t && cy < bot;
                    prop_assert_eq!(px.contains(x, y), inside);
                }
            }
        }
    }

    fn sample_manifest(root: &Path) -> DatasetManifest {
        let mk = |id: &str, split, boxes| ImageRecord {
            image_id: id.to_string(),
            image_path: PathBuf::from(format!("images/{id}.png")),
            annotation_path: PathBuf::from(format!("labels/{id}.txt")),
            width: 64,
            height: 48,
            split,
            boxes,
        };
        DatasetManifest {
            class_names: vec!["dirt".into(), "damage".into()],
            records: vec![
                mk(
                    "a",
                    Split::Train,
                    vec![BoxAnnotation {
                        class_id: 1,
                        cx: 0.3,
                        cy: 0.4,
                        w: 0.1,
                        h: 0.2,
                    }],
                ),
                mk("b", Split::Val, vec![]),
                mk(
                    "c",
                    Split::Test,
                    vec![
                        BoxAnnotation {
                            class_id: 0,
                            cx: 0.5,
                            cy: 0.5,
                            w: 0.25,
                            h: 0.125,
                        },
                        BoxAnnotation {
                            class_id: 1,
                            cx: 0.1,
                            cy: 0.9,
                            w: 0.05,
                            h: 0.1,
                        },
                    ],
                ),
            ],
            root: root.to_path_buf(),
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = sample_manifest(dir.path());
        let path = dir.path().join("manifest.json");
        save_manifest(&m, &path).unwrap();
        let (loaded, warnings) = load_manifest(&path).unwrap();
        assert_eq!(loaded, m);
        // no image files were written
        assert_eq!(warnings.len(), 3);
        assert!(warnings
            .iter()
            .all(|w| matches!(w, ManifestWarning::MissingImage { .. })));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = sample_manifest(dir.path());
        m.records[1].image_id = "a".into();
        assert!(matches!(m.validate(), Err(Error::Manifest(_))));
        let doc = r#"{"classes":["x"],"images":[
            {"id":"a","path":"a.png","width":4,"height":4,"split":"train","annotation_path":"a.txt"},
            {"id":"a","path":"b.png","width":4,"height":4,"split":"val","annotation_path":"b.txt"}]}"#;
        let path = dir.path().join("dup.json");
        fs::write(&path, doc).unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::Manifest(_))));
    }

    #[test]
    fn missing_split_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let doc = r#"{"classes":["x"],"images":[
            {"id":"a","path":"a.png","width":4,"height":4,"annotation_path":"a.txt"}]}"#;
        let path = dir.path().join("m.json");
        fs::write(&path, doc).unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("no split"), "{err}");
    }
}
