//! Confusion-matrix evaluation.
//!
//! All metrics derive from one `(K+1) x (K+1)` matrix (rows ground truth,
//! columns prediction) accumulated over a whole split. Classes absent from
//! both ground truth and prediction are reported as `None` and left out of
//! the means. Binary metrics collapse the defect classes into one foreground.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotations::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::labels::LabelMap;

/// Label value skipped during accumulation by default.
pub const IGNORE_LABEL: u8 = 255;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_labels: usize,
    /// Row-major, `counts[gt * num_labels + pred]`.
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    /// Matrix over labels `0..num_labels` (`K + 1` for K defect classes).
    pub fn new(num_labels: usize) -> Self {
        ConfusionMatrix {
            num_labels,
            counts: vec![0; num_labels * num_labels],
        }
    }

    pub fn from_counts(num_labels: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_labels * num_labels {
            return Err(Error::shape(format!(
                "{} counts for {num_labels} labels",
                counts.len()
            )));
        }
        Ok(ConfusionMatrix { num_labels, counts })
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_labels + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one prediction/ground-truth pair; pixels whose ground truth
    /// equals `ignore` are skipped.
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8], ignore: Option<u8>) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        let k = self.num_labels;
        for (&p, &g) in pred.iter().zip(gt) {
            if Some(g) == ignore {
                continue;
            }
            if g as usize >= k || p as usize >= k {
                return Err(Error::invalid(format!(
                    "label pair (gt {g}, pred {p}) outside 0..{k}"
                )));
            }
            self.counts[g as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn accumulate_maps(
        &mut self,
        pred: &LabelMap,
        gt: &LabelMap,
        ignore: Option<u8>,
    ) -> Result<()> {
        if pred.dims() != gt.dims() {
            return Err(Error::shape(format!(
                "prediction is {:?}, ground truth {:?}",
                pred.dims(),
                gt.dims()
            )));
        }
        self.accumulate(pred.as_slice(), gt.as_slice(), ignore)
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_labels != self.num_labels {
            return Err(Error::shape(
                "cannot merge confusion matrices of different sizes",
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn transpose(&self) -> ConfusionMatrix {
        let k = self.num_labels;
        let mut t = ConfusionMatrix::new(k);
        for g in 0..k {
            for p in 0..k {
                t.counts[p * k + g] = self.get(g, p);
            }
        }
        t
    }

    fn row(&self, c: usize) -> u64 {
        (0..self.num_labels).map(|p| self.get(c, p)).sum()
    }

    fn col(&self, c: usize) -> u64 {
        (0..self.num_labels).map(|g| self.get(g, c)).sum()
    }

    /// `(tp, fp, fn, tn)` after merging classes `1..=K` into foreground.
    pub fn binary_counts(&self) -> (u64, u64, u64, u64) {
        let k = self.num_labels;
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for g in 0..k {
            for p in 0..k {
                let v = self.get(g, p);
                match (g > 0, p > 0) {
                    (true, true) => tp += v,
                    (false, true) => fp += v,
                    (true, false) => fn_ += v,
                    (false, false) => tn += v,
                }
            }
        }
        (tp, fp, fn_, tn)
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.flatten().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Mean IoU over all present labels, background included.
    pub miou: Option<f64>,
    /// Mean IoU over present defect classes.
    pub miou_anom: Option<f64>,
    /// F1 of the collapsed foreground.
    pub f1_anom: Option<f64>,
    /// Mean per-defect-class F1 (alternative reading of anomaly F1).
    pub f1_anom_macro: Option<f64>,
    pub iou_bin: Option<f64>,
    pub recall_bin: Option<f64>,
    pub precision_bin: Option<f64>,
    /// IoU per label `0..=K`.
    pub per_class_iou: Vec<Option<f64>>,
}

impl MetricReport {
    pub fn empty(num_labels: usize) -> Self {
        MetricReport {
            miou: None,
            miou_anom: None,
            f1_anom: None,
            f1_anom_macro: None,
            iou_bin: None,
            recall_bin: None,
            precision_bin: None,
            per_class_iou: vec![None; num_labels],
        }
    }

    /// Largest absolute difference over all fields; `None`/`Some` mismatches
    /// count as infinite.
    pub fn max_abs_diff(&self, other: &MetricReport) -> f64 {
        let pairs = [
            (self.miou, other.miou),
            (self.miou_anom, other.miou_anom),
            (self.f1_anom, other.f1_anom),
            (self.f1_anom_macro, other.f1_anom_macro),
            (self.iou_bin, other.iou_bin),
            (self.recall_bin, other.recall_bin),
            (self.precision_bin, other.precision_bin),
        ];
        let per_class = self
            .per_class_iou
            .iter()
            .copied()
            .zip(other.per_class_iou.iter().copied());
        let mut worst: f64 = if self.per_class_iou.len() == other.per_class_iou.len() {
            0.0
        } else {
            f64::INFINITY
        };
        for (a, b) in pairs.into_iter().chain(per_class) {
            let d = match (a, b) {
                (Some(x), Some(y)) => (x - y).abs(),
                (None, None) => 0.0,
                _ => f64::INFINITY,
            };
            worst = worst.max(d);
        }
        worst
    }
}

pub fn compute_report(cm: &ConfusionMatrix) -> MetricReport {
    let k = cm.num_labels();
    if cm.total() == 0 {
        return MetricReport::empty(k);
    }
    let per_class_iou: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let tp = cm.get(c, c);
            ratio(tp, cm.row(c) + cm.col(c) - tp)
        })
        .collect();
    let f1_per_class = (1..k).map(|c| ratio(2 * cm.get(c, c), cm.row(c) + cm.col(c)));
    let (tp, fp, fn_, _) = cm.binary_counts();
    MetricReport {
        miou: mean(per_class_iou.iter().copied()),
        miou_anom: mean(per_class_iou.iter().skip(1).copied()),
        f1_anom: ratio(2 * tp, 2 * tp + fp + fn_),
        f1_anom_macro: mean(f1_per_class),
        iou_bin: ratio(tp, tp + fp + fn_),
        recall_bin: ratio(tp, tp + fn_),
        precision_bin: ratio(tp, tp + fp),
        per_class_iou,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub image_id: String,
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: MetricReport,
    pub confusion: ConfusionMatrix,
    pub per_image: Vec<ImageReport>,
}

/// Micro-averaged evaluation of `(image_id, prediction, ground truth)`
/// triples; per-image matrices are computed in parallel and summed.
pub fn evaluate_pairs(
    pairs: &[(String, LabelMap, LabelMap)],
    num_labels: usize,
    ignore: Option<u8>,
) -> Result<Evaluation> {
    let per: Vec<(String, ConfusionMatrix)> = pairs
        .par_iter()
        .map(|(id, pred, gt)| {
            let mut cm = ConfusionMatrix::new(num_labels);
            cm.accumulate_maps(pred, gt, ignore)
                .map_err(|e| Error::invalid(format!("image `{id}`: {e}")))?;
            Ok((id.clone(), cm))
        })
        .collect::<Result<_>>()?;
    let mut total = ConfusionMatrix::new(num_labels);
    for (_, cm) in &per {
        total.merge(cm)?;
    }
    Ok(Evaluation {
        report: compute_report(&total),
        confusion: total,
        per_image: per
            .into_iter()
            .map(|(image_id, cm)| ImageReport {
                image_id,
                report: compute_report(&cm),
            })
            .collect(),
    })
}

/// Evaluates `<pred_dir>/<id>.png` against `<gt_dir>/<id>.png` for every
/// image of `split`.
pub fn evaluate_split(
    manifest: &DatasetManifest,
    split: Split,
    pred_dir: &Path,
    gt_dir: &Path,
    ignore: Option<u8>,
) -> Result<Evaluation> {
    let records: Vec<_> = manifest.records_in(split).collect();
    let pairs: Vec<(String, LabelMap, LabelMap)> = records
        .par_iter()
        .map(|r| {
            let load = |dir: &Path| {
                let path = dir.join(format!("{}.png", r.image_id));
                if !path.exists() {
                    return Err(Error::MissingMask(format!(
                        "{} ({})",
                        r.image_id,
                        path.display()
                    )));
                }
                LabelMap::read_png(&path)
            };
            Ok((r.image_id.clone(), load(pred_dir)?, load(gt_dir)?))
        })
        .collect::<Result<_>>()?;
    evaluate_pairs(&pairs, manifest.num_classes() + 1, ignore)
}

fn cell(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.4}"),
        None => "-".to_string(),
    }
}

/// Fixed-width summary table followed by per-class IoU.
pub fn format_table(report: &MetricReport, class_names: &[String]) -> String {
    let mut out = String::new();
    let cols = ["mIoU", "mIoU_anom", "F1_anom", "IoU_bin", "Recall_bin"];
    for c in cols {
        let _ = write!(out, "{c:>11}");
    }
    out.push('\n');
    for v in [
        report.miou,
        report.miou_anom,
        report.f1_anom,
        report.iou_bin,
        report.recall_bin,
    ] {
        let _ = write!(out, "{:>11}", cell(v));
    }
    out.push_str("\n\n");
    let _ = writeln!(out, "{:<16}{:>8}", "class", "IoU");
    for (i, iou) in report.per_class_iou.iter().enumerate() {
        let name = if i == 0 {
            "background".to_string()
        } else {
            class_names
                .get(i - 1)
                .cloned()
                .unwrap_or_else(|| format!("class_{}", i - 1))
        };
        let _ = writeln!(out, "{name:<16}{:>8}", cell(*iou));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_increment() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[1, 1, 1, 1], &[1, 1, 1, 1], None).unwrap();
        assert_eq!(cm.get(1, 1), 4);
        assert_eq!(cm.total(), 4);
        let mut d = ConfusionMatrix::new(3);
        d.accumulate(&[2, 0], &[1, 2], None).unwrap();
        assert_eq!((d.get(1, 2), d.get(2, 0)), (1, 1));
        assert_eq!((0..3).map(|c| d.get(c, c)).sum::<u64>(), 0);
    }

    #[test]
    fn collapsed_hand_example() {
        let cm = ConfusionMatrix::from_counts(2, vec![90, 5, 3, 2]).unwrap();
        let r = compute_report(&cm);
        assert_eq!(r.recall_bin, Some(0.4));
        assert_eq!(r.iou_bin, Some(0.2));
    }

    #[test]
    fn perfect_and_absent_classes() {
        let gt = [0u8, 1, 2, 0];
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&gt, &gt, None).unwrap();
        let r = compute_report(&cm);
        for v in [r.miou, r.miou_anom, r.f1_anom, r.iou_bin, r.recall_bin] {
            assert_eq!(v, Some(1.0));
        }
        let mut bg = ConfusionMatrix::new(3);
        bg.accumulate(&[0; 5], &[0; 5], None).unwrap();
        let r = compute_report(&bg);
        assert_eq!(r.miou, Some(1.0));
        assert_eq!(r.miou_anom, None);
        assert_eq!(r.per_class_iou, vec![Some(1.0), None, None]);
        assert_eq!(
            compute_report(&ConfusionMatrix::new(3)),
            MetricReport::empty(3)
        );
    }

    #[test]
    fn ignore_and_range() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[1, 2], &[IGNORE_LABEL, 1], Some(IGNORE_LABEL))
            .unwrap();
        assert_eq!(cm.total(), 1);
        assert!(cm.accumulate(&[3], &[0], None).is_err());
        assert!(cm.accumulate(&[0], &[IGNORE_LABEL], None).is_err());
    }

    #[test]
    fn transpose_keeps_iou() {
        let cm = ConfusionMatrix::from_counts(3, vec![10, 2, 1, 3, 7, 0, 4, 1, 5]).unwrap();
        let (a, b) = (compute_report(&cm), compute_report(&cm.transpose()));
        assert_eq!(a.per_class_iou, b.per_class_iou);
        assert_eq!(a.iou_bin, b.iou_bin);
    }

    #[test]
    fn table_lists_classes() {
        let cm = ConfusionMatrix::from_counts(3, vec![10, 2, 1, 3, 7, 0, 4, 1, 5]).unwrap();
        let t = format_table(&compute_report(&cm), &["dirt".into(), "damage".into()]);
        assert!(t.contains("Recall_bin") && t.contains("damage") && t.contains("background"));
    }
}
