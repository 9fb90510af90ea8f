//! Paired training runs that differ only in whether label correction is on.

use serde::{Deserialize, Serialize};

use super::{generate_dataset, NoiseProfile, SceneConfig, SplitSizes, SyntheticItem};
use crate::annotations::Split;
use crate::error::Result;
use crate::metrics::MetricReport;
use crate::model::ModelConfig;
use crate::objectives::CorrectionStats;
use crate::trainer::{evaluate_model, fit, FitOptions, InMemory, Sample, TrainingConfig};

/// Everything that defines one side of a paired run except the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSetup {
    pub scene: SceneConfig,
    pub noise: NoiseProfile,
    pub sizes: SplitSizes,
    pub train: TrainingConfig,
}

impl Default for AblationSetup {
    fn default() -> Self {
        AblationSetup {
            scene: SceneConfig::default(),
            noise: NoiseProfile::default(),
            sizes: SplitSizes {
                train: 48,
                val: 12,
                test: 24,
            },
            train: TrainingConfig {
                model: ModelConfig::desk_scale(2),
                epochs: 36,
                lr: 3e-3,
                ema_decay: 0.95,
                ..TrainingConfig::default()
            },
        }
    }
}

/// Result of one training run scored on clean held-out ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub seed: u64,
    pub with_correction: bool,
    pub test: MetricReport,
    pub best_epoch: usize,
    pub best_val_metric: Option<f64>,
    pub correction: CorrectionStats,
}

impl AblationOutcome {
    /// Share of eligible background pixels relabeled over the run.
    pub fn corrected_fraction(&self) -> f64 {
        self.correction.corrected_fraction()
    }
}

fn split_source(items: &[SyntheticItem], split: Split, clean: bool) -> InMemory {
    InMemory(
        items
            .iter()
            .filter(|it| it.split == split)
            .map(|it| Sample {
                image_id: it.image_id.clone(),
                image: it.sample.image.clone(),
                labels: if clean {
                    it.sample.gt.clone()
                } else {
                    it.labels.pseudo.clone()
                },
            })
            .collect(),
    )
}

/// Generates the dataset for `seed`, trains on noisy pseudo-labels
/// (selecting on noisy validation labels) and scores the selected weights on
/// the clean test split.
pub fn run_ablation(
    setup: &AblationSetup,
    with_correction: bool,
    seed: u64,
) -> Result<AblationOutcome> {
    let scene = SceneConfig {
        seed,
        ..setup.scene.clone()
    };
    let items = generate_dataset(&scene, &setup.noise, setup.sizes)?;
    let mut cfg = setup.train.clone();
    cfg.seed = seed;
    cfg.loss.self_correction = with_correction;
    let train = split_source(&items, Split::Train, false);
    let val = split_source(&items, Split::Val, false);
    let test = split_source(&items, Split::Test, true);
    let out = fit(&cfg, &train, Some(&val), &FitOptions::default())?;
    let test_report = evaluate_model(&out.best_model, &test, None)?.report;
    Ok(AblationOutcome {
        seed,
        with_correction,
        test: test_report,
        best_epoch: out.best_epoch,
        best_val_metric: out.best_metric,
        correction: out.correction,
    })
}

/// One seed of a paired comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRow {
    pub seed: u64,
    pub without: AblationOutcome,
    pub with: AblationOutcome,
    pub recall_delta: Option<f64>,
    pub miou_anom_delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedReport {
    pub rows: Vec<PairedRow>,
    pub mean_recall_delta: Option<f64>,
    pub mean_miou_anom_delta: Option<f64>,
}

fn delta(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(b? - a?)
}

fn mean_defined(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let xs: Vec<f64> = v.collect::<Option<Vec<f64>>>()?;
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Runs both sides for every seed; `progress` is called after each run.
pub fn run_paired(
    setup: &AblationSetup,
    seeds: &[u64],
    mut progress: impl FnMut(&AblationOutcome),
) -> Result<PairedReport> {
    let mut rows = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let without = run_ablation(setup, false, seed)?;
        progress(&without);
        let with = run_ablation(setup, true, seed)?;
        progress(&with);
        rows.push(PairedRow {
            seed,
            recall_delta: delta(without.test.recall_bin, with.test.recall_bin),
            miou_anom_delta: delta(without.test.miou_anom, with.test.miou_anom),
            without,
            with,
        });
    }
    Ok(PairedReport {
        mean_recall_delta: mean_defined(rows.iter().map(|r| r.recall_delta)),
        mean_miou_anom_delta: mean_defined(rows.iter().map(|r| r.miou_anom_delta)),
        rows,
    })
}

/// Side-by-side table of a paired report.
pub fn format_paired(report: &PairedReport) -> String {
    let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    let mut out = format!(
        "{:>6} {:>11} {:>11} {:>9} {:>12} {:>12} {:>9} {:>10}\n",
        "seed",
        "recall_off",
        "recall_on",
        "d_recall",
        "mIoU_a_off",
        "mIoU_a_on",
        "d_mIoU_a",
        "corrected"
    );
    for r in &report.rows {
        out.push_str(&format!(
            "{:>6} {:>11} {:>11} {:>9} {:>12} {:>12} {:>9} {:>9.4}%\n",
            r.seed,
            f(r.without.test.recall_bin),
            f(r.with.test.recall_bin),
            f(r.recall_delta),
            f(r.without.test.miou_anom),
            f(r.with.test.miou_anom),
            f(r.miou_anom_delta),
            100.0 * r.with.corrected_fraction()
        ));
    }
    out.push_str(&format!(
        "{:>6} {:>11} {:>11} {:>9} {:>12} {:>12} {:>9}\n",
        "mean",
        "",
        "",
        f(report.mean_recall_delta),
        "",
        "",
        f(report.mean_miou_anom_delta)
    ));
    out
}
