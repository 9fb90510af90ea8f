//! Training objectives: asymmetric Dice on the binary head, one-sided online
//! label correction and class-weighted cross-entropy on the fine head, and
//! their weighted sum.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How per-class cross-entropy weights are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClassWeights {
    Explicit(Vec<f64>),
    Mode(WeightMode),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// `1 / ((K + 1) * frequency)` from the training pseudo-labels, clipped.
    InverseFrequency,
    Uniform,
}

impl Default for ClassWeights {
    fn default() -> Self {
        ClassWeights::Mode(WeightMode::InverseFrequency)
    }
}

impl ClassWeights {
    /// Concrete weights for `num_labels = K + 1` given training label counts.
    pub fn resolve(&self, num_labels: usize, counts: &[u64]) -> Result<Vec<f64>> {
        let w = match self {
            ClassWeights::Explicit(w) => w.clone(),
            ClassWeights::Mode(WeightMode::Uniform) => vec![1.0; num_labels],
            ClassWeights::Mode(WeightMode::InverseFrequency) => {
                inverse_frequency_weights(counts, 0.1, 10.0)
            }
        };
        if w.len() != num_labels {
            return Err(Error::config(format!(
                "loss.class_weights has {} entries, expected {num_labels}",
                w.len()
            )));
        }
        if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::config(
                "loss.class_weights must be finite and positive",
            ));
        }
        Ok(w)
    }
}

/// `1 / ((K + 1) * f_c)` clipped to `[lo, hi]`; absent classes get `hi`.
pub fn inverse_frequency_weights(counts: &[u64], lo: f64, hi: f64) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    let k1 = counts.len() as f64;
    counts
        .iter()
        .map(|&n| {
            if n == 0 || total == 0 {
                hi
            } else {
                (total as f64 / (k1 * n as f64)).clamp(lo, hi)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// False-positive weight of the asymmetric Dice loss.
    pub beta: f64,
    pub epsilon: f64,
    /// Confidence threshold for relabeling background pixels.
    pub tau: f64,
    pub class_weights: ClassWeights,
    pub lambda_bin: f64,
    pub lambda_fine: f64,
    /// Optimizer steps before correction starts; one epoch when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup_steps: Option<u64>,
    /// Enables online label correction after warm-up.
    pub self_correction: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta: 0.4,
            epsilon: 1e-6,
            tau: 0.9,
            class_weights: ClassWeights::default(),
            lambda_bin: 0.5,
            lambda_fine: 0.5,
            warmup_steps: None,
            self_correction: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::config("loss.beta must lie in (0, 1)"));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::config("loss.tau must lie in (0, 1)"));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("loss.epsilon must be positive"));
        }
        if !(self.lambda_bin >= 0.0 && self.lambda_fine >= 0.0)
            || !(self.lambda_bin + self.lambda_fine).is_finite()
        {
            return Err(Error::config(
                "loss.lambda_bin and loss.lambda_fine must be non-negative",
            ));
        }
        if let ClassWeights::Explicit(w) = &self.class_weights {
            if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::config(
                    "loss.class_weights must be finite and positive",
                ));
            }
        }
        Ok(())
    }
}

/// Counts from one correction pass.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionStats {
    /// Background pseudo-label pixels.
    pub pixels_eligible: u64,
    pub pixels_corrected: u64,
    /// Relabeled pixels per defect class (index 0 is class label 1).
    pub corrected_per_class: Vec<u64>,
}

impl CorrectionStats {
    pub fn new(num_classes: usize) -> Self {
        CorrectionStats {
            pixels_eligible: 0,
            pixels_corrected: 0,
            corrected_per_class: vec![0; num_classes],
        }
    }

    pub fn merge(&mut self, other: &CorrectionStats) {
        self.pixels_eligible += other.pixels_eligible;
        self.pixels_corrected += other.pixels_corrected;
        if self.corrected_per_class.len() < other.corrected_per_class.len() {
            self.corrected_per_class
                .resize(other.corrected_per_class.len(), 0);
        }
        for (a, b) in self
            .corrected_per_class
            .iter_mut()
            .zip(&other.corrected_per_class)
        {
            *a += b;
        }
    }

    pub fn corrected_fraction(&self) -> f64 {
        if self.pixels_eligible == 0 {
            0.0
        } else {
            self.pixels_corrected as f64 / self.pixels_eligible as f64
        }
    }
}

/// `1 - (<p,g> + eps) / (<p,g> + beta <p,1-g> + <1-p,g> + eps)` over all
/// elements of `p` and `g`.
pub fn asymmetric_dice(p: &Tensor, g: &Tensor, beta: f64, epsilon: f64) -> Result<Tensor> {
    if p.dims() != g.dims() {
        return Err(Error::shape(format!(
            "dice inputs disagree: {:?} vs {:?}",
            p.dims(),
            g.dims()
        )));
    }
    let lo = p
        .detach()
        .min_all()?
        .to_dtype(DType::F64)?
        .to_scalar::<f64>()?;
    let hi = p
        .detach()
        .max_all()?
        .to_dtype(DType::F64)?
        .to_scalar::<f64>()?;
    if !(lo >= 0.0 && hi <= 1.0) {
        return Err(Error::invalid(format!(
            "probabilities outside [0, 1]: range [{lo}, {hi}]"
        )));
    }
    let g = g.to_dtype(p.dtype())?;
    let tp = (p * &g)?.sum_all()?;
    let fp = (p.sum_all()? - &tp)?;
    let fn_ = (g.sum_all()? - &tp)?;
    let num = (&tp + epsilon)?;
    let den = ((&tp + (fp * beta)?)? + fn_)?;
    let den = (den + epsilon)?;
    Ok(num.div(&den)?.neg()?.affine(1.0, 1.0)?)
}

/// Class-weighted cross-entropy over `(N, C, H, W)` logits and `(N, H, W)`
/// integer targets, normalized by the sum of applied weights.
pub fn weighted_cross_entropy(logits: &Tensor, targets: &[u8], weights: &[f64]) -> Result<Tensor> {
    let (n, c, h, w) = logits.dims4()?;
    let plane = h * w;
    if targets.len() != n * plane {
        return Err(Error::shape(format!(
            "{} targets for {n}x{h}x{w} logits",
            targets.len()
        )));
    }
    if weights.len() != c {
        return Err(Error::shape(format!(
            "{} class weights for {c} classes",
            weights.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= c) {
        return Err(Error::invalid(format!(
            "target label {bad} out of range for {c} classes"
        )));
    }
    // weighted one-hot in (N, C, H, W) layout
    let mut mask = vec![0f64; n * c * plane];
    let mut weight_sum = 0f64;
    for img in 0..n {
        for i in 0..plane {
            let t = targets[img * plane + i] as usize;
            mask[(img * c + t) * plane + i] = weights[t];
            weight_sum += weights[t];
        }
    }
    let mask = Tensor::from_vec(mask, (n, c, h, w), logits.device())?.to_dtype(logits.dtype())?;
    let logp = candle_nn::ops::log_softmax(logits, 1)?;
    let total = (logp * mask)?.sum_all()?;
    Ok((total.neg()? / weight_sum)?)
}

/// One-sided correction of label maps.
///
/// `probs` holds `K + 1` class probabilities per pixel (pixel-major, the
/// same pixel order as `pseudo`). A background pixel whose largest defect
/// probability exceeds `tau` takes that defect class (lowest index on ties);
/// defect labels are never changed. During warm-up the labels pass through
/// unchanged.
pub fn self_correct(
    pseudo: &[u8],
    probs: &[f32],
    num_labels: usize,
    tau: f64,
    warmup_active: bool,
) -> Result<(Vec<u8>, CorrectionStats)> {
    if num_labels < 2 {
        return Err(Error::invalid("correction needs at least one defect class"));
    }
    if probs.len() != pseudo.len() * num_labels {
        return Err(Error::shape(format!(
            "{} labels do not match {} probabilities over {num_labels} classes",
            pseudo.len(),
            probs.len()
        )));
    }
    let mut stats = CorrectionStats::new(num_labels - 1);
    let mut out = pseudo.to_vec();
    for (i, (label, row)) in out
        .iter_mut()
        .zip(probs.chunks_exact(num_labels))
        .enumerate()
    {
        let sum: f64 = row.iter().map(|&p| p as f64).sum();
        if !((sum - 1.0).abs() <= 1e-3) {
            return Err(Error::invalid(format!(
                "probabilities at pixel {i} sum to {sum}"
            )));
        }
        if *label as usize >= num_labels {
            return Err(Error::invalid(format!("pseudo-label {label} out of range")));
        }
        if *label != 0 {
            continue;
        }
        stats.pixels_eligible += 1;
        if warmup_active {
            continue;
        }
        let (mut best, mut best_p) = (1usize, row[1]);
        for (c, &p) in row.iter().enumerate().skip(2) {
            if p > best_p {
                best = c;
                best_p = p;
            }
        }
        if best_p as f64 > tau {
            *label = best as u8;
            stats.pixels_corrected += 1;
            stats.corrected_per_class[best - 1] += 1;
        }
    }
    Ok((out, stats))
}

/// Detached per-pixel class probabilities of `(N, C, H, W)` logits, flat in
/// `(N, H, W, C)` order.
pub fn class_probabilities(logits: &Tensor) -> Result<Vec<f32>> {
    let p = candle_nn::ops::softmax(&logits.detach(), 1)?.permute((0, 2, 3, 1))?;
    Ok(p.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)
}

/// Loss value with its parts.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: Tensor,
    pub binary: f64,
    pub fine: f64,
    pub stats: CorrectionStats,
    /// Fine-head targets after correction.
    pub corrected: Vec<u8>,
}

/// `lambda_bin * dice(softmax(binary)[1], pseudo > 0) + lambda_fine *
/// wCE(fine, corrected pseudo)`. `pseudo` is `N x H x W` in raster order.
pub fn total_loss(
    binary_logits: &Tensor,
    fine_logits: &Tensor,
    pseudo: &[u8],
    cfg: &LossConfig,
    class_weights: &[f64],
    warmup_active: bool,
) -> Result<LossBreakdown> {
    let (n, two, h, w) = binary_logits.dims4()?;
    let (n2, c, h2, w2) = fine_logits.dims4()?;
    if two != 2 || (n, h, w) != (n2, h2, w2) || pseudo.len() != n * h * w {
        return Err(Error::shape(
            "head outputs and pseudo-labels disagree in shape",
        ));
    }
    let fg = candle_nn::ops::softmax(binary_logits, 1)?
        .narrow(1, 1, 1)?
        .squeeze(1)?;
    let g: Vec<f32> = pseudo.iter().map(|&v| (v > 0) as u8 as f32).collect();
    let g = Tensor::from_vec(g, (n, h, w), &Device::Cpu)?.to_dtype(fg.dtype())?;
    let l_bin = asymmetric_dice(&fg, &g, cfg.beta, cfg.epsilon)?;

    let correcting = cfg.self_correction && !warmup_active;
    let (corrected, stats) = if cfg.self_correction {
        let probs = class_probabilities(fine_logits)?;
        self_correct(pseudo, &probs, c, cfg.tau, !correcting)?
    } else {
        let mut s = CorrectionStats::new(c - 1);
        s.pixels_eligible = pseudo.iter().filter(|&&v| v == 0).count() as u64;
        (pseudo.to_vec(), s)
    };
    let l_fine = weighted_cross_entropy(fine_logits, &corrected, class_weights)?;
    let total = ((&l_bin * cfg.lambda_bin)? + (&l_fine * cfg.lambda_fine)?)?;
    Ok(LossBreakdown {
        binary: l_bin.to_dtype(DType::F64)?.to_scalar()?,
        fine: l_fine.to_dtype(DType::F64)?.to_scalar()?,
        total,
        stats,
        corrected,
    })
}

/// Mean of `-log softmax` along the last axis; used only by tests.
#[cfg(test)]
fn nll_last(logits: &Tensor, t: usize) -> f64 {
    let l = candle_nn::ops::log_softmax(logits, candle_core::D::Minus1).unwrap();
    -l.to_vec1::<f64>().unwrap()[t]
}
