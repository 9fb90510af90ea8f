//! The hierarchical student network.
//!
//! ```text
//! image ──► ViT (frozen weights) ──► taps ──► 1x1 projections ──► residual
//!   │                                          top-down fusion ──► x2 sub-pixel
//!   │                                          stages ──► resize to H/4 ─┐
//!   └──► two stride-2 Conv-Norm-ReLU (detail branch, H/4) ───────────────┤
//!                                                     concat ─► 3x3 mixer
//!                              binary head (2 ch) ◄──────┴──────► fine head (K+1 ch)
//! ```
//!
//! Tensors are `(N, C, H, W)`. Both heads upsample x2, apply a 3x3
//! Conv-Norm-ReLU, upsample x2 again, project with a 1x1 convolution and are
//! finally resized to the input resolution.

pub mod backbone;
pub mod checkpoint;
pub mod decoder;
pub mod layers;
pub mod params;
pub mod resize;

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var};
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use layers::{Builder, Conv2d, ConvNormAct};
use resize::resize_bilinear;

pub use backbone::{BackboneKind, BackboneSpec, VisionTransformer};
pub use decoder::{residual_fusion, FeaturePyramid, GlobalDecoder};
pub use layers::NormKind;
pub use params::{Param, ParamRole, ParamStore};

/// Per-channel input statistics of the backbone's pretraining data.
pub const PIXEL_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const PIXEL_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of defect classes K; the fine head predicts K + 1 channels.
    pub num_classes: usize,
    /// Square training and inference resolution.
    pub input_size: usize,
    /// Decoder width C_dec.
    pub decoder_width: usize,
    /// Detail-branch width c_d.
    pub detail_width: usize,
    /// Hidden width of the 3x3 block inside each head.
    pub head_width: usize,
    pub norm: NormKind,
    /// Train backbone biases and normalization parameters.
    pub bitfit: bool,
    pub backbone: BackboneSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 2,
            input_size: 518,
            decoder_width: 256,
            detail_width: 64,
            head_width: 64,
            norm: NormKind::Batch,
            bitfit: true,
            backbone: BackboneSpec::default(),
        }
    }
}

impl ModelConfig {
    /// Small configuration on the stub backbone for CPU experiments at 128 px.
    pub fn desk_scale(num_classes: usize) -> Self {
        ModelConfig {
            num_classes,
            input_size: 128,
            decoder_width: 24,
            detail_width: 12,
            head_width: 8,
            norm: NormKind::Batch,
            bitfit: true,
            backbone: BackboneSpec {
                depth: 4,
                tap_layers: vec![0, 1, 2, 3],
                ..BackboneSpec::test_stub(16, 64)
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.num_classes == 0 || self.num_classes > 254 {
            return Err(Error::config("model.num_classes must lie in 1..=254"));
        }
        if self.input_size < 4 || self.input_size < self.backbone.patch_size {
            return Err(Error::config("model.input_size is too small"));
        }
        if self.decoder_width == 0 || self.detail_width < 2 || self.head_width == 0 {
            return Err(Error::config(
                "model widths must be positive (detail_width >= 2)",
            ));
        }
        Ok(())
    }

    /// Side of the fused quarter-resolution grid, `ceil(S / 4)`.
    pub fn quarter_size(&self) -> usize {
        self.input_size.div_ceil(4)
    }

    pub fn upsample_stages(&self) -> usize {
        decoder::upsample_stages(self.backbone.grid(self.input_size), self.quarter_size())
    }

    /// Analytic parameter counts without building the network.
    pub fn parameter_budget(&self) -> ParameterReport {
        let (bb_total, bb_adapt) = self.backbone.parameter_budget(self.input_size);
        let c = self.decoder_width;
        let cd = self.detail_width;
        let hw = self.head_width;
        let norm = |ch: usize| match self.norm {
            NormKind::Batch => 2 * ch,
            NormKind::Group { .. } => 2 * ch,
        };
        let taps = self.backbone.tap_layers.len();
        let mut dec = taps * (self.backbone.embed_dim * c + c);
        dec += taps.saturating_sub(1) * 2 * (9 * c * c + norm(c));
        dec += self.upsample_stages() * (4 * c * c + norm(c));
        dec += 9 * 3 * (cd / 2) + norm(cd / 2) + 9 * (cd / 2) * cd + norm(cd);
        dec += 9 * (c + cd) * c + norm(c);
        for out in [2, self.num_classes + 1] {
            dec += 9 * c * hw + norm(hw) + hw * out + out;
        }
        let backbone_trainable = if self.bitfit { bb_adapt } else { 0 };
        ParameterReport {
            total: bb_total + dec,
            trainable: backbone_trainable + dec,
            backbone_total: bb_total,
            backbone_trainable,
        }
    }
}

/// Parameter accounting (normalization running statistics excluded).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterReport {
    pub total: usize,
    pub trainable: usize,
    pub backbone_total: usize,
    pub backbone_trainable: usize,
}

impl ParameterReport {
    pub fn trainable_ratio(&self) -> f64 {
        self.trainable as f64 / self.total as f64
    }
}

/// Raw head outputs at input resolution.
#[derive(Debug, Clone)]
pub struct StudentOutputs {
    /// `(N, 2, H, W)` background/foreground logits.
    pub binary_logits: Tensor,
    /// `(N, K + 1, H, W)` per-class logits.
    pub fine_logits: Tensor,
}

#[derive(Debug, Clone)]
struct DetailBranch {
    first: ConvNormAct,
    second: ConvNormAct,
}

impl DetailBranch {
    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.second.forward(&self.first.forward(x, train)?, train)
    }
}

#[derive(Debug, Clone)]
struct Head {
    hidden: ConvNormAct,
    out: Conv2d,
}

impl Head {
    fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        cfg: &ModelConfig,
        out: usize,
    ) -> Result<Self> {
        Ok(Head {
            hidden: ConvNormAct::new(
                b,
                &format!("{name}.hidden"),
                cfg.decoder_width,
                cfg.head_width,
                3,
                1,
                cfg.norm,
                true,
            )?,
            out: Conv2d::new(
                b,
                &format!("{name}.out"),
                cfg.head_width,
                out,
                1,
                1,
                0,
                true,
            )?,
        })
    }

    fn forward(&self, x: &Tensor, out_h: usize, out_w: usize, train: bool) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let y = resize_bilinear(x, 2 * h, 2 * w)?;
        let y = self.hidden.forward(&y, train)?;
        let y = resize_bilinear(&y, 4 * h, 4 * w)?;
        let y = self.out.forward(&y)?;
        resize_bilinear(&y, out_h, out_w)
    }
}

/// The full student. Cloning shares parameter storage; use
/// [`StudentModel::deep_clone`] for an independent copy.
#[derive(Debug, Clone)]
pub struct StudentModel {
    config: ModelConfig,
    store: ParamStore,
    backbone: VisionTransformer,
    decoder: GlobalDecoder,
    detail: DetailBranch,
    mixer: ConvNormAct,
    binary_head: Head,
    fine_head: Head,
}

impl StudentModel {
    /// Builds the network; decoder weights are drawn from `seed`, stub
    /// backbone weights from the backbone's own fixed seed, pretrained
    /// backbone weights from the configured checkpoint.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        StudentModel::build(config, seed, None)
    }

    /// Rebuilds a model from a full set of named tensors (as produced by
    /// [`ParamStore::named_tensors`]); no backbone checkpoint is read.
    pub fn from_named_tensors(
        config: &ModelConfig,
        tensors: &HashMap<String, Tensor>,
    ) -> Result<Self> {
        let backbone: HashMap<String, Tensor> = tensors
            .iter()
            .filter_map(|(k, v)| {
                k.strip_prefix("backbone.")
                    .map(|n| (n.to_string(), v.clone()))
            })
            .collect();
        let model = StudentModel::build(config, 0, Some(&backbone))?;
        for p in model.store.iter() {
            let t = tensors
                .get(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{}`", p.name)))?;
            p.assign(t)?;
        }
        if tensors.len() != model.store.len() {
            let extra: Vec<&String> = tensors
                .keys()
                .filter(|k| model.store.get(k).is_none())
                .collect();
            return Err(Error::Checkpoint(format!("unexpected tensors {extra:?}")));
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Independent copy with fresh storage.
    pub fn deep_clone(&self) -> Result<StudentModel> {
        let tensors: HashMap<String, Tensor> = self.store.named_tensors().into_iter().collect();
        StudentModel::from_named_tensors(&self.config, &tensors)
    }

    fn build(
        config: &ModelConfig,
        seed: u64,
        backbone_tensors: Option<&HashMap<String, Tensor>>,
    ) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let backbone = VisionTransformer::new(
            &config.backbone,
            config.input_size,
            config.bitfit,
            &mut store,
            backbone_tensors,
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
            bitfit: config.bitfit,
        };
        let c = config.decoder_width;
        let cd = config.detail_width;
        let decoder = GlobalDecoder::new(
            &mut b,
            &config.backbone.tap_layers,
            config.backbone.embed_dim,
            c,
            config.upsample_stages(),
            config.norm,
        )?;
        let detail = DetailBranch {
            first: ConvNormAct::new(&mut b, "detail.0", 3, cd / 2, 3, 2, config.norm, true)?,
            second: ConvNormAct::new(&mut b, "detail.1", cd / 2, cd, 3, 2, config.norm, true)?,
        };
        let mixer = ConvNormAct::new(&mut b, "mixer", c + cd, c, 3, 1, config.norm, true)?;
        let binary_head = Head::new(&mut b, "head_binary", config, 2)?;
        let fine_head = Head::new(&mut b, "head_fine", config, config.num_classes + 1)?;
        Ok(StudentModel {
            config: config.clone(),
            store,
            backbone,
            decoder,
            detail,
            mixer,
            binary_head,
            fine_head,
        })
    }

    /// Raw activations of the tapped backbone blocks, `(N, D, G, G)` each.
    pub fn extract_features(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(images)?;
        self.backbone.forward_taps(images)
    }

    /// Fused global features at quarter resolution.
    pub fn global_features(&self, images: &Tensor, train: bool) -> Result<Tensor> {
        let taps = self.extract_features(images)?;
        let pyramid = self.decoder.project(&taps)?;
        let q = self.config.quarter_size();
        self.decoder.fuse(&pyramid, q, q, train)
    }

    /// Detail-branch features at quarter resolution.
    pub fn local_features(&self, images: &Tensor, train: bool) -> Result<Tensor> {
        self.check_input(images)?;
        self.detail.forward(images, train)
    }

    /// Full forward pass on normalized `(N, 3, S, S)` images. `train` selects
    /// batch statistics (and updates running statistics) in normalization
    /// layers.
    pub fn forward(&self, images: &Tensor, train: bool) -> Result<StudentOutputs> {
        let global = self.global_features(images, train)?;
        let local = self.local_features(images, train)?;
        if global.dims()[2..] != local.dims()[2..] {
            return Err(Error::shape(format!(
                "branch grids disagree: global {:?}, local {:?}",
                global.dims(),
                local.dims()
            )));
        }
        let fused = self
            .mixer
            .forward(&Tensor::cat(&[&global, &local], 1)?, train)?;
        let s = self.config.input_size;
        Ok(StudentOutputs {
            binary_logits: self.binary_head.forward(&fused, s, s, train)?,
            fine_logits: self.fine_head.forward(&fused, s, s, train)?,
        })
    }

    fn check_input(&self, images: &Tensor) -> Result<()> {
        let (_, c, h, w) = images.dims4()?;
        let s = self.config.input_size;
        if c != 3 || h != s || w != s {
            return Err(Error::shape(format!(
                "expected (N, 3, {s}, {s}) input, got {:?}",
                images.dims()
            )));
        }
        Ok(())
    }

    /// Variables updated by the optimizer.
    pub fn trainable_vars(&self) -> Vec<(String, ParamRole, Var)> {
        self.store
            .trainable()
            .map(|p| (p.name.clone(), p.role, p.var().clone()))
            .collect()
    }

    /// Measured parameter counts of the built network.
    pub fn parameter_report(&self) -> ParameterReport {
        let mut r = ParameterReport {
            total: 0,
            trainable: 0,
            backbone_total: 0,
            backbone_trainable: 0,
        };
        for p in self
            .store
            .iter()
            .filter(|p| p.role != ParamRole::RunningStat)
        {
            let n = p.elem_count();
            r.total += n;
            if p.is_tracked() {
                r.trainable += n;
            }
            if p.role.is_backbone() {
                r.backbone_total += n;
                if p.is_tracked() {
                    r.backbone_trainable += n;
                }
            }
        }
        r
    }
}

/// Resizes an RGB image to `size x size` and normalizes it to a `(3, S, S)`
/// tensor.
pub fn preprocess(image: &RgbImage, size: usize) -> Result<Tensor> {
    let s = size as u32;
    let resized;
    let img = if image.dimensions() == (s, s) {
        image
    } else {
        resized = image::imageops::resize(image, s, s, image::imageops::FilterType::Triangle);
        &resized
    };
    let plane = size * size;
    let mut data = vec![0f32; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = (px[c] as f32 / 255.0 - PIXEL_MEAN[c]) / PIXEL_STD[c];
        }
    }
    Ok(Tensor::from_vec(data, (3, size, size), &Device::Cpu)?)
}

/// Stacks `(3, S, S)` tensors into a batch.
pub fn batch(images: &[Tensor]) -> Result<Tensor> {
    Ok(Tensor::stack(images, 0)?.to_dtype(DType::F32)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            num_classes: 2,
            input_size: 32,
            decoder_width: 8,
            detail_width: 4,
            head_width: 4,
            norm: NormKind::Batch,
            bitfit: true,
            backbone: BackboneSpec::test_stub(8, 16),
        }
    }

    #[test]
    fn measured_counts_match_budget() {
        for cfg in [
            tiny(),
            ModelConfig::desk_scale(2),
            ModelConfig {
                norm: NormKind::Group { groups: 2 },
                ..tiny()
            },
        ] {
            let m = StudentModel::new(&cfg, 1).unwrap();
            assert_eq!(m.parameter_report(), cfg.parameter_budget());
        }
    }

    #[test]
    fn output_shapes_at_small_size() {
        let m = StudentModel::new(&tiny(), 1).unwrap();
        let x = Tensor::zeros((2, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        let out = m.forward(&x, true).unwrap();
        assert_eq!(out.binary_logits.dims(), &[2, 2, 32, 32]);
        assert_eq!(out.fine_logits.dims(), &[2, 3, 32, 32]);
        let bad = Tensor::zeros((1, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(m.forward(&bad, false).is_err());
    }

    #[test]
    fn bitfit_off_freezes_whole_backbone() {
        let cfg = ModelConfig {
            bitfit: false,
            ..tiny()
        };
        let m = StudentModel::new(&cfg, 1).unwrap();
        assert!(m
            .trainable_vars()
            .iter()
            .all(|(name, _, _)| !name.starts_with("backbone.")));
    }

    #[test]
    fn preprocess_normalizes_channels() {
        let img = RgbImage::from_pixel(4, 4, image::Rgb([255, 0, 128]));
        let t = preprocess(&img, 8).unwrap();
        assert_eq!(t.dims(), &[3, 8, 8]);
        let v: Vec<f32> = t.flatten_all().unwrap().to_vec1().unwrap();
        assert!((v[0] - (1.0 - PIXEL_MEAN[0]) / PIXEL_STD[0]).abs() < 1e-5);
        assert!((v[64] + PIXEL_MEAN[1] / PIXEL_STD[1]).abs() < 1e-5);
    }
}
