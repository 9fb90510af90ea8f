//! Plain ViT encoder used as the global branch.
//!
//! Weight matrices, embeddings and layer scales are frozen; biases and
//! normalization parameters stay trainable when bias/norm adaptation is on.
//! Parameter names follow the common ViT state-dict layout (`cls_token`,
//! `pos_embed`, `patch_embed.proj.*`, `blocks.{i}.norm1.*`,
//! `blocks.{i}.attn.qkv.*`, `blocks.{i}.attn.proj.*`, `blocks.{i}.ls1.gamma`,
//! `blocks.{i}.norm2.*`, `blocks.{i}.mlp.fc1.*`, `blocks.{i}.mlp.fc2.*`,
//! `blocks.{i}.ls2.gamma`), so a DINOv2-style ViT-S/14 checkpoint in
//! safetensors form loads directly.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{LayerNorm, Linear};
use super::params::{Init, Param, ParamRole, ParamStore};
use super::resize::resize_bilinear;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// ViT-S/14 loaded from a local checkpoint.
    PretrainedVitS14,
    /// Frozen random ViT from a fixed seed, same structure, no download.
    TestStub,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    /// Blocks whose outputs feed the decoder (0-based block index).
    pub tap_layers: Vec<usize>,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    /// Local safetensors checkpoint for the pretrained kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    /// Seed of the stub's frozen random weights.
    #[serde(default)]
    pub stub_seed: u64,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec::vit_s14(None)
    }
}

impl BackboneSpec {
    pub fn vit_s14(weights: Option<PathBuf>) -> Self {
        BackboneSpec {
            kind: BackboneKind::PretrainedVitS14,
            tap_layers: vec![1, 2, 4, 7],
            patch_size: 14,
            embed_dim: 384,
            depth: 12,
            num_heads: 6,
            mlp_ratio: 4,
            weights,
            stub_seed: 0,
        }
    }

    /// Depth-8 stub with the default taps.
    pub fn test_stub(patch_size: usize, embed_dim: usize) -> Self {
        BackboneSpec {
            kind: BackboneKind::TestStub,
            tap_layers: vec![1, 2, 4, 7],
            patch_size,
            embed_dim,
            depth: 8,
            num_heads: 2,
            mlp_ratio: 2,
            weights: None,
            stub_seed: 0x5eed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tap_layers.is_empty() {
            return Err(Error::config("backbone.tap_layers must not be empty"));
        }
        if self.tap_layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(
                "backbone.tap_layers must be strictly increasing",
            ));
        }
        if let Some(&t) = self.tap_layers.iter().find(|&&t| t >= self.depth) {
            return Err(Error::config(format!(
                "tap layer {t} is out of range for depth {}",
                self.depth
            )));
        }
        if self.patch_size == 0 || self.embed_dim == 0 || self.num_heads == 0 || self.mlp_ratio == 0
        {
            return Err(Error::config("backbone sizes must be positive"));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::config(
                "backbone.embed_dim must be divisible by num_heads",
            ));
        }
        Ok(())
    }

    pub fn has_layer_scale(&self) -> bool {
        self.kind == BackboneKind::PretrainedVitS14
    }

    /// Token grid side for a square input.
    pub fn grid(&self, input_size: usize) -> usize {
        input_size / self.patch_size
    }

    /// Parameter counts `(total, bias_and_norm)` without building the model.
    pub fn parameter_budget(&self, input_size: usize) -> (usize, usize) {
        let d = self.embed_dim;
        let hidden = d * self.mlp_ratio;
        let grid = self.pos_grid(input_size);
        let mut total = d + (grid * grid + 1) * d + d * 3 * self.patch_size * self.patch_size + d;
        let mut adapt = d;
        let per_block_bias_norm = 2 * d + 3 * d + d + 2 * d + hidden + d;
        let per_block_frozen = 3 * d * d
            + d * d
            + hidden * d
            + d * hidden
            + if self.has_layer_scale() { 2 * d } else { 0 };
        total += self.depth * (per_block_bias_norm + per_block_frozen);
        adapt += self.depth * per_block_bias_norm;
        (total, adapt)
    }

    fn pos_grid(&self, input_size: usize) -> usize {
        match self.kind {
            // the published ViT-S/14 embeds a 37x37 grid
            BackboneKind::PretrainedVitS14 => 37,
            BackboneKind::TestStub => self.grid(input_size),
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ls1: Option<Param>,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    ls2: Option<Param>,
}

#[derive(Debug, Clone)]
pub struct VisionTransformer {
    spec: BackboneSpec,
    patch_weight: Param,
    patch_bias: Param,
    cls_token: Param,
    pos_embed: Param,
    blocks: Vec<Block>,
}

fn role_for(name: &str) -> ParamRole {
    if name.ends_with(".bias") {
        if name.contains("norm") {
            ParamRole::BackboneNorm
        } else {
            ParamRole::BackboneBias
        }
    } else if name.contains("norm") {
        ParamRole::BackboneNorm
    } else {
        ParamRole::BackboneFrozen
    }
}

impl VisionTransformer {
    /// Registers all backbone parameters under `backbone.` in `store`.
    pub fn new(
        spec: &BackboneSpec,
        input_size: usize,
        bitfit: bool,
        store: &mut ParamStore,
        tensors: Option<&HashMap<String, Tensor>>,
    ) -> Result<Self> {
        spec.validate()?;
        let d = spec.embed_dim;
        let hidden = d * spec.mlp_ratio;
        let p = spec.patch_size;
        let pos_tokens = match tensors.and_then(|t| t.get("pos_embed")) {
            Some(t) => t.dim(1)?,
            None => spec.pos_grid(input_size).pow(2) + 1,
        };
        // (name, shape, init) in state-dict order
        let mut plan: Vec<(String, Vec<usize>, Init)> = vec![
            ("cls_token".into(), vec![1, 1, d], Init::Normal(0.02)),
            (
                "pos_embed".into(),
                vec![1, pos_tokens, d],
                Init::Normal(0.02),
            ),
            (
                "patch_embed.proj.weight".into(),
                vec![d, 3, p, p],
                Init::FanInUniform(3 * p * p),
            ),
            ("patch_embed.proj.bias".into(), vec![d], Init::Zeros),
        ];
        for i in 0..spec.depth {
            let b = |s: &str| format!("blocks.{i}.{s}");
            plan.push((b("norm1.weight"), vec![d], Init::Ones));
            plan.push((b("norm1.bias"), vec![d], Init::Zeros));
            plan.push((b("attn.qkv.weight"), vec![3 * d, d], Init::FanInUniform(d)));
            plan.push((b("attn.qkv.bias"), vec![3 * d], Init::Zeros));
            plan.push((b("attn.proj.weight"), vec![d, d], Init::FanInUniform(d)));
            plan.push((b("attn.proj.bias"), vec![d], Init::Zeros));
            if spec.has_layer_scale() {
                plan.push((b("ls1.gamma"), vec![d], Init::Ones));
            }
            plan.push((b("norm2.weight"), vec![d], Init::Ones));
            plan.push((b("norm2.bias"), vec![d], Init::Zeros));
            plan.push((b("mlp.fc1.weight"), vec![hidden, d], Init::FanInUniform(d)));
            plan.push((b("mlp.fc1.bias"), vec![hidden], Init::Zeros));
            plan.push((
                b("mlp.fc2.weight"),
                vec![d, hidden],
                Init::FanInUniform(hidden),
            ));
            plan.push((b("mlp.fc2.bias"), vec![d], Init::Zeros));
            if spec.has_layer_scale() {
                plan.push((b("ls2.gamma"), vec![d], Init::Ones));
            }
        }

        let from_file;
        let loaded = match (tensors, spec.kind) {
            (Some(t), _) => Some(t),
            (None, BackboneKind::TestStub) => None,
            (None, BackboneKind::PretrainedVitS14) => {
                let path = spec.weights.as_ref().ok_or_else(|| {
                    Error::config("pretrained backbone needs `model.backbone.weights` pointing to a local checkpoint")
                })?;
                from_file = load_checkpoint(path)?;
                Some(&from_file)
            }
        };

        let mut rng = ChaCha8Rng::seed_from_u64(spec.stub_seed);
        let mut params: HashMap<String, Param> = HashMap::new();
        for (name, shape, init) in plan {
            let role = role_for(&name);
            let full = format!("backbone.{name}");
            let param = match loaded {
                None => store.init(&full, role, &shape, init, bitfit, &mut rng)?,
                Some(tensors) => {
                    let t = tensors.get(&name).ok_or_else(|| {
                        Error::Checkpoint(format!("backbone checkpoint lacks `{name}`"))
                    })?;
                    if t.dims() != shape.as_slice() {
                        return Err(Error::Checkpoint(format!(
                            "backbone `{name}` has shape {:?}, expected {shape:?}",
                            t.dims()
                        )));
                    }
                    store.insert(&full, role, t.clone(), bitfit)?
                }
            };
            params.insert(name, param);
        }

        let take = |name: &str| params[name].clone();
        let blocks = (0..spec.depth)
            .map(|i| {
                let g = |s: &str| take(&format!("blocks.{i}.{s}"));
                let ls = |s: &str| spec.has_layer_scale().then(|| g(s));
                Block {
                    norm1: LayerNorm::from_params(g("norm1.weight"), g("norm1.bias"), 1e-6),
                    qkv: Linear::from_params(g("attn.qkv.weight"), g("attn.qkv.bias")),
                    proj: Linear::from_params(g("attn.proj.weight"), g("attn.proj.bias")),
                    ls1: ls("ls1.gamma"),
                    norm2: LayerNorm::from_params(g("norm2.weight"), g("norm2.bias"), 1e-6),
                    fc1: Linear::from_params(g("mlp.fc1.weight"), g("mlp.fc1.bias")),
                    fc2: Linear::from_params(g("mlp.fc2.weight"), g("mlp.fc2.bias")),
                    ls2: ls("ls2.gamma"),
                }
            })
            .collect();
        Ok(VisionTransformer {
            spec: spec.clone(),
            patch_weight: take("patch_embed.proj.weight"),
            patch_bias: take("patch_embed.proj.bias"),
            cls_token: take("cls_token"),
            pos_embed: take("pos_embed"),
            blocks,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    /// Raw outputs of the tapped blocks as `(N, D, G, G)` grids, ordered like
    /// `tap_layers`. Blocks past the deepest tap are not evaluated.
    pub fn forward_taps(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let (n, _, h, w) = images.dims4()?;
        let p = self.spec.patch_size;
        let (gh, gw) = (h / p, w / p);
        if gh == 0 || gw == 0 {
            return Err(Error::shape(format!(
                "{h}x{w} input is smaller than one {p}px patch"
            )));
        }
        let d = self.spec.embed_dim;
        // non-overlapping patches as one matrix product
        let x = images.narrow(2, 0, gh * p)?.narrow(3, 0, gw * p)?;
        let x = x
            .reshape((n, 3, gh, p, gw, p))?
            .permute((0, 2, 4, 1, 3, 5))?
            .contiguous()?;
        let x = x.reshape((n * gh * gw, 3 * p * p))?;
        let wmat = self.patch_weight.t().reshape((d, 3 * p * p))?;
        let tokens = x.matmul(&wmat.t()?)?.broadcast_add(&self.patch_bias.t())?;
        let tokens = tokens.reshape((n, gh * gw, d))?;
        let cls = self.cls_token.t().broadcast_as((n, 1, d))?;
        let mut x = Tensor::cat(&[&cls, &tokens], 1)?;
        x = x.broadcast_add(&self.position_embedding(gh, gw)?)?;

        let deepest = *self.spec.tap_layers.last().unwrap();
        let mut taps = Vec::with_capacity(self.spec.tap_layers.len());
        for (i, block) in self.blocks.iter().enumerate().take(deepest + 1) {
            x = self.block_forward(block, &x)?;
            if self.spec.tap_layers.contains(&i) {
                let grid = x
                    .narrow(1, 1, gh * gw)?
                    .reshape((n, gh, gw, d))?
                    .permute((0, 3, 1, 2))?;
                taps.push(grid.contiguous()?);
            }
        }
        Ok(taps)
    }

    fn position_embedding(&self, gh: usize, gw: usize) -> Result<Tensor> {
        let pos = self.pos_embed.t();
        let (_, t, d) = pos.dims3()?;
        let g0 = ((t - 1) as f64).sqrt().round() as usize;
        if g0 * g0 + 1 != t {
            return Err(Error::Checkpoint(format!(
                "pos_embed with {t} tokens is not a square grid"
            )));
        }
        if (g0, g0) == (gh, gw) {
            return Ok(pos);
        }
        let cls = pos.narrow(1, 0, 1)?;
        let grid = pos
            .narrow(1, 1, g0 * g0)?
            .reshape((1, g0, g0, d))?
            .permute((0, 3, 1, 2))?;
        let grid = resize_bilinear(&grid, gh, gw)?
            .permute((0, 2, 3, 1))?
            .reshape((1, gh * gw, d))?;
        Ok(Tensor::cat(&[&cls, &grid], 1)?)
    }

    fn block_forward(&self, b: &Block, x: &Tensor) -> Result<Tensor> {
        let (n, t, d) = x.dims3()?;
        let heads = self.spec.num_heads;
        let dh = d / heads;
        let qkv = b.qkv.forward(&b.norm1.forward(x)?)?;
        let qkv = qkv
            .reshape((n, t, 3, heads, dh))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let att = (q.matmul(&k.t()?)? * (1.0 / (dh as f64).sqrt()))?;
        let att = candle_nn::ops::softmax_last_dim(&att)?;
        let y = att
            .matmul(&v)?
            .permute((0, 2, 1, 3))?
            .contiguous()?
            .reshape((n, t, d))?;
        let mut y = b.proj.forward(&y)?;
        if let Some(g) = &b.ls1 {
            y = y.broadcast_mul(&g.t())?;
        }
        let x = (x + y)?;
        let mut m = b
            .fc2
            .forward(&b.fc1.forward(&b.norm2.forward(&x)?)?.gelu_erf()?)?;
        if let Some(g) = &b.ls2 {
            m = m.broadcast_mul(&g.t())?;
        }
        Ok((x + m)?)
    }
}

fn load_checkpoint(path: &Path) -> Result<HashMap<String, Tensor>> {
    if !path.exists() {
        return Err(Error::Checkpoint(format!(
            "backbone checkpoint {} not found",
            path.display()
        )));
    }
    let tensors = candle_core::safetensors::load(path, &Device::Cpu)?;
    Ok(tensors.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tap_validation() {
        let mut s = BackboneSpec::test_stub(8, 32);
        assert!(s.validate().is_ok());
        s.tap_layers = vec![1, 2, 8];
        assert!(s.validate().is_err());
        s.tap_layers = vec![2, 1];
        assert!(s.validate().is_err());
        s.tap_layers = vec![];
        assert!(s.validate().is_err());
    }

    #[test]
    fn roles_from_names() {
        assert_eq!(
            role_for("blocks.0.attn.qkv.weight"),
            ParamRole::BackboneFrozen
        );
        assert_eq!(role_for("blocks.0.attn.qkv.bias"), ParamRole::BackboneBias);
        assert_eq!(role_for("blocks.3.norm1.weight"), ParamRole::BackboneNorm);
        assert_eq!(role_for("blocks.3.norm2.bias"), ParamRole::BackboneNorm);
        assert_eq!(role_for("blocks.3.ls1.gamma"), ParamRole::BackboneFrozen);
        assert_eq!(role_for("pos_embed"), ParamRole::BackboneFrozen);
        assert_eq!(role_for("patch_embed.proj.bias"), ParamRole::BackboneBias);
    }

    #[test]
    fn missing_pretrained_weights_is_an_error() {
        let mut store = ParamStore::new();
        let err = VisionTransformer::new(&BackboneSpec::vit_s14(None), 518, true, &mut store, None)
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let spec = BackboneSpec::vit_s14(Some("/nonexistent/vit.safetensors".into()));
        assert!(matches!(
            VisionTransformer::new(&spec, 518, true, &mut ParamStore::new(), None),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn stub_taps_have_patch_grid() {
        let spec = BackboneSpec::test_stub(8, 16);
        let vit = VisionTransformer::new(&spec, 64, true, &mut ParamStore::new(), None).unwrap();
        let x = Tensor::ones((2, 3, 64, 64), candle_core::DType::F32, &Device::Cpu).unwrap();
        let taps = vit.forward_taps(&x).unwrap();
        assert_eq!(taps.len(), 4);
        for t in taps {
            assert_eq!(t.dims(), &[2, 16, 8, 8]);
        }
    }
}
