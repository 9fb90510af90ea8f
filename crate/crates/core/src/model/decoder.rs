//! Global-branch decoder: per-level projections, residual top-down fusion
//! and learned sub-pixel upsampling.

use std::collections::BTreeMap;

use candle_core::Tensor;
use rand::Rng;

use super::layers::{Builder, Conv2d, ConvNormAct, Norm, NormKind};
use super::resize::{pixel_shuffle, resize_bilinear};
use crate::error::{Error, Result};

/// Projected backbone features keyed by tap index, all `(N, C_dec, G, G)`.
#[derive(Debug, Clone, Default)]
pub struct FeaturePyramid {
    pub levels: BTreeMap<usize, Tensor>,
}

impl FeaturePyramid {
    pub fn validate(&self) -> Result<()> {
        let mut shapes = self.levels.values().map(|t| t.dims().to_vec());
        if let Some(first) = shapes.next() {
            if first.len() != 4 {
                return Err(Error::shape("pyramid levels must be (N, C, H, W)"));
            }
            if shapes.any(|s| s != first) {
                return Err(Error::shape("pyramid levels disagree in shape"));
            }
        }
        Ok(())
    }
}

/// `ReLU(phi(deep + skip) + (deep + skip))`.
pub fn residual_fusion(
    deep: &Tensor,
    skip: &Tensor,
    phi: impl FnOnce(&Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    if deep.dims() != skip.dims() {
        return Err(Error::shape(format!(
            "fusion inputs disagree: {:?} vs {:?}",
            deep.dims(),
            skip.dims()
        )));
    }
    let sum = (deep + skip)?;
    let refined = phi(&sum)?;
    if refined.dims() != sum.dims() {
        return Err(Error::shape("fusion refinement changed the feature shape"));
    }
    Ok((refined + sum)?.relu()?)
}

/// Conv-Norm-ReLU-Conv-Norm refinement used inside each fusion step.
#[derive(Debug, Clone)]
pub struct FusionBlock {
    first: ConvNormAct,
    second: ConvNormAct,
}

impl FusionBlock {
    pub fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        width: usize,
        norm: NormKind,
    ) -> Result<Self> {
        Ok(FusionBlock {
            first: ConvNormAct::new(b, &format!("{name}.0"), width, width, 3, 1, norm, true)?,
            second: ConvNormAct::new(b, &format!("{name}.1"), width, width, 3, 1, norm, false)?,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.second.forward(&self.first.forward(x, train)?, train)
    }
}

/// x2 learned upsampling: 1x1 conv to `4C`, sub-pixel shuffle, Norm, ReLU.
#[derive(Debug, Clone)]
pub struct PixelShuffleUp {
    expand: Conv2d,
    norm: Norm,
}

impl PixelShuffleUp {
    pub fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        width: usize,
        norm: NormKind,
    ) -> Result<Self> {
        Ok(PixelShuffleUp {
            expand: Conv2d::new(
                b,
                &format!("{name}.expand"),
                width,
                4 * width,
                1,
                1,
                0,
                false,
            )?,
            norm: Norm::new(b, &format!("{name}.norm"), width, norm)?,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = pixel_shuffle(&self.expand.forward(x)?, 2)?;
        Ok(self.norm.forward(&y, train)?.relu()?)
    }
}

/// Number of x2 stages that first reach `target` from `grid`.
pub fn upsample_stages(grid: usize, target: usize) -> usize {
    let mut n = 0;
    while grid << n < target {
        n += 1;
    }
    n
}

#[derive(Debug, Clone)]
pub struct GlobalDecoder {
    projections: Vec<(usize, Conv2d)>,
    fusions: Vec<FusionBlock>,
    upsamplers: Vec<PixelShuffleUp>,
}

impl GlobalDecoder {
    pub fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        taps: &[usize],
        embed_dim: usize,
        width: usize,
        stages: usize,
        norm: NormKind,
    ) -> Result<Self> {
        let projections = taps
            .iter()
            .map(|&t| {
                Ok((
                    t,
                    Conv2d::new(
                        b,
                        &format!("decoder.proj.{t}"),
                        embed_dim,
                        width,
                        1,
                        1,
                        0,
                        true,
                    )?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let fusions = (0..taps.len().saturating_sub(1))
            .map(|i| FusionBlock::new(b, &format!("decoder.fuse.{i}"), width, norm))
            .collect::<Result<Vec<_>>>()?;
        let upsamplers = (0..stages)
            .map(|i| PixelShuffleUp::new(b, &format!("decoder.up.{i}"), width, norm))
            .collect::<Result<Vec<_>>>()?;
        Ok(GlobalDecoder {
            projections,
            fusions,
            upsamplers,
        })
    }

    /// Projects raw tap activations (ordered like the tap list).
    pub fn project(&self, taps: &[Tensor]) -> Result<FeaturePyramid> {
        if taps.len() != self.projections.len() {
            return Err(Error::shape(format!(
                "expected {} tapped activations, got {}",
                self.projections.len(),
                taps.len()
            )));
        }
        let mut levels = BTreeMap::new();
        for ((tap, proj), x) in self.projections.iter().zip(taps) {
            levels.insert(*tap, proj.forward(x)?);
        }
        Ok(FeaturePyramid { levels })
    }

    /// Deepest-first residual fusion, sub-pixel upsampling, then a bilinear
    /// resize to exactly `out_h x out_w`.
    pub fn fuse(
        &self,
        pyramid: &FeaturePyramid,
        out_h: usize,
        out_w: usize,
        train: bool,
    ) -> Result<Tensor> {
        pyramid.validate()?;
        let mut levels = pyramid.levels.values().rev();
        let mut x = levels
            .next()
            .ok_or_else(|| Error::shape("empty feature pyramid"))?
            .clone();
        for (i, skip) in levels.enumerate() {
            let block = self
                .fusions
                .get(i)
                .ok_or_else(|| Error::shape("pyramid has more levels than fusion blocks"))?;
            x = residual_fusion(&x, skip, |s| block.forward(s, train))?;
        }
        for up in &self.upsamplers {
            x = up.forward(&x, train)?;
        }
        resize_bilinear(&x, out_h, out_w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn stage_counts() {
        assert_eq!(upsample_stages(37, 130), 2);
        assert_eq!(upsample_stages(16, 32), 1);
        assert_eq!(upsample_stages(32, 32), 0);
        assert_eq!(upsample_stages(9, 130), 4);
    }

    #[test]
    fn identity_refinement_doubles_the_sum() {
        let deep = Tensor::new(&[[[[1.0f32, -2.0], [0.5, -0.25]]]], &Device::Cpu).unwrap();
        let skip = Tensor::new(&[[[[0.5f32, 1.0], [-1.0, 0.0]]]], &Device::Cpu).unwrap();
        let out = residual_fusion(&deep, &skip, |s| Ok(s.clone())).unwrap();
        let got: Vec<f32> = out.flatten_all().unwrap().to_vec1().unwrap();
        // s = [1.5, -1, -0.5, -0.25]; ReLU(2s)
        assert_eq!(got, vec![3.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_refinement_is_relu_of_sum() {
        let deep = Tensor::new(&[[[[1.0f32, -2.0]]]], &Device::Cpu).unwrap();
        let skip = Tensor::new(&[[[[0.5f32, 1.0]]]], &Device::Cpu).unwrap();
        let out = residual_fusion(&deep, &skip, |s| Ok(s.zeros_like()?)).unwrap();
        assert_eq!(
            out.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            vec![1.5, 0.0]
        );
        let zeros = Tensor::zeros((1, 1, 1, 2), DType::F32, &Device::Cpu).unwrap();
        assert!(
            residual_fusion(&deep, &zeros.reshape((1, 2, 1, 1)).unwrap(), |s| Ok(
                s.clone()
            ))
            .is_err()
        );
    }
}
