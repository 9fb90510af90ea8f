//! Differentiable resampling: bilinear resize as two matrix products and
//! sub-pixel rearrangement.

use candle_core::{Device, Tensor};

use crate::error::{Error, Result};

/// `out x in` interpolation matrix with half-pixel centers and edge clamping
/// (the `align_corners = false` convention).
pub fn bilinear_matrix(out_len: usize, in_len: usize) -> Vec<f32> {
    let mut m = vec![0f32; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for o in 0..out_len {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        let frac = (src - i0 as f64) as f32;
        m[o * in_len + i0] += 1.0 - frac;
        m[o * in_len + i1] += frac;
    }
    m
}

fn matrix_t(out_len: usize, in_len: usize, device: &Device) -> Result<Tensor> {
    // stored transposed: (in, out)
    let m = bilinear_matrix(out_len, in_len);
    Ok(Tensor::from_vec(m, (out_len, in_len), device)?
        .t()?
        .contiguous()?)
}

/// Bilinear resize of an `(N, C, H, W)` tensor to `(N, C, out_h, out_w)`.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("resize target must be non-empty"));
    }
    let dev = x.device();
    // along W: (N*C*H, W) @ (W, out_w)
    let y = x
        .contiguous()?
        .reshape((n * c * h, w))?
        .matmul(&matrix_t(out_w, w, dev)?)?;
    // along H: (N*C*out_w, H) @ (H, out_h)
    let y = y
        .reshape((n * c, h, out_w))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((n * c * out_w, h))?;
    let y = y.matmul(&matrix_t(out_h, h, dev)?)?;
    Ok(y.reshape((n * c, out_w, out_h))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((n, c, out_h, out_w))?)
}

/// Rearranges `(N, C*r*r, H, W)` into `(N, C, H*r, W*r)`; input channel
/// `c*r*r + i*r + j` lands at output offset `(i, j)` of each `r x r` cell.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (n, cr2, h, w) = x.dims4()?;
    if cr2 % (r * r) != 0 {
        return Err(Error::shape(format!(
            "{cr2} channels not divisible by {}",
            r * r
        )));
    }
    let c = cr2 / (r * r);
    // (N, C, r, r, H, W) -> (N, C, H, r, W, r); split into two 5-d permutes
    let y = x.reshape((n * c, r, r, h, w))?;
    let y = y.permute((0, 3, 1, 4, 2))?.contiguous()?;
    Ok(y.reshape((n, c, h * r, w * r))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn matrix_rows_sum_to_one() {
        for (o, i) in [(7, 3), (3, 7), (130, 148), (1, 5), (5, 1)] {
            let m = bilinear_matrix(o, i);
            for r in 0..o {
                let s: f32 = m[r * i..(r + 1) * i].iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn upsample_two_matches_hand_values() {
        // 1-d: [0, 1] -> [0, 0.25, 0.75, 1] under half-pixel centers
        let m = bilinear_matrix(4, 2);
        assert_eq!(m, vec![1.0, 0.0, 0.75, 0.25, 0.25, 0.75, 0.0, 1.0]);
    }

    #[test]
    fn resize_shape_and_constant_preservation() {
        let x = Tensor::full(3.5f32, (2, 3, 5, 7), &Device::Cpu).unwrap();
        let y = resize_bilinear(&x, 11, 4).unwrap();
        assert_eq!(y.dims(), &[2, 3, 11, 4]);
        let v: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|&a| (a - 3.5).abs() < 1e-5));
    }

    #[test]
    fn resize_is_separable_bilinear() {
        let data: Vec<f32> = (0..12).map(|v| v as f32).collect();
        let x = Tensor::from_vec(data.clone(), (1, 1, 3, 4), &Device::Cpu).unwrap();
        let y = resize_bilinear(&x, 5, 6).unwrap();
        let got: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
        let (mh, mw) = (bilinear_matrix(5, 3), bilinear_matrix(6, 4));
        for oy in 0..5 {
            for ox in 0..6 {
                let mut want = 0f32;
                for iy in 0..3 {
                    for ix in 0..4 {
                        want += mh[oy * 3 + iy] * mw[ox * 4 + ix] * data[iy * 4 + ix];
                    }
                }
                assert!((got[oy * 6 + ox] - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn pixel_shuffle_layout() {
        let (c, r, h, w) = (2usize, 2usize, 2usize, 3usize);
        let data: Vec<f32> = (0..c * r * r * h * w).map(|v| v as f32).collect();
        let x = Tensor::from_vec(data.clone(), (1, c * r * r, h, w), &Device::Cpu).unwrap();
        let y = pixel_shuffle(&x, r).unwrap();
        assert_eq!(y.dims(), &[1, c, h * r, w * r]);
        let got: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
        for ch in 0..c {
            for oy in 0..h * r {
                for ox in 0..w * r {
                    let src_c = ch * r * r + (oy % r) * r + (ox % r);
                    let want = data[(src_c * h + oy / r) * w + ox / r];
                    assert_eq!(got[(ch * h * r + oy) * w * r + ox], want);
                }
            }
        }
        assert_eq!(y.dtype(), DType::F32);
    }
}
