//! Dense per-pixel grids: class label maps and binary masks.

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, Luma};

use crate::annotations::PixelBox;
use crate::error::{Error, Result};

/// Per-pixel class labels in `{0..K}` (0 = background), row-major.
///
/// Used for teacher pseudo-labels, predictions and ground truth alike.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

/// Teacher pseudo-labels share the [`LabelMap`] representation.
pub type PseudoLabelMap = LabelMap;

impl LabelMap {
    pub fn zeros(width: u32, height: u32) -> Self {
        LabelMap {
            width,
            height,
            data: vec![0; width as usize * height as usize],
        }
    }

    pub fn from_vec(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if data.len() != width as usize * height as usize {
            return Err(Error::shape(format!(
                "label buffer of {} values for a {width}x{height} map",
                data.len()
            )));
        }
        Ok(LabelMap {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<u8> {
        self.data
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: u8) {
        self.data[y as usize * self.width as usize + x as usize] = v;
    }

    pub fn max_label(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Rejects values above `num_classes` (labels live in `{0..K}`).
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self.data.iter().position(|&v| v as usize > num_classes) {
            None => Ok(()),
            Some(i) => Err(Error::invalid(format!(
                "label {} at pixel ({}, {}) exceeds K={num_classes}",
                self.data[i],
                i % self.width as usize,
                i / self.width as usize
            ))),
        }
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Nearest-neighbour resampling (pixel-center aligned).
    pub fn resize_nearest(&self, width: u32, height: u32) -> LabelMap {
        if (width, height) == self.dims() {
            return self.clone();
        }
        let xs = nearest_index(self.width, width);
        let ys = nearest_index(self.height, height);
        let mut out = Vec::with_capacity(width as usize * height as usize);
        for &sy in &ys {
            let row = &self.data[sy * self.width as usize..(sy + 1) * self.width as usize];
            out.extend(xs.iter().map(|&sx| row[sx]));
        }
        LabelMap {
            width,
            height,
            data: out,
        }
    }

    pub fn flip_horizontal(&self) -> LabelMap {
        let w = self.width as usize;
        let mut data = self.data.clone();
        for row in data.chunks_mut(w) {
            row.reverse();
        }
        LabelMap {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_raw(self.width, self.height, self.data.clone())
            .expect("buffer length matches dimensions")
    }

    /// Encodes as an 8-bit single-channel PNG whose pixel values are the labels.
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Cursor::new(Vec::new());
        self.to_gray_image().write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
        let gray = match img {
            image::DynamicImage::ImageLuma8(g) => g,
            other => {
                return Err(Error::invalid(format!(
                    "label PNG must be 8-bit single-channel, found {:?}",
                    other.color()
                )))
            }
        };
        let (w, h) = gray.dimensions();
        Ok(LabelMap {
            width: w,
            height: h,
            data: gray.into_raw(),
        })
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_png_bytes(&bytes)
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        crate::util::write_atomic(path, &self.to_png_bytes()?)
    }
}

fn nearest_index(src: u32, dst: u32) -> Vec<usize> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| (((d as f64 + 0.5) * scale).floor() as usize).min(src as usize - 1))
        .collect()
}

/// Boolean H x W grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: u32, height: u32) -> Self {
        BinaryMask {
            width,
            height,
            data: vec![false; width as usize * height as usize],
        }
    }

    pub fn from_vec(width: u32, height: u32, data: Vec<bool>) -> Result<Self> {
        if data.len() != width as usize * height as usize {
            return Err(Error::shape(format!(
                "mask buffer of {} values for a {width}x{height} mask",
                data.len()
            )));
        }
        Ok(BinaryMask {
            width,
            height,
            data,
        })
    }

    /// Mask that is true exactly on `rect`.
    pub fn from_box(width: u32, height: u32, rect: PixelBox) -> Self {
        let mut m = BinaryMask::new(width, height);
        for y in rect.y0..rect.y1.min(height) {
            for x in rect.x0..rect.x1.min(width) {
                m.set(x, y, true);
            }
        }
        m
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        self.data[y as usize * self.width as usize + x as usize] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    /// Clears every pixel outside `rect`.
    pub fn clip_to(&mut self, rect: PixelBox) {
        let w = self.width;
        for (i, v) in self.data.iter_mut().enumerate() {
            let (x, y) = ((i as u32) % w, (i as u32) / w);
            if !rect.contains(x, y) {
                *v = false;
            }
        }
    }

    /// True when no pixel outside `rect` is set.
    pub fn is_within(&self, rect: PixelBox) -> bool {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .all(|(i, &v)| !v || rect.contains((i as u32) % w, (i as u32) / w))
    }

    pub fn union_with(&mut self, other: &BinaryMask) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
    }

    /// Pixels of `self` that are also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    /// Decodes a grayscale (or RGB/RGBA, using the first channel) PNG;
    /// nonzero pixels are foreground.
    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_luma8();
        let (w, h) = img.dimensions();
        Ok(BinaryMask {
            width: w,
            height: h,
            data: img.pixels().map(|p: &Luma<u8>| p.0[0] != 0).collect(),
        })
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let raw: Vec<u8> = self.data.iter().map(|&v| if v { 255 } else { 0 }).collect();
        let img = GrayImage::from_raw(self.width, self.height, raw).expect("dims match");
        let mut buf = Cursor::new(Vec::new());
        img.write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact() {
        let data: Vec<u8> = (0..35).map(|i| (i % 3) as u8).collect();
        let m = LabelMap::from_vec(7, 5, data).unwrap();
        let back = LabelMap::from_png_bytes(&m.to_png_bytes().unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn validate_rejects_labels_above_k() {
        let mut m = LabelMap::zeros(4, 4);
        m.set(1, 2, 3);
        assert!(m.validate(3).is_ok());
        assert!(m.validate(2).is_err());
    }

    #[test]
    fn nearest_resize_identity_and_doubling() {
        let m = LabelMap::from_vec(2, 2, vec![1, 2, 3, 0]).unwrap();
        assert_eq!(m.resize_nearest(2, 2), m);
        let up = m.resize_nearest(4, 4);
        assert_eq!(
            up.as_slice(),
            &[1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 0, 0, 3, 3, 0, 0]
        );
        assert_eq!(up.resize_nearest(2, 2), m);
    }

    #[test]
    fn mask_clip_and_containment() {
        let mut m = BinaryMask::new(8, 8);
        m.set(0, 0, true);
        m.set(3, 3, true);
        let rect = PixelBox::new(2, 2, 4, 4);
        assert!(!m.is_within(rect));
        m.clip_to(rect);
        assert!(m.is_within(rect));
        assert_eq!(m.count(), 1);
        assert_eq!(BinaryMask::from_box(8, 8, rect).count(), 4);
    }
}
