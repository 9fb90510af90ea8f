//! Binary morphology and connected components on [`BinaryMask`].

use std::collections::VecDeque;

use crate::annotations::PixelBox;
use crate::labels::BinaryMask;

/// Erosion with a `(2r+1) x (2r+1)` square structuring element. Pixels
/// outside the grid count as background.
pub fn erode(mask: &BinaryMask, radius: u32) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    let r = radius as i64;
    // separable: horizontal pass then vertical pass
    let mut horiz = vec![false; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            horiz[(y * w + x) as usize] =
                (x - r..=x + r).all(|xx| xx >= 0 && xx < w && mask.get(xx as u32, y as u32));
        }
    }
    let mut out = BinaryMask::new(mask.width(), mask.height());
    for y in 0..h {
        for x in 0..w {
            let keep = (y - r..=y + r).all(|yy| yy >= 0 && yy < h && horiz[(yy * w + x) as usize]);
            if keep {
                out.set(x as u32, y as u32, true);
            }
        }
    }
    out
}

/// A connected set of foreground pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub pixels: Vec<(u32, u32)>,
    pub bbox: PixelBox,
}

impl Component {
    pub fn to_mask(&self, width: u32, height: u32) -> BinaryMask {
        let mut m = BinaryMask::new(width, height);
        for &(x, y) in &self.pixels {
            m.set(x, y, true);
        }
        m
    }
}

/// 8-connected components in raster order of their first pixel.
pub fn connected_components(mask: &BinaryMask) -> Vec<Component> {
    let (w, h) = (mask.width(), mask.height());
    let mut seen = vec![false; w as usize * h as usize];
    let mut comps = Vec::new();
    let mut queue = VecDeque::new();
    for y0 in 0..h {
        for x0 in 0..w {
            let i0 = (y0 * w + x0) as usize;
            if seen[i0] || !mask.get(x0, y0) {
                continue;
            }
            seen[i0] = true;
            queue.push_back((x0, y0));
            let mut pixels = Vec::new();
            let (mut bx0, mut by0, mut bx1, mut by1) = (x0, y0, x0, y0);
            while let Some((x, y)) = queue.pop_front() {
                pixels.push((x, y));
                bx0 = bx0.min(x);
                by0 = by0.min(y);
                bx1 = bx1.max(x);
                by1 = by1.max(y);
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                            continue;
                        }
                        let (nx, ny) = (nx as u32, ny as u32);
                        let ni = (ny * w + nx) as usize;
                        if !seen[ni] && mask.get(nx, ny) {
                            seen[ni] = true;
                            queue.push_back((nx, ny));
                        }
                    }
                }
            }
            pixels.sort_unstable_by_key(|&(x, y)| (y, x));
            comps.push(Component {
                pixels,
                bbox: PixelBox::new(bx0, by0, bx1 + 1, by1 + 1),
            });
        }
    }
    comps
}
