//! Pixel rectangles, crops and resampling on `C×H×W` images.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Axis-aligned pixel rectangle; `x`/`y` are the left column and top row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl PixelRect {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        PixelRect { x, y, w, h }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn intersects(&self, o: &PixelRect) -> bool {
        self.x < o.x + o.w && o.x < self.x + self.w && self.y < o.y + o.h && o.y < self.y + self.h
    }

    pub fn contains(&self, o: &PixelRect) -> bool {
        o.x >= self.x && o.y >= self.y && o.x + o.w <= self.x + self.w && o.y + o.h <= self.y + self.h
    }

    pub fn fits_in(&self, width: usize, height: usize) -> bool {
        self.x + self.w <= width && self.y + self.h <= height
    }
}

pub fn crop<S: Scalar>(image: &Tensor<S>, r: PixelRect) -> Result<Tensor<S>> {
    let (c, h, w) = image.chw()?;
    if r.area() == 0 {
        return Err(Error::shape("crop", "degenerate rectangle of zero area"));
    }
    if !r.fits_in(w, h) {
        return Err(Error::shape("crop", format!("{r:?} outside {w}×{h} image")));
    }
    let src = image.values();
    let mut out = Vec::with_capacity(c * r.area());
    for ch in 0..c {
        for row in r.y..r.y + r.h {
            let off = (ch * h + row) * w + r.x;
            out.extend_from_slice(&src[off..off + r.w]);
        }
    }
    Tensor::new(vec![c, r.h, r.w], out)
}

pub fn resize_nearest<S: Scalar>(image: &Tensor<S>, out_h: usize, out_w: usize) -> Result<Tensor<S>> {
    let (c, h, w) = image.chw()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("resize", "zero target size"));
    }
    let src = image.values();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        for y in 0..out_h {
            let sy = (y * h) / out_h;
            for x in 0..out_w {
                let sx = (x * w) / out_w;
                out.push(src[(ch * h + sy) * w + sx]);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Source coordinate and blend weight for half-pixel-centre bilinear sampling.
fn bilinear_taps(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let s = ((dst as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).clamp(0.0, (in_len - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, s - i0 as f64)
}

/// Bilinear resampling with pixel centres at half-integer coordinates.
///
/// Equal input and output sizes reproduce the input exactly.
pub fn resize_bilinear<S: Scalar>(image: &Tensor<S>, out_h: usize, out_w: usize) -> Result<Tensor<S>> {
    let (c, h, w) = image.chw()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("resize", "zero target size"));
    }
    let ys: Vec<_> = (0..out_h).map(|y| bilinear_taps(y, h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|x| bilinear_taps(x, w, out_w)).collect();
    let src = image.values();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            let (fy, gy) = (S::of(fy), S::of(1.0 - fy));
            for &(x0, x1, fx) in &xs {
                let (fx, gx) = (S::of(fx), S::of(1.0 - fx));
                let top = plane[y0 * w + x0] * gx + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * gx + plane[y1 * w + x1] * fx;
                out.push(top * gy + bot * fy);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Crops `rect` and resamples it bilinearly to `out_h × out_w`.
pub fn crop_and_resize<S: Scalar>(image: &Tensor<S>, rect: PixelRect, out_h: usize, out_w: usize) -> Result<Tensor<S>> {
    let patch = crop(image, rect)?;
    if rect.h == out_h && rect.w == out_w {
        return Ok(patch);
    }
    resize_bilinear(&patch, out_h, out_w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_resize() {
        let mut rng = crate::rng::Rng::seed(9);
        let img = Tensor::<f64>::uniform(&[3, 5, 7], 0.0, 1.0, &mut rng);
        let r = crop_and_resize(&img, PixelRect::new(0, 0, 7, 5), 5, 7).unwrap();
        assert_eq!(r, img);
        assert_eq!(resize_bilinear(&img, 5, 7).unwrap(), img);
    }

    #[test]
    fn bilinear_2x2_to_4x4_hand_computed() {
        // Half-pixel centres: output samples sit at source coords -0.25, 0.25, 0.75, 1.25,
        // clamped to [0, 1], so per-axis weights on the second pixel are 0, 0.25, 0.75, 1.
        let img = Tensor::<f64>::new(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let out = resize_bilinear(&img, 4, 4).unwrap();
        let f = [0.0, 0.25, 0.75, 1.0];
        for y in 0..4 {
            for x in 0..4 {
                let expected = (1.0 - f[y]) * ((1.0 - f[x]) * 0.0 + f[x] * 1.0) + f[y] * ((1.0 - f[x]) * 2.0 + f[x] * 3.0);
                assert!((out.values()[y * 4 + x] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_rect_rejected() {
        let img = Tensor::<f64>::zeros(&[1, 4, 4]);
        assert!(crop(&img, PixelRect::new(1, 1, 0, 2)).is_err());
        assert!(crop(&img, PixelRect::new(3, 3, 2, 2)).is_err());
    }

    #[test]
    fn full_scale_part_resize() {
        let img = Tensor::<f32>::full(&[3, 512, 512], 0.5);
        let out = crop_and_resize(&img, PixelRect::new(64, 96, 128, 128), 512, 512).unwrap();
        assert_eq!(out.shape(), &[3, 512, 512]);
        assert!(out.values().iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn rect_intersection() {
        let a = PixelRect::new(0, 0, 4, 4);
        assert!(a.intersects(&PixelRect::new(3, 3, 2, 2)));
        assert!(!a.intersects(&PixelRect::new(4, 0, 2, 2)));
    }
}
