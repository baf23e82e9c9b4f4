//! Attention-map overlays: the probability grid blown up to image size and
//! blended over the input, with the argmax region outlined.

use crate::attention::AttentionDistribution;
use crate::error::{Error, Result};
use crate::image::PixelRect;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Weight of the heat map in the blend.
pub const ALPHA: f64 = 0.6;
const OUTLINE: [f64; 3] = [0.0, 1.0, 0.0];

/// Warm ramp from black to pale yellow; lighter means more probable.
fn heat(v: f64) -> [f64; 3] {
    [v.sqrt(), v, v * v * 0.6]
}

/// `3×H×W` overlay for a `1×H×W` or `3×H×W` image.
///
/// Each grid cell covers `stride × stride` pixels; probabilities are scaled by
/// the largest one, so the most probable cell is always the brightest.
pub fn attention_overlay<S: Scalar>(
    image: &Tensor<S>,
    dist: &AttentionDistribution<S>,
    stride: usize,
    outline: Option<PixelRect>,
) -> Result<Tensor<f64>> {
    let (c, h, w) = image.chw()?;
    if c != 1 && c != 3 {
        return Err(Error::shape("attention_overlay", format!("{c} channels; expected 1 or 3")));
    }
    if stride == 0 || dist.h * stride > h || dist.w * stride > w {
        return Err(Error::shape(
            "attention_overlay",
            format!("{}×{} grid at stride {stride} does not fit a {h}×{w} image", dist.h, dist.w),
        ));
    }
    let peak = dist.probs.iter().fold(0.0f64, |a, p| a.max(p.as_f64()));
    let px = image.values();
    let mut out = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let (row, col) = ((y / stride).min(dist.h - 1), (x / stride).min(dist.w - 1));
            let v = if peak > 0.0 { dist.prob(row, col).as_f64() / peak } else { 0.0 };
            let hc = heat(v);
            for ch in 0..3 {
                let base = px[(if c == 1 { 0 } else { ch } * h + y) * w + x].as_f64();
                out[(ch * h + y) * w + x] = ((1.0 - ALPHA) * base + ALPHA * hc[ch]).clamp(0.0, 1.0);
            }
        }
    }
    if let Some(r) = outline {
        for (y, x) in rect_border(r, h, w) {
            for ch in 0..3 {
                out[(ch * h + y) * w + x] = OUTLINE[ch];
            }
        }
    }
    Tensor::new(vec![3, h, w], out)
}

/// Pixels on the one-pixel border of `r`, clipped to the image.
fn rect_border(r: PixelRect, h: usize, w: usize) -> Vec<(usize, usize)> {
    if r.w == 0 || r.h == 0 {
        return Vec::new();
    }
    let (x1, y1) = ((r.x + r.w - 1).min(w - 1), (r.y + r.h - 1).min(h - 1));
    let mut pts = Vec::new();
    for y in r.y..=y1 {
        for x in r.x..=x1 {
            if y == r.y || y == y1 || x == r.x || x == x1 {
                pts.push((y, x));
            }
        }
    }
    pts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_lights_a_single_cell() {
        let image = Tensor::<f64>::full(&[1, 16, 16], 0.5);
        let mut probs = vec![0.0; 16];
        probs[6] = 1.0;
        let dist = AttentionDistribution::from_probs(probs, 4, 4, 1).unwrap();
        let o = attention_overlay(&image, &dist, 4, None).unwrap();
        assert_eq!(o.shape(), &[3, 16, 16]);
        let red = &o.values()[..256];
        let bright: Vec<usize> = (0..256).filter(|&i| red[i] > 0.5).collect();
        assert_eq!(bright.len(), 16);
        assert!(bright.iter().all(|&i| i / 16 / 4 == 1 && i % 16 / 4 == 2));
    }

    #[test]
    fn outline_is_drawn_and_dimensions_kept() {
        let image = Tensor::<f64>::zeros(&[3, 8, 12]);
        let dist = AttentionDistribution::from_probs(vec![1.0 / 6.0; 6], 2, 3, 1).unwrap();
        let o = attention_overlay(&image, &dist, 4, Some(PixelRect::new(4, 0, 4, 4))).unwrap();
        assert_eq!(o.shape(), &[3, 8, 12]);
        let g = |y: usize, x: usize| o.values()[(8 + y) * 12 + x];
        assert_eq!(g(0, 4), 1.0);
        assert_eq!(g(3, 7), 1.0);
        assert!(g(1, 5) < 1.0);
    }
}
