//! Fully convolutional backbone and the geometry linking feature cells to pixels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::PixelRect;
use crate::layer::{BoundLayer, LayerParams, Parameters};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Backbone activations plus the pixel stride of one grid cell.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<S> {
    pub activations: Tensor<S>,
    pub stride: usize,
    pub source_h: usize,
    pub source_w: usize,
}

impl<S: Scalar> FeatureMap<S> {
    pub fn new(activations: Tensor<S>, stride: usize, source_h: usize, source_w: usize) -> Result<Self> {
        let (_, h, w) = activations.chw()?;
        if stride == 0 || stride * h > source_h + stride - 1 || stride * w > source_w + stride - 1 {
            return Err(Error::shape(
                "feature map",
                format!("{h}×{w} grid at stride {stride} overruns {source_h}×{source_w} source"),
            ));
        }
        Ok(FeatureMap {
            activations,
            stride,
            source_h,
            source_w,
        })
    }

    pub fn channels(&self) -> usize {
        self.activations.shape()[0]
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.activations.shape()[1], self.activations.shape()[2])
    }
}

/// Size of the part attended at timestep `t`, in cells and in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub t: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub pixel_h: usize,
    pub pixel_w: usize,
}

impl RegionSpec {
    pub fn new(t: usize, grid_h: usize, grid_w: usize, stride: usize) -> Self {
        RegionSpec {
            t,
            grid_h,
            grid_w,
            pixel_h: grid_h * stride,
            pixel_w: grid_w * stride,
        }
    }
}

/// Centre of an attended region in feature cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GlimpseLocation {
    pub t: usize,
    pub row: usize,
    pub col: usize,
}

/// Cell rectangle `[top, top+h) × [left, left+w)` on a feature grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridRect {
    pub top: usize,
    pub left: usize,
    pub h: usize,
    pub w: usize,
}

fn clamp_start(center: usize, size: usize, extent: usize) -> usize {
    center.saturating_sub(size / 2).min(extent - size)
}

/// The cell rectangle of `spec` centred on `loc`, shifted to lie inside the grid.
pub fn grid_rect(loc: GlimpseLocation, spec: &RegionSpec, grid_h: usize, grid_w: usize) -> Result<GridRect> {
    if spec.grid_h == 0 || spec.grid_w == 0 || spec.grid_h > grid_h || spec.grid_w > grid_w {
        return Err(Error::shape(
            "region",
            format!("{}×{} region does not fit a {grid_h}×{grid_w} grid", spec.grid_h, spec.grid_w),
        ));
    }
    if loc.row >= grid_h || loc.col >= grid_w {
        return Err(Error::shape(
            "region",
            format!("location ({}, {}) outside {grid_h}×{grid_w} grid", loc.row, loc.col),
        ));
    }
    Ok(GridRect {
        top: clamp_start(loc.row, spec.grid_h, grid_h),
        left: clamp_start(loc.col, spec.grid_w, grid_w),
        h: spec.grid_h,
        w: spec.grid_w,
    })
}

/// Pixel rectangle whose extent matches the selected cells' receptive field.
pub fn region_to_patch<S: Scalar>(loc: GlimpseLocation, spec: &RegionSpec, map: &FeatureMap<S>) -> Result<PixelRect> {
    let (gh, gw) = map.grid();
    let r = grid_rect(loc, spec, gh, gw)?;
    let s = map.stride;
    let mut rect = PixelRect::new(r.left * s, r.top * s, r.w * s, r.h * s);
    // A grid that does not tile the image exactly still yields in-bounds crops.
    rect.x = rect.x.min(map.source_w.saturating_sub(rect.w));
    rect.y = rect.y.min(map.source_h.saturating_sub(rect.h));
    Ok(rect)
}

/// Copy of the activations under the region, `C×grid_h×grid_w`.
pub fn select_region_features<S: Scalar>(map: &FeatureMap<S>, loc: GlimpseLocation, spec: &RegionSpec) -> Result<Tensor<S>> {
    let (c, gh, gw) = map.activations.chw()?;
    let r = grid_rect(loc, spec, gh, gw)?;
    let src = map.activations.values();
    let mut out = Vec::with_capacity(c * r.h * r.w);
    for ch in 0..c {
        for row in r.top..r.top + r.h {
            let off = (ch * gh + row) * gw + r.left;
            out.extend_from_slice(&src[off..off + r.w]);
        }
    }
    Tensor::new(vec![c, r.h, r.w], out)
}

/// Graph version of [`select_region_features`]; gradients flow back into `map`.
pub fn select_region_var<S: Scalar>(g: &mut Graph<S>, map: Var, loc: GlimpseLocation, spec: &RegionSpec) -> Result<Var> {
    let (_, gh, gw) = g.value(map).chw()?;
    let r = grid_rect(loc, spec, gh, gw)?;
    g.slice(map, r.top, r.left, r.h, r.w)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneBlock<S> {
    pub conv: LayerParams<S>,
    pub pool: bool,
}

/// Ordered conv–relu(–maxpool) blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams<S> {
    pub blocks: Vec<BackboneBlock<S>>,
}

pub struct BoundBackbone {
    layers: Vec<BoundLayer>,
}

impl<S: Scalar> BackboneParams<S> {
    /// `3×3`, pad-1 conv–relu–pool blocks with the given channel widths.
    pub fn new(in_channels: usize, widths: &[usize], rng: &mut Rng) -> Self {
        let mut c = in_channels;
        let blocks = widths
            .iter()
            .map(|&w| {
                let conv = LayerParams::init(w, c, 3, 1, 2.0, rng);
                c = w;
                BackboneBlock { conv, pool: true }
            })
            .collect();
        BackboneParams { blocks }
    }

    /// The default desk backbone: 8, 16, 32 channels, downsample 8.
    pub fn desk(in_channels: usize, rng: &mut Rng) -> Self {
        Self::new(in_channels, &[8, 16, 32], rng)
    }

    pub fn downsample(&self) -> usize {
        self.blocks.iter().map(|b| b.conv.stride * if b.pool { 2 } else { 1 }).product()
    }

    pub fn in_channels(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.conv.in_channels())
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.conv.out_channels())
    }

    pub fn forward(&self, g: &mut Graph<S>, image: Var) -> Result<(Var, BoundBackbone)> {
        let mut x = image;
        let mut layers = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, bound) = b.conv.forward(g, x)?;
            layers.push(bound);
            x = g.relu(y);
            if b.pool {
                x = g.maxpool2(x)?;
            }
        }
        Ok((x, BoundBackbone { layers }))
    }

    pub fn pull_grads(&mut self, g: &Graph<S>, bound: &BoundBackbone) {
        for (b, l) in self.blocks.iter_mut().zip(&bound.layers) {
            b.conv.pull_grads(g, *l);
        }
    }

    /// Deterministic forward pass producing the shared feature map.
    pub fn extract(&self, image: &Tensor<S>) -> Result<FeatureMap<S>> {
        let (c, h, w) = image.chw()?;
        if c != self.in_channels() {
            return Err(Error::shape(
                "extract_features",
                format!("image channels: backbone expects {}, image has {c}", self.in_channels()),
            ));
        }
        let d = self.downsample();
        if h % d != 0 || w % d != 0 {
            let ph = (d - h % d) % d;
            let pw = (d - w % d) % d;
            return Err(Error::shape(
                "extract_features",
                format!("{h}×{w} image is not divisible by downsample {d}; pad by {ph} rows and {pw} columns"),
            ));
        }
        let mut g = Graph::new();
        let x = g.leaf(image);
        let (y, _) = self.forward(&mut g, x)?;
        let act = g.value(y).clone();
        FeatureMap::new(act, d, h, w)
    }
}

impl<S: Scalar> Parameters<S> for BackboneParams<S> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.conv.visit(&format!("feat.{i}"), f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.conv.visit_mut(&format!("feat.{i}"), f);
        }
    }
}

/// Free-function form of [`BackboneParams::extract`].
pub fn extract_features<S: Scalar>(image: &Tensor<S>, backbone: &BackboneParams<S>) -> Result<FeatureMap<S>> {
    backbone.extract(image)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(c: usize, h: usize, w: usize, stride: usize) -> FeatureMap<f64> {
        let vals = (0..c * h * w).map(|i| i as f64).collect();
        FeatureMap::new(Tensor::new(vec![c, h, w], vals).unwrap(), stride, h * stride, w * stride).unwrap()
    }

    #[test]
    fn full_scale_patches() {
        let m = map(1, 16, 16, 32);
        let loc = GlimpseLocation { t: 1, row: 8, col: 8 };
        let r4 = region_to_patch(loc, &RegionSpec::new(1, 4, 4, 32), &m).unwrap();
        assert_eq!((r4.w, r4.h), (128, 128));
        let r8 = region_to_patch(loc, &RegionSpec::new(2, 8, 8, 32), &m).unwrap();
        assert_eq!((r8.w, r8.h), (256, 256));
    }

    #[test]
    fn corner_center_clamps_flush() {
        let m = map(1, 8, 8, 8);
        let spec = RegionSpec::new(1, 4, 4, 8);
        let r = region_to_patch(GlimpseLocation { t: 1, row: 0, col: 7 }, &spec, &m).unwrap();
        assert_eq!(r, PixelRect::new(32, 0, 32, 32));
        let r = region_to_patch(GlimpseLocation { t: 1, row: 7, col: 0 }, &spec, &m).unwrap();
        assert_eq!(r, PixelRect::new(0, 32, 32, 32));
    }

    #[test]
    fn full_map_selection_is_identity() {
        let m = map(3, 4, 4, 8);
        let spec = RegionSpec::new(1, 4, 4, 8);
        let sel = select_region_features(&m, GlimpseLocation { t: 1, row: 2, col: 1 }, &spec).unwrap();
        assert_eq!(sel, m.activations);
    }

    #[test]
    fn central_2x2_of_8x8() {
        let m = map(2, 8, 8, 8);
        let spec = RegionSpec::new(1, 2, 2, 8);
        let sel = select_region_features(&m, GlimpseLocation { t: 1, row: 4, col: 4 }, &spec).unwrap();
        let a = m.activations.values();
        let mut expected = Vec::new();
        for c in 0..2 {
            for r in 3..5 {
                for col in 3..5 {
                    expected.push(a[c * 64 + r * 8 + col]);
                }
            }
        }
        assert_eq!(sel.values(), &expected[..]);
    }

    #[test]
    fn default_backbone_shapes() {
        let mut rng = Rng::seed(0);
        let bb = BackboneParams::<f64>::desk(1, &mut rng);
        assert_eq!(bb.downsample(), 8);
        let fm = bb.extract(&Tensor::zeros(&[1, 64, 64])).unwrap();
        assert_eq!(fm.activations.shape(), &[32, 8, 8]);
        // zero image, zero biases
        assert!(fm.activations.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stride_32_backbone_on_512() {
        let mut rng = Rng::seed(0);
        let bb = BackboneParams::<f32>::new(3, &[2, 2, 2, 2, 4], &mut rng);
        assert_eq!(bb.downsample(), 32);
        let fm = bb.extract(&Tensor::zeros(&[3, 512, 512])).unwrap();
        assert_eq!(fm.grid(), (16, 16));
    }

    #[test]
    fn indivisible_image_names_padding() {
        let mut rng = Rng::seed(0);
        let bb = BackboneParams::<f64>::desk(1, &mut rng);
        let err = bb.extract(&Tensor::zeros(&[1, 60, 64])).unwrap_err().to_string();
        assert!(err.contains("pad by 4 rows"), "{err}");
    }
}
