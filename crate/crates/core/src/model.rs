//! The assembled network: backbone, attention heads and classifiers.

use crate::attention::{argmax_location, attention_distribution, score_map, AttentionDistribution, AttentionHead};
use crate::checkpoint::Checkpoint;
use crate::classifier::{PartClassifier, StepScores};
use crate::error::{Error, Result};
use crate::features::{region_to_patch, BackboneParams, FeatureMap, GlimpseLocation, RegionSpec};
use crate::image::{crop_and_resize, PixelRect};
use crate::layer::Parameters;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Architecture hyperparameters; everything needed to rebuild the shapes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub channels: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub classes: usize,
    pub widths: Vec<usize>,
    /// Region size in cells for each timestep; its length is `T`.
    pub parts: Vec<(usize, usize)>,
    /// Side of the square classifier input for part crops; 0 keeps crops at
    /// their native pixel size.
    pub part_input: usize,
    /// Hidden `3×3` channels in every classifier; 0 for a linear head.
    pub clf_hidden: usize,
}

impl ModelSpec {
    pub fn desk(classes: usize) -> Self {
        ModelSpec {
            channels: 1,
            image_h: 64,
            image_w: 64,
            classes,
            widths: vec![8, 16, 32],
            parts: vec![(2, 2), (4, 4)],
            part_input: 0,
            clf_hidden: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.parts.len()
    }

    pub fn downsample(&self) -> usize {
        1 << self.widths.len()
    }

    fn encode(&self) -> Tensor<f64> {
        let mut v = vec![
            self.channels,
            self.image_h,
            self.image_w,
            self.classes,
            self.part_input,
            self.clf_hidden,
            self.widths.len(),
        ];
        v.extend(&self.widths);
        v.push(self.parts.len());
        for &(h, w) in &self.parts {
            v.extend([h, w]);
        }
        let vals: Vec<f64> = v.into_iter().map(|x| x as f64).collect();
        Tensor::new(vec![vals.len()], vals).expect("non-empty")
    }

    fn decode(t: &Tensor<f64>) -> Result<Self> {
        let bad = || Error::Checkpoint("malformed meta.spec".into());
        let mut it = t.values().iter().map(|&x| x as usize);
        let mut next = || it.next().ok_or_else(bad);
        let (channels, image_h, image_w, classes, part_input, clf_hidden) = (next()?, next()?, next()?, next()?, next()?, next()?);
        let nw = next()?;
        let widths = (0..nw).map(|_| next()).collect::<Result<Vec<_>>>()?;
        let np = next()?;
        let parts = (0..np).map(|_| Ok((next()?, next()?))).collect::<Result<Vec<_>>>()?;
        Ok(ModelSpec {
            channels,
            image_h,
            image_w,
            classes,
            widths,
            parts,
            part_input,
            clf_hidden,
        })
    }
}

/// Subtracted from every pixel before the backbone; inputs live in `[0, 1]`.
pub const PIXEL_MEAN: f64 = 0.5;

/// Centres an image for the backbone.
pub fn prepare<S: Scalar>(image: &Tensor<S>) -> Tensor<S> {
    let m = S::of(PIXEL_MEAN);
    image.map(|v| v - m)
}

/// How glimpse locations are chosen at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Locator {
    /// Most probable cell of each head.
    Attention,
    /// Grid centre for every timestep.
    Center,
    /// Uniformly random cell per timestep, drawn from the supplied rng.
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<S> {
    pub label: usize,
    pub scores: StepScores<S>,
    pub locations: Vec<GlimpseLocation>,
    pub rects: Vec<PixelRect>,
}

/// All trainable groups: backbone, attention heads, image and part classifiers.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S> {
    pub spec: ModelSpec,
    pub backbone: BackboneParams<S>,
    pub heads: Vec<AttentionHead<S>>,
    pub image_clf: PartClassifier<S>,
    pub part_clfs: Vec<PartClassifier<S>>,
    /// Incremented on every update of the matching head.
    pub head_versions: Vec<u64>,
}

impl<S: Scalar> ModelParams<S> {
    pub fn new(spec: ModelSpec, rng: &mut Rng) -> Result<Self> {
        if spec.classes < 2 {
            return Err(Error::Invalid("need at least two classes".into()));
        }
        // one stream per parameter group, so the backbone and image classifier
        // do not depend on how many heads follow
        let base = rng.next_u64();
        let stream = |group: u64, t: usize| Rng::derive(base, &[group, t as u64]);
        let backbone = BackboneParams::new(spec.channels, &spec.widths, &mut stream(0, 0));
        let d = backbone.downsample();
        if !spec.image_h.is_multiple_of(d) || !spec.image_w.is_multiple_of(d) {
            return Err(Error::Invalid(format!(
                "image {}×{} not divisible by downsample {d}",
                spec.image_h, spec.image_w
            )));
        }
        let c = backbone.out_channels();
        let (gh, gw) = (spec.image_h / d, spec.image_w / d);
        let mut heads = Vec::new();
        let mut parts = Vec::new();
        for (i, &(h, w)) in spec.parts.iter().enumerate() {
            if h == 0 || w == 0 || h > gh || w > gw {
                return Err(Error::Invalid(format!(
                    "part {} of {h}×{w} cells exceeds the {gh}×{gw} grid",
                    i + 1
                )));
            }
            heads.push(AttentionHead::new(i + 1, c, RegionSpec::new(i + 1, h, w, d), &mut stream(1, i + 1)));
            parts.push(PartClassifier::new(i + 1, c, spec.clf_hidden, spec.classes, &mut stream(2, i + 1)));
        }
        let image_clf = PartClassifier::new(0, c, spec.clf_hidden, spec.classes, &mut stream(2, 0));
        Ok(ModelParams {
            head_versions: vec![0; heads.len()],
            spec,
            backbone,
            heads,
            image_clf,
            part_clfs: parts,
        })
    }

    pub fn steps(&self) -> usize {
        self.heads.len()
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    /// Shared feature map of a raw `[0, 1]` image.
    pub fn features(&self, image: &Tensor<S>) -> Result<FeatureMap<S>> {
        self.backbone.extract(&prepare(image))
    }

    pub fn distribution(&self, features: &FeatureMap<S>, t: usize) -> Result<AttentionDistribution<S>> {
        let head = self.head(t)?;
        attention_distribution(&score_map(features, head)?, t)
    }

    pub fn head(&self, t: usize) -> Result<&AttentionHead<S>> {
        t.checked_sub(1)
            .and_then(|i| self.heads.get(i))
            .ok_or_else(|| Error::Invalid(format!("no attention head for timestep {t}")))
    }

    pub fn part_clf(&self, t: usize) -> Result<&PartClassifier<S>> {
        t.checked_sub(1)
            .and_then(|i| self.part_clfs.get(i))
            .ok_or_else(|| Error::Invalid(format!("no part classifier for timestep {t}")))
    }

    /// Classifier input size `(h, w)` for the part at timestep `t`.
    pub fn part_input_size(&self, t: usize) -> Result<(usize, usize)> {
        let r = self.head(t)?.region;
        Ok(if self.spec.part_input == 0 {
            (r.pixel_h, r.pixel_w)
        } else {
            (self.spec.part_input, self.spec.part_input)
        })
    }

    /// Crop of `rect` at the part's canonical input size.
    pub fn part_patch(&self, image: &Tensor<S>, rect: PixelRect, t: usize) -> Result<Tensor<S>> {
        let (h, w) = self.part_input_size(t)?;
        crop_and_resize(image, rect, h, w)
    }

    /// Backbone features of a part patch, recomputed at full resolution.
    pub fn part_features(&self, patch: &Tensor<S>, t: usize) -> Result<Tensor<S>> {
        let (ph, pw) = self.part_input_size(t)?;
        let (_, h, w) = patch.chw()?;
        if (h, w) != (ph, pw) {
            return Err(Error::shape(
                "classify_part",
                format!("patch is {h}×{w}, part {t} expects {ph}×{pw}"),
            ));
        }
        Ok(self.backbone.extract(&prepare(patch))?.activations)
    }

    /// Class probabilities `s_t` for a patch at the canonical input size.
    pub fn classify_part(&self, patch: &Tensor<S>, t: usize) -> Result<Vec<S>> {
        let f = self.part_features(patch, t)?;
        self.part_clf(t)?.probabilities(&f)
    }

    /// Full test path with the attention policy's argmax locations.
    pub fn predict(&self, image: &Tensor<S>) -> Result<Prediction<S>> {
        self.predict_with(image, Locator::Attention, &mut Rng::seed(0))
    }

    pub fn predict_with(&self, image: &Tensor<S>, locator: Locator, rng: &mut Rng) -> Result<Prediction<S>> {
        let fm = self.features(image)?;
        let mut scores = StepScores::new();
        scores.push(self.image_clf.probabilities(&fm.activations)?)?;
        let (gh, gw) = fm.grid();
        let mut locations = Vec::new();
        let mut rects = Vec::new();
        for t in 1..=self.steps() {
            let loc = match locator {
                Locator::Attention => argmax_location(&self.distribution(&fm, t)?),
                Locator::Center => GlimpseLocation {
                    t,
                    row: gh / 2,
                    col: gw / 2,
                },
                Locator::Random => GlimpseLocation {
                    t,
                    row: rng.below(gh),
                    col: rng.below(gw),
                },
            };
            let rect = region_to_patch(loc, &self.head(t)?.region, &fm)?;
            let patch = self.part_patch(image, rect, t)?;
            scores.push(self.classify_part(&patch, t)?)?;
            locations.push(loc);
            rects.push(rect);
        }
        Ok(Prediction {
            label: scores.label().expect("at least the image term"),
            scores,
            locations,
            rects,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.insert("meta.spec", &self.spec.encode());
        let versions: Vec<f64> = self.head_versions.iter().map(|&v| v as f64).collect();
        if !versions.is_empty() {
            ck.insert("meta.head_versions", &Tensor::new(vec![versions.len()], versions).unwrap());
        }
        self.visit_params(&mut |name, t| ck.insert(name, t));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let spec = ModelSpec::decode(&ck.require::<f64>("meta.spec")?)?;
        let mut m = Self::new(spec, &mut Rng::seed(0))?;
        let mut err = None;
        m.visit_params_mut(&mut |name, t| {
            if err.is_some() {
                return;
            }
            match ck.require::<S>(&name) {
                Ok(src) if src.shape() == t.shape() => *t = src,
                Ok(src) => {
                    err = Some(Error::Checkpoint(format!(
                        "`{name}` has shape {:?}, model expects {:?}",
                        src.shape(),
                        t.shape()
                    )))
                }
                Err(e) => err = Some(e),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if let Some(v) = ck.get("meta.head_versions") {
            m.head_versions = v.values().iter().map(|&x| x as u64).collect();
        }
        Ok(m)
    }
}

impl<S: Scalar> Parameters<S> for ModelParams<S> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        self.backbone.visit_params(f);
        for h in &self.heads {
            h.visit_params(f);
        }
        self.image_clf.visit_params(f);
        for p in &self.part_clfs {
            p.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        self.backbone.visit_params_mut(f);
        for h in &mut self.heads {
            h.visit_params_mut(f);
        }
        self.image_clf.visit_params_mut(f);
        for p in &mut self.part_clfs {
            p.visit_params_mut(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::LayerParams;

    #[test]
    fn checkpoint_round_trip_preserves_model() {
        let mut rng = Rng::seed(1);
        let m = ModelParams::<f64>::new(ModelSpec::desk(10), &mut rng).unwrap();
        let ck = m.to_checkpoint();
        let names: Vec<_> = ck.names().collect();
        assert!(names.contains(&"attn.1.conv1.weight"));
        assert!(names.contains(&"attn.2.conv2.bias"));
        assert!(names.contains(&"clf.image.fc.weight"));
        assert!(names.contains(&"clf.part.2.fc.weight"));
        let back = ModelParams::<f64>::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn uniform_parts_leave_image_argmax() {
        let mut rng = Rng::seed(2);
        let mut m = ModelParams::<f64>::new(ModelSpec::desk(10), &mut rng).unwrap();
        let c = m.backbone.out_channels();
        for p in &mut m.part_clfs {
            p.fc = LayerParams::zeros(10, c, 1, 0);
        }
        for _ in 0..5 {
            let img = Tensor::uniform(&[1, 64, 64], 0.0, 1.0, &mut rng);
            let pred = m.predict(&img).unwrap();
            let img_only = crate::tensor::argmax(&pred.scores.steps[0]);
            assert_eq!(pred.label, img_only);
            assert_eq!(pred.rects.len(), 2);
        }
    }

    #[test]
    fn zero_steps_is_plain_classification() {
        let mut rng = Rng::seed(3);
        let spec = ModelSpec {
            parts: vec![],
            ..ModelSpec::desk(4)
        };
        let m = ModelParams::<f64>::new(spec, &mut rng).unwrap();
        let img = Tensor::uniform(&[1, 64, 64], 0.0, 1.0, &mut rng);
        let pred = m.predict(&img).unwrap();
        let direct = m.image_clf.probabilities(&m.features(&img).unwrap().activations).unwrap();
        assert_eq!(pred.scores.last().unwrap(), &direct[..]);
        assert_eq!(pred.label, crate::tensor::argmax(&direct));
    }

    #[test]
    fn part_size_mismatch_rejected() {
        let mut rng = Rng::seed(4);
        let m = ModelParams::<f64>::new(ModelSpec::desk(3), &mut rng).unwrap();
        assert!(m.classify_part(&Tensor::zeros(&[1, 24, 24]), 1).is_err());
        assert!(m.classify_part(&Tensor::zeros(&[1, 16, 16]), 1).is_ok());
    }
}
