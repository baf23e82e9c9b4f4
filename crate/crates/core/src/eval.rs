//! Test-path evaluation: accuracy under a locator and glimpse/glyph overlap.

use crate::data::LabeledSample;
use crate::error::Result;
use crate::model::{Locator, ModelParams};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::argmax;

const STREAM_EVAL_RANDOM: u64 = 0x5eed_0e7a;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub n: usize,
    /// Full pipeline accuracy (image term plus parts).
    pub correct: usize,
    /// Whole-image classifier alone.
    pub image_correct: usize,
    /// Correct predictions whose glyph rectangle is known.
    pub correct_with_glyph: usize,
    /// ... of which some glimpse rectangle intersects the glyph.
    pub localized: usize,
}

impl EvalReport {
    pub fn accuracy(&self) -> f64 {
        ratio(self.correct, self.n)
    }

    pub fn image_accuracy(&self) -> f64 {
        ratio(self.image_correct, self.n)
    }

    /// Fraction of correct, glyph-annotated predictions with a glimpse on the glyph.
    pub fn localization(&self) -> f64 {
        ratio(self.localized, self.correct_with_glyph)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Evaluates every sample; `Locator::Random` draws from a per-sample stream of `seed`.
pub fn evaluate<S: Scalar>(model: &ModelParams<S>, samples: &[LabeledSample], locator: Locator, seed: u64) -> Result<EvalReport> {
    let mut r = EvalReport::default();
    for s in samples {
        let mut rng = Rng::derive(seed, &[STREAM_EVAL_RANDOM, s.id as u64]);
        let pred = model.predict_with(&s.image.cast::<S>(), locator, &mut rng)?;
        r.n += 1;
        if argmax(&pred.scores.steps[0]) == s.label {
            r.image_correct += 1;
        }
        if pred.label == s.label {
            r.correct += 1;
            if let Some(g) = s.glyph {
                r.correct_with_glyph += 1;
                if pred.rects.iter().any(|rect| rect.intersects(&g)) {
                    r.localized += 1;
                }
            }
        }
    }
    Ok(r)
}
