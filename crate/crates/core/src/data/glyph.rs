//! Synthetic glyph task: a class-identifying glyph placed at a uniformly random
//! position on a textured background among class-agnostic distractor glyphs.
//!
//! Every glyph is a `4×4` binary code drawn as blocks of `glyph/4` pixels,
//! bright on dark. Class codes are fixed per seed; distractor codes are fresh
//! per image and kept at Hamming distance ≥ [`MIN_CODE_DISTANCE`] from every
//! class code, so a distractor is never a valid class glyph.

use crate::error::{Error, Result};
use crate::image::PixelRect;
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::LabeledSample;

pub const CODE_SIDE: usize = 4;
pub const MIN_CODE_DISTANCE: u32 = 3;
const GLYPH_ON: f64 = 1.0;
const GLYPH_OFF: f64 = 0.0;
const PLACEMENT_TRIES: usize = 1000;

// rng stream tags
const STREAM_CODES: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_TEST: u64 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct GlyphTaskSpec {
    pub classes: usize,
    pub image_size: usize,
    pub glyph_size: usize,
    pub distractors: usize,
    /// Amplitude of the background texture; per-pixel noise is half of it.
    pub noise: f64,
    pub train: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for GlyphTaskSpec {
    fn default() -> Self {
        GlyphTaskSpec {
            classes: 10,
            image_size: 64,
            glyph_size: 8,
            distractors: 3,
            noise: 0.2,
            train: 2000,
            test: 500,
            seed: 1,
        }
    }
}

impl GlyphTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.classes < 2 || self.classes > 1 << (CODE_SIDE * CODE_SIDE - 4) {
            return bad(format!("class count {} outside 2..=4096", self.classes));
        }
        if self.glyph_size == 0 || !self.glyph_size.is_multiple_of(CODE_SIDE) {
            return bad(format!("glyph size {} must be a positive multiple of {CODE_SIDE}", self.glyph_size));
        }
        if self.glyph_size * 4 >= self.image_size {
            return bad(format!(
                "glyph size {} must be below a quarter of the image size {}",
                self.glyph_size, self.image_size
            ));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return bad(format!("noise amplitude {} outside [0, 0.5]", self.noise));
        }
        // generous packing bound so rejection sampling terminates quickly
        let cells = (self.image_size / self.glyph_size).pow(2);
        if (self.distractors + 1) * 4 > cells {
            return bad(format!(
                "{} distractors do not fit in a {}px image",
                self.distractors, self.image_size
            ));
        }
        Ok(())
    }
}

/// A `4×4` code, bit `r*4 + c` set where the glyph is bright.
pub type Code = u16;

/// Class codes: distinct, pairwise at Hamming distance ≥ `2·MIN_CODE_DISTANCE`.
pub fn class_codes(spec: &GlyphTaskSpec) -> Vec<Code> {
    let mut rng = Rng::derive(spec.seed, &[STREAM_CODES]);
    let mut codes: Vec<Code> = Vec::with_capacity(spec.classes);
    let mut min_dist = 2 * MIN_CODE_DISTANCE;
    let mut tries = 0;
    while codes.len() < spec.classes {
        let c = rng.next_u64() as Code;
        // balanced codes keep the mean brightness class-independent
        if c.count_ones() != 8 {
            continue;
        }
        if codes.iter().all(|&o| (o ^ c).count_ones() >= min_dist) {
            codes.push(c);
        }
        tries += 1;
        if tries % 100_000 == 0 && min_dist > 2 {
            min_dist -= 2;
        }
    }
    codes
}

fn distractor_code(codes: &[Code], rng: &mut Rng) -> Code {
    loop {
        let c = rng.next_u64() as Code;
        if c.count_ones() == 8 && codes.iter().all(|&o| (o ^ c).count_ones() >= MIN_CODE_DISTANCE) {
            return c;
        }
    }
}

fn draw_glyph(img: &mut [f64], size: usize, rect: PixelRect, code: Code) {
    let block = rect.w / CODE_SIDE;
    for y in 0..rect.h {
        for x in 0..rect.w {
            let bit = (y / block) * CODE_SIDE + x / block;
            img[(rect.y + y) * size + rect.x + x] = if code >> bit & 1 == 1 { GLYPH_ON } else { GLYPH_OFF };
        }
    }
}

fn background(spec: &GlyphTaskSpec, rng: &mut Rng) -> Vec<f64> {
    let n = spec.image_size;
    let tau = std::f64::consts::TAU;
    let (fx, fy) = (1.0 + 3.0 * rng.uniform(), 1.0 + 3.0 * rng.uniform());
    let (px, py) = (tau * rng.uniform(), tau * rng.uniform());
    let a = spec.noise;
    let mut v = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (u, w) = (x as f64 / n as f64, y as f64 / n as f64);
            let tex = a * (tau * fx * u + px).sin() * (tau * fy * w + py).sin();
            let grain = a * 0.5 * (2.0 * rng.uniform() - 1.0);
            v.push(0.5 + tex + grain);
        }
    }
    v
}

fn random_rect(spec: &GlyphTaskSpec, rng: &mut Rng) -> PixelRect {
    let span = spec.image_size - spec.glyph_size + 1;
    PixelRect::new(rng.below(span), rng.below(span), spec.glyph_size, spec.glyph_size)
}

/// One image of class `label`, drawn from `rng`.
pub fn render(spec: &GlyphTaskSpec, codes: &[Code], label: usize, rng: &mut Rng) -> Result<(Tensor<f64>, PixelRect)> {
    let n = spec.image_size;
    let mut img = background(spec, rng);
    let glyph = random_rect(spec, rng);
    let mut placed = vec![glyph];
    for _ in 0..spec.distractors {
        let rect = (0..PLACEMENT_TRIES)
            .map(|_| random_rect(spec, rng))
            .find(|r| placed.iter().all(|p| !p.intersects(r)))
            .ok_or_else(|| Error::Invalid("could not place distractor glyphs".into()))?;
        draw_glyph(&mut img, n, rect, distractor_code(codes, rng));
        placed.push(rect);
    }
    draw_glyph(&mut img, n, glyph, codes[label]);
    // quantize so PGM storage is lossless
    for v in &mut img {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
    Ok((Tensor::new(vec![1, n, n], img)?, glyph))
}

fn split(spec: &GlyphTaskSpec, codes: &[Code], count: usize, stream: u64) -> Result<Vec<LabeledSample>> {
    let mut rng = Rng::derive(spec.seed, &[stream]);
    (0..count)
        .map(|id| {
            let label = rng.below(spec.classes);
            let (image, glyph) = render(spec, codes, label, &mut rng)?;
            Ok(LabeledSample {
                id,
                image,
                label,
                glyph: Some(glyph),
            })
        })
        .collect()
}

/// Generates the train and test splits; deterministic in `spec.seed`.
pub fn generate(spec: &GlyphTaskSpec) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>)> {
    spec.validate()?;
    let codes = class_codes(spec);
    Ok((
        split(spec, &codes, spec.train, STREAM_TRAIN)?,
        split(spec, &codes, spec.test, STREAM_TEST)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GlyphTaskSpec {
        GlyphTaskSpec {
            train: 40,
            test: 10,
            ..GlyphTaskSpec::default()
        }
    }

    #[test]
    fn glyph_must_be_local() {
        let spec = GlyphTaskSpec { glyph_size: 16, ..small() };
        assert!(generate(&spec).is_err());
        assert!(generate(&GlyphTaskSpec { glyph_size: 6, ..small() }).is_err());
    }

    #[test]
    fn deterministic_and_quantized() {
        let (a, _) = generate(&small()).unwrap();
        let (b, _) = generate(&small()).unwrap();
        assert_eq!(a, b);
        for s in &a {
            assert!(s.image.values().iter().all(|v| ((v * 255.0).round() - v * 255.0).abs() < 1e-9));
            assert!(s.glyph.unwrap().fits_in(64, 64));
        }
    }

    #[test]
    fn class_codes_are_separated() {
        let codes = class_codes(&GlyphTaskSpec::default());
        assert_eq!(codes.len(), 10);
        for (i, a) in codes.iter().enumerate() {
            for b in &codes[i + 1..] {
                assert!((a ^ b).count_ones() >= 2 * MIN_CODE_DISTANCE);
            }
        }
    }

    #[test]
    fn clean_images_differ_only_at_glyph() {
        let spec = GlyphTaskSpec {
            distractors: 0,
            noise: 0.0,
            ..small()
        };
        let (train, _) = generate(&spec).unwrap();
        for s in &train {
            let g = s.glyph.unwrap();
            for y in 0..64 {
                for x in 0..64 {
                    let inside = x >= g.x && x < g.x + g.w && y >= g.y && y < g.y + g.h;
                    if !inside {
                        assert_eq!(s.image.values()[y * 64 + x], 128.0 / 255.0);
                    }
                }
            }
        }
    }
}
