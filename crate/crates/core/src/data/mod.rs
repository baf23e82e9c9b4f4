//! Labeled images, manifests and the on-disk dataset layout.
//!
//! A dataset root holds `train.txt` and `test.txt` manifests whose image paths
//! are relative to the root (`train/000000.pgm`, ...), plus `task.cfg` with the
//! generator spec when the data was synthesized.

pub mod glyph;
pub mod pnm;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::image::PixelRect;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use glyph::{generate, GlyphTaskSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    /// Position within its split.
    pub id: usize,
    pub image: Tensor<f64>,
    pub label: usize,
    /// Ground-truth glyph box; evaluation diagnostics only.
    pub glyph: Option<PixelRect>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
    pub glyph: Option<PixelRect>,
}

/// Parses manifest text. `path` is only used in diagnostics.
///
/// Blank lines and `#` comments are skipped. A `# classes N` comment, if
/// present, bounds the labels together with `classes`.
pub fn parse_manifest(text: &str, path: &Path, classes: Option<usize>) -> Result<Vec<ManifestEntry>> {
    let err = |line: usize, reason: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut limit = classes;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let s = raw.trim();
        if let Some(c) = s.strip_prefix('#') {
            if let Some(n) = c.trim().strip_prefix("classes") {
                let n: usize = n.trim().parse().map_err(|_| err(line, format!("bad class count `{}`", n.trim())))?;
                limit = Some(limit.map_or(n, |l| l.min(n)));
            }
            continue;
        }
        if s.is_empty() {
            continue;
        }
        let fields: Vec<&str> = s.split_whitespace().collect();
        if fields.len() != 2 && fields.len() != 6 {
            return Err(err(line, format!("expected `path label [x y w h]`, found {} fields", fields.len())));
        }
        let num = |k: usize, what: &str| -> Result<usize> {
            fields[k]
                .parse()
                .map_err(|_| err(line, format!("{what} `{}` is not a non-negative integer", fields[k])))
        };
        let label = num(1, "label")?;
        if let Some(l) = limit {
            if label >= l {
                return Err(err(line, format!("label {label} out of range for {l} classes")));
            }
        }
        let glyph = if fields.len() == 6 {
            let r = PixelRect::new(num(2, "x")?, num(3, "y")?, num(4, "w")?, num(5, "h")?);
            if r.area() == 0 {
                return Err(err(line, "glyph rectangle has zero area".into()));
            }
            Some(r)
        } else {
            None
        };
        out.push(ManifestEntry {
            path: PathBuf::from(fields[0]),
            label,
            glyph,
        });
    }
    Ok(out)
}

pub fn load_manifest(path: &Path, classes: Option<usize>) -> Result<Vec<ManifestEntry>> {
    parse_manifest(&std::fs::read_to_string(path)?, path, classes)
}

pub fn format_manifest(entries: &[ManifestEntry], classes: Option<usize>) -> String {
    let mut s = String::new();
    if let Some(c) = classes {
        let _ = writeln!(s, "# classes {c}");
    }
    for e in entries {
        let _ = write!(s, "{} {}", e.path.display(), e.label);
        if let Some(r) = e.glyph {
            let _ = write!(s, " {} {} {} {}", r.x, r.y, r.w, r.h);
        }
        s.push('\n');
    }
    s
}

/// Loads every image a manifest lists, resolving paths against `root`.
pub fn load_split(root: &Path, manifest: &str, classes: Option<usize>) -> Result<Vec<LabeledSample>> {
    let entries = load_manifest(&root.join(manifest), classes)?;
    entries
        .into_iter()
        .enumerate()
        .map(|(id, e)| {
            let image = pnm::load(&root.join(&e.path)).map_err(|err| match err {
                Error::Io(io) => Error::Invalid(format!("{}: {io}", e.path.display())),
                Error::ImageFormat { offset, reason } => Error::Invalid(format!("{}: byte {offset}: {reason}", e.path.display())),
                other => other,
            })?;
            if let Some(g) = e.glyph {
                let (_, h, w) = image.chw()?;
                if !g.fits_in(w, h) {
                    return Err(Error::Invalid(format!("{}: glyph rectangle outside the image", e.path.display())));
                }
            }
            Ok(LabeledSample {
                id,
                image,
                label: e.label,
                glyph: e.glyph,
            })
        })
        .collect()
}

/// Writes images under `root/<split>/` and the `root/<split>.txt` manifest.
pub fn write_split(root: &Path, split: &str, samples: &[LabeledSample], classes: usize) -> Result<()> {
    std::fs::create_dir_all(root.join(split))?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let ext = if s.image.shape()[0] == 3 { "ppm" } else { "pgm" };
        let rel = PathBuf::from(split).join(format!("{:06}.{ext}", s.id));
        pnm::save(&s.image, &root.join(&rel))?;
        entries.push(ManifestEntry {
            path: rel,
            label: s.label,
            glyph: s.glyph,
        });
    }
    std::fs::write(root.join(format!("{split}.txt")), format_manifest(&entries, Some(classes)))?;
    Ok(())
}

pub fn task_config(spec: &GlyphTaskSpec) -> String {
    format!(
        "classes = {}\nimage_size = {}\nglyph_size = {}\ndistractors = {}\nnoise = {}\ntrain = {}\ntest = {}\nseed = {}\n",
        spec.classes, spec.image_size, spec.glyph_size, spec.distractors, spec.noise, spec.train, spec.test, spec.seed
    )
}

/// Generates the glyph task and writes it in the dataset layout.
pub fn write_glyph_dataset(root: &Path, spec: &GlyphTaskSpec) -> Result<()> {
    let (train, test) = generate(spec)?;
    std::fs::create_dir_all(root)?;
    write_split(root, "train", &train, spec.classes)?;
    write_split(root, "test", &test, spec.classes)?;
    std::fs::write(root.join("task.cfg"), task_config(spec))?;
    Ok(())
}

/// Feature maps keyed by sample id, stored in the checkpoint container as
/// `feat.<id>` activations and a `stride.<id>` triple (stride, source h, source w).
pub fn save_feature_cache<S: Scalar>(maps: &[(usize, &FeatureMap<S>)], path: &Path) -> Result<()> {
    let mut ck = Checkpoint::new();
    for (id, fm) in maps {
        ck.insert(format!("feat.{id}"), &fm.activations);
        let meta = [fm.stride, fm.source_h, fm.source_w].map(|v| v as f64);
        ck.insert(format!("stride.{id}"), &Tensor::new(vec![3], meta.to_vec())?);
    }
    ck.save(path)
}

pub fn load_feature_cache<S: Scalar>(path: &Path) -> Result<Vec<(usize, FeatureMap<S>)>> {
    let ck = Checkpoint::load(path)?;
    let mut out = Vec::new();
    for name in ck.names() {
        let Some(id) = name.strip_prefix("feat.") else { continue };
        let id_num: usize = id.parse().map_err(|_| Error::Checkpoint(format!("bad cache key `{name}`")))?;
        let meta = ck.require::<f64>(&format!("stride.{id}"))?;
        let m = meta.values();
        if m.len() != 3 {
            return Err(Error::Checkpoint(format!("`stride.{id}` must hold 3 values")));
        }
        out.push((
            id_num,
            FeatureMap::new(ck.require::<S>(name)?, m[0] as usize, m[1] as usize, m[2] as usize)?,
        ));
    }
    Ok(out)
}
