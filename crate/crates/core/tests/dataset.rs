use fcan::ablation::linear_pixel_baseline;
use fcan::data::{generate, load_split, write_glyph_dataset, GlyphTaskSpec};

#[test]
fn written_dataset_loads_back() {
    let spec = GlyphTaskSpec {
        train: 40,
        test: 12,
        seed: 7,
        ..GlyphTaskSpec::default()
    };
    let dir = tempfile::tempdir().unwrap();
    write_glyph_dataset(dir.path(), &spec).unwrap();
    let (train, test) = generate(&spec).unwrap();
    for (manifest, expect) in [("train.txt", &train), ("test.txt", &test)] {
        let got = load_split(dir.path(), manifest, Some(spec.classes)).unwrap();
        assert_eq!(got.len(), expect.len());
        for (a, b) in got.iter().zip(expect.iter()) {
            assert_eq!((a.id, a.label, a.glyph), (b.id, b.label, b.glyph));
            assert_eq!(a.image.shape(), b.image.shape());
            // 8-bit quantization
            assert!(a.image.max_abs_diff(&b.image) <= 0.5 / 255.0 + 1e-12);
        }
    }
    let cfg = std::fs::read_to_string(dir.path().join("task.cfg")).unwrap();
    assert!(cfg.contains("classes = 10"));
}

#[test]
fn labels_outside_the_class_count_are_rejected() {
    let spec = GlyphTaskSpec {
        train: 30,
        test: 5,
        ..GlyphTaskSpec::default()
    };
    let dir = tempfile::tempdir().unwrap();
    write_glyph_dataset(dir.path(), &spec).unwrap();
    assert!(load_split(dir.path(), "train.txt", Some(2)).is_err());
}

#[test]
fn generation_is_deterministic() {
    let spec = GlyphTaskSpec {
        train: 20,
        test: 5,
        ..GlyphTaskSpec::default()
    };
    assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
    let other = GlyphTaskSpec { seed: 2, ..spec.clone() };
    assert_ne!(generate(&spec).unwrap().0, generate(&other).unwrap().0);
}

/// A glyph anywhere in the frame defeats a single linear template.
#[test]
fn linear_pixels_stay_near_chance() {
    let spec = GlyphTaskSpec::default();
    let (train, test) = generate(&spec).unwrap();
    let r = linear_pixel_baseline(&train, &test, spec.classes, 1).unwrap();
    assert_eq!(r.n, spec.test);
    assert!(r.accuracy < 0.4, "accuracy {}", r.accuracy);
}
