use fcan::attention::{sample_locations, AttentionDistribution};
use fcan::data::{generate, GlyphTaskSpec, LabeledSample};
use fcan::rng::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Pearson goodness of fit; returns the p-value.
fn chi_square_p(observed: &[usize], expected: &[f64]) -> f64 {
    let stat: f64 = observed.iter().zip(expected).map(|(&o, &e)| (o as f64 - e).powi(2) / e).sum();
    ChiSquared::new((observed.len() - 1) as f64).unwrap().sf(stat)
}

#[test]
fn sampled_locations_follow_the_policy() {
    let raw = [1.0, 2.0, 3.0, 4.0, 0.5, 0.5, 6.0, 1.0, 2.0, 2.0, 1.0, 7.0];
    let z: f64 = raw.iter().sum();
    let probs: Vec<f64> = raw.iter().map(|v| v / z).collect();
    let dist = AttentionDistribution::from_probs(probs.clone(), 3, 4, 1).unwrap();
    let n = 60_000;
    let mut counts = vec![0usize; 12];
    for loc in sample_locations(&dist, n, &mut Rng::seed(99)) {
        counts[dist.index(loc)] += 1;
    }
    let expected: Vec<f64> = probs.iter().map(|p| p * n as f64).collect();
    let p = chi_square_p(&counts, &expected);
    assert!(p > 1e-3, "p = {p}, counts {counts:?}");
}

fn default_train() -> (GlyphTaskSpec, Vec<LabeledSample>) {
    let spec = GlyphTaskSpec {
        test: 1,
        ..GlyphTaskSpec::default()
    };
    let (train, _) = generate(&spec).unwrap();
    (spec, train)
}

#[test]
fn glyph_positions_and_labels_are_uniform() {
    let (spec, train) = default_train();
    let span = spec.image_size - spec.glyph_size + 1;
    let mut xs = vec![0usize; span];
    let mut ys = vec![0usize; span];
    let mut labels = vec![0usize; spec.classes];
    for s in &train {
        let g = s.glyph.unwrap();
        xs[g.x] += 1;
        ys[g.y] += 1;
        labels[s.label] += 1;
    }
    let n = train.len() as f64;
    for (what, counts) in [("x", &xs), ("y", &ys), ("label", &labels)] {
        let expected = vec![n / counts.len() as f64; counts.len()];
        let p = chi_square_p(counts, &expected);
        assert!(p > 1e-3, "{what}: p = {p}");
    }
}

/// Mean intensity away from the class glyph carries no label information.
#[test]
fn background_is_independent_of_the_label() {
    let (spec, train) = default_train();
    let background_mean = |s: &LabeledSample| {
        let g = s.glyph.unwrap();
        let n = spec.image_size;
        let (mut sum, mut cnt) = (0.0, 0usize);
        for y in 0..n {
            for x in 0..n {
                if !(g.x..g.x + g.w).contains(&x) || !(g.y..g.y + g.h).contains(&y) {
                    sum += s.image.values()[y * n + x];
                    cnt += 1;
                }
            }
        }
        sum / cnt as f64
    };
    let pairs: Vec<(f64, usize)> = train
        .iter()
        .filter(|s| s.label < 2)
        .map(|s| (background_mean(s), s.label))
        .collect();
    let diff = |ps: &[(f64, usize)]| {
        let mean = |c| {
            let v: Vec<f64> = ps.iter().filter(|p| p.1 == c).map(|p| p.0).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        (mean(0) - mean(1)).abs()
    };
    let observed = diff(&pairs);
    let mut labels: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let mut rng = Rng::seed(5);
    let perms = 2000;
    let mut as_extreme = 0;
    for _ in 0..perms {
        rng.shuffle(&mut labels);
        let shuffled: Vec<(f64, usize)> = pairs.iter().zip(&labels).map(|(p, &l)| (p.0, l)).collect();
        if diff(&shuffled) >= observed {
            as_extreme += 1;
        }
    }
    let p = (as_extreme + 1) as f64 / (perms + 1) as f64;
    assert!(p > 0.01, "p = {p}");
}
