//! Release-gate suite: finite-difference checks of every backward rule and
//! of composed pipelines, plus the estimator and geometry oracles.

use crate::attention::{attention_distribution, sample_locations, AttentionHead};
use crate::error::Result;
use crate::features::{
    grid_rect, region_to_patch, select_region_features, BackboneBlock, BackboneParams, FeatureMap, GlimpseLocation, RegionSpec,
};
use crate::gradcheck::{grad_check, GradCheckOptions};
use crate::graph::{Graph, OpKind, Var};
use crate::image::crop;
use crate::layer::{BoundLayer, LayerParams};
use crate::rl::{delayed_reward, exact_gradient_for_rewards, greedy_reward, random_feature_map, reinforce_estimate};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Relative-error bound of the finite-difference checks.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    /// Operation whose backward rule the check isolates, if any.
    pub op: Option<OpKind>,
    pub error: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.error.is_finite() && self.error <= self.tolerance
    }
}

fn coeffs(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| rng.uniform() * 2.0 - 1.0).collect()
}

/// Reduces `out` to a scalar with fixed random weights.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let n = g.value(out).len();
    let c = coeffs(n, &mut Rng::derive(seed, &[n as u64]));
    g.dot(out, c)
}

fn check<F>(name: &str, op: Option<OpKind>, params: Vec<Tensor<f64>>, f: F) -> Result<CheckOutcome>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let r = grad_check(f, &params, &GradCheckOptions::default())?;
    Ok(CheckOutcome {
        name: name.to_string(),
        op,
        error: r.max_rel_error,
        tolerance: GRAD_TOLERANCE,
    })
}

/// One check per graph operation.
pub fn op_checks() -> Result<Vec<CheckOutcome>> {
    let mut rng = Rng::seed(0x0b5);
    let mut u = |shape: &[usize]| Tensor::uniform(shape, -1.0, 1.0, &mut rng);
    let x = u(&[2, 6, 6]);
    let w = u(&[3, 2, 3, 3]);
    let b = u(&[3]);
    let v = u(&[7]);
    let v2 = u(&[7]);
    let pos = Tensor::uniform(&[7], 0.2, 1.0, &mut Rng::seed(7));
    let mut out = vec![
        check(
            "conv2d stride 1 pad 1",
            Some(OpKind::Conv2d),
            vec![x.clone(), w.clone(), b.clone()],
            |g, p| {
                let y = g.conv2d(p[0], p[1], p[2], 1, 1)?;
                project(g, y, 1)
            },
        )?,
        check("conv2d stride 2 pad 0", Some(OpKind::Conv2d), vec![x.clone(), w, b], |g, p| {
            let y = g.conv2d(p[0], p[1], p[2], 2, 0)?;
            project(g, y, 2)
        })?,
        check("relu", Some(OpKind::Relu), vec![x.clone()], |g, p| {
            let y = g.relu(p[0]);
            project(g, y, 3)
        })?,
        check("maxpool2", Some(OpKind::MaxPool2), vec![x.clone()], |g, p| {
            let y = g.maxpool2(p[0])?;
            project(g, y, 4)
        })?,
        check("global_avg_pool", Some(OpKind::GlobalAvgPool), vec![x.clone()], |g, p| {
            let y = g.global_avg_pool(p[0])?;
            project(g, y, 5)
        })?,
        check("slice", Some(OpKind::Slice), vec![x], |g, p| {
            let y = g.slice(p[0], 1, 2, 3, 4)?;
            project(g, y, 6)
        })?,
        check("softmax", Some(OpKind::Softmax), vec![v.clone()], |g, p| {
            let y = g.softmax(p[0])?;
            project(g, y, 7)
        })?,
        check("log_softmax", Some(OpKind::LogSoftmax), vec![v.clone()], |g, p| {
            let y = g.log_softmax(p[0])?;
            project(g, y, 8)
        })?,
        check(
            "softmax_cross_entropy",
            Some(OpKind::SoftmaxCrossEntropy),
            vec![v.clone()],
            |g, p| g.softmax_cross_entropy(p[0], 3),
        )?,
        check("mean", Some(OpKind::Mean), vec![v.clone(), v2.clone()], |g, p| {
            let y = g.mean(p)?;
            project(g, y, 9)
        })?,
        check("neg_log_at", Some(OpKind::NegLogAt), vec![pos], |g, p| g.neg_log_at(p[0], 2))?,
        check("pick", Some(OpKind::Pick), vec![v.clone()], |g, p| g.pick(p[0], 4))?,
        check("add", Some(OpKind::Add), vec![v.clone(), v2], |g, p| {
            let y = g.add(p[0], p[1])?;
            project(g, y, 10)
        })?,
        check("scale", Some(OpKind::Scale), vec![v.clone()], |g, p| {
            let y = g.scale(p[0], -1.7);
            project(g, y, 11)
        })?,
    ];
    out.push(check("dot", Some(OpKind::Dot), vec![v], |g, p| project(g, p[0], 12))?);
    Ok(out)
}

/// Head log-probability `log π(l | x)` and the backbone-to-policy chain, with
/// every weight a checked leaf.
pub fn pipeline_checks() -> Result<Vec<CheckOutcome>> {
    let mut rng = Rng::seed(0x9a7e);
    let head = AttentionHead::<f64>::new(1, 4, RegionSpec::new(1, 2, 2, 8), &mut rng);
    let mut conv2 = head.conv2.clone();
    conv2.kernels = Tensor::randn(conv2.kernels.shape(), 0.3, &mut rng);
    let features = Tensor::uniform(&[4, 4, 4], 0.0, 1.0, &mut rng);
    let (c1, c2) = (head.conv1.clone(), conv2);
    let head_params = vec![
        features,
        c1.kernels.clone(),
        c1.bias.map(|_| 0.1),
        c2.kernels.clone(),
        c2.bias.clone(),
    ];
    let log_prob = |g: &mut Graph<f64>, x: Var, p: &[Var], cell: usize| -> Result<Var> {
        let h = c1.apply(g, BoundLayer { kernels: p[0], bias: p[1] }, x)?;
        let h = g.relu(h);
        let s = c2.apply(g, BoundLayer { kernels: p[2], bias: p[3] }, h)?;
        let lp = g.log_softmax(s)?;
        g.pick(lp, cell)
    };
    let mut out = vec![check("attention head log-probability", None, head_params, |g, p| {
        log_prob(g, p[0], &p[1..], 5)
    })?];

    let block = LayerParams::init(4, 1, 3, 1, 2.0, &mut rng);
    let image = Tensor::uniform(&[1, 8, 8], -0.5, 0.5, &mut rng);
    let params = vec![
        image,
        block.kernels.clone(),
        block.bias.map(|_| 0.05),
        c1.kernels.clone(),
        c1.bias.clone(),
        c2.kernels.clone(),
        c2.bias.clone(),
    ];
    out.push(check("image to policy log-probability", None, params, |g, p| {
        let y = block.apply(g, BoundLayer { kernels: p[1], bias: p[2] }, p[0])?;
        let y = g.relu(y);
        let f = g.maxpool2(y)?;
        let a = log_prob(g, f, &p[3..], 2)?;
        let b = log_prob(g, f, &p[3..], 9)?;
        g.mean(&[a, b])
    })?);

    let clf = LayerParams::init(5, 4, 1, 0, 1.0, &mut rng);
    let params = vec![
        Tensor::uniform(&[4, 4, 4], 0.0, 1.0, &mut rng),
        clf.kernels.clone(),
        clf.bias.clone(),
    ];
    out.push(check("region classifier cross-entropy", None, params, |g, p| {
        let r = g.slice(p[0], 1, 1, 2, 2)?;
        let pooled = g.global_avg_pool(r)?;
        let logits = clf.apply(g, BoundLayer { kernels: p[1], bias: p[2] }, pooled)?;
        g.softmax_cross_entropy(logits, 2)
    })?);
    Ok(out)
}

/// Monte Carlo policy gradient against exact enumeration on a 4×4 grid.
///
/// Returns `(largest |mc - exact| in standard errors, largest |mc - exact|
/// relative to the largest exact coordinate)`.
pub fn reinforce_vs_enumeration(episodes: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = Rng::derive(seed, &[1]);
    let fm: FeatureMap<f64> = random_feature_map(3, 4, 4, 8, &mut rng);
    let mut head = AttentionHead::new(1, 3, RegionSpec::new(1, 1, 1, 8), &mut rng);
    head.conv2.kernels = Tensor::randn(head.conv2.kernels.shape(), 0.2, &mut rng);
    let rewards: Vec<f64> = (0..16).map(|i| [1.0, 0.0, 0.0, 1.0, 0.0][i % 5]).collect();
    let exact = exact_gradient_for_rewards(&head, &fm, &rewards)?.flatten();
    let dist = attention_distribution(&crate::attention::score_map(&fm, &head)?, 1)?;
    let n = exact.len();
    let (mut sum, mut sq) = (vec![0.0; n], vec![0.0; n]);
    let mut draw_rng = Rng::derive(seed, &[2]);
    for _ in 0..episodes {
        let loc = sample_locations(&dist, 1, &mut draw_rng)[0];
        let r = rewards[dist.index(loc)];
        let est = reinforce_estimate(&head, &fm, &dist, &[(loc, r)])?.flatten();
        for (i, e) in est.into_iter().enumerate() {
            sum[i] += e;
            sq[i] += e * e;
        }
    }
    let m = episodes as f64;
    let scale = exact.iter().fold(0.0f64, |a, &e| a.max(e.abs()));
    let (mut worst_se, mut worst_rel) = (0.0f64, 0.0f64);
    for i in 0..n {
        let mean = sum[i] / m;
        let var = (sq[i] / m - mean * mean).max(0.0);
        let se = (var / m).sqrt();
        let diff = (mean - exact[i]).abs();
        // the head's last bias has an identically zero gradient; only round-off remains
        let excess = (diff - 1e-12 * scale).max(0.0);
        if se > 0.0 {
            worst_se = worst_se.max(excess / se);
        } else if excess > 0.0 {
            worst_se = f64::INFINITY;
        }
        worst_rel = worst_rel.max(diff / scale.max(1e-12));
    }
    Ok((worst_se, worst_rel))
}

/// Region-selected features against features recomputed on the pixel crop,
/// for a padding-free backbone. Returns the largest absolute difference.
pub fn fast_rcnn_gap(seed: u64) -> Result<f64> {
    let mut rng = Rng::seed(seed);
    let conv = |out_c, in_c, k, stride, rng: &mut Rng| {
        let mut l = LayerParams::<f64>::init(out_c, in_c, k, 0, 2.0, rng);
        l.stride = stride;
        l.bias = Tensor::uniform(&[out_c], -0.1, 0.1, rng);
        l
    };
    let backbone = BackboneParams {
        blocks: vec![
            BackboneBlock {
                conv: conv(4, 1, 2, 2, &mut rng),
                pool: false,
            },
            BackboneBlock {
                conv: conv(6, 4, 1, 1, &mut rng),
                pool: true,
            },
            BackboneBlock {
                conv: conv(8, 6, 2, 2, &mut rng),
                pool: false,
            },
        ],
    };
    let image = Tensor::uniform(&[1, 64, 64], 0.0, 1.0, &mut rng);
    let fm = backbone.extract(&image)?;
    let (gh, gw) = fm.grid();
    let mut worst = 0.0f64;
    for size in [2, 3, 4] {
        let spec = RegionSpec::new(1, size, size, fm.stride);
        for row in 0..gh {
            for col in 0..gw {
                let loc = GlimpseLocation { t: 1, row, col };
                let region = select_region_features(&fm, loc, &spec)?;
                let rect = region_to_patch(loc, &spec, &fm)?;
                let again = backbone.extract(&crop(&image, rect)?)?;
                worst = worst.max(region.max_abs_diff(&again.activations));
            }
        }
    }
    Ok(worst)
}

/// Pixel size of a region and whether grid → pixel → grid is the identity.
pub fn receptive_field(cells: usize, stride: usize, grid: usize) -> Result<(usize, bool)> {
    let fm = FeatureMap::new(Tensor::<f64>::zeros(&[1, grid, grid]), stride, grid * stride, grid * stride)?;
    let spec = RegionSpec::new(1, cells, cells, stride);
    let mut size = 0;
    let mut exact = true;
    for row in 0..grid {
        for col in 0..grid {
            let loc = GlimpseLocation { t: 1, row, col };
            let rect = region_to_patch(loc, &spec, &fm)?;
            let cells_rect = grid_rect(loc, &spec, grid, grid)?;
            size = rect.w.max(rect.h);
            exact &= rect.x == cells_rect.left * stride
                && rect.y == cells_rect.top * stride
                && rect.w == cells_rect.w * stride
                && rect.h == cells_rect.h * stride;
        }
    }
    Ok((size, exact))
}

/// Every greedy and delayed input combination against the stated rules.
/// Returns the number of mismatches.
pub fn reward_table_mismatches() -> usize {
    let mut bad = 0;
    for t in 1..=3usize {
        for correct in [false, true] {
            for decreased in [false, true] {
                let (loss, prev) = if decreased { (0.2, 0.7) } else { (0.7, 0.2) };
                let want = (correct && (t == 1 || decreased)) as u8;
                if greedy_reward(t, correct, loss, (t > 1).then_some(prev)).ok() != Some(want) {
                    bad += 1;
                }
                let steps = 3;
                if delayed_reward(t, steps, correct) != (t == steps && correct) as u8 {
                    bad += 1;
                }
            }
        }
    }
    bad
}

/// Geometry, normalization and estimator checks.
pub fn oracle_checks() -> Result<Vec<CheckOutcome>> {
    let outcome = |name: &str, error: f64, tolerance: f64| CheckOutcome {
        name: name.into(),
        op: None,
        error,
        tolerance,
    };
    let mut out = vec![outcome("reward truth tables", reward_table_mismatches() as f64, 0.0)];

    let mut rng = Rng::seed(0x50f7);
    let scores = Tensor::uniform(&[1, 7, 9], -30.0, 30.0, &mut rng);
    let dist = attention_distribution(&scores, 1)?;
    out.push(outcome(
        "spatial softmax sums to one",
        (dist.probs.iter().sum::<f64>() - 1.0).abs(),
        1e-6,
    ));

    let fm: FeatureMap<f64> = random_feature_map(3, 4, 4, 8, &mut rng);
    let head = AttentionHead::new(1, 3, RegionSpec::new(1, 1, 1, 8), &mut rng);
    let g = exact_gradient_for_rewards(&head, &fm, &[1.0; 16])?.flatten();
    out.push(outcome(
        "exact gradient of constant reward is zero",
        g.iter().fold(0.0f64, |a, &v| a.max(v.abs())),
        1e-9,
    ));

    let (se, rel) = reinforce_vs_enumeration(10_000, 17)?;
    out.push(outcome("reinforce vs enumeration (standard errors)", se, 5.0));
    out.push(outcome("reinforce vs enumeration (relative error)", rel, 0.05));

    out.push(outcome("region features vs crop features", fast_rcnn_gap(3)?, 1e-6));
    for (cells, stride, want) in [(4, 32, 128), (8, 32, 256)] {
        let (size, exact) = receptive_field(cells, stride, 16)?;
        let err = if exact { size.abs_diff(want) as f64 } else { f64::INFINITY };
        out.push(outcome(
            &format!("{cells}x{cells} cells at stride {stride} cover {want} px"),
            err,
            0.0,
        ));
    }
    Ok(out)
}

/// The whole suite, gradient checks first.
pub fn run_all() -> Result<Vec<CheckOutcome>> {
    let mut out = op_checks()?;
    out.extend(pipeline_checks()?);
    out.extend(oracle_checks()?);
    Ok(out)
}
