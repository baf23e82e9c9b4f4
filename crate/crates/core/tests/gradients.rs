use fcan::attention::{score_map, AttentionHead};
use fcan::checks::{op_checks, pipeline_checks, GRAD_TOLERANCE};
use fcan::features::{FeatureMap, RegionSpec};
use fcan::graph::{inject_backward_fault, Graph, OpKind};
use fcan::rng::Rng;
use fcan::Tensor64;

#[test]
fn every_op_has_a_passing_check() {
    let results = op_checks().unwrap();
    for kind in OpKind::ALL {
        let mine: Vec<_> = results.iter().filter(|r| r.op == Some(kind)).collect();
        assert!(!mine.is_empty(), "no check covers {}", kind.name());
        for r in mine {
            assert!(r.passed(), "{}: {:e}", r.name, r.error);
        }
    }
}

#[test]
fn composed_pipelines_pass() {
    for r in pipeline_checks().unwrap() {
        assert!(r.passed(), "{}: {:e}", r.name, r.error);
    }
}

#[test]
fn a_corrupted_rule_fails_its_own_check() {
    for kind in OpKind::ALL {
        inject_backward_fault(Some(kind));
        let results = op_checks();
        inject_backward_fault(None);
        let failed: Vec<_> = results.unwrap().into_iter().filter(|r| !r.passed()).collect();
        assert!(
            failed.iter().any(|r| r.op == Some(kind)),
            "corrupting {} went unnoticed",
            kind.name()
        );
    }
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_one_hot() {
    let logits = [0.3, -1.2, 2.0, 0.7, -0.1];
    let label = 3;
    let mut g = Graph::<f64>::new();
    let x = g.leaf(&Tensor64::new(vec![5], logits.to_vec()).unwrap());
    let loss = g.softmax_cross_entropy(x, label).unwrap();
    g.backward(loss).unwrap();
    let z: f64 = logits.iter().map(|v| v.exp()).sum();
    for (i, (&l, &got)) in logits.iter().zip(g.grad(x).unwrap()).enumerate() {
        let want = l.exp() / z - if i == label { 1.0 } else { 0.0 };
        assert!((got - want).abs() < 1e-12, "{i}: {got} vs {want}");
    }
}

#[test]
fn conv_kernel_gradient_matches_direct_sum() {
    let mut rng = Rng::seed(4);
    let (c, h, w, o, k, stride, pad) = (2, 5, 6, 3, 3, 2, 1);
    let x = Tensor64::uniform(&[c, h, w], -1.0, 1.0, &mut rng);
    let kern = Tensor64::uniform(&[o, c, k, k], -1.0, 1.0, &mut rng);
    let bias = Tensor64::zeros(&[o]);
    let mut g = Graph::new();
    let (xv, kv, bv) = (g.leaf(&x), g.leaf(&kern), g.leaf(&bias));
    let y = g.conv2d(xv, kv, bv, stride, pad).unwrap();
    let (oh, ow) = (g.value(y).shape()[1], g.value(y).shape()[2]);
    assert_eq!((oh, ow), ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1));
    let coeffs: Vec<f64> = (0..o * oh * ow).map(|i| (i as f64 * 0.37).sin()).collect();
    let s = g.dot(y, coeffs.clone()).unwrap();
    g.backward(s).unwrap();
    let got = g.grad(kv).unwrap();
    // dS/dK[oc, ic, ky, kx] = Σ_{y,x} coeff[oc, y, x] · input[ic, y·s + ky - p, x·s + kx - p]
    for oc in 0..o {
        for ic in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let mut want = 0.0;
                    for yy in 0..oh {
                        for xx in 0..ow {
                            let (iy, ix) = (
                                (yy * stride + ky) as isize - pad as isize,
                                (xx * stride + kx) as isize - pad as isize,
                            );
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            want += coeffs[(oc * oh + yy) * ow + xx] * x.values()[(ic * h + iy as usize) * w + ix as usize];
                        }
                    }
                    let i = ((oc * c + ic) * k + ky) * k + kx;
                    assert!((got[i] - want).abs() < 1e-12, "{i}: {} vs {want}", got[i]);
                }
            }
        }
    }
}

/// Central differences written out here, independent of the library checker.
#[test]
fn head_log_probability_against_local_differences() {
    let mut rng = Rng::seed(12);
    let act = Tensor64::uniform(&[3, 4, 4], 0.0, 1.0, &mut rng);
    let mut head = AttentionHead::new(1, 3, RegionSpec::new(1, 2, 2, 8), &mut rng);
    head.conv2.kernels = Tensor64::randn(head.conv2.kernels.shape(), 0.3, &mut rng);
    let cell = 6;
    let log_prob = |h: &AttentionHead<f64>| {
        let fm = FeatureMap::new(act.clone(), 8, 32, 32).unwrap();
        let s = score_map(&fm, h).unwrap();
        let m = s.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = s.values().iter().map(|v| (v - m).exp()).sum();
        s.values()[cell] - m - z.ln()
    };
    let mut g = Graph::new();
    let x = g.leaf(&act);
    let (scores, bound) = head.forward(&mut g, x).unwrap();
    let lp = g.log_softmax(scores).unwrap();
    let out = g.pick(lp, cell).unwrap();
    g.backward(out).unwrap();
    let analytic = g.grad(bound.conv1.kernels).unwrap().to_vec();
    let eps = 1e-6;
    let mut worst = 0.0f64;
    for i in (0..analytic.len()).step_by(37) {
        let mut up = head.clone();
        up.conv1.kernels.values_mut()[i] += eps;
        let mut down = head.clone();
        down.conv1.kernels.values_mut()[i] -= eps;
        let numeric = (log_prob(&up) - log_prob(&down)) / (2.0 * eps);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    assert!(worst < GRAD_TOLERANCE, "{worst:e}");
}
