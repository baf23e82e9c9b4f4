//! Finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Outcome of one gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(param index, flat coordinate)` where the worst error occurred.
    pub worst: (usize, usize),
    pub coords_checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Above this many coordinates a random subset of this size is checked.
    pub max_coords: usize,
    /// Denominator floor for the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-6,
            max_coords: 400,
            floor: 1e-6,
            seed: 0x6c0ffee,
        }
    }
}

/// Compares reverse-mode gradients of the scalar `f(params)` with central
/// differences `(f(p + eps) - f(p - eps)) / 2eps`.
///
/// `f` receives a fresh graph and one leaf per entry of `params`, and must
/// return a scalar node. It must be deterministic.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.leaf(p)).collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).len() != 1 {
            return Err(Error::Invalid("grad_check target must be scalar".into()));
        }
        Ok(g.value(out).values()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();

    let mut coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.len()).map(move |j| (i, j)))
        .collect();
    if coords.len() > opts.max_coords {
        let mut rng = Rng::seed(opts.seed);
        rng.shuffle(&mut coords);
        coords.truncate(opts.max_coords);
        coords.sort_unstable();
    }

    let mut work = params.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        coords_checked: coords.len(),
    };
    for &(i, j) in &coords {
        let orig = work[i].values()[j];
        work[i].values_mut()[j] = orig + opts.eps;
        let up = eval(&work)?;
        work[i].values_mut()[j] = orig - opts.eps;
        let down = eval(&work)?;
        work[i].values_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * opts.eps);
        let a = analytic[i][j];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = (i, j);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact_to_round_off() {
        let p = Tensor::new(vec![5], vec![0.3, -1.0, 2.0, 0.5, 4.0]).unwrap();
        let r = grad_check(
            |g, v| g.dot(v[0], vec![1.5, -2.0, 0.25, 3.0, -0.75]),
            &[p],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let p = Tensor::new(vec![3], vec![0.3, -1.0, 2.0]).unwrap();
        crate::graph::inject_backward_fault(Some(crate::graph::OpKind::Scale));
        let r = grad_check(
            |g, v| {
                let s = g.scale(v[0], 2.0);
                g.dot(s, vec![1.0, 1.0, 1.0])
            },
            &[p],
            &GradCheckOptions::default(),
        )
        .unwrap();
        crate::graph::inject_backward_fault(None);
        assert!(r.max_rel_error > 1e-3);
    }
}
