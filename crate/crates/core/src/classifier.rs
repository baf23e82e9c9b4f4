//! Whole-image and part classifiers, and running-average score fusion.

use crate::error::{Error, Result};
use crate::graph::{softmax_values, Graph, Var};
use crate::layer::{BoundLayer, LayerParams, Parameters};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Optional `3×3` conv–relu, global average pooling, then a `1×1` convolution
/// to class logits. `t = 0` is the whole-image classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct PartClassifier<S> {
    pub t: usize,
    pub hidden: Option<LayerParams<S>>,
    pub fc: LayerParams<S>,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundClassifier {
    hidden: Option<BoundLayer>,
    fc: BoundLayer,
}

impl<S: Scalar> PartClassifier<S> {
    pub fn new(t: usize, in_channels: usize, hidden: usize, classes: usize, rng: &mut Rng) -> Self {
        let (hidden, c) = if hidden > 0 {
            (Some(LayerParams::init(hidden, in_channels, 3, 1, 2.0, rng)), hidden)
        } else {
            (None, in_channels)
        };
        PartClassifier {
            t,
            hidden,
            fc: LayerParams::init(classes, c, 1, 0, 1.0, rng),
        }
    }

    pub fn classes(&self) -> usize {
        self.fc.out_channels()
    }

    pub fn in_channels(&self) -> usize {
        self.hidden.as_ref().unwrap_or(&self.fc).in_channels()
    }

    /// Logits as a `classes×1×1` node.
    pub fn forward(&self, g: &mut Graph<S>, features: Var) -> Result<(Var, BoundClassifier)> {
        let c = g.value(features).chw()?.0;
        if c != self.in_channels() {
            return Err(Error::shape(
                "classify_part",
                format!("feature channels: classifier {} expects {}, got {c}", self.t, self.in_channels()),
            ));
        }
        let (x, hidden) = match &self.hidden {
            Some(h) => {
                let (y, b) = h.forward(g, features)?;
                (g.relu(y), Some(b))
            }
            None => (features, None),
        };
        let pooled = g.global_avg_pool(x)?;
        let (logits, fc) = self.fc.forward(g, pooled)?;
        Ok((logits, BoundClassifier { hidden, fc }))
    }

    pub fn pull_grads(&mut self, g: &Graph<S>, b: BoundClassifier) {
        if let (Some(h), Some(bh)) = (self.hidden.as_mut(), b.hidden) {
            h.pull_grads(g, bh);
        }
        self.fc.pull_grads(g, b.fc);
    }

    pub fn ensure_grads(&mut self) {
        if let Some(h) = self.hidden.as_mut() {
            h.ensure_grads();
        }
        self.fc.ensure_grads();
    }

    /// Class-probability vector for a `C×h×w` feature tensor.
    pub fn probabilities(&self, features: &Tensor<S>) -> Result<Vec<S>> {
        let mut g = Graph::new();
        let x = g.leaf(features);
        let (logits, _) = self.forward(&mut g, x)?;
        Ok(softmax_values(g.value(logits).values()))
    }

    fn prefix(&self) -> String {
        if self.t == 0 {
            "clf.image".into()
        } else {
            format!("clf.part.{}", self.t)
        }
    }
}

impl<S: Scalar> Parameters<S> for PartClassifier<S> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        let p = self.prefix();
        if let Some(h) = &self.hidden {
            h.visit(&format!("{p}.hidden"), f);
        }
        self.fc.visit(&format!("{p}.fc"), f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        let p = self.prefix();
        if let Some(h) = &mut self.hidden {
            h.visit_mut(&format!("{p}.hidden"), f);
        }
        self.fc.visit_mut(&format!("{p}.fc"), f);
    }
}

/// Element-wise mean of `scores`.
pub fn average_scores<S: Scalar>(scores: &[Vec<S>]) -> Result<Vec<S>> {
    let Some(first) = scores.first() else {
        return Err(Error::Invalid("average of zero score vectors".into()));
    };
    let mut acc = vec![S::zero(); first.len()];
    for s in scores {
        if s.len() != acc.len() {
            return Err(Error::shape("average_scores", format!("{} vs {} classes", s.len(), acc.len())));
        }
        acc.iter_mut().zip(s).for_each(|(a, &v)| *a += v);
    }
    let inv = S::one() / S::of(scores.len() as f64);
    acc.iter_mut().for_each(|a| *a *= inv);
    Ok(acc)
}

/// Per-term class probabilities and their running averages.
///
/// Term 0 is the whole-image classifier; term `t` the part at timestep `t`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepScores<S> {
    pub steps: Vec<Vec<S>>,
    pub running: Vec<Vec<S>>,
}

impl<S: Scalar> StepScores<S> {
    pub fn new() -> Self {
        StepScores {
            steps: Vec::new(),
            running: Vec::new(),
        }
    }

    /// Appends a term and the updated running mean, computed incrementally.
    pub fn push(&mut self, s: Vec<S>) -> Result<()> {
        let n = S::of((self.steps.len() + 1) as f64);
        let next = match self.running.last() {
            None => s.clone(),
            Some(prev) => {
                if prev.len() != s.len() {
                    return Err(Error::shape("StepScores", "class counts differ between terms"));
                }
                prev.iter().zip(&s).map(|(&p, &v)| p + (v - p) / n).collect()
            }
        };
        self.steps.push(s);
        self.running.push(next);
        Ok(())
    }

    pub fn last(&self) -> Option<&[S]> {
        self.running.last().map(Vec::as_slice)
    }

    pub fn label(&self) -> Option<usize> {
        self.last().map(crate::tensor::argmax)
    }
}

/// `-ln p[label]`, the cross-entropy of a probability vector.
pub fn prob_cross_entropy<S: Scalar>(p: &[S], label: usize) -> S {
    -p[label].max(S::min_positive_value()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weight_classifier_is_uniform() {
        let mut rng = Rng::seed(3);
        let mut clf = PartClassifier::<f64>::new(1, 4, 0, 5, &mut rng);
        clf.fc = LayerParams::zeros(5, 4, 1, 0);
        let feats = Tensor::randn(&[4, 2, 2], 1.0, &mut rng);
        let p = clf.probabilities(&feats).unwrap();
        assert!(p.iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut rng = Rng::seed(4);
        for hidden in [0, 6] {
            let clf = PartClassifier::<f64>::new(2, 3, hidden, 10, &mut rng);
            for _ in 0..20 {
                let feats = Tensor::randn(&[3, 4, 4], 3.0, &mut rng);
                let s: f64 = clf.probabilities(&feats).unwrap().iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn average_cases() {
        let s1 = vec![0.2, 0.8];
        assert_eq!(average_scores(std::slice::from_ref(&s1)).unwrap(), s1);
        assert_eq!(average_scores(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), vec![0.5, 0.5]);
        assert!(average_scores::<f64>(&[]).is_err());
    }

    #[test]
    fn running_average_matches_batch_mean() {
        let mut rng = Rng::seed(8);
        let mut st = StepScores::new();
        let mut all = Vec::new();
        for _ in 0..5 {
            let raw: Vec<f64> = (0..4).map(|_| rng.uniform()).collect();
            let z: f64 = raw.iter().sum();
            let s: Vec<f64> = raw.iter().map(|v| v / z).collect();
            all.push(s.clone());
            st.push(s).unwrap();
            let mean = average_scores(&all).unwrap();
            for (a, b) in st.last().unwrap().iter().zip(&mean) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
