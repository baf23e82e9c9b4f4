//! Glimpse selection as a decision process: rewards, rollouts, REINFORCE.
//!
//! At each timestep `t` the head's spatial softmax is a policy over feature
//! cells. A rollout draws `K` locations per timestep; chain `k` strings
//! together the `k`-th draw of every timestep, so the `K` chains are
//! independent episodes sharing one feature map. Each chain keeps its own
//! running average `S_t` (term 0 is the whole-image score) and its own loss
//! `L_t = -ln S_t[y]`.

use serde::{Deserialize, Serialize};

use crate::attention::{sample_locations, AttentionDistribution, AttentionHead, BoundHead};
use crate::classifier::{prob_cross_entropy, StepScores};
use crate::error::{Error, Result};
use crate::features::{select_region_features, FeatureMap, GlimpseLocation};
use crate::graph::Graph;
use crate::model::ModelParams;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{argmax, Tensor};

/// Largest grid [`exact_expected_reward_gradient`] will enumerate.
pub const ENUMERATION_LIMIT: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardStrategy {
    /// Reward every step whose running prediction is right and, after the
    /// first step, whose loss went down.
    Greedy,
    /// Reward only the last step, when the final prediction is right.
    Delayed,
}

impl RewardStrategy {
    pub fn name(self) -> &'static str {
        match self {
            RewardStrategy::Greedy => "greedy",
            RewardStrategy::Delayed => "delayed",
        }
    }
}

impl std::str::FromStr for RewardStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(RewardStrategy::Greedy),
            "delayed" => Ok(RewardStrategy::Delayed),
            other => Err(Error::Invalid(format!("unknown reward strategy `{other}` (greedy | delayed)"))),
        }
    }
}

/// Greedy per-step reward. `prev_loss` is required for `t > 1`.
pub fn greedy_reward(t: usize, correct: bool, loss: f64, prev_loss: Option<f64>) -> Result<u8> {
    if t == 0 {
        return Err(Error::Invalid("timesteps start at 1".into()));
    }
    if t == 1 {
        return Ok(correct as u8);
    }
    let prev = prev_loss.ok_or_else(|| Error::Invalid(format!("greedy reward at t = {t} needs the previous loss")))?;
    Ok((correct && loss < prev) as u8)
}

/// Reward only at the final timestep `T`.
pub fn delayed_reward(t: usize, steps: usize, final_correct: bool) -> u8 {
    (t == steps && final_correct) as u8
}

/// One sampled location and what followed from it.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub location: GlimpseLocation,
    pub log_prob: f64,
    /// Part score `s_t` at this location.
    pub score: Vec<f64>,
    /// Running average `S_t` along this chain.
    pub running: Vec<f64>,
    pub loss: f64,
    pub correct: bool,
    pub reward: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeTrace {
    pub sample_id: usize,
    pub label: usize,
    pub strategy: RewardStrategy,
    /// Loss of the whole-image term alone, `L_0`.
    pub image_loss: f64,
    /// `steps[t-1][k]`.
    pub steps: Vec<Vec<StepRecord>>,
    /// Head versions the locations were drawn under.
    pub policy_versions: Vec<u64>,
}

impl EpisodeTrace {
    pub fn k(&self) -> usize {
        self.steps.first().map_or(0, Vec::len)
    }

    pub fn mean_reward(&self) -> f64 {
        let n = self.steps.iter().map(Vec::len).sum::<usize>();
        if n == 0 {
            return 0.0;
        }
        self.steps.iter().flatten().map(|r| r.reward as f64).sum::<f64>() / n as f64
    }

    pub fn mean_loss(&self) -> f64 {
        let n = self.steps.iter().map(Vec::len).sum::<usize>();
        if n == 0 {
            return self.image_loss;
        }
        self.steps.iter().flatten().map(|r| r.loss).sum::<f64>() / n as f64
    }

    /// Fraction of chains whose final running prediction is right.
    pub fn final_accuracy(&self) -> f64 {
        match self.steps.last() {
            Some(last) if !last.is_empty() => last.iter().filter(|r| r.correct).count() as f64 / last.len() as f64,
            _ => 0.0,
        }
    }
}

/// Everything a rollout needs about one training example.
#[derive(Clone, Copy, Debug)]
pub struct EpisodeInput<'a, S> {
    pub sample_id: usize,
    pub features: &'a FeatureMap<S>,
    pub label: usize,
}

/// Whole-image probabilities and the per-head policies for one feature map.
pub struct Rollout<S> {
    pub image_score: Vec<f64>,
    pub dists: Vec<AttentionDistribution<S>>,
}

pub fn policies<S: Scalar>(model: &ModelParams<S>, features: &FeatureMap<S>) -> Result<Rollout<S>> {
    let image_score = model
        .image_clf
        .probabilities(&features.activations)?
        .into_iter()
        .map(Scalar::as_f64)
        .collect();
    let dists = (1..=model.steps())
        .map(|t| model.distribution(features, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(Rollout { image_score, dists })
}

/// Part score `s_t` from region features selected on the whole-image map.
pub fn region_score<S: Scalar>(model: &ModelParams<S>, features: &FeatureMap<S>, loc: GlimpseLocation) -> Result<Vec<f64>> {
    let t = loc.t;
    let region = select_region_features(features, loc, &model.head(t)?.region)?;
    Ok(model.part_clf(t)?.probabilities(&region)?.into_iter().map(Scalar::as_f64).collect())
}

/// Per-chain bookkeeping shared by rollouts and the enumeration oracle.
struct Chain {
    scores: StepScores<f64>,
    prev_loss: f64,
}

impl Chain {
    fn new(image_score: &[f64], label: usize) -> Result<Self> {
        let mut scores = StepScores::new();
        scores.push(image_score.to_vec())?;
        Ok(Chain {
            prev_loss: prob_cross_entropy(image_score, label),
            scores,
        })
    }

    /// Appends `s_t`; returns `(S_t, L_t, correct, reward)`.
    fn advance(
        &mut self,
        t: usize,
        steps: usize,
        score: Vec<f64>,
        label: usize,
        strategy: RewardStrategy,
    ) -> Result<(Vec<f64>, f64, bool, u8)> {
        self.scores.push(score)?;
        let running = self.scores.last().expect("just pushed").to_vec();
        let loss = prob_cross_entropy(&running, label);
        let correct = argmax(&running) == label;
        let reward = match strategy {
            RewardStrategy::Greedy => greedy_reward(t, correct, loss, Some(self.prev_loss))?,
            RewardStrategy::Delayed => delayed_reward(t, steps, correct),
        };
        self.prev_loss = loss;
        Ok((running, loss, correct, reward))
    }
}

/// Samples `k` chains of glimpses and scores them under `strategy`.
pub fn run_episode<S: Scalar>(
    input: EpisodeInput<'_, S>,
    model: &ModelParams<S>,
    k: usize,
    strategy: RewardStrategy,
    rng: &mut Rng,
) -> Result<EpisodeTrace> {
    if k == 0 {
        return Err(Error::Invalid("K must be at least 1".into()));
    }
    if input.label >= model.classes() {
        return Err(Error::Label {
            label: input.label,
            classes: model.classes(),
        });
    }
    let roll = policies(model, input.features)?;
    let steps_total = model.steps();
    let mut chains = (0..k)
        .map(|_| Chain::new(&roll.image_score, input.label))
        .collect::<Result<Vec<_>>>()?;
    let mut steps = Vec::with_capacity(steps_total);
    for (i, dist) in roll.dists.iter().enumerate() {
        let t = i + 1;
        let locs = sample_locations(dist, k, rng);
        let mut records = Vec::with_capacity(k);
        for (chain, loc) in chains.iter_mut().zip(locs) {
            let score = region_score(model, input.features, loc)?;
            let (running, loss, correct, reward) = chain.advance(t, steps_total, score.clone(), input.label, strategy)?;
            records.push(StepRecord {
                location: loc,
                log_prob: dist.log_prob(loc).as_f64(),
                score,
                running,
                loss,
                correct,
                reward,
            });
        }
        steps.push(records);
    }
    Ok(EpisodeTrace {
        sample_id: input.sample_id,
        label: input.label,
        strategy,
        image_loss: prob_cross_entropy(&roll.image_score, input.label),
        steps,
        policy_versions: model.head_versions.clone(),
    })
}

/// Gradient buffers shaped like one head's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGradient<S> {
    pub conv1_w: Vec<S>,
    pub conv1_b: Vec<S>,
    pub conv2_w: Vec<S>,
    pub conv2_b: Vec<S>,
}

impl<S: Scalar> HeadGradient<S> {
    pub fn zeros(head: &AttentionHead<S>) -> Self {
        HeadGradient {
            conv1_w: vec![S::zero(); head.conv1.kernels.len()],
            conv1_b: vec![S::zero(); head.conv1.bias.len()],
            conv2_w: vec![S::zero(); head.conv2.kernels.len()],
            conv2_b: vec![S::zero(); head.conv2.bias.len()],
        }
    }

    fn parts_mut(&mut self) -> [&mut Vec<S>; 4] {
        [&mut self.conv1_w, &mut self.conv1_b, &mut self.conv2_w, &mut self.conv2_b]
    }

    /// Concatenation in the order conv1 weight, conv1 bias, conv2 weight, conv2 bias.
    pub fn flatten(&self) -> Vec<S> {
        [&self.conv1_w, &self.conv1_b, &self.conv2_w, &self.conv2_b]
            .into_iter()
            .flat_map(|v| v.iter().copied())
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.flatten().iter().all(|v| v.is_zero())
    }

    fn add_from_graph(&mut self, g: &Graph<S>, b: BoundHead, scale: S) {
        let vars = [b.conv1.kernels, b.conv1.bias, b.conv2.kernels, b.conv2.bias];
        for (dst, v) in self.parts_mut().into_iter().zip(vars) {
            if let Some(src) = g.grad(v) {
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += scale * s);
            }
        }
    }
}

/// Ascent direction on the mean expected reward, one entry per head.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyGradient<S> {
    pub heads: Vec<HeadGradient<S>>,
    /// Number of `(sample, t, k)` terms with non-zero reward that contributed.
    pub contributing: usize,
}

impl<S: Scalar> PolicyGradient<S> {
    /// Writes the gradient, negated for a minimizing optimizer, into the heads.
    pub fn store_descent(&self, model: &mut ModelParams<S>) {
        for (head, g) in model.heads.iter_mut().zip(&self.heads) {
            let neg = |v: &Vec<S>| v.iter().map(|&x| -x).collect::<Vec<S>>();
            head.conv1.kernels.set_grad(neg(&g.conv1_w));
            head.conv1.bias.set_grad(neg(&g.conv1_b));
            head.conv2.kernels.set_grad(neg(&g.conv2_w));
            head.conv2.bias.set_grad(neg(&g.conv2_b));
        }
    }
}

/// Backpropagates `seed` (a gradient on the head's confidence map) into the
/// head parameters, scaled by `scale`.
fn backprop_head<S: Scalar>(
    head: &AttentionHead<S>,
    features: &FeatureMap<S>,
    seed: Vec<S>,
    scale: S,
    acc: &mut HeadGradient<S>,
) -> Result<()> {
    let mut g = Graph::new();
    let x = g.leaf(&features.activations);
    let (scores, bound) = head.forward(&mut g, x)?;
    g.backward_with(scores, seed)?;
    acc.add_from_graph(&g, bound, scale);
    Ok(())
}

/// Score-function estimate `1/(N·T) Σ_n Σ_t 1/K Σ_k r ∇log π(l)`.
///
/// `features[i]` must be the map `traces[i]` was rolled out on. Zero-reward
/// samples are skipped; a timestep whose `K` rewards are all zero costs no
/// backward pass.
pub fn policy_gradient<S: Scalar>(
    traces: &[EpisodeTrace],
    features: &[&FeatureMap<S>],
    model: &ModelParams<S>,
) -> Result<PolicyGradient<S>> {
    if traces.len() != features.len() {
        return Err(Error::Invalid("one feature map per trace".into()));
    }
    let mut out = PolicyGradient {
        heads: model.heads.iter().map(HeadGradient::zeros).collect(),
        contributing: 0,
    };
    if traces.is_empty() || model.steps() == 0 {
        return Ok(out);
    }
    let norm = S::of(1.0 / (traces.len() * model.steps()) as f64);
    for (trace, fm) in traces.iter().zip(features) {
        for (i, &current) in model.head_versions.iter().enumerate() {
            let recorded = trace.policy_versions.get(i).copied().unwrap_or(u64::MAX);
            if recorded != current {
                return Err(Error::StaleTrace {
                    head: i + 1,
                    recorded,
                    current,
                });
            }
        }
        for (i, records) in trace.steps.iter().enumerate() {
            let rewarded: Vec<&StepRecord> = records.iter().filter(|r| r.reward != 0).collect();
            if rewarded.is_empty() {
                continue;
            }
            let head = &model.heads[i];
            let dist = model.distribution(fm, i + 1)?;
            // d log π(l) / d z = e_l - π, summed over rewarded draws
            let k = S::of(records.len() as f64);
            let mut seed: Vec<S> = dist.probs.iter().map(|&p| -p * S::of(rewarded.len() as f64)).collect();
            for r in &rewarded {
                seed[dist.index(r.location)] += S::of(r.reward as f64);
            }
            out.contributing += rewarded.len();
            backprop_head(head, fm, seed, norm / k, &mut out.heads[i])?;
        }
    }
    Ok(out)
}

/// Exact `∇ Σ_l π(l) r(l)` for a single head and a per-cell reward table.
///
/// The expectation is built as a graph node (softmax, then a dot product with
/// the rewards) and differentiated directly, independent of the
/// log-probability route used by [`policy_gradient`].
pub fn exact_gradient_for_rewards<S: Scalar>(
    head: &AttentionHead<S>,
    features: &FeatureMap<S>,
    rewards: &[f64],
) -> Result<HeadGradient<S>> {
    let (gh, gw) = features.grid();
    if gh * gw > ENUMERATION_LIMIT {
        return Err(Error::GridTooLarge {
            cells: gh * gw,
            limit: ENUMERATION_LIMIT,
        });
    }
    if rewards.len() != gh * gw {
        return Err(Error::shape(
            "exact gradient",
            format!("{} rewards for {gh}×{gw} cells", rewards.len()),
        ));
    }
    let mut g = Graph::new();
    let x = g.leaf(&features.activations);
    let (scores, bound) = head.forward(&mut g, x)?;
    let probs = g.softmax(scores)?;
    let expectation = g.dot(probs, rewards.iter().map(|&r| S::of(r)).collect())?;
    g.backward(expectation)?;
    let mut acc = HeadGradient::zeros(head);
    acc.add_from_graph(&g, bound, S::one());
    Ok(acc)
}

/// Reward the step-`t` glimpse would earn at every cell.
///
/// Steps before `t` use each head's argmax location; the returned table is
/// what the policy at step `t` is scored against.
pub fn reward_table<S: Scalar>(input: EpisodeInput<'_, S>, model: &ModelParams<S>, t: usize, strategy: RewardStrategy) -> Result<Vec<f64>> {
    let (gh, gw) = input.features.grid();
    if gh * gw > ENUMERATION_LIMIT {
        return Err(Error::GridTooLarge {
            cells: gh * gw,
            limit: ENUMERATION_LIMIT,
        });
    }
    let roll = policies(model, input.features)?;
    let steps = model.steps();
    let mut prefix = Chain::new(&roll.image_score, input.label)?;
    for (i, dist) in roll.dists.iter().enumerate().take(t - 1) {
        let loc = crate::attention::argmax_location(dist);
        let s = region_score(model, input.features, loc)?;
        prefix.advance(i + 1, steps, s, input.label, strategy)?;
    }
    let mut table = Vec::with_capacity(gh * gw);
    for row in 0..gh {
        for col in 0..gw {
            let mut chain = Chain {
                scores: prefix.scores.clone(),
                prev_loss: prefix.prev_loss,
            };
            let s = region_score(model, input.features, GlimpseLocation { t, row, col })?;
            let (_, _, _, r) = chain.advance(t, steps, s, input.label, strategy)?;
            table.push(r as f64);
        }
    }
    Ok(table)
}

/// Exact gradient of the step-`t` expected reward for head `t`, by enumerating
/// every cell. Earlier steps are fixed at their argmax locations.
pub fn exact_expected_reward_gradient<S: Scalar>(
    input: EpisodeInput<'_, S>,
    model: &ModelParams<S>,
    t: usize,
    strategy: RewardStrategy,
) -> Result<HeadGradient<S>> {
    let head = model.head(t)?;
    let table = reward_table(input, model, t, strategy)?;
    exact_gradient_for_rewards(head, input.features, &table)
}

/// Single-head REINFORCE estimate `1/K Σ_k r(l_k) ∇log π(l_k)` for explicit draws.
pub fn reinforce_estimate<S: Scalar>(
    head: &AttentionHead<S>,
    features: &FeatureMap<S>,
    dist: &AttentionDistribution<S>,
    draws: &[(GlimpseLocation, f64)],
) -> Result<HeadGradient<S>> {
    let mut acc = HeadGradient::zeros(head);
    let total: f64 = draws.iter().map(|d| d.1).sum();
    if draws.is_empty() || draws.iter().all(|d| d.1 == 0.0) {
        return Ok(acc);
    }
    let mut seed: Vec<S> = dist.probs.iter().map(|&p| -p * S::of(total)).collect();
    for &(loc, r) in draws {
        seed[dist.index(loc)] += S::of(r);
    }
    backprop_head(head, features, seed, S::of(1.0 / draws.len() as f64), &mut acc)?;
    Ok(acc)
}

/// Feature tensor helper for tests and oracles: random activations on a grid.
pub fn random_feature_map<S: Scalar>(c: usize, h: usize, w: usize, stride: usize, rng: &mut Rng) -> FeatureMap<S> {
    let act = Tensor::uniform(&[c, h, w], 0.0, 1.0, rng);
    FeatureMap::new(act, stride, h * stride, w * stride).expect("consistent geometry")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::RegionSpec;
    use crate::model::ModelSpec;

    #[test]
    fn greedy_truth_table() {
        assert_eq!(greedy_reward(1, true, 5.0, None).unwrap(), 1);
        assert_eq!(greedy_reward(1, false, 0.1, None).unwrap(), 0);
        assert_eq!(greedy_reward(2, true, 0.4, Some(0.9)).unwrap(), 1);
        assert_eq!(greedy_reward(2, true, 0.9, Some(0.4)).unwrap(), 0);
        assert_eq!(greedy_reward(2, true, 0.4, Some(0.4)).unwrap(), 0);
        assert_eq!(greedy_reward(3, false, 0.1, Some(0.9)).unwrap(), 0);
        assert!(greedy_reward(2, true, 0.1, None).is_err());
    }

    #[test]
    fn delayed_truth_table() {
        assert_eq!(delayed_reward(3, 3, true), 1);
        assert_eq!(delayed_reward(2, 3, true), 0);
        assert_eq!(delayed_reward(3, 3, false), 0);
    }

    fn toy_model(steps: usize, seed: u64) -> ModelParams<f64> {
        let spec = ModelSpec {
            channels: 1,
            image_h: 32,
            image_w: 32,
            classes: 4,
            widths: vec![3, 4, 4],
            parts: vec![(2, 2); steps],
            part_input: 0,
            clf_hidden: 0,
        };
        ModelParams::new(spec, &mut Rng::seed(seed)).unwrap()
    }

    #[test]
    fn trace_rewards_are_reproducible_from_records() {
        let model = toy_model(3, 1);
        let mut rng = Rng::seed(2);
        let fm = random_feature_map(4, 4, 4, 8, &mut rng);
        for label in 0..4 {
            let input = EpisodeInput {
                sample_id: 0,
                features: &fm,
                label,
            };
            let tr = run_episode(input, &model, 6, RewardStrategy::Greedy, &mut rng).unwrap();
            for k in 0..6 {
                let mut prev = tr.image_loss;
                for (i, step) in tr.steps.iter().enumerate() {
                    let r = &step[k];
                    let again = greedy_reward(i + 1, r.correct, r.loss, Some(prev)).unwrap();
                    assert_eq!(again, r.reward);
                    assert!(r.log_prob <= 0.0);
                    prev = r.loss;
                }
            }
        }
    }

    #[test]
    fn one_hot_policy_gives_deterministic_locations() {
        let mut model = toy_model(1, 3);
        let head = &mut model.heads[0];
        head.conv1 = crate::layer::LayerParams::zeros(crate::attention::HEAD_WIDTH, 4, 3, 1);
        head.conv2 = crate::layer::LayerParams::zeros(1, crate::attention::HEAD_WIDTH, 3, 1);
        // centre taps only: confidence = 1000 * relu(feature channel 0)
        head.conv1.kernels.values_mut()[4] = 1.0;
        head.conv2.kernels.values_mut()[4] = 1000.0;
        let mut act = Tensor::<f64>::zeros(&[4, 4, 4]);
        act.values_mut()[2 * 4 + 1] = 1.0;
        let fm = FeatureMap::new(act, 8, 32, 32).unwrap();
        let mut rng = Rng::seed(4);
        for _ in 0..20 {
            let tr = run_episode(
                EpisodeInput {
                    sample_id: 0,
                    features: &fm,
                    label: 0,
                },
                &model,
                1,
                RewardStrategy::Greedy,
                &mut rng,
            )
            .unwrap();
            let loc = tr.steps[0][0].location;
            assert_eq!((loc.row, loc.col), (2, 1));
        }
    }

    #[test]
    fn all_zero_rewards_give_zero_gradient() {
        let model = toy_model(2, 5);
        let mut rng = Rng::seed(6);
        let fm = random_feature_map(4, 4, 4, 8, &mut rng);
        let mut tr = run_episode(
            EpisodeInput {
                sample_id: 0,
                features: &fm,
                label: 1,
            },
            &model,
            4,
            RewardStrategy::Greedy,
            &mut rng,
        )
        .unwrap();
        tr.steps.iter_mut().flatten().for_each(|r| r.reward = 0);
        let g = policy_gradient(&[tr], &[&fm], &model).unwrap();
        assert!(g.heads.iter().all(HeadGradient::is_zero));
        assert_eq!(g.contributing, 0);
    }

    #[test]
    fn stale_trace_rejected() {
        let mut model = toy_model(1, 7);
        let mut rng = Rng::seed(8);
        let fm = random_feature_map(4, 4, 4, 8, &mut rng);
        let tr = run_episode(
            EpisodeInput {
                sample_id: 0,
                features: &fm,
                label: 0,
            },
            &model,
            2,
            RewardStrategy::Greedy,
            &mut rng,
        )
        .unwrap();
        model.head_versions[0] += 1;
        assert!(matches!(
            policy_gradient(&[tr], &[&fm], &model),
            Err(Error::StaleTrace { head: 1, .. })
        ));
    }

    #[test]
    fn constant_reward_has_zero_exact_gradient() {
        let mut rng = Rng::seed(10);
        let head = AttentionHead::<f64>::new(1, 3, RegionSpec::new(1, 1, 1, 8), &mut rng);
        let fm = random_feature_map(3, 4, 4, 8, &mut rng);
        for c in [0.0, 1.0] {
            let g = exact_gradient_for_rewards(&head, &fm, &[c; 16]).unwrap();
            assert!(g.flatten().iter().all(|v| v.abs() < 1e-9));
        }
    }

    #[test]
    fn all_rewards_one_raises_sampled_cells() {
        let mut rng = Rng::seed(12);
        let head = AttentionHead::<f64>::new(1, 3, RegionSpec::new(1, 1, 1, 8), &mut rng);
        let fm = random_feature_map(3, 4, 4, 8, &mut rng);
        let conf = crate::attention::score_map(&fm, &head).unwrap();
        let dist = crate::attention::attention_distribution(&conf, 1).unwrap();
        let loc = dist.location(6);
        let g = reinforce_estimate(&head, &fm, &dist, &[(loc, 1.0)]).unwrap();
        // a small step along the gradient raises π(loc)
        let mut stepped = head.clone();
        let eps = 1e-3;
        for (p, d) in stepped.conv2.kernels.values_mut().iter_mut().zip(&g.conv2_w) {
            *p += eps * d;
        }
        for (p, d) in stepped.conv1.kernels.values_mut().iter_mut().zip(&g.conv1_w) {
            *p += eps * d;
        }
        let after = crate::attention::attention_distribution(&crate::attention::score_map(&fm, &stepped).unwrap(), 1).unwrap();
        assert!(after.probs[6] > dist.probs[6]);
    }

    #[test]
    fn enumeration_guard() {
        let mut rng = Rng::seed(13);
        let head = AttentionHead::<f64>::new(1, 1, RegionSpec::new(1, 1, 1, 1), &mut rng);
        let fm = FeatureMap::new(Tensor::zeros(&[1, 65, 64]), 1, 65, 64).unwrap();
        assert!(matches!(
            exact_gradient_for_rewards(&head, &fm, &vec![0.0; 65 * 64]),
            Err(Error::GridTooLarge { .. })
        ));
    }
}
