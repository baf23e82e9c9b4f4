//! Step-wise training.
//!
//! Each round runs three phases:
//! 1. backbone and whole-image classifier on cross-entropy;
//! 2. features frozen and cached, attention heads trained by REINFORCE;
//! 3. heads frozen, part classifiers trained on the chosen crops, recomputed
//!    through the backbone at full resolution.
//!
//! All randomness comes from [`Rng::derive`] streams keyed by phase, round,
//! epoch and sample, so the backbone trajectory of phase 1 is the same for any
//! number of heads.

use std::time::Instant;

use serde::Serialize;

use crate::attention::argmax_location;
use crate::config::Config;
use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::features::{region_to_patch, FeatureMap, GlimpseLocation};
use crate::graph::Graph;
use crate::layer::Parameters;
use crate::model::{prepare, Locator, ModelParams, ModelSpec};
use crate::optim::{LrSchedule, ParamGroup, RmsProp};
use crate::rl::{policy_gradient, run_episode, EpisodeInput, RewardStrategy};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{argmax, Tensor};

// rng stream tags
const STREAM_SPLIT: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_EPISODE: u64 = 4;
const STREAM_LOCATE: u64 = 5;
const STREAM_VAL: u64 = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Square region sizes in cells, one per head; `T` is its length.
    pub parts: Vec<usize>,
    /// Monte Carlo samples per timestep.
    pub k: usize,
    pub batch: usize,
    /// Epochs of phases 1, 2 and 3 in every round.
    pub epochs: [usize; 3],
    /// Initial learning rates of phases 1, 2 and 3.
    pub lr: [f64; 3],
    /// Learning-rate factor applied at two thirds of each phase.
    pub lr_gamma: f64,
    pub rms_decay: f64,
    pub rms_eps: f64,
    pub strategy: RewardStrategy,
    pub seed: u64,
    pub rounds: usize,
    /// Rounds stop after this many rounds without validation improvement; 0 disables.
    pub patience: usize,
    pub val_fraction: f64,
    pub widths: Vec<usize>,
    pub part_input: usize,
    pub clf_hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            parts: vec![2, 4],
            k: 64,
            batch: 16,
            epochs: [10, 10, 10],
            lr: [0.003, 0.001, 0.003],
            lr_gamma: 0.1,
            rms_decay: 0.99,
            rms_eps: 1e-8,
            strategy: RewardStrategy::Greedy,
            seed: 1,
            rounds: 2,
            patience: 3,
            val_fraction: 0.1,
            widths: vec![8, 16, 32],
            part_input: 0,
            clf_hidden: 0,
        }
    }
}

/// Region sizes used when `parts` asks for more heads than `part_sizes` lists.
pub const DEFAULT_PART_SIZES: [usize; 3] = [2, 4, 3];

impl TrainConfig {
    pub fn steps(&self) -> usize {
        self.parts.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::Config {
                key: key.into(),
                reason: reason.into(),
            })
        };
        if self.k == 0 {
            return bad("k", "must be at least 1");
        }
        if self.batch == 0 {
            return bad("batch", "must be at least 1");
        }
        if self.rounds == 0 {
            return bad("rounds", "must be at least 1");
        }
        if !self.lr.iter().all(|&r| r > 0.0) {
            return bad("lr", "must be positive");
        }
        if !(self.rms_decay > 0.0 && self.rms_decay < 1.0) {
            return bad("rms_decay", "must lie in (0, 1)");
        }
        if self.rms_eps.is_nan() || self.rms_eps <= 0.0 {
            return bad("rms_eps", "must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction", "must lie in [0, 1)");
        }
        if self.widths.is_empty() {
            return bad("widths", "need at least one backbone block");
        }
        if self.parts.contains(&0) {
            return bad("part_sizes", "region sizes must be positive");
        }
        Ok(())
    }

    /// Reads every training key from `c`; missing keys keep their defaults.
    ///
    /// `parts` is the head count `T`, taking the first `T` entries of `part_sizes`.
    pub fn from_config(c: &Config) -> Result<Self> {
        let d = Self::default();
        let sizes = c.get_list("part_sizes", DEFAULT_PART_SIZES.to_vec())?;
        let t = c.get("parts", d.parts.len())?;
        if t > sizes.len() {
            return Err(Error::Config {
                key: "parts".into(),
                reason: format!("{t} heads but only {} part_sizes", sizes.len()),
            });
        }
        let cfg = TrainConfig {
            parts: sizes[..t].to_vec(),
            k: c.get("k", d.k)?,
            batch: c.get("batch", d.batch)?,
            epochs: [
                c.get("epochs_features", d.epochs[0])?,
                c.get("epochs_attention", d.epochs[1])?,
                c.get("epochs_parts", d.epochs[2])?,
            ],
            lr: {
                let base = c.get("lr", 0.0)?;
                let pick = |key: &str, def: f64| c.get(key, if base > 0.0 { base } else { def });
                [
                    pick("lr_features", d.lr[0])?,
                    pick("lr_attention", d.lr[1])?,
                    pick("lr_parts", d.lr[2])?,
                ]
            },
            lr_gamma: c.get("lr_gamma", d.lr_gamma)?,
            rms_decay: c.get("rms_decay", d.rms_decay)?,
            rms_eps: c.get("rms_eps", d.rms_eps)?,
            strategy: c.get("reward", d.strategy)?,
            seed: c.get("seed", d.seed)?,
            rounds: c.get("rounds", d.rounds)?,
            patience: c.get("patience", d.patience)?,
            val_fraction: c.get("val_fraction", d.val_fraction)?,
            widths: c.get_list("widths", d.widths.clone())?,
            part_input: c.get("part_input", d.part_input)?,
            clf_hidden: c.get("clf_hidden", d.clf_hidden)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key [`TrainConfig::from_config`] reads, with this config's values.
    pub fn to_config_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let lines = [
            ("part_sizes", list(&self.parts)),
            ("parts", self.parts.len().to_string()),
            ("k", self.k.to_string()),
            ("batch", self.batch.to_string()),
            ("epochs_features", self.epochs[0].to_string()),
            ("epochs_attention", self.epochs[1].to_string()),
            ("epochs_parts", self.epochs[2].to_string()),
            ("lr_features", self.lr[0].to_string()),
            ("lr_attention", self.lr[1].to_string()),
            ("lr_parts", self.lr[2].to_string()),
            ("lr_gamma", self.lr_gamma.to_string()),
            ("rms_decay", self.rms_decay.to_string()),
            ("rms_eps", self.rms_eps.to_string()),
            ("reward", self.strategy.name().to_string()),
            ("seed", self.seed.to_string()),
            ("rounds", self.rounds.to_string()),
            ("patience", self.patience.to_string()),
            ("val_fraction", self.val_fraction.to_string()),
            ("widths", list(&self.widths)),
            ("part_input", self.part_input.to_string()),
            ("clf_hidden", self.clf_hidden.to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn model_spec(&self, channels: usize, image_h: usize, image_w: usize, classes: usize) -> ModelSpec {
        ModelSpec {
            channels,
            image_h,
            image_w,
            classes,
            widths: self.widths.clone(),
            parts: self.parts.iter().map(|&s| (s, s)).collect(),
            part_input: self.part_input,
            clf_hidden: self.clf_hidden,
        }
    }
}

/// `J = R − L` for one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ObjectiveReport {
    #[serde(rename = "J")]
    pub j: f64,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "L")]
    pub l: f64,
    pub epoch: usize,
}

/// One training-log line.
///
/// `R` and `mean_reward` are the mean 0/1 reward over all sampled glimpses of
/// a phase-2 epoch and are 0 in the other phases. `L` is the mean training
/// cross-entropy of whatever the phase optimizes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub round: usize,
    pub step: usize,
    /// 1-based epoch within the phase.
    pub epoch: usize,
    #[serde(rename = "J")]
    pub j: f64,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "L")]
    pub l: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub mean_reward: f64,
    pub lr: f64,
    pub reward: &'static str,
    pub wall_ms: u64,
}

impl EpochRecord {
    pub fn objective(&self) -> ObjectiveReport {
        ObjectiveReport {
            j: self.j,
            r: self.r,
            l: self.l,
            epoch: self.epoch,
        }
    }

    /// Equality on everything except wall-clock time.
    pub fn same_outcome(&self, o: &EpochRecord) -> bool {
        EpochRecord {
            wall_ms: 0,
            ..self.clone()
        } == EpochRecord { wall_ms: 0, ..o.clone() }
    }
}

pub enum TrainEvent<'a, S: Scalar> {
    Epoch(&'a EpochRecord),
    /// Phase-2 feature maps of the training samples, by position in the training subset.
    FeaturesCached {
        round: usize,
        maps: &'a [FeatureMap<S>],
    },
    StepEnd {
        round: usize,
        step: usize,
        model: &'a ModelParams<S>,
    },
}

pub struct TrainOutcome<S> {
    pub model: ModelParams<S>,
    pub records: Vec<EpochRecord>,
}

impl<S> TrainOutcome<S> {
    /// First phase-2 epoch (1-based, counted across rounds) whose mean reward
    /// reaches `threshold`.
    pub fn epochs_to_reward(&self, threshold: f64) -> Option<usize> {
        self.records
            .iter()
            .filter(|r| r.step == 2)
            .position(|r| r.mean_reward >= threshold)
            .map(|i| i + 1)
    }
}

struct Item<S> {
    id: usize,
    image: Tensor<S>,
    label: usize,
}

/// Splits `samples` into training and validation parts, deterministically in `seed`.
pub fn split_validation(samples: &[LabeledSample], fraction: f64, seed: u64) -> (Vec<LabeledSample>, Vec<LabeledSample>) {
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    Rng::derive(seed, &[STREAM_SPLIT]).shuffle(&mut idx);
    let n_val = ((samples.len() as f64) * fraction).floor() as usize;
    let n_val = n_val.min(samples.len().saturating_sub(1));
    let (val, train) = idx.split_at(n_val);
    let mut train: Vec<usize> = train.to_vec();
    let mut val: Vec<usize> = val.to_vec();
    train.sort_unstable();
    val.sort_unstable();
    (
        train.iter().map(|&i| samples[i].clone()).collect(),
        val.iter().map(|&i| samples[i].clone()).collect(),
    )
}

/// Copies the whole-image classifier into every part classifier.
pub fn init_parts_from_image<S: Scalar>(model: &mut ModelParams<S>) {
    for p in &mut model.part_clfs {
        p.hidden.clone_from(&model.image_clf.hidden);
        p.fc.clone_from(&model.image_clf.fc);
    }
}

pub struct Trainer<'a, S: Scalar> {
    pub cfg: TrainConfig,
    pub model: ModelParams<S>,
    train: Vec<Item<S>>,
    val: &'a [LabeledSample],
    opt_features: RmsProp<S>,
    opt_heads: RmsProp<S>,
    opt_parts: RmsProp<S>,
    records: Vec<EpochRecord>,
    start: Instant,
}

impl<'a, S: Scalar> Trainer<'a, S> {
    /// Fresh model for `train`; `val` is only evaluated.
    pub fn new(train: &[LabeledSample], val: &'a [LabeledSample], classes: usize, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let first = train.first().ok_or(Error::EmptyDataset)?;
        let (c, h, w) = first.image.chw()?;
        let spec = cfg.model_spec(c, h, w, classes);
        let model = ModelParams::new(spec, &mut Rng::derive(cfg.seed, &[STREAM_INIT]))?;
        Self::with_model(train, val, model, cfg)
    }

    pub fn with_model(train: &[LabeledSample], val: &'a [LabeledSample], model: ModelParams<S>, cfg: &TrainConfig) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let items = train
            .iter()
            .map(|s| {
                if s.label >= model.classes() {
                    return Err(Error::Label {
                        label: s.label,
                        classes: model.classes(),
                    });
                }
                Ok(Item {
                    id: s.id,
                    image: s.image.cast(),
                    label: s.label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let opt = || RmsProp::with(cfg.lr[0], cfg.rms_decay, cfg.rms_eps);
        Ok(Trainer {
            cfg: cfg.clone(),
            model,
            train: items,
            val,
            opt_features: opt(),
            opt_heads: opt(),
            opt_parts: opt(),
            records: Vec::new(),
            start: Instant::now(),
        })
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    fn shuffled(&self, round: usize, step: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        Rng::derive(self.cfg.seed, &[STREAM_SHUFFLE, round as u64, step as u64, epoch as u64]).shuffle(&mut order);
        order
    }

    fn validate_model(&self) -> Result<(f64, f64)> {
        if self.val.is_empty() {
            return Ok((0.0, 0.0));
        }
        let r = evaluate(&self.model, self.val, Locator::Attention, self.cfg.seed ^ STREAM_VAL)?;
        Ok((r.accuracy(), r.image_accuracy()))
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &mut self,
        round: usize,
        step: usize,
        epoch: usize,
        reward: f64,
        loss: f64,
        train_acc: f64,
        val_acc: f64,
        lr: f64,
        sink: &mut dyn FnMut(TrainEvent<'_, S>) -> Result<()>,
    ) -> Result<()> {
        let rec = EpochRecord {
            round,
            step,
            epoch,
            j: reward - loss,
            r: reward,
            l: loss,
            train_acc,
            val_acc,
            mean_reward: reward,
            lr,
            reward: self.cfg.strategy.name(),
            wall_ms: self.start.elapsed().as_millis() as u64,
        };
        sink(TrainEvent::Epoch(&rec))?;
        self.records.push(rec);
        Ok(())
    }

    /// Phase 1: backbone and whole-image classifier.
    pub fn train_features(&mut self, round: usize, sink: &mut dyn FnMut(TrainEvent<'_, S>) -> Result<()>) -> Result<()> {
        let epochs = self.cfg.epochs[0];
        let sched = LrSchedule::two_thirds(self.cfg.lr[0], self.cfg.lr_gamma, epochs);
        for epoch in 0..epochs {
            let lr = sched.lr(epoch);
            self.opt_features.lr = lr;
            let order = self.shuffled(round, 1, epoch);
            let (mut loss_sum, mut correct) = (0.0, 0usize);
            for batch in order.chunks(self.cfg.batch) {
                let m = &mut self.model;
                m.backbone.zero_grads();
                m.image_clf.zero_grads();
                for &i in batch {
                    let item = &self.train[i];
                    let mut g = Graph::new();
                    let x = g.leaf_owned(prepare(&item.image));
                    let (f, bb) = m.backbone.forward(&mut g, x)?;
                    let (logits, bc) = m.image_clf.forward(&mut g, f)?;
                    if argmax(g.value(logits).values()) == item.label {
                        correct += 1;
                    }
                    let loss = g.softmax_cross_entropy(logits, item.label)?;
                    loss_sum += g.value(loss).values()[0].as_f64();
                    g.backward(loss)?;
                    m.backbone.pull_grads(&g, &bb);
                    m.image_clf.pull_grads(&g, bc);
                }
                let scale = S::of(1.0 / batch.len() as f64);
                let mut group = ParamGroup(vec![&mut m.backbone, &mut m.image_clf]);
                group.scale_grads(scale);
                self.opt_features.step(&mut group)?;
            }
            let n = self.train.len() as f64;
            let (val_acc, _) = self.validate_model()?;
            self.record(round, 1, epoch + 1, 0.0, loss_sum / n, correct as f64 / n, val_acc, lr, sink)?;
        }
        sink(TrainEvent::StepEnd {
            round,
            step: 1,
            model: &self.model,
        })
    }

    pub fn feature_maps(&self) -> Result<Vec<FeatureMap<S>>> {
        self.train.iter().map(|it| self.model.features(&it.image)).collect()
    }

    /// Phase 2: attention heads by REINFORCE on cached feature maps.
    pub fn train_attention(&mut self, round: usize, sink: &mut dyn FnMut(TrainEvent<'_, S>) -> Result<()>) -> Result<()> {
        if self.model.steps() == 0 {
            return Ok(());
        }
        let maps = self.feature_maps()?;
        sink(TrainEvent::FeaturesCached { round, maps: &maps })?;
        let epochs = self.cfg.epochs[1];
        let sched = LrSchedule::two_thirds(self.cfg.lr[1], self.cfg.lr_gamma, epochs);
        for epoch in 0..epochs {
            let lr = sched.lr(epoch);
            self.opt_heads.lr = lr;
            let order = self.shuffled(round, 2, epoch);
            let (mut reward_sum, mut loss_sum, mut acc_sum) = (0.0, 0.0, 0.0);
            for batch in order.chunks(self.cfg.batch) {
                let mut traces = Vec::with_capacity(batch.len());
                let mut fms = Vec::with_capacity(batch.len());
                for &i in batch {
                    let item = &self.train[i];
                    let mut rng = Rng::derive(self.cfg.seed, &[STREAM_EPISODE, round as u64, epoch as u64, item.id as u64]);
                    let input = EpisodeInput {
                        sample_id: item.id,
                        features: &maps[i],
                        label: item.label,
                    };
                    let trace = run_episode(input, &self.model, self.cfg.k, self.cfg.strategy, &mut rng)?;
                    reward_sum += trace.mean_reward();
                    loss_sum += trace.mean_loss();
                    acc_sum += trace.final_accuracy();
                    traces.push(trace);
                    fms.push(&maps[i]);
                }
                let grad = policy_gradient(&traces, &fms, &self.model)?;
                grad.store_descent(&mut self.model);
                let mut group = ParamGroup(self.model.heads.iter_mut().map(|h| h as &mut dyn Parameters<S>).collect());
                self.opt_heads.step(&mut group)?;
                self.model.head_versions.iter_mut().for_each(|v| *v += 1);
            }
            let n = self.train.len() as f64;
            let (val_acc, _) = self.validate_model()?;
            let reward = reward_sum / n;
            self.record(round, 2, epoch + 1, reward, loss_sum / n, acc_sum / n, val_acc, lr, sink)?;
        }
        sink(TrainEvent::StepEnd {
            round,
            step: 2,
            model: &self.model,
        })
    }

    /// Crop features per training item and timestep, at `locator`'s locations.
    fn part_inputs(&self, round: usize, locator: Locator) -> Result<Vec<Vec<Tensor<S>>>> {
        self.train
            .iter()
            .map(|item| {
                let fm = self.model.features(&item.image)?;
                let (gh, gw) = fm.grid();
                let mut rng = Rng::derive(self.cfg.seed, &[STREAM_LOCATE, round as u64, item.id as u64]);
                (1..=self.model.steps())
                    .map(|t| {
                        let loc = match locator {
                            Locator::Attention => argmax_location(&self.model.distribution(&fm, t)?),
                            Locator::Center => GlimpseLocation {
                                t,
                                row: gh / 2,
                                col: gw / 2,
                            },
                            Locator::Random => GlimpseLocation {
                                t,
                                row: rng.below(gh),
                                col: rng.below(gw),
                            },
                        };
                        let rect = region_to_patch(loc, &self.model.head(t)?.region, &fm)?;
                        let patch = self.model.part_patch(&item.image, rect, t)?;
                        self.model.part_features(&patch, t)
                    })
                    .collect()
            })
            .collect()
    }

    /// Phase 3: part classifiers on crops chosen by `locator`.
    pub fn train_parts(&mut self, round: usize, locator: Locator, sink: &mut dyn FnMut(TrainEvent<'_, S>) -> Result<()>) -> Result<()> {
        let steps = self.model.steps();
        if steps == 0 {
            return Ok(());
        }
        let inputs = self.part_inputs(round, locator)?;
        let image_scores = self
            .train
            .iter()
            .map(|it| self.model.image_clf.probabilities(&self.model.features(&it.image)?.activations))
            .collect::<Result<Vec<_>>>()?;
        let epochs = self.cfg.epochs[2];
        let sched = LrSchedule::two_thirds(self.cfg.lr[2], self.cfg.lr_gamma, epochs);
        for epoch in 0..epochs {
            let lr = sched.lr(epoch);
            self.opt_parts.lr = lr;
            let order = self.shuffled(round, 3, epoch);
            let (mut loss_sum, mut correct) = (0.0, 0usize);
            for batch in order.chunks(self.cfg.batch) {
                self.model.part_clfs.iter_mut().for_each(|p| p.zero_grads());
                for &i in batch {
                    let label = self.train[i].label;
                    let mut avg = image_scores[i].clone();
                    for (t, clf) in self.model.part_clfs.iter_mut().enumerate() {
                        let mut g = Graph::new();
                        let x = g.leaf(&inputs[i][t]);
                        let (logits, b) = clf.forward(&mut g, x)?;
                        let loss = g.softmax_cross_entropy(logits, label)?;
                        loss_sum += g.value(loss).values()[0].as_f64();
                        let p = crate::graph::softmax_values(g.value(logits).values());
                        avg.iter_mut().zip(&p).for_each(|(a, &q)| *a += q);
                        g.backward(loss)?;
                        clf.pull_grads(&g, b);
                    }
                    if argmax(&avg) == label {
                        correct += 1;
                    }
                }
                let scale = S::of(1.0 / batch.len() as f64);
                let mut group = ParamGroup(self.model.part_clfs.iter_mut().map(|p| p as &mut dyn Parameters<S>).collect());
                group.scale_grads(scale);
                self.opt_parts.step(&mut group)?;
            }
            let n = self.train.len() as f64;
            let val_acc = if self.val.is_empty() {
                0.0
            } else {
                evaluate(&self.model, self.val, locator, self.cfg.seed ^ STREAM_VAL)?.accuracy()
            };
            self.record(
                round,
                3,
                epoch + 1,
                0.0,
                loss_sum / (n * steps as f64),
                correct as f64 / n,
                val_acc,
                lr,
                sink,
            )?;
        }
        sink(TrainEvent::StepEnd {
            round,
            step: 3,
            model: &self.model,
        })
    }

    /// All rounds of the three phases.
    pub fn run(self, sink: &mut dyn FnMut(TrainEvent<'_, S>) -> Result<()>) -> Result<TrainOutcome<S>> {
        self.run_with(Locator::Attention, sink)
    }

    /// Rounds in which parts are trained on crops chosen by `locator`.
    /// Phase 2 only runs for [`Locator::Attention`].
    pub fn run_with(mut self, locator: Locator, sink: &mut dyn FnMut(TrainEvent<'_, S>) -> Result<()>) -> Result<TrainOutcome<S>> {
        let mut stop = EarlyStop::new(self.cfg.patience);
        for round in 1..=self.cfg.rounds {
            self.train_features(round, sink)?;
            if round == 1 {
                init_parts_from_image(&mut self.model);
            }
            if locator == Locator::Attention {
                self.train_attention(round, sink)?;
            }
            self.train_parts(round, locator, sink)?;
            if !self.val.is_empty() {
                let acc = evaluate(&self.model, self.val, locator, self.cfg.seed ^ STREAM_VAL)?.accuracy();
                if stop.update(acc) {
                    break;
                }
            }
        }
        Ok(TrainOutcome {
            model: self.model,
            records: self.records,
        })
    }
}

/// Splits off a validation set and trains a fresh model.
pub fn train<S: Scalar>(
    samples: &[LabeledSample],
    classes: usize,
    cfg: &TrainConfig,
    sink: &mut dyn FnMut(TrainEvent<'_, S>) -> Result<()>,
) -> Result<TrainOutcome<S>> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    train_arm(samples, classes, cfg, Locator::Attention, sink)
}

/// [`train`] with parts trained on crops chosen by `locator`.
pub fn train_arm<S: Scalar>(
    samples: &[LabeledSample],
    classes: usize,
    cfg: &TrainConfig,
    locator: Locator,
    sink: &mut dyn FnMut(TrainEvent<'_, S>) -> Result<()>,
) -> Result<TrainOutcome<S>> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (train, val) = split_validation(samples, cfg.val_fraction, cfg.seed);
    Trainer::new(&train, &val, classes, cfg)?.run_with(locator, sink)
}

/// Patience counter on a metric that should increase.
struct EarlyStop {
    patience: usize,
    best: f64,
    stale: usize,
}

impl EarlyStop {
    fn new(patience: usize) -> Self {
        EarlyStop {
            patience,
            best: f64::NEG_INFINITY,
            stale: 0,
        }
    }

    /// True once the metric has not improved for `patience` updates.
    fn update(&mut self, metric: f64) -> bool {
        if metric > self.best {
            self.best = metric;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.patience > 0 && self.stale >= self.patience
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GlyphTaskSpec};

    fn tiny() -> (Vec<LabeledSample>, TrainConfig) {
        let spec = GlyphTaskSpec {
            classes: 3,
            image_size: 40,
            train: 24,
            test: 0,
            ..GlyphTaskSpec::default()
        };
        let cfg = TrainConfig {
            k: 2,
            batch: 8,
            epochs: [2, 2, 2],
            rounds: 2,
            widths: vec![4, 4, 4],
            parts: vec![2, 3],
            val_fraction: 0.25,
            ..TrainConfig::default()
        };
        (generate(&spec).unwrap().0, cfg)
    }

    #[test]
    fn empty_dataset_rejected() {
        let r = train::<f64>(&[], 3, &TrainConfig::default(), &mut |_| Ok(()));
        assert!(matches!(r, Err(Error::EmptyDataset)));
    }

    #[test]
    fn phases_and_objective_identity() {
        let (data, cfg) = tiny();
        let out = train::<f64>(&data, 3, &cfg, &mut |_| Ok(())).unwrap();
        let phases: Vec<(usize, usize)> = out.records.iter().map(|r| (r.round, r.step)).collect();
        for round in 1..=2 {
            for step in 1..=3 {
                assert!(phases.contains(&(round, step)));
            }
        }
        for r in &out.records {
            assert!((r.j - (r.r - r.l)).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_phase_touches_only_heads() {
        let (data, cfg) = tiny();
        let (train_set, val) = split_validation(&data, cfg.val_fraction, cfg.seed);
        let mut t = Trainer::<f64>::new(&train_set, &val, 3, &cfg).unwrap();
        t.train_features(1, &mut |_| Ok(())).unwrap();
        init_parts_from_image(&mut t.model);
        let before = t.model.clone();
        t.train_attention(1, &mut |_| Ok(())).unwrap();
        assert_eq!(t.model.backbone, before.backbone);
        assert_eq!(t.model.image_clf, before.image_clf);
        assert_eq!(t.model.part_clfs, before.part_clfs);
        assert_ne!(t.model.head_versions, before.head_versions);
    }

    #[test]
    fn zero_heads_is_plain_classification() {
        let (data, cfg) = tiny();
        let plain = TrainConfig {
            parts: vec![],
            ..cfg.clone()
        };
        let a = train::<f64>(&data, 3, &plain, &mut |_| Ok(())).unwrap();
        assert!(a.records.iter().all(|r| r.step == 1));
        let b = train::<f64>(&data, 3, &cfg, &mut |_| Ok(())).unwrap();
        // phase 1 follows the same trajectory whatever the number of heads
        assert_eq!(a.model.backbone, b.model.backbone);
        assert_eq!(a.model.image_clf, b.model.image_clf);
    }
}
