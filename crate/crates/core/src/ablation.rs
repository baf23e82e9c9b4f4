//! Comparison runs: region choice, number of glimpses and reward strategy.
//!
//! Every arm trains from the same seed, so arms that share a configuration
//! share a trained model.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::graph::softmax_values;
use crate::model::{Locator, PIXEL_MEAN};
use crate::rl::RewardStrategy;
use crate::rng::Rng;
use crate::train::{train_arm, EpochRecord, TrainConfig, TrainEvent, TrainOutcome, DEFAULT_PART_SIZES};

/// Mean training reward the reward-strategy table measures time to.
pub const REWARD_THRESHOLD: f64 = 0.5;

const STREAM_TEST: u64 = 0x7e57;
const STREAM_LINEAR: u64 = 0x11ea;

#[derive(Clone, Debug, PartialEq)]
pub struct ArmResult {
    pub arm: String,
    pub accuracy: f64,
    pub n: usize,
    /// Phase-2 epochs until the mean reward first reached [`REWARD_THRESHOLD`].
    pub epochs_to_reward: Option<usize>,
}

/// Which tables to produce.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationPlan {
    pub regions: bool,
    pub steps: Vec<usize>,
    pub rewards: bool,
    pub linear: bool,
}

impl Default for AblationPlan {
    fn default() -> Self {
        AblationPlan {
            regions: true,
            steps: vec![0, 1, 2, 3],
            rewards: true,
            linear: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationReport {
    /// linear pixels, baseline, random, center, attention.
    pub regions: Vec<ArmResult>,
    /// One row per `T`.
    pub steps: Vec<ArmResult>,
    /// greedy, delayed.
    pub rewards: Vec<ArmResult>,
}

impl AblationReport {
    pub fn arm(&self, name: &str) -> Option<&ArmResult> {
        self.regions.iter().chain(&self.steps).chain(&self.rewards).find(|a| a.arm == name)
    }
}

/// `cfg` with `t` heads; sizes beyond `cfg.parts` come from [`DEFAULT_PART_SIZES`].
pub fn with_steps(cfg: &TrainConfig, t: usize) -> Result<TrainConfig> {
    let mut parts: Vec<usize> = cfg.parts.iter().copied().take(t).collect();
    while parts.len() < t {
        match DEFAULT_PART_SIZES.get(parts.len()) {
            Some(&s) => parts.push(s),
            None => {
                return Err(Error::Config {
                    key: "parts".into(),
                    reason: format!("no default region size for head {}", parts.len() + 1),
                })
            }
        }
    }
    Ok(TrainConfig { parts, ..cfg.clone() })
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct RunKey {
    steps: usize,
    delayed: bool,
    locator: u8,
}

fn locator_code(l: Locator) -> u8 {
    match l {
        Locator::Attention => 0,
        Locator::Center => 1,
        Locator::Random => 2,
    }
}

struct Runner<'a> {
    train: &'a [LabeledSample],
    test: &'a [LabeledSample],
    classes: usize,
    cfg: &'a TrainConfig,
    done: BTreeMap<RunKey, (f64, Option<usize>)>,
    progress: &'a mut dyn FnMut(&str, &EpochRecord),
}

impl Runner<'_> {
    fn arm(&mut self, name: &str, steps: usize, strategy: RewardStrategy, locator: Locator) -> Result<ArmResult> {
        let key = RunKey {
            steps,
            delayed: strategy == RewardStrategy::Delayed,
            locator: if steps == 0 { 0 } else { locator_code(locator) },
        };
        if !self.done.contains_key(&key) {
            let cfg = TrainConfig {
                strategy,
                ..with_steps(self.cfg, steps)?
            };
            let progress = &mut *self.progress;
            let out: TrainOutcome<f64> = train_arm(self.train, self.classes, &cfg, locator, &mut |e| {
                if let TrainEvent::Epoch(r) = e {
                    progress(name, r);
                }
                Ok(())
            })?;
            let report = evaluate(&out.model, self.test, locator, self.cfg.seed ^ STREAM_TEST)?;
            self.done.insert(key, (report.accuracy(), out.epochs_to_reward(REWARD_THRESHOLD)));
        }
        let (accuracy, epochs_to_reward) = self.done[&key];
        Ok(ArmResult {
            arm: name.to_string(),
            accuracy,
            n: self.test.len(),
            epochs_to_reward,
        })
    }
}

/// Trains and evaluates every arm of `plan`; `progress` sees each epoch record
/// tagged with its arm name.
pub fn run_ablation(
    train: &[LabeledSample],
    test: &[LabeledSample],
    classes: usize,
    cfg: &TrainConfig,
    plan: &AblationPlan,
    progress: &mut dyn FnMut(&str, &EpochRecord),
) -> Result<AblationReport> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    cfg.validate()?;
    let t = cfg.steps();
    let mut run = Runner {
        train,
        test,
        classes,
        cfg,
        done: BTreeMap::new(),
        progress,
    };
    let mut report = AblationReport::default();
    if plan.linear {
        report.regions.push(linear_pixel_baseline(train, test, classes, cfg.seed)?);
    }
    if plan.regions {
        report.regions.push(run.arm("baseline", 0, cfg.strategy, Locator::Attention)?);
        report.regions.push(run.arm("random", t, cfg.strategy, Locator::Random)?);
        report.regions.push(run.arm("center", t, cfg.strategy, Locator::Center)?);
        report.regions.push(run.arm("attention", t, cfg.strategy, Locator::Attention)?);
    }
    for &s in &plan.steps {
        report.steps.push(run.arm(&format!("T={s}"), s, cfg.strategy, Locator::Attention)?);
    }
    if plan.rewards {
        for (name, strategy) in [("greedy", RewardStrategy::Greedy), ("delayed", RewardStrategy::Delayed)] {
            report.rewards.push(run.arm(name, t, strategy, Locator::Attention)?);
        }
    }
    Ok(report)
}

/// `arm,accuracy,n` rows.
pub fn accuracy_csv(rows: &[ArmResult]) -> String {
    let mut s = String::from("arm,accuracy,n\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.6},{}", r.arm, r.accuracy, r.n);
    }
    s
}

/// `arm,accuracy,n,epochs_to_reward`; the last column is empty when the
/// threshold was never reached.
pub fn reward_csv(rows: &[ArmResult]) -> String {
    let mut s = String::from("arm,accuracy,n,epochs_to_reward\n");
    for r in rows {
        let e = r.epochs_to_reward.map(|e| e.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{:.6},{},{e}", r.arm, r.accuracy, r.n);
    }
    s
}

/// Softmax regression on raw centered pixels, trained by minibatch SGD.
///
/// A glyph at a random position is invisible to a single linear template, so
/// this arm bounds what the task gives away without localization.
pub fn linear_pixel_baseline(train: &[LabeledSample], test: &[LabeledSample], classes: usize, seed: u64) -> Result<ArmResult> {
    const EPOCHS: usize = 10;
    const BATCH: usize = 16;
    const LR: f64 = 0.05;
    let first = train.first().ok_or(Error::EmptyDataset)?;
    let d = first.image.len();
    let mut w = vec![0.0f64; classes * d];
    let mut b = vec![0.0f64; classes];
    let scores = |w: &[f64], b: &[f64], x: &[f64]| -> Vec<f64> {
        (0..classes)
            .map(|c| b[c] + w[c * d..(c + 1) * d].iter().zip(x).map(|(a, v)| a * (v - PIXEL_MEAN)).sum::<f64>())
            .collect()
    };
    for s in train.iter().chain(test) {
        if s.image.len() != d {
            return Err(Error::shape(
                "linear baseline",
                format!("image of {} values, expected {d}", s.image.len()),
            ));
        }
        if s.label >= classes {
            return Err(Error::Label { label: s.label, classes });
        }
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..EPOCHS {
        Rng::derive(seed, &[STREAM_LINEAR, epoch as u64]).shuffle(&mut order);
        for batch in order.chunks(BATCH) {
            let mut gw = vec![0.0f64; classes * d];
            let mut gb = vec![0.0f64; classes];
            for &i in batch {
                let x = train[i].image.values();
                let mut p = softmax_values(&scores(&w, &b, x));
                p[train[i].label] -= 1.0;
                for c in 0..classes {
                    gb[c] += p[c];
                    for (g, v) in gw[c * d..(c + 1) * d].iter_mut().zip(x) {
                        *g += p[c] * (v - PIXEL_MEAN);
                    }
                }
            }
            let step = LR / batch.len() as f64;
            w.iter_mut().zip(&gw).for_each(|(a, g)| *a -= step * g);
            b.iter_mut().zip(&gb).for_each(|(a, g)| *a -= step * g);
        }
    }
    let correct = test
        .iter()
        .filter(|s| crate::tensor::argmax(&scores(&w, &b, s.image.values())) == s.label)
        .count();
    Ok(ArmResult {
        arm: "linear_pixels".into(),
        accuracy: correct as f64 / test.len() as f64,
        n: test.len(),
        epochs_to_reward: None,
    })
}
