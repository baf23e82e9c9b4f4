use std::collections::BTreeMap;

use fcan::ablation::{accuracy_csv, reward_csv, run_ablation, AblationPlan};
use fcan::data::{generate, GlyphTaskSpec};
use fcan::train::TrainConfig;

fn tiny_config() -> TrainConfig {
    TrainConfig {
        parts: vec![2],
        k: 4,
        batch: 8,
        epochs: [1, 1, 1],
        rounds: 1,
        widths: vec![4, 4, 4],
        ..TrainConfig::default()
    }
}

#[test]
fn tiny_ablation_produces_every_arm() {
    let spec = GlyphTaskSpec {
        classes: 3,
        image_size: 40,
        train: 24,
        test: 9,
        ..GlyphTaskSpec::default()
    };
    let (train, test) = generate(&spec).unwrap();
    let mut epochs: BTreeMap<String, usize> = BTreeMap::new();
    let report = run_ablation(
        &train,
        &test,
        3,
        &tiny_config(),
        &AblationPlan {
            steps: vec![0, 1],
            ..AblationPlan::default()
        },
        &mut |arm, _| {
            *epochs.entry(arm.to_string()).or_default() += 1;
        },
    )
    .unwrap();

    let names = |rows: &[fcan::ablation::ArmResult]| rows.iter().map(|r| r.arm.clone()).collect::<Vec<_>>();
    assert_eq!(
        names(&report.regions),
        ["linear_pixels", "baseline", "random", "center", "attention"]
    );
    assert_eq!(names(&report.steps), ["T=0", "T=1"]);
    assert_eq!(names(&report.rewards), ["greedy", "delayed"]);
    for r in report.regions.iter().chain(&report.steps).chain(&report.rewards) {
        assert_eq!(r.n, 9);
        assert!((0.0..=1.0).contains(&r.accuracy));
    }

    // identical configurations share one trained run
    let acc = |n| report.arm(n).unwrap().accuracy;
    assert_eq!(acc("T=0"), acc("baseline"));
    assert_eq!(acc("T=1"), acc("attention"));
    assert_eq!(acc("greedy"), acc("attention"));
    assert!(!epochs.contains_key("T=0") && !epochs.contains_key("T=1") && !epochs.contains_key("greedy"));
    assert!(epochs.contains_key("delayed"));

    let csv = accuracy_csv(&report.regions);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("arm,accuracy,n"));
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f.len(), 3);
        assert_eq!(f[1].split('.').nth(1).map(str::len), Some(6));
    }
    let csv = reward_csv(&report.rewards);
    assert!(csv.starts_with("arm,accuracy,n,epochs_to_reward\n"));
    assert!(csv.lines().skip(1).all(|l| l.split(',').count() == 4));
}
