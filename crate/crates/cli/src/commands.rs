use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use fcan::ablation::{accuracy_csv, reward_csv, run_ablation, AblationPlan};
use fcan::attention::argmax_location;
use fcan::checkpoint::Checkpoint;
use fcan::config::Config;
use fcan::data::{self, pnm, GlyphTaskSpec, LabeledSample};
use fcan::eval::evaluate;
use fcan::features::region_to_patch;
use fcan::graph::{inject_backward_fault, OpKind};
use fcan::model::{Locator, ModelParams};
use fcan::train::{self as trainer, EpochRecord, TrainConfig, TrainEvent};
use fcan::viz::attention_overlay;
use fcan::Model64;

use crate::outdir::OutDir;
use crate::{Common, Failure};

const METRICS_HEADER: &str = "round,step,epoch,J,R,L,train_acc,val_acc,mean_reward,lr,reward\n";

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(Failure::io(path))
}

fn task_spec(c: &Config) -> Result<GlyphTaskSpec, Failure> {
    let d = GlyphTaskSpec::default();
    let spec = GlyphTaskSpec {
        classes: c.get("classes", d.classes)?,
        image_size: c.get("image_size", d.image_size)?,
        glyph_size: c.get("glyph_size", d.glyph_size)?,
        distractors: c.get("distractors", d.distractors)?,
        noise: c.get("noise", d.noise)?,
        train: c.get("train", d.train)?,
        test: c.get("test", d.test)?,
        seed: c.get("seed", d.seed)?,
    };
    spec.validate()?;
    Ok(spec)
}

pub fn generate(a: &Common) -> Result<(), Failure> {
    let c = a.load_config()?;
    let spec = task_spec(&c)?;
    c.finish()?;
    let out = OutDir::create(a.require_out()?, a.force)?;
    data::write_glyph_dataset(out.path(), &spec)?;
    let dir = out.commit()?;
    println!("wrote {} train and {} test images to {}", spec.train, spec.test, dir.display());
    Ok(())
}

/// Class count of a dataset directory: `task.cfg`, else the manifest directive.
fn dataset_classes(root: &Path) -> Result<usize, Failure> {
    let task = root.join("task.cfg");
    if task.exists() {
        let c = Config::load(&task)?;
        return c.require("classes").map_err(|e| Failure::Data(format!("{}: {e}", task.display())));
    }
    let manifest = root.join("train.txt");
    let text = fs::read_to_string(&manifest).map_err(Failure::io(&manifest))?;
    text.lines()
        .find_map(|l| l.trim().strip_prefix("# classes").and_then(|n| n.trim().parse().ok()))
        .ok_or_else(|| Failure::Data(format!("{}: no task.cfg and no `# classes N` line", root.display())))
}

struct Dataset {
    classes: usize,
    root: PathBuf,
}

impl Dataset {
    fn open(c: &Config) -> Result<Self, Failure> {
        let root: PathBuf = c
            .raw("data")
            .map(PathBuf::from)
            .ok_or_else(|| Failure::Usage("config key `data` (dataset directory) is required".into()))?;
        if !root.is_dir() {
            return Err(Failure::Data(format!("dataset directory {} does not exist", root.display())));
        }
        Ok(Dataset {
            classes: dataset_classes(&root)?,
            root,
        })
    }

    fn split(&self, name: &str) -> Result<Vec<LabeledSample>, Failure> {
        let samples = data::load_split(&self.root, &format!("{name}.txt"), Some(self.classes))?;
        if samples.is_empty() {
            return Err(Failure::Data(format!("{}: split `{name}` is empty", self.root.display())));
        }
        Ok(samples)
    }
}

fn metrics_row(r: &EpochRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}\n",
        r.round, r.step, r.epoch, r.j, r.r, r.l, r.train_acc, r.val_acc, r.mean_reward, r.lr, r.reward
    )
}

fn json_line(r: &EpochRecord, arm: Option<&str>) -> String {
    let mut v = serde_json::to_value(r).expect("records serialize");
    if let (Some(arm), Some(obj)) = (arm, v.as_object_mut()) {
        obj.insert("arm".into(), arm.into());
    }
    format!("{v}\n")
}

pub fn train(a: &Common) -> Result<(), Failure> {
    let c = a.load_config()?;
    let ds = Dataset::open(&c)?;
    let cache = c.get("feature_cache", false)?;
    let cfg = TrainConfig::from_config(&c)?;
    c.finish()?;
    let samples = ds.split("train")?;
    let out = OutDir::create(a.require_out()?, a.force)?;
    write(
        &out.join("config.cfg"),
        format!("data = {}\nfeature_cache = {cache}\n{}", ds.root.display(), cfg.to_config_text()),
    )?;
    fs::create_dir(out.join("checkpoints")).map_err(Failure::io(out.path()))?;
    if cache {
        fs::create_dir(out.join("features")).map_err(Failure::io(out.path()))?;
    }
    let log_path = out.join("train.jsonl");
    let mut log = fs::File::create(&log_path).map_err(Failure::io(&log_path))?;
    let mut metrics = String::from(METRICS_HEADER);
    let mut ids: Vec<usize> = Vec::new();
    let (train_part, _) = trainer::split_validation(&samples, cfg.val_fraction, cfg.seed);
    ids.extend(train_part.iter().map(|s| s.id));
    let outcome = trainer::train::<f64>(&samples, ds.classes, &cfg, &mut |e| {
        match e {
            TrainEvent::Epoch(r) => {
                log.write_all(json_line(r, None).as_bytes())?;
                metrics.push_str(&metrics_row(r));
                eprintln!(
                    "round {} step {} epoch {}: J {:.4} R {:.4} L {:.4} val {:.3}",
                    r.round, r.step, r.epoch, r.j, r.r, r.l, r.val_acc
                );
            }
            TrainEvent::StepEnd { round, step, model } => {
                model
                    .to_checkpoint()
                    .save(&out.join(format!("checkpoints/round{round}_step{step}.fcan")))?;
            }
            TrainEvent::FeaturesCached { round, maps } if cache => {
                let keyed: Vec<_> = ids.iter().copied().zip(maps.iter()).collect();
                data::save_feature_cache(&keyed, &out.join(format!("features/round{round}.fcan")))?;
            }
            TrainEvent::FeaturesCached { .. } => {}
        }
        Ok(())
    })?;
    outcome.model.to_checkpoint().save(&out.join("model.fcan"))?;
    write(&out.join("metrics.csv"), metrics)?;
    drop(log);
    let dir = out.commit()?;
    println!(
        "trained {} epochs; model in {}",
        outcome.records.len(),
        dir.join("model.fcan").display()
    );
    Ok(())
}

fn load_model(c: &Config) -> Result<Model64, Failure> {
    let path: PathBuf = c
        .raw("checkpoint")
        .map(PathBuf::from)
        .ok_or_else(|| Failure::Usage("config key `checkpoint` is required".into()))?;
    let ck = Checkpoint::load(&path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    Ok(ModelParams::from_checkpoint(&ck)?)
}

fn parse_arm(name: &str) -> Result<Option<Locator>, Failure> {
    match name {
        "attention" => Ok(Some(Locator::Attention)),
        "center" => Ok(Some(Locator::Center)),
        "random" => Ok(Some(Locator::Random)),
        "image" => Ok(None),
        other => Err(Failure::Usage(format!(
            "config key `arms`: unknown arm `{other}` (attention | center | random | image)"
        ))),
    }
}

pub fn eval(a: &Common) -> Result<(), Failure> {
    let c = a.load_config()?;
    let ds = Dataset::open(&c)?;
    let model = load_model(&c)?;
    let split: String = c.get("split", "test".to_string())?;
    let arms: Vec<String> = c.get_list("arms", vec!["attention".to_string()])?;
    let seed: u64 = c.get("seed", 1)?;
    c.finish()?;
    let locators = arms.iter().map(|n| parse_arm(n)).collect::<Result<Vec<_>, _>>()?;
    if model.classes() != ds.classes {
        return Err(Failure::Data(format!(
            "checkpoint has {} classes but dataset {} has {}",
            model.classes(),
            ds.root.display(),
            ds.classes
        )));
    }
    let samples = ds.split(&split)?;
    let out = OutDir::create(a.require_out()?, a.force)?;
    let mut csv = String::from("arm,accuracy,n\n");
    for (name, loc) in arms.iter().zip(locators) {
        let r = evaluate(&model, &samples, loc.unwrap_or(Locator::Attention), seed)?;
        let acc = if loc.is_some() { r.accuracy() } else { r.image_accuracy() };
        csv.push_str(&format!("{name},{acc:.6},{}\n", r.n));
        match loc {
            Some(_) if r.correct_with_glyph > 0 => {
                println!("{name}: accuracy {acc:.4} (n = {}), localization {:.4}", r.n, r.localization())
            }
            _ => println!("{name}: accuracy {acc:.4} (n = {})", r.n),
        }
    }
    write(&out.join("eval.csv"), csv)?;
    out.commit()?;
    Ok(())
}

pub fn ablate(a: &Common) -> Result<(), Failure> {
    let c = a.load_config()?;
    let ds = if c.contains("data") { Some(Dataset::open(&c)?) } else { None };
    let cfg = TrainConfig::from_config(&c)?;
    let d = AblationPlan::default();
    let tables: Vec<String> = c.get_list(
        "ablate_tables",
        ["regions", "steps", "rewards", "linear"].map(String::from).to_vec(),
    )?;
    for t in &tables {
        if !["regions", "steps", "rewards", "linear"].contains(&t.as_str()) {
            return Err(Failure::Usage(format!(
                "config key `ablate_tables`: unknown table `{t}` (regions | steps | rewards | linear)"
            )));
        }
    }
    let has = |t: &str| tables.iter().any(|x| x == t);
    let plan = AblationPlan {
        regions: has("regions"),
        steps: if has("steps") {
            c.get_list("ablate_steps", d.steps)?
        } else {
            Vec::new()
        },
        rewards: has("rewards"),
        linear: has("linear"),
    };
    c.finish()?;
    let (train_set, test_set, classes) = match &ds {
        Some(ds) => (ds.split("train")?, ds.split("test")?, ds.classes),
        None => {
            let spec = GlyphTaskSpec::default();
            let (tr, te) = data::generate(&spec)?;
            (tr, te, spec.classes)
        }
    };
    let out = OutDir::create(a.require_out()?, a.force)?;
    let log_path = out.join("ablate.jsonl");
    let mut log = fs::File::create(&log_path).map_err(Failure::io(&log_path))?;
    let mut log_err = None;
    let report = run_ablation(&train_set, &test_set, classes, &cfg, &plan, &mut |arm, r| {
        if let Err(e) = log.write_all(json_line(r, Some(arm)).as_bytes()) {
            log_err.get_or_insert(e);
        }
        if r.epoch == 1 {
            eprintln!("{arm}: round {} step {}", r.round, r.step);
        }
    })?;
    if let Some(e) = log_err {
        return Err(Failure::io(&log_path)(e));
    }
    drop(log);
    if !report.regions.is_empty() {
        write(&out.join("regions.csv"), accuracy_csv(&report.regions))?;
    }
    if !report.steps.is_empty() {
        write(&out.join("steps.csv"), accuracy_csv(&report.steps))?;
    }
    if !report.rewards.is_empty() {
        write(&out.join("rewards.csv"), reward_csv(&report.rewards))?;
    }
    for r in report.regions.iter().chain(&report.steps).chain(&report.rewards) {
        match r.epochs_to_reward {
            Some(e) => println!("{:<14} {:.4}  reward threshold at step-2 epoch {e}", r.arm, r.accuracy),
            None => println!("{:<14} {:.4}", r.arm, r.accuracy),
        }
    }
    out.commit()?;
    Ok(())
}

pub fn visualize(a: &Common) -> Result<(), Failure> {
    let c = a.load_config()?;
    let model = load_model(&c)?;
    let image_path: PathBuf = c
        .raw("image")
        .map(PathBuf::from)
        .ok_or_else(|| Failure::Usage("config key `image` is required".into()))?;
    c.finish()?;
    let image = pnm::load::<f64>(&image_path).map_err(|e| Failure::Data(format!("{}: {e}", image_path.display())))?;
    let fm = model.features(&image)?;
    let out = OutDir::create(a.require_out()?, a.force)?;
    for t in 1..=model.steps() {
        let dist = model.distribution(&fm, t)?;
        let loc = argmax_location(&dist);
        let rect = region_to_patch(loc, &model.head(t)?.region, &fm)?;
        let overlay = attention_overlay(&image, &dist, fm.stride, Some(rect))?;
        pnm::save(&overlay, &out.join(format!("attention_t{t}.ppm")))?;
        println!(
            "t = {t}: cell ({}, {}), p = {:.4}, region x {} y {} w {} h {}",
            loc.row,
            loc.col,
            dist.prob(loc.row, loc.col),
            rect.x,
            rect.y,
            rect.w,
            rect.h
        );
    }
    if model.steps() == 0 {
        println!("model has no attention steps; nothing drawn");
    }
    out.commit()?;
    Ok(())
}

pub fn gradcheck(a: &Common) -> Result<(), Failure> {
    let c = a.load_config()?;
    c.finish()?;
    let fault = match &a.inject_fault {
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| Failure::Usage(format!("unknown operation `{name}`")))?),
        None => None,
    };
    inject_backward_fault(fault);
    let results = fcan::checks::run_all();
    inject_backward_fault(None);
    let results = results?;
    let mut csv = String::from("check,op,error,tolerance,passed\n");
    let mut failed = Vec::new();
    for r in &results {
        let op = r.op.map(OpKind::name).unwrap_or("");
        println!(
            "{} {:<48} error {:.3e} (tolerance {:.1e})",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.error,
            r.tolerance
        );
        csv.push_str(&format!("{},{op},{:e},{:e},{}\n", r.name, r.error, r.tolerance, r.passed()));
        if !r.passed() {
            failed.push(if op.is_empty() {
                r.name.clone()
            } else {
                format!("{} [{op}]", r.name)
            });
        }
    }
    if let Some(dir) = &a.out {
        let out = OutDir::create(dir, a.force)?;
        write(&out.join("gradcheck.csv"), csv)?;
        out.commit()?;
    }
    if failed.is_empty() {
        println!("all {} checks passed", results.len());
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "{} of {} checks failed: {}",
            failed.len(),
            results.len(),
            failed.join(", ")
        )))
    }
}
