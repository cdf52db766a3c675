use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use euclidnet::costmodel::{euclid_vs_conv_report, Tiling};
use euclidnet::data::{load_idx, synth, write_idx, Dataset};
use euclidnet::nn::Model;
use euclidnet::quant::{quant_report, save_quantized};
use euclidnet::robustness::{delta_csv, delta_grid, sweep_csv, sweep_eval, BlurGrid, Sweep, TransformGrid};
use euclidnet::similarity::sim_eval;
use euclidnet::train::{
    checkpoint_load, checkpoint_save, evaluate, finetune_homotopy, fit, metrics_csv, CheckpointMeta, EpochMetrics,
    Split,
};
use euclidnet::{Error, Result, SimilarityKind};
use serde::Serialize;

use crate::config::{require, RunConfig};
use crate::rundir;
use crate::{
    CostArgs, EvalArgs, EvalData, FinetuneArgs, GenDataArgs, QuantizeArgs, RobustnessArgs, RunArgs, SimfieldArgs,
    SweepKind, TrainArgs,
};

fn ensure_exists(paths: &[&Path]) -> Result<()> {
    for p in paths {
        std::fs::metadata(p).map_err(|e| Error::io(*p, e))?;
    }
    Ok(())
}

fn apply_run_overrides(cfg: &mut RunConfig, a: &RunArgs) {
    let d = &mut cfg.data;
    for (slot, flag) in [
        (&mut d.train_images, &a.train_images),
        (&mut d.train_labels, &a.train_labels),
        (&mut d.test_images, &a.test_images),
        (&mut d.test_labels, &a.test_labels),
    ] {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    let t = &mut cfg.train;
    t.epochs = a.epochs.or(t.epochs);
    t.lr = a.lr.or(t.lr);
    t.batch_size = a.batch_size.or(t.batch_size);
    t.eta = a.eta.or(t.eta);
    t.seed = a.seed.or(t.seed);
    if a.freeze_bn {
        t.freeze_bn_stats = Some(true);
    }
    if a.run_root.is_some() {
        cfg.output.root.clone_from(&a.run_root);
    }
}

struct Splits {
    train: Dataset,
    test: Dataset,
}

fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let d = &cfg.data;
    let paths = [
        require(&d.train_images, "training images")?,
        require(&d.train_labels, "training labels")?,
        require(&d.test_images, "test images")?,
        require(&d.test_labels, "test labels")?,
    ];
    ensure_exists(&paths)?;
    let mut train = load_idx(paths[0], paths[1])?;
    let mut test = load_idx(paths[2], paths[3])?;
    if train.image_shape() != test.image_shape() {
        return Err(Error::Shape(format!(
            "train images are {:?} but test images are {:?}",
            train.image_shape(),
            test.image_shape()
        )));
    }
    let classes = train.class_count.max(test.class_count);
    train.class_count = classes;
    test.class_count = classes;
    Ok(Splits { train, test })
}

fn print_row(r: &EpochMetrics) {
    println!(
        "epoch {:>3} {:<5} loss {:.4} top1 {:.4} lambda {:.3} lr {:.5}",
        r.epoch,
        r.split.as_str(),
        r.loss,
        r.top1,
        r.lambda,
        r.lr
    );
}

fn final_test_top1(rows: &[EpochMetrics]) -> f32 {
    rows.iter().rev().find(|r| r.split == Split::Test).map_or(0.0, |r| r.top1)
}

#[derive(Serialize)]
struct RunSummary<'a> {
    command: &'a str,
    kind: String,
    epochs: u32,
    seed: u64,
    test_top1: f32,
    test_top5: f32,
    test_n: usize,
}

fn write_run(dir: &Path, cfg: &RunConfig, model: &Model, meta: CheckpointMeta, rows: &[EpochMetrics], summary: &RunSummary) -> Result<()> {
    checkpoint_save(model, meta, dir.join("model.ckpt"))?;
    rundir::write(dir, "metrics.csv", metrics_csv(rows))?;
    rundir::write(dir, "config.toml", cfg.to_toml())?;
    rundir::write(dir, "summary.json", serde_json::to_string_pretty(summary).expect("summary serialises"))?;
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load_or_default(a.run.config.as_deref())?;
    apply_run_overrides(&mut cfg, &a.run);
    if let Some(sim) = &a.sim {
        cfg.model.kind = sim.clone();
    }
    let tc = cfg.train_config()?;
    tc.validate()?;
    let splits = load_splits(&cfg)?;
    let spec = cfg.model_spec(splits.train.image_shape(), splits.train.class_count)?;
    let dir = rundir::prepare("train", a.run.run_dir.as_deref(), cfg.output.root.as_deref(), &cfg)?;
    let mut model = spec.build(tc.seed)?;
    model.norm = Some(splits.train.normalization());
    let rows = fit(&mut model, &splits.train, &splits.test, &tc, print_row)?;
    let eval = evaluate(&model, &splits.test)?;
    let meta = CheckpointMeta {
        epoch: tc.epochs,
        lambda: spec.kind.lambda(),
        seed: tc.seed,
    };
    let summary = RunSummary {
        command: "train",
        kind: spec.kind.to_string(),
        epochs: tc.epochs,
        seed: tc.seed,
        test_top1: final_test_top1(&rows),
        test_top5: eval.top5,
        test_n: eval.n,
    };
    write_run(&dir, &cfg, &model, meta, &rows, &summary)?;
    println!("test top1 {:.4}", summary.test_top1);
    println!("run directory {}", dir.display());
    Ok(())
}

pub fn finetune(a: FinetuneArgs) -> Result<()> {
    let mut cfg = RunConfig::load_or_default(a.run.config.as_deref())?;
    apply_run_overrides(&mut cfg, &a.run);
    if let Some(l) = a.lambda0 {
        cfg.homotopy.lambda0 = Some(l);
    }
    if let Some(n) = a.run.epochs {
        cfg.homotopy.epochs = Some(n);
    }
    if let Some(0) = cfg.homotopy.epochs {
        return Err(Error::Config("epochs must be ≥ 1".into()));
    }
    let sched = cfg.schedule()?;
    cfg.train.epochs = Some(sched.epochs());
    let mut tc = cfg.train_config()?;
    tc.eta = cfg.train.eta.unwrap_or(0.0);
    tc.homotopy = Some(sched);
    tc.validate()?;
    ensure_exists(&[&a.from])?;
    let ckpt = checkpoint_load(&a.from)?;
    let splits = load_splits(&cfg)?;
    let mut model = if a.run.config.is_some() {
        let mut spec = cfg.model_spec(splits.train.image_shape(), splits.train.class_count)?;
        spec.kind = SimilarityKind::Homotopy(sched.lambda0());
        spec.build(tc.seed)?
    } else {
        ckpt.to_model()?
    };
    cfg.model.kind = SimilarityKind::Euclid.to_string();
    let dir = rundir::prepare("finetune", a.run.run_dir.as_deref(), cfg.output.root.as_deref(), &(&cfg, &a.from))?;
    let rows = finetune_homotopy(&ckpt, &mut model, &splits.train, &splits.test, &tc, print_row)?;
    let eval = evaluate(&model, &splits.test)?;
    let meta = CheckpointMeta {
        epoch: sched.epochs(),
        lambda: 1.0,
        seed: tc.seed,
    };
    let summary = RunSummary {
        command: "finetune",
        kind: SimilarityKind::Euclid.to_string(),
        epochs: sched.epochs(),
        seed: tc.seed,
        test_top1: final_test_top1(&rows),
        test_top5: eval.top5,
        test_n: eval.n,
    };
    write_run(&dir, &cfg, &model, meta, &rows, &summary)?;
    println!("test top1 {:.4}", summary.test_top1);
    println!("run directory {}", dir.display());
    Ok(())
}

/// Resolves (images, labels) from flags or the config's test split.
fn eval_paths(d: &EvalData) -> Result<(PathBuf, PathBuf)> {
    let cfg = RunConfig::load_or_default(d.config.as_deref())?;
    let images = d.images.clone().or(cfg.data.test_images);
    let labels = d.labels.clone().or(cfg.data.test_labels);
    let images = require(&images, "evaluation images")?.to_path_buf();
    let labels = require(&labels, "evaluation labels")?.to_path_buf();
    Ok((images, labels))
}

fn load_for(model: &Model, images: &Path, labels: &Path) -> Result<Dataset> {
    ensure_exists(&[images, labels])?;
    let mut data = load_idx(images, labels)?;
    if data.class_count > model.classes() {
        return Err(Error::Label {
            label: data.class_count - 1,
            classes: model.classes(),
        });
    }
    data.class_count = model.classes();
    Ok(data)
}

fn load_model(path: &Path) -> Result<Model> {
    ensure_exists(&[path])?;
    Ok(checkpoint_load(path)?.to_model()?)
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let (images, labels) = eval_paths(&a.data)?;
    let model = load_model(&a.ckpt)?;
    let data = load_for(&model, &images, &labels)?;
    let r = evaluate(&model, &data)?;
    let dir = rundir::prepare("eval", a.data.run_dir.as_deref(), a.data.run_root.as_deref(), &(&a.ckpt, &images, &labels))?;
    let json = serde_json::json!({ "top1": r.top1, "top5": r.top5, "n": r.n });
    rundir::write(&dir, "eval.json", serde_json::to_string_pretty(&json).expect("json"))?;
    println!("top1 {} top5 {} n {}", r.top1, r.top5, r.n);
    if model.classes() < 5 {
        println!("note: fewer than 5 classes, top5 reported as 1");
    }
    println!("run directory {}", dir.display());
    Ok(())
}

pub fn quantize(a: QuantizeArgs) -> Result<()> {
    let cfg = RunConfig::load_or_default(a.data.config.as_deref())?;
    let (images, labels) = eval_paths(&a.data)?;
    let calib_images = a.calib_images.clone().or(cfg.data.train_images.clone());
    let calib_labels = a.calib_labels.clone().or(cfg.data.train_labels.clone());
    let calib_images = require(&calib_images, "calibration images")?;
    let calib_labels = require(&calib_labels, "calibration labels")?;
    if a.calib == 0 {
        return Err(Error::Config("--calib must be ≥ 1".into()));
    }
    let model = load_model(&a.ckpt)?;
    let eval_set = load_for(&model, &images, &labels)?;
    let calib_set = load_for(&model, calib_images, calib_labels)?;
    let calib_set = calib_set.take(a.calib.min(calib_set.len()))?;
    let (q, report) = quant_report(&model, &calib_set, &eval_set, a.bits)?;
    let settings = (&a.ckpt, a.bits, a.calib, calib_images, &images);
    let dir = rundir::prepare("quantize", a.data.run_dir.as_deref(), a.data.run_root.as_deref(), &settings)?;
    let meta = checkpoint_load(&a.ckpt)?.meta;
    save_quantized(&q, meta, dir.join("model.q"))?;
    rundir::write(&dir, "quant_report.json", serde_json::to_string_pretty(&report).expect("report serialises"))?;
    for l in &report.per_layer {
        println!("{:<20} scale {:.6e} max_err {:.6e}", l.name, l.scale, l.max_err);
    }
    println!(
        "top1 float {} quantized {} (eval-calibrated {})",
        report.top1_float,
        report.top1_quant,
        report.top1_quant_eval_calibrated.unwrap_or(f32::NAN)
    );
    println!("run directory {}", dir.display());
    Ok(())
}

pub fn cost(a: CostArgs) -> Result<()> {
    let tiling = if a.true_karatsuba { Tiling::Karatsuba } else { Tiling::FourWay };
    let c = euclid_vs_conv_report(a.n, a.m, a.macs, tiling)?;
    println!("{}", c.summary_line());
    print!("{}", c.table());
    if let Some(p) = &a.json {
        euclidnet::io::write_atomic(p, serde_json::to_string_pretty(&c.to_json()).expect("json").as_bytes())?;
    }
    Ok(())
}

pub fn robustness(a: RobustnessArgs) -> Result<()> {
    let sweep = match a.sweep {
        SweepKind::Transform => {
            let d = TransformGrid::default();
            Sweep::Transform(TransformGrid {
                a_values: a.a.clone().unwrap_or(d.a_values),
                b_values: a.b.clone().unwrap_or(d.b_values),
                clip: a.clip,
            })
        }
        SweepKind::Blur => {
            let d = BlurGrid::default();
            Sweep::Blur(BlurGrid {
                sigmas: a.sigmas.clone().unwrap_or(d.sigmas),
                kernel_sizes: a.ksizes.clone().unwrap_or(d.kernel_sizes),
            })
        }
        SweepKind::Noise => Sweep::Noise {
            sigmas: a.sigmas.clone().unwrap_or_else(|| vec![0.0, 0.1, 0.2, 0.4]),
            seed: a.noise_seed,
        },
    };
    sweep.cells()?;
    let (images, labels) = eval_paths(&a.data)?;
    let model = load_model(&a.ckpt)?;
    let other = a.compare.as_deref().map(load_model).transpose()?;
    let data = load_for(&model, &images, &labels)?;
    let settings = (&a.ckpt, &a.compare, &sweep, &images);
    let dir = rundir::prepare("robustness", a.data.run_dir.as_deref(), a.data.run_root.as_deref(), &settings)?;
    let mut results = vec![sweep_eval(&model, &data, &sweep)?];
    if let Some(m) = &other {
        let data = load_for(m, &images, &labels)?;
        results.push(sweep_eval(m, &data, &sweep)?);
        let delta = delta_grid(&results[0], &results[1])?;
        rundir::write(&dir, "delta.csv", delta_csv(&delta))?;
        let worst = delta.iter().map(|c| c.top1.abs()).fold(0.0f32, f32::max);
        println!("largest |delta top1| {worst}");
    }
    let csv = sweep_csv(&results);
    rundir::write(&dir, "sweep.csv", &csv)?;
    print!("{csv}");
    println!("run directory {}", dir.display());
    Ok(())
}

fn parse_range(s: &str) -> Result<(f32, f32)> {
    let bad = || Error::Config(format!("range must be lo:hi with lo < hi, got {s:?}"));
    let (lo, hi) = s.split_once(':').ok_or_else(bad)?;
    let lo: f32 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f32 = hi.trim().parse().map_err(|_| bad())?;
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(bad());
    }
    Ok((lo, hi))
}

pub fn simfield_csv(kind: SimilarityKind, lo: f32, hi: f32, steps: usize) -> Result<String> {
    let at = |i: usize| lo + (hi - lo) * i as f32 / (steps - 1) as f32;
    let mut s = String::from("x,w,s\n");
    for i in 0..steps {
        for j in 0..steps {
            let (x, w) = (at(i), at(j));
            let _ = writeln!(s, "{x},{w},{}", sim_eval(kind, x, w)?);
        }
    }
    Ok(s)
}

pub fn simfield(a: SimfieldArgs) -> Result<()> {
    let (lo, hi) = parse_range(&a.range)?;
    if a.steps < 2 {
        return Err(Error::Config(format!("--steps must be ≥ 2, got {}", a.steps)));
    }
    let kinds: Vec<SimilarityKind> = if a.kind == "all" {
        vec![
            SimilarityKind::Conv,
            SimilarityKind::Euclid,
            SimilarityKind::Adder,
            SimilarityKind::Mfo,
            SimilarityKind::Synapse,
        ]
    } else {
        a.kind.split(',').map(|k| k.trim().parse()).collect::<Result<_>>()?
    };
    let names: Vec<String> = kinds.iter().map(|k| k.to_string()).collect();
    let dir = rundir::prepare("simfield", a.run_dir.as_deref(), a.run_root.as_deref(), &(&names, lo, hi, a.steps))?;
    for kind in kinds {
        let name = format!("simfield_{}.csv", kind.to_string().replace(['(', ')'], "_"));
        let p = rundir::write(&dir, &name, simfield_csv(kind, lo, hi, a.steps)?)?;
        println!("{}", p.display());
    }
    Ok(())
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    if a.train == 0 || a.test == 0 || a.size < 8 {
        return Err(Error::Config("need ≥ 1 train and test image and size ≥ 8".into()));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for (split, n, seed) in [("train", a.train, a.seed), ("test", a.test, a.seed.wrapping_add(1_000_003))] {
        let (pixels, labels) = synth::generate(n, a.size, seed);
        write_idx(
            a.out.join(format!("{split}-images.idx")),
            a.out.join(format!("{split}-labels.idx")),
            &pixels,
            &labels,
            a.size,
            a.size,
        )?;
    }
    let mut cfg = RunConfig::default();
    cfg.data.train_images = Some("train-images.idx".into());
    cfg.data.train_labels = Some("train-labels.idx".into());
    cfg.data.test_images = Some("test-images.idx".into());
    cfg.data.test_labels = Some("test-labels.idx".into());
    cfg.train.epochs = Some(5);
    rundir::write(&a.out, "desk.toml", cfg.to_toml())?;
    println!("wrote {} train and {} test images to {}", a.train, a.test, a.out.display());
    Ok(())
}
