use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use anyhow::{bail, Context};
use rowquant::assign::{AssignmentReport, RatioConfig};
use rowquant::checkpoint;
use rowquant::data::Dataset;
use rowquant::infer::IntegerModel;
use rowquant::model::{Arch, Model};
use rowquant::qat::{self, LrSchedule, QuantizedModel, TrainConfig};
use rowquant_hw::{fit, report, DeviceProfile, ModelShape};

use crate::config::write_resolved;
use crate::svg::{line_chart, Series};
use crate::{dataset, usage, CostArgs, Engine, EvalArgs, ExportArgs, FitProfilesArgs, QuantizeArgs};
use crate::{SweepArgs, SynthDigitsArgs, TrainBaselineArgs, TrainOpts, WithW8};

pub const BASELINE_LR: f64 = 0.05;
pub const QAT_LR: f64 = 0.01;
const EVAL_BATCH: usize = 256;

fn train_config(o: &TrainOpts, seed: u64, interval: usize, default_lr: f64) -> anyhow::Result<TrainConfig> {
    let lr_schedule: LrSchedule = o.lr_schedule.parse().map_err(|e: rowquant::Error| usage(e.to_string()))?;
    let cfg = TrainConfig {
        epochs: o.epochs,
        batch_size: o.batch_size,
        learning_rate: o.lr.unwrap_or(default_lr),
        lr_schedule,
        seed,
        reassign_interval: interval,
        weight_decay: o.weight_decay,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn parse_ratio(s: &str) -> anyhow::Result<RatioConfig> {
    s.parse().map_err(|e: rowquant::Error| usage(e.to_string()))
}

/// Accepts `path`, `path.manifest` or `path.tensors`.
fn checkpoint_prefix(p: &Path) -> PathBuf {
    match p.extension().and_then(|e| e.to_str()) {
        Some("manifest") | Some("tensors") => p.with_extension(""),
        _ => p.to_path_buf(),
    }
}

fn load_checkpoint(p: &Path) -> anyhow::Result<QuantizedModel> {
    let prefix = checkpoint_prefix(p);
    let manifest = checkpoint::manifest_path(&prefix);
    if !manifest.exists() {
        return Err(usage(format!("checkpoint not found: {}", manifest.display())));
    }
    checkpoint::load(&prefix).with_context(|| format!("loading {}", prefix.display()))
}

fn progress() -> Option<std::io::Stderr> {
    Some(std::io::stderr())
}

pub fn train_baseline(a: &TrainBaselineArgs) -> anyhow::Result<()> {
    let seed = a.common.seed;
    let arch: Arch = a.arch.parse().map_err(|e: rowquant::Error| usage(e.to_string()))?;
    let cfg = train_config(&a.train, seed, rowquant::assign::DEFAULT_REASSIGN_INTERVAL, BASELINE_LR)?;
    let (train, val) = dataset::train_and_val(&a.data, a.val_data.as_deref())?;
    let classes = train.class_count.max(val.as_ref().map_or(0, |v| v.class_count));
    let model = Model::new(arch, &train.shape, classes, seed)
        .with_context(|| format!("{} does not fit data of shape {:?}", a.arch, train.shape))?;
    write_resolved(&a.out, "train-baseline", a)?;
    let (qm, metrics) = qat::train(QuantizedModel::float(model, seed), &train, val.as_ref(), &cfg, &mut progress())?;
    checkpoint::save(&qm, &a.out.join("model"))?;
    qat::write_metrics(&a.out.join("metrics.csv"), &metrics)?;
    let last = metrics.last().expect("at least one epoch");
    println!("train_acc {:.4}", last.train_acc);
    if let Some(v) = last.val_acc {
        println!("val_acc {v:.4}");
    }
    println!("checkpoint {}", a.out.join("model").display());
    Ok(())
}

fn write_assignment(dir: &Path, report: &AssignmentReport) -> anyhow::Result<()> {
    let mut text = String::from("layer,rows,pot4,fixed4,fixed8\n");
    for (i, l) in report.assignment.layers.iter().enumerate() {
        let c = l.counts();
        text.push_str(&format!("{i},{},{},{},{}\n", c.total(), c.pot4, c.fixed4, c.fixed8));
    }
    fs::write(dir.join("assignment.csv"), text)?;
    let mut h = String::from("layer,row,lambda,iterations,converged\n");
    for e in report.hessians.iter().flatten() {
        h.push_str(&format!("{},{},{},{},{}\n", e.layer, e.row, e.lambda, e.iterations, e.converged));
    }
    fs::write(dir.join("hessians.csv"), h)?;
    Ok(())
}

fn write_eval(dir: &Path, top1: f64, top5: Option<f64>) -> anyhow::Result<()> {
    let mut t = format!("top1 = {top1:?}\n");
    if let Some(v) = top5 {
        t.push_str(&format!("top5 = {v:?}\n"));
    }
    fs::write(dir.join("eval.toml"), t)?;
    Ok(())
}

/// Returns top-1 on the evaluation set when there is one.
pub fn quantize(a: &QuantizeArgs) -> anyhow::Result<Option<f64>> {
    let seed = a.common.seed;
    let ratio = parse_ratio(&a.ratio)?;
    let cfg = train_config(&a.train, seed, a.reassign_interval, QAT_LR)?;
    let base = load_checkpoint(&a.checkpoint)?;
    let (train, val) = dataset::train_and_val(&a.data, a.val_data.as_deref())?;
    write_resolved(&a.out, "quantize", a)?;
    let (qm, report) = qat::prepare(&base, ratio, &train, seed)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    write_assignment(&a.out, &report)?;
    let (qm, metrics) = qat::train(qm, &train, val.as_ref(), &cfg, &mut progress())?;
    checkpoint::save(&qm, &a.out.join("model"))?;
    qat::write_metrics(&a.out.join("metrics.csv"), &metrics)?;
    for (i, l) in qm.assignment.as_ref().expect("quantized").layers.iter().enumerate() {
        let c = l.counts();
        println!("layer {i}: {} PoT-W4A4, {} Fixed-W4A4, {} Fixed-W8A4", c.pot4, c.fixed4, c.fixed8);
    }
    let Some(val) = val.filter(|v| !v.is_empty()) else {
        return Ok(None);
    };
    let (top1, top5) = accuracies(&qm, &val, Engine::Float)?;
    write_eval(&a.out, top1, top5)?;
    println!("top1 {top1:.4}");
    Ok(Some(top1))
}

fn accuracies(qm: &QuantizedModel, ds: &Dataset, engine: Engine) -> anyhow::Result<(f64, Option<f64>)> {
    if ds.is_empty() {
        bail!("evaluation set is empty");
    }
    if ds.shape != qm.model.input_shape {
        bail!("data shape {:?} does not match model input {:?}", ds.shape, qm.model.input_shape);
    }
    let logits = match engine {
        Engine::Float => qm.predict(ds)?,
        Engine::Integer => {
            let im = IntegerModel::compile(qm)?;
            let idx: Vec<usize> = (0..ds.len()).collect();
            let mut all = Vec::with_capacity(ds.len() * qm.model.classes);
            for chunk in idx.chunks(EVAL_BATCH) {
                let (x, _) = ds.batch(chunk)?;
                all.extend_from_slice(im.logits(&x)?.data());
            }
            rowquant::Tensor::matrix(ds.len(), qm.model.classes, all)?
        }
    };
    let top1 = qat::top_k_accuracy(&logits, &ds.labels, 1);
    let top5 = (qm.model.classes >= 5).then(|| qat::top_k_accuracy(&logits, &ds.labels, 5));
    Ok((top1, top5))
}

pub fn eval(a: &EvalArgs) -> anyhow::Result<()> {
    let qm = load_checkpoint(&a.checkpoint)?;
    let ds = dataset::resolve(&a.data)?.eval();
    let (top1, top5) = accuracies(&qm, &ds, a.engine)?;
    println!("samples {}", ds.len());
    println!("top1 {top1:.4}");
    if let Some(v) = top5 {
        println!("top5 {v:.4}");
    }
    if let Some(out) = &a.out {
        write_resolved(out, "eval", a)?;
        write_eval(out, top1, top5)?;
    }
    Ok(())
}

fn sweep_runs(a: &SweepArgs) -> anyhow::Result<Vec<(u32, u32)>> {
    let mut pots = Vec::new();
    for p in a.pot_ratios.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let v: u32 = p.parse().map_err(|_| usage(format!("bad PoT ratio `{p}`")))?;
        pots.push(v);
    }
    if pots.is_empty() {
        return Err(usage("--pot-ratios is empty"));
    }
    let w8: &[u32] = match a.with_w8 {
        WithW8::True => &[5],
        WithW8::False => &[0],
        WithW8::Both => &[0, 5],
    };
    let mut runs = Vec::new();
    for &c in w8 {
        for &p in &pots {
            if p + c > 100 {
                return Err(usage(format!("PoT ratio {p} leaves no room for {c}% Fixed-W8A4")));
            }
            runs.push((p, c));
        }
    }
    Ok(runs)
}

fn run_dir(out: &Path, pot: u32, fixed8: u32) -> PathBuf {
    out.join("runs").join(format!("pot{pot}_w8-{fixed8}"))
}

fn quantize_args(a: &SweepArgs, pot: u32, fixed8: u32) -> QuantizeArgs {
    QuantizeArgs {
        common: crate::Common {
            config: None,
            seed: a.common.seed,
        },
        checkpoint: a.checkpoint.clone(),
        data: a.data.clone(),
        val_data: a.val_data.clone(),
        ratio: format!("{pot}:{}:{fixed8}", 100 - pot - fixed8),
        reassign_interval: a.reassign_interval,
        train: TrainOpts {
            epochs: a.train.epochs,
            lr: a.train.lr,
            batch_size: a.train.batch_size,
            lr_schedule: a.train.lr_schedule.clone(),
            weight_decay: a.train.weight_decay,
        },
        out: run_dir(&a.out, pot, fixed8),
    }
}

fn read_top1(dir: &Path) -> anyhow::Result<f64> {
    let text = fs::read_to_string(dir.join("eval.toml")).with_context(|| format!("no result in {}", dir.display()))?;
    let t: toml::Table = text.parse()?;
    t.get("top1")
        .and_then(|v| v.as_float())
        .ok_or_else(|| anyhow::anyhow!("{}: eval.toml lacks top1", dir.display()))
}

pub fn sweep(a: &SweepArgs) -> anyhow::Result<()> {
    let runs = sweep_runs(a)?;
    if a.jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    let base = load_checkpoint(&a.checkpoint)?;
    let (_, val) = dataset::train_and_val(&a.data, a.val_data.as_deref())?;
    let val = val
        .filter(|v| !v.is_empty())
        .ok_or_else(|| usage("sweep needs an evaluation set (IDX t10k files, a synthetic spec or --val-data)"))?;
    write_resolved(&a.out, "sweep", a)?;
    let (baseline, _) = accuracies(&base, &val, Engine::Float)?;

    if a.jobs == 1 {
        for &(p, c) in &runs {
            eprintln!("sweep: ratio {p}:{}:{c}", 100 - p - c);
            quantize(&quantize_args(a, p, c))?;
        }
    } else {
        let exe = std::env::current_exe()?;
        for batch in runs.chunks(a.jobs) {
            let mut children = Vec::new();
            for &(p, c) in batch {
                let q = quantize_args(a, p, c);
                let mut cmd = Process::new(&exe);
                cmd.arg("quantize")
                    .arg("--seed")
                    .arg(q.common.seed.to_string())
                    .arg("--checkpoint")
                    .arg(&q.checkpoint)
                    .arg("--data")
                    .arg(&q.data)
                    .arg("--ratio")
                    .arg(&q.ratio)
                    .arg("--reassign-interval")
                    .arg(q.reassign_interval.to_string())
                    .arg("--epochs")
                    .arg(q.train.epochs.to_string())
                    .arg("--batch-size")
                    .arg(q.train.batch_size.to_string())
                    .arg("--lr-schedule")
                    .arg(&q.train.lr_schedule)
                    .arg("--weight-decay")
                    .arg(q.train.weight_decay.to_string())
                    .arg("--out")
                    .arg(&q.out);
                if let Some(v) = &q.val_data {
                    cmd.arg("--val-data").arg(v);
                }
                if let Some(lr) = q.train.lr {
                    cmd.arg("--lr").arg(lr.to_string());
                }
                fs::create_dir_all(&q.out)?;
                cmd.stdout(fs::File::create(q.out.join("stdout.log"))?);
                cmd.stderr(fs::File::create(q.out.join("stderr.log"))?);
                children.push((q.ratio.clone(), cmd.spawn()?));
            }
            for (ratio, mut child) in children {
                if !child.wait()?.success() {
                    bail!("sweep run {ratio} failed");
                }
            }
        }
    }

    let mut csv = String::from("pot_ratio,fixed8_ratio,ratio,top1,baseline_top1,drop\n");
    let mut series: Vec<Series> = Vec::new();
    for &(p, c) in &runs {
        let top1 = read_top1(&run_dir(&a.out, p, c))?;
        csv.push_str(&format!("{p},{c},{p}:{}:{c},{top1},{baseline},{}\n", 100 - p - c, baseline - top1));
        let label = if c > 0 { format!("with {c}% Fixed-W8A4") } else { "without Fixed-W8A4".into() };
        match series.iter_mut().find(|s| s.label == label) {
            Some(s) => s.points.push((p as f64, 100.0 * top1)),
            None => series.push(Series {
                label,
                color: if c > 0 { "#c0392b" } else { "#2471a3" },
                points: vec![(p as f64, 100.0 * top1)],
            }),
        }
    }
    for s in &mut series {
        s.points.sort_by(|x, y| x.0.total_cmp(&y.0));
    }
    fs::write(a.out.join("sweep.csv"), &csv)?;
    let svg = line_chart(
        "Accuracy vs PoT-W4A4 ratio",
        &series,
        Some(("float baseline", 100.0 * baseline)),
    );
    fs::write(a.out.join("sweep.svg"), svg)?;
    print!("{csv}");
    Ok(())
}

fn load_profile(arg: &str) -> anyhow::Result<DeviceProfile> {
    let path = Path::new(arg);
    if path.exists() {
        return DeviceProfile::load(path).with_context(|| format!("reading profile {}", path.display()));
    }
    DeviceProfile::builtin(arg)
        .ok_or_else(|| usage(format!("device profile not found: {arg} (file path, xc7z020 or xc7z045)")))
}

pub fn cost(a: &CostArgs) -> anyhow::Result<()> {
    let profile = load_profile(&a.device_profile)?;
    let (shape, ckpt_ratio) = match (&a.checkpoint, &a.shape) {
        (Some(c), _) => {
            let qm = load_checkpoint(c)?;
            (ModelShape::from_model(&qm.model), qm.ratio)
        }
        (None, name) => {
            let name = name.as_deref().unwrap_or("resnet18");
            let shape = ModelShape::builtin(name).ok_or_else(|| usage(format!("unknown shape `{name}` (resnet18)")))?;
            (shape, None)
        }
    };
    let ratio = match &a.ratio {
        Some(r) => parse_ratio(r)?,
        None => ckpt_ratio.unwrap_or_default(),
    };
    let r = report(&shape, &ratio, &profile)?;
    print!("{r}");
    if let Some(out) = &a.out {
        write_resolved(out, "cost", a)?;
        fs::write(out.join("cost.csv"), format!("{}\n{}\n", rowquant_hw::CostReport::SUMMARY_HEADER, r.summary_csv_row()))?;
        fs::write(out.join("layers.csv"), r.layers_csv())?;
    }
    Ok(())
}

pub fn export(a: &ExportArgs) -> anyhow::Result<()> {
    let qm = load_checkpoint(&a.checkpoint)?;
    if !qm.is_quantized() {
        bail!("{} is a float checkpoint; quantize it first", a.checkpoint.display());
    }
    checkpoint::export(&qm, &a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

pub fn synth_digits(a: &SynthDigitsArgs) -> anyhow::Result<()> {
    if a.size < 8 {
        return Err(usage("--size must be at least 8"));
    }
    let style = rowquant::data::DigitStyle {
        noise: a.noise,
        jitter: a.jitter,
        flip: a.flip,
    };
    rowquant::data::write_digit_set(&a.out, a.train, a.test, a.size, style, a.common.seed)?;
    write_resolved(&a.out, "synth-digits", a)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

pub fn fit_profiles(a: &FitProfilesArgs) -> anyhow::Result<()> {
    fs::create_dir_all(&a.out)?;
    let shape = rowquant_hw::shapes::resnet18();
    for (name, luts, dsps) in [("XC7Z020", 53_200, 220), ("XC7Z045", 218_600, 900)] {
        let base = DeviceProfile::with_budget(name, luts, dsps);
        let r = fit::fit_profile(&base, &fit::points_for(name), &shape, a.seed, a.samples)?;
        let path = a.out.join(format!("{}.profile", name.to_ascii_lowercase()));
        r.profile.save(&path, &fit::header(&r, a.seed, a.samples))?;
        println!("{name}: loss {:.6} -> {}", r.loss, path.display());
        for x in &r.residuals {
            println!(
                "  {:<10} {:>8}  latency {:>6.1} ms (measured {:>5.1})  LUT {:>3.0}% ({:>3.0}%)  DSP {:>3.0}% ({:>3.0}%)",
                x.point.label,
                x.point.ratio().to_string(),
                x.latency_ms,
                x.point.latency_ms,
                x.lut_percent,
                x.point.lut_percent,
                x.dsp_percent,
                x.point.dsp_percent
            );
        }
    }
    Ok(())
}
