use std::path::{Path, PathBuf};
use std::time::Instant;

use prunekit::data::{Dataset, DatasetSource};
use prunekit::graph::{
    build_resnet34_imagenet, build_resnet_cifar, build_tiny_cnn, build_vgg16_cifar, count_flops, deserialize,
    flop_reduction, infer_shapes, FlopReport, ModelGraph,
};
use prunekit::ops::predictions;
use prunekit::pruning::{
    apply_plan, build_plan, mask_equivalent, LayerRatios, PlanDocument, PLAN_FORMAT_VERSION,
};
use prunekit::runtime::forward;
use prunekit::strategy::{
    compare_criteria, comparison_csv, flop_csv, history_csv, reduction_csv, sensitivity_csv, sensitivity_sweep,
    StageRates,
};
use prunekit::train::{train, TrainConfig};
use prunekit::{Error, Result};
use serde::Serialize;

use crate::args::*;
use crate::config::Config;
use crate::manifest::{file_checksum, Run, RunManifest, RUN_MANIFEST_FILE};

/// Runs `command` with a resolved config and writes its run manifest.
/// `out_dir` defaults to `out`, or to `replay/` next to a replayed manifest.
pub fn execute(command: &Command, config: &Config, out_dir: Option<PathBuf>, format: Format) -> Result<RunManifest> {
    if let Command::Replay(args) = command {
        let dir = out_dir.unwrap_or_else(|| args.manifest.parent().unwrap_or(Path::new(".")).join("replay"));
        return replay(args, dir);
    }
    let mut run = Run::new(out_dir.unwrap_or_else(|| PathBuf::from("out")), format)?;
    match command {
        Command::Train(a) => cmd_train(a, config, &mut run)?,
        Command::Prune(a) => cmd_prune(a, config, &mut run)?,
        Command::Flops(a) => cmd_flops(a, config, &mut run)?,
        Command::Sensitivity(a) => cmd_sensitivity(a, config, &mut run)?,
        Command::Eval(a) => cmd_eval(a, config, &mut run)?,
        Command::Compare(a) => cmd_compare(a, config, &mut run)?,
        Command::Replay(_) => unreachable!("handled above"),
    }
    run.finish(command, config)
}

pub fn build_arch(arch: Arch, config: &Config) -> Result<ModelGraph> {
    let seed = config.seed;
    let g = match arch {
        Arch::Tiny => build_tiny_cnn(&config.tiny, seed)?,
        Arch::Vgg16 => build_vgg16_cifar(seed),
        Arch::Resnet20 => build_resnet_cifar(20, seed)?,
        Arch::Resnet32 => build_resnet_cifar(32, seed)?,
        Arch::Resnet56 => build_resnet_cifar(56, seed)?,
        Arch::Resnet110 => build_resnet_cifar(110, seed)?,
        Arch::Resnet34 => build_resnet34_imagenet(seed)?,
    };
    infer_shapes(&g)
}

fn load_model(path: &Path, run: &mut Run) -> Result<ModelGraph> {
    run.model_input(path)?;
    infer_shapes(&deserialize(path)?)
}

const CIFAR_FILES: [&str; 6] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
    "test_batch.bin",
];

fn load_data(config: &Config, model: &ModelGraph, run: &mut Run) -> Result<Dataset> {
    if let DatasetSource::Cifar10 { path: Some(dir) } = &config.data {
        for f in CIFAR_FILES {
            let p = dir.join(f);
            if p.exists() {
                run.input(&p)?;
            }
        }
    }
    let data = run.phase("load_data", || config.data.load())?;
    let shape = data.train.image_shape();
    if shape != model.input_shape {
        return Err(Error::Config(format!(
            "dataset {} has {shape:?} images but model {} expects {:?}",
            data.name, model.name, model.input_shape
        )));
    }
    Ok(data)
}

fn cmd_train(a: &TrainArgs, config: &Config, run: &mut Run) -> Result<()> {
    let mut g = build_arch(a.arch, config)?;
    let cfg = TrainConfig {
        epochs: a.epochs.unwrap_or(config.train.epochs),
        ..config.train.clone()
    };
    if cfg.epochs > 0 {
        let data = load_data(config, &g, run)?;
        let history = run.phase("train", || train(&mut g, &data, &cfg))?;
        run.table("history", || history_csv(&history), &history)?;
        if let (Some(last), Some(best)) = (history.final_val_accuracy(), history.best_val_accuracy()) {
            println!("trained {} for {} epochs: final accuracy {last:.4}, best {best:.4}", g.name, cfg.epochs);
        }
    }
    let path = run.model(&g, "model")?;
    println!("model written to {}", path.display());
    Ok(())
}

fn prune_ratios(a: &PruneArgs, config: &Config, g: &ModelGraph) -> Result<LayerRatios> {
    let rates = match &a.stage_rates {
        Some(p) => Some(StageRates {
            p: p.clone(),
            skip: a.skip.iter().cloned().collect(),
            include_shortcuts: a.include_shortcuts,
        }),
        None => config.prune.stage_rates.clone().map(|mut r| {
            r.skip.extend(a.skip.iter().cloned());
            r.include_shortcuts |= a.include_shortcuts;
            r
        }),
    };
    let mut ratios = match rates {
        Some(r) => r.expand(g)?,
        None => LayerRatios::new(),
    };
    ratios.extend(config.prune.ratios.clone());
    ratios.extend(a.ratios.iter().cloned());
    Ok(ratios)
}

fn cmd_prune(a: &PruneArgs, config: &Config, run: &mut Run) -> Result<()> {
    let g = load_model(&a.model, run)?;
    let ratios = prune_ratios(a, config, &g)?;
    let criterion = config.criterion(a.criterion.as_deref().unwrap_or(&config.prune.criterion))?;
    let strategy = a.strategy.unwrap_or(config.prune.strategy);
    let retrain = config.retrain_for(a.retrain_epochs.unwrap_or(config.prune.retrain_epochs));
    let data = if criterion.needs_data() || retrain.is_some() {
        Some(load_data(config, &g, run)?)
    } else {
        None
    };
    let plan = run.phase("plan", || build_plan(&g, &ratios, criterion, strategy, data.as_ref().map(|d| &d.train)))?;
    let mut pruned = apply_plan(&g, &plan)?;
    if let (Some(cfg), Some(data)) = (&retrain, &data) {
        let history = run.phase("retrain", || train(&mut pruned, data, cfg))?;
        run.table("history", || history_csv(&history), &history)?;
    }
    let (before, after) = (count_flops(&g)?, count_flops(&pruned)?);
    let reduction = flop_reduction(&before, &after)?;
    run.table("reduction", || reduction_csv(&reduction, &before, &after), &reduction)?;
    if a.emit_masked {
        run.model(&mask_equivalent(&g, &plan)?, "masked")?;
    }
    let doc = PlanDocument {
        format_version: PLAN_FORMAT_VERSION,
        model: g.name.clone(),
        criterion,
        strategy,
        ratios,
        plan,
    };
    run.write("plan.json", &doc.to_json())?;
    run.model(&pruned, "pruned")?;
    println!(
        "pruned {} filters from {} layers: {:.1}% fewer FLOPs, {:.1}% fewer parameters",
        doc.plan.m.values().sum::<usize>(),
        doc.plan.m.len(),
        100.0 * reduction.total_flops_reduction,
        100.0 * reduction.total_params_reduction
    );
    Ok(())
}

/// `1.8E+06` style, as in published FLOP tables.
pub fn sci(v: u64) -> String {
    let s = format!("{:.1E}", v as f64);
    match s.split_once('E') {
        Some((m, e)) => {
            let e: i32 = e.parse().expect("float exponent");
            format!("{m}E{}{:02}", if e < 0 { '-' } else { '+' }, e.abs())
        }
        None => s,
    }
}

fn print_flops(report: &FlopReport, reduction: Option<&prunekit::graph::ReductionReport>) {
    println!("{:<14} {:<8} {:>6} {:>9} {:>9} {:>9}{}", "layer", "kind", "maps", "size", "flops", "params", if reduction.is_some() { "     flop%" } else { "" });
    for (i, r) in report.rows.iter().enumerate() {
        let pct = reduction.map(|red| format!(" {:>8.1}%", 100.0 * red.rows[i].flops_reduction)).unwrap_or_default();
        println!(
            "{:<14} {:<8} {:>6} {:>9} {:>9} {:>9}{pct}",
            r.layer,
            r.kind.to_string(),
            r.out_channels,
            format!("{}x{}", r.out_spatial.0, r.out_spatial.1),
            sci(r.flops),
            sci(r.params)
        );
    }
    let pct = reduction.map(|red| format!(" {:>8.1}%", 100.0 * red.total_flops_reduction)).unwrap_or_default();
    println!("{:<14} {:<8} {:>6} {:>9} {:>9} {:>9}{pct}", "total", "", "", "", sci(report.total_flops), sci(report.total_params));
}

fn cmd_flops(a: &FlopsArgs, config: &Config, run: &mut Run) -> Result<()> {
    let g = match (&a.model, a.arch) {
        (Some(path), _) => load_model(path, run)?,
        (None, Some(arch)) => build_arch(arch, config)?,
        (None, None) => return Err(Error::Config("flops needs --model or --arch".into())),
    };
    let report = count_flops(&g)?;
    run.table("flops", || flop_csv(&report), &report)?;
    let reduction = match &a.baseline {
        Some(path) => {
            let base = count_flops(&load_model(path, run)?)?;
            let red = flop_reduction(&base, &report)?;
            run.table("reduction", || reduction_csv(&red, &base, &report), &red)?;
            Some(red)
        }
        None => None,
    };
    print_flops(&report, reduction.as_ref());
    Ok(())
}

fn cmd_sensitivity(a: &SweepArgs, config: &Config, run: &mut Run) -> Result<()> {
    let s = &config.sensitivity;
    let g = load_model(&a.model, run)?;
    let data = load_data(config, &g, run)?;
    let criterion = config.criterion(a.criterion.as_deref().unwrap_or(&s.criterion))?;
    let ratios = a.ratios.clone().unwrap_or_else(|| s.ratios.clone());
    let layers = a.layers.clone().or_else(|| s.layers.clone());
    let retrain = config.retrain_for(a.retrain_epochs.unwrap_or(s.retrain_epochs));
    let report = run.phase("sweep", || {
        sensitivity_sweep(&g, layers.as_deref(), criterion, &ratios, &data, retrain.as_ref())
    })?;
    run.table("sensitivity", || sensitivity_csv(&report), &report)?;
    println!(
        "{} cells swept with {criterion}; baseline accuracy {:.4}",
        report.rows.len(),
        report.baseline_accuracy
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalRow {
    model: String,
    samples: usize,
    batch_size: usize,
    accuracy: f64,
}

fn cmd_eval(a: &EvalArgs, config: &Config, run: &mut Run) -> Result<()> {
    let g = load_model(&a.model, run)?;
    let data = load_data(config, &g, run)?;
    let batch_size = a.batch_size.unwrap_or(config.eval.batch_size);
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let idx: Vec<usize> = (0..data.test.len()).collect();
    let (mut correct, mut elapsed, mut batches) = (0usize, 0.0f64, 0usize);
    for chunk in idx.chunks(batch_size) {
        let (x, y) = data.test.gather(chunk);
        let t = Instant::now();
        let logits = forward(&g, &x)?;
        elapsed += t.elapsed().as_secs_f64();
        batches += 1;
        correct += predictions(&logits).iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    let row = EvalRow {
        model: g.name.clone(),
        samples: data.test.len(),
        batch_size,
        accuracy: correct as f64 / data.test.len().max(1) as f64,
    };
    let mean = elapsed / batches.max(1) as f64;
    run.note_seconds("inference_per_batch", mean);
    run.table(
        "eval",
        || {
            format!(
                "model,samples,batch_size,accuracy\n{},{},{},{}\n",
                row.model, row.samples, row.batch_size, row.accuracy
            )
        },
        &row,
    )?;
    println!("accuracy {:.4} on {} samples; {:.3} ms per batch of {batch_size}", row.accuracy, row.samples, 1e3 * mean);
    Ok(())
}

fn cmd_compare(a: &CompareArgs, config: &Config, run: &mut Run) -> Result<()> {
    let c = &config.compare;
    let g = load_model(&a.model, run)?;
    let data = load_data(config, &g, run)?;
    let criteria = a
        .criteria
        .clone()
        .unwrap_or_else(|| c.criteria.clone())
        .iter()
        .map(|n| config.criterion(n))
        .collect::<Result<Vec<_>>>()?;
    let ratios = a.ratios.clone().unwrap_or_else(|| c.ratios.clone());
    let layers = a.layers.clone().or_else(|| c.layers.clone());
    let seeds = a.random_seeds.unwrap_or(c.random_seeds);
    let report = run.phase("compare", || compare_criteria(&g, layers.as_deref(), &criteria, &ratios, &data, seeds))?;
    run.table("comparison", || comparison_csv(&report), &report)?;
    println!("{} rows over {} criteria", report.rows.len(), criteria.len());
    Ok(())
}

fn replay(a: &ReplayArgs, out_dir: PathBuf) -> Result<RunManifest> {
    let recorded = RunManifest::load(&a.manifest)?;
    if matches!(recorded.command, Command::Replay(_)) {
        return Err(Error::Config("a replay manifest cannot itself be replayed".into()));
    }
    for input in &recorded.inputs {
        let now = file_checksum(&input.path)?;
        if now != input.checksum {
            return Err(Error::Validation(format!(
                "input {} changed since the recorded run (checksum {now}, recorded {})",
                input.path.display(),
                input.checksum
            )));
        }
    }
    let same = |p: &Path| std::fs::canonicalize(p).ok();
    if out_dir.exists() && same(&out_dir.join(RUN_MANIFEST_FILE)) == same(&a.manifest) {
        return Err(Error::Config("replay needs an output directory other than the recorded run's".into()));
    }
    let fresh = execute(&recorded.command, &recorded.config, Some(out_dir), recorded.format)?;
    let mismatches: Vec<String> = recorded
        .outputs
        .iter()
        .filter_map(|o| match fresh.outputs.iter().find(|f| f.path == o.path) {
            Some(f) if f.checksum == o.checksum => None,
            Some(f) => Some(format!("{}: {} vs recorded {}", o.path.display(), f.checksum, o.checksum)),
            None => Some(format!("{}: not produced", o.path.display())),
        })
        .chain(
            fresh
                .outputs
                .iter()
                .filter(|f| !recorded.outputs.iter().any(|o| o.path == f.path))
                .map(|f| format!("{}: not in the recorded run", f.path.display())),
        )
        .collect();
    if !mismatches.is_empty() {
        return Err(Error::Invariant(format!("replay diverged: {}", mismatches.join("; "))));
    }
    println!("replayed {}: {} artifacts identical", recorded.command.name(), fresh.outputs.len());
    Ok(fresh)
}
