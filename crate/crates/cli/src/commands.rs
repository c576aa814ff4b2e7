use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::json;

use scp_core::data::{
    gen_synthetic, load_dataset, load_feature_maps, load_predictions_csv, save_dataset, AttributeMode, Dataset,
};
use scp_core::fairness::{build_confusion, FateScores, MetricsSummary};
use scp_core::nn::{
    evaluate, load_checkpoint, remove_channels, save_checkpoint, train as fit, Architecture, Checkpoint, ToyCnn,
    TrainConfig, TrainingMeta,
};
use scp_core::recipe::{assess, prune_iteration, run_recipe as run, sweep, RecipeOutcome, SweepAxis};
use scp_core::snnl::{scores_from_feature_maps, snnl_fair_scores};
use scp_core::{Error, FairnessReport, RecipeConfig, RecipeTrace, SyntheticConfig};

use crate::manifest::{beside, RunManifest};
use crate::{
    EvalArgs, GenDataArgs, Mode, PruneArgs, PruneFlags, RecipeArgs, ReportArgs, ScoreArgs, SeedArg, SplitArg,
    TrainArgs, UsageError,
};

pub const SEED_ENV: &str = "SCP_SEED";

fn seed(arg: &SeedArg) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => {
            v.trim().parse().map_err(|_| UsageError(format!("{SEED_ENV}=`{v}` is not a non-negative integer")).into())
        }
        Err(_) => Ok(arg.seed),
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn split_path(dir: &Path, split: SplitArg) -> PathBuf {
    dir.join(match split {
        SplitArg::Train => "train.sds",
        SplitArg::Eval => "eval.sds",
    })
}

fn load_split(dir: &Path, split: SplitArg) -> Result<Dataset> {
    let path = split_path(dir, split);
    load_dataset(&path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_model(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn read_metrics(path: &Path) -> Result<MetricsSummary> {
    let file = File::open(path).map_err(Error::from).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::Header(format!("metrics file: {e}")))
        .with_context(|| format!("reading {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        num_samples: a.n,
        num_eval: a.n_eval,
        num_classes: a.classes as usize,
        image: [1, a.size, a.size],
        spurious_strength: a.rho,
        group_imbalance: a.imbalance,
        noise_std: a.noise,
        class_amplitude: a.amplitude,
        attribute_offset: a.offset,
        mode: match a.mode {
            Mode::Explicit => AttributeMode::Explicit,
            Mode::Implicit => AttributeMode::Implicit,
        },
        seed: seed(&a.seed)?,
    };
    let (train_set, eval_set) = gen_synthetic(&cfg)?;
    create_dir(&a.out)?;
    let mut m = RunManifest::new("gen-data", cfg.seed, &cfg)?;
    for (name, data) in [("train", &train_set), ("eval", &eval_set)] {
        let path = a.out.join(format!("{name}.sds"));
        save_dataset(&path, data)?;
        m.output(name, &path);
    }
    m.results(json!({
        "train_samples": train_set.len(),
        "eval_samples": eval_set.len(),
        "train_group1": train_set.sensitive.iter().filter(|&&c| c == 1).count(),
    }))?;
    m.write(&a.out.join("gen-data.manifest.json"))?;
    println!("wrote {} train / {} eval samples to {}", train_set.len(), eval_set.len(), a.out.display());
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let seed = seed(&a.seed)?;
    let train_set = load_split(&a.data, SplitArg::Train)?;
    let eval_set = load_split(&a.data, SplitArg::Eval)?;
    let s = train_set.images.shape();
    let arch = Architecture::toy([s[1], s[2], s[3]], train_set.num_classes);
    let mut model = ToyCnn::init(&arch, seed)?;
    let tc = TrainConfig { epochs: a.epochs, lr: a.lr, batch_size: a.batch as usize, seed };
    let losses = fit(&mut model, &train_set, &tc)?;
    let report = assess(&model, &eval_set)?;
    let meta = TrainingMeta {
        seed: Some(seed),
        epochs: Some(a.epochs),
        hyperparameters: [("lr".to_string(), a.lr), ("batch_size".to_string(), tc.batch_size as f64)].into(),
        notes: Default::default(),
    };
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_checkpoint(&a.out, &Checkpoint { model, meta })?;
    let mut m = RunManifest::new("train", seed, json!({ "architecture": arch, "train": tc }))?.input("data", &a.data);
    m.output("checkpoint", &a.out);
    let summary = report.summary();
    m.results(json!({ "epoch_losses": losses, "eval": summary }))?;
    m.write(&beside(&a.out))?;
    println!(
        "trained {} epochs: final loss {:.4}, eval F1 {:.4}, Eodd {:.4}",
        a.epochs,
        losses.last().copied().unwrap_or(f64::NAN),
        summary.f1,
        report.gaps.eodd
    );
    Ok(())
}

pub fn score_channels(a: ScoreArgs) -> Result<()> {
    let seed = seed(&a.seed)?;
    let batch = a.batch as usize;
    let (table, m) = match (&a.model, &a.fmap) {
        (Some(model_path), None) => {
            let data_dir = a.data.as_ref().ok_or_else(|| usage("--model needs --data"))?;
            let ckpt = load_model(model_path)?;
            let data = load_split(data_dir, a.split)?;
            let layer = a.layer.unwrap_or(ckpt.model.tap_layer);
            let table = snnl_fair_scores(&ckpt.model, &data, layer, a.temp, batch, seed)?;
            let cfg = json!({ "source": "model", "layer": layer, "split": a.split, "temperature": a.temp, "batch_size": batch });
            let m = RunManifest::new("score-channels", seed, cfg)?.input("model", model_path).input("data", data_dir);
            (table, m)
        }
        (None, Some(fmap)) => {
            if a.layer.is_some() || a.data.is_some() {
                return Err(usage("--layer and --data apply only with --model"));
            }
            let fm = load_feature_maps(fmap).with_context(|| format!("loading {}", fmap.display()))?;
            let table = scores_from_feature_maps(&fm, a.temp, batch, seed)?;
            let cfg = json!({ "source": "fmap", "temperature": a.temp, "batch_size": batch });
            (table, RunManifest::new("score-channels", seed, cfg)?.input("fmap", fmap))
        }
        _ => return Err(usage("exactly one of --model or --fmap is required")),
    };
    match &a.out {
        Some(out) => {
            table.write_csv(create(out)?)?;
            let mut m = m;
            m.output("scores", out);
            m.results(json!({ "n_batches": table.n_batches, "mean_score": table.mean() }))?;
            m.write(&beside(out))?;
            eprintln!("scored {} channels over {} batches", table.len(), table.n_batches);
        }
        None => table.write_csv(std::io::stdout().lock())?,
    }
    Ok(())
}

fn recipe_config(f: &PruneFlags, seed: u64) -> RecipeConfig {
    RecipeConfig {
        prune_ratio: f.prc,
        layer: f.layer,
        temperature: f.temp,
        finetune_epochs: f.finetune_epochs,
        finetune_lr: f.finetune_lr,
        finetune_batch: f.finetune_batch as usize,
        score_batch: f.score_batch as usize,
        seed,
        ..RecipeConfig::default()
    }
}

pub fn prune(a: PruneArgs) -> Result<()> {
    let seed = seed(&a.seed)?;
    let cfg = recipe_config(&a.flags, seed);
    let ckpt = load_model(&a.model)?;
    let train_set = load_split(&a.data, SplitArg::Train)?;
    let eval_set = load_split(&a.data, SplitArg::Eval)?;
    let k = ckpt.model.channels(cfg.layer)?;
    let ids: Vec<usize> = (0..k).collect();
    let (model, pruned, after) = match &a.channels {
        Some(channels) => {
            let mut model = remove_channels(&ckpt.model, cfg.layer, channels)?;
            if cfg.finetune_epochs > 0 {
                let tc = TrainConfig {
                    epochs: cfg.finetune_epochs,
                    lr: cfg.finetune_lr,
                    batch_size: cfg.finetune_batch,
                    seed: seed.wrapping_add(1),
                };
                fit(&mut model, &train_set, &tc)?;
            }
            let mut removed = channels.clone();
            removed.sort_unstable();
            removed.dedup();
            let report = assess(&model, &eval_set)?;
            (model, removed, serde_json::to_value(report.summary())?)
        }
        None => {
            let out = prune_iteration(&ckpt.model, &ids, &train_set, &eval_set, &cfg, 1)?;
            (out.model, out.record.pruned_local, serde_json::to_value(&out.record.after)?)
        }
    };
    let before = assess(&ckpt.model, &eval_set)?.summary();
    let mut meta = ckpt.meta.clone();
    meta.notes.insert("pruned".into(), format!("layer {}: {:?}", cfg.layer, pruned));
    save_checkpoint(&a.out, &Checkpoint { model: model.clone(), meta })?;
    let mut m = RunManifest::new("prune", seed, json!({ "recipe": cfg, "explicit_channels": a.channels }))?
        .input("model", &a.model)
        .input("data", &a.data);
    m.output("checkpoint", &a.out);
    m.results(json!({ "pruned_channels": pruned, "channels_left": model.channels(cfg.layer)?, "before": before, "after": after }))?;
    m.write(&beside(&a.out))?;
    println!("layer {}: removed {:?}, {} channels left", cfg.layer, pruned, model.channels(cfg.layer)?);
    Ok(())
}

fn parse_sweep(spec: &str) -> Result<SweepAxis> {
    let (axis, values) =
        spec.split_once('=').ok_or_else(|| usage(format!("--sweep `{spec}`: expected prc=... or layer=...")))?;
    let items: Vec<&str> = values.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return Err(usage(format!("--sweep `{spec}` lists no values")));
    }
    match axis.trim() {
        "prc" => items
            .iter()
            .map(|s| match s.parse::<f64>() {
                Ok(p) if p > 0.0 && p < 100.0 => Ok(p / 100.0),
                _ => Err(usage(format!("--sweep prc value `{s}` must be a percentage in (0, 100)"))),
            })
            .collect::<Result<_>>()
            .map(SweepAxis::PruneRatio),
        "layer" => items
            .iter()
            .map(|s| s.parse::<usize>().map_err(|_| usage(format!("--sweep layer value `{s}` is not a layer index"))))
            .collect::<Result<_>>()
            .map(SweepAxis::Layer),
        other => Err(usage(format!("--sweep axis `{other}` is not prc or layer"))),
    }
}

fn write_outcome(
    dir: &Path,
    outcome: &RecipeOutcome,
    meta: &TrainingMeta,
    m: &mut RunManifest,
    prefix: &str,
) -> Result<()> {
    create_dir(dir)?;
    let model_path = dir.join("model.scp");
    let trace_path = dir.join("trace.jsonl");
    let csv_path = dir.join("ablation.csv");
    let mut meta = meta.clone();
    meta.notes.insert("surviving_channels".into(), format!("{:?}", outcome.trace.surviving_channels));
    save_checkpoint(&model_path, &Checkpoint { model: outcome.model.clone(), meta })?;
    outcome.trace.write_jsonl(create(&trace_path)?)?;
    outcome.trace.write_ablation_csv(create(&csv_path)?)?;
    m.output(&format!("{prefix}model"), &model_path);
    m.output(&format!("{prefix}trace"), &trace_path);
    m.output(&format!("{prefix}ablation"), &csv_path);
    Ok(())
}

fn outcome_summary(t: &RecipeTrace) -> serde_json::Value {
    let end = t.returned();
    json!({
        "stop_reason": t.stop_reason,
        "iterations": t.iterations.len(),
        "returned_iteration": t.returned_iteration,
        "channels": end.channels,
        "f1_before": t.initial.f1_avg,
        "f1_after": end.f1_avg,
        "eodd_before": t.initial.eodd,
        "eodd_after": end.eodd,
        "mean_score_before": t.initial.mean_score,
        "mean_score_after": end.mean_score,
    })
}

fn describe(label: &str, t: &RecipeTrace) {
    let end = t.returned();
    println!(
        "{label}: {} after {} iteration(s); channels {} -> {}, F1 {:.4} -> {:.4}, Eodd {:.4} -> {:.4}, mean score {:.4} -> {:.4}",
        t.stop_reason,
        t.iterations.len(),
        t.initial.channels,
        end.channels,
        t.initial.f1_avg,
        end.f1_avg,
        t.initial.eodd,
        end.eodd,
        t.initial.mean_score,
        end.mean_score
    );
}

pub fn run_recipe(a: RecipeArgs) -> Result<()> {
    let seed = seed(&a.seed)?;
    let cfg = RecipeConfig {
        th_acc: a.th_acc,
        th_fair: a.th_fair,
        max_iters: a.max_iters as usize,
        run_to_max_iters: a.run_to_max_iters,
        ..recipe_config(&a.flags, seed)
    };
    let axis = a.sweep.as_deref().map(parse_sweep).transpose()?;
    let ckpt = load_model(&a.model)?;
    let train_set = load_split(&a.data, SplitArg::Train)?;
    let eval_set = load_split(&a.data, SplitArg::Eval)?;
    create_dir(&a.out)?;
    let mut m = RunManifest::new("run-recipe", seed, json!({ "recipe": cfg, "sweep": a.sweep }))?
        .input("model", &a.model)
        .input("data", &a.data);
    match axis {
        None => {
            let outcome = run(&ckpt.model, &train_set, &eval_set, &cfg)?;
            write_outcome(&a.out, &outcome, &ckpt.meta, &mut m, "")?;
            m.results(outcome_summary(&outcome.trace))?;
            describe("recipe", &outcome.trace);
        }
        Some(axis) => {
            let runs = sweep(&ckpt.model, &train_set, &eval_set, &cfg, &axis)?;
            let mut results = serde_json::Map::new();
            for r in &runs {
                let dir_name = r.label.replace('=', "_");
                write_outcome(&a.out.join(&dir_name), &r.outcome, &ckpt.meta, &mut m, &format!("{dir_name}/"))?;
                results.insert(r.label.clone(), outcome_summary(&r.outcome.trace));
                describe(&r.label, &r.outcome.trace);
            }
            m.results(results)?;
        }
    }
    m.write(&a.out.join("run-recipe.manifest.json"))?;
    Ok(())
}

fn print_summary(model: &MetricsSummary, fate: Option<&FateScores>) {
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    println!("{:<12} {:>8} {:>8} {:>8} {:>8}", "", "F1", "Eopp0", "Eopp1", "Eodd");
    println!(
        "{:<12} {:>8.4} {:>8} {:>8} {:>8}",
        model.name,
        model.f1,
        opt(model.eopp0),
        opt(model.eopp1),
        opt(model.eodd)
    );
    if let Some(f) = fate {
        println!("{:<12} {:>8} {:>8} {:>8} {:>8}", "FATE", "", opt(f.eopp0), opt(f.eopp1), opt(f.eodd));
        println!("FATE baseline: {} (lambda = {})", f.baseline, f.lambda);
    }
}

pub fn eval_fairness(a: EvalArgs) -> Result<()> {
    let baseline = a.baseline.as_deref().map(read_metrics).transpose()?;
    let mut m = RunManifest::new("eval-fairness", 0, json!({ "lambda": a.lambda, "name": a.name, "split": a.split }))?;
    if let Some(b) = &a.baseline {
        m = m.input("baseline", b);
    }
    let report = match (&a.preds, &a.model, &a.metrics) {
        (Some(preds), None, None) => {
            let p = load_predictions_csv(preds).with_context(|| format!("loading {}", preds.display()))?;
            let classes = p.preds.iter().chain(&p.labels).max().map_or(2, |&c| (c + 1).max(2));
            m = m.input("preds", preds);
            Some(FairnessReport::from_confusion(
                a.name.clone(),
                &build_confusion(&p.preds, &p.labels, &p.groups, classes)?,
            )?)
        }
        (None, Some(model), None) => {
            let data_dir = a.data.as_ref().ok_or_else(|| usage("--model needs --data"))?;
            let ckpt = load_model(model)?;
            let data = load_split(data_dir, a.split)?;
            let preds = evaluate(&ckpt.model, &data)?;
            let conf = build_confusion(&preds, &data.labels, &data.sensitive, data.num_classes)?;
            m = m.input("model", model).input("data", data_dir);
            Some(FairnessReport::from_confusion(a.name.clone(), &conf)?)
        }
        (None, None, Some(metrics)) => {
            m = m.input("metrics", metrics);
            None
        }
        _ => return Err(usage("exactly one of --preds, --model or --metrics is required")),
    };
    let (summary, fate) = match report {
        Some(report) => {
            let report = match &baseline {
                Some(b) => report.with_fate(b, a.lambda)?,
                None => report,
            };
            print!("{report}");
            if let Some(dir) = &a.out {
                create_dir(dir)?;
                let csv = dir.join("report.csv");
                report.write_csv(create(&csv)?)?;
                m.output("report", &csv);
            }
            (report.summary(), report.fate)
        }
        None => {
            let mut summary = read_metrics(a.metrics.as_deref().unwrap())?;
            if summary.name.is_empty() {
                summary.name = a.name.clone();
            }
            let fate = baseline.as_ref().map(|b| summary.fate_against(b, a.lambda)).transpose()?;
            print_summary(&summary, fate.as_ref());
            (summary, fate)
        }
    };
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        let metrics_path = dir.join("metrics.json");
        write_json(&metrics_path, &summary)?;
        m.output("metrics", &metrics_path);
        if let Some(f) = &fate {
            let fate_path = dir.join("fate.json");
            write_json(&fate_path, f)?;
            m.output("fate", &fate_path);
        }
        m.results(json!({ "metrics": summary, "fate": fate }))?;
        m.write(&dir.join("eval-fairness.manifest.json"))?;
    }
    Ok(())
}

pub fn report(a: ReportArgs) -> Result<()> {
    let file = File::open(&a.trace).map_err(Error::from).with_context(|| format!("opening {}", a.trace.display()))?;
    let trace =
        RecipeTrace::read_jsonl(BufReader::new(file)).with_context(|| format!("reading {}", a.trace.display()))?;
    let mut out = std::io::stdout().lock();
    writeln!(
        out,
        "{:>4} {:>8} {:>8} {:>8} {:>8} {:>8} {:>10} {:>9}  pruned",
        "iter", "channels", "F1", "Eopp0", "Eopp1", "Eodd", "mean SNNL", "FATE"
    )?;
    let row = |out: &mut dyn Write,
               i: usize,
               s: &scp_core::recipe::Snapshot,
               fate: Option<f64>,
               pruned: &[usize]|
     -> std::io::Result<()> {
        writeln!(
            out,
            "{i:>4} {:>8} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>10.4} {:>9}  {:?}",
            s.channels,
            s.f1_avg,
            s.eopp0,
            s.eopp1,
            s.eodd,
            s.mean_score,
            fate.map_or("-".into(), |f| format!("{f:.4}")),
            pruned
        )
    };
    row(&mut out, 0, &trace.initial, None, &[])?;
    for rec in &trace.iterations {
        row(&mut out, rec.iteration, &rec.after, rec.fate_eodd, &rec.pruned_channels)?;
    }
    writeln!(
        out,
        "stop: {}; returned iteration {}; {} surviving channels at layer {}",
        trace.stop_reason,
        trace.returned_iteration,
        trace.surviving_channels.len(),
        trace.config.layer
    )?;
    if let Some(csv) = &a.csv {
        trace.write_ablation_csv(create(csv)?)?;
    }
    Ok(())
}
