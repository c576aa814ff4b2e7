//! Iterative fairness pruning: score the channels of one conv layer, remove
//! the lowest-scoring fraction, fine-tune, re-evaluate, and repeat until a
//! stopping rule fires.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fairness::{build_confusion, fate, FairnessReport};
use crate::fmt::sig_digits;
use crate::nn::{evaluate, remove_channels, train, ToyCnn, TrainConfig};
use crate::snnl::{snnl_fair_scores, ChannelScoreTable, DEFAULT_TEMPERATURE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecipeConfig {
    /// Fraction of the current channel count removed per iteration, in (0, 1).
    pub prune_ratio: f64,
    /// 1-based conv layer that is scored and pruned.
    pub layer: usize,
    pub temperature: f64,
    /// Largest tolerated drop in group-averaged macro F1 against the
    /// unpruned model.
    pub th_acc: f64,
    /// Smallest Eodd decrease per iteration that keeps the loop going.
    pub th_fair: f64,
    pub max_iters: usize,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub finetune_batch: usize,
    pub score_batch: usize,
    pub seed: u64,
    /// Ignore the accuracy and fairness rules and run until `max_iters` or
    /// the channel floor (for ablation curves).
    #[serde(default)]
    pub run_to_max_iters: bool,
}

impl Default for RecipeConfig {
    fn default() -> Self {
        Self {
            prune_ratio: 0.02,
            layer: 2,
            temperature: DEFAULT_TEMPERATURE,
            th_acc: 0.02,
            th_fair: 0.001,
            max_iters: 10,
            finetune_epochs: 1,
            finetune_lr: 0.003,
            finetune_batch: 32,
            score_batch: 64,
            seed: 0,
            run_to_max_iters: false,
        }
    }
}

impl RecipeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.prune_ratio > 0.0 && self.prune_ratio < 1.0) {
            return Err(Error::invalid(format!("prune ratio must lie in (0, 1), got {}", self.prune_ratio)));
        }
        if !(self.th_acc >= 0.0) {
            return Err(Error::invalid(format!("th_acc must be >= 0, got {}", self.th_acc)));
        }
        if !(self.th_fair >= 0.0) {
            return Err(Error::invalid(format!("th_fair must be >= 0, got {}", self.th_fair)));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.finetune_epochs > 0 && !(self.finetune_lr > 0.0) {
            return Err(Error::invalid("fine-tune learning rate must be positive"));
        }
        if self.finetune_batch == 0 || self.score_batch < 2 {
            return Err(Error::invalid("fine-tune batch must be >= 1 and score batch >= 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    AccuracyDrop,
    FairnessPlateau,
    MaxIters,
    ChannelFloor,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopReason::AccuracyDrop => "accuracy_drop",
            StopReason::FairnessPlateau => "fairness_plateau",
            StopReason::MaxIters => "max_iters",
            StopReason::ChannelFloor => "channel_floor",
        })
    }
}

/// Evaluation-split metrics and score level of one model state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub channels: usize,
    pub f1_avg: f64,
    pub f1_groups: [f64; 2],
    pub eopp0: f64,
    pub eopp1: f64,
    pub eodd: f64,
    /// Mean score over the remaining channels of the pruned layer, computed
    /// on the training split.
    pub mean_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Removed channels in the unpruned model's numbering.
    pub pruned_channels: Vec<usize>,
    /// Removed channels in the numbering of the model being pruned.
    pub pruned_local: Vec<usize>,
    /// Scores the selection was made from.
    pub scores: Vec<f64>,
    #[serde(flatten)]
    pub after: Snapshot,
    /// FATE on Eodd against the unpruned model, when defined.
    pub fate_eodd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecipeTrace {
    pub config: RecipeConfig,
    pub initial: Snapshot,
    pub iterations: Vec<IterationRecord>,
    pub stop_reason: StopReason,
    /// Iteration whose model was returned; 0 means the unpruned model.
    pub returned_iteration: usize,
    /// Surviving channels of the returned model, unpruned numbering.
    pub surviving_channels: Vec<usize>,
}

impl RecipeTrace {
    /// Snapshot of the model that was returned.
    pub fn returned(&self) -> &Snapshot {
        match self.returned_iteration {
            0 => &self.initial,
            i => &self.iterations[i - 1].after,
        }
    }
}

pub struct IterationOutcome {
    pub model: ToyCnn,
    /// Unpruned-model index of each channel still present.
    pub channel_ids: Vec<usize>,
    pub record: IterationRecord,
    /// Scores of the returned model, i.e. step 1 of the next iteration.
    pub next_scores: ChannelScoreTable,
}

pub struct RecipeOutcome {
    pub model: ToyCnn,
    pub trace: RecipeTrace,
}

/// Number of channels removed from a layer currently holding `k`.
pub fn prune_count(k: usize, prune_ratio: f64) -> usize {
    ((prune_ratio * k as f64).floor() as usize).clamp(1, k.saturating_sub(1).max(1))
}

/// The `max(1, floor(pr_c K))` lowest-scoring channels, capped at `K - 1`;
/// ties prefer the lower index. Returned ascending.
pub fn select_prune_set(scores: &ChannelScoreTable, prune_ratio: f64) -> Result<Vec<usize>> {
    if !(prune_ratio > 0.0 && prune_ratio < 1.0) {
        return Err(Error::invalid(format!("prune ratio must lie in (0, 1), got {prune_ratio}")));
    }
    let k = scores.len();
    if k < 2 {
        return Err(Error::invalid(format!("need at least 2 channels to prune, have {k}")));
    }
    if let Some(i) = scores.scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score of channel {i}")));
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| scores.scores[a].total_cmp(&scores.scores[b]).then(a.cmp(&b)));
    let mut chosen = order[..prune_count(k, prune_ratio)].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Evaluate `model` on `data` and build its fairness report.
pub fn assess(model: &ToyCnn, data: &Dataset) -> Result<FairnessReport> {
    let preds = evaluate(model, data)?;
    let conf = build_confusion(&preds, &data.labels, &data.sensitive, data.num_classes)?;
    FairnessReport::from_confusion("model", &conf)
}

fn snapshot(report: &FairnessReport, scores: &ChannelScoreTable) -> Snapshot {
    Snapshot {
        channels: scores.len(),
        f1_avg: report.prf.average.f1,
        f1_groups: [report.prf.groups[0].f1, report.prf.groups[1].f1],
        eopp0: report.gaps.eopp0,
        eopp1: report.gaps.eopp1,
        eodd: report.gaps.eodd,
        mean_score: scores.mean(),
    }
}

fn score(model: &ToyCnn, data: &Dataset, cfg: &RecipeConfig) -> Result<ChannelScoreTable> {
    snnl_fair_scores(model, data, cfg.layer, cfg.temperature, cfg.score_batch, cfg.seed)
}

fn step(
    model: &ToyCnn,
    channel_ids: &[usize],
    scores: &ChannelScoreTable,
    train_set: &Dataset,
    eval_set: &Dataset,
    cfg: &RecipeConfig,
    iteration: usize,
) -> Result<IterationOutcome> {
    let local = select_prune_set(scores, cfg.prune_ratio)?;
    let mut pruned = remove_channels(model, cfg.layer, &local)?;
    if cfg.finetune_epochs > 0 {
        let tc = TrainConfig {
            epochs: cfg.finetune_epochs,
            lr: cfg.finetune_lr,
            batch_size: cfg.finetune_batch,
            seed: cfg.seed.wrapping_add(iteration as u64),
        };
        train(&mut pruned, train_set, &tc)?;
    }
    let next_scores = score(&pruned, train_set, cfg)?;
    let report = assess(&pruned, eval_set)?;
    let survivors: Vec<usize> =
        channel_ids.iter().enumerate().filter(|(i, _)| local.binary_search(i).is_err()).map(|(_, &id)| id).collect();
    let record = IterationRecord {
        iteration,
        pruned_channels: local.iter().map(|&i| channel_ids[i]).collect(),
        pruned_local: local,
        scores: scores.scores.clone(),
        after: snapshot(&report, &next_scores),
        fate_eodd: None,
    };
    Ok(IterationOutcome { model: pruned, channel_ids: survivors, record, next_scores })
}

/// One score / select / remove / fine-tune / evaluate round.
///
/// `channel_ids` maps each current channel of `cfg.layer` to its index in
/// the unpruned model.
pub fn prune_iteration(
    model: &ToyCnn,
    channel_ids: &[usize],
    train_set: &Dataset,
    eval_set: &Dataset,
    cfg: &RecipeConfig,
    iteration: usize,
) -> Result<IterationOutcome> {
    cfg.validate()?;
    let k = model.channels(cfg.layer)?;
    if channel_ids.len() != k {
        return Err(Error::invalid(format!("{} channel ids for {k} channels", channel_ids.len())));
    }
    let scores = score(model, train_set, cfg)?;
    step(model, channel_ids, &scores, train_set, eval_set, cfg, iteration)
}

/// Decide whether to stop after an iteration. Rules are checked in the
/// order accuracy drop, fairness plateau, iteration cap, channel floor.
pub fn stop_rule(
    cfg: &RecipeConfig,
    original_f1: f64,
    previous_eodd: f64,
    current: &Snapshot,
    iteration: usize,
) -> Option<StopReason> {
    if !cfg.run_to_max_iters {
        if original_f1 - current.f1_avg > cfg.th_acc {
            return Some(StopReason::AccuracyDrop);
        }
        if previous_eodd - current.eodd < cfg.th_fair {
            return Some(StopReason::FairnessPlateau);
        }
    }
    if iteration >= cfg.max_iters {
        return Some(StopReason::MaxIters);
    }
    if current.channels < 2 {
        return Some(StopReason::ChannelFloor);
    }
    None
}

/// Run the full pruning loop. On an accuracy drop the offending iteration
/// is discarded and the previous model returned.
pub fn run_recipe(
    model: &ToyCnn,
    train_set: &Dataset,
    eval_set: &Dataset,
    cfg: &RecipeConfig,
) -> Result<RecipeOutcome> {
    cfg.validate()?;
    let k = model.channels(cfg.layer)?;
    if k < 2 {
        return Err(Error::invalid(format!("layer {} has {k} channel(s); nothing to prune", cfg.layer)));
    }
    let initial_scores = score(model, train_set, cfg)?;
    let initial = snapshot(&assess(model, eval_set)?, &initial_scores);

    let mut current = model.clone();
    let mut ids: Vec<usize> = (0..k).collect();
    let mut scores = initial_scores;
    let mut previous_eodd = initial.eodd;
    let mut iterations = Vec::new();
    let mut iteration = 0;
    let (stop_reason, returned_iteration) = loop {
        iteration += 1;
        let mut out = step(&current, &ids, &scores, train_set, eval_set, cfg, iteration)?;
        out.record.fate_eodd =
            fate(out.record.after.f1_avg, initial.f1_avg, out.record.after.eodd, initial.eodd, 1.0).ok();
        let decision = stop_rule(cfg, initial.f1_avg, previous_eodd, &out.record.after, iteration);
        previous_eodd = out.record.after.eodd;
        iterations.push(out.record);
        if decision == Some(StopReason::AccuracyDrop) {
            break (StopReason::AccuracyDrop, iteration - 1);
        }
        current = out.model;
        ids = out.channel_ids;
        scores = out.next_scores;
        if let Some(reason) = decision {
            break (reason, iteration);
        }
    };
    Ok(RecipeOutcome {
        model: current,
        trace: RecipeTrace {
            config: cfg.clone(),
            initial,
            iterations,
            stop_reason,
            returned_iteration,
            surviving_channels: ids,
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum SweepAxis {
    /// Ratios as fractions, e.g. `0.02`.
    PruneRatio(Vec<f64>),
    Layer(Vec<usize>),
}

pub struct SweepRun {
    pub label: String,
    pub outcome: RecipeOutcome,
}

/// Run the recipe once per value on `axis`, all else taken from `base`.
pub fn sweep(
    model: &ToyCnn,
    train_set: &Dataset,
    eval_set: &Dataset,
    base: &RecipeConfig,
    axis: &SweepAxis,
) -> Result<Vec<SweepRun>> {
    let configs: Vec<(String, RecipeConfig)> = match axis {
        SweepAxis::PruneRatio(values) => values
            .iter()
            .map(|&r| (format!("prc={}", sig_trim(r * 100.0)), RecipeConfig { prune_ratio: r, ..base.clone() }))
            .collect(),
        SweepAxis::Layer(values) => {
            values.iter().map(|&l| (format!("layer={l}"), RecipeConfig { layer: l, ..base.clone() })).collect()
        }
    };
    if configs.is_empty() {
        return Err(Error::invalid("sweep needs at least one value"));
    }
    configs
        .into_iter()
        .map(|(label, cfg)| Ok(SweepRun { label, outcome: run_recipe(model, train_set, eval_set, &cfg)? }))
        .collect()
}

fn sig_trim(x: f64) -> String {
    let s = format!("{x:.6}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// One line of the JSON-lines trace export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceLine {
    Iteration(IterationRecord),
    Summary {
        config: RecipeConfig,
        initial: Snapshot,
        stop_reason: StopReason,
        returned_iteration: usize,
        iterations: usize,
        surviving_channels: Vec<usize>,
    },
}

impl RecipeTrace {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let to_err = |e: serde_json::Error| Error::Io(std::io::Error::other(e));
        for rec in &self.iterations {
            serde_json::to_writer(&mut w, &TraceLine::Iteration(rec.clone())).map_err(to_err)?;
            writeln!(w)?;
        }
        let summary = TraceLine::Summary {
            config: self.config.clone(),
            initial: self.initial.clone(),
            stop_reason: self.stop_reason,
            returned_iteration: self.returned_iteration,
            iterations: self.iterations.len(),
            surviving_channels: self.surviving_channels.clone(),
        };
        serde_json::to_writer(&mut w, &summary).map_err(to_err)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<RecipeTrace> {
        let mut iterations = Vec::new();
        let mut summary = None;
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: TraceLine =
                serde_json::from_str(&line).map_err(|e| Error::Csv { line: n as u64 + 1, message: e.to_string() })?;
            match parsed {
                TraceLine::Iteration(rec) => iterations.push(rec),
                s @ TraceLine::Summary { .. } => summary = Some(s),
            }
        }
        match summary {
            Some(TraceLine::Summary {
                config,
                initial,
                stop_reason,
                returned_iteration,
                iterations: count,
                surviving_channels,
            }) => {
                if count != iterations.len() {
                    return Err(Error::Header(format!("summary lists {count} iterations, found {}", iterations.len())));
                }
                Ok(RecipeTrace { config, initial, iterations, stop_reason, returned_iteration, surviving_channels })
            }
            _ => Err(Error::Header("trace has no summary record".into())),
        }
    }

    /// `iteration,f1_avg,eopp0,eopp1,eodd,mean_score,fate_eodd`, with the
    /// unpruned model as iteration 0.
    pub fn write_ablation_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "iteration,f1_avg,eopp0,eopp1,eodd,mean_score,fate_eodd")?;
        let row = |w: &mut W, i: usize, s: &Snapshot, f: Option<f64>| -> Result<()> {
            writeln!(
                w,
                "{i},{},{},{},{},{},{}",
                sig_digits(s.f1_avg, 9),
                sig_digits(s.eopp0, 9),
                sig_digits(s.eopp1, 9),
                sig_digits(s.eodd, 9),
                sig_digits(s.mean_score, 9),
                f.map(|v| sig_digits(v, 9)).unwrap_or_default()
            )?;
            Ok(())
        };
        let base_fate = (self.initial.eodd > 0.0).then_some(0.0);
        row(&mut w, 0, &self.initial, base_fate)?;
        for rec in &self.iterations {
            row(&mut w, rec.iteration, &rec.after, rec.fate_eodd)?;
        }
        w.flush()?;
        Ok(())
    }
}
