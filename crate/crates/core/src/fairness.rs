//! Group-conditioned accuracy, multi-class equal opportunity / equalized
//! odds gaps, and the FATE fairness-accuracy trade-off score.
//!
//! Group `0` is the unprivileged group and `1` the privileged one.
//!
//! Rates are one-vs-rest per class `k` within each group `g`:
//! `TPR_{g,k}` is the recall of class `k`, `FPR_{g,k}` the share of non-`k`
//! samples predicted as `k`, and `TNR = 1 - FPR`. Over the classes that have
//! both positives and negatives in both groups:
//!
//! * `eopp1 = mean_k |TPR_{0,k} - TPR_{1,k}|`
//! * `eopp0 = mean_k |TNR_{0,k} - TNR_{1,k}|`
//! * `eodd  = mean_k (|TPR_{0,k} - TPR_{1,k}| + |FPR_{0,k} - FPR_{1,k}|) / 2`

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LAMBDA: f64 = 1.0;

/// Prediction counts indexed `[group][true class][predicted class]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionTensor {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionTensor {
    pub fn zeros(num_classes: usize) -> Self {
        Self { num_classes, counts: vec![0; 2 * num_classes * num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, group: usize, truth: usize, pred: usize) -> u64 {
        let c = self.num_classes;
        self.counts[(group * c + truth) * c + pred]
    }

    fn bump(&mut self, group: usize, truth: usize, pred: usize) {
        let c = self.num_classes;
        self.counts[(group * c + truth) * c + pred] += 1;
    }

    pub fn group_total(&self, group: usize) -> u64 {
        let c = self.num_classes;
        self.counts[group * c * c..(group + 1) * c * c].iter().sum()
    }

    /// Samples of `group` whose true class is `k`.
    fn positives(&self, group: usize, k: usize) -> u64 {
        (0..self.num_classes).map(|p| self.get(group, k, p)).sum()
    }

    /// Samples of `group` predicted as `k`.
    fn predicted(&self, group: usize, k: usize) -> u64 {
        (0..self.num_classes).map(|t| self.get(group, t, k)).sum()
    }

    /// Copy with the two groups exchanged.
    pub fn swap_groups(&self) -> Self {
        let half = self.counts.len() / 2;
        let mut counts = self.counts[half..].to_vec();
        counts.extend_from_slice(&self.counts[..half]);
        Self { num_classes: self.num_classes, counts }
    }
}

pub fn build_confusion(
    preds: &[usize],
    labels: &[usize],
    groups: &[u8],
    num_classes: usize,
) -> Result<ConfusionTensor> {
    if preds.len() != labels.len() || preds.len() != groups.len() {
        return Err(Error::invalid(format!(
            "length mismatch: {} predictions, {} labels, {} groups",
            preds.len(),
            labels.len(),
            groups.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Empty);
    }
    if num_classes == 0 {
        return Err(Error::invalid("need at least one class"));
    }
    let mut conf = ConfusionTensor::zeros(num_classes);
    for (i, ((&p, &y), &g)) in preds.iter().zip(labels).zip(groups).enumerate() {
        if g > 1 {
            return Err(Error::NonBinaryLabel { index: i, value: g as u64 });
        }
        if p >= num_classes || y >= num_classes {
            return Err(Error::invalid(format!("sample {i}: prediction {p} / label {y} outside 0..{num_classes}")));
        }
        conf.bump(g as usize, y, p);
    }
    Ok(conf)
}

fn check_nonempty(conf: &ConfusionTensor) -> Result<()> {
    if conf.group_total(0) == 0 && conf.group_total(1) == 0 {
        return Err(Error::Empty);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateGaps {
    pub eopp0: f64,
    pub eopp1: f64,
    pub eodd: f64,
    /// Classes lacking positives or negatives in some group; excluded from
    /// every average. When all classes are skipped the gaps are reported as 0.
    pub skipped_classes: Vec<usize>,
}

pub fn eopp_eodd(conf: &ConfusionTensor) -> Result<RateGaps> {
    check_nonempty(conf)?;
    let totals = [conf.group_total(0), conf.group_total(1)];
    let (mut tpr_gap, mut tnr_gap, mut odd_gap) = (0.0f64, 0.0f64, 0.0f64);
    let mut used = 0usize;
    let mut skipped = Vec::new();
    for k in 0..conf.num_classes() {
        let pos = [conf.positives(0, k), conf.positives(1, k)];
        let neg = [totals[0] - pos[0], totals[1] - pos[1]];
        if pos.contains(&0) || neg.contains(&0) {
            skipped.push(k);
            continue;
        }
        let rates = |g: usize| {
            let tp = conf.get(g, k, k) as f64;
            let fp = (conf.predicted(g, k) - conf.get(g, k, k)) as f64;
            (tp / pos[g] as f64, fp / neg[g] as f64)
        };
        let (tpr0, fpr0) = rates(0);
        let (tpr1, fpr1) = rates(1);
        let dt = (tpr0 - tpr1).abs();
        let df = (fpr0 - fpr1).abs();
        tpr_gap += dt;
        tnr_gap += ((1.0 - fpr0) - (1.0 - fpr1)).abs();
        odd_gap += 0.5 * (dt + df);
        used += 1;
    }
    let n = used.max(1) as f64;
    Ok(RateGaps { eopp0: tnr_gap / n, eopp1: tpr_gap / n, eodd: odd_gap / n, skipped_classes: skipped })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn zip(a: Prf, b: Prf, f: impl Fn(f64, f64) -> f64) -> Prf {
        Prf { precision: f(a.precision, b.precision), recall: f(a.recall, b.recall), f1: f(a.f1, b.f1) }
    }
}

/// Per-group macro scores with their mean and absolute difference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupPrf {
    pub groups: [Prf; 2],
    pub average: Prf,
    pub difference: Prf,
}

impl GroupPrf {
    pub fn from_groups(g0: Prf, g1: Prf) -> Self {
        Self {
            groups: [g0, g1],
            average: Prf::zip(g0, g1, |a, b| (a + b) / 2.0),
            difference: Prf::zip(g0, g1, |a, b| (a - b).abs()),
        }
    }
}

/// Macro precision/recall/F1 within each group. Only classes with at least
/// one true sample in the group enter that group's average; an undefined
/// precision (nothing predicted as the class) counts as 0.
pub fn group_prf(conf: &ConfusionTensor) -> Result<GroupPrf> {
    check_nonempty(conf)?;
    let mut per_group = [Prf::default(); 2];
    for (g, slot) in per_group.iter_mut().enumerate() {
        if conf.group_total(g) == 0 {
            return Err(Error::invalid(format!("group {g} has no samples")));
        }
        let (mut p_sum, mut r_sum, mut f_sum, mut n) = (0.0, 0.0, 0.0, 0usize);
        for k in 0..conf.num_classes() {
            let pos = conf.positives(g, k);
            if pos == 0 {
                continue;
            }
            let tp = conf.get(g, k, k) as f64;
            let predicted = conf.predicted(g, k);
            let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
            let recall = tp / pos as f64;
            let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
            p_sum += precision;
            r_sum += recall;
            f_sum += f1;
            n += 1;
        }
        let n = n as f64;
        *slot = Prf { precision: p_sum / n, recall: r_sum / n, f1: f_sum / n };
    }
    Ok(GroupPrf::from_groups(per_group[0], per_group[1]))
}

/// `(acc_m - acc_b) / acc_b - λ (fc_m - fc_b) / fc_b`
pub fn fate(acc_m: f64, acc_b: f64, fc_m: f64, fc_b: f64, lambda: f64) -> Result<f64> {
    if !(acc_b > 0.0) {
        return Err(Error::invalid(format!("baseline accuracy must be positive, got {acc_b}")));
    }
    if !(fc_b > 0.0) {
        return Err(Error::invalid(format!("baseline fairness gap must be positive, got {fc_b}")));
    }
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda must be non-negative, got {lambda}")));
    }
    Ok((acc_m - acc_b) / acc_b - lambda * (fc_m - fc_b) / fc_b)
}

/// Headline numbers of one model, the unit of comparison for FATE. Also the
/// on-disk baseline/model metrics file (JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    #[serde(default)]
    pub name: String,
    /// Group-averaged macro F1.
    pub f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eopp0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eopp1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eodd: Option<f64>,
}

/// FATE per fairness metric; `None` where either side lacks the metric or
/// only the baseline gap is zero. A gap that is zero on both sides counts
/// as no relative change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FateScores {
    pub baseline: String,
    pub lambda: f64,
    pub eopp0: Option<f64>,
    pub eopp1: Option<f64>,
    pub eodd: Option<f64>,
}

impl MetricsSummary {
    pub fn fate_against(&self, baseline: &MetricsSummary, lambda: f64) -> Result<FateScores> {
        if !(baseline.f1 > 0.0) {
            return Err(Error::invalid(format!("baseline F1 must be positive, got {}", baseline.f1)));
        }
        let one = |m: Option<f64>, b: Option<f64>| -> Result<Option<f64>> {
            match (m, b) {
                (Some(m), Some(b)) if b > 0.0 => fate(self.f1, baseline.f1, m, b, lambda).map(Some),
                (Some(m), Some(b)) if m == 0.0 && b == 0.0 => fate(self.f1, baseline.f1, 1.0, 1.0, lambda).map(Some),
                _ => Ok(None),
            }
        };
        Ok(FateScores {
            baseline: baseline.name.clone(),
            lambda,
            eopp0: one(self.eopp0, baseline.eopp0)?,
            eopp1: one(self.eopp1, baseline.eopp1)?,
            eodd: one(self.eodd, baseline.eodd)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub name: String,
    pub prf: GroupPrf,
    pub gaps: RateGaps,
    pub fate: Option<FateScores>,
}

impl FairnessReport {
    pub fn from_confusion(name: impl Into<String>, conf: &ConfusionTensor) -> Result<Self> {
        Ok(Self { name: name.into(), prf: group_prf(conf)?, gaps: eopp_eodd(conf)?, fate: None })
    }

    pub fn summary(&self) -> MetricsSummary {
        MetricsSummary {
            name: self.name.clone(),
            f1: self.prf.average.f1,
            precision: Some(self.prf.average.precision),
            recall: Some(self.prf.average.recall),
            eopp0: Some(self.gaps.eopp0),
            eopp1: Some(self.gaps.eopp1),
            eodd: Some(self.gaps.eodd),
        }
    }

    pub fn with_fate(mut self, baseline: &MetricsSummary, lambda: f64) -> Result<Self> {
        self.fate = Some(self.summary().fate_against(baseline, lambda)?);
        Ok(self)
    }

    /// One row per group plus Avg. and Diff.; the fairness and FATE columns
    /// repeat on every row.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "row,precision,recall,f1,eopp0,eopp1,eodd,fate_eopp0,fate_eopp1,fate_eodd")?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let fate = self.fate.as_ref();
        let tail = format!(
            "{:.6},{:.6},{:.6},{},{},{}",
            self.gaps.eopp0,
            self.gaps.eopp1,
            self.gaps.eodd,
            opt(fate.and_then(|f| f.eopp0)),
            opt(fate.and_then(|f| f.eopp1)),
            opt(fate.and_then(|f| f.eodd)),
        );
        for (label, p) in self.rows() {
            writeln!(w, "{label},{:.6},{:.6},{:.6},{tail}", p.precision, p.recall, p.f1)?;
        }
        w.flush()?;
        Ok(())
    }

    fn rows(&self) -> [(&'static str, Prf); 4] {
        [
            ("group0", self.prf.groups[0]),
            ("group1", self.prf.groups[1]),
            ("avg", self.prf.average),
            ("diff", self.prf.difference),
        ]
    }
}

impl fmt::Display for FairnessReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let fate = self.fate.as_ref();
        let cell = |gap: f64, v: Option<f64>| match v {
            Some(x) => format!("{gap:.4} / {x:.4}"),
            None => format!("{gap:.4} / -"),
        };
        let fair = [
            cell(self.gaps.eopp0, fate.and_then(|x| x.eopp0)),
            cell(self.gaps.eopp1, fate.and_then(|x| x.eopp1)),
            cell(self.gaps.eodd, fate.and_then(|x| x.eodd)),
        ];
        writeln!(
            f,
            "{:<10} {:>9} {:>9} {:>9} | {:>17} {:>17} {:>17}",
            self.name, "Precision", "Recall", "F1-score", "Eopp0 / FATE", "Eopp1 / FATE", "Eodd / FATE"
        )?;
        let labels = ["Group 0", "Group 1", "Avg.", "Diff."];
        for (i, (label, (_, p))) in labels.iter().zip(self.rows()).enumerate() {
            let right = if i == 0 { format!("{:>17} {:>17} {:>17}", fair[0], fair[1], fair[2]) } else { String::new() };
            writeln!(f, "{label:<10} {:>9.3} {:>9.3} {:>9.3} | {right}", p.precision, p.recall, p.f1)?;
        }
        if let Some(fs) = fate {
            writeln!(f, "FATE baseline: {} (lambda = {})", fs.baseline, fs.lambda)?;
        }
        if !self.gaps.skipped_classes.is_empty() {
            writeln!(f, "skipped classes: {:?}", self.gaps.skipped_classes)?;
        }
        Ok(())
    }
}
