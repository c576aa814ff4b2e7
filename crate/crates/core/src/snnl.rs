//! Group-entanglement scores for convolutional channels.
//!
//! For one batch of a channel's feature maps `m_1..m_b` with sensitive labels
//! `c_1..c_b`, the batch loss is
//!
//! ```text
//! l = -(1/b) Σ_i ln( (Σ_{j≠i, c_j=c_i} exp(-‖m_i-m_j‖²/T) + ε)
//!                  / (Σ_{p≠i}          exp(-‖m_i-m_p‖²/T) + ε) )
//! ```
//!
//! A channel's score is the mean of `l` over the batches of a dataset. Low
//! scores mark channels whose maps separate the two groups; high scores mean
//! the groups are entangled.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeatureMaps};
use crate::error::{Error, Result};
use crate::fmt::sig_digits;
use crate::nn::ToyCnn;
use crate::tensor::Tensor;

/// Added to both sides of the ratio so a sample without a same-group peer
/// stays finite.
pub const EPSILON: f64 = 1e-12;

pub const DEFAULT_TEMPERATURE: f64 = 1.0;

/// Row-major `n x n` matrix of squared Euclidean distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }
}

/// Squared distances between the rows of `flat` (`[b, ...]`, trailing axes
/// flattened). Accumulates in `f64`.
pub fn pairwise_sq_dists(flat: &Tensor) -> Result<DistanceMatrix> {
    let b = *flat.shape().first().ok_or_else(|| Error::shape("pairwise distances", "scalar input"))?;
    if b < 2 {
        return Err(Error::invalid(format!("need at least 2 rows, got {b}")));
    }
    let mut data = vec![0.0f64; b * b];
    for i in 0..b {
        let ri = flat.row(i);
        for j in i + 1..b {
            let d: f64 = ri
                .iter()
                .zip(flat.row(j))
                .map(|(&x, &y)| {
                    let t = x as f64 - y as f64;
                    t * t
                })
                .sum();
            data[i * b + j] = d;
            data[j * b + i] = d;
        }
    }
    Ok(DistanceMatrix { n: b, data })
}

fn check_labels(labels: &[u8]) -> Result<()> {
    if let Some(i) = labels.iter().position(|&c| c > 1) {
        return Err(Error::NonBinaryLabel { index: i, value: labels[i] as u64 });
    }
    Ok(())
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::invalid(format!("temperature must be positive and finite, got {t}")));
    }
    Ok(())
}

/// Soft nearest neighbour loss of one channel's maps over one batch, using
/// the sensitive labels as the grouping.
///
/// `maps` is `[b, ...]`; each sample's map is flattened before distances are
/// taken. A batch drawn from a single group scores exactly zero.
pub fn snnl_batch(maps: &Tensor, labels: &[u8], temperature: f64) -> Result<f64> {
    check_temperature(temperature)?;
    check_labels(labels)?;
    let b = labels.len();
    if b < 2 {
        return Err(Error::invalid(format!("batch needs at least 2 samples, got {b}")));
    }
    if maps.shape().first() != Some(&b) {
        return Err(Error::shape("snnl batch", format!("{b} labels for maps {:?}", maps.shape())));
    }
    Ok(snnl_from_distances(&pairwise_sq_dists(maps)?, labels, temperature))
}

fn snnl_from_distances(dist: &DistanceMatrix, labels: &[u8], temperature: f64) -> f64 {
    let b = dist.n();
    let mut total = 0.0f64;
    for i in 0..b {
        let (mut same, mut all) = (0.0f64, 0.0f64);
        for (j, &d) in dist.row(i).iter().enumerate() {
            if j == i {
                continue;
            }
            let e = (-d / temperature).exp();
            all += e;
            if labels[j] == labels[i] {
                same += e;
            }
        }
        total += ((same + EPSILON) / (all + EPSILON)).ln();
    }
    -total / b as f64
}

/// Per-channel scores for one tapped layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelScoreTable {
    /// 1-based conv layer the maps came from; `None` for external maps.
    pub layer: Option<usize>,
    pub scores: Vec<f64>,
    pub temperature: f64,
    pub n_batches: usize,
    pub batch_size: usize,
}

impl ChannelScoreTable {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.scores.iter().sum::<f64>() / self.scores.len() as f64
    }

    /// `channel,score` CSV, channels ascending, 9 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "channel,score")?;
        for (k, s) in self.scores.iter().enumerate() {
            writeln!(w, "{k},{}", sig_digits(*s, 9))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Seeded shuffle of `0..n` cut into batches of `batch_size`. A trailing
/// remainder of one sample is dropped; two or more form a smaller batch.
pub fn partition_batches(n: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n < 2 {
        return Err(Error::invalid(format!("scoring needs at least 2 samples, got {n}")));
    }
    if batch_size < 2 {
        return Err(Error::invalid(format!("batch size must be at least 2, got {batch_size}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order.chunks(batch_size).filter(|c| c.len() >= 2).map(<[usize]>::to_vec).collect())
}

/// Per-channel loss for one batch of `[b, K, H, W]` maps.
fn batch_channel_losses(maps: &Tensor, labels: &[u8], temperature: f64) -> Result<Vec<f64>> {
    if maps.ndim() != 4 {
        return Err(Error::shape("feature maps", format!("expected [b, K, H, W], got {:?}", maps.shape())));
    }
    let k = maps.shape()[1];
    (0..k).into_par_iter().map(|ch| snnl_batch(&maps.channel(ch)?, labels, temperature)).collect()
}

fn average(per_batch: Vec<Vec<f64>>, k: usize) -> Vec<f64> {
    let n = per_batch.len() as f64;
    let mut sums = vec![0.0f64; k];
    for losses in &per_batch {
        for (s, l) in sums.iter_mut().zip(losses) {
            *s += l;
        }
    }
    sums.into_iter().map(|s| s / n).collect()
}

/// Score every output channel of 1-based conv `layer` over `data`.
pub fn snnl_fair_scores(
    model: &ToyCnn,
    data: &Dataset,
    layer: usize,
    temperature: f64,
    batch_size: usize,
    seed: u64,
) -> Result<ChannelScoreTable> {
    check_temperature(temperature)?;
    let k = model.channels(layer)?;
    let batches = partition_batches(data.len(), batch_size, seed)?;
    let mut per_batch = Vec::with_capacity(batches.len());
    for idx in &batches {
        let batch = data.batch(idx);
        let out = model.forward_tap(&batch.images, layer)?;
        per_batch.push(batch_channel_losses(&out.tap_maps, &batch.sensitive, temperature)?);
    }
    Ok(ChannelScoreTable {
        layer: Some(layer),
        scores: average(per_batch, k),
        temperature,
        n_batches: batches.len(),
        batch_size,
    })
}

/// Score channels of externally produced feature maps.
pub fn scores_from_feature_maps(
    fm: &FeatureMaps,
    temperature: f64,
    batch_size: usize,
    seed: u64,
) -> Result<ChannelScoreTable> {
    check_temperature(temperature)?;
    check_labels(&fm.sensitive)?;
    if fm.maps.ndim() != 4 || fm.maps.shape()[0] != fm.sensitive.len() {
        return Err(Error::DimensionMismatch(format!("maps {:?} with {} labels", fm.maps.shape(), fm.sensitive.len())));
    }
    let k = fm.maps.shape()[1];
    let batches = partition_batches(fm.sensitive.len(), batch_size, seed)?;
    let mut per_batch = Vec::with_capacity(batches.len());
    for idx in &batches {
        let maps = fm.maps.select_rows(idx);
        let labels: Vec<u8> = idx.iter().map(|&i| fm.sensitive[i]).collect();
        per_batch.push(batch_channel_losses(&maps, &labels, temperature)?);
    }
    Ok(ChannelScoreTable {
        layer: None,
        scores: average(per_batch, k),
        temperature,
        n_batches: batches.len(),
        batch_size,
    })
}
