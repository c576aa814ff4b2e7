//! Synthetic biased datasets and the file formats used to move data,
//! feature maps and predictions in and out of the toolkit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::nn::SampleBatch;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

/// How the sensitive attribute shows up in the images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeMode {
    /// Privileged samples carry a uniform intensity offset.
    Explicit,
    /// The attribute exists only as a label.
    Implicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    /// Training-split size.
    pub num_samples: usize,
    pub num_eval: usize,
    pub num_classes: usize,
    /// `[C, H, W]`
    pub image: [usize; 3],
    /// Train-split dependence between the attribute and the class, in `[0, 1]`.
    pub spurious_strength: f64,
    /// Probability of the privileged group (`c = 1`) when the attribute is
    /// drawn independently of the class.
    pub group_imbalance: f64,
    pub noise_std: f64,
    pub class_amplitude: f64,
    pub attribute_offset: f64,
    pub mode: AttributeMode,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_samples: 2000,
            num_eval: 1000,
            num_classes: 2,
            image: [1, 16, 16],
            spurious_strength: 0.95,
            group_imbalance: 0.5,
            noise_std: 1.0,
            class_amplitude: 0.5,
            attribute_offset: 0.5,
            mode: AttributeMode::Explicit,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(m));
        if !(0.0..=1.0).contains(&self.spurious_strength) {
            return fail(format!("rho must lie in [0, 1], got {}", self.spurious_strength));
        }
        if !(self.group_imbalance > 0.0 && self.group_imbalance < 1.0) {
            return fail(format!("group imbalance must lie in (0, 1), got {}", self.group_imbalance));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail(format!("noise std must be finite and >= 0, got {}", self.noise_std));
        }
        if self.num_samples < 4 || self.num_eval < 4 {
            return fail("each split needs at least 4 samples".into());
        }
        if self.num_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.num_classes));
        }
        let [c, h, w] = self.image;
        if c == 0 || h < 4 || w < 4 {
            return fail(format!("image must be at least 1x4x4, got {c}x{h}x{w}"));
        }
        if !(self.class_amplitude > 0.0 && self.class_amplitude.is_finite()) {
            return fail("class amplitude must be positive".into());
        }
        if !self.attribute_offset.is_finite() {
            return fail("attribute offset must be finite".into());
        }
        if self.mode == AttributeMode::Explicit && self.attribute_offset == 0.0 {
            return fail("explicit attribute mode needs a nonzero offset".into());
        }
        Ok(())
    }
}

/// `D = {x_i, y_i, c_i}` for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]`
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub sensitive: Vec<u8>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        images: Tensor,
        labels: Vec<usize>,
        sensitive: Vec<u8>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        let n = labels.len();
        if images.ndim() != 4 || images.shape()[0] != n || sensitive.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "images {:?}, {n} labels, {} sensitive labels",
                images.shape(),
                sensitive.len()
            )));
        }
        if let Some(i) = labels.iter().position(|&y| y >= num_classes) {
            return Err(Error::invalid(format!("label {} at sample {i} outside 0..{num_classes}", labels[i])));
        }
        if let Some(i) = sensitive.iter().position(|&c| c > 1) {
            return Err(Error::NonBinaryLabel { index: i, value: sensitive[i] as u64 });
        }
        Ok(Self { images, labels, sensitive, num_classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> SampleBatch {
        SampleBatch {
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            sensitive: indices.iter().map(|&i| self.sensitive[i]).collect(),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let b = self.batch(indices);
        Dataset {
            images: b.images,
            labels: b.labels,
            sensitive: b.sensitive,
            num_classes: self.num_classes,
            split: self.split,
        }
    }
}

/// Zero-mean sinusoidal grating, one orientation per class.
fn class_pattern(class: usize, num_classes: usize, h: usize, w: usize) -> Vec<f64> {
    let theta = std::f64::consts::PI * class as f64 / num_classes as f64;
    let (ct, st) = (theta.cos(), theta.sin());
    let freq = 2.0 * std::f64::consts::PI * 3.0 / h.max(w) as f64;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 - (w as f64 - 1.0) / 2.0) * ct + (y as f64 - (h as f64 - 1.0) / 2.0) * st;
            out.push((freq * u).sin());
        }
    }
    let mean = out.iter().sum::<f64>() / out.len() as f64;
    let norm = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>().sqrt() / (out.len() as f64).sqrt();
    out.iter().map(|v| (v - mean) / norm).collect()
}

/// Generate the train and eval splits.
///
/// Each image is the class grating scaled by `class_amplitude`, plus
/// `attribute_offset` on every pixel for privileged samples in explicit
/// mode, plus i.i.d. Gaussian noise. In the train split the attribute
/// copies the class-aligned value (`class % 2`) with probability `rho` and
/// is otherwise drawn from `Bernoulli(group_imbalance)`; in the eval split
/// it is always drawn independently of the class.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let [ch, h, w] = cfg.image;
    let patterns: Vec<Vec<f64>> = (0..cfg.num_classes).map(|k| class_pattern(k, cfg.num_classes, h, w)).collect();
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let make = |n: usize, split: Split, rng: &mut ChaCha8Rng| -> Result<Dataset> {
        let mut images = Vec::with_capacity(n * ch * h * w);
        let mut labels = Vec::with_capacity(n);
        let mut sensitive = Vec::with_capacity(n);
        for _ in 0..n {
            let y = rng.random_range(0..cfg.num_classes);
            let aligned = (y % 2) as u8;
            let c = if split == Split::Train && rng.random::<f64>() < cfg.spurious_strength {
                aligned
            } else {
                u8::from(rng.random::<f64>() < cfg.group_imbalance)
            };
            let offset = match cfg.mode {
                AttributeMode::Explicit if c == 1 => cfg.attribute_offset,
                _ => 0.0,
            };
            for _ in 0..ch {
                for &p in &patterns[y] {
                    let mut v = cfg.class_amplitude * p + offset;
                    if cfg.noise_std > 0.0 {
                        v += noise.sample(rng);
                    }
                    images.push(v as f32);
                }
            }
            labels.push(y);
            sensitive.push(c);
        }
        Dataset::new(Tensor::new(vec![n, ch, h, w], images)?, labels, sensitive, cfg.num_classes, split)
    };
    let train = make(cfg.num_samples, Split::Train, &mut rng)?;
    let eval = make(cfg.num_eval, Split::Eval, &mut rng)?;
    Ok((train, eval))
}

const DATASET_MAGIC: &[u8; 4] = b"SDS1";

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    format_version: u32,
    split: Split,
    num_classes: usize,
    shape: Vec<usize>,
}

/// Dataset container: images as `f32`, labels as `u32`, sensitive labels as
/// bytes, all little-endian.
pub fn write_dataset<W: Write>(w: W, data: &Dataset) -> Result<()> {
    let header = DatasetHeader {
        format_version: 1,
        split: data.split,
        num_classes: data.num_classes,
        shape: data.images.shape().to_vec(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Header(e.to_string()))?;
    let mut payload = container::f32s_to_le(data.images.data().iter().copied());
    for &y in &data.labels {
        payload.extend_from_slice(&(y as u32).to_le_bytes());
    }
    payload.extend_from_slice(&data.sensitive);
    container::write(w, DATASET_MAGIC, &header, &payload)
}

pub fn read_dataset<R: Read>(r: R) -> Result<Dataset> {
    let (header, payload) = container::read(r, DATASET_MAGIC)?;
    let header: DatasetHeader = serde_json::from_slice(&header).map_err(|e| Error::Header(e.to_string()))?;
    if header.format_version != 1 {
        return Err(Error::UnsupportedVersion(header.format_version));
    }
    if header.shape.len() != 4 {
        return Err(Error::DimensionMismatch(format!("expected 4-D image shape, got {:?}", header.shape)));
    }
    let n = header.shape[0];
    let numel: usize = header.shape.iter().product();
    let expected = 4 * numel + 4 * n + n;
    if payload.len() < expected {
        return Err(Error::Truncated { expected, actual: payload.len() });
    }
    if payload.len() > expected {
        return Err(Error::DimensionMismatch(format!(
            "header implies {expected} payload bytes, file has {}",
            payload.len()
        )));
    }
    let images = Tensor::new(header.shape.clone(), container::le_to_f32s(&payload[..4 * numel]))?;
    let labels = payload[4 * numel..4 * numel + 4 * n]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let sensitive = payload[4 * numel + 4 * n..].to_vec();
    Dataset::new(images, labels, sensitive, header.num_classes, header.split)
}

pub fn save_dataset(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    write_dataset(BufWriter::new(File::create(path)?), data)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset(BufReader::new(File::open(path)?))
}

/// Feature maps of one layer with the sensitive label of each sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMaps {
    /// `[N, K, H', W']`
    pub maps: Tensor,
    pub sensitive: Vec<u8>,
}

const FMAP_MAGIC: &[u8; 4] = b"FMAP";
const FMAP_VERSION: u32 = 1;
const FMAP_HEADER_BYTES: usize = 24;

pub fn write_feature_maps<W: Write>(mut w: W, fm: &FeatureMaps) -> Result<()> {
    let s = fm.maps.shape();
    if s.len() != 4 || s[0] != fm.sensitive.len() {
        return Err(Error::DimensionMismatch(format!("maps {:?} with {} sensitive labels", s, fm.sensitive.len())));
    }
    if let Some(i) = fm.sensitive.iter().position(|&c| c > 1) {
        return Err(Error::NonBinaryLabel { index: i, value: fm.sensitive[i] as u64 });
    }
    w.write_all(FMAP_MAGIC)?;
    w.write_all(&FMAP_VERSION.to_le_bytes())?;
    for &d in s {
        let d = u32::try_from(d).map_err(|_| Error::invalid("dimension exceeds u32"))?;
        w.write_all(&d.to_le_bytes())?;
    }
    w.write_all(&container::f32s_to_le(fm.maps.data().iter().copied()))?;
    w.write_all(&fm.sensitive)?;
    w.flush()?;
    Ok(())
}

/// Parse an FMAP file: `"FMAP"`, `u32` version, `u32` N, K, H', W', then
/// `N*K*H'*W'` `f32` values in `[n][k][h][w]` order, then N label bytes.
pub fn read_feature_maps<R: Read>(mut r: R) -> Result<FeatureMaps> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() >= 4 && &bytes[..4] != FMAP_MAGIC {
        return Err(Error::BadMagic {
            expected: "FMAP".into(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        });
    }
    if bytes.len() < FMAP_HEADER_BYTES {
        return Err(Error::Truncated { expected: FMAP_HEADER_BYTES, actual: bytes.len() });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let version = word(0);
    if version != FMAP_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dims = [word(1), word(2), word(3), word(4)].map(|d| d as usize);
    let numel = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::DimensionMismatch(format!("dimensions {dims:?} overflow")))?;
    let n = dims[0];
    let expected = FMAP_HEADER_BYTES + 4 * numel + n;
    if bytes.len() < expected {
        return Err(Error::Truncated { expected, actual: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(Error::DimensionMismatch(format!(
            "header N={} K={} H={} W={} implies {expected} bytes, file has {}",
            dims[0],
            dims[1],
            dims[2],
            dims[3],
            bytes.len()
        )));
    }
    let body = &bytes[FMAP_HEADER_BYTES..];
    let maps = Tensor::new(dims.to_vec(), container::le_to_f32s(&body[..4 * numel]))?;
    let sensitive = body[4 * numel..].to_vec();
    if let Some(i) = sensitive.iter().position(|&c| c > 1) {
        return Err(Error::NonBinaryLabel { index: i, value: sensitive[i] as u64 });
    }
    Ok(FeatureMaps { maps, sensitive })
}

pub fn save_feature_maps(path: impl AsRef<Path>, fm: &FeatureMaps) -> Result<()> {
    write_feature_maps(BufWriter::new(File::create(path)?), fm)
}

pub fn load_feature_maps(path: impl AsRef<Path>) -> Result<FeatureMaps> {
    read_feature_maps(BufReader::new(File::open(path)?))
}

/// Parallel prediction, label and group columns.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Predictions {
    pub preds: Vec<usize>,
    pub labels: Vec<usize>,
    pub groups: Vec<u8>,
}

const PRED_HEADER: [&str; 3] = ["pred", "label", "group"];

pub fn write_predictions_csv<W: Write>(w: W, p: &Predictions) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let map = |e: csv::Error| Error::Io(std::io::Error::other(e));
    out.write_record(PRED_HEADER).map_err(map)?;
    for ((y_hat, y), g) in p.preds.iter().zip(&p.labels).zip(&p.groups) {
        out.write_record([y_hat.to_string(), y.to_string(), g.to_string()]).map_err(map)?;
    }
    out.flush()?;
    Ok(())
}

/// Read a `pred,label,group` CSV of non-negative integers.
pub fn read_predictions_csv<R: Read>(r: R) -> Result<Predictions> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let headers = rdr.headers().map_err(|e| Error::Csv { line: 1, message: e.to_string() })?.clone();
    if headers.iter().collect::<Vec<_>>() != PRED_HEADER {
        return Err(Error::Csv {
            line: 1,
            message: format!(
                "expected header `pred,label,group`, found `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    let mut out = Predictions::default();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Csv { line: e.position().map_or(0, |p| p.line()), message: e.to_string() })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 3 {
            return Err(Error::Csv { line, message: format!("expected 3 columns, found {}", rec.len()) });
        }
        let mut cells = [0usize; 3];
        for (slot, (cell, name)) in cells.iter_mut().zip(rec.iter().zip(PRED_HEADER)) {
            *slot = cell.trim().parse().map_err(|_| Error::Csv {
                line,
                message: format!("{name} cell `{cell}` is not a non-negative integer"),
            })?;
        }
        if cells[2] > 1 {
            return Err(Error::Csv { line, message: format!("group must be 0 or 1, found {}", cells[2]) });
        }
        out.preds.push(cells[0]);
        out.labels.push(cells[1]);
        out.groups.push(cells[2] as u8);
    }
    if out.preds.is_empty() {
        return Err(Error::Empty);
    }
    Ok(out)
}

pub fn save_predictions_csv(path: impl AsRef<Path>, p: &Predictions) -> Result<()> {
    write_predictions_csv(BufWriter::new(File::create(path)?), p)
}

pub fn load_predictions_csv(path: impl AsRef<Path>) -> Result<Predictions> {
    read_predictions_csv(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(rho: f64, noise: f64) -> SyntheticConfig {
        SyntheticConfig {
            num_samples: 1000,
            num_eval: 200,
            spurious_strength: rho,
            noise_std: noise,
            seed: 9,
            ..Default::default()
        }
    }

    fn correlation(a: &[usize], b: &[u8]) -> f64 {
        let n = a.len() as f64;
        let xa: Vec<f64> = a.iter().map(|&v| v as f64).collect();
        let xb: Vec<f64> = b.iter().map(|&v| v as f64).collect();
        let (ma, mb) = (xa.iter().sum::<f64>() / n, xb.iter().sum::<f64>() / n);
        let cov: f64 = xa.iter().zip(&xb).map(|(p, q)| (p - ma) * (q - mb)).sum();
        let va: f64 = xa.iter().map(|p| (p - ma).powi(2)).sum();
        let vb: f64 = xb.iter().map(|q| (q - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn independent_when_rho_zero() {
        let (train, eval) = gen_synthetic(&small(0.0, 1.0)).unwrap();
        assert!(correlation(&train.labels, &train.sensitive).abs() < 0.1);
        assert_eq!(eval.split, Split::Eval);
    }

    #[test]
    fn fully_aligned_when_rho_one() {
        let (train, eval) = gen_synthetic(&small(1.0, 1.0)).unwrap();
        assert!(train.labels.iter().zip(&train.sensitive).all(|(&y, &c)| y == c as usize));
        assert!(correlation(&eval.labels, &eval.sensitive).abs() < 0.2);
    }

    #[test]
    fn noiseless_images_depend_only_on_class_and_group() {
        let (train, _) = gen_synthetic(&small(0.5, 0.0)).unwrap();
        for i in 0..50 {
            for j in i + 1..50 {
                if train.labels[i] == train.labels[j] && train.sensitive[i] == train.sensitive[j] {
                    let (a, b) = (train.images.row(i), train.images.row(j));
                    assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
                }
            }
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let cfg = small(0.9, 1.0);
        assert_eq!(gen_synthetic(&cfg).unwrap(), gen_synthetic(&cfg).unwrap());
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(gen_synthetic(&small(1.5, 1.0)).is_err());
        assert!(gen_synthetic(&small(0.5, -1.0)).is_err());
        let cfg = SyntheticConfig { group_imbalance: 1.0, ..small(0.5, 1.0) };
        assert!(gen_synthetic(&cfg).is_err());
    }

    #[test]
    fn dataset_file_round_trip() {
        let (train, _) = gen_synthetic(&small(0.9, 1.0)).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &train).unwrap();
        assert_eq!(read_dataset(buf.as_slice()).unwrap(), train);
    }

    #[test]
    fn scalar_fmap_parses() {
        let mut bytes = b"FMAP".to_vec();
        for v in [1u32, 2, 1, 1, 1] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&0f32.to_le_bytes());
        bytes.extend_from_slice(&1f32.to_le_bytes());
        bytes.extend_from_slice(&[0, 1]);
        let fm = read_feature_maps(bytes.as_slice()).unwrap();
        assert_eq!(fm.maps.shape(), &[2, 1, 1, 1]);
        assert_eq!(fm.maps.data(), &[0.0, 1.0]);
        assert_eq!(fm.sensitive, vec![0, 1]);

        let err = read_feature_maps(&bytes[..bytes.len() - 3]).unwrap_err();
        assert_eq!(err.code(), "truncated");
        assert!(err.to_string().contains("expected 34"), "{err}");
        assert!(err.to_string().contains("found 31"), "{err}");

        let mut extra = bytes.clone();
        extra.push(0);
        assert_eq!(read_feature_maps(extra.as_slice()).unwrap_err().code(), "dimension_mismatch");

        let mut nonbin = bytes.clone();
        *nonbin.last_mut().unwrap() = 2;
        assert_eq!(read_feature_maps(nonbin.as_slice()).unwrap_err().code(), "non_binary_label");

        let mut magic = bytes;
        magic[0] = b'G';
        assert_eq!(read_feature_maps(magic.as_slice()).unwrap_err().code(), "bad_magic");
    }

    #[test]
    fn predictions_csv_parses_rows() {
        let p = read_predictions_csv("pred,label,group\n1,1,0\n0,1,1\n".as_bytes()).unwrap();
        assert_eq!(p.preds, vec![1, 0]);
        assert_eq!(p.labels, vec![1, 1]);
        assert_eq!(p.groups, vec![0, 1]);
    }

    #[test]
    fn predictions_csv_errors() {
        assert!(matches!(read_predictions_csv("pred,label,group\n".as_bytes()), Err(Error::Empty)));
        let err = read_predictions_csv("pred,label\n1,1\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Csv { line: 1, .. }), "{err}");
        let err = read_predictions_csv("pred,label,group\n1,1,0\n1,x,0\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Csv { line: 3, .. }), "{err}");
        let err = read_predictions_csv("pred,label,group\n1,1,0\n1,1\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Csv { line: 3, .. }), "{err}");
    }
}
