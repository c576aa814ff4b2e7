use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, ConvLayer, Linear, ToyCnn};
use crate::container;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SCP1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    #[serde(default)]
    pub hyperparameters: BTreeMap<String, f64>,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ToyCnn,
    pub meta: TrainingMeta,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    architecture: Architecture,
    /// Element count per parameter slice, in declaration order.
    param_lengths: Vec<usize>,
    metadata: TrainingMeta,
}

pub fn write_checkpoint<W: Write>(w: W, ckpt: &Checkpoint) -> Result<()> {
    ckpt.model.validate()?;
    let params = ckpt.model.params();
    let header = Header {
        format_version: VERSION,
        architecture: ckpt.model.architecture(),
        param_lengths: params.iter().map(|p| p.len()).collect(),
        metadata: ckpt.meta.clone(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Header(e.to_string()))?;
    let payload = container::f32s_to_le(params.iter().flat_map(|p| p.iter().copied()));
    container::write(w, MAGIC, &header, &payload)
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<Checkpoint> {
    let (header, payload) = container::read(r, MAGIC)?;
    let header: Header = serde_json::from_slice(&header).map_err(|e| Error::Header(e.to_string()))?;
    if header.format_version != VERSION {
        return Err(Error::UnsupportedVersion(header.format_version));
    }
    let arch = &header.architecture;
    // Build a correctly shaped model, then overwrite every parameter.
    let mut in_ch = arch.input[0];
    let mut conv_layers = Vec::with_capacity(arch.convs.len());
    for spec in &arch.convs {
        conv_layers.push(ConvLayer {
            weights: Tensor::zeros(vec![spec.out_channels, in_ch, spec.kernel, spec.kernel]),
            bias: Tensor::zeros(vec![spec.out_channels]),
            padding: spec.padding,
            pool: spec.pool,
        });
        in_ch = spec.out_channels;
    }
    let mut model = ToyCnn {
        input: arch.input,
        conv_layers,
        head: Linear {
            weights: Tensor::zeros(vec![arch.num_classes, in_ch]),
            bias: Tensor::zeros(vec![arch.num_classes]),
        },
        tap_layer: arch.tap_layer,
    };
    model.validate()?;
    let lengths: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    if lengths != header.param_lengths {
        return Err(Error::DimensionMismatch(format!(
            "architecture implies parameter lengths {lengths:?}, header lists {:?}",
            header.param_lengths
        )));
    }
    let expected = 4 * lengths.iter().sum::<usize>();
    if payload.len() != expected {
        return Err(Error::Truncated { expected, actual: payload.len() });
    }
    let values = container::le_to_f32s(&payload);
    let mut offset = 0;
    for p in model.params_mut() {
        p.copy_from_slice(&values[offset..offset + p.len()]);
        offset += p.len();
    }
    Ok(Checkpoint { model, meta: header.metadata })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), ckpt)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
