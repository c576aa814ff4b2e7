//! Small convolutional network engine: forward pass with a feature-map tap,
//! hand-derived reverse-mode gradients, SGD, structural channel removal and
//! checkpoint serialization.
//!
//! Conv layers are indexed from 1 at every public boundary, so `layer = 2`
//! is the second convolution.

mod checkpoint;
mod conv;
mod prune;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, TrainingMeta};
pub use prune::remove_channels;
pub use train::{
    backward_and_step, evaluate, loss_and_gradients, sgd_step, train, Gradients, SampleBatch, TrainConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    None,
    /// 2x2 window, stride 2, trailing odd row/column dropped.
    Max2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
    pub pool: Pool,
}

/// Shape-only description of a [`ToyCnn`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// `[C, H, W]` of a single input image.
    pub input: [usize; 3],
    pub convs: Vec<ConvSpec>,
    pub num_classes: usize,
    /// 1-based conv layer whose post-ReLU output is returned as the tap.
    pub tap_layer: usize,
}

impl Architecture {
    /// Two 3x3 convs (8 then 16 channels), 2x2 max pool after the first,
    /// global average pool and a linear head. Tap on the last conv.
    pub fn toy(input: [usize; 3], num_classes: usize) -> Self {
        Self {
            input,
            convs: vec![
                ConvSpec { out_channels: 8, kernel: 3, padding: 1, pool: Pool::Max2 },
                ConvSpec { out_channels: 16, kernel: 3, padding: 1, pool: Pool::None },
            ],
            num_classes,
            tap_layer: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// `[K_out, K_in, kh, kw]`
    pub weights: Tensor,
    /// `[K_out]`
    pub bias: Tensor,
    pub padding: usize,
    pub pool: Pool,
}

impl ConvLayer {
    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weights.shape()[2], self.weights.shape()[3])
    }

    /// Spatial size after convolution (before pooling).
    pub fn conv_out(&self, h: usize, w: usize) -> (usize, usize) {
        let (kh, kw) = self.kernel();
        (h + 2 * self.padding + 1 - kh, w + 2 * self.padding + 1 - kw)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[num_classes, K_last]`
    pub weights: Tensor,
    /// `[num_classes]`
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyCnn {
    pub input: [usize; 3],
    pub conv_layers: Vec<ConvLayer>,
    pub head: Linear,
    pub tap_layer: usize,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[b, num_classes]`, unnormalized.
    pub logits: Tensor,
    /// `[b, K, H', W']`, post-ReLU and pre-pool output of the tapped layer.
    pub tap_maps: Tensor,
}

impl ToyCnn {
    /// He-normal conv weights, scaled-normal head, zero biases.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut in_ch = arch.input[0];
        let mut conv_layers = Vec::with_capacity(arch.convs.len());
        for spec in &arch.convs {
            let fan_in = in_ch * spec.kernel * spec.kernel;
            let normal =
                Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).map_err(|e| Error::invalid(e.to_string()))?;
            let shape = vec![spec.out_channels, in_ch, spec.kernel, spec.kernel];
            let weights = Tensor::from_fn(shape, |_| normal.sample(&mut rng));
            conv_layers.push(ConvLayer {
                weights,
                bias: Tensor::zeros(vec![spec.out_channels]),
                padding: spec.padding,
                pool: spec.pool,
            });
            in_ch = spec.out_channels;
        }
        let normal = Normal::new(0.0f32, (1.0 / in_ch as f32).sqrt()).map_err(|e| Error::invalid(e.to_string()))?;
        let head = Linear {
            weights: Tensor::from_fn(vec![arch.num_classes, in_ch], |_| normal.sample(&mut rng)),
            bias: Tensor::zeros(vec![arch.num_classes]),
        };
        let model = ToyCnn { input: arch.input, conv_layers, head, tap_layer: arch.tap_layer };
        model.validate()?;
        Ok(model)
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input: self.input,
            convs: self
                .conv_layers
                .iter()
                .map(|c| ConvSpec {
                    out_channels: c.out_channels(),
                    kernel: c.kernel().0,
                    padding: c.padding,
                    pool: c.pool,
                })
                .collect(),
            num_classes: self.num_classes(),
            tap_layer: self.tap_layer,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.head.weights.shape()[0]
    }

    pub fn num_layers(&self) -> usize {
        self.conv_layers.len()
    }

    /// Output channel count of 1-based conv layer `layer`.
    pub fn channels(&self, layer: usize) -> Result<usize> {
        self.check_layer(layer)?;
        Ok(self.conv_layers[layer - 1].out_channels())
    }

    pub(crate) fn check_layer(&self, layer: usize) -> Result<()> {
        if layer == 0 || layer > self.conv_layers.len() {
            return Err(Error::invalid(format!("layer {layer} out of range 1..={}", self.conv_layers.len())));
        }
        Ok(())
    }

    /// Checks the structural invariants between adjacent layers.
    pub fn validate(&self) -> Result<()> {
        if self.conv_layers.is_empty() {
            return Err(Error::invalid("model has no conv layers"));
        }
        self.check_layer(self.tap_layer)?;
        let [mut ch, mut h, mut w] = self.input;
        for (j, layer) in self.conv_layers.iter().enumerate() {
            let loc = format!("conv layer {}", j + 1);
            if layer.weights.ndim() != 4 {
                return Err(Error::shape(loc, "weights must be 4-D"));
            }
            if layer.in_channels() != ch {
                return Err(Error::shape(
                    loc,
                    format!("expects {} input channels, previous layer gives {ch}", layer.in_channels()),
                ));
            }
            if layer.bias.shape() != [layer.out_channels()] {
                return Err(Error::shape(loc, "bias length differs from output channels"));
            }
            let (kh, kw) = layer.kernel();
            if h + 2 * layer.padding < kh || w + 2 * layer.padding < kw {
                return Err(Error::shape(loc, format!("kernel larger than {h}x{w} input")));
            }
            let (oh, ow) = layer.conv_out(h, w);
            (h, w) = match layer.pool {
                Pool::None => (oh, ow),
                Pool::Max2 => (oh / 2, ow / 2),
            };
            if h == 0 || w == 0 {
                return Err(Error::shape(loc, "spatial size collapses to zero"));
            }
            ch = layer.out_channels();
        }
        if self.head.weights.ndim() != 2 || self.head.weights.shape()[1] != ch {
            return Err(Error::shape(
                "head",
                format!("linear input width {:?} does not match {ch} channels", self.head.weights.shape()),
            ));
        }
        if self.head.bias.shape() != [self.num_classes()] {
            return Err(Error::shape("head", "bias length differs from class count"));
        }
        Ok(())
    }

    /// Parameter slices in declaration order: per conv layer weights then
    /// bias, then head weights and bias.
    pub fn params(&self) -> Vec<&[f32]> {
        let mut out = Vec::with_capacity(2 * self.conv_layers.len() + 2);
        for c in &self.conv_layers {
            out.push(c.weights.data());
            out.push(c.bias.data());
        }
        out.push(self.head.weights.data());
        out.push(self.head.bias.data());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out = Vec::with_capacity(2 * self.conv_layers.len() + 2);
        for c in &mut self.conv_layers {
            out.push(c.weights.data_mut());
            out.push(c.bias.data_mut());
        }
        out.push(self.head.weights.data_mut());
        out.push(self.head.bias.data_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Spatial size of the post-ReLU map of every layer.
    pub(crate) fn map_sizes(&self) -> Vec<(usize, usize)> {
        let (mut h, mut w) = (self.input[1], self.input[2]);
        let mut out = Vec::with_capacity(self.conv_layers.len());
        for layer in &self.conv_layers {
            let (oh, ow) = layer.conv_out(h, w);
            out.push((oh, ow));
            (h, w) = match layer.pool {
                Pool::None => (oh, ow),
                Pool::Max2 => (oh / 2, ow / 2),
            };
        }
        out
    }

    fn check_images(&self, images: &Tensor) -> Result<usize> {
        let s = images.shape();
        if s.len() != 4 || s[1..] != self.input {
            return Err(Error::shape(
                "input",
                format!("expected [b, {}, {}, {}], got {s:?}", self.input[0], self.input[1], self.input[2]),
            ));
        }
        if s[0] == 0 {
            return Err(Error::invalid("empty batch"));
        }
        Ok(s[0])
    }

    /// Forward pass tapping the model's configured layer.
    pub fn forward(&self, images: &Tensor) -> Result<ForwardOutput> {
        self.forward_tap(images, self.tap_layer)
    }

    /// Forward pass returning the post-ReLU maps of 1-based `layer`.
    pub fn forward_tap(&self, images: &Tensor, layer: usize) -> Result<ForwardOutput> {
        self.validate()?;
        self.check_layer(layer)?;
        let b = self.check_images(images)?;
        let per_sample: Vec<Result<(Vec<f32>, Vec<f32>)>> = (0..b)
            .into_par_iter()
            .map(|i| {
                let trace = conv::forward_sample(self, images.row(i))?;
                let tap = trace.layers[layer - 1].activation.clone();
                Ok((trace.logits, tap))
            })
            .collect();
        let classes = self.num_classes();
        let k = self.conv_layers[layer - 1].out_channels();
        let (th, tw) = self.map_sizes()[layer - 1];
        let mut logits = Vec::with_capacity(b * classes);
        let mut taps = Vec::with_capacity(b * k * th * tw);
        for r in per_sample {
            let (l, t) = r?;
            logits.extend(l);
            taps.extend(t);
        }
        Ok(ForwardOutput {
            logits: Tensor::new(vec![b, classes], logits)?,
            tap_maps: Tensor::new(vec![b, k, th, tw], taps)?,
        })
    }

    /// Logits only; skips copying tap maps.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        self.validate()?;
        let b = self.check_images(images)?;
        let rows: Vec<Result<Vec<f32>>> =
            (0..b).into_par_iter().map(|i| conv::forward_sample(self, images.row(i)).map(|t| t.logits)).collect();
        let mut data = Vec::with_capacity(b * self.num_classes());
        for r in rows {
            data.extend(r?);
        }
        Tensor::new(vec![b, self.num_classes()], data)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
