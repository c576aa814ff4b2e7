use std::collections::BTreeSet;

use super::{ConvLayer, Linear, ToyCnn};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Keep only the listed indices along `axis` of `t`.
fn keep_along(t: &Tensor, axis: usize, keep: &[usize]) -> Tensor {
    let shape = t.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let n = shape[axis];
    let mut data = Vec::with_capacity(outer * keep.len() * inner);
    for o in 0..outer {
        for &k in keep {
            let start = (o * n + k) * inner;
            data.extend_from_slice(&t.data()[start..start + inner]);
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[axis] = keep.len();
    Tensor::new(new_shape, data).expect("kept slice sizes are consistent")
}

/// Structurally delete output channels of 1-based conv `layer`.
///
/// The filters and biases of the listed channels go away, as do the matching
/// input slices of the next conv layer, or the matching head columns when
/// `layer` is the last conv (each channel feeds exactly one pooled feature).
/// Surviving parameters are copied bit-for-bit.
pub fn remove_channels(model: &ToyCnn, layer: usize, channels: &[usize]) -> Result<ToyCnn> {
    model.validate()?;
    model.check_layer(layer)?;
    if channels.is_empty() {
        return Err(Error::invalid("channel set to remove is empty"));
    }
    let k = model.conv_layers[layer - 1].out_channels();
    let drop: BTreeSet<usize> = channels.iter().copied().collect();
    if let Some(&bad) = drop.iter().find(|&&c| c >= k) {
        return Err(Error::invalid(format!("channel {bad} out of range for layer {layer} with {k} channels")));
    }
    if drop.len() >= k {
        return Err(Error::invalid(format!("cannot remove all {k} channels of layer {layer}")));
    }
    let keep: Vec<usize> = (0..k).filter(|c| !drop.contains(c)).collect();

    let mut out = model.clone();
    let target = &model.conv_layers[layer - 1];
    out.conv_layers[layer - 1] = ConvLayer {
        weights: keep_along(&target.weights, 0, &keep),
        bias: keep_along(&target.bias, 0, &keep),
        padding: target.padding,
        pool: target.pool,
    };
    if layer < model.conv_layers.len() {
        let next = &model.conv_layers[layer];
        out.conv_layers[layer].weights = keep_along(&next.weights, 1, &keep);
    } else {
        out.head = Linear { weights: keep_along(&model.head.weights, 1, &keep), bias: model.head.bias.clone() };
    }
    out.validate()?;
    Ok(out)
}
