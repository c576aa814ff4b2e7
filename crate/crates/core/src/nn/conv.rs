//! Per-sample kernels: im2col convolution, ReLU, 2x2 max pool, global
//! average pool and the linear head, plus their reverse-mode adjoints.

use super::{Pool, ToyCnn};
use crate::error::{Error, Result};

pub(crate) struct LayerTrace {
    /// `[K_in*kh*kw, oh*ow]`
    cols: Vec<f32>,
    /// `[K_out, oh*ow]`, post-ReLU.
    pub activation: Vec<f32>,
    /// For pooled layers, flat index into `activation` of each pooled max.
    argmax: Option<Vec<usize>>,
    in_hw: (usize, usize),
    out_hw: (usize, usize),
}

pub(crate) struct SampleTrace {
    pub layers: Vec<LayerTrace>,
    features: Vec<f32>,
    /// Spatial element count averaged by the global pool.
    gap_size: usize,
    pub logits: Vec<f32>,
}

fn im2col(
    x: &[f32],
    ch: usize,
    (h, w): (usize, usize),
    (kh, kw): (usize, usize),
    pad: usize,
) -> (Vec<f32>, usize, usize) {
    let oh = h + 2 * pad + 1 - kh;
    let ow = w + 2 * pad + 1 - kw;
    let p = oh * ow;
    let mut cols = vec![0.0f32; ch * kh * kw * p];
    for c in 0..ch {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = oy + ki;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let src = &x[(c * h + iy - pad) * w..(c * h + iy - pad + 1) * w];
                    for ox in 0..ow {
                        let ix = ox + kj;
                        if ix >= pad && ix - pad < w {
                            dst[oy * ow + ox] = src[ix - pad];
                        }
                    }
                }
            }
        }
    }
    (cols, oh, ow)
}

fn col2im(cols: &[f32], ch: usize, (h, w): (usize, usize), (kh, kw): (usize, usize), pad: usize) -> Vec<f32> {
    let oh = h + 2 * pad + 1 - kh;
    let ow = w + 2 * pad + 1 - kw;
    let p = oh * ow;
    let mut x = vec![0.0f32; ch * h * w];
    for c in 0..ch {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = oy + ki;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = ox + kj;
                        if ix >= pad && ix - pad < w {
                            x[(c * h + iy - pad) * w + ix - pad] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

fn max_pool2(act: &[f32], ch: usize, (h, w): (usize, usize)) -> (Vec<f32>, Vec<usize>) {
    let (ph, pw) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(ch * ph * pw);
    let mut idx = Vec::with_capacity(ch * ph * pw);
    for c in 0..ch {
        for py in 0..ph {
            for px in 0..pw {
                let mut best = (c * h + 2 * py) * w + 2 * px;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = (c * h + 2 * py + dy) * w + 2 * px + dx;
                    if act[i] > act[best] {
                        best = i;
                    }
                }
                out.push(act[best]);
                idx.push(best);
            }
        }
    }
    (out, idx)
}

pub(crate) fn forward_sample(model: &ToyCnn, image: &[f32]) -> Result<SampleTrace> {
    let [mut ch, mut h, mut w] = model.input;
    let mut x = image.to_vec();
    let mut layers = Vec::with_capacity(model.conv_layers.len());
    for (j, layer) in model.conv_layers.iter().enumerate() {
        let k_out = layer.out_channels();
        let kernel = layer.kernel();
        let (cols, oh, ow) = im2col(&x, ch, (h, w), kernel, layer.padding);
        let p = oh * ow;
        let r = ch * kernel.0 * kernel.1;
        let wts = layer.weights.data();
        let mut act = vec![0.0f32; k_out * p];
        for o in 0..k_out {
            let out = &mut act[o * p..(o + 1) * p];
            out.fill(layer.bias.data()[o]);
            for (ri, &wv) in wts[o * r..(o + 1) * r].iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                let src = &cols[ri * p..(ri + 1) * p];
                for (d, &s) in out.iter_mut().zip(src) {
                    *d += wv * s;
                }
            }
            for v in out.iter_mut() {
                *v = v.max(0.0);
            }
        }
        if !act.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("conv layer {}", j + 1)));
        }
        let (next, argmax, nh, nw) = match layer.pool {
            Pool::None => (act.clone(), None, oh, ow),
            Pool::Max2 => {
                let (pooled, idx) = max_pool2(&act, k_out, (oh, ow));
                (pooled, Some(idx), oh / 2, ow / 2)
            }
        };
        layers.push(LayerTrace { cols, activation: act, argmax, in_hw: (h, w), out_hw: (oh, ow) });
        x = next;
        (ch, h, w) = (k_out, nh, nw);
    }
    let gap_size = h * w;
    let features: Vec<f32> = (0..ch)
        .map(|c| {
            let s: f64 = x[c * gap_size..(c + 1) * gap_size].iter().map(|&v| v as f64).sum();
            (s / gap_size as f64) as f32
        })
        .collect();
    let hw = model.head.weights.data();
    let logits: Vec<f32> = model
        .head
        .bias
        .data()
        .iter()
        .enumerate()
        .map(|(o, &b)| {
            let row = &hw[o * ch..(o + 1) * ch];
            b + row.iter().zip(&features).map(|(a, f)| a * f).sum::<f32>()
        })
        .collect();
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("head".into()));
    }
    Ok(SampleTrace { layers, features, gap_size, logits })
}

/// Accumulates this sample's parameter gradients into `grads`, laid out in
/// [`ToyCnn::params`] order, given dLoss/dLogits.
pub(crate) fn backward_sample(model: &ToyCnn, trace: &SampleTrace, dlogits: &[f32], grads: &mut [Vec<f32>]) {
    let n_conv = model.conv_layers.len();
    let ch = trace.features.len();
    let classes = dlogits.len();
    {
        let (gw, rest) = grads[2 * n_conv..].split_at_mut(1);
        for o in 0..classes {
            for c in 0..ch {
                gw[0][o * ch + c] += dlogits[o] * trace.features[c];
            }
            rest[0][o] += dlogits[o];
        }
    }
    let hw = model.head.weights.data();
    let dfeat: Vec<f32> = (0..ch).map(|c| (0..classes).map(|o| hw[o * ch + c] * dlogits[o]).sum::<f32>()).collect();
    // gradient w.r.t. the (possibly pooled) output of the last layer
    let mut dnext: Vec<f32> =
        dfeat.iter().flat_map(|&d| std::iter::repeat_n(d / trace.gap_size as f32, trace.gap_size)).collect();

    for j in (0..n_conv).rev() {
        let layer = &model.conv_layers[j];
        let lt = &trace.layers[j];
        let k_out = layer.out_channels();
        let k_in = layer.in_channels();
        let kernel = layer.kernel();
        let p = lt.out_hw.0 * lt.out_hw.1;
        let r = k_in * kernel.0 * kernel.1;

        let mut dact = match &lt.argmax {
            None => dnext,
            Some(idx) => {
                let mut d = vec![0.0f32; k_out * p];
                for (g, &i) in dnext.iter().zip(idx) {
                    d[i] += g;
                }
                d
            }
        };
        for (d, &a) in dact.iter_mut().zip(&lt.activation) {
            if a <= 0.0 {
                *d = 0.0;
            }
        }
        let (gw, gb) = {
            let (a, b) = grads[2 * j..2 * j + 2].split_at_mut(1);
            (&mut a[0], &mut b[0])
        };
        for o in 0..k_out {
            let dp = &dact[o * p..(o + 1) * p];
            gb[o] += dp.iter().sum::<f32>();
            for ri in 0..r {
                let col = &lt.cols[ri * p..(ri + 1) * p];
                gw[o * r + ri] += dp.iter().zip(col).map(|(a, b)| a * b).sum::<f32>();
            }
        }
        if j == 0 {
            break;
        }
        let wts = layer.weights.data();
        let mut dcols = vec![0.0f32; r * p];
        for o in 0..k_out {
            let dp = &dact[o * p..(o + 1) * p];
            for ri in 0..r {
                let wv = wts[o * r + ri];
                if wv == 0.0 {
                    continue;
                }
                let dst = &mut dcols[ri * p..(ri + 1) * p];
                for (d, &g) in dst.iter_mut().zip(dp) {
                    *d += wv * g;
                }
            }
        }
        dnext = col2im(&dcols, k_in, lt.in_hw, kernel, layer.padding);
    }
}
