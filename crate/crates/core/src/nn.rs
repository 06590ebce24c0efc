//! Minimal CNN building blocks with hand-written backward passes.
//!
//! Networks are plain sequences of layers whose parameters live in one flat
//! `Vec<f64>`, so optimizers, checkpoints and finite-difference checks can all
//! treat a model as a single parameter vector.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Dense activation tensor with layout `[c][h][w]`. Vectors use `h = w = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { c: data.len(), h: 1, w: 1, data }
    }

    pub fn from_image(img: &Image) -> Self {
        Self { c: img.channels, h: img.height, w: img.width, data: img.data.clone() }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    /// 3x3 convolution, stride 1, zero padding 1.
    Conv3x3 {
        in_ch: usize,
        out_ch: usize,
    },
    Relu,
    MaxPool2,
    GlobalAvgPool,
    Linear {
        in_dim: usize,
        out_dim: usize,
    },
}

impl LayerSpec {
    pub fn num_params(&self) -> usize {
        match *self {
            LayerSpec::Conv3x3 { in_ch, out_ch } => out_ch * in_ch * 9 + out_ch,
            LayerSpec::Linear { in_dim, out_dim } => out_dim * in_dim + out_dim,
            _ => 0,
        }
    }

    pub fn output_shape(&self, (c, h, w): (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        match *self {
            LayerSpec::Conv3x3 { in_ch, out_ch } => {
                if c != in_ch {
                    return Err(Error::Shape(format!("conv expects {in_ch} channels, got {c}")));
                }
                Ok((out_ch, h, w))
            }
            LayerSpec::Relu => Ok((c, h, w)),
            LayerSpec::MaxPool2 => {
                if h < 2 || w < 2 {
                    return Err(Error::Shape(format!("cannot pool a {h}x{w} map")));
                }
                Ok((c, h / 2, w / 2))
            }
            LayerSpec::GlobalAvgPool => Ok((c, 1, 1)),
            LayerSpec::Linear { in_dim, out_dim } => {
                if c * h * w != in_dim {
                    return Err(Error::Shape(format!("linear expects {in_dim} inputs, got {}", c * h * w)));
                }
                Ok((out_dim, 1, 1))
            }
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Conv3x3 { in_ch, .. } => in_ch * 9,
            LayerSpec::Linear { in_dim, .. } => in_dim,
            _ => 0,
        }
    }

    fn weight_len(&self) -> usize {
        match *self {
            LayerSpec::Conv3x3 { in_ch, out_ch } => out_ch * in_ch * 9,
            LayerSpec::Linear { in_dim, out_dim } => out_dim * in_dim,
            _ => 0,
        }
    }
}

/// Feed-forward stack of layers over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential {
    layers: Vec<LayerSpec>,
    offsets: Vec<usize>,
    pub params: Vec<f64>,
}

impl Sequential {
    /// Builds the stack with He-normal weights and zero biases.
    pub fn new(layers: Vec<LayerSpec>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut offsets = Vec::with_capacity(layers.len());
        let mut params = Vec::new();
        for layer in &layers {
            offsets.push(params.len());
            let wl = layer.weight_len();
            if wl > 0 {
                let std = (2.0 / layer.fan_in() as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("valid std");
                params.extend((0..wl).map(|_| normal.sample(&mut rng)));
                params.extend(std::iter::repeat_n(0.0, layer.num_params() - wl));
            }
        }
        Self { layers, offsets, params }
    }

    pub fn from_params(layers: Vec<LayerSpec>, params: Vec<f64>) -> Result<Self> {
        let mut offsets = Vec::with_capacity(layers.len());
        let mut total = 0;
        for layer in &layers {
            offsets.push(total);
            total += layer.num_params();
        }
        if total != params.len() {
            return Err(Error::Shape(format!(
                "parameter blob has {} values, architecture needs {total}",
                params.len()
            )));
        }
        Ok(Self { layers, offsets, params })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Parameter slice belonging to layer `i`.
    pub fn layer_params(&self, i: usize) -> &[f64] {
        let start = self.offsets[i];
        &self.params[start..start + self.layers[i].num_params()]
    }

    pub fn layer_params_mut(&mut self, i: usize) -> &mut [f64] {
        let start = self.offsets[i];
        let n = self.layers[i].num_params();
        &mut self.params[start..start + n]
    }

    /// Range of the flat parameter vector owned by layer `i`.
    pub fn layer_param_range(&self, i: usize) -> std::ops::Range<usize> {
        let start = self.offsets[i];
        start..start + self.layers[i].num_params()
    }

    pub fn output_shape(&self, input: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        self.layers.iter().try_fold(input, |s, l| l.output_shape(s))
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.output_shape(input.shape())?;
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer_forward(layer, self.layer_params(i), &x);
        }
        Ok(x)
    }

    /// Output of the first `n_layers` layers.
    pub fn forward_prefix(&self, input: &Tensor, n_layers: usize) -> Result<Tensor> {
        let n = n_layers.min(self.layers.len());
        self.layers[..n].iter().try_fold(input.shape(), |s, l| l.output_shape(s))?;
        let mut x = input.clone();
        for (i, layer) in self.layers[..n].iter().enumerate() {
            x = layer_forward(layer, self.layer_params(i), &x);
        }
        Ok(x)
    }

    /// Forward pass keeping every intermediate activation for backprop.
    /// `acts[0]` is the input and `acts[n]` the output.
    pub fn forward_trace(&self, input: &Tensor) -> Result<Vec<Tensor>> {
        self.output_shape(input.shape())?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer_forward(layer, self.layer_params(i), acts.last().unwrap());
            acts.push(next);
        }
        Ok(acts)
    }

    /// Accumulates parameter gradients into `grad_params` and returns the
    /// gradient with respect to the input.
    pub fn backward(&self, acts: &[Tensor], grad_out: Tensor, grad_params: &mut [f64]) -> Tensor {
        debug_assert_eq!(acts.len(), self.layers.len() + 1);
        debug_assert_eq!(grad_params.len(), self.params.len());
        let mut g = grad_out;
        for i in (0..self.layers.len()).rev() {
            let range = self.layer_param_range(i);
            g = layer_backward(
                &self.layers[i],
                &self.params[range.clone()],
                &acts[i],
                &acts[i + 1],
                &g,
                &mut grad_params[range],
            );
        }
        g
    }
}

fn layer_forward(layer: &LayerSpec, params: &[f64], x: &Tensor) -> Tensor {
    match *layer {
        LayerSpec::Conv3x3 { in_ch, out_ch } => conv3x3_forward(in_ch, out_ch, params, x),
        LayerSpec::Relu => Tensor { data: x.data.iter().map(|v| v.max(0.0)).collect(), ..*x },
        LayerSpec::MaxPool2 => maxpool2_forward(x),
        LayerSpec::GlobalAvgPool => {
            let hw = (x.h * x.w) as f64;
            let data = x.data.chunks(x.h * x.w).map(|ch| ch.iter().sum::<f64>() / hw).collect();
            Tensor::vector(data)
        }
        LayerSpec::Linear { in_dim, out_dim } => {
            let (w, b) = params.split_at(in_dim * out_dim);
            let data = (0..out_dim)
                .map(|o| {
                    let row = &w[o * in_dim..(o + 1) * in_dim];
                    b[o] + row.iter().zip(&x.data).map(|(a, v)| a * v).sum::<f64>()
                })
                .collect();
            Tensor::vector(data)
        }
    }
}

fn layer_backward(layer: &LayerSpec, params: &[f64], x: &Tensor, y: &Tensor, g: &Tensor, gp: &mut [f64]) -> Tensor {
    match *layer {
        LayerSpec::Conv3x3 { in_ch, out_ch } => conv3x3_backward(in_ch, out_ch, params, x, g, gp),
        LayerSpec::Relu => {
            Tensor { data: x.data.iter().zip(&g.data).map(|(v, gv)| if *v > 0.0 { *gv } else { 0.0 }).collect(), ..*x }
        }
        LayerSpec::MaxPool2 => maxpool2_backward(x, y, g),
        LayerSpec::GlobalAvgPool => {
            let hw = x.h * x.w;
            let mut out = Tensor::zeros(x.c, x.h, x.w);
            for c in 0..x.c {
                let v = g.data[c] / hw as f64;
                out.data[c * hw..(c + 1) * hw].fill(v);
            }
            out
        }
        LayerSpec::Linear { in_dim, out_dim } => {
            let (w, _) = params.split_at(in_dim * out_dim);
            let (gw, gb) = gp.split_at_mut(in_dim * out_dim);
            let mut gx = vec![0.0; in_dim];
            for o in 0..out_dim {
                let go = g.data[o];
                gb[o] += go;
                if go == 0.0 {
                    continue;
                }
                let row = &w[o * in_dim..(o + 1) * in_dim];
                let grow = &mut gw[o * in_dim..(o + 1) * in_dim];
                for i in 0..in_dim {
                    grow[i] += go * x.data[i];
                    gx[i] += go * row[i];
                }
            }
            Tensor { c: x.c, h: x.h, w: x.w, data: gx }
        }
    }
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `k - 1`.
#[inline]
fn valid_range(k: usize, n: usize) -> (usize, usize) {
    match k {
        0 => (1, n),
        1 => (0, n),
        _ => (0, n.saturating_sub(1)),
    }
}

fn conv3x3_forward(in_ch: usize, out_ch: usize, params: &[f64], x: &Tensor) -> Tensor {
    let (h, w) = (x.h, x.w);
    let hw = h * w;
    let (weights, bias) = params.split_at(out_ch * in_ch * 9);
    let mut out = Tensor::zeros(out_ch, h, w);
    for oc in 0..out_ch {
        let o = &mut out.data[oc * hw..(oc + 1) * hw];
        o.fill(bias[oc]);
        for ic in 0..in_ch {
            let inp = &x.data[ic * hw..(ic + 1) * hw];
            let kbase = (oc * in_ch + ic) * 9;
            for ky in 0..3 {
                let (y0, y1) = valid_range(ky, h);
                for kx in 0..3 {
                    let wv = weights[kbase + ky * 3 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = valid_range(kx, w);
                    for yy in y0..y1 {
                        let iy = yy + ky - 1;
                        let orow = &mut o[yy * w + x0..yy * w + x1];
                        let irow = &inp[iy * w + x0 + kx - 1..iy * w + x1 + kx - 1];
                        for (ov, iv) in orow.iter_mut().zip(irow) {
                            *ov += wv * iv;
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv3x3_backward(in_ch: usize, out_ch: usize, params: &[f64], x: &Tensor, g: &Tensor, gp: &mut [f64]) -> Tensor {
    let (h, w) = (x.h, x.w);
    let hw = h * w;
    let (weights, _) = params.split_at(out_ch * in_ch * 9);
    let (gw, gb) = gp.split_at_mut(out_ch * in_ch * 9);
    let mut gx = Tensor::zeros(in_ch, h, w);
    for oc in 0..out_ch {
        let go = &g.data[oc * hw..(oc + 1) * hw];
        gb[oc] += go.iter().sum::<f64>();
        for ic in 0..in_ch {
            let inp = &x.data[ic * hw..(ic + 1) * hw];
            let gin = &mut gx.data[ic * hw..(ic + 1) * hw];
            let kbase = (oc * in_ch + ic) * 9;
            for ky in 0..3 {
                let (y0, y1) = valid_range(ky, h);
                for kx in 0..3 {
                    let wv = weights[kbase + ky * 3 + kx];
                    let (x0, x1) = valid_range(kx, w);
                    let mut acc = 0.0;
                    for yy in y0..y1 {
                        let iy = yy + ky - 1;
                        let grow = &go[yy * w + x0..yy * w + x1];
                        let ioff = iy * w + x0 + kx - 1;
                        let irow = &inp[ioff..ioff + (x1 - x0)];
                        let girow = &mut gin[ioff..ioff + (x1 - x0)];
                        for ((gv, iv), giv) in grow.iter().zip(irow).zip(girow.iter_mut()) {
                            acc += gv * iv;
                            *giv += gv * wv;
                        }
                    }
                    gw[kbase + ky * 3 + kx] += acc;
                }
            }
        }
    }
    gx
}

fn maxpool2_forward(x: &Tensor) -> Tensor {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.c, oh, ow);
    for c in 0..x.c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(x.data[(c * x.h + 2 * oy + dy) * x.w + 2 * ox + dx]);
                    }
                }
                out.data[(c * oh + oy) * ow + ox] = m;
            }
        }
    }
    out
}

fn maxpool2_backward(x: &Tensor, y: &Tensor, g: &Tensor) -> Tensor {
    let (oh, ow) = (y.h, y.w);
    let mut gx = Tensor::zeros(x.c, x.h, x.w);
    for c in 0..x.c {
        for oy in 0..oh {
            for ox in 0..ow {
                let oi = (c * oh + oy) * ow + ox;
                // first maximal element in scan order takes the gradient
                'scan: for dy in 0..2 {
                    for dx in 0..2 {
                        let ii = (c * x.h + 2 * oy + dy) * x.w + 2 * ox + dx;
                        if x.data[ii] == y.data[oi] {
                            gx.data[ii] += g.data[oi];
                            break 'scan;
                        }
                    }
                }
            }
        }
    }
    gx
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// `log Σ exp(x_j)` via the max-shift identity.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss_and_grad(net: &Sequential, x: &Tensor, probe: &[f64]) -> (f64, Vec<f64>, Tensor) {
        let acts = net.forward_trace(x).unwrap();
        let out = acts.last().unwrap();
        let loss: f64 = out.data.iter().zip(probe).map(|(a, b)| a * b).sum();
        let mut gp = vec![0.0; net.num_params()];
        let gx = net.backward(&acts, Tensor { data: probe.to_vec(), ..out.clone() }, &mut gp);
        (loss, gp, gx)
    }

    #[test]
    fn backward_matches_finite_differences() {
        let layers = vec![
            LayerSpec::Conv3x3 { in_ch: 2, out_ch: 3 },
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
            LayerSpec::Conv3x3 { in_ch: 3, out_ch: 4 },
            LayerSpec::GlobalAvgPool,
            LayerSpec::Linear { in_dim: 4, out_dim: 3 },
        ];
        let mut net = Sequential::new(layers, 3);
        for (i, b) in net.params.iter_mut().enumerate() {
            *b += 0.01 * ((i * 7919) % 13) as f64;
        }
        let mut x = Tensor::zeros(2, 6, 5);
        for (i, v) in x.data.iter_mut().enumerate() {
            *v = ((i * 31) % 17) as f64 / 17.0 - 0.3;
        }
        let probe = [0.3, -1.2, 0.7];
        let (_, gp, gx) = loss_and_grad(&net, &x, &probe);
        let h = 1e-6;
        for i in 0..net.num_params() {
            let mut p = net.clone();
            p.params[i] += h;
            let (lp, _, _) = loss_and_grad(&p, &x, &probe);
            p.params[i] -= 2.0 * h;
            let (lm, _, _) = loss_and_grad(&p, &x, &probe);
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - gp[i]).abs() < 1e-6 * (1.0 + fd.abs()), "param {i}: fd {fd} vs {}", gp[i]);
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data[i] += h;
            let (lp, _, _) = loss_and_grad(&net, &xp, &probe);
            xp.data[i] -= 2.0 * h;
            let (lm, _, _) = loss_and_grad(&net, &xp, &probe);
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - gx.data[i]).abs() < 1e-6 * (1.0 + fd.abs()), "input {i}");
        }
    }

    #[test]
    fn conv_identity_kernel_copies_input() {
        let mut net = Sequential::new(vec![LayerSpec::Conv3x3 { in_ch: 1, out_ch: 1 }], 0);
        net.params.fill(0.0);
        net.params[4] = 1.0;
        let x = Tensor { c: 1, h: 3, w: 4, data: (0..12).map(|v| v as f64).collect() };
        assert_eq!(net.forward(&x).unwrap(), x);
    }

    #[test]
    fn shape_errors_are_reported() {
        let net = Sequential::new(vec![LayerSpec::Conv3x3 { in_ch: 3, out_ch: 2 }], 0);
        assert!(net.forward(&Tensor::zeros(2, 4, 4)).is_err());
        assert!(Sequential::from_params(vec![LayerSpec::Linear { in_dim: 2, out_dim: 2 }], vec![0.0; 5]).is_err());
    }

    #[test]
    fn logsumexp_is_overflow_safe() {
        assert!((logsumexp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-9);
        let p = softmax(&[1000.0, 0.0]);
        assert!(p[0] > 0.999 && p.iter().all(|v| v.is_finite()));
    }
}
