//! A small inference-only CNN engine and two model builders: a plain CNN
//! with random weights and a C4 group-convolution network that is exactly
//! equivariant under quarter turns.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::actions::rotate_quarter;
use crate::error::{Error, Result};
use crate::metrics::EvalFunction;
use crate::tensor::Tensor;

/// Batch norm epsilon used by both builders.
pub const BN_EPSILON: f64 = 1e-5;

/// Number of rotations handled by the group-convolution layers.
pub const C4_ORDER: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// Cross-correlation; `weight` is `(out, in, k, k)`.
    Conv2d {
        weight: Tensor,
        bias: Option<Tensor>,
        stride: usize,
        padding: usize,
    },
    /// Inference batch norm. Statistics are indexed by `channel / group_size`,
    /// so `group_size = 4` shares them across each regular block.
    BatchNorm {
        gamma: Tensor,
        beta: Tensor,
        mean: Tensor,
        var: Tensor,
        group_size: usize,
        eps: f64,
    },
    Relu,
    /// Stride equals window; the input is padded symmetrically to a multiple
    /// of the window.
    MaxPool {
        window: usize,
    },
    AvgPool {
        window: usize,
    },
    /// Lifting convolution; `base` is `(B, in, k, k)` and produces `4B`
    /// channels, channel `(b, t)` correlating with `base[b]` turned `t` times.
    GroupConvLift {
        base: Tensor,
        bias: Option<Tensor>,
        padding: usize,
    },
    /// Regular C4 group convolution; `base` is `(B_out, B_in, 4, k, k)`.
    GroupConv {
        base: Tensor,
        bias: Option<Tensor>,
        padding: usize,
    },
    /// Mean over each block of `group_size` consecutive channels.
    GroupPool {
        group_size: usize,
    },
    Flatten,
    /// `weight` is `(out, in)`.
    Linear {
        weight: Tensor,
        bias: Option<Tensor>,
    },
    Softmax,
}

fn shape_err(layer: &str, msg: impl std::fmt::Display) -> Error {
    Error::invalid(format!("{layer}: {msg}"))
}

fn stack3(layer: &str, dims: &[usize]) -> Result<(usize, usize, usize)> {
    match *dims {
        [c, h, w] => Ok((c, h, w)),
        [h, w] => Ok((1, h, w)),
        _ => Err(shape_err(
            layer,
            format!("expected (C, H, W) input, got {dims:?}"),
        )),
    }
}

fn check_bias(layer: &str, bias: &Option<Tensor>, len: usize) -> Result<()> {
    match bias {
        Some(b) if b.dims() != [len] => Err(shape_err(
            layer,
            format!("bias has shape {:?}, expected [{len}]", b.dims()),
        )),
        _ => Ok(()),
    }
}

/// Smallest even padding making `size` a multiple of `window`.
pub fn pool_padding(size: usize, window: usize) -> Result<usize> {
    if window == 0 {
        return Err(Error::invalid("pool window must be positive"));
    }
    (0..2 * window)
        .step_by(2)
        .find(|p| (size + p).is_multiple_of(window))
        .ok_or_else(|| {
            Error::invalid(format!(
                "cannot pad {size} symmetrically to a multiple of window {window}"
            ))
        })
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv2d { .. } => "conv2d",
            Layer::BatchNorm { .. } => "batchnorm",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "maxpool",
            Layer::AvgPool { .. } => "avgpool",
            Layer::GroupConvLift { .. } => "groupconv-lift",
            Layer::GroupConv { .. } => "groupconv",
            Layer::GroupPool { .. } => "group-pool",
            Layer::Flatten => "flatten",
            Layer::Linear { .. } => "linear",
            Layer::Softmax => "softmax",
        }
    }

    /// Output shape for the given input shape, validating parameters.
    pub fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        let name = self.kind_name();
        match self {
            Layer::Conv2d {
                weight,
                bias,
                stride,
                padding,
            } => {
                let (c, h, w) = stack3(name, input)?;
                let (o, i, kh, kw) = conv_weight_dims(name, weight)?;
                if i != c {
                    return Err(shape_err(
                        name,
                        format!("weight expects {i} input channels, got {c}"),
                    ));
                }
                check_bias(name, bias, o)?;
                if *stride == 0 {
                    return Err(shape_err(name, "stride must be positive"));
                }
                let (oh, ow) = conv_out(name, h, w, kh, kw, *stride, *padding)?;
                Ok(vec![o, oh, ow])
            }
            Layer::BatchNorm {
                gamma,
                beta,
                mean,
                var,
                group_size,
                ..
            } => {
                let (c, _, _) = stack3(name, input)?;
                if *group_size == 0 || c % group_size != 0 {
                    return Err(shape_err(
                        name,
                        format!("{c} channels not divisible by group size {group_size}"),
                    ));
                }
                let groups = c / group_size;
                for (label, p) in [
                    ("gamma", gamma),
                    ("beta", beta),
                    ("mean", mean),
                    ("var", var),
                ] {
                    if p.dims() != [groups] {
                        return Err(shape_err(
                            name,
                            format!("{label} has shape {:?}, expected [{groups}]", p.dims()),
                        ));
                    }
                }
                if var.data().iter().any(|&v| v < 0.0) {
                    return Err(shape_err(name, "negative running variance"));
                }
                Ok(input.to_vec())
            }
            Layer::Relu | Layer::Softmax => Ok(input.to_vec()),
            Layer::MaxPool { window } | Layer::AvgPool { window } => {
                let (c, h, w) = stack3(name, input)?;
                let ph = pool_padding(h, *window)?;
                let pw = pool_padding(w, *window)?;
                Ok(vec![c, (h + ph) / window, (w + pw) / window])
            }
            Layer::GroupConvLift {
                base,
                bias,
                padding,
            } => {
                let (c, h, w) = stack3(name, input)?;
                let (b, i, kh, kw) = conv_weight_dims(name, base)?;
                if i != c {
                    return Err(shape_err(
                        name,
                        format!("base expects {i} input channels, got {c}"),
                    ));
                }
                if kh != kw {
                    return Err(shape_err(name, "base filters must be square"));
                }
                check_bias(name, bias, b)?;
                let (oh, ow) = conv_out(name, h, w, kh, kw, 1, *padding)?;
                Ok(vec![b * C4_ORDER, oh, ow])
            }
            Layer::GroupConv {
                base,
                bias,
                padding,
            } => {
                let (c, h, w) = stack3(name, input)?;
                let (bo, bi, n, kh, kw) = match *base.dims() {
                    [bo, bi, n, kh, kw] => (bo, bi, n, kh, kw),
                    ref d => {
                        return Err(shape_err(
                            name,
                            format!("base must be (B_out, B_in, 4, k, k), got {d:?}"),
                        ))
                    }
                };
                if n != C4_ORDER || kh != kw {
                    return Err(shape_err(
                        name,
                        format!("base must be (B_out, B_in, 4, k, k), got {:?}", base.dims()),
                    ));
                }
                if c != bi * C4_ORDER {
                    return Err(shape_err(
                        name,
                        format!("expects {} input channels, got {c}", bi * C4_ORDER),
                    ));
                }
                check_bias(name, bias, bo)?;
                let (oh, ow) = conv_out(name, h, w, kh, kw, 1, *padding)?;
                Ok(vec![bo * C4_ORDER, oh, ow])
            }
            Layer::GroupPool { group_size } => {
                let (c, h, w) = stack3(name, input)?;
                if *group_size == 0 || c % group_size != 0 {
                    return Err(shape_err(
                        name,
                        format!("{c} channels not divisible by group size {group_size}"),
                    ));
                }
                Ok(vec![c / group_size, h, w])
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Linear { weight, bias } => {
                let (o, i) = match *weight.dims() {
                    [o, i] => (o, i),
                    ref d => {
                        return Err(shape_err(
                            name,
                            format!("weight must be (out, in), got {d:?}"),
                        ))
                    }
                };
                if input != [i] {
                    return Err(shape_err(
                        name,
                        format!("expects a vector of length {i}, got {input:?}"),
                    ));
                }
                check_bias(name, bias, o)?;
                Ok(vec![o])
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let out_dims = self.output_dims(x.dims())?;
        let data = match self {
            Layer::Conv2d {
                weight,
                bias,
                stride,
                padding,
            } => conv2d(x, weight, bias.as_ref(), *stride, *padding, &out_dims),
            Layer::BatchNorm {
                gamma,
                beta,
                mean,
                var,
                group_size,
                eps,
            } => {
                let (c, h, w) = stack3("batchnorm", x.dims())?;
                let plane = h * w;
                let mut out = Vec::with_capacity(x.len());
                for ch in 0..c {
                    let g = ch / group_size;
                    let scale = gamma.data()[g] as f64 / (var.data()[g] as f64 + eps).sqrt();
                    let m = mean.data()[g] as f64;
                    let b = beta.data()[g] as f64;
                    out.extend(
                        x.data()[ch * plane..(ch + 1) * plane]
                            .iter()
                            .map(|&v| ((v as f64 - m) * scale + b) as f32),
                    );
                }
                out
            }
            Layer::Relu => x.data().iter().map(|&v| v.max(0.0)).collect(),
            Layer::MaxPool { window } => pool(x, *window, &out_dims, true),
            Layer::AvgPool { window } => pool(x, *window, &out_dims, false),
            Layer::GroupConvLift {
                base,
                bias,
                padding,
            } => {
                let weight = lift_filters(base)?;
                let bias = bias.as_ref().map(repeat_per_slot);
                conv2d(x, &weight, bias.as_ref(), 1, *padding, &out_dims)
            }
            Layer::GroupConv {
                base,
                bias,
                padding,
            } => {
                let weight = group_conv_filters(base)?;
                let bias = bias.as_ref().map(repeat_per_slot);
                conv2d(x, &weight, bias.as_ref(), 1, *padding, &out_dims)
            }
            Layer::GroupPool { group_size } => {
                let (_, h, w) = stack3("group-pool", x.dims())?;
                let plane = h * w;
                let mut out = vec![0.0f32; out_dims.iter().product()];
                for (blk, dst) in out.chunks_mut(plane).enumerate() {
                    for (p, d) in dst.iter_mut().enumerate() {
                        let s: f64 = (0..*group_size)
                            .map(|t| x.data()[(blk * group_size + t) * plane + p] as f64)
                            .sum();
                        *d = (s / *group_size as f64) as f32;
                    }
                }
                out
            }
            Layer::Flatten => x.data().to_vec(),
            Layer::Linear { weight, bias } => {
                let inputs = x.len();
                weight
                    .data()
                    .chunks(inputs)
                    .enumerate()
                    .map(|(o, row)| {
                        let mut acc = bias.as_ref().map_or(0.0, |b| b.data()[o] as f64);
                        for (&w, &v) in row.iter().zip(x.data()) {
                            acc += w as f64 * v as f64;
                        }
                        acc as f32
                    })
                    .collect()
            }
            Layer::Softmax => {
                let max = x.data().iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
                let exps: Vec<f64> = x.data().iter().map(|&v| (v as f64 - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                exps.iter().map(|e| (e / total) as f32).collect()
            }
        };
        Tensor::new(out_dims, data)
    }
}

/// Applies a single layer to `input`.
pub fn layer_forward(layer: &Layer, input: &Tensor) -> Result<Tensor> {
    layer.forward(input)
}

fn conv_weight_dims(name: &str, w: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *w.dims() {
        [o, i, kh, kw] => Ok((o, i, kh, kw)),
        ref d => Err(shape_err(
            name,
            format!("weight must be (out, in, k, k), got {d:?}"),
        )),
    }
}

fn conv_out(
    name: &str,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize)> {
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(shape_err(
            name,
            format!("kernel {kh}x{kw} larger than padded input {h}x{w}"),
        ));
    }
    Ok((
        (h + 2 * pad - kh) / stride + 1,
        (w + 2 * pad - kw) / stride + 1,
    ))
}

fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
    out_dims: &[usize],
) -> Vec<f32> {
    let (c, h, w) = match *x.dims() {
        [c, h, w] => (c, h, w),
        [h, w] => (1, h, w),
        _ => unreachable!("shape validated"),
    };
    let (o, _, kh, kw) = match *weight.dims() {
        [o, i, kh, kw] => (o, i, kh, kw),
        _ => unreachable!("shape validated"),
    };
    let (oh, ow) = (out_dims[1], out_dims[2]);
    let xd = x.data();
    let wd = weight.data();
    let mut out = Vec::with_capacity(o * oh * ow);
    for oc in 0..o {
        let b = bias.map_or(0.0, |b| b.data()[oc] as f64);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b;
                for ic in 0..c {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &xd[(ic * h + iy as usize) * w..][..w];
                        let wrow = &wd[((oc * c + ic) * kh + ky) * kw..][..kw];
                        for (kx, &wv) in wrow.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                acc += wv as f64 * xrow[ix as usize] as f64;
                            }
                        }
                    }
                }
                out.push(acc as f32);
            }
        }
    }
    out
}

fn pool(x: &Tensor, window: usize, out_dims: &[usize], max: bool) -> Vec<f32> {
    let (h, w) = match *x.dims() {
        [_, h, w] | [h, w] => (h, w),
        _ => unreachable!("shape validated"),
    };
    let (c, oh, ow) = (out_dims[0], out_dims[1], out_dims[2]);
    // Symmetric offsets; the padding cells are zero for averaging and
    // ignored for the maximum.
    let off_y = (oh * window - h) / 2;
    let off_x = (ow * window - w) / 2;
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &x.data()[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut sum = 0.0f64;
                for ky in 0..window {
                    let iy = (oy * window + ky) as isize - off_y as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..window {
                        let ix = (ox * window + kx) as isize - off_x as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let v = plane[iy as usize * w + ix as usize];
                        best = best.max(v);
                        sum += v as f64;
                    }
                }
                out.push(if max {
                    best
                } else {
                    (sum / (window * window) as f64) as f32
                });
            }
        }
    }
    out
}

fn repeat_per_slot(bias: &Tensor) -> Tensor {
    let data = bias
        .data()
        .iter()
        .flat_map(|&b| std::iter::repeat_n(b, C4_ORDER))
        .collect::<Vec<_>>();
    Tensor::from_parts(vec![data.len()], data)
}

/// Materialized `(4B, in, k, k)` weights of a lifting convolution.
pub fn lift_filters(base: &Tensor) -> Result<Tensor> {
    let (b, i, k, kw) = conv_weight_dims("groupconv-lift", base)?;
    if k != kw {
        return Err(shape_err("groupconv-lift", "base filters must be square"));
    }
    let plane = k * k;
    let mut out = Vec::with_capacity(b * C4_ORDER * i * plane);
    for bb in 0..b {
        for t in 0..C4_ORDER {
            for ic in 0..i {
                let src = &base.data()[(bb * i + ic) * plane..][..plane];
                out.extend(rotate_quarter(src, k, t));
            }
        }
    }
    Tensor::new(vec![b * C4_ORDER, i, k, k], out)
}

/// Materialized `(4B_out, 4B_in, k, k)` weights of a group convolution:
/// `W[(bo, h), (bi, g)] = rot^h base[bo, bi, (g - h) mod 4]`.
pub fn group_conv_filters(base: &Tensor) -> Result<Tensor> {
    let (bo, bi, k) = match *base.dims() {
        [bo, bi, n, k, kw] if n == C4_ORDER && k == kw => (bo, bi, k),
        ref d => {
            return Err(shape_err(
                "groupconv",
                format!("base must be (B_out, B_in, 4, k, k), got {d:?}"),
            ))
        }
    };
    let plane = k * k;
    let mut out = Vec::with_capacity(bo * bi * C4_ORDER * C4_ORDER * plane);
    for o in 0..bo {
        for h in 0..C4_ORDER {
            for i in 0..bi {
                for g in 0..C4_ORDER {
                    let slot = (g + C4_ORDER - h) % C4_ORDER;
                    let src = &base.data()[((o * bi + i) * C4_ORDER + slot) * plane..][..plane];
                    out.extend(rotate_quarter(src, k, h));
                }
            }
        }
    }
    Tensor::new(vec![bo * C4_ORDER, bi * C4_ORDER, k, k], out)
}

/// An ordered stack of layers, split into a feature extractor (the first
/// `split_index` layers) and a head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    pub split_index: usize,
    /// Tap indices at which each convolutional block ends.
    pub block_ends: Vec<usize>,
}

impl ModelSpec {
    pub fn new(
        name: impl Into<String>,
        input_shape: Vec<usize>,
        layers: Vec<Layer>,
        split_index: usize,
        block_ends: Vec<usize>,
    ) -> Result<Self> {
        let model = ModelSpec {
            name: name.into(),
            input_shape,
            layers,
            split_index,
            block_ends,
        };
        model.validate()?;
        Ok(model)
    }

    /// Shapes after each prefix: entry `l` is the output of the first `l` layers.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut dims = vec![self.input_shape.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer
                .output_dims(dims.last().expect("non-empty"))
                .map_err(|e| Error::invalid(format!("layer {i}: {e}")))?;
            dims.push(next);
        }
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::invalid(format!(
                "bad input shape {:?}",
                self.input_shape
            )));
        }
        let shapes = self.shapes()?;
        if self.split_index == 0 || self.split_index >= self.layers.len() {
            return Err(Error::invalid(format!(
                "split index {} outside [1, {})",
                self.split_index,
                self.layers.len()
            )));
        }
        if shapes[self.split_index].len() != 1 {
            return Err(Error::invalid(format!(
                "features at split index {} have shape {:?}, expected a vector",
                self.split_index, shapes[self.split_index]
            )));
        }
        if let Some(&bad) = self
            .block_ends
            .iter()
            .find(|&&b| b == 0 || b > self.layers.len())
        {
            return Err(Error::invalid(format!(
                "block end {bad} is not a layer tap"
            )));
        }
        Ok(())
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.shapes()?.pop().expect("non-empty"))
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.dims() != self.input_shape.as_slice() {
            return Err(Error::invalid(format!(
                "model {} expects input {:?}, got {:?}",
                self.name,
                self.input_shape,
                x.dims()
            )));
        }
        Ok(())
    }

    /// Output of the first `upto` layers.
    pub fn forward_prefix(&self, x: &Tensor, upto: usize) -> Result<Tensor> {
        if upto > self.layers.len() {
            return Err(Error::invalid(format!(
                "prefix {upto} longer than {} layers",
                self.layers.len()
            )));
        }
        self.check_input(x)?;
        let mut cur = x.clone();
        for layer in &self.layers[..upto] {
            cur = layer.forward(&cur)?;
        }
        Ok(cur)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_prefix(x, self.layers.len())
    }

    /// The prefix `x -> f_l(x)` as an evaluable function.
    pub fn prefix(&self, upto: usize) -> Result<ModelPrefix<'_>> {
        if upto > self.layers.len() {
            return Err(Error::invalid(format!(
                "prefix {upto} longer than {} layers",
                self.layers.len()
            )));
        }
        Ok(ModelPrefix { model: self, upto })
    }

    pub fn features(&self) -> ModelPrefix<'_> {
        ModelPrefix {
            model: self,
            upto: self.split_index,
        }
    }

    /// The lifting layer's materialized filters, if the model has one.
    pub fn lifting_filters(&self) -> Option<Result<Tensor>> {
        self.layers.iter().find_map(|l| match l {
            Layer::GroupConvLift { base, .. } => Some(lift_filters(base)),
            _ => None,
        })
    }
}

impl EvalFunction for ModelSpec {
    fn eval(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(x)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ModelPrefix<'a> {
    model: &'a ModelSpec,
    upto: usize,
}

impl ModelPrefix<'_> {
    pub fn len(&self) -> usize {
        self.upto
    }

    pub fn is_empty(&self) -> bool {
        self.upto == 0
    }
}

impl EvalFunction for ModelPrefix<'_> {
    fn eval(&self, x: &Tensor) -> Result<Tensor> {
        self.model.forward_prefix(x, self.upto)
    }
}

/// One forward pass returning the activations after every tapped prefix
/// length, plus the final output under key `layers.len()`.
pub fn model_forward_collect(
    model: &ModelSpec,
    input: &Tensor,
    taps: &BTreeSet<usize>,
) -> Result<BTreeMap<usize, Tensor>> {
    let n = model.layers.len();
    if let Some(&bad) = taps.iter().find(|&&t| t > n) {
        return Err(Error::invalid(format!("tap {bad} outside [0, {n}]")));
    }
    model.check_input(input)?;
    let mut out = BTreeMap::new();
    let mut cur = input.clone();
    if taps.contains(&0) {
        out.insert(0, cur.clone());
    }
    for (i, layer) in model.layers.iter().enumerate() {
        cur = layer.forward(&cur)?;
        if taps.contains(&(i + 1)) && i + 1 < n {
            out.insert(i + 1, cur.clone());
        }
    }
    out.insert(n, cur);
    Ok(out)
}

fn uniform(rng: &mut ChaCha8Rng, dims: Vec<usize>, bound: f32) -> Result<Tensor> {
    let len = dims.iter().product();
    Tensor::new(
        dims,
        (0..len).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
}

fn fresh_batchnorm(groups: usize, group_size: usize) -> Result<Layer> {
    Ok(Layer::BatchNorm {
        gamma: Tensor::filled(vec![groups], 1.0)?,
        beta: Tensor::zeros(vec![groups])?,
        mean: Tensor::zeros(vec![groups])?,
        var: Tensor::filled(vec![groups], 1.0)?,
        group_size,
        eps: BN_EPSILON,
    })
}

const KERNEL: usize = 3;
const POOL: usize = 3;

/// Spatial side after `blocks` same-padded convolutions and window-3 pools.
fn side_after(mut side: usize, blocks: usize) -> Result<usize> {
    for _ in 0..blocks {
        side = (side + pool_padding(side, POOL)?) / POOL;
    }
    Ok(side)
}

/// A C4 group-convolution network on single-channel `side x side` images:
/// a lifting block followed by `blocks - 1` group-convolution blocks, each
/// with block-shared batch norm, ReLU and window-3 max pooling, then a group
/// pool, global average pool, flatten, linear and softmax.
pub fn build_c4_equivariant_model(
    blocks: usize,
    channels_per_block: usize,
    classes: usize,
    side: usize,
    seed: u64,
) -> Result<ModelSpec> {
    if blocks == 0 || channels_per_block == 0 || classes == 0 {
        return Err(Error::invalid(
            "blocks, channels and classes must be positive",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = channels_per_block;
    let mut layers = Vec::new();
    let mut block_ends = Vec::new();
    for blk in 0..blocks {
        let conv = if blk == 0 {
            let bound = 1.0 / ((KERNEL * KERNEL) as f32).sqrt();
            Layer::GroupConvLift {
                base: uniform(&mut rng, vec![b, 1, KERNEL, KERNEL], bound)?,
                bias: Some(uniform(&mut rng, vec![b], bound)?),
                padding: KERNEL / 2,
            }
        } else {
            let bound = 1.0 / ((b * C4_ORDER * KERNEL * KERNEL) as f32).sqrt();
            Layer::GroupConv {
                base: uniform(&mut rng, vec![b, b, C4_ORDER, KERNEL, KERNEL], bound)?,
                bias: Some(uniform(&mut rng, vec![b], bound)?),
                padding: KERNEL / 2,
            }
        };
        layers.push(conv);
        layers.push(fresh_batchnorm(b, C4_ORDER)?);
        layers.push(Layer::Relu);
        layers.push(Layer::MaxPool { window: POOL });
        block_ends.push(layers.len());
    }
    let last = side_after(side, blocks)?;
    layers.push(Layer::GroupPool {
        group_size: C4_ORDER,
    });
    layers.push(Layer::AvgPool { window: last });
    layers.push(Layer::Flatten);
    let split = layers.len();
    let bound = 1.0 / (b as f32).sqrt();
    layers.push(Layer::Linear {
        weight: uniform(&mut rng, vec![classes, b], bound)?,
        bias: Some(uniform(&mut rng, vec![classes], bound)?),
    });
    layers.push(Layer::Softmax);
    ModelSpec::new(
        format!("c4-gcnn-{blocks}x{b}"),
        vec![side, side],
        layers,
        split,
        block_ends,
    )
}

/// A plain CNN: `channels.len()` blocks of same-padded 3x3 convolution,
/// batch norm, ReLU and window-3 max pooling, then flatten, linear and
/// softmax. Weights use a seeded uniform fan-in initialization.
pub fn build_standard_cnn(
    channels: &[usize],
    classes: usize,
    side: usize,
    seed: u64,
) -> Result<ModelSpec> {
    if channels.is_empty() || channels.contains(&0) || classes == 0 {
        return Err(Error::invalid(
            "need at least one block, positive channel counts and classes",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut block_ends = Vec::new();
    let mut cin = 1;
    for &cout in channels {
        let bound = 1.0 / ((cin * KERNEL * KERNEL) as f32).sqrt();
        layers.push(Layer::Conv2d {
            weight: uniform(&mut rng, vec![cout, cin, KERNEL, KERNEL], bound)?,
            bias: Some(uniform(&mut rng, vec![cout], bound)?),
            stride: 1,
            padding: KERNEL / 2,
        });
        layers.push(fresh_batchnorm(cout, 1)?);
        layers.push(Layer::Relu);
        layers.push(Layer::MaxPool { window: POOL });
        block_ends.push(layers.len());
        cin = cout;
    }
    let last = side_after(side, channels.len())?;
    layers.push(Layer::Flatten);
    let split = layers.len();
    let features = cin * last * last;
    let bound = 1.0 / (features as f32).sqrt();
    layers.push(Layer::Linear {
        weight: uniform(&mut rng, vec![classes, features], bound)?,
        bias: Some(uniform(&mut rng, vec![classes], bound)?),
    });
    layers.push(Layer::Softmax);
    let name = format!(
        "cnn-{}",
        channels
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join("-")
    );
    ModelSpec::new(name, vec![side, side], layers, split, block_ends)
}
