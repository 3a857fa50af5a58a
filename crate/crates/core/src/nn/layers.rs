use rand_chacha::ChaCha8Rng;

use super::{Mode, Pass};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, Var};

/// A trainable tensor with a model-wide id used for tape binding and
/// optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub id: usize,
    pub value: Tensor<T>,
}

/// Hands out parameter ids and seeded initial values in build order.
pub struct ParamAlloc<'r> {
    next_param: usize,
    next_norm: usize,
    rng: &'r mut ChaCha8Rng,
}

impl<'r> ParamAlloc<'r> {
    pub fn new(rng: &'r mut ChaCha8Rng) -> Self {
        Self { next_param: 0, next_norm: 0, rng }
    }

    fn param<T: Scalar>(&mut self, value: Tensor<T>) -> Param<T> {
        let id = self.next_param;
        self.next_param += 1;
        Param { id, value }
    }

    /// Kaiming-normal weight for a ReLU stack: std = sqrt(2 / fan_in).
    pub fn kaiming<T: Scalar>(&mut self, shape: &[usize], fan_in: usize) -> Param<T> {
        let std = (2.0 / fan_in as f64).sqrt();
        let value = Tensor::randn(shape, std, self.rng);
        self.param(value)
    }

    pub fn constant<T: Scalar>(&mut self, shape: &[usize], value: f64) -> Param<T> {
        self.param(Tensor::full(shape, T::from_f64(value)))
    }

    fn norm_slot(&mut self) -> usize {
        self.next_norm += 1;
        self.next_norm - 1
    }

    pub fn param_count(&self) -> usize {
        self.next_param
    }

    pub fn norm_count(&self) -> usize {
        self.next_norm
    }
}

/// Kind and hyperparameters of a layer, without bound parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv1d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize, bias: bool },
    BatchNorm1d { channels: usize },
    Relu,
    MaxPool1d { kernel: usize, stride: usize },
    GlobalAvgPool,
    Linear { in_features: usize, out_features: usize, bias: bool },
    Dropout { rate: f64 },
    SeAttention { channels: usize, reduction: usize },
    SpatialAttention { kernel: usize },
    ResidualBlock { channels: usize },
    ConcatBranches { branches: Vec<LayerSpec> },
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            LayerSpec::Conv1d { in_channels, out_channels, kernel, stride, .. } => {
                if *in_channels == 0 || *out_channels == 0 || *kernel == 0 || *stride == 0 {
                    return Err(Error::invalid(format!("invalid conv1d hyperparameters {self:?}")));
                }
            }
            LayerSpec::MaxPool1d { kernel, stride } => {
                if *kernel == 0 || *stride == 0 {
                    return Err(Error::invalid(format!("invalid maxpool hyperparameters {self:?}")));
                }
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(rate) {
                    return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
                }
            }
            LayerSpec::SeAttention { reduction, .. } if *reduction == 0 => {
                return Err(Error::invalid("SE reduction must be >= 1"));
            }
            LayerSpec::ConcatBranches { branches } => {
                branches.iter().try_for_each(LayerSpec::validate)?;
            }
            _ => {}
        }
        Ok(())
    }
}

/// Adds a per-channel bias `(C)` to `x: (N, C, L)` or `x: (N, C)`.
fn add_channel_bias<T: Scalar>(pass: &mut Pass<'_, T>, x: Var, bias: Var) -> Result<Var> {
    let shape = pass.tape.shape(x).to_vec();
    let channels = shape[1];
    let mut unit = vec![1; shape.len()];
    unit[1] = channels;
    let b = pass.tape.reshape(bias, &unit)?;
    let b = pass.tape.broadcast_to(b, &shape)?;
    pass.tape.add(x, b)
}

#[derive(Debug, Clone)]
pub struct Conv1d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv1d<T> {
    pub fn new(alloc: &mut ParamAlloc<'_>, cin: usize, cout: usize, kernel: usize, stride: usize, padding: usize, bias: bool) -> Self {
        let weight = alloc.kaiming(&[cout, cin, kernel], cin * kernel);
        let bias = bias.then(|| alloc.constant(&[cout], 0.0));
        Self { weight, bias, stride, padding }
    }

    pub fn spec(&self) -> LayerSpec {
        let s = self.weight.value.shape();
        LayerSpec::Conv1d {
            in_channels: s[1],
            out_channels: s[0],
            kernel: s[2],
            stride: self.stride,
            padding: self.padding,
            bias: self.bias.is_some(),
        }
    }

    pub fn forward(&self, pass: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let w = pass.param(&self.weight)?;
        let y = pass.tape.conv1d(x, w, self.stride, self.padding)?;
        match &self.bias {
            Some(b) => {
                let b = pass.param(b)?;
                add_channel_bias(pass, y, b)
            }
            None => Ok(y),
        }
    }

    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        f(format!("{prefix}weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(format!("{prefix}bias"), b);
        }
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param<T>)) {
        f(format!("{prefix}weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(format!("{prefix}bias"), b);
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm1d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub slot: usize,
}

impl<T: Scalar> BatchNorm1d<T> {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(alloc: &mut ParamAlloc<'_>, channels: usize) -> Self {
        Self {
            gamma: alloc.constant(&[channels], 1.0),
            beta: alloc.constant(&[channels], 0.0),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            slot: alloc.norm_slot(),
        }
    }

    pub fn forward(&self, pass: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let gamma = pass.param(&self.gamma)?;
        let beta = pass.param(&self.beta)?;
        let shape = pass.tape.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != self.running_mean.len() {
            return Err(Error::shapes("batchnorm1d", &[&shape, &[self.running_mean.len()]]));
        }
        match pass.mode() {
            Mode::Train => {
                let (y, stats) = pass.tape.batch_norm(x, gamma, beta, T::from_f64(Self::EPS))?;
                pass.record_stats(self.slot, stats);
                Ok(y)
            }
            Mode::Eval => {
                let c = shape[1];
                let eps = T::from_f64(Self::EPS);
                let inv: Vec<T> = self.running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let mean = pass.tape.constant(Tensor::new(vec![1, c, 1], self.running_mean.clone())?)?;
                let inv = pass.tape.constant(Tensor::new(vec![1, c, 1], inv)?)?;
                let mean = pass.tape.broadcast_to(mean, &shape)?;
                let inv = pass.tape.broadcast_to(inv, &shape)?;
                let centered = pass.tape.sub(x, mean)?;
                let xhat = pass.tape.mul(centered, inv)?;
                let g = pass.tape.reshape(gamma, &[1, c, 1])?;
                let g = pass.tape.broadcast_to(g, &shape)?;
                let scaled = pass.tape.mul(xhat, g)?;
                add_channel_bias(pass, scaled, beta)
            }
        }
    }

    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        f(format!("{prefix}gamma"), &self.gamma);
        f(format!("{prefix}beta"), &self.beta);
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param<T>)) {
        f(format!("{prefix}gamma"), &mut self.gamma);
        f(format!("{prefix}beta"), &mut self.beta);
    }

    /// Folds one batch's statistics into the running estimates.
    pub fn update_running(&mut self, mean: &[T], var_unbiased: &[T]) {
        let m = T::from_f64(Self::MOMENTUM);
        for (r, &v) in self.running_mean.iter_mut().zip(mean) {
            *r = (T::one() - m) * *r + m * v;
        }
        for (r, &v) in self.running_var.iter_mut().zip(var_unbiased) {
            *r = (T::one() - m) * *r + m * v;
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(alloc: &mut ParamAlloc<'_>, input: usize, output: usize, bias: bool) -> Self {
        let weight = alloc.kaiming(&[input, output], input);
        let bias = bias.then(|| alloc.constant(&[output], 0.0));
        Self { weight, bias }
    }

    pub fn forward(&self, pass: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let w = pass.param(&self.weight)?;
        let y = pass.tape.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = pass.param(b)?;
                add_channel_bias(pass, y, b)
            }
            None => Ok(y),
        }
    }

    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        f(format!("{prefix}weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(format!("{prefix}bias"), b);
        }
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param<T>)) {
        f(format!("{prefix}weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(format!("{prefix}bias"), b);
        }
    }

    pub fn spec(&self) -> LayerSpec {
        let s = self.weight.value.shape();
        LayerSpec::Linear { in_features: s[0], out_features: s[1], bias: self.bias.is_some() }
    }
}

pub fn dropout<T: Scalar>(pass: &mut Pass<'_, T>, x: Var, rate: f64) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
    }
    let shape = pass.tape.shape(x).to_vec();
    match pass.dropout_mask(&shape, rate) {
        Some(mask) => {
            let mask = pass.tape.constant(mask)?;
            pass.tape.mul(x, mask)
        }
        None => Ok(x),
    }
}

/// `(N, C, L) -> (N, C)` channel means.
pub fn global_avg_pool<T: Scalar>(pass: &mut Pass<'_, T>, x: Var) -> Result<Var> {
    let shape = pass.tape.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::shapes("global_avg_pool", &[&shape]));
    }
    let m = pass.tape.mean_axis(x, 2)?;
    pass.tape.reshape(m, &[shape[0], shape[1]])
}

/// Squeeze-and-excitation channel gate: `x * sigmoid(W2 relu(W1 gap(x)))`.
#[derive(Debug, Clone)]
pub struct SeAttention<T> {
    pub squeeze: Linear<T>,
    pub excite: Linear<T>,
    pub reduction: usize,
}

impl<T: Scalar> SeAttention<T> {
    pub fn new(alloc: &mut ParamAlloc<'_>, channels: usize, reduction: usize) -> Self {
        let hidden = (channels / reduction).max(1);
        Self {
            squeeze: Linear::new(alloc, channels, hidden, false),
            excite: Linear::new(alloc, hidden, channels, false),
            reduction,
        }
    }

    pub fn forward(&self, pass: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let shape = pass.tape.shape(x).to_vec();
        let pooled = global_avg_pool(pass, x)?;
        let h = self.squeeze.forward(pass, pooled)?;
        let h = pass.tape.relu(h)?;
        let s = self.excite.forward(pass, h)?;
        let s = pass.tape.sigmoid(s)?;
        let s = pass.tape.reshape(s, &[shape[0], shape[1], 1])?;
        let s = pass.tape.broadcast_to(s, &shape)?;
        pass.tape.mul(x, s)
    }
}

/// Positional gate from a convolution over the channel-mean and channel-max
/// maps: `x * sigmoid(conv([mean_c(x); max_c(x)]))`.
#[derive(Debug, Clone)]
pub struct SpatialAttention<T> {
    pub conv: Conv1d<T>,
}

impl<T: Scalar> SpatialAttention<T> {
    pub const KERNEL: usize = 7;

    pub fn new(alloc: &mut ParamAlloc<'_>) -> Self {
        Self { conv: Conv1d::new(alloc, 2, 1, Self::KERNEL, 1, Self::KERNEL / 2, true) }
    }

    pub fn forward(&self, pass: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let shape = pass.tape.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::shapes("spatial_attention", &[&shape]));
        }
        let avg = pass.tape.mean_axis(x, 1)?;
        let max = pass.tape.max_axis(x, 1)?;
        let maps = pass.tape.concat(&[avg, max], 1)?;
        let gate = self.conv.forward(pass, maps)?;
        let gate = pass.tape.sigmoid(gate)?;
        let gate = pass.tape.broadcast_to(gate, &shape)?;
        pass.tape.mul(x, gate)
    }
}

/// `relu(bn2(conv2(relu(bn1(conv1(x))))) + x)` with 3-tap same-padded convs.
#[derive(Debug, Clone)]
pub struct ResidualBlock<T> {
    pub conv1: Conv1d<T>,
    pub bn1: BatchNorm1d<T>,
    pub conv2: Conv1d<T>,
    pub bn2: BatchNorm1d<T>,
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn new(alloc: &mut ParamAlloc<'_>, channels: usize) -> Self {
        Self {
            conv1: Conv1d::new(alloc, channels, channels, 3, 1, 1, false),
            bn1: BatchNorm1d::new(alloc, channels),
            conv2: Conv1d::new(alloc, channels, channels, 3, 1, 1, false),
            bn2: BatchNorm1d::new(alloc, channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.conv1.weight.value.shape()[0]
    }

    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.conv1.visit_params(&format!("{prefix}conv1."), f);
        self.bn1.visit_params(&format!("{prefix}bn1."), f);
        self.conv2.visit_params(&format!("{prefix}conv2."), f);
        self.bn2.visit_params(&format!("{prefix}bn2."), f);
    }

    pub fn forward(&self, pass: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let shape = pass.tape.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != self.channels() {
            return Err(Error::shapes("residual_block", &[&shape, &[self.channels()]]));
        }
        let h = self.conv1.forward(pass, x)?;
        let h = self.bn1.forward(pass, h)?;
        let h = pass.tape.relu(h)?;
        let h = self.conv2.forward(pass, h)?;
        let h = self.bn2.forward(pass, h)?;
        let sum = pass.tape.add(h, x)?;
        pass.tape.relu(sum)
    }
}

/// A bound layer in a model graph.
#[derive(Debug, Clone)]
pub enum Layer<T> {
    Conv1d(Conv1d<T>),
    BatchNorm1d(BatchNorm1d<T>),
    Relu,
    MaxPool1d { kernel: usize, stride: usize },
    GlobalAvgPool,
    Linear(Linear<T>),
    Dropout { rate: f64 },
    SeAttention(SeAttention<T>),
    SpatialAttention(SpatialAttention<T>),
    ResidualBlock(ResidualBlock<T>),
    ConcatBranches(Vec<Conv1d<T>>),
}

impl<T: Scalar> Layer<T> {
    pub fn forward(&self, pass: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        match self {
            Layer::Conv1d(c) => c.forward(pass, x),
            Layer::BatchNorm1d(bn) => bn.forward(pass, x),
            Layer::Relu => pass.tape.relu(x),
            Layer::MaxPool1d { kernel, stride } => pass.tape.max_pool1d(x, *kernel, *stride),
            Layer::GlobalAvgPool => global_avg_pool(pass, x),
            Layer::Linear(l) => l.forward(pass, x),
            Layer::Dropout { rate } => dropout(pass, x, *rate),
            Layer::SeAttention(se) => se.forward(pass, x),
            Layer::SpatialAttention(sa) => sa.forward(pass, x),
            Layer::ResidualBlock(rb) => rb.forward(pass, x),
            Layer::ConcatBranches(branches) => {
                let outs = branches.iter().map(|b| b.forward(pass, x)).collect::<Result<Vec<_>>>()?;
                pass.tape.concat(&outs, 1)
            }
        }
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv1d(c) => c.spec(),
            Layer::BatchNorm1d(bn) => LayerSpec::BatchNorm1d { channels: bn.running_mean.len() },
            Layer::Relu => LayerSpec::Relu,
            Layer::MaxPool1d { kernel, stride } => LayerSpec::MaxPool1d { kernel: *kernel, stride: *stride },
            Layer::GlobalAvgPool => LayerSpec::GlobalAvgPool,
            Layer::Linear(l) => l.spec(),
            Layer::Dropout { rate } => LayerSpec::Dropout { rate: *rate },
            Layer::SeAttention(se) => LayerSpec::SeAttention {
                channels: se.squeeze.weight.value.shape()[0],
                reduction: se.reduction,
            },
            Layer::SpatialAttention(_) => LayerSpec::SpatialAttention { kernel: SpatialAttention::<T>::KERNEL },
            Layer::ResidualBlock(rb) => LayerSpec::ResidualBlock { channels: rb.channels() },
            Layer::ConcatBranches(b) => LayerSpec::ConcatBranches { branches: b.iter().map(Conv1d::spec).collect() },
        }
    }

    /// Visits `(path, param)` pairs in id order.
    pub fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        match self {
            Layer::Conv1d(c) => c.visit_params(prefix, f),
            Layer::BatchNorm1d(bn) => bn.visit_params(prefix, f),
            Layer::Linear(l) => l.visit_params(prefix, f),
            Layer::SeAttention(se) => {
                se.squeeze.visit_params(&format!("{prefix}squeeze."), f);
                se.excite.visit_params(&format!("{prefix}excite."), f);
            }
            Layer::SpatialAttention(sa) => sa.conv.visit_params(&format!("{prefix}conv."), f),
            Layer::ResidualBlock(rb) => rb.visit_params(prefix, f),
            Layer::ConcatBranches(branches) => {
                for (i, b) in branches.iter().enumerate() {
                    b.visit_params(&format!("{prefix}branch{i}."), f);
                }
            }
            Layer::Relu | Layer::MaxPool1d { .. } | Layer::GlobalAvgPool | Layer::Dropout { .. } => {}
        }
    }

    pub fn visit_params_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param<T>)) {
        match self {
            Layer::Conv1d(c) => c.visit_params_mut(prefix, f),
            Layer::BatchNorm1d(bn) => bn.visit_params_mut(prefix, f),
            Layer::Linear(l) => l.visit_params_mut(prefix, f),
            Layer::SeAttention(se) => {
                se.squeeze.visit_params_mut(&format!("{prefix}squeeze."), f);
                se.excite.visit_params_mut(&format!("{prefix}excite."), f);
            }
            Layer::SpatialAttention(sa) => sa.conv.visit_params_mut(&format!("{prefix}conv."), f),
            Layer::ResidualBlock(rb) => {
                rb.conv1.visit_params_mut(&format!("{prefix}conv1."), f);
                rb.bn1.visit_params_mut(&format!("{prefix}bn1."), f);
                rb.conv2.visit_params_mut(&format!("{prefix}conv2."), f);
                rb.bn2.visit_params_mut(&format!("{prefix}bn2."), f);
            }
            Layer::ConcatBranches(branches) => {
                for (i, b) in branches.iter_mut().enumerate() {
                    b.visit_params_mut(&format!("{prefix}branch{i}."), f);
                }
            }
            Layer::Relu | Layer::MaxPool1d { .. } | Layer::GlobalAvgPool | Layer::Dropout { .. } => {}
        }
    }

    /// Visits batch-norm layers (for running statistics).
    pub fn visit_norms_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut BatchNorm1d<T>)) {
        match self {
            Layer::BatchNorm1d(bn) => f(prefix.to_string(), bn),
            Layer::ResidualBlock(rb) => {
                f(format!("{prefix}bn1."), &mut rb.bn1);
                f(format!("{prefix}bn2."), &mut rb.bn2);
            }
            _ => {}
        }
    }
}
