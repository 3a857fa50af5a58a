//! The two decoder architectures as runnable layer graphs.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{
    BatchNorm1d, Conv1d, Layer, LayerSpec, Linear, Param, ParamAlloc, Pass, ResidualBlock, SeAttention,
    SpatialAttention,
};
use crate::tensor::{grad_check_many, Checkpoint, GradCheckOptions, GradCheckReport, Scalar, Tape, Tensor, Var};
use crate::util::{derive_seed, stream};

pub const INPUT_CHANNELS: usize = 32;
pub const INPUT_BINS: usize = 129;
pub const NUM_CLASSES: usize = 2;
pub const SE_REDUCTION: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arch {
    AttentionCnn,
    ResCnn,
}

impl Arch {
    pub fn tag(self) -> &'static str {
        match self {
            Arch::AttentionCnn => "attention_cnn",
            Arch::ResCnn => "res_cnn",
        }
    }

    pub fn feature_dim(self) -> usize {
        match self {
            Arch::AttentionCnn => 192,
            Arch::ResCnn => 128,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" | "attention_cnn" | "attentioncnn" => Ok(Arch::AttentionCnn),
            "res" | "res_cnn" | "rescnn" => Ok(Arch::ResCnn),
            other => Err(Error::invalid(format!("unknown architecture '{other}' (expected attention or res)"))),
        }
    }
}

/// Logits `(N, 2)` and penultimate features `(N, feature_dim)` of a forward
/// pass.
#[derive(Debug, Clone, Copy)]
pub struct ModelOutput {
    pub logits: Var,
    pub features: Var,
}

/// Eval-mode outputs copied off the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<[f64; 2]>,
    pub probs: Vec<[f64; 2]>,
    pub features: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ModelGraph<T> {
    arch: Arch,
    input_channels: usize,
    layers: Vec<Layer<T>>,
    feature_layer: usize,
    param_count: usize,
}

impl<T: Scalar> ModelGraph<T> {
    pub fn build(arch: Arch, input_channels: usize, seed: u64) -> Self {
        match arch {
            Arch::AttentionCnn => Self::attention_cnn(input_channels, seed),
            Arch::ResCnn => Self::res_cnn(input_channels, seed),
        }
    }

    pub fn attention_cnn(input_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = ParamAlloc::new(&mut rng);
        let mut layers = vec![Layer::MaxPool1d { kernel: 2, stride: 2 }];
        for (cin, cout) in [(input_channels, 64), (64, 128)] {
            layers.push(Layer::Conv1d(Conv1d::new(&mut a, cin, cout, 3, 1, 1, false)));
            layers.push(Layer::BatchNorm1d(BatchNorm1d::new(&mut a, cout)));
            layers.push(Layer::Relu);
            layers.push(Layer::MaxPool1d { kernel: 4, stride: 4 });
        }
        let branches = [1usize, 3, 5]
            .iter()
            .map(|&k| Conv1d::new(&mut a, 128, 64, k, 1, k / 2, true))
            .collect();
        layers.push(Layer::ConcatBranches(branches));
        layers.push(Layer::SeAttention(SeAttention::new(&mut a, 192, SE_REDUCTION)));
        layers.push(Layer::SpatialAttention(SpatialAttention::new(&mut a)));
        let feature_layer = layers.len();
        layers.push(Layer::GlobalAvgPool);
        layers.push(Layer::Dropout { rate: 0.3 });
        layers.push(Layer::Linear(Linear::new(&mut a, 192, 256, true)));
        layers.push(Layer::Relu);
        layers.push(Layer::Dropout { rate: 0.5 });
        layers.push(Layer::Linear(Linear::new(&mut a, 256, NUM_CLASSES, true)));
        let param_count = a.param_count();
        Self { arch: Arch::AttentionCnn, input_channels, layers, feature_layer, param_count }
    }

    pub fn res_cnn(input_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = ParamAlloc::new(&mut rng);
        let mut layers = vec![
            Layer::MaxPool1d { kernel: 2, stride: 2 },
            Layer::Conv1d(Conv1d::new(&mut a, input_channels, 64, 7, 2, 3, false)),
            Layer::BatchNorm1d(BatchNorm1d::new(&mut a, 64)),
            Layer::Relu,
            Layer::MaxPool1d { kernel: 4, stride: 4 },
        ];
        for _ in 0..3 {
            layers.push(Layer::ResidualBlock(ResidualBlock::new(&mut a, 64)));
        }
        layers.push(Layer::Conv1d(Conv1d::new(&mut a, 64, 128, 3, 1, 1, false)));
        layers.push(Layer::BatchNorm1d(BatchNorm1d::new(&mut a, 128)));
        layers.push(Layer::Relu);
        layers.push(Layer::MaxPool1d { kernel: 2, stride: 2 });
        for _ in 0..2 {
            layers.push(Layer::ResidualBlock(ResidualBlock::new(&mut a, 128)));
        }
        let feature_layer = layers.len();
        layers.push(Layer::GlobalAvgPool);
        layers.push(Layer::Dropout { rate: 0.4 });
        layers.push(Layer::Linear(Linear::new(&mut a, 128, NUM_CLASSES, true)));
        let param_count = a.param_count();
        Self { arch: Arch::ResCnn, input_channels, layers, feature_layer, param_count }
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.feature_dim()
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    /// Number of parameter tensors (ids run `0..param_tensor_count`).
    pub fn param_tensor_count(&self) -> usize {
        self.param_count
    }

    /// Total number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.value.numel()).sum()
    }

    /// Checkpoint descriptor guarding against loading into the wrong graph.
    pub fn descriptor(&self) -> String {
        format!("{};in_channels={};v1", self.arch.tag(), self.input_channels)
    }

    pub fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::with_capacity(self.param_count);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit_params(&format!("layers.{i}."), &mut |name, p| out.push((name, p)));
        }
        out.sort_by_key(|(_, p)| p.id);
        out
    }

    /// Mutable parameters indexed by id.
    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out: Vec<&mut Param<T>> = Vec::with_capacity(self.param_count);
        for layer in self.layers.iter_mut() {
            layer.visit_params_mut("", &mut |_, p| out.push(p));
        }
        out.sort_by_key(|p| p.id);
        out
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 3 || shape[1] != self.input_channels || shape[0] == 0 {
            return Err(Error::shapes(
                "model input (expected [N, channels, bins])",
                &[shape, &[0, self.input_channels, INPUT_BINS]],
            ));
        }
        Ok(())
    }

    pub fn forward(&self, pass: &mut Pass<'_, T>, x: Var) -> Result<ModelOutput> {
        self.check_input(pass.tape.shape(x))?;
        let mut h = x;
        let mut features = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(pass, h)?;
            if i == self.feature_layer {
                features = h;
            }
        }
        Ok(ModelOutput { logits: h, features })
    }

    /// Output shape of every layer for an input of `batch_shape`.
    pub fn layer_output_shapes(&self, batch_shape: &[usize]) -> Result<Vec<Vec<usize>>> {
        self.check_input(batch_shape)?;
        let mut tape = Tape::new();
        let mut pass = Pass::eval(&mut tape);
        let mut h = pass.tape.constant(Tensor::zeros(batch_shape))?;
        let mut shapes = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            h = layer.forward(&mut pass, h)?;
            shapes.push(pass.tape.shape(h).to_vec());
        }
        Ok(shapes)
    }

    /// Folds training-mode batch statistics into running estimates.
    pub fn apply_stat_updates(&mut self, pass: &mut Pass<'_, T>) {
        let updates = pass.take_stat_updates();
        if updates.is_empty() {
            return;
        }
        for layer in self.layers.iter_mut() {
            layer.visit_norms_mut("", &mut |_, bn| {
                for (slot, stats) in &updates {
                    if *slot == bn.slot {
                        bn.update_running(&stats.mean, &stats.var_unbiased);
                    }
                }
            });
        }
    }

    /// Eval-mode forward without gradient tracking. Takes `&self`, so a frozen
    /// model can serve concurrent batches.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Prediction> {
        let mut tape = Tape::new();
        let mut pass = Pass::eval(&mut tape);
        let x = pass.tape.constant(batch.clone())?;
        let out = self.forward(&mut pass, x)?;
        let probs_var = pass.tape.softmax(out.logits)?;
        let logits = pass.tape.value(out.logits).to_f64_vec();
        let probs = pass.tape.value(probs_var).to_f64_vec();
        let feats = pass.tape.value(out.features);
        let dim = feats.shape()[1];
        let feats = feats.to_f64_vec();
        Ok(Prediction {
            logits: logits.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
            probs: probs.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
            features: feats.chunks_exact(dim).map(<[f64]>::to_vec).collect(),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let mut ck = Checkpoint::new(self.descriptor());
        for (name, p) in self.named_params() {
            ck.push(name, p.value.clone());
        }
        let mut layers = self.layers.clone();
        for (i, layer) in layers.iter_mut().enumerate() {
            layer.visit_norms_mut(&format!("layers.{i}."), &mut |prefix, bn| {
                let c = bn.running_mean.len();
                ck.push(format!("{prefix}running_mean"), Tensor::new(vec![c], bn.running_mean.clone()).expect("shape"));
                ck.push(format!("{prefix}running_var"), Tensor::new(vec![c], bn.running_var.clone()).expect("shape"));
            });
        }
        ck
    }

    /// Overwrites parameters and running statistics from `ck`. Extra entries
    /// (e.g. scaler tensors) are ignored.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint<T>) -> Result<()> {
        let expected = self.descriptor();
        if ck.descriptor != expected {
            return Err(Error::ArchitectureMismatch { expected, found: ck.descriptor.clone() });
        }
        let mut missing: Option<String> = None;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let prefix = format!("layers.{i}.");
            layer.visit_params_mut(&prefix, &mut |name, p| match ck.get(&name) {
                Some(t) if t.shape() == p.value.shape() => p.value = t.clone(),
                _ => missing = missing.take().or(Some(name)),
            });
            layer.visit_norms_mut(&prefix, &mut |prefix, bn| {
                for (suffix, buf) in [("running_mean", &mut bn.running_mean), ("running_var", &mut bn.running_var)] {
                    let name = format!("{prefix}{suffix}");
                    match ck.get(&name) {
                        Some(t) if t.numel() == buf.len() => buf.copy_from_slice(t.data()),
                        _ => missing = missing.take().or(Some(name)),
                    }
                }
            });
        }
        match missing {
            Some(name) => Err(Error::ArchitectureMismatch {
                expected,
                found: format!("checkpoint lacking or misshaping '{name}'"),
            }),
            None => Ok(()),
        }
    }
}

/// Finite-difference check of the cross-entropy gradient with respect to the
/// input batch and every parameter, in training mode (batch statistics) with
/// dropout disabled.
pub fn grad_check_model(
    model: &ModelGraph<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let params = model.named_params();
    let mut inputs = Vec::with_capacity(params.len() + 1);
    inputs.push(x.clone());
    inputs.extend(params.iter().map(|(_, p)| p.value.clone()));
    let ids: Vec<usize> = params.iter().map(|(_, p)| p.id).collect();
    grad_check_many(
        |tape, vars| {
            let mut pass = Pass::train(tape, None);
            for (&id, &v) in ids.iter().zip(&vars[1..]) {
                pass.bind(id, v);
            }
            let out = model.forward(&mut pass, vars[0])?;
            pass.tape.cross_entropy(out.logits, labels)
        },
        &inputs,
        opts,
    )
}

/// Seeded random model, input batch of `batch` trials and labels, checked on
/// `coords` sampled coordinates with step `h`.
pub fn grad_check_arch(arch: Arch, batch: usize, seed: u64, coords: usize, h: f64) -> Result<GradCheckReport> {
    let model = ModelGraph::<f64>::build(arch, INPUT_CHANNELS, derive_seed(seed, &[stream::GRADCHECK, 0]));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stream::GRADCHECK, 1]));
    let x = Tensor::randn(&[batch, INPUT_CHANNELS, INPUT_BINS], 1.0, &mut rng);
    let labels: Vec<usize> = (0..batch).map(|i| i % NUM_CLASSES).collect();
    grad_check_model(&model, &x, &labels, GradCheckOptions { h, max_coords: Some(coords), seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool_len(l: usize, k: usize, s: usize) -> usize {
        (l - k) / s + 1
    }

    fn conv_len(l: usize, k: usize, s: usize, p: usize) -> usize {
        (l + 2 * p - k) / s + 1
    }

    #[test]
    fn attention_cnn_length_progression() {
        let m = ModelGraph::<f32>::attention_cnn(32, 1);
        let shapes = m.layer_output_shapes(&[2, 32, 129]).unwrap();
        let l0 = pool_len(129, 2, 2);
        let l1 = pool_len(conv_len(l0, 3, 1, 1), 4, 4);
        let l2 = pool_len(conv_len(l1, 3, 1, 1), 4, 4);
        assert_eq!((l0, l1, l2), (64, 16, 4));
        assert_eq!(shapes[0], vec![2, 32, l0]);
        assert_eq!(shapes[4], vec![2, 64, l1]);
        assert_eq!(shapes[8], vec![2, 128, l2]);
        assert_eq!(shapes[9], vec![2, 192, l2]);
        assert_eq!(shapes[12], vec![2, 192]);
        assert_eq!(shapes.last().unwrap(), &vec![2, 2]);
    }

    #[test]
    fn res_cnn_length_progression() {
        let m = ModelGraph::<f32>::res_cnn(32, 1);
        let shapes = m.layer_output_shapes(&[2, 32, 129]).unwrap();
        let lens: Vec<usize> = shapes.iter().filter(|s| s.len() == 3).map(|s| s[2]).collect();
        // pool, conv, bn, relu, pool, 3 res, conv, bn, relu, pool, 2 res
        assert_eq!(lens, vec![64, 32, 32, 32, 8, 8, 8, 8, 8, 8, 8, 4, 4, 4]);
        assert_eq!(shapes[14], vec![2, 128]);
        assert_eq!(shapes.last().unwrap(), &vec![2, 2]);
    }

    #[test]
    fn parameter_counts_match_layer_arithmetic() {
        let conv = |cin: usize, cout: usize, k: usize, bias: bool| cout * cin * k + if bias { cout } else { 0 };
        let bn = |c: usize| 2 * c;
        let lin = |i: usize, o: usize, bias: bool| i * o + if bias { o } else { 0 };

        let attention = conv(32, 64, 3, false)
            + bn(64)
            + conv(64, 128, 3, false)
            + bn(128)
            + conv(128, 64, 1, true)
            + conv(128, 64, 3, true)
            + conv(128, 64, 5, true)
            + lin(192, 24, false)
            + lin(24, 192, false)
            + conv(2, 1, 7, true)
            + lin(192, 256, true)
            + lin(256, 2, true);
        let res_block = |c: usize| 2 * conv(c, c, 3, false) + 2 * bn(c);
        let res = conv(32, 64, 7, false)
            + bn(64)
            + 3 * res_block(64)
            + conv(64, 128, 3, false)
            + bn(128)
            + 2 * res_block(128)
            + lin(128, 2, true);
        assert_eq!(attention, 164_177);
        assert_eq!(res, 311_682);
        for seed in [1, 2, 99] {
            assert_eq!(ModelGraph::<f32>::attention_cnn(32, seed).parameter_count(), attention);
            assert_eq!(ModelGraph::<f32>::res_cnn(32, seed).parameter_count(), res);
        }
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = ModelGraph::<f32>::res_cnn(32, 5).to_checkpoint();
        let b = ModelGraph::<f32>::res_cnn(32, 5).to_checkpoint();
        let c = ModelGraph::<f32>::res_cnn(32, 6).to_checkpoint();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn checkpoint_guards_architecture() {
        let res = ModelGraph::<f32>::res_cnn(32, 1);
        let mut att = ModelGraph::<f32>::attention_cnn(32, 1);
        assert!(matches!(att.load_checkpoint(&res.to_checkpoint()), Err(Error::ArchitectureMismatch { .. })));
        let mut res2 = ModelGraph::<f32>::res_cnn(32, 2);
        res2.load_checkpoint(&res.to_checkpoint()).unwrap();
        assert_eq!(res2.to_checkpoint(), res.to_checkpoint());
    }

    #[test]
    fn arch_parsing() {
        assert_eq!("res".parse::<Arch>().unwrap(), Arch::ResCnn);
        assert_eq!("attention".parse::<Arch>().unwrap(), Arch::AttentionCnn);
        assert!("mlp".parse::<Arch>().is_err());
    }
}
