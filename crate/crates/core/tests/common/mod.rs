//! Seeded gradient checks shared by the layer tests and the acceptance run.
#![allow(dead_code)]

use odorcnn::nn::{BatchNorm1d, Conv1d, Layer, Linear, ParamAlloc, Pass, ResidualBlock, SeAttention, SpatialAttention};
use odorcnn::tensor::{grad_check_many, GradCheckOptions, Tape, Tensor, Var};
use odorcnn::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TOLERANCE: f64 = 1e-4;
pub const LAYER_STEP: f64 = 1e-5;

/// Builds one layer with random parameters (batch-norm scales around 1).
pub type LayerCase = (&'static str, fn(&mut ParamAlloc<'_>) -> Layer<f64>, &'static [usize]);

pub fn layer_cases() -> Vec<LayerCase> {
    vec![
        ("conv1d", |a| Layer::Conv1d(Conv1d::new(a, 3, 4, 5, 2, 2, true)), &[2, 3, 16]),
        ("batchnorm1d", |a| Layer::BatchNorm1d(BatchNorm1d::new(a, 4)), &[3, 4, 6]),
        ("relu", |_| Layer::Relu, &[2, 3, 8]),
        ("maxpool1d", |_| Layer::MaxPool1d { kernel: 2, stride: 2 }, &[2, 3, 9]),
        ("maxpool1d_k4", |_| Layer::MaxPool1d { kernel: 4, stride: 4 }, &[2, 2, 17]),
        ("global_avg_pool", |_| Layer::GlobalAvgPool, &[2, 3, 7]),
        ("linear", |a| Layer::Linear(Linear::new(a, 5, 3, true)), &[4, 5]),
        ("dropout", |_| Layer::Dropout { rate: 0.0 }, &[2, 3, 5]),
        ("se_attention", |a| Layer::SeAttention(SeAttention::new(a, 16, 8)), &[2, 16, 6]),
        ("spatial_attention", |a| Layer::SpatialAttention(SpatialAttention::new(a)), &[2, 4, 9]),
        ("residual_block", |a| Layer::ResidualBlock(ResidualBlock::new(a, 4)), &[3, 4, 8]),
        (
            "concat_branches",
            |a| Layer::ConcatBranches([1, 3, 5].iter().map(|&k| Conv1d::new(a, 3, 2, k, 1, k / 2, true)).collect()),
            &[2, 3, 8],
        ),
    ]
}

/// Worst relative error of one seeded instance of a layer, with respect to
/// its input and all its parameters, through a random linear read-out.
pub fn check_layer(case: &LayerCase, seed: u64) -> Result<f64> {
    let (_, build, shape) = case;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layer = {
        let mut alloc = ParamAlloc::new(&mut rng);
        build(&mut alloc)
    };
    layer.visit_params_mut("", &mut |name, p| {
        let noise = Tensor::<f64>::randn(p.value.shape(), 0.5, &mut rng);
        let offset = if name.ends_with("gamma") { 1.0 } else { 0.0 };
        for (v, n) in p.value.data_mut().iter_mut().zip(noise.data()) {
            *v = offset + n;
        }
    });
    let mut params = Vec::new();
    layer.visit_params("", &mut |_, p| params.push((p.id, p.value.clone())));
    let x = Tensor::<f64>::randn(shape, 1.0, &mut rng);
    let out_shape = {
        let mut tape = Tape::new();
        let mut pass = Pass::train(&mut tape, None);
        let xv = pass.tape.constant(x.clone())?;
        let y = layer.forward(&mut pass, xv)?;
        pass.tape.shape(y).to_vec()
    };
    let readout = Tensor::<f64>::randn(&out_shape, 1.0, &mut rng);
    let mut inputs = vec![x];
    inputs.extend(params.iter().map(|(_, v)| v.clone()));
    let report = grad_check_many(
        |tape, vars| {
            let mut pass = Pass::train(tape, None);
            for ((id, _), &v) in params.iter().zip(&vars[1..]) {
                pass.bind(*id, v);
            }
            let y = layer.forward(&mut pass, vars[0])?;
            let r = pass.tape.constant(readout.clone())?;
            let weighted = pass.tape.mul(y, r)?;
            pass.tape.sum(weighted)
        },
        &inputs,
        GradCheckOptions { h: LAYER_STEP, max_coords: None, seed },
    )?;
    Ok(report.max_relative_error)
}

type PrimitiveFn = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Tape primitives as scalar functions of random inputs. Positive-only
/// inputs are marked so `log` stays in its domain.
pub fn primitive_cases() -> Vec<(&'static str, Vec<(Vec<usize>, bool)>, PrimitiveFn)> {
    fn weighted(t: &mut Tape<f64>, y: Var) -> Result<Var> {
        let shape = t.shape(y).to_vec();
        let n: usize = shape.iter().product();
        let w = Tensor::new(shape, (0..n).map(|i| 0.3 + (i % 7) as f64 * 0.25).collect())?;
        let w = t.constant(w)?;
        let p = t.mul(y, w)?;
        t.sum(p)
    }
    vec![
        ("add", vec![(vec![3, 4], false), (vec![3, 4], false)], |t, v| {
            let y = t.add(v[0], v[1])?;
            weighted(t, y)
        }),
        ("sub", vec![(vec![3, 4], false), (vec![3, 4], false)], |t, v| {
            let y = t.sub(v[0], v[1])?;
            weighted(t, y)
        }),
        ("mul", vec![(vec![3, 4], false), (vec![3, 4], false)], |t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted(t, y)
        }),
        ("scale", vec![(vec![5], false)], |t, v| {
            let y = t.scale(v[0], -1.7)?;
            weighted(t, y)
        }),
        ("matmul", vec![(vec![3, 5], false), (vec![5, 2], false)], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted(t, y)
        }),
        ("relu", vec![(vec![4, 3], false)], |t, v| {
            let y = t.relu(v[0])?;
            weighted(t, y)
        }),
        ("sigmoid", vec![(vec![4, 3], false)], |t, v| {
            let y = t.sigmoid(v[0])?;
            weighted(t, y)
        }),
        ("log", vec![(vec![6], true)], |t, v| {
            let y = t.log(v[0])?;
            weighted(t, y)
        }),
        ("softmax", vec![(vec![3, 4], false)], |t, v| {
            let y = t.softmax(v[0])?;
            weighted(t, y)
        }),
        ("log_softmax", vec![(vec![3, 4], false)], |t, v| {
            let y = t.log_softmax(v[0])?;
            weighted(t, y)
        }),
        ("mean", vec![(vec![2, 3, 4], false)], |t, v| {
            let y = t.mul(v[0], v[0])?;
            t.mean(y)
        }),
        ("sum_axis", vec![(vec![2, 3, 4], false)], |t, v| {
            let y = t.sum_axis(v[0], 1)?;
            weighted(t, y)
        }),
        ("mean_axis", vec![(vec![2, 3, 4], false)], |t, v| {
            let y = t.mean_axis(v[0], 2)?;
            weighted(t, y)
        }),
        ("max_axis", vec![(vec![2, 5, 3], false)], |t, v| {
            let y = t.max_axis(v[0], 1)?;
            weighted(t, y)
        }),
        ("concat", vec![(vec![2, 3, 4], false), (vec![2, 1, 4], false)], |t, v| {
            let y = t.concat(&[v[0], v[1]], 1)?;
            weighted(t, y)
        }),
        ("reshape", vec![(vec![2, 6], false)], |t, v| {
            let y = t.reshape(v[0], &[3, 4])?;
            weighted(t, y)
        }),
        ("transpose", vec![(vec![2, 3, 4], false)], |t, v| {
            let y = t.transpose(v[0], 0, 2)?;
            weighted(t, y)
        }),
        ("slice", vec![(vec![2, 6, 3], false)], |t, v| {
            let y = t.slice(v[0], 1, 1, 4)?;
            weighted(t, y)
        }),
        ("broadcast_to", vec![(vec![1, 3, 1], false)], |t, v| {
            let y = t.broadcast_to(v[0], &[2, 3, 4])?;
            weighted(t, y)
        }),
        ("conv1d", vec![(vec![2, 3, 11], false), (vec![4, 3, 3], false)], |t, v| {
            let y = t.conv1d(v[0], v[1], 2, 1)?;
            weighted(t, y)
        }),
        ("max_pool1d", vec![(vec![2, 3, 10], false)], |t, v| {
            let y = t.max_pool1d(v[0], 3, 2)?;
            weighted(t, y)
        }),
        ("batch_norm", vec![(vec![3, 2, 5], false), (vec![2], false), (vec![2], false)], |t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], 1e-5)?;
            weighted(t, y)
        }),
        ("cross_entropy", vec![(vec![4, 2], false)], |t, v| t.cross_entropy(v[0], &[0, 1, 1, 0])),
    ]
}

pub fn check_primitive(shapes: &[(Vec<usize>, bool)], f: PrimitiveFn, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor<f64>> = shapes
        .iter()
        .map(|(shape, positive)| {
            let t = Tensor::<f64>::randn(shape, 1.0, &mut rng);
            if *positive {
                let data = t.data().iter().map(|v| v.abs() + 0.5).collect();
                Tensor::new(shape.clone(), data).expect("shape")
            } else {
                t
            }
        })
        .collect();
    let report = grad_check_many(f, &inputs, GradCheckOptions { h: LAYER_STEP, max_coords: None, seed })?;
    Ok(report.max_relative_error)
}

/// Balanced spectra, `channels x 129`, with odor trials carrying extra power in
/// bins 10..=20 scaled by `signal`. Ids are `1000 + i`.
pub fn toy_spectra(n: usize, channels: usize, signal: f64, seed: u64) -> Vec<odorcnn::dsp::SpectralFeatures> {
    use odorcnn::datasets::Label;
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = if i % 2 == 0 { Label::Odor } else { Label::Blank };
            let strength = signal * rng.random_range(0.0..2.0);
            let values = (0..channels * 129)
                .map(|f| {
                    let bin = f % 129;
                    let base = 10.0 / (1.0 + bin as f64) * rng.random_range(0.5..1.5);
                    let bump = if label == Label::Odor && (10..=20).contains(&bin) { strength * base } else { 0.0 };
                    base + bump
                })
                .collect();
            odorcnn::dsp::SpectralFeatures {
                trial_id: 1000 + i as u64,
                label,
                channels,
                bins: 129,
                bin_hz: 1000.0 / 256.0,
                values,
            }
        })
        .collect()
}
