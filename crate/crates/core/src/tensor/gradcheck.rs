//! Central-difference gradient checker at 64-bit precision.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Options for [`grad_check_many`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Finite-difference step, must lie in `[1e-6, 1e-4]`.
    pub h: f64,
    /// Check a seeded random subset of this many coordinates instead of all.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { h: 1e-5, max_coords: None, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(input index, flat element index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
    /// Coordinates whose `x ± h` evaluations left the smooth piece of `x`
    /// (a ReLU or max selection flipped). Central differences are not a valid
    /// oracle there; they are excluded from the maximum and replaced by other
    /// coordinates when sampling.
    pub kinks_skipped: usize,
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

struct Eval {
    value: f64,
    signature: u64,
    grads: Vec<Tensor<f64>>,
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>], with_grad: bool) -> Result<Eval>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|x| tape.leaf(x.clone(), with_grad))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::NotScalar(tape.shape(loss).to_vec()));
    }
    let value = tape.value(loss).data()[0];
    let signature = tape.branch_signature();
    if !with_grad {
        return Ok(Eval { value, signature, grads: Vec::new() });
    }
    tape.backward(loss)?;
    let grads = vars
        .iter()
        .map(|&v| tape.grad(v).expect("leaf requires grad"))
        .collect();
    Ok(Eval { value, signature, grads })
}

/// Compares the tape gradient of a scalar function of several inputs with
/// central differences and returns the worst relative error.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&opts.h) {
        return Err(Error::invalid(format!("grad_check step {} outside [1e-6, 1e-4]", opts.h)));
    }
    let base = evaluate(&f, inputs, true)?;
    let again = evaluate(&f, inputs, false)?;
    if base.value.to_bits() != again.value.to_bits() || base.signature != again.signature {
        return Err(Error::NonDeterministic);
    }

    let sizes: Vec<usize> = inputs.iter().map(Tensor::numel).collect();
    let total: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..total).collect();
    let wanted = match opts.max_coords {
        Some(m) if m < total => {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed));
            m
        }
        _ => total,
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
        kinks_skipped: 0,
    };
    let mut perturbed: Vec<Tensor<f64>> = inputs.to_vec();
    for coord in order {
        if report.coords_checked == wanted {
            break;
        }
        let (mut which, mut elem) = (0, coord);
        while elem >= sizes[which] {
            elem -= sizes[which];
            which += 1;
        }
        let orig = inputs[which].data()[elem];
        perturbed[which].data_mut()[elem] = orig + opts.h;
        let plus = evaluate(&f, &perturbed, false)?;
        perturbed[which].data_mut()[elem] = orig - opts.h;
        let minus = evaluate(&f, &perturbed, false)?;
        perturbed[which].data_mut()[elem] = orig;

        if plus.signature != base.signature || minus.signature != base.signature {
            report.kinks_skipped += 1;
            continue;
        }
        report.coords_checked += 1;
        let numeric = (plus.value - minus.value) / (2.0 * opts.h);
        let analytic = base.grads[which].data()[elem];
        let err = relative_error(analytic, numeric);
        if err > report.max_relative_error {
            report = GradCheckReport {
                max_relative_error: err,
                worst: (which, elem),
                analytic,
                numeric,
                ..report
            };
        }
    }
    if report.coords_checked == 0 {
        return Err(Error::invalid("grad_check: every coordinate sits on a non-smooth point"));
    }
    Ok(report)
}

/// Single-input form: max over elements of
/// `|analytic - central| / max(|analytic|, |central|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let opts = GradCheckOptions { h, ..Default::default() };
    let report = grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), opts)?;
    Ok(report.max_relative_error)
}
