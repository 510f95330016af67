use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Element, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Largest acceptable relative error.
    pub tol: f64,
    /// Check at most this many scalars per parameter (sampled without replacement).
    pub max_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-3,
            tol: 1e-3,
            max_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst scalar.
    pub worst_index: usize,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare the tape gradient of a scalar function against central finite
/// differences, one parameter tensor at a time.
///
/// `f` records the function on a fresh tape given the bound parameter
/// variables, in the order of `params`. Failures are reported, never raised.
pub fn grad_check<T, F>(params: &[(String, Tensor<T>)], f: F, opts: &GradCheckOptions) -> Result<Vec<ParamCheck>>
where
    T: Element,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<T>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0].f64())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;

    let mut values: Vec<Tensor<T>> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut reports = Vec::with_capacity(params.len());
    for (pi, (name, tensor)) in params.iter().enumerate() {
        let analytic = tape
            .grad(vars[pi])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![T::zero(); tensor.numel()]);
        let indices: Vec<usize> = match opts.max_per_param {
            Some(cap) if cap < tensor.numel() => {
                let mut picked = sample(&mut rng, tensor.numel(), cap).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..tensor.numel()).collect(),
        };
        let base = tensor.to_vec();
        let mut worst = (0.0f64, 0usize);
        for &i in &indices {
            let mut shifted = base.clone();
            shifted[i] = T::of(base[i].f64() + opts.eps);
            values[pi] = Tensor::from_parts(tensor.shape().to_vec(), shifted.clone());
            let plus = eval(&values)?;
            shifted[i] = T::of(base[i].f64() - opts.eps);
            values[pi] = Tensor::from_parts(tensor.shape().to_vec(), shifted);
            let minus = eval(&values)?;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let err = relative_error(analytic[i].f64(), numeric);
            if err > worst.0 || err.is_nan() {
                worst = (err, i);
            }
        }
        values[pi] = tensor.clone();
        reports.push(ParamCheck {
            name: name.clone(),
            checked: indices.len(),
            max_rel_error: worst.0,
            worst_index: worst.1,
            passed: worst.0 <= opts.tol,
        });
    }
    Ok(reports)
}
