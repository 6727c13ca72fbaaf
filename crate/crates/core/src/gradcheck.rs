//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor of the relative error, so components that are zero
/// analytically and numerically do not divide by zero.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Elements probed per tensor; all of them when the tensor is smaller.
    pub max_elements: usize,
    pub seed: u64,
    /// Test hook: perturb the analytic gradient of the named tensor.
    pub corrupt: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_elements: 24,
            seed: 0,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub elements_checked: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &TensorCheck> {
        self.tensors.iter().filter(|t| !t.passed)
    }

    pub fn merge(&mut self, other: GradCheckReport, prefix: &str) {
        for mut t in other.tensors {
            t.name = format!("{prefix}{}", t.name);
            self.tensors.push(t);
        }
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compare analytic gradients of `loss_fn` against central differences for
/// every named input. `loss_fn` receives one leaf per input, in order, and
/// must return a scalar.
pub fn check<F>(
    inputs: &[(String, Tensor<f64>)],
    loss_fn: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = loss_fn(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(_, t)| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let loss = loss_fn(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let analytic: Vec<Option<Tensor<f64>>> = vars.iter().map(|&v| grads.wrt(v)).collect();
    let base: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let names: Vec<&str> = inputs.iter().map(|(n, _)| n.as_str()).collect();
    let tensors = compare(&names, &base, &analytic, |values| eval(values), opts)?;
    Ok(GradCheckReport {
        tolerance: opts.tolerance,
        tensors,
    })
}

/// Like [`check`], for parameters held in a store: `loss_fn` binds them with
/// [`Tape::param`]. Only the selected parameters are probed.
pub fn check_params<F>(
    store: &ParamStore<f64>,
    selected: &[ParamId],
    loss_fn: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Option<Tensor<f64>>> = selected.iter().map(|&id| grads.param(id)).collect();
    let base: Vec<Tensor<f64>> = selected.iter().map(|&id| store.get(id).clone()).collect();
    let names: Vec<&str> = selected.iter().map(|&id| store.name(id)).collect();
    let mut scratch = store.clone();
    let tensors = compare(
        &names,
        &base,
        &analytic,
        |values| {
            for (&id, v) in selected.iter().zip(values) {
                scratch.set(id, v.clone())?;
            }
            let mut tape = Tape::inference();
            let loss = loss_fn(&mut tape, &scratch)?;
            Ok(tape.value(loss).data()[0])
        },
        opts,
    )?;
    Ok(GradCheckReport {
        tolerance: opts.tolerance,
        tensors,
    })
}

fn compare(
    names: &[&str],
    base: &[Tensor<f64>],
    analytic: &[Option<Tensor<f64>>],
    mut eval: impl FnMut(&[Tensor<f64>]) -> Result<f64>,
    opts: &GradCheckOptions,
) -> Result<Vec<TensorCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut values = base.to_vec();
    let mut tensors = Vec::with_capacity(base.len());
    for (idx, t) in base.iter().enumerate() {
        let name = names[idx];
        let mut grad = analytic[idx]
            .as_ref()
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; t.len()]);
        if opts.corrupt.as_deref() == Some(name) {
            for a in &mut grad {
                *a = *a * 1.5 + 1.0;
            }
        }
        let picks: Vec<usize> = if t.len() <= opts.max_elements {
            (0..t.len()).collect()
        } else {
            sample(&mut rng, t.len(), opts.max_elements).into_vec()
        };
        let mut worst: f64 = 0.0;
        for &e in &picks {
            let mut plus = t.to_vec();
            plus[e] += opts.step;
            values[idx] = Tensor::new(t.shape().to_vec(), plus)?;
            let fp = eval(&values)?;
            let mut minus = t.to_vec();
            minus[e] -= opts.step;
            values[idx] = Tensor::new(t.shape().to_vec(), minus)?;
            let fm = eval(&values)?;
            let numeric = (fp - fm) / (2.0 * opts.step);
            if !numeric.is_finite() {
                return Err(Error::NonFinite {
                    name: name.to_string(),
                });
            }
            worst = worst.max(rel_err(grad[e], numeric));
        }
        values[idx] = t.clone();
        tensors.push(TensorCheck {
            name: name.to_string(),
            max_rel_err: worst,
            elements_checked: picks.len(),
            passed: worst < opts.tolerance,
        });
    }
    Ok(tensors)
}
