//! Central finite-difference verification of analytic gradients.
//!
//! An operation is reduced to the scalar `L = <w, f(x)>` with a fixed random
//! projection `w`; `backward(w)` must then agree with `dL/dx` estimated by
//! central differences, evaluated in `f64`.

mod suite;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::Tensor;

pub use suite::{layer_suite, run_suite, SuiteCase, SUITE_SEEDS};

/// An operation under test, with its inputs treated as differentiable leaves.
pub trait Differentiable {
    fn name(&self) -> String;

    /// One label per input tensor, used in reports.
    fn input_names(&self) -> Vec<String>;

    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>>;

    /// Gradient of `<grad_out, forward(inputs)>` with respect to each input.
    fn backward(&self, inputs: &[Tensor<f64>], grad_out: &Tensor<f64>) -> Result<Vec<Tensor<f64>>>;
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub tolerance: f64,
    /// Perturbation is `step_scale * max(1, |x|)`.
    pub step_scale: f64,
    /// Check at most this many evenly spaced elements per tensor.
    pub probe: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            step_scale: 1e-4,
            probe: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub op: String,
    pub tolerance: f64,
    pub tensors: Vec<TensorReport>,
    /// Set when evaluation itself failed or produced non-finite gradients.
    pub failure: Option<String>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.failure.is_none()
            && self
                .tensors
                .iter()
                .all(|t| t.max_rel_error.is_finite() && t.max_rel_error <= self.tolerance)
    }
}

/// Relative error with a floor tied to the tensor's gradient scale, so that
/// entries that are zero up to roundoff do not dominate the report.
fn relative_error(analytic: f64, numeric: f64, scale: f64) -> f64 {
    let denom = analytic
        .abs()
        .max(numeric.abs())
        .max(1e-2 * scale)
        .max(1e-6);
    (analytic - numeric).abs() / denom
}

fn probe_indices(len: usize, probe: Option<usize>) -> Vec<usize> {
    match probe {
        Some(p) if p < len => {
            let p = p.max(1);
            (0..p).map(|i| i * len / p + (len / p) / 2).collect()
        }
        _ => (0..len).collect(),
    }
}

pub fn grad_check(
    op: &dyn Differentiable,
    inputs: &[Tensor<f64>],
    opts: GradCheckOptions,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        op: op.name(),
        tolerance: opts.tolerance,
        tensors: Vec::new(),
        failure: None,
    };
    if let Err(msg) = run(op, inputs, opts, &mut report) {
        report.failure = Some(msg);
    }
    report
}

fn run(
    op: &dyn Differentiable,
    inputs: &[Tensor<f64>],
    opts: GradCheckOptions,
    report: &mut GradCheckReport,
) -> std::result::Result<(), String> {
    let out = op.forward(inputs).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
    let projection = Tensor::<f64>::randn(out.shape(), 1.0, &mut rng);
    let objective = |xs: &[Tensor<f64>]| -> std::result::Result<f64, String> {
        let y = op.forward(xs).map_err(|e| e.to_string())?;
        y.dot(&projection).map_err(|e| e.to_string())
    };
    let analytic = op
        .backward(inputs, &projection)
        .map_err(|e| e.to_string())?;
    if analytic.len() != inputs.len() {
        return Err(format!(
            "backward returned {} gradients for {} inputs",
            analytic.len(),
            inputs.len()
        ));
    }
    let names = op.input_names();
    let mut work = inputs.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        let name = names.get(t).cloned().unwrap_or_else(|| format!("input{t}"));
        if grad.shape() != inputs[t].shape() {
            return Err(format!("gradient of `{name}` has shape {:?}", grad.shape()));
        }
        if !grad.is_finite() {
            return Err(format!("non-finite analytic gradient for `{name}`"));
        }
        let scale = grad.max_abs();
        let idx = probe_indices(grad.len(), opts.probe);
        let mut worst = 0.0f64;
        for &i in &idx {
            let x0 = inputs[t][i];
            let h = opts.step_scale * x0.abs().max(1.0);
            work[t][i] = x0 + h;
            let plus = objective(&work)?;
            work[t][i] = x0 - h;
            let minus = objective(&work)?;
            work[t][i] = x0;
            let numeric = (plus - minus) / (2.0 * h);
            if !numeric.is_finite() {
                return Err(format!("non-finite numeric gradient for `{name}`[{i}]"));
            }
            worst = worst.max(relative_error(grad[i], numeric, scale));
        }
        report.tensors.push(TensorReport {
            name,
            checked: idx.len(),
            max_rel_error: worst,
        });
    }
    Ok(())
}
