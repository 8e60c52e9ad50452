//! Central finite-difference checks for `f64` graphs.
//!
//! The numeric side only evaluates forward passes, so it stays independent
//! of every reverse rule it is used to verify.

use std::sync::Arc;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Magnitudes below this are compared absolutely instead of relatively.
    pub floor: f64,
    /// Upper bound on probed elements per input; `None` probes all of them.
    pub max_probes: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            floor: 1e-3,
            max_probes: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input, element, analytic, numeric)` of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub probes: usize,
}

/// Scalar `sum(out * R)` with a fixed pseudo-random `R`, turning any
/// tensor-valued op into a loss whose gradient exercises every output.
pub fn random_projection(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = StdRng::seed_from_u64(seed);
    let r = Tensor::from_fn(g.shape(out), |_| rng.gen_range(-1.0..1.0));
    let r = g.constant(r);
    let prod = g.mul(out, r)?;
    Ok(g.sum(prod))
}

fn probe_indices(len: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < len => (0..m).map(|i| i * len / m).collect(),
        _ => (0..len).collect(),
    }
}

/// Compares reverse-mode gradients of `f` with respect to every input
/// against central differences.
pub fn check<Fwd>(inputs: &[Tensor<f64>], opts: GradCheckOptions, f: Fwd) -> Result<GradCheckReport>
where
    Fwd: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(Arc::new(t.clone()))).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[k].shape());
        let analytic = grads.get(*var).unwrap_or(&zeros);
        for j in probe_indices(inputs[k].numel(), opts.max_probes) {
            let orig = inputs[k].data()[j];
            work[k].data_mut()[j] = orig + opts.step;
            let plus = eval(&work)?;
            work[k].data_mut()[j] = orig - opts.step;
            let minus = eval(&work)?;
            work[k].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[j];
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            let rel = (a - numeric).abs() / denom;
            report.probes += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = rel;
                report.worst = Some((k, j, a, numeric));
            }
        }
    }
    Ok(report)
}
