//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Gradients whose magnitudes both fall below this are compared in
    /// absolute rather than relative terms.
    pub abs_floor: f64,
    /// Check at most this many entries per input tensor (seeded sample).
    pub max_entries_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-6,
            max_entries_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat element index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub pass: bool,
}

/// Relative error with an absolute floor on the denominator.
pub fn relative_error(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(abs_floor);
    (analytic - numeric).abs() / scale
}

/// Compares the tape gradient of the scalar built by `fragment` against
/// central differences for every input tensor (or a seeded sample of each).
pub fn grad_check<F>(inputs: &[Tensor], fragment: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone())).collect();
        let out = fragment(&mut g, &vars)?;
        g.value(out)
            .item()
            .ok_or_else(|| Error::Shape("grad_check fragment must return a scalar".into()))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.requires_grad = true;
            t.grad = None;
            g.leaf(t)
        })
        .collect();
    let root = fragment(&mut g, &vars)?;
    g.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor> = inputs.iter().map(|t| {
        let mut t = t.clone();
        t.requires_grad = false;
        t.grad = None;
        t
    }).collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        pass: true,
    };
    for (ti, grads) in analytic.iter().enumerate() {
        let n = work[ti].len();
        let entries: Vec<usize> = match opts.max_entries_per_input {
            Some(k) if k < n => {
                let mut idx = sample(&mut rng, n, k).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..n).collect(),
        };
        for e in entries {
            let orig = work[ti].data()[e];
            work[ti].data_mut()[e] = orig + opts.step;
            let plus = eval(&work)?;
            work[ti].data_mut()[e] = orig - opts.step;
            let minus = eval(&work)?;
            work[ti].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = relative_error(grads[e], numeric, opts.abs_floor);
            report.checked += 1;
            if !(err <= report.max_rel_error) {
                report.max_rel_error = err;
                report.worst = Some((ti, e));
            }
        }
    }
    report.pass = report.max_rel_error <= opts.tolerance;
    Ok(report)
}
