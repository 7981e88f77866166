//! Central finite-difference checker for tape gradients.
//!
//! The numeric side only evaluates forward values, so it is independent of
//! every backward rule it checks. Relative error uses the denominator
//! `max(|analytic|, |numeric|, 1e-8)`.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_entry: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<F>(inputs: &[Array2<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.scalar(out))
}

/// Compares reverse-mode gradients of the scalar built by `f` with central
/// differences of step `h` for every entry of every input.
pub fn check_gradients<F>(inputs: &[Array2<f64>], f: F, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    check_gradients_sampled(inputs, f, h, usize::MAX)
}

/// Like [`check_gradients`] but probes at most `max_per_input` evenly spaced
/// entries of each input.
pub fn check_gradients_sampled<F>(
    inputs: &[Array2<f64>],
    f: F,
    h: f64,
    max_per_input: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Array2<f64>> = vars.iter().map(|v| grads.wrt(*v)).collect::<Result<_>>()?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_entry: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let total = input.len();
        let stride = (total / max_per_input.max(1)).max(1);
        for flat in (0..total).step_by(stride) {
            let idx = (flat / input.ncols(), flat % input.ncols());
            let orig = input[idx];
            probe[i][idx] = orig + h;
            let plus = evaluate(&probe, &f)?;
            probe[i][idx] = orig - h;
            let minus = evaluate(&probe, &f)?;
            probe[i][idx] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i][idx];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_input = i;
                report.worst_entry = idx;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// `rows x cols` array of independent `N(0, scale^2)` entries.
pub fn random_array<R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    scale: f64,
) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        rng.sample::<f64, _>(StandardNormal) * scale
    })
}
