//! Central-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::array::Array;
use super::tape::{Tape, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coords_checked: usize,
}

/// Which coordinates of each parameter to probe.
#[derive(Debug, Clone, Copy)]
pub enum Coverage {
    All,
    /// At most this many randomly chosen coordinates per parameter.
    Sample {
        per_param: usize,
        seed: u64,
    },
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    relative_error_floor(a, b, 1e-8)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error_floor(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Fraction of the largest analytic gradient below which a coordinate is
/// compared on the absolute scale: central differences cannot resolve
/// gradients a million times smaller than the dominant ones.
pub const GRADIENT_FLOOR: f64 = 1e-6;

/// Builds `f` on a fresh tape with `params` as leaves and returns the output value.
pub fn evaluate<F>(f: &F, params: &[Array]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Reverse-mode gradients of `f` at `params`.
pub fn analytic_gradients<F>(f: &F, params: &[Array]) -> Result<Vec<Array>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let mut grads = tape.backward(out)?;
    Ok(vars.iter().map(|&v| grads.take(v)).collect())
}

/// Compares supplied gradients against central differences of `value`.
pub fn compare_gradients(
    value: impl Fn(&[Array]) -> Result<f64>,
    analytic: &[Array],
    params: &[Array],
    eps: f64,
    coverage: Coverage,
) -> Result<GradcheckReport> {
    compare_gradients_steps(value, analytic, params, &[eps], coverage)
}

/// Like [`compare_gradients`], but each coordinate is differenced with every
/// step in `steps` and scored by the closest estimate. Large steps can straddle
/// a ReLU or max-pool switch and small ones drown in rounding noise; a wrong
/// analytic gradient disagrees at every step.
pub fn compare_gradients_steps(
    value: impl Fn(&[Array]) -> Result<f64>,
    analytic: &[Array],
    params: &[Array],
    steps: &[f64],
    coverage: Coverage,
) -> Result<GradcheckReport> {
    assert!(!steps.is_empty(), "at least one finite-difference step");
    let largest = analytic
        .iter()
        .flat_map(|a| a.data())
        .fold(0.0f64, |m, x| m.max(x.abs()));
    let floor = (GRADIENT_FLOOR * largest).max(1e-8);
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coords_checked: 0,
    };
    let mut work: Vec<Array> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        let coords: Vec<usize> = match coverage {
            Coverage::All => (0..param.len()).collect(),
            Coverage::Sample { per_param, seed } if param.len() > per_param => {
                let mut rng = ChaCha8Rng::seed_from_u64(
                    seed ^ (pi as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                );
                let mut c = sample(&mut rng, param.len(), per_param).into_vec();
                c.sort_unstable();
                c
            }
            Coverage::Sample { .. } => (0..param.len()).collect(),
        };
        for &c in &coords {
            let orig = param.data()[c];
            let a = analytic[pi].data()[c];
            let (mut err, mut numeric) = (f64::INFINITY, f64::NAN);
            for &eps in steps {
                work[pi].data_mut()[c] = orig + eps;
                let plus = value(&work)?;
                work[pi].data_mut()[c] = orig - eps;
                let minus = value(&work)?;
                work[pi].data_mut()[c] = orig;
                let n = (plus - minus) / (2.0 * eps);
                let e = relative_error_floor(a, n, floor);
                if e < err {
                    (err, numeric) = (e, n);
                }
            }
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst = Some((pi, c));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

/// Gradient check of a tape-built scalar function.
pub fn gradcheck<F>(f: F, params: &[Array], eps: f64, coverage: Coverage) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&f, params)?;
    compare_gradients(|p| evaluate(&f, p), &analytic, params, eps, coverage)
}

/// [`gradcheck`] with a sweep of finite-difference steps.
pub fn gradcheck_steps<F>(
    f: F,
    params: &[Array],
    steps: &[f64],
    coverage: Coverage,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&f, params)?;
    compare_gradients_steps(|p| evaluate(&f, p), &analytic, params, steps, coverage)
}
