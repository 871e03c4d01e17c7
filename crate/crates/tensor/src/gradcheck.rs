//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::TensorError;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub tol: f64,
    /// Check at most this many elements per parameter (always including the
    /// largest-magnitude analytic gradient). `None` checks every element.
    pub max_elements_per_param: Option<usize>,
    /// Seed for the element subsample.
    pub seed: u64,
}

impl GradCheckOptions {
    pub fn new(epsilon: f64, tol: f64) -> Self {
        Self {
            epsilon,
            tol,
            max_elements_per_param: None,
            seed: 0,
        }
    }

    pub fn sampled(mut self, per_param: usize, seed: u64) -> Self {
        self.max_elements_per_param = Some(per_param);
        self.seed = seed;
        self
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub param: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tol
    }

    pub fn elements_checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }
}

/// Compares the tape gradient of the scalar `f(params)` with central
/// differences `(f(θ+ε) − f(θ−ε)) / 2ε`, element by element.
///
/// `f` receives a fresh tape with every parameter registered as a
/// gradient-tracking leaf, in order.
pub fn finite_diff_check<F, E>(f: F, params: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    if opts.epsilon.is_nan() || opts.epsilon <= 0.0 {
        return Err(TensorError::Contract(format!(
            "finite-difference epsilon must be positive, got {}",
            opts.epsilon
        ))
        .into());
    }

    let eval = |values: &[Tensor<f64>]| -> Result<f64, E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(scalar_of(&tape, out)?)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect();
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = Vec::with_capacity(params.len());
    for (pi, grad) in analytic.iter().enumerate() {
        let elements = select_elements(grad.data(), opts.max_elements_per_param, &mut rng);
        let mut check = ParamCheck {
            param: pi,
            checked: elements.len(),
            max_rel_error: 0.0,
            worst_element: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &e in &elements {
            let orig = work[pi].data()[e];
            work[pi].data_mut()[e] = orig + opts.epsilon;
            let plus = eval(&work)?;
            work[pi].data_mut()[e] = orig - opts.epsilon;
            let minus = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            let a = grad.data()[e];
            let err = relative_error(a, numeric);
            if err >= check.max_rel_error {
                check.max_rel_error = err;
                check.worst_element = e;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.push(check);
    }
    Ok(GradCheckReport {
        params: report,
        tol: opts.tol,
    })
}

fn scalar_of(tape: &Tape<f64>, v: Var) -> Result<f64, TensorError> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(TensorError::Contract(format!(
            "finite-difference check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}

fn select_elements(grad: &[f64], limit: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match limit {
        Some(k) if k < grad.len() => {
            let largest = grad
                .iter()
                .enumerate()
                .fold(
                    (0, -1.0),
                    |best, (i, g)| if g.abs() > best.1 { (i, g.abs()) } else { best },
                )
                .0;
            let mut picked: Vec<usize> = sample(rng, grad.len(), k).into_vec();
            if !picked.contains(&largest) {
                picked[0] = largest;
            }
            picked.sort_unstable();
            picked
        }
        _ => (0..grad.len()).collect(),
    }
}
