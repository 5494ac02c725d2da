use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// At most this many elements are probed per tensor.
pub const MAX_PROBES_PER_TENSOR: usize = 64;

/// Smallest step a probe may shrink to while looking for a kink-free
/// interval, as a fraction of the requested step.
pub const MIN_STEP_FRACTION: f64 = 1.0 / 1024.0;

/// Gradients smaller than this are compared on an absolute scale.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub tensor: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tol: f64,
    pub max_rel_error: f64,
    /// Largest relative error per tensor, in input order.
    pub per_tensor: Vec<f64>,
    /// Probes whose relative error exceeded `tol`.
    pub failures: Vec<Probe>,
    pub probes: usize,
    /// Probes whose step was shrunk because `x +- h` crossed a ReLU kink.
    pub shrunk: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn evaluate<F>(f: &F, params: &[Tensor<f64>]) -> Result<(Tape<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    Ok((tape, vars, loss))
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences on up to [`MAX_PROBES_PER_TENSOR`] randomly chosen elements
/// of each tensor. `f` must be deterministic.
///
/// The numeric derivative is the Richardson extrapolation
/// `(4 D(h/2) - D(h)) / 3` of the central differences `D` at steps `h` and
/// `h/2`, which cancels their leading `O(h^2)` truncation term.
///
/// Central differences are only an oracle on a smooth piece of the
/// function. When a perturbed evaluation changes the ReLU sign pattern of
/// the unperturbed one (see [`Tape::kink_pattern`]), the step of that probe
/// is halved until it does not, down to `h *` [`MIN_STEP_FRACTION`].
pub fn grad_check<F>(
    f: F,
    params: &[Tensor<f64>],
    h: f64,
    tol: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (mut tape, vars, loss) = evaluate(&f, params)?;
    let base_pattern = tape.kink_pattern();
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            tape.grad(v)
                .map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec)
        })
        .collect();
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        tol,
        max_rel_error: 0.0,
        per_tensor: vec![0.0; params.len()],
        failures: Vec::new(),
        probes: 0,
        shrunk: 0,
    };
    let loss_at = |work: &[Tensor<f64>]| -> Result<(f64, bool)> {
        let (tape, _, l) = evaluate(&f, work)?;
        Ok((tape.value(l).data()[0], tape.kink_pattern() == base_pattern))
    };
    for t in 0..params.len() {
        let n = params[t].len();
        let mut picks = sample(&mut rng, n, n.min(MAX_PROBES_PER_TENSOR)).into_vec();
        picks.sort_unstable();
        for e in picks {
            let orig = params[t].data()[e];
            let mut central = |step: f64| -> Result<(f64, bool)> {
                work[t].data_mut()[e] = orig + step;
                let (up, same_up) = loss_at(&work)?;
                work[t].data_mut()[e] = orig - step;
                let (down, same_down) = loss_at(&work)?;
                work[t].data_mut()[e] = orig;
                Ok(((up - down) / (2.0 * step), same_up && same_down))
            };
            let mut step = h;
            let numeric = loop {
                let (coarse, smooth_coarse) = central(step)?;
                let (fine, smooth_fine) = central(step / 2.0)?;
                if (smooth_coarse && smooth_fine) || step <= h * MIN_STEP_FRACTION {
                    break (4.0 * fine - coarse) / 3.0;
                }
                step /= 2.0;
            };
            if step < h {
                report.shrunk += 1;
            }
            let a = analytic[t][e];
            let rel = relative_error(a, numeric);
            report.probes += 1;
            report.per_tensor[t] = report.per_tensor[t].max(rel);
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel > tol {
                report.failures.push(Probe {
                    tensor: t,
                    element: e,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}
