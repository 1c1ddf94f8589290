//! Central finite-difference gradient checking.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Binding, ParamStore};
use crate::tensor::Tensor;

/// Rounding error of an `f32` objective, in units of `ε_f32·|f|`, assumed to
/// accumulate through a forward pass.
pub const NOISE_ULPS: f64 = 4.0;

/// Step sizes tried per element, each a quarter of the last, before an
/// element is skipped as sitting on a kink.
pub const KINK_RETRIES: i32 = 3;

/// Comparison of analytic and numeric gradients for one parameter tensor.
#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    /// `‖a − n‖₂ / (‖a‖₂ + ‖n‖₂)` for analytic `a` and numeric `n`; zero
    /// when both vanish.
    pub rel_error: f64,
    /// `‖a − n‖₂`.
    pub abs_error: f64,
    /// Largest elementwise `|a − n|`.
    pub max_abs_error: f64,
    /// `NOISE_ULPS · ε_f32 · max(|f|, 1) · ‖1/step‖₂` over compared elements:
    /// the error that `f32` rounding of the objective injects into central
    /// differences.
    pub noise_floor: f64,
    /// Elements skipped because every step tried crossed a ReLU or clamp
    /// boundary, where central differences do not estimate the derivative.
    pub kinks: usize,
    /// At least one element compared, and `rel_error < tol` or the absolute
    /// error is below the noise floor.
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub eps: f32,
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }
}

/// Checks the gradient of the scalar produced by `f` with respect to every
/// tensor in `params`.
///
/// `f` receives a fresh graph and one var per parameter, in order, and must
/// be deterministic.
pub fn grad_check<F>(f: F, params: &[(String, Tensor)], eps: f32, tol: f64) -> Result<CheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grads(&f, params)?;
    compare_gradients(&f, params, &analytic, eps, tol)
}

/// [`grad_check`] over every tensor of a parameter store.
pub fn grad_check_store<F>(store: &ParamStore, f: F, eps: f32, tol: f64) -> Result<CheckReport>
where
    F: Fn(&mut Graph, &Binding) -> Result<Var>,
{
    let params: Vec<(String, Tensor)> = store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect();
    grad_check(|g, vars| f(g, &Binding::from_vars(vars.to_vec())), &params, eps, tol)
}

/// Gradients of `f` from one backward pass.
pub fn analytic_grads<F>(f: &F, params: &[(String, Tensor)]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    check_finite(g.value(loss).item())?;
    g.backward(loss)?;
    Ok(vars.iter().map(|&v| g.grad_tensor(v)).collect())
}

/// Compares supplied `analytic` gradients against central differences of `f`.
pub fn compare_gradients<F>(
    f: &F,
    params: &[(String, Tensor)],
    analytic: &[Tensor],
    eps: f32,
    tol: f64,
) -> Result<CheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Contract("finite-difference eps must be positive".into()));
    }
    if analytic.len() != params.len() {
        return Err(Error::dim("one analytic gradient per parameter required"));
    }
    let mut work: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let (f0, sig0) = evaluate(f, &work)?;
    let mut report = CheckReport { eps, tol, params: Vec::with_capacity(params.len()) };

    for (pi, (name, _)) in params.iter().enumerate() {
        let n = work[pi].numel();
        let mut diff_sq = 0.0f64;
        let mut an_sq = 0.0f64;
        let mut num_sq = 0.0f64;
        let mut max_abs = 0.0f64;
        let mut kinks = 0;
        let mut floor_sq = 0.0f64;
        let unit_noise = NOISE_ULPS * f32::EPSILON as f64 * f0.abs().max(1.0);
        for j in 0..n {
            let orig = work[pi].data()[j];
            let mut numeric = None;
            for shrink in 0..KINK_RETRIES {
                let step = eps / 4f32.powi(shrink);
                let (hi, lo) = (orig + step, orig - step);
                work[pi].data_mut()[j] = hi;
                let (f_hi, sig_hi) = evaluate(f, &work)?;
                work[pi].data_mut()[j] = lo;
                let (f_lo, sig_lo) = evaluate(f, &work)?;
                work[pi].data_mut()[j] = orig;
                if sig_hi == sig0 && sig_lo == sig0 {
                    numeric = Some(((f_hi - f_lo) / (hi as f64 - lo as f64), (hi as f64 - lo as f64) / 2.0));
                    break;
                }
            }
            let Some((numeric, step)) = numeric else {
                kinks += 1;
                continue;
            };
            floor_sq += (unit_noise / step).powi(2);
            let a = analytic[pi].data()[j] as f64;
            diff_sq += (a - numeric).powi(2);
            an_sq += a * a;
            num_sq += numeric * numeric;
            max_abs = max_abs.max((a - numeric).abs());
        }
        let noise_floor = if kinks == n { (n as f64).sqrt() * unit_noise / eps as f64 } else { floor_sq.sqrt() };
        let abs_error = diff_sq.sqrt();
        let scale = an_sq.sqrt() + num_sq.sqrt();
        let rel_error = if scale == 0.0 { 0.0 } else { abs_error / scale };
        report.params.push(ParamCheck {
            name: name.clone(),
            numel: n,
            rel_error,
            abs_error,
            max_abs_error: max_abs,
            noise_floor,
            kinks,
            passed: kinks < n && (rel_error < tol || abs_error <= noise_floor),
        });
    }
    Ok(report)
}

/// Objective value and the kink signature of the evaluation.
fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<(f64, u64)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out).item();
    check_finite(v)?;
    Ok((v as f64, g.kink_signature()))
}

fn check_finite(v: f32) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("objective evaluated to {v}")))
    }
}
