use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - central| / max(1, |analytic|)` over all coordinates.
    pub max_relative_error: f64,
    /// `(parameter, coordinate)` where the maximum was attained.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.leaf(p.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out).item()?;
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok(v)
}

/// Compares tape gradients of `f` against central differences.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let coords: Vec<Vec<usize>> = params.iter().map(|p| (0..p.len()).collect()).collect();
    grad_check_at(f, params, eps, &coords)
}

/// Like [`grad_check`], but only probes `coords[i]` within `params[i]`.
pub fn grad_check_at<F>(f: F, params: &[Tensor], eps: f64, coords: &[Vec<usize>]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Contract(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    if coords.len() != params.len() || coords.iter().zip(params).any(|(c, p)| c.iter().any(|&k| k >= p.len())) {
        return Err(Error::Index("grad_check coordinate out of range".into()));
    }
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.leaf(p.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic = vars.iter().map(|&v| tape.grad(v)).collect::<Result<Vec<_>>>()?;

    let mut report = GradCheckReport { max_relative_error: 0.0, worst: (0, 0), coordinates: 0 };
    let mut probe = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        for &k in &coords[pi] {
            let orig = probe[pi].data()[k];
            probe[pi].data_mut()[k] = orig + eps;
            let up = evaluate(&f, &probe)?;
            probe[pi].data_mut()[k] = orig - eps;
            let down = evaluate(&f, &probe)?;
            probe[pi].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = grad.data()[k];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            report.coordinates += 1;
            if err > report.max_relative_error || report.coordinates == 1 {
                report.max_relative_error = err;
                report.worst = (pi, k);
            }
        }
    }
    Ok(report)
}
