use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Maximum relative error per parameter tensor.
    pub max_rel_error: Vec<f64>,
    /// Worst offenders as `(param, element, analytic, numeric, rel_error)`,
    /// sorted by decreasing error.
    pub worst: Vec<(usize, usize, f64, f64, f64)>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error.iter().all(|&e| e < self.tol)
    }

    pub fn overall_max(&self) -> f64 {
        self.max_rel_error.iter().cloned().fold(0.0, f64::max)
    }
}

/// Relative error with a small floor so that two near-zero values compare
/// as equal.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares the analytic gradient of the scalar function `f` against central
/// finite differences with step `h`.
///
/// `f` receives a fresh tape and one handle per entry of `params`.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    if !tape.value(loss).all_finite() {
        return Err(Error::NonFinite("grad_check loss".into()));
    }
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = params
        .iter()
        .zip(&vars)
        .map(|(p, &v)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.constant(p.clone())).collect();
        let l = f(&mut t, &vs)?;
        let v = t.value(l).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check loss".into()));
        }
        Ok(v)
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel = vec![0.0; params.len()];
    let mut worst = Vec::new();
    for k in 0..params.len() {
        for j in 0..params[k].len() {
            let orig = work[k].data()[j];
            work[k].data_mut()[j] = orig + h;
            let fp = eval(&work)?;
            work[k].data_mut()[j] = orig - h;
            let fm = eval(&work)?;
            work[k].data_mut()[j] = orig;
            let num = (fp - fm) / (2.0 * h);
            let ana = analytic[k].data()[j];
            let rel = relative_error(ana, num);
            if rel > max_rel[k] {
                max_rel[k] = rel;
            }
            worst.push((k, j, ana, num, rel));
        }
    }
    worst.sort_by(|a, b| b.4.total_cmp(&a.4));
    worst.truncate(5);
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        worst,
        tol,
    })
}
