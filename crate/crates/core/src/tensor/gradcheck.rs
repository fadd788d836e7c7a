use serde::Serialize;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `max_abs_err` over the largest gradient magnitude in the tensor.
    pub norm_rel_err: f64,
    pub worst_index: usize,
}

/// Finite-difference formula used as the oracle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`
    Central,
    /// `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`; smaller truncation
    /// error for larger steps, more roundoff for small ones.
    FourthOrder,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub stencil: Stencil,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failing(&self, tol: f64) -> Vec<&ParamCheck> {
        self.params.iter().filter(|p| p.max_rel_err > tol).collect()
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.failing(tol).is_empty()
    }

    /// Tensor-wise comparison, for random inputs where cancellation can leave
    /// individual gradient entries below the difference quotient's roundoff.
    pub fn passes_normwise(&self, tol: f64) -> bool {
        self.params.iter().all(|p| p.norm_rel_err <= tol)
    }
}

/// Compares tape gradients against central finite differences.
///
/// `f` builds a scalar on a fresh tape from the bound parameter leaves (in the
/// order of `params`). The per-entry error is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(params: &[(String, Tensor)], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    grad_check_with(params, eps, Stencil::Central, f)
}

pub fn grad_check_with<F>(params: &[(String, Tensor)], eps: f64, stencil: Stencil, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Config("grad_check eps must be positive".into()));
    }
    let mut work: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();

    let analytic: Vec<Tensor> = {
        let mut tape = Tape::new();
        let vars = bind(&mut tape, &work)?;
        let loss = f(&mut tape, &vars)?;
        tape.backward(loss)?;
        vars.iter().map(|&v| tape.grad_tensor(v)).collect()
    };

    let eval = |work: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = bind(&mut tape, work)?;
        let loss = f(&mut tape, &vars)?;
        let v = tape.value(loss).data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        Ok(v)
    };

    let mut report = GradCheckReport {
        eps,
        stencil,
        params: Vec::with_capacity(params.len()),
    };
    for (p, (name, _)) in params.iter().enumerate() {
        let mut check = ParamCheck {
            name: name.clone(),
            entries: work[p].len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            norm_rel_err: 0.0,
            worst_index: 0,
        };
        let mut scale = 1e-8f64;
        for i in 0..work[p].len() {
            let orig = work[p].data()[i];
            let mut at = |step: f64| -> Result<f64> {
                work[p].data_mut()[i] = orig + step;
                eval(&work)
            };
            let (up1, down1) = (at(eps)?, at(-eps)?);
            let numeric = match stencil {
                Stencil::Central => (up1 - down1) / (2.0 * eps),
                Stencil::FourthOrder => {
                    let (up2, down2) = (at(2.0 * eps)?, at(-2.0 * eps)?);
                    (8.0 * (up1 - down1) - (up2 - down2)) / (12.0 * eps)
                }
            };
            work[p].data_mut()[i] = orig;
            let a = analytic[p].data()[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-8);
            check.max_abs_err = check.max_abs_err.max(abs);
            scale = scale.max(a.abs()).max(numeric.abs());
            if rel > check.max_rel_err {
                check.max_rel_err = rel;
                check.worst_index = i;
            }
        }
        check.norm_rel_err = check.max_abs_err / scale;
        report.params.push(check);
    }
    Ok(report)
}

fn bind<'t>(tape: &mut Tape<'t>, params: &'t [Tensor]) -> Result<Vec<Var>> {
    params.iter().map(|t| tape.param(t)).collect()
}
