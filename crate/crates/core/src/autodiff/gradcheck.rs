//! Central finite-difference verification of reverse-mode gradients.

use crate::autodiff::params::ParamSet;
use crate::autodiff::tape::{Tape, Var};
use crate::error::Result;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct CoordinateCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub coordinates: Vec<CoordinateCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&CoordinateCheck> {
        self.coordinates
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn evaluate<F>(f: &F, theta: &ParamSet) -> Result<(Tape, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = tape.bind(theta);
    let out = f(&mut tape, &vars)?;
    Ok((tape, out))
}

/// Compare reverse-mode gradients of `f` at `theta` against central
/// differences with step `h·max(1, |θᵢ|)` on every coordinate.
pub fn grad_check<F>(f: F, theta: &ParamSet, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, loss) = evaluate(&f, theta)?;
    let analytic = tape.backward(loss)?.param_grads(theta).to_flat();
    drop(tape);

    let base = theta.to_flat();
    let mut probe = theta.clone();
    let mut flat = base.clone();
    let mut coordinates = Vec::with_capacity(base.len());
    for (name, off, len) in theta.flat_spans() {
        for j in 0..len {
            let i = off + j;
            let step = h * base[i].abs().max(1.0);
            flat[i] = base[i] + step;
            probe.set_flat(&flat)?;
            let (t, v) = evaluate(&f, &probe)?;
            let plus = t.value(v).item();
            flat[i] = base[i] - step;
            probe.set_flat(&flat)?;
            let (t, v) = evaluate(&f, &probe)?;
            let minus = t.value(v).item();
            flat[i] = base[i];
            let numeric = (plus - minus) / (2.0 * step);
            coordinates.push(CoordinateCheck {
                param: name.clone(),
                index: j,
                analytic: analytic[i],
                numeric,
                rel_error: relative_error(analytic[i], numeric),
            });
        }
    }
    let max_rel_error = coordinates.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        coordinates,
        max_rel_error,
        tol,
        passed: max_rel_error < tol,
    })
}
