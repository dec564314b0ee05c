use super::tape::{ParamId, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of `f` at `params` with central
/// differences of half-width `step`.
///
/// Returns the largest `|autodiff - fd| / (|fd| + 1e-12)` over every
/// coordinate of every parameter.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    compare(f, params, step, Stencil::Central)
}

/// Like [`grad_check`] but with the fourth-order five-point stencil
/// `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`.
///
/// Truncation error is `O(h^4)`, so a step near `1e-3` keeps it negligible
/// while the roundoff term `eps |f| / h` stays far below the one a tiny
/// central step incurs. Use it for deep composites whose gradients have
/// components many orders of magnitude smaller than `f`.
pub fn grad_check_five_point<F>(f: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    compare(f, params, step, Stencil::FivePoint)
}

#[derive(Clone, Copy)]
enum Stencil {
    Central,
    FivePoint,
}

fn compare<F>(f: F, params: &[Tensor], step: f64, stencil: Stencil) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let analytic = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> =
            params.iter().enumerate().map(|(i, p)| tape.param(ParamId(i), p.clone())).collect();
        let loss = f(&tape, &vars)?;
        tape.backward(loss)?
    };

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let v = f(&tape, &vars).map_err(|e| Error::InvalidArgument(format!("f failed at perturbed point: {e}")))?;
        let v = v.item();
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check"));
        }
        Ok(v)
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        let ad = analytic.get(ParamId(pi)).expect("every parameter has a gradient");
        for j in 0..p.len() {
            let orig = p.data()[j];
            let mut at = |d: f64| -> Result<f64> {
                work[pi].data_mut()[j] = orig + d;
                let v = eval(&work);
                work[pi].data_mut()[j] = orig;
                v
            };
            // Differences of symmetric pairs first, so a coordinate that does
            // not affect f gives exactly zero.
            let fd = match stencil {
                Stencil::Central => (at(step)? - at(-step)?) / (2.0 * step),
                Stencil::FivePoint => {
                    let near = at(step)? - at(-step)?;
                    let far = at(2.0 * step)? - at(-2.0 * step)?;
                    (8.0 * near - far) / (12.0 * step)
                }
            };
            let rel = (ad.data()[j] - fd).abs() / (fd.abs() + 1e-12);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
