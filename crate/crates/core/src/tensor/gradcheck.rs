use super::{Tape, Tensor, Var};
use crate::error::{Result, SspError};

/// Compare the tape gradient of a scalar function against central
/// differences; returns the largest
/// `|g_ad − g_fd| / max(|g_ad|, |g_fd|, 1e-8)` over all elements.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), step)
}

/// [`grad_check`] over several input tensors at once.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_report(f, inputs, step).map(|r| r.max_rel_error)
}

/// Location and values of the worst element found by a gradient check.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Finite-difference formula used as the oracle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`.
    #[default]
    Central,
    /// Fourth-order `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`; allows a
    /// larger step, so near-zero gradients are less dominated by roundoff.
    FivePoint,
}

/// [`grad_check_many`] returning where the worst disagreement occurred.
pub fn grad_check_report<F>(f: F, inputs: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_stencil(f, inputs, step, Stencil::Central)
}

/// [`grad_check_report`] with an explicit stencil.
pub fn grad_check_stencil<F>(f: F, inputs: &[Tensor], step: f64, stencil: Stencil) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&step) {
        return Err(SspError::contract(format!(
            "finite-difference step {step} outside [1e-7, 1e-3]"
        )));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;

    let mut worst = GradCheckReport::default();
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        for i in 0..input.numel() {
            let orig = input.data()[i];
            let mut at = |offset: f64| -> Result<f64> {
                probe[k].data_mut()[i] = orig + offset;
                let v = eval(&probe);
                probe[k].data_mut()[i] = orig;
                v
            };
            let fd = match stencil {
                Stencil::Central => (at(step)? - at(-step)?) / (2.0 * step),
                Stencil::FivePoint => {
                    (-at(2.0 * step)? + 8.0 * at(step)? - 8.0 * at(-step)? + at(-2.0 * step)?) / (12.0 * step)
                }
            };
            let ad = analytic.data()[i];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-8);
            if rel > worst.max_rel_error {
                worst = GradCheckReport {
                    max_rel_error: rel,
                    input: k,
                    element: i,
                    analytic: ad,
                    numeric: fd,
                };
            }
        }
    }
    Ok(worst)
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(SspError::contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}
