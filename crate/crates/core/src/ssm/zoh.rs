//! Zero-order-hold discretization for a diagonal state matrix.

use crate::error::{Result, SspError};
use crate::tensor::Tensor;

/// Below this `|ΔA|` the first-order series of `(e^z − 1)/z` is used.
pub const SERIES_THRESHOLD: f64 = 1e-8;

/// `(e^z − 1) / z`, continuous at zero.
#[inline]
pub fn phi(z: f64) -> f64 {
    if z.abs() < SERIES_THRESHOLD {
        1.0 + z / 2.0
    } else {
        z.exp_m1() / z
    }
}

/// `d/dz (e^z − 1) / z`.
#[inline]
pub fn phi_prime(z: f64) -> f64 {
    gate_factors(z).2
}

/// `(e^z, φ(z), φ'(z))` from a single `expm1`.
#[inline]
pub(crate) fn gate_factors(z: f64) -> (f64, f64, f64) {
    let em1 = z.exp_m1();
    let abar = 1.0 + em1;
    let ph = if z.abs() < SERIES_THRESHOLD {
        1.0 + z / 2.0
    } else {
        em1 / z
    };
    let dph = if z.abs() < 1e-3 {
        0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0
    } else {
        (z * abar - em1) / (z * z)
    };
    (abar, ph, dph)
}

/// Scalar ZOH: returns `(Ā, B̄)` for one diagonal entry.
pub fn zoh_scalar(a: f64, b: f64, delta: f64) -> Result<(f64, f64)> {
    if !(delta > 0.0) {
        return Err(SspError::Domain(format!("step size must be positive, got {delta}")));
    }
    let z = delta * a;
    if !(z < 0.0) {
        return Err(SspError::Domain(format!("ΔA must be negative, got Δ={delta}, A={a}")));
    }
    Ok((z.exp(), phi(z) * delta * b))
}

/// Elementwise ZOH over equally shaped `A`, `B`, `Δ`:
/// `Ā = exp(ΔA)`, `B̄ = (ΔA)⁻¹(exp(ΔA) − 1)·ΔB`.
pub fn zoh_discretize(a: &Tensor, b: &Tensor, delta: &Tensor) -> Result<(Tensor, Tensor)> {
    if a.shape() != b.shape() || a.shape() != delta.shape() {
        return Err(SspError::dim(format!(
            "zoh operands differ in shape: A {:?}, B {:?}, Δ {:?}",
            a.shape(),
            b.shape(),
            delta.shape()
        )));
    }
    let mut abar = Vec::with_capacity(a.numel());
    let mut bbar = Vec::with_capacity(a.numel());
    for ((&av, &bv), &dv) in a.data().iter().zip(b.data()).zip(delta.data()) {
        let (x, y) = zoh_scalar(av, bv, dv)?;
        abar.push(x);
        bbar.push(y);
    }
    Ok((
        Tensor::new(a.shape().to_vec(), abar)?,
        Tensor::new(a.shape().to_vec(), bbar)?,
    ))
}
