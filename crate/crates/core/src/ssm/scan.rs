//! Sequential selective-scan kernel.
//!
//! For every position `t`, channel `c` and state `n`:
//!
//! ```text
//! z      = Δ[t,c] · A[c,n]
//! Ā      = exp(z)  (as 1 + expm1(z))
//! B̄      = φ(z) · Δ[t,c] · B[t,n]          φ(z) = (eᶻ − 1) / z
//! h[c,n] = Ā · h[c,n] + B̄ · x[t,c]
//! y[t,c] = Σₙ C[t,n] · h[c,n]
//! ```
//!
//! The forward pass stores every hidden state so the backward pass can run
//! the adjoint recurrence without recomputation.

use super::zoh::gate_factors;
use crate::error::{Result, SspError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

impl ScanDims {
    pub fn check(x: &[usize], delta: &[usize], a: &[usize], b: &[usize], c: &[usize]) -> Result<ScanDims> {
        let bad = || {
            SspError::dim(format!(
                "selective scan shapes disagree: x {x:?}, delta {delta:?}, A {a:?}, B {b:?}, C {c:?}"
            ))
        };
        let (&[len, channels], &[ac, state]) = (x, a) else {
            return Err(bad());
        };
        if delta != x || ac != channels || b != [len, state] || c != [len, state] {
            return Err(bad());
        }
        Ok(ScanDims { len, channels, state })
    }
}

/// Returns `(y[S×d], states[S×d×D])`.
pub fn forward(dims: ScanDims, x: &[f64], delta: &[f64], a: &[f64], b: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let ScanDims { len, channels, state } = dims;
    let plane = channels * state;
    let mut y = vec![0.0; len * channels];
    let mut states = vec![0.0; len * plane];
    let mut h = vec![0.0; plane];
    for t in 0..len {
        let brow = &b[t * state..(t + 1) * state];
        let crow = &c[t * state..(t + 1) * state];
        for ch in 0..channels {
            let dt = delta[t * channels + ch];
            let xv = x[t * channels + ch];
            let arow = &a[ch * state..(ch + 1) * state];
            let hrow = &mut h[ch * state..(ch + 1) * state];
            let mut acc = 0.0;
            for n in 0..state {
                let z = dt * arow[n];
                let (abar, ph, _) = gate_factors(z);
                let bbar = ph * dt * brow[n];
                hrow[n] = abar * hrow[n] + bbar * xv;
                acc += crow[n] * hrow[n];
            }
            y[t * channels + ch] = acc;
        }
        states[t * plane..(t + 1) * plane].copy_from_slice(&h);
    }
    (y, states)
}

pub struct ScanGrads {
    pub x: Vec<f64>,
    pub delta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

/// Adjoint of [`forward`] given upstream `gy[S×d]`.
#[allow(clippy::too_many_arguments)]
pub fn backward(
    dims: ScanDims,
    gy: &[f64],
    x: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    states: &[f64],
) -> ScanGrads {
    let ScanDims { len, channels, state } = dims;
    let plane = channels * state;
    let mut gx = vec![0.0; len * channels];
    let mut gdelta = vec![0.0; len * channels];
    let mut ga = vec![0.0; plane];
    let mut gb = vec![0.0; len * state];
    let mut gc = vec![0.0; len * state];
    // adjoint of h carried backwards in time
    let mut dh = vec![0.0; plane];
    for t in (0..len).rev() {
        let h_t = &states[t * plane..(t + 1) * plane];
        let h_prev = (t > 0).then(|| &states[(t - 1) * plane..t * plane]);
        let brow = &b[t * state..(t + 1) * state];
        let crow = &c[t * state..(t + 1) * state];
        for ch in 0..channels {
            let g = gy[t * channels + ch];
            let dt = delta[t * channels + ch];
            let xv = x[t * channels + ch];
            let mut gdt = 0.0;
            let mut gxv = 0.0;
            for n in 0..state {
                let i = ch * state + n;
                gc[t * state + n] += g * h_t[i];
                let dhi = dh[i] + g * crow[n];
                let an = a[i];
                let z = dt * an;
                let (abar, ph, dph) = gate_factors(z);
                let bbar = ph * dt * brow[n];
                let hp = h_prev.map_or(0.0, |hp| hp[i]);
                let g_abar = dhi * hp;
                let g_bbar = dhi * xv;
                gxv += dhi * bbar;
                let g_z = g_abar * abar + g_bbar * dph * dt * brow[n];
                gdt += g_z * an + g_bbar * ph * brow[n];
                ga[i] += g_z * dt;
                gb[t * state + n] += g_bbar * ph * dt;
                dh[i] = dhi * abar;
            }
            gdelta[t * channels + ch] = gdt;
            gx[t * channels + ch] = gxv;
        }
    }
    ScanGrads {
        x: gx,
        delta: gdelta,
        a: ga,
        b: gb,
        c: gc,
    }
}
