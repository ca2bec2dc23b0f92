//! Transmission `T_{i→j} = ∏_{k=i+1..j} Ā_k` along the scan and its decay
//! with distance.

use crate::error::{Result, SspError};
use crate::ssm::Realized;

/// Relative slack allowed when validating a decay curve, for summation
/// rounding between equal neighbours.
pub const MONOTONE_RTOL: f64 = 1e-12;

/// `exp(a · Σ_{k=i+1..j} Δ_k)` over one channel's Δ sequence.
pub fn transmission_raw(deltas: &[f64], a: f64, i: usize, j: usize) -> Result<f64> {
    if i > j {
        return Err(SspError::contract(format!("transmission needs i ≤ j, got {i} > {j}")));
    }
    if j >= deltas.len() {
        return Err(SspError::contract(format!(
            "position {j} out of range for {} steps",
            deltas.len()
        )));
    }
    let log: f64 = deltas[i + 1..=j].iter().map(|d| d * a).sum();
    Ok(log.exp())
}

fn channel_deltas(g: &Realized, channel: usize) -> Result<Vec<f64>> {
    let &[s, d] = g.delta.shape() else {
        unreachable!("delta is [S×d]")
    };
    if channel >= d {
        return Err(SspError::contract(format!("channel {channel} out of range for {d}")));
    }
    Ok((0..s).map(|t| g.delta.data()[t * d + channel]).collect())
}

/// Transmission for `(channel, state)` of a recorded layer.
pub fn transmission(g: &Realized, i: usize, j: usize, channel: usize, state: usize) -> Result<f64> {
    let n = g.a.shape()[1];
    if state >= n {
        return Err(SspError::contract(format!("state {state} out of range for {n}")));
    }
    let a = g.a.data()[channel * n + state];
    transmission_raw(&channel_deltas(g, channel)?, a, i, j)
}

/// Mean over start positions `i` and state indices of `T_{i→i+δ}`, for
/// `δ = 0..S`. Errors if the result is not non-increasing.
pub fn decay_curve(g: &Realized, channel: usize) -> Result<Vec<f64>> {
    let deltas = channel_deltas(g, channel)?;
    let s = deltas.len();
    let n = g.a.shape()[1];
    // prefix[k] = Σ_{m<k} Δ_m, so Σ_{i+1..=j} Δ = prefix[j+1] − prefix[i+1]
    let mut prefix = vec![0.0; s + 1];
    for (k, d) in deltas.iter().enumerate() {
        prefix[k + 1] = prefix[k] + d;
    }
    let mut curve = Vec::with_capacity(s);
    for delta in 0..s {
        let mut sum = 0.0;
        for st in 0..n {
            let a = g.a.data()[channel * n + st];
            for i in 0..s - delta {
                sum += (a * (prefix[i + delta + 1] - prefix[i + 1])).exp();
            }
        }
        curve.push(sum / ((s - delta) * n) as f64);
    }
    check_monotone(&curve)?;
    Ok(curve)
}

pub fn check_monotone(curve: &[f64]) -> Result<()> {
    for (k, w) in curve.windows(2).enumerate() {
        if w[1] > w[0] * (1.0 + MONOTONE_RTOL) {
            return Err(SspError::Numeric(format!(
                "decay curve rises at δ = {}: {} → {}",
                k + 1,
                w[0],
                w[1]
            )));
        }
    }
    Ok(())
}

/// `delta,transmission` rows.
pub fn decay_csv(curve: &[f64]) -> String {
    let mut out = String::from("delta,transmission\n");
    for (d, v) in curve.iter().enumerate() {
        out.push_str(&format!("{d},{v:e}\n"));
    }
    out
}
