//! Intra-frame gathering: low-rank convolutional prompts, the spatial
//! variance branch and the entropy weights.
//!
//! ```text
//! l   = conv1(x·L_down1)            on the √N×√N patch grid
//! p_s = l·L_up1
//! v   = mean_tokens(conv2(l)·L_up2)
//! w   = entropy_weights(p_s, α)
//! ```

use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SspError};
use crate::params::{uniform, Bound, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Added inside the entropy logarithm.
pub const ENTROPY_EPS: f64 = 1e-8;
/// Lower clamp on the per-frame maximum entropy.
pub const ENTROPY_DIV_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct IfgParams {
    pub down1: ParamId,
    pub conv1: ParamId,
    pub up1: ParamId,
    pub conv2: ParamId,
    pub up2: ParamId,
    pub alpha: ParamId,
}

/// Outputs of [`IfgParams::forward`] for `T` frames of `N` tokens.
#[derive(Clone, Copy, Debug)]
pub struct IfgOut {
    /// `[T·N × d]`, frame-major.
    pub p_s: Var,
    /// `[T × d]`.
    pub v: Var,
    pub gate: EntropyGate,
}

#[derive(Clone, Copy, Debug)]
pub struct EntropyGate {
    /// `α·softmax_frames(Ē)` broadcast to `[T × d]`.
    pub w: Var,
    /// Per-token `E`, `[T × N]`.
    pub e: Var,
    /// Per-frame mean `Ē`, `[T]`.
    pub e_mean: Var,
}

impl IfgParams {
    /// `up2_bound` is the half-width of the uniform init of `L_up2`; zero
    /// gives the fully zero-initialized module.
    pub fn init(store: &mut ParamStore, model: usize, spatial: usize, up2_bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let g = ParamGroup::Ifg;
        let down = 1.0 / (model as f64).sqrt();
        let up2 = if up2_bound > 0.0 {
            uniform(&[spatial, model], up2_bound, rng)
        } else {
            Tensor::zeros(&[spatial, model])
        };
        IfgParams {
            down1: store.add("ifg.down1", g, uniform(&[model, spatial], down, rng)),
            conv1: store.add("ifg.conv1", g, uniform(&[3, 3, spatial], 1.0 / 3.0, rng)),
            up1: store.add("ifg.up1", g, Tensor::zeros(&[spatial, model])),
            conv2: store.add("ifg.conv2", g, uniform(&[3, 3, spatial], 1.0 / 3.0, rng)),
            up2: store.add("ifg.up2", g, up2),
            alpha: store.add("ifg.alpha", g, Tensor::scalar(1.0)),
        }
    }

    /// Run on frame tokens `x[T·N × d]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, frames: usize) -> Result<IfgOut> {
        let (rows, d) = match tape.shape(x) {
            &[r, d] => (r, d),
            s => return Err(SspError::dim(format!("frame tokens must be rank 2, got {s:?}"))),
        };
        if frames == 0 || rows % frames != 0 {
            return Err(SspError::dim(format!(
                "{rows} tokens do not split into {frames} frames"
            )));
        }
        let n = rows / frames;
        let side = grid_side(n)?;
        let spatial = tape.shape(bound[self.down1])[1];

        let low = tape.matmul(x, bound[self.down1])?;
        let grid = tape.reshape(low, &[frames, side, side, spatial])?;
        let l = tape.conv2d_depthwise(grid, bound[self.conv1])?;
        let l_flat = tape.reshape(l, &[rows, spatial])?;
        let p_s = tape.matmul(l_flat, bound[self.up1])?;

        let l2 = tape.conv2d_depthwise(l, bound[self.conv2])?;
        let l2 = tape.reshape(l2, &[rows, spatial])?;
        let up = tape.matmul(l2, bound[self.up2])?;
        let up = tape.reshape(up, &[frames, n, d])?;
        let v = tape.mean_axis(up, 1)?;

        let p3 = tape.reshape(p_s, &[frames, n, d])?;
        let gate = entropy_weights(tape, p3, bound[self.alpha], ENTROPY_EPS)?;
        Ok(IfgOut { p_s, v, gate })
    }
}

/// Side of the square patch grid holding `n` tokens.
pub fn grid_side(n: usize) -> Result<usize> {
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n || n == 0 {
        return Err(SspError::config(format!(
            "{n} patches per frame is not a perfect square"
        )));
    }
    Ok(side)
}

/// Entropy weights of intra-frame prompts `p_s[T × N × d]`.
///
/// Per token `P = softmax_d(p_s)`, `H = max(−Σ P·ln(P + ε), 0)`; per frame
/// `E = 1 − H / max(max_tokens H, ε_div)`, `Ē = mean_tokens E`;
/// `w = α·softmax_frames(Ē)` repeated over `d` channels.
pub fn entropy_weights(tape: &mut Tape, p_s: Var, alpha: Var, eps: f64) -> Result<EntropyGate> {
    if !(eps > 0.0) {
        return Err(SspError::contract(format!(
            "entropy epsilon must be positive, got {eps}"
        )));
    }
    let (frames, d) = match tape.shape(p_s) {
        &[t, _, d] => (t, d),
        s => return Err(SspError::dim(format!("prompts must be [T×N×d], got {s:?}"))),
    };
    let p = tape.softmax(p_s, 2)?;
    let shifted = tape.add_scalar(p, eps)?;
    let logp = tape.log(shifted);
    let plogp = tape.mul(p, logp)?;
    let neg_h = tape.sum_axis(plogp, 2)?;
    let h = tape.neg(neg_h);
    // ε makes H dip to about −ε on one-hot tokens; keep E within [0, 1].
    let h = tape.clamp_min(h, 0.0);

    let h_max = tape.max_axis(h, 1)?;
    let h_max = tape.clamp_min(h_max, ENTROPY_DIV_EPS);
    let h_max = tape.reshape(h_max, &[frames, 1])?;
    let ratio = tape.div(h, h_max)?;
    let neg_ratio = tape.neg(ratio);
    let e = tape.add_scalar(neg_ratio, 1.0)?;
    let e_mean = tape.mean_axis(e, 1)?;

    let share = tape.softmax(e_mean, 0)?;
    let share = tape.reshape(share, &[frames, 1])?;
    let scaled = tape.mul(share, alpha)?;
    let ones = tape.constant(Tensor::ones(&[1, d]));
    let w = tape.mul(scaled, ones)?;
    Ok(EntropyGate { w, e, e_mean })
}
