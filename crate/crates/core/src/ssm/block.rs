//! Bidirectional Mamba block used as the frozen backbone layer.
//!
//! ```text
//! u          = rmsnorm(x)
//! main, gate = u·W_x, u·W_z
//! y_dir      = scan_dir(silu(causal_conv_dir(main)))     dir ∈ {forward, backward}
//! out        = ((y_fwd + y_bwd) / 2 ⊙ silu(gate))·W_out
//! return x + out
//! ```
//!
//! The backward branch runs its causal convolution and scan over the reversed
//! sequence with its own parameters, so the block is symmetric under
//! sequence reversal combined with swapping the two parameter sets.
//! This is a generic reconstruction of a bidirectional selective-SSM layer;
//! the exact internals of any particular pretrained checkpoint may differ.

use rand_chacha::ChaCha8Rng;

use super::selective::{reversed_rows, Realized, ScanDirection, SelectiveParams};
use crate::error::Result;
use crate::params::{uniform, Bound, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const CONV_WIDTH: usize = 4;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockDims {
    /// Residual width.
    pub model: usize,
    /// Width of the scanned branch.
    pub inner: usize,
    /// States per channel.
    pub state: usize,
}

#[derive(Clone, Debug)]
pub struct DirectionParams {
    pub conv_kernel: ParamId,
    pub conv_bias: ParamId,
    pub selective: SelectiveParams,
}

#[derive(Clone, Debug)]
pub struct MambaLayer {
    pub norm: ParamId,
    pub w_x: ParamId,
    pub w_z: ParamId,
    pub w_out: ParamId,
    pub forward: DirectionParams,
    pub backward: DirectionParams,
}

/// Realized gates captured during a block evaluation.
#[derive(Clone, Debug)]
pub struct BlockTrace {
    /// Forward-direction gates, indexed by sequence position.
    pub forward: Realized,
}

impl MambaLayer {
    pub fn init(store: &mut ParamStore, prefix: &str, dims: BlockDims, rng: &mut ChaCha8Rng) -> Self {
        let g = ParamGroup::Backbone;
        let BlockDims { model, inner, state } = dims;
        let direction = |store: &mut ParamStore, tag: &str, rng: &mut ChaCha8Rng| DirectionParams {
            conv_kernel: store.add(
                format!("{prefix}.{tag}.conv_kernel"),
                g,
                uniform(&[CONV_WIDTH, inner], 1.0 / (CONV_WIDTH as f64).sqrt(), rng),
            ),
            conv_bias: store.add(format!("{prefix}.{tag}.conv_bias"), g, uniform(&[inner], 0.1, rng)),
            selective: SelectiveParams::init(store, &format!("{prefix}.{tag}"), inner, state, g, rng),
        };
        let norm = store.add(format!("{prefix}.norm"), g, Tensor::ones(&[model]));
        let in_bound = 1.0 / (model as f64).sqrt();
        let w_x = store.add(format!("{prefix}.w_x"), g, uniform(&[model, inner], in_bound, rng));
        let w_z = store.add(format!("{prefix}.w_z"), g, uniform(&[model, inner], in_bound, rng));
        let w_out = store.add(
            format!("{prefix}.w_out"),
            g,
            uniform(&[inner, model], 1.0 / (inner as f64).sqrt(), rng),
        );
        let forward = direction(store, "fwd", rng);
        let backward = direction(store, "bwd", rng);
        MambaLayer {
            norm,
            w_x,
            w_z,
            w_out,
            forward,
            backward,
        }
    }

    /// Block output before the residual add.
    pub fn mixer(&self, tape: &mut Tape, bound: &Bound, x: Var, capture: bool) -> Result<(Var, Option<BlockTrace>)> {
        let u = tape.rms_norm(x, bound[self.norm], NORM_EPS)?;
        let main = tape.matmul(u, bound[self.w_x])?;
        let gate = tape.matmul(u, bound[self.w_z])?;

        let (y_f, sel_f) = direction_branch(tape, bound, &self.forward, main, ScanDirection::Forward)?;
        let (y_b, _) = direction_branch(tape, bound, &self.backward, main, ScanDirection::Backward)?;
        let trace = capture.then(|| BlockTrace {
            forward: sel_f.snapshot(tape),
        });

        let sum = tape.add(y_f, y_b)?;
        let mean = tape.scale(sum, 0.5);
        let g = tape.silu(gate);
        let mixed = tape.mul(mean, g)?;
        let out = tape.matmul(mixed, bound[self.w_out])?;
        Ok((out, trace))
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, capture: bool) -> Result<(Var, Option<BlockTrace>)> {
        let (out, trace) = self.mixer(tape, bound, x, capture)?;
        Ok((tape.add(x, out)?, trace))
    }
}

fn direction_branch(
    tape: &mut Tape,
    bound: &Bound,
    params: &DirectionParams,
    main: Var,
    direction: ScanDirection,
) -> Result<(Var, super::selective::SelectiveVars)> {
    let len = tape.shape(main)[0];
    let rev = reversed_rows(len);
    let seq = match direction {
        ScanDirection::Forward => main,
        ScanDirection::Backward => tape.gather_rows(main, &rev)?,
    };
    let conv = tape.causal_conv1d(seq, bound[params.conv_kernel], bound[params.conv_bias])?;
    let act = tape.silu(conv);
    let sel = super::selective::realize_selective(tape, bound, &params.selective, act)?;
    let y = tape.selective_scan(act, sel.delta, sel.a, sel.b, sel.c)?;
    let y = match direction {
        ScanDirection::Forward => y,
        ScanDirection::Backward => tape.gather_rows(y, &rev)?,
    };
    Ok((y, sel))
}
