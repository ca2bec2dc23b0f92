//! Inter-frame spreading: per-frame summary tokens, gated by the entropy
//! weights, mixed across time by a low-rank single-head attention.
//!
//! ```text
//! g   = s ⊙ w
//! z   = g·L_down2
//! z'  = softmax(zQ·(zK)ᵀ / √d_t)·zV·O
//! p_t = β·(z'·L_up3) ⊙ v
//! ```

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layout::SeqLayout;
use crate::error::{Result, SspError};
use crate::params::{uniform, Bound, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Which token of each frame summarizes it for spreading.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Last token of the frame in forward scan order.
    #[default]
    LastForward,
    /// Token `⌊N/2⌋`.
    Middle,
    /// Last tokens of both scan directions, spread jointly as `2T` tokens.
    Bidirection,
    /// Same pair, each routed through its own spreading module.
    BiIndependent,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::LastForward,
        Strategy::Middle,
        Strategy::Bidirection,
        Strategy::BiIndependent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::LastForward => "last_forward",
            Strategy::Middle => "middle",
            Strategy::Bidirection => "bidirection",
            Strategy::BiIndependent => "bi_independent",
        }
    }

    /// Patch indices sampled from each frame of `n` patches: one for the
    /// single-token strategies, forward then backward for the paired ones.
    pub fn patches(self, n: usize) -> Vec<usize> {
        match self {
            Strategy::LastForward => vec![n - 1],
            Strategy::Middle => vec![n / 2],
            Strategy::Bidirection | Strategy::BiIndependent => vec![n - 1, 0],
        }
    }

    /// Spreading modules needed per boundary.
    pub fn modules(self) -> usize {
        match self {
            Strategy::BiIndependent => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = SspError;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| SspError::config(format!("unknown sampling strategy {s:?}")))
    }
}

/// Sequence rows sampled per frame: `rows[k][i]` is token `k` of frame `i`.
pub fn sample_rows(layout: &SeqLayout, strategy: Strategy) -> Vec<Vec<usize>> {
    strategy
        .patches(layout.patches)
        .into_iter()
        .map(|p| (0..layout.frames).map(|f| layout.patch_index(f, p)).collect())
        .collect()
}

/// Gather the sampled tokens, each `[T × d]`.
pub fn sample_frame_tokens(tape: &mut Tape, seq: Var, layout: &SeqLayout, strategy: Strategy) -> Result<Vec<Var>> {
    sample_rows(layout, strategy)
        .iter()
        .map(|rows| tape.gather_rows(seq, rows))
        .collect()
}

#[derive(Clone, Debug)]
pub struct IfsParams {
    pub down2: ParamId,
    pub q: ParamId,
    pub k: ParamId,
    pub v: ParamId,
    pub o: ParamId,
    pub up3: ParamId,
    pub beta: ParamId,
}

impl IfsParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        model: usize,
        temporal: usize,
        beta: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let g = ParamGroup::Ifs;
        let down = 1.0 / (model as f64).sqrt();
        let inner = 1.0 / (temporal as f64).sqrt();
        let mut square = |name: &str, rng: &mut ChaCha8Rng| {
            store.add(
                format!("{prefix}.{name}"),
                g,
                uniform(&[temporal, temporal], inner, rng),
            )
        };
        let (q, k, v, o) = (square("q", rng), square("k", rng), square("v", rng), square("o", rng));
        IfsParams {
            down2: store.add(format!("{prefix}.down2"), g, uniform(&[model, temporal], down, rng)),
            q,
            k,
            v,
            o,
            up3: store.add(format!("{prefix}.up3"), g, Tensor::zeros(&[temporal, model])),
            beta: store.add(format!("{prefix}.beta"), g, Tensor::scalar(beta)),
        }
    }

    /// Inter-frame prompts `[T × d]` from summaries `s`, entropy weights `w`
    /// and spatial variances `v`, all `[T × d]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, s: Var, w: Var, v: Var) -> Result<Var> {
        if tape.shape(s).first() == Some(&0) || tape.shape(s).len() != 2 {
            return Err(SspError::contract(format!(
                "spreading needs [T×d] summaries with T > 0, got {:?}",
                tape.shape(s)
            )));
        }
        let g = tape.mul(s, w)?;
        let z = tape.matmul(g, bound[self.down2])?;
        let q = tape.matmul(z, bound[self.q])?;
        let k = tape.matmul(z, bound[self.k])?;
        let val = tape.matmul(z, bound[self.v])?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let temporal = tape.shape(z)[1] as f64;
        let scores = tape.scale(scores, 1.0 / temporal.sqrt());
        let attn = tape.softmax(scores, 1)?;
        let mixed = tape.matmul(attn, val)?;
        let z2 = tape.matmul(mixed, bound[self.o])?;
        let up = tape.matmul(z2, bound[self.up3])?;
        let gated = tape.mul(up, v)?;
        tape.mul(gated, bound[self.beta])
    }
}

/// Spreading modules attached to one layer boundary.
#[derive(Clone, Debug)]
pub struct Spreader {
    pub strategy: Strategy,
    pub modules: Vec<IfsParams>,
}

impl Spreader {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        model: usize,
        temporal: usize,
        beta: f64,
        strategy: Strategy,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let modules = (0..strategy.modules())
            .map(|m| {
                let name = if m == 0 {
                    prefix.to_string()
                } else {
                    format!("{prefix}_bwd")
                };
                IfsParams::init(store, &name, model, temporal, beta, rng)
            })
            .collect();
        Spreader { strategy, modules }
    }

    /// Sample `seq` and produce `[T × d]` inter-frame prompts.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, seq: Var, layout: &SeqLayout, w: Var, v: Var) -> Result<Var> {
        let samples = sample_frame_tokens(tape, seq, layout, self.strategy)?;
        match self.strategy {
            Strategy::LastForward | Strategy::Middle => self.modules[0].forward(tape, bound, samples[0], w, v),
            Strategy::Bidirection => {
                let t = layout.frames;
                let s = tape.concat_rows(&samples)?;
                let w2 = tape.concat_rows(&[w, w])?;
                let v2 = tape.concat_rows(&[v, v])?;
                let out = self.modules[0].forward(tape, bound, s, w2, v2)?;
                let fwd: Vec<usize> = (0..t).collect();
                let bwd: Vec<usize> = (t..2 * t).collect();
                let a = tape.gather_rows(out, &fwd)?;
                let b = tape.gather_rows(out, &bwd)?;
                average(tape, a, b)
            }
            Strategy::BiIndependent => {
                let a = self.modules[0].forward(tape, bound, samples[0], w, v)?;
                let b = self.modules[1].forward(tape, bound, samples[1], w, v)?;
                average(tape, a, b)
            }
        }
    }
}

fn average(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let s = tape.add(a, b)?;
    Ok(tape.scale(s, 0.5))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    #[test]
    fn sampled_positions() {
        let l = SeqLayout::new(2, 3);
        assert_eq!(sample_rows(&l, Strategy::LastForward), vec![vec![3, 6]]);
        assert_eq!(Strategy::Middle.patches(4), vec![2]);
        assert_eq!(
            sample_rows(&l.with_prompts(), Strategy::Bidirection),
            vec![vec![3, 7], vec![1, 5]]
        );
        for s in Strategy::ALL {
            let rows = sample_rows(&SeqLayout::new(3, 1), s);
            assert!(rows.iter().all(|r| r == &vec![1, 2, 3]), "{s}");
        }
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
            let json = serde_json::to_string(&s).unwrap();
            assert_eq!(json, format!("\"{}\"", s.name()));
        }
        assert!(matches!("first".parse::<Strategy>(), Err(SspError::Config(_))));
    }

    struct Fixture {
        store: ParamStore,
        ifs: IfsParams,
        s: Tensor,
        w: Tensor,
        v: Tensor,
    }

    fn fixture(frames: usize, seed: u64) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ifs = IfsParams::init(&mut store, "ifs1", 6, 3, 0.5, &mut rng);
        store.set(ifs.up3, uniform(&[3, 6], 1.0, &mut rng)).unwrap();
        Fixture {
            store,
            ifs,
            s: uniform(&[frames, 6], 1.0, &mut rng),
            w: uniform(&[frames, 6], 1.0, &mut rng),
            v: uniform(&[frames, 6], 1.0, &mut rng),
        }
    }

    fn run(f: &Fixture, s: &Tensor, w: &Tensor, v: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let bound = f.store.bind_frozen(&mut tape);
        let (s, w, v) = (
            tape.constant(s.clone()),
            tape.constant(w.clone()),
            tape.constant(v.clone()),
        );
        let out = f.ifs.forward(&mut tape, &bound, s, w, v).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn zero_beta_or_variance_annihilates() {
        let mut f = fixture(3, 1);
        let zero = Tensor::zeros(&[3, 6]);
        assert!(run(&f, &f.s, &f.w, &zero).data().iter().all(|&x| x == 0.0));
        f.store.set(f.ifs.beta, Tensor::scalar(0.0)).unwrap();
        assert!(run(&f, &f.s, &f.w, &f.v).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_frame_attention_collapses_to_value_path() {
        let f = fixture(1, 2);
        let out = run(&f, &f.s, &f.w, &f.v);
        let p = |id| f.store.get(id).clone();
        let mm = |a: &Tensor, b: &Tensor| {
            let (m, k) = a.dims2().unwrap();
            let n = b.shape()[1];
            Tensor::from_fn(&[m, n], |i| (0..k).map(|j| a.at(&[i / n, j]) * b.at(&[j, i % n])).sum())
        };
        let g = Tensor::from_fn(&[1, 6], |i| f.s.data()[i] * f.w.data()[i]);
        let z = mm(&g, &p(f.ifs.down2));
        let zv = mm(&mm(&z, &p(f.ifs.v)), &p(f.ifs.o));
        let up = mm(&zv, &p(f.ifs.up3));
        let beta = f.store.get(f.ifs.beta).item();
        let expect = Tensor::from_fn(&[1, 6], |i| beta * up.data()[i] * f.v.data()[i]);
        assert!(out.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn empty_input_is_contract_error() {
        let f = fixture(2, 3);
        let mut tape = Tape::new();
        let bound = f.store.bind_frozen(&mut tape);
        let s = tape.constant(Tensor::zeros(&[2, 6]));
        let flat = tape.reshape(s, &[12]).unwrap();
        assert!(matches!(
            f.ifs.forward(&mut tape, &bound, flat, s, s),
            Err(SspError::Contract(_))
        ));
    }
}
