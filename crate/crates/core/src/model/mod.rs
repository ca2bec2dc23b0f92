//! The prompted video classifier: patch embedding, cls token, bidirectional
//! Mamba layers with state space prompting at layer boundaries, and a linear
//! head on the cls output.

mod checkpoint;
mod config;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, MANIFEST};
pub use config::ModelConfig;

use crate::error::{Result, SspError};
use crate::params::{uniform, Bound, ParamGroup, ParamId, ParamStore};
use crate::prompt::{frame_tokens, insert_inter, overlay_intra, IfgParams, SeqLayout, Spreader};
use crate::ssm::{BlockDims, MambaLayer, Realized};
use crate::tensor::{Tape, Tensor, Var};

/// Which parameter groups a run may update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    /// Prompt modules and head; the backbone stays frozen.
    #[default]
    SspPeft,
    Full,
    HeadOnly,
}

impl FreezePolicy {
    pub fn name(self) -> &'static str {
        match self {
            FreezePolicy::SspPeft => "ssp_peft",
            FreezePolicy::Full => "full",
            FreezePolicy::HeadOnly => "head_only",
        }
    }
}

impl fmt::Display for FreezePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FreezePolicy {
    type Err = SspError;
    fn from_str(s: &str) -> Result<Self> {
        [FreezePolicy::SspPeft, FreezePolicy::Full, FreezePolicy::HeadOnly]
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| SspError::config(format!("unknown freeze policy {s:?}")))
    }
}

#[derive(Clone, Debug)]
pub struct VideoModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embed_w: ParamId,
    pub embed_b: ParamId,
    pub cls: ParamId,
    pub layers: Vec<MambaLayer>,
    pub norm_f: ParamId,
    pub ifg: IfgParams,
    /// One per boundary after layers `1..=n_ifs`.
    pub spreaders: Vec<Spreader>,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

/// Values recorded at one layer during a captured forward pass.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    /// Layout of the layer's input sequence.
    pub layout: SeqLayout,
    /// Forward-direction gates of the layer, indexed by sequence row.
    pub gates: Realized,
    /// Intra-frame prompts `[T·N × d]`, entropy weights and variances `[T × d]`.
    pub p_s: Option<Tensor>,
    pub w: Option<Tensor>,
    pub v: Option<Tensor>,
    /// Inter-frame prompts in the layer's input slots.
    pub p_t: Option<Tensor>,
}

pub struct Forward {
    pub logits: Var,
    pub trace: Vec<LayerTrace>,
}

impl VideoModel {
    /// Backbone tensors come from `backbone_seed` alone (a stand-in for a
    /// pretrained checkpoint); prompt modules and head from `seed`.
    pub fn new(config: ModelConfig, backbone_seed: u64, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(backbone_seed);
        let g = ParamGroup::Backbone;
        let (d, pd) = (c.d_model, c.patch_dim());
        let embed_w = store.add("embed.w", g, uniform(&[pd, d], 1.0 / (pd as f64).sqrt(), &mut rng));
        let embed_b = store.add("embed.b", g, uniform(&[d], 0.1, &mut rng));
        let cls = store.add("cls", g, uniform(&[1, d], 0.02, &mut rng));
        let dims = BlockDims {
            model: d,
            inner: c.d_inner(),
            state: c.d_state,
        };
        let layers = (0..c.layers)
            .map(|l| MambaLayer::init(&mut store, &format!("layer{l}"), dims, &mut rng))
            .collect();
        let norm_f = store.add("norm_f", g, Tensor::ones(&[d]));

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ifg = IfgParams::init(&mut store, d, c.d_spatial, c.variance_init, &mut rng);
        let spreaders = (1..=c.n_ifs)
            .map(|j| {
                Spreader::init(
                    &mut store,
                    &format!("ifs{j}"),
                    d,
                    c.d_temporal,
                    c.beta_init,
                    c.strategy,
                    &mut rng,
                )
            })
            .collect();
        let head_w = store.add(
            "head.w",
            ParamGroup::Head,
            uniform(&[d, c.n_classes], 1.0 / (d as f64).sqrt(), &mut rng),
        );
        let head_b = store.add("head.b", ParamGroup::Head, Tensor::zeros(&[c.n_classes]));
        Ok(VideoModel {
            config,
            store,
            embed_w,
            embed_b,
            cls,
            layers,
            norm_f,
            ifg,
            spreaders,
            head_w,
            head_b,
        })
    }

    /// Whether a tensor takes part in the forward pass under the current switches.
    pub fn in_use(&self, id: ParamId) -> bool {
        let c = &self.config;
        match self.store.entry(id).group {
            ParamGroup::Backbone | ParamGroup::Head => true,
            ParamGroup::Ifs => c.use_ifs,
            ParamGroup::Ifg => {
                let ifg = &self.ifg;
                let w_used = c.use_ifs && c.use_entropy_gate;
                let v_used = c.use_ifs && c.use_variance_gate;
                if id == ifg.alpha {
                    w_used
                } else if id == ifg.up1 {
                    c.use_ifg || w_used
                } else if id == ifg.conv2 || id == ifg.up2 {
                    v_used
                } else {
                    c.ifg_in_use()
                }
            }
        }
    }

    /// Trainable flags per tensor: allowed by `policy` and used by the forward pass.
    pub fn freeze_mask(&self, policy: FreezePolicy) -> Vec<bool> {
        self.store
            .ids()
            .map(|id| {
                let allowed = match (policy, self.store.entry(id).group) {
                    (FreezePolicy::Full, _) => true,
                    (FreezePolicy::SspPeft, g) => g != ParamGroup::Backbone,
                    (FreezePolicy::HeadOnly, g) => g == ParamGroup::Head,
                };
                allowed && self.in_use(id)
            })
            .collect()
    }

    /// Trainable element count and total element count under `policy`.
    pub fn parameter_counts(&self, policy: FreezePolicy) -> (usize, usize) {
        let mask = self.freeze_mask(policy);
        let trainable = self
            .store
            .entries()
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(e, _)| e.tensor.numel())
            .sum();
        (trainable, self.store.total_elements())
    }

    /// Rearrange `video[T×C×H×W]` into raster-ordered flattened patches
    /// `[T·N × C·h·w]`, each patch laid out channel, row, column.
    pub fn patchify(&self, video: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let want = [c.frames, c.channels, c.height, c.width];
        if video.shape() != want {
            return Err(SspError::dim(format!(
                "video has shape {:?}, config expects {want:?}",
                video.shape()
            )));
        }
        let (gw, n, pd) = (c.width / c.patch_w, c.patches(), c.patch_dim());
        let mut out = vec![0.0; c.frames * n * pd];
        let src = video.data();
        for t in 0..c.frames {
            for p in 0..n {
                let (py, px) = (p / gw, p % gw);
                let base = (t * n + p) * pd;
                let mut k = 0;
                for ch in 0..c.channels {
                    for dy in 0..c.patch_h {
                        let y = py * c.patch_h + dy;
                        let row = ((t * c.channels + ch) * c.height + y) * c.width + px * c.patch_w;
                        out[base + k..base + k + c.patch_w].copy_from_slice(&src[row..row + c.patch_w]);
                        k += c.patch_w;
                    }
                }
            }
        }
        Tensor::new(vec![c.frames * n, pd], out)
    }

    /// Patch embedding `[T·N × d]`.
    pub fn embed(&self, tape: &mut Tape, bound: &Bound, video: &Tensor) -> Result<Var> {
        let patches = tape.constant(self.patchify(video)?);
        let e = tape.matmul(patches, bound[self.embed_w])?;
        tape.add(e, bound[self.embed_b])
    }

    /// Logits `[n_classes]` for one video; `capture` records per-layer traces.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, video: &Tensor, capture: bool) -> Result<Forward> {
        let (features, trace) = self.encode(tape, bound, video, capture)?;
        let n = self.config.n_classes;
        let logits = tape.matmul(features, bound[self.head_w])?;
        let logits = tape.reshape(logits, &[n])?;
        let logits = tape.add(logits, bound[self.head_b])?;
        Ok(Forward { logits, trace })
    }

    /// Normalized final cls state `[1 × d]`, the head's input.
    pub fn encode(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        video: &Tensor,
        capture: bool,
    ) -> Result<(Var, Vec<LayerTrace>)> {
        let c = &self.config;
        let tokens = self.embed(tape, bound, video)?;
        let mut seq = tape.concat_rows(&[bound[self.cls], tokens])?;
        let mut layout = SeqLayout::new(c.frames, c.patches());
        let mut trace = Vec::new();
        let mut p_t_last: Option<Var> = None;

        for (l, layer) in self.layers.iter().enumerate() {
            let spreads = c.use_ifs && l < c.n_ifs;
            let gathered = if c.use_ifg || (spreads && c.ifg_in_use()) {
                let x = frame_tokens(tape, seq, &layout)?;
                Some(self.ifg.forward(tape, bound, x, c.frames)?)
            } else {
                None
            };
            if c.use_ifg {
                let p_s = gathered.as_ref().map(|g| g.p_s).expect("computed when use_ifg");
                seq = overlay_intra(tape, seq, &layout, p_s)?;
            }
            let input_layout = layout;
            let (out, block) = layer.forward(tape, bound, seq, capture)?;
            seq = out;
            if capture {
                let value = |v: Option<Var>| v.map(|v| tape.value(v).clone());
                trace.push(LayerTrace {
                    layout: input_layout,
                    gates: block.expect("capture requested").forward,
                    p_s: value(gathered.map(|g| g.p_s).filter(|_| c.use_ifg)),
                    w: value(gathered.map(|g| g.gate.w)),
                    v: value(gathered.map(|g| g.v)),
                    p_t: value(p_t_last),
                });
            }
            if spreads {
                let ones = || Tensor::ones(&[c.frames, c.d_model]);
                let g = gathered.as_ref();
                let w = match g {
                    Some(g) if c.use_entropy_gate => g.gate.w,
                    _ => tape.constant(ones()),
                };
                let v = match g {
                    Some(g) if c.use_variance_gate => g.v,
                    _ => tape.constant(ones()),
                };
                let p_t = self.spreaders[l].forward(tape, bound, seq, &layout, w, v)?;
                (seq, layout) = insert_inter(tape, seq, &layout, p_t)?;
                p_t_last = Some(p_t);
            }
        }
        let cls = tape.gather_rows(seq, &[0])?;
        let normed = tape.rms_norm(cls, bound[self.norm_f], crate::ssm::NORM_EPS)?;
        Ok((normed, trace))
    }

    /// Head input for one clip, without a gradient tape.
    pub fn features(&self, video: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape);
        let (f, _) = self.encode(&mut tape, &bound, video, false)?;
        Ok(tape.value(f).clone())
    }

    /// Inference-only logits.
    pub fn predict(&self, video: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &bound, video, false)?;
        let logits = tape.value(out.logits).clone();
        if !logits.is_finite() {
            return Err(SspError::Numeric("non-finite logits".into()));
        }
        Ok(logits)
    }

    /// Captured per-layer traces for analysis exports.
    pub fn trace(&self, video: &Tensor) -> Result<Vec<LayerTrace>> {
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape);
        Ok(self.forward(&mut tape, &bound, video, true)?.trace)
    }

    /// SHA-256 of every backbone tensor, by name.
    pub fn backbone_hashes(&self) -> Vec<(String, String)> {
        self.store
            .ids()
            .filter(|&id| self.store.entry(id).group == ParamGroup::Backbone)
            .map(|id| (self.store.entry(id).name.clone(), self.store.tensor_hash(id)))
            .collect()
    }
}

#[cfg(test)]
pub(crate) mod tests;
