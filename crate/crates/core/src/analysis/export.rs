//! CSV exports of recorded update gates and prompts.

use crate::error::{Result, SspError};
use crate::model::LayerTrace;
use crate::tensor::Tensor;

fn layer_of(trace: &[LayerTrace], layer: usize) -> Result<&LayerTrace> {
    if trace.is_empty() {
        return Err(SspError::contract(
            "no recorded trace; run the forward pass with capture enabled",
        ));
    }
    trace
        .get(layer)
        .ok_or_else(|| SspError::contract(format!("layer {layer} out of range for {}", trace.len())))
}

/// Frobenius norm of `B̄` over channels and states for every frame token,
/// divided by the frame's largest norm. Rows are `[T·N]` in frame order;
/// a frame whose gates are all zero maps to 1.
pub fn update_gate_norms(trace: &[LayerTrace], layer: usize) -> Result<Vec<f64>> {
    let lt = layer_of(trace, layer)?;
    let g = &lt.gates;
    let (d, n) = (g.a.shape()[0], g.a.shape()[1]);
    let layout = lt.layout;
    let mut out = Vec::with_capacity(layout.frames * layout.patches);
    for f in 0..layout.frames {
        let norms: Vec<f64> = layout
            .frame_span(f)
            .map(|row| {
                let mut s = 0.0;
                for ch in 0..d {
                    for st in 0..n {
                        s += g.bbar(row, ch, st).powi(2);
                    }
                }
                s.sqrt()
            })
            .collect();
        let max = norms.iter().cloned().fold(0.0, f64::max);
        out.extend(norms.iter().map(|&v| if max > 0.0 { v / max } else { 1.0 }));
    }
    Ok(out)
}

/// `frame,patch,row,col,gate` per frame token; `grid_w` patches per row.
pub fn gates_csv(trace: &[LayerTrace], layer: usize, grid_w: usize) -> Result<String> {
    let norms = update_gate_norms(trace, layer)?;
    let patches = trace[layer].layout.patches;
    let mut out = String::from("frame,patch,row,col,gate\n");
    for (k, v) in norms.iter().enumerate() {
        let (f, p) = (k / patches, k % patches);
        out.push_str(&format!("{f},{p},{},{},{v:e}\n", p / grid_w, p % grid_w));
    }
    Ok(out)
}

fn cell(t: Option<&Tensor>, frame: usize, ch: usize) -> String {
    t.map(|t| format!("{:e}", t.data()[frame * t.shape()[1] + ch]))
        .unwrap_or_default()
}

/// `frame,channel,w,v,mean_abs_p_s,abs_p_t` per frame and channel; fields
/// of modules that did not run at this layer are empty.
pub fn prompts_csv(trace: &[LayerTrace], layer: usize) -> Result<String> {
    let lt = layer_of(trace, layer)?;
    let frames = lt.layout.frames;
    let patches = lt.layout.patches;
    let d = lt.gates.a.shape()[0];
    let mean_ps = lt.p_s.as_ref().map(|p| {
        let d_model = p.shape()[1];
        let mut m = vec![0.0; frames * d_model];
        for (r, row) in p.data().chunks(d_model).enumerate() {
            for (c, v) in row.iter().enumerate() {
                m[(r / patches) * d_model + c] += v.abs() / patches as f64;
            }
        }
        Tensor::new(vec![frames, d_model], m).expect("frames × d")
    });
    let abs_pt = lt.p_t.as_ref().map(|p| p.map(f64::abs));
    let width = [&lt.w, &lt.v, &mean_ps, &abs_pt]
        .iter()
        .find_map(|t| t.as_ref().map(|t| t.shape()[1]))
        .unwrap_or(d);
    let mut out = String::from("frame,channel,w,v,mean_abs_p_s,abs_p_t\n");
    for f in 0..frames {
        for ch in 0..width {
            out.push_str(&format!(
                "{f},{ch},{},{},{},{}\n",
                cell(lt.w.as_ref(), f, ch),
                cell(lt.v.as_ref(), f, ch),
                cell(mean_ps.as_ref(), f, ch),
                cell(abs_pt.as_ref(), f, ch),
            ));
        }
    }
    Ok(out)
}
