//! Scan-sequence layout: where the cls token, frame tokens and inter-frame
//! prompt slots sit.
//!
//! Without prompts the sequence is `[cls, f1 tokens, …, fT tokens]`; with
//! prompts each frame's tokens are followed by its slot:
//! `[cls, f1 tokens, p1, …, fT tokens, pT]`.

use std::ops::Range;

use crate::error::{Result, SspError};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Position {
    Cls,
    Patch { frame: usize, patch: usize },
    Prompt { frame: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    pub frames: usize,
    pub patches: usize,
    pub prompts: bool,
}

impl SeqLayout {
    pub fn new(frames: usize, patches: usize) -> Self {
        SeqLayout {
            frames,
            patches,
            prompts: false,
        }
    }

    fn stride(&self) -> usize {
        self.patches + usize::from(self.prompts)
    }

    pub fn len(&self) -> usize {
        1 + self.frames * self.stride()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Rows of frame `i`'s tokens.
    pub fn frame_span(&self, frame: usize) -> Range<usize> {
        let start = 1 + frame * self.stride();
        start..start + self.patches
    }

    pub fn patch_index(&self, frame: usize, patch: usize) -> usize {
        1 + frame * self.stride() + patch
    }

    /// Row of frame `i`'s prompt slot, if the layout has slots.
    pub fn prompt_index(&self, frame: usize) -> Option<usize> {
        self.prompts.then(|| (frame + 1) * self.stride())
    }

    pub fn position(&self, row: usize) -> Position {
        if row == 0 {
            return Position::Cls;
        }
        let (frame, offset) = ((row - 1) / self.stride(), (row - 1) % self.stride());
        if offset < self.patches {
            Position::Patch { frame, patch: offset }
        } else {
            Position::Prompt { frame }
        }
    }

    pub fn positions(&self) -> Vec<Position> {
        (0..self.len()).map(|r| self.position(r)).collect()
    }

    /// Every frame-token row, frame-major.
    pub fn frame_rows(&self) -> Vec<usize> {
        (0..self.frames).flat_map(|f| self.frame_span(f)).collect()
    }

    pub fn prompt_rows(&self) -> Vec<usize> {
        (0..self.frames).filter_map(|f| self.prompt_index(f)).collect()
    }

    pub fn with_prompts(self) -> Self {
        SeqLayout { prompts: true, ..self }
    }

    pub fn without_prompts(self) -> Self {
        SeqLayout { prompts: false, ..self }
    }

    fn check(&self, tape: &Tape, seq: Var) -> Result<usize> {
        let s = tape.shape(seq);
        if s.len() != 2 || s[0] != self.len() {
            return Err(SspError::dim(format!(
                "sequence of shape {s:?} does not match layout length {}",
                self.len()
            )));
        }
        Ok(s[1])
    }
}

/// Frame tokens `[T·N × d]` of a sequence, frame-major.
pub fn frame_tokens(tape: &mut Tape, seq: Var, layout: &SeqLayout) -> Result<Var> {
    layout.check(tape, seq)?;
    tape.gather_rows(seq, &layout.frame_rows())
}

/// Add `p_s[T·N × d]` to the frame tokens; cls and prompt slots are untouched.
pub fn overlay_intra(tape: &mut Tape, seq: Var, layout: &SeqLayout, p_s: Var) -> Result<Var> {
    let d = layout.check(tape, seq)?;
    let want = [layout.frames * layout.patches, d];
    if tape.shape(p_s) != want {
        return Err(SspError::dim(format!(
            "intra-frame prompts have shape {:?}, frame tokens {want:?}",
            tape.shape(p_s)
        )));
    }
    // Scatter p_s into sequence rows; non-frame rows read an appended zero row.
    let zero_row = want[0];
    let rows: Vec<usize> = layout
        .positions()
        .into_iter()
        .map(|p| match p {
            Position::Patch { frame, patch } => frame * layout.patches + patch,
            _ => zero_row,
        })
        .collect();
    let zero = tape.constant(Tensor::zeros(&[1, d]));
    let padded = tape.concat_rows(&[p_s, zero])?;
    let spread = tape.gather_rows(padded, &rows)?;
    tape.add(seq, spread)
}

/// Insert `p_t[T × d]` after each frame, or overwrite the slots if the
/// layout already has them. Returns the new sequence and layout.
pub fn insert_inter(tape: &mut Tape, seq: Var, layout: &SeqLayout, p_t: Var) -> Result<(Var, SeqLayout)> {
    let d = layout.check(tape, seq)?;
    if tape.shape(p_t) != [layout.frames, d] {
        return Err(SspError::contract(format!(
            "{} inter-frame prompts of shape {:?} for {} frames of width {d}",
            tape.shape(p_t).first().copied().unwrap_or(0),
            tape.shape(p_t),
            layout.frames
        )));
    }
    let out = layout.with_prompts();
    // Rows of concat([seq, p_t]): seq rows keep their index, prompt i is len+i.
    let base = layout.len();
    let rows: Vec<usize> = out
        .positions()
        .into_iter()
        .map(|p| match p {
            Position::Cls => 0,
            Position::Patch { frame, patch } => layout.patch_index(frame, patch),
            Position::Prompt { frame } => base + frame,
        })
        .collect();
    let joined = tape.concat_rows(&[seq, p_t])?;
    Ok((tape.gather_rows(joined, &rows)?, out))
}

/// Drop the prompt slots, restoring the promptless layout.
pub fn remove_inter(tape: &mut Tape, seq: Var, layout: &SeqLayout) -> Result<(Var, SeqLayout)> {
    layout.check(tape, seq)?;
    let out = layout.without_prompts();
    let rows: Vec<usize> = (0..layout.len())
        .filter(|&r| !matches!(layout.position(r), Position::Prompt { .. }))
        .collect();
    Ok((tape.gather_rows(seq, &rows)?, out))
}
