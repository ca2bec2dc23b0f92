//! Synthetic motion clips: a bright square on a dark background whose
//! temporal program is the class label.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SspError};
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 6] = ["right", "left", "down", "grow", "shrink", "blink"];

const BACKGROUND: f64 = 0.0;
const FOREGROUND: f64 = 1.0;
/// Largest perpendicular offset of the square's track, in pixels.
const JITTER: i64 = 2;
/// Separates the noise streams from the jitter streams of the same seed.
const NOISE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub noise_sigma: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_classes: 6,
            samples_per_class: 30,
            frames: 8,
            height: 16,
            width: 16,
            seed: 0,
            noise_sigma: 0.05,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.n_classes > CLASS_NAMES.len() {
            return Err(SspError::config(format!(
                "n_classes must lie in 1..={}, got {}",
                CLASS_NAMES.len(),
                self.n_classes
            )));
        }
        if self.samples_per_class == 0 || self.frames < 2 {
            return Err(SspError::config("need at least one sample per class and two frames"));
        }
        if self.height < 8 || self.width < 8 || self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(SspError::config(format!(
                "frame {}×{} must be at least 8×8 and divisible by 4",
                self.height, self.width
            )));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(SspError::config(format!(
                "noise_sigma must be ≥ 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Axis-aligned square: top-left corner and side, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Square {
    y: i64,
    x: i64,
    side: i64,
}

/// Linear interpolation from `a` to `b` over frames `0..frames`, rounded.
fn lerp(a: i64, b: i64, t: usize, frames: usize) -> i64 {
    let f = t as f64 / (frames - 1) as f64;
    (a as f64 + (b - a) as f64 * f).round() as i64
}

fn program(spec: &SynthSpec, class: usize, t: usize, jitter: (i64, i64)) -> Option<Square> {
    let (h, w, frames) = (spec.height as i64, spec.width as i64, spec.frames);
    let side = h / 4;
    let (cy, cx) = ((h - side) / 2 + jitter.0, (w - side) / 2 + jitter.1);
    let sq = match class {
        0 => Square {
            y: cy,
            x: lerp(0, w - side, t, frames),
            side,
        },
        1 => Square {
            y: cy,
            x: w - side - lerp(0, w - side, t, frames),
            side,
        },
        2 => Square {
            y: lerp(0, h - side, t, frames),
            x: cx,
            side,
        },
        3 | 4 => {
            let (lo, hi) = (2, h / 2);
            let s = if class == 3 {
                lerp(lo, hi, t, frames)
            } else {
                lerp(hi, lo, t, frames)
            };
            // keep the centre fixed while the side changes
            let (my, mx) = (h / 2 + jitter.0, w / 2 + jitter.1);
            Square {
                y: my - s / 2,
                x: mx - s / 2,
                side: s,
            }
        }
        _ => {
            if t % 2 == 1 {
                return None;
            }
            Square { y: cy, x: cx, side }
        }
    };
    Some(sq)
}

/// Per-sample track offsets; depend on `(seed, index)` only, not the class.
fn jitter(spec: &SynthSpec, index: usize) -> (i64, i64) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    (rng.gen_range(-JITTER..=JITTER), rng.gen_range(-JITTER..=JITTER))
}

/// One clip `[T × 1 × H × W]` of class `class`.
pub fn generate_sample(spec: &SynthSpec, class: usize, index: usize) -> Result<Tensor> {
    if class >= spec.n_classes {
        return Err(SspError::contract(format!(
            "class {class} out of range for {} classes",
            spec.n_classes
        )));
    }
    let (h, w) = (spec.height, spec.width);
    let jit = jitter(spec, index);
    let mut data = vec![BACKGROUND; spec.frames * h * w];
    for t in 0..spec.frames {
        if let Some(sq) = program(spec, class, t, jit) {
            let frame = &mut data[t * h * w..(t + 1) * h * w];
            for y in sq.y.max(0)..(sq.y + sq.side).min(h as i64) {
                for x in sq.x.max(0)..(sq.x + sq.side).min(w as i64) {
                    frame[y as usize * w + x as usize] = FOREGROUND;
                }
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ NOISE_SALT);
        rng.set_stream((index * spec.n_classes + class) as u64);
        let normal = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
        for v in &mut data {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    Tensor::new(vec![spec.frames, 1, h, w], data)
}

/// Reorder the frames of `video[T × …]` by `order`.
pub fn permute_frames(video: &Tensor, order: &[usize]) -> Tensor {
    let t = video.shape()[0];
    assert_eq!(order.len(), t);
    let per = video.numel() / t;
    let mut data = Vec::with_capacity(video.numel());
    for &f in order {
        data.extend_from_slice(&video.data()[f * per..(f + 1) * per]);
    }
    Tensor::new(video.shape().to_vec(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clean() -> SynthSpec {
        SynthSpec {
            noise_sigma: 0.0,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn blink_is_off_on_odd_frames() {
        let v = generate_sample(&clean(), 5, 3).unwrap();
        let frame = 16 * 16;
        assert!(v.data()[frame..2 * frame].iter().all(|&x| x == BACKGROUND));
        assert_eq!(v.data()[..frame].iter().filter(|&&x| x == FOREGROUND).count(), 16);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SynthSpec::default();
        for c in 0..6 {
            let a = generate_sample(&spec, c, 7).unwrap();
            let b = generate_sample(&spec, c, 7).unwrap();
            assert!(a.bitwise_eq(&b));
        }
    }

    #[test]
    fn right_and_left_are_mirror_images() {
        let spec = clean();
        for index in 0..10 {
            let r = generate_sample(&spec, 0, index).unwrap();
            let l = generate_sample(&spec, 1, index).unwrap();
            for t in 0..spec.frames {
                for y in 0..16 {
                    for x in 0..16 {
                        assert_eq!(r.at(&[t, 0, y, x]), l.at(&[t, 0, y, 15 - x]));
                    }
                }
            }
        }
    }

    #[test]
    fn classes_differ_and_stay_in_range() {
        let spec = SynthSpec::default();
        let clips: Vec<Tensor> = (0..6).map(|c| generate_sample(&spec, c, 1).unwrap()).collect();
        for (i, a) in clips.iter().enumerate() {
            assert!(a.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
            for b in &clips[i + 1..] {
                assert!(a.max_abs_diff(b) > 0.5);
            }
        }
        assert!(matches!(generate_sample(&spec, 6, 0), Err(SspError::Contract(_))));
    }

    #[test]
    fn grow_and_shrink_are_time_reversals() {
        let spec = clean();
        let g = generate_sample(&spec, 3, 4).unwrap();
        let s = generate_sample(&spec, 4, 4).unwrap();
        let rev: Vec<usize> = (0..spec.frames).rev().collect();
        assert!(permute_frames(&g, &rev).bitwise_eq(&s));
    }
}
