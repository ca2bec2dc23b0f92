use serde::{Deserialize, Serialize};

use crate::error::{Result, SspError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// AdamW moments for the trainable tensors of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    /// `(m, v)` per tensor; `None` for frozen tensors.
    moments: Vec<Option<(Tensor, Tensor)>>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore, trainable: &[bool]) -> Self {
        assert_eq!(trainable.len(), store.len());
        let moments = store
            .entries()
            .iter()
            .zip(trainable)
            .map(|(e, &t)| t.then(|| (Tensor::zeros(e.tensor.shape()), Tensor::zeros(e.tensor.shape()))))
            .collect();
        AdamW {
            config,
            moments,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn is_trainable(&self, i: usize) -> bool {
        self.moments[i].is_some()
    }

    /// One decoupled-decay update. `grads[i]` must be present exactly for
    /// the trainable tensors. Returns how many tensors were updated.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<usize> {
        if grads.len() != self.moments.len() {
            return Err(SspError::contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.moments.len()
            )));
        }
        for (i, (g, m)) in grads.iter().zip(&self.moments).enumerate() {
            let name = &store.entries()[i].name;
            match (g, m) {
                (Some(_), None) => return Err(SspError::contract(format!("frozen tensor {name} received a gradient"))),
                (None, Some(_)) => return Err(SspError::contract(format!("trainable tensor {name} has no gradient"))),
                _ => {}
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let mut updated = 0;
        for (i, (g, mom)) in grads.iter().zip(&mut self.moments).enumerate() {
            let (Some(g), Some((m, v))) = (g, mom) else {
                continue;
            };
            let p = store.entries()[i].tensor.data().to_vec();
            let mut next = Vec::with_capacity(p.len());
            for (k, &gk) in g.data().iter().enumerate() {
                let mk = &mut m.data_mut()[k];
                *mk = beta1 * *mk + (1.0 - beta1) * gk;
                let mhat = *mk / bc1;
                let vk = &mut v.data_mut()[k];
                *vk = beta2 * *vk + (1.0 - beta2) * gk * gk;
                let vhat = *vk / bc2;
                next.push(p[k] - lr * (mhat / (vhat.sqrt() + eps)) - lr * weight_decay * p[k]);
            }
            let shape = g.shape().to_vec();
            store.set(crate::params::ParamId(i), Tensor::new(shape, next)?)?;
            updated += 1;
        }
        Ok(updated)
    }
}

/// Scale `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;

    fn store(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", ParamGroup::Head, Tensor::vector(values.to_vec()));
        s.add("frozen", ParamGroup::Backbone, Tensor::scalar(3.0));
        s
    }

    fn cfg(wd: f64) -> AdamWConfig {
        AdamWConfig {
            weight_decay: wd,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut s = store(&[1.0, -2.0]);
        let mut opt = AdamW::new(cfg(0.0), &s, &[true, false]);
        opt.step(&mut s, &[Some(Tensor::zeros(&[2])), None], 0.1).unwrap();
        assert_eq!(s.entries()[0].tensor.data(), &[1.0, -2.0]);
    }

    #[test]
    fn zero_gradient_is_pure_decay() {
        let mut s = store(&[1.0, -2.0]);
        let mut opt = AdamW::new(cfg(0.01), &s, &[true, false]);
        opt.step(&mut s, &[Some(Tensor::zeros(&[2])), None], 0.1).unwrap();
        assert_eq!(s.entries()[0].tensor.data(), &[0.999, -1.998]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store(&[0.5]);
        let mut opt = AdamW::new(cfg(0.0), &s, &[true, false]);
        let lr = 0.01;
        opt.step(&mut s, &[Some(Tensor::vector(vec![1.0])), None], lr).unwrap();
        let expect = 0.5 - lr / (1.0 + 1e-8);
        assert!((s.entries()[0].tensor.data()[0] - expect).abs() < 1e-15);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn gradient_set_must_match_mask() {
        let mut s = store(&[0.5]);
        let mut opt = AdamW::new(cfg(0.0), &s, &[true, false]);
        let g = Some(Tensor::vector(vec![1.0]));
        assert!(matches!(
            opt.step(&mut s, &[g.clone(), Some(Tensor::scalar(1.0))], 0.1),
            Err(SspError::Contract(_))
        ));
        assert!(matches!(
            opt.step(&mut s, &[None, None], 0.1),
            Err(SspError::Contract(_))
        ));
        assert_eq!(opt.step_count(), 0);
        assert_eq!(opt.step(&mut s, &[g, None], 0.1).unwrap(), 1);
    }

    #[test]
    fn clipping_scales_to_max_norm() {
        let mut g = vec![Some(Tensor::vector(vec![3.0, 4.0])), None];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        let t = g[0].as_ref().unwrap();
        assert!((t.data()[0] - 0.6).abs() < 1e-15 && (t.data()[1] - 0.8).abs() < 1e-15);
        let mut small = vec![Some(Tensor::vector(vec![0.3]))];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].as_ref().unwrap().data(), &[0.3]);
    }
}
