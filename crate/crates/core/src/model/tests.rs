use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::prompt::Strategy;
use crate::tensor::{grad_check_stencil, Stencil};

/// T=2, N=4, d=8, D=4, L=2.
pub(crate) fn tiny_config() -> ModelConfig {
    ModelConfig {
        frames: 2,
        channels: 1,
        height: 4,
        width: 4,
        patch_h: 2,
        patch_w: 2,
        d_model: 8,
        d_state: 4,
        expand: 2,
        layers: 2,
        d_spatial: 4,
        d_temporal: 4,
        n_ifs: 1,
        n_classes: 3,
        ..ModelConfig::default()
    }
}

pub(crate) fn video(c: &ModelConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = uniform(&[c.frames, c.channels, c.height, c.width], 0.5, &mut rng);
    t.map(|x| x + 0.5)
}

/// Give every zero-initialized prompt tensor random values.
pub(crate) fn randomize_prompts(m: &mut VideoModel, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = vec![m.ifg.up1, m.ifg.up2];
    ids.extend(m.spreaders.iter().flat_map(|s| s.modules.iter().map(|p| p.up3)));
    for id in ids {
        let shape = m.store.get(id).shape().to_vec();
        m.store.set(id, uniform(&shape, 0.5, &mut rng)).unwrap();
    }
}

#[test]
fn patchify_is_raster_ordered() {
    let c = ModelConfig {
        frames: 1,
        height: 4,
        width: 4,
        patch_h: 2,
        patch_w: 2,
        d_model: 4,
        d_spatial: 2,
        d_temporal: 2,
        layers: 2,
        n_ifs: 1,
        ..ModelConfig::default()
    };
    let mut m = VideoModel::new(c.clone(), 0, 0).unwrap();
    let v = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64);
    let p = m.patchify(&v).unwrap();
    assert_eq!(p.shape(), &[4, 4]);
    assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
    assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
    assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);

    // identity projection reproduces the pixels; zero video gives the bias
    m.store.set(m.embed_w, Tensor::eye(4)).unwrap();
    m.store.set(m.embed_b, Tensor::zeros(&[4])).unwrap();
    let mut tape = Tape::new();
    let bound = m.store.bind_frozen(&mut tape);
    let e = m.embed(&mut tape, &bound, &v).unwrap();
    assert!(tape.value(e).bitwise_eq(&p));
    m.store
        .set(m.embed_b, Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]))
        .unwrap();
    let bound = m.store.bind_frozen(&mut tape);
    let e = m.embed(&mut tape, &bound, &Tensor::zeros(&[1, 1, 4, 4])).unwrap();
    for r in 0..4 {
        assert_eq!(tape.value(e).row(r), &[1.0, 2.0, 3.0, 4.0]);
    }
    assert!(m.patchify(&Tensor::zeros(&[1, 1, 4, 5])).is_err());
}

#[test]
fn toy_patch_count() {
    let c = ModelConfig {
        patch_h: 8,
        patch_w: 8,
        ..ModelConfig::default()
    };
    assert_eq!(c.patches(), 4);
}

fn switches_off(c: &ModelConfig) -> ModelConfig {
    ModelConfig {
        use_ifg: false,
        use_ifs: false,
        ..c.clone()
    }
}

#[test]
fn zero_prompts_without_insertion_match_backbone_bitwise() {
    let c = ModelConfig {
        use_ifs: false,
        ..ModelConfig::default()
    };
    let mut prompted = VideoModel::new(c.clone(), 3, 4).unwrap();
    prompted.store.set(prompted.ifg.up2, Tensor::zeros(&[16, 32])).unwrap();
    let mut plain = prompted.clone();
    plain.config = switches_off(&c);
    for s in 0..3 {
        let v = video(&c, s);
        let a = prompted.predict(&v).unwrap();
        let b = plain.predict(&v).unwrap();
        assert!(a.bitwise_eq(&b));
    }
}

#[test]
fn frame_order_and_patch_order_matter() {
    let c = tiny_config();
    let mut m = VideoModel::new(c.clone(), 5, 6).unwrap();
    randomize_prompts(&mut m, 7);
    let v = video(&c, 8);
    let base = m.predict(&v).unwrap();

    let frame = c.channels * c.height * c.width;
    let mut swapped = v.data()[frame..].to_vec();
    swapped.extend_from_slice(&v.data()[..frame]);
    let swapped = Tensor::new(v.shape().to_vec(), swapped).unwrap();
    assert!(!m.predict(&swapped).unwrap().bitwise_eq(&base));

    // swap the two top patches of frame 0
    let mut d = v.data().to_vec();
    for y in 0..2 {
        for x in 0..2 {
            d.swap(y * 4 + x, y * 4 + x + 2);
        }
    }
    let shuffled = Tensor::new(v.shape().to_vec(), d).unwrap();
    assert!(!m.predict(&shuffled).unwrap().bitwise_eq(&base));
}

#[test]
fn freeze_policies() {
    let m = VideoModel::new(ModelConfig::default(), 0, 1).unwrap();
    let peft = m.freeze_mask(FreezePolicy::SspPeft);
    for (e, &t) in m.store.entries().iter().zip(&peft) {
        assert_eq!(t, e.group != ParamGroup::Backbone, "{}", e.name);
    }
    assert!(m.freeze_mask(FreezePolicy::Full).iter().all(|&t| t));
    let head = m.freeze_mask(FreezePolicy::HeadOnly);
    let names: Vec<&str> = m
        .store
        .entries()
        .iter()
        .zip(&head)
        .filter(|(_, &t)| t)
        .map(|(e, _)| e.name.as_str())
        .collect();
    assert_eq!(names, ["head.w", "head.b"]);
    assert!(matches!("lora".parse::<FreezePolicy>(), Err(SspError::Config(_))));
}

#[test]
fn disabled_modules_are_not_trainable() {
    let base = ModelConfig::default();
    let neither = VideoModel::new(switches_off(&base), 0, 1).unwrap();
    assert_eq!(
        neither.freeze_mask(FreezePolicy::SspPeft),
        neither.freeze_mask(FreezePolicy::HeadOnly)
    );
    let ifs_only = VideoModel::new(
        ModelConfig {
            use_ifg: false,
            use_entropy_gate: false,
            ..base.clone()
        },
        0,
        1,
    )
    .unwrap();
    let mask = ifs_only.freeze_mask(FreezePolicy::SspPeft);
    assert!(!mask[ifs_only.ifg.up1.0] && !mask[ifs_only.ifg.alpha.0]);
    assert!(mask[ifs_only.ifg.up2.0] && mask[ifs_only.ifg.down1.0]);
}

#[test]
fn trainable_fraction_is_small() {
    for s in Strategy::ALL {
        let c = ModelConfig {
            strategy: s,
            ..ModelConfig::default()
        };
        let m = VideoModel::new(c, 0, 1).unwrap();
        let (t, total) = m.parameter_counts(FreezePolicy::SspPeft);
        assert!((t as f64) < 0.1 * total as f64, "{s}: {t}/{total}");
    }
}

#[test]
fn every_strategy_produces_finite_logits_and_traces() {
    for s in Strategy::ALL {
        let c = ModelConfig {
            strategy: s,
            ..tiny_config()
        };
        let mut m = VideoModel::new(c.clone(), 1, 2).unwrap();
        randomize_prompts(&mut m, 3);
        let v = video(&c, 4);
        assert!(m.predict(&v).unwrap().is_finite());
        let trace = m.trace(&v).unwrap();
        assert_eq!(trace.len(), c.layers);
        assert!(!trace[0].layout.prompts && trace[1].layout.prompts);
        assert!(trace[0].p_t.is_none() && trace[1].p_t.is_some());
        assert_eq!(trace[1].gates.len(), c.final_len());
    }
}

#[test]
fn backbone_seed_fixes_backbone_only() {
    let c = ModelConfig::default();
    let a = VideoModel::new(c.clone(), 9, 1).unwrap();
    let b = VideoModel::new(c, 9, 2).unwrap();
    assert_eq!(a.backbone_hashes(), b.backbone_hashes());
    assert_ne!(a.store.tensor_hash(a.head_w), b.store.tensor_hash(b.head_w));
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny_config();
    let mut m = VideoModel::new(c.clone(), 1, 2).unwrap();
    randomize_prompts(&mut m, 3);
    save_checkpoint(&m, dir.path()).unwrap();
    let back = load_checkpoint(dir.path()).unwrap();
    assert_eq!(back.config, m.config);
    for (a, b) in m.store.entries().iter().zip(back.store.entries()) {
        assert!(a.tensor.bitwise_eq(&b.tensor), "{}", a.name);
    }
    std::fs::remove_file(dir.path().join(MANIFEST)).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(SspError::Missing(_))));
}

#[test]
fn gradient_of_logits_matches_finite_differences() {
    let c = tiny_config();
    let mut m = VideoModel::new(c.clone(), 1, 2).unwrap();
    randomize_prompts(&mut m, 3);
    let v = video(&c, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let weights = uniform(&[c.n_classes], 1.0, &mut rng);
    let mask = m.freeze_mask(FreezePolicy::SspPeft);
    let ids: Vec<ParamId> = m.store.ids().filter(|id| mask[id.0]).collect();
    let inputs: Vec<Tensor> = ids.iter().map(|&id| m.store.get(id).clone()).collect();
    let report = grad_check_stencil(
        |tape, vars| {
            let mut all = m.store.bind_frozen(tape).vars().to_vec();
            for (&id, &v) in ids.iter().zip(vars) {
                all[id.0] = v;
            }
            let bound = Bound::from_vars(all);
            let out = m.forward(tape, &bound, &v, false)?;
            let wv = tape.constant(weights.clone());
            let p = tape.mul(out.logits, wv)?;
            Ok(tape.sum(p))
        },
        &inputs,
        1e-3,
        Stencil::FivePoint,
    )
    .unwrap();
    let name = &m.store.entry(ids[report.input]).name;
    assert!(report.max_rel_error < 1e-4, "{name}: {report:?}");
}
