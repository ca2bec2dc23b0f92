use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{Dataset, Sample};
use crate::model::tests::tiny_config;
use crate::model::{FreezePolicy, VideoModel};
use crate::params::uniform;

fn samples(n: usize, seed: u64) -> Vec<Sample> {
    let c = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| Sample {
            video: uniform(&[c.frames, c.channels, c.height, c.width], 1.0, &mut rng),
            label: i % c.n_classes,
        })
        .collect()
}

fn dataset() -> Dataset {
    Dataset {
        train: samples(6, 1),
        val: samples(3, 2),
    }
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        warmup_epochs: 0,
        batch_size: 3,
        threads: 1,
        ..TrainConfig::default()
    }
}

#[test]
fn pure_cross_entropy_matches_tape() {
    let logits = Tensor::vector(vec![0.3, -1.2, 2.0]);
    let mut tape = crate::Tape::new();
    let v = tape.constant(logits.clone());
    let l = tape.cross_entropy(v, 1).unwrap();
    assert_eq!(cross_entropy(&logits, 1).unwrap(), tape.value(l).item());
    let direct = -((-1.2f64).exp() / (0.3f64.exp() + (-1.2f64).exp() + 2.0f64.exp())).ln();
    assert!((cross_entropy(&logits, 1).unwrap() - direct).abs() < 1e-14);
    assert!(cross_entropy(&logits, 3).is_err());
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let mut m = VideoModel::new(tiny_config(), 0, 0).unwrap();
    let before = m.store.clone();
    let c = TrainConfig {
        peak_lr: 0.0,
        min_lr: 0.0,
        ..cfg(3)
    };
    let r = train(&mut m, &dataset(), &c, None).unwrap();
    for (a, b) in before.entries().iter().zip(m.store.entries()) {
        assert!(a.tensor.bitwise_eq(&b.tensor), "{}", a.name);
    }
    let val = r.losses("val");
    assert!(val.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn frozen_tensors_keep_their_hash_and_all_trainable_update() {
    let mut m = VideoModel::new(tiny_config(), 0, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let r = train(&mut m, &dataset(), &cfg(2), Some(dir.path())).unwrap();
    assert!(r.frozen_unchanged());
    assert!(!r.frozen_before.is_empty());
    assert_eq!(r.updated_per_step, r.trainable_tensors);
    assert_eq!(r.trainable_tensors, trainable_ids(&m, FreezePolicy::SspPeft).len());
    assert_eq!(r.steps, 4);
    for f in [
        "metrics.csv",
        "freeze_report.csv",
        "checkpoints/init/manifest.txt",
        "checkpoints/final/manifest.txt",
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let report = std::fs::read_to_string(dir.path().join("freeze_report.csv")).unwrap();
    assert!(report.lines().skip(1).all(|l| l.ends_with(",unchanged")));
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 4);
}

#[test]
fn training_is_deterministic_across_thread_counts() {
    let run = |threads| {
        let mut m = VideoModel::new(tiny_config(), 0, 0).unwrap();
        let r = train(&mut m, &dataset(), &TrainConfig { threads, ..cfg(2) }, None).unwrap();
        (r.history, m.store)
    };
    let (h1, s1) = run(1);
    let (h2, s2) = run(2);
    assert_eq!(h1, h2);
    for (a, b) in s1.entries().iter().zip(s2.entries()) {
        assert!(a.tensor.bitwise_eq(&b.tensor));
    }
}

#[test]
fn overfits_a_single_sample() {
    let mut m = VideoModel::new(tiny_config(), 0, 0).unwrap();
    let one = Dataset {
        train: samples(1, 5),
        val: samples(1, 5),
    };
    let c = TrainConfig {
        epochs: 200,
        batch_size: 1,
        peak_lr: 1e-2,
        min_lr: 1e-2,
        adamw: AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
        policy: FreezePolicy::Full,
        ..cfg(200)
    };
    let r = train(&mut m, &one, &c, None).unwrap();
    let last = *r.losses("val").last().unwrap();
    assert!(last < 0.01, "loss {last}");
}

#[test]
fn empty_training_set_is_a_config_error() {
    let mut m = VideoModel::new(tiny_config(), 0, 0).unwrap();
    let r = train(&mut m, &Dataset::default(), &cfg(1), None);
    assert!(matches!(r, Err(crate::SspError::Config(_))));
}
