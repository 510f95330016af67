use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::vit::{build_model, PatchEmbedConfig, StageKind, ViTConfig};

#[test]
fn cosine_examples() {
    assert_eq!(cosine_lr(0, 100, 1e-3, 1e-5).unwrap(), 1e-3);
    assert!((cosine_lr(100, 100, 1e-3, 1e-5).unwrap() - 1e-5).abs() < 1e-18);
    assert!((cosine_lr(50, 100, 1e-3, 1e-5).unwrap() - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
    assert!(cosine_lr(101, 100, 1e-3, 0.0).is_err());
    assert!(cosine_lr(0, 0, 1e-3, 0.0).is_err());
}

proptest! {
    #[test]
    fn cosine_is_non_increasing(total in 1usize..500, lr0 in 1e-6f64..1.0, frac in 0.0f64..1.0) {
        let lr_min = lr0 * frac;
        let mut prev = f64::INFINITY;
        for s in 0..=total {
            let lr = cosine_lr(s, total, lr0, lr_min).unwrap();
            prop_assert!(lr <= prev + 1e-18);
            prev = lr;
        }
    }
}

fn cfg_with(wd: f64) -> TrainConfig {
    TrainConfig {
        weight_decay: wd,
        ..Default::default()
    }
}

#[test]
fn adamw_examples() {
    let theta = Tensor::new(&[3], vec![0.5f32, -2.0, 1.25]).unwrap();
    let zero = Tensor::zeros(&[3]);
    let mut p = vec![theta.clone()];
    let mut st = OptimizerState::new(&p);
    adamw_step(&mut p, std::slice::from_ref(&zero), &mut st, 0.01, &cfg_with(0.0)).unwrap();
    assert!(p[0].bit_eq(&theta));
    assert_eq!(st.t, 1);

    let mut p = vec![theta.clone()];
    let mut st = OptimizerState::new(&p);
    adamw_step(&mut p, &[zero], &mut st, 0.01, &cfg_with(0.1)).unwrap();
    for (a, b) in p[0].data().iter().zip(theta.data()) {
        assert_eq!(*a, (*b as f64 * (1.0 - 0.001)) as f32);
    }

    let mut p = vec![Tensor::new(&[1], vec![1.0f32]).unwrap()];
    let mut st = OptimizerState::new(&p);
    adamw_step(
        &mut p,
        &[Tensor::new(&[1], vec![1.0]).unwrap()],
        &mut st,
        0.1,
        &cfg_with(0.0),
    )
    .unwrap();
    assert!((p[0].data()[0] - 0.9).abs() < 1e-7);

    let mut p = vec![Tensor::<f32>::zeros(&[2])];
    let mut st = OptimizerState::new(&p);
    assert!(matches!(
        adamw_step(&mut p, &[Tensor::zeros(&[3])], &mut st, 0.1, &cfg_with(0.0)),
        Err(Error::Contract(_))
    ));
}

/// Scalar Adam with the same f32 storage of parameters and moments.
fn scalar_adam(theta: &mut [f32], m: &mut [f32], v: &mut [f32], g: &[f32], t: i32, lr: f64) {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    for i in 0..theta.len() {
        let gi = g[i] as f64;
        let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
        let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
        let mhat = mi / (1.0 - b1.powi(t));
        let vhat = vi / (1.0 - b2.powi(t));
        theta[i] = (theta[i] as f64 - lr * mhat / (vhat.sqrt() + eps)) as f32;
        m[i] = mi as f32;
        v[i] = vi as f32;
    }
}

#[test]
fn adamw_without_decay_is_adam() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 16;
    let init: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut params = vec![Tensor::new(&[4, 4], init.clone()).unwrap()];
    let mut st = OptimizerState::new(&params);
    let (mut theta, mut m, mut v) = (init, vec![0.0f32; n], vec![0.0f32; n]);
    let cfg = cfg_with(0.0);
    let mut worst = 0.0f64;
    for t in 1..=100 {
        let g: Vec<f32> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let lr = rng.gen_range(1e-4..1e-2);
        adamw_step(
            &mut params,
            &[Tensor::new(&[4, 4], g.clone()).unwrap()],
            &mut st,
            lr,
            &cfg,
        )
        .unwrap();
        scalar_adam(&mut theta, &mut m, &mut v, &g, t, lr);
        for (a, b) in params[0].data().iter().zip(&theta) {
            worst = worst.max((*a as f64 - *b as f64).abs());
        }
    }
    assert!(worst < 1e-7, "{worst}");
}

fn toy_config() -> ViTConfig {
    ViTConfig {
        img_size: 16,
        in_channels: 1,
        embed_dim: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        n_classes: 2,
        embed: PatchEmbedConfig::linear(8),
    }
}

fn toy_set(n: usize) -> LabeledSet {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let label = i % 2;
        let level = if label == 0 { 0.2 } else { 0.8 };
        images.push(Tensor::from_fn(&[1, 16, 16], |_| level + rng.gen_range(-0.1..0.1)));
        labels.push(label);
    }
    LabeledSet {
        images,
        labels,
        n_classes: 2,
    }
}

#[test]
fn toy_loss_decreases_every_epoch() {
    let set = toy_set(8);
    let mut model = build_model(&toy_config(), 0).unwrap();
    let cfg = TrainConfig {
        lr0: 1e-3,
        epochs: 50,
        batch_size: 8,
        ..Default::default()
    };
    let mut st = OptimizerState::new(model.params());
    let mut seen = 0;
    let h = train(&mut model, &set, &cfg, &mut st, |_| seen += 1).unwrap();
    assert_eq!((h.len(), seen), (50, 50));
    for w in h.windows(2) {
        assert!(w[1].mean_loss < w[0].mean_loss, "{:?}", w);
    }
    assert_eq!(st.t, 50);
}

#[test]
fn training_is_deterministic_and_keeps_the_partial_batch() {
    let set = toy_set(10);
    let cfg = TrainConfig {
        lr0: 1e-3,
        epochs: 3,
        batch_size: 4,
        seed: 5,
        ..Default::default()
    };
    let run = || {
        let mut model = build_model(&toy_config(), 1).unwrap();
        let mut st = OptimizerState::new(model.params());
        let h = train(&mut model, &set, &cfg, &mut st, |_| {}).unwrap();
        (model, st, h)
    };
    let (a, sa, ha) = run();
    let (b, _, hb) = run();
    assert_eq!(ha, hb);
    for (x, y) in a.params().iter().zip(b.params()) {
        assert!(x.bit_eq(y));
    }
    assert_eq!(sa.t, 9);
}

#[test]
fn bad_inputs_are_rejected() {
    let set = toy_set(4);
    let mut model = build_model(&toy_config(), 1).unwrap();
    let mut st = OptimizerState::new(model.params());
    let cfg = TrainConfig {
        epochs: 0,
        ..Default::default()
    };
    assert!(matches!(
        train(&mut model, &set, &cfg, &mut st, |_| {}),
        Err(Error::Config(_))
    ));
    let empty = LabeledSet {
        images: vec![],
        labels: vec![],
        n_classes: 2,
    };
    assert!(matches!(
        train(&mut model, &empty, &TrainConfig::default(), &mut st, |_| {}),
        Err(Error::Argument(_))
    ));
}

#[test]
fn huge_learning_rate_diverges_with_a_numeric_error() {
    let set = toy_set(8);
    let mut model = build_model(&toy_config(), 1).unwrap();
    let mut st = OptimizerState::new(model.params());
    let cfg = TrainConfig {
        lr0: 1e6,
        epochs: 30,
        batch_size: 8,
        ..Default::default()
    };
    assert!(matches!(
        train(&mut model, &set, &cfg, &mut st, |_| {}),
        Err(Error::Numeric(_))
    ));
}

fn variants() -> Vec<ViTConfig> {
    let small = |embed| ViTConfig {
        embed_dim: 16,
        depth: 1,
        heads: 2,
        embed,
        ..ViTConfig::tiny(StageKind::Gmr)
    };
    vec![
        small(PatchEmbedConfig::linear(16)),
        small(PatchEmbedConfig::ablation("6-11", StageKind::Dense, 4, 16).unwrap()),
        small(PatchEmbedConfig::ablation("6-6-6", StageKind::Gmr, 4, 16).unwrap()),
    ]
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for (i, cfg) in variants().into_iter().enumerate() {
        let model = build_model(&cfg, i as u64).unwrap().jittered(0.1, 3);
        let mut st = OptimizerState::new(model.params());
        st.t = 17;
        st.m[0] = st.m[0].map(|_| f32::from_bits(0x3f80_0001));
        let path = dir.path().join(format!("m{i}.eqvt"));
        save_checkpoint(&model, Some(&st), &path).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.model.config(), model.config());
        assert_eq!(ck.model.names(), model.names());
        for (a, b) in ck.model.params().iter().zip(model.params()) {
            assert!(a.bit_eq(b));
        }
        let opt = ck.optimizer.unwrap();
        assert_eq!(opt.t, 17);
        assert!(opt.m[0].bit_eq(&st.m[0]));
        assert_eq!(
            encode_checkpoint(&ck.model, Some(&opt)).unwrap(),
            std::fs::read(&path).unwrap()
        );

        save_checkpoint(&model, None, &path).unwrap();
        assert!(load_checkpoint(&path).unwrap().optimizer.is_none());
    }
}

#[test]
fn checkpoint_header_layout() {
    let model = build_model(&variants()[0], 0).unwrap();
    let bytes = encode_checkpoint(&model, None).unwrap();
    assert_eq!(&bytes[..4], &[0x45, 0x51, 0x56, 0x54]);
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cfg: ViTConfig = serde_json::from_slice(&bytes[12..12 + len]).unwrap();
    assert_eq!(&cfg, model.config());
    let count = u32::from_le_bytes(bytes[12 + len..16 + len].try_into().unwrap());
    assert_eq!(count as usize, model.params().len());
    let name_len = u16::from_le_bytes(bytes[16 + len..18 + len].try_into().unwrap()) as usize;
    assert_eq!(&bytes[18 + len..18 + len + name_len], b"embed.0.weight");
    assert_eq!(bytes[18 + len + name_len], 0);
    assert_eq!(bytes[19 + len + name_len], 4);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let model = build_model(&variants()[2], 0).unwrap();
    let bytes = encode_checkpoint(&model, None).unwrap();
    for cut in [0, 3, 10, 40, bytes.len() / 2, bytes.len() - 1] {
        let r = decode_checkpoint(&bytes[..cut]);
        assert!(
            matches!(r, Err(Error::Corruption(_)) | Err(Error::Format(_))),
            "cut {cut}"
        );
    }
    assert!(matches!(
        decode_checkpoint(&bytes[..bytes.len() - 1]),
        Err(Error::Corruption(_))
    ));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
    let mut bumped = bytes.clone();
    bumped[4] = 2;
    assert!(matches!(decode_checkpoint(&bumped), Err(Error::UnsupportedVersion(2))));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(decode_checkpoint(&extra), Err(Error::Corruption(_))));

    // Swap in a descriptor whose shapes disagree with the stored tensors.
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut other = model.config().clone();
    other.mlp_ratio = 3;
    let json = serde_json::to_vec(&other).unwrap();
    let mut swapped = bytes[..8].to_vec();
    swapped.extend_from_slice(&(json.len() as u32).to_le_bytes());
    swapped.extend_from_slice(&json);
    swapped.extend_from_slice(&bytes[12 + len..]);
    assert!(matches!(decode_checkpoint(&swapped), Err(Error::Corruption(_))));
}

#[test]
fn history_csv_format() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("history.csv");
    let h = [
        EpochRecord {
            epoch: 0,
            mean_loss: 2.0,
            train_acc: 0.125,
        },
        EpochRecord {
            epoch: 1,
            mean_loss: 1.0 / 3.0,
            train_acc: 0.5,
        },
    ];
    write_history_csv(&h, &path).unwrap();
    assert_eq!(
        std::fs::read_to_string(&path).unwrap(),
        "epoch,mean_loss,train_acc\n0,2,0.125\n1,0.333333333,0.5\n"
    );
}
