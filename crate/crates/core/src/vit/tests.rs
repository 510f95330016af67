use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::rot90_batch;

fn random_images(seed: u64, n: usize, c: usize, s: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, c, s, s], |_| rng.gen_range(0.0..1.0))
}

fn small(kind: StageKind) -> ViTConfig {
    ViTConfig {
        embed_dim: 16,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        n_classes: 3,
        embed: PatchEmbedConfig::ablation("6-6-6", kind, 4, 16).unwrap(),
        ..ViTConfig::tiny(kind)
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn build_is_deterministic_and_finite() {
    let cfg = ViTConfig::tiny(StageKind::Gmr);
    let a = build_model(&cfg, 7).unwrap();
    let b = build_model(&cfg, 7).unwrap();
    assert!(!a.params().is_empty());
    for (x, y) in a.params().iter().zip(b.params()) {
        assert!(x.bit_eq(y) && x.all_finite());
    }
    let c = build_model(&cfg, 8).unwrap();
    assert!(!a.param("head.weight").unwrap().bit_eq(c.param("head.weight").unwrap()));
    let mut names = a.names().to_vec();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), a.names().len());
    assert!(a.param("embed.0.ring_weights").is_some() && a.param("embed.1.ring_weights").is_some());
    assert!(a.param("pos_embed").unwrap().data().iter().all(|&v| v == 0.0));
    assert!(a
        .param("embed.0.ring_weights")
        .unwrap()
        .data()
        .iter()
        .all(|v| v.abs() <= 0.04));
}

#[test]
fn linear_base_embedding_count() {
    let r = count_params(&ViTConfig::base_linear()).unwrap();
    assert_eq!(r.per_component[0], ("embed.0".to_string(), 16 * 16 * 3 * 768 + 768));
    assert_eq!(r.embedding_total, 590_592);
    assert_eq!(r.embedding_bytes, 590_592 * 4);
    assert_eq!(r.total, r.per_component.iter().map(|(_, n)| n).sum::<usize>());
}

#[test]
fn stage_counts_follow_the_formulas() {
    let m = 192;
    let gmr = count_params(&ViTConfig::base(StageKind::Gmr)).unwrap();
    let dense = count_params(&ViTConfig::base(StageKind::Dense)).unwrap();
    assert_eq!(gmr.per_component[1].1, m * 768 * 6 + 768);
    assert_eq!(dense.per_component[1].1, m * 768 * 121 + 768);
    assert_eq!(gmr.per_component[0].1, 3 * m * 3 + m);
    let ratio = dense.per_component[1].1 as f64 / gmr.per_component[1].1 as f64;
    assert!((ratio - 20.0).abs() < 0.2, "{ratio}");
    assert_eq!(gmr.total - gmr.embedding_total, dense.total - dense.embedding_total);
}

#[test]
fn geometry_at_224() {
    assert_eq!(ViTConfig::base(StageKind::Gmr).stage_sides().unwrap(), vec![56, 14]);
    assert_eq!(ViTConfig::base_linear().n_tokens().unwrap(), 196);
    let three = ViTConfig {
        embed: PatchEmbedConfig::stack(StageKind::Gmr, &[(6, 4, 1), (6, 2, 2), (6, 2, 2)], 192, 768),
        ..ViTConfig::base(StageKind::Gmr)
    };
    assert_eq!(three.stage_sides().unwrap(), vec![56, 28, 14]);
}

#[test]
fn tiny_presets_tile_exactly_to_a_four_by_four_grid() {
    for name in ABLATION_PRESETS {
        let cfg = ViTConfig {
            embed: PatchEmbedConfig::ablation(name, StageKind::Gmr, 32, 128).unwrap(),
            ..ViTConfig::tiny(StageKind::Gmr)
        };
        cfg.validate().unwrap();
        assert_eq!(cfg.grid().unwrap(), 4, "{name}");
        let mut side = cfg.img_size;
        for st in cfg.conv_stages() {
            assert_eq!((side + 2 * st.pad - st.k) % st.stride, 0, "{name} stage k={}", st.k);
            side = (side + 2 * st.pad - st.k) / st.stride + 1;
        }
    }
    assert!(PatchEmbedConfig::ablation("3-3", StageKind::Gmr, 8, 8).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = ViTConfig::tiny(StageKind::Gmr);
    cfg.heads = 3;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut cfg = ViTConfig::tiny(StageKind::Gmr);
    cfg.embed.stages[0].kind = StageKind::Dense;
    assert!(cfg.validate().is_err());
    let mut cfg = ViTConfig::tiny_linear();
    cfg.embed.patch = 15;
    assert!(cfg.validate().is_err());
    let mut cfg = ViTConfig::tiny(StageKind::Dense);
    cfg.img_size = 8;
    assert!(matches!(build_model(&cfg, 0), Err(Error::Config(_))));
    let mut cfg = ViTConfig::tiny(StageKind::Dense);
    cfg.embed.stages[1].c_out = 64;
    assert!(cfg.validate().is_err());
}

#[test]
fn forward_shapes_and_zero_head() {
    let cfg = small(StageKind::Gmr);
    let mut model = build_model(&cfg, 1).unwrap();
    let x = random_images(2, 3, 3, 64);
    let logits = model.forward(&x).unwrap();
    assert_eq!(logits.shape(), &[3, 3]);
    assert!(logits.all_finite());
    assert!(logits.bit_eq(&model.forward(&x).unwrap()));
    assert_eq!(model.embed_tokens(&x).unwrap().shape(), &[3, 16, 16]);
    model.set_param("head.weight", Tensor::zeros(&[16, 3])).unwrap();
    assert!(model.forward(&x).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(matches!(
        model.forward(&random_images(2, 1, 3, 32)),
        Err(Error::Dimension(_))
    ));
    assert!(model.set_param("head.weight", Tensor::zeros(&[3, 16])).is_err());
}

#[test]
fn tiny_forward_is_bit_reproducible() {
    let cfg = ViTConfig::tiny(StageKind::Gmr);
    let x = random_images(3, 2, 3, 64);
    let a = build_model(&cfg, 5).unwrap().forward(&x).unwrap();
    let b = build_model(&cfg, 5).unwrap().forward(&x).unwrap();
    assert!(a.bit_eq(&b) && a.all_finite());
}

#[test]
fn token_permutation_examples() {
    for t in 0..4 {
        assert_eq!(rot90_token_permutation(1, t).unwrap(), vec![0]);
    }
    assert_eq!(rot90_token_permutation(3, 0).unwrap(), (0..9).collect::<Vec<_>>());
    // (0,0)->(1,0), (0,1)->(0,0), (1,0)->(1,1), (1,1)->(0,1)
    let p = rot90_token_permutation(2, 1).unwrap();
    assert_eq!(p, vec![2, 0, 3, 1]);
    let mut i = 0;
    for _ in 0..4 {
        i = p[i];
    }
    assert_eq!(i, 0);
    assert!(rot90_token_permutation(2, 4).is_err());
}

#[test]
fn token_permutation_matches_image_rotation() {
    let g = 5;
    let grid = Tensor::from_fn(&[1, 1, g, g], |i| i as f32);
    for t in 0..4 {
        let rot = rot90_batch(&grid, t).unwrap();
        let p = rot90_token_permutation(g, t).unwrap();
        for i in 0..g * g {
            assert_eq!(rot.data()[p[i]], grid.data()[i]);
        }
    }
}

proptest! {
    #[test]
    fn token_permutations_form_the_cyclic_group(g in 1usize..=32, a in 0usize..4, b in 0usize..4) {
        let pa = rot90_token_permutation(g, a).unwrap();
        let pb = rot90_token_permutation(g, b).unwrap();
        let pab = rot90_token_permutation(g, (a + b) % 4).unwrap();
        for i in 0..g * g {
            prop_assert_eq!(pb[pa[i]], pab[i]);
        }
        let p1 = rot90_token_permutation(g, 1).unwrap();
        for i in 0..g * g {
            prop_assert_eq!(p1[p1[p1[p1[i]]]], i);
        }
    }
}

#[test]
fn exact_gmr_stack_embedding_is_equivariant() {
    let model = build_model(&small(StageKind::Gmr), 4).unwrap();
    let x = random_images(9, 4, 3, 64);
    let base = model.embed_tokens(&x).unwrap();
    let d = 16;
    for t in 1..4 {
        let rot = model.embed_tokens(&rot90_batch(&x, t).unwrap()).unwrap();
        let p = rot90_token_permutation(4, t).unwrap();
        for n in 0..4 {
            for i in 0..16 {
                let a = &base.data()[(n * 16 + i) * d..][..d];
                let b = &rot.data()[(n * 16 + p[i]) * d..][..d];
                for (u, v) in a.iter().zip(b) {
                    assert!((u - v).abs() < 1e-4, "t={t} n={n} token {i}");
                }
            }
        }
    }
}

#[test]
fn linear_embedding_is_less_equivariant_than_gmr() {
    let x = random_images(10, 20, 3, 64);
    let median_cos = |model: &ViTModel| {
        let base = model.embed_tokens(&x).unwrap();
        let rot = model.embed_tokens(&rot90_batch(&x, 1).unwrap()).unwrap();
        let p = rot90_token_permutation(4, 1).unwrap();
        let d = model.config().embed_dim;
        let mut c: Vec<f64> = (0..20 * 16)
            .map(|j| {
                let (n, i) = (j / 16, j % 16);
                cosine(
                    &base.data()[(n * 16 + i) * d..][..d],
                    &rot.data()[(n * 16 + p[i]) * d..][..d],
                )
            })
            .collect();
        c.sort_by(f64::total_cmp);
        c[c.len() / 2]
    };
    let gmr = median_cos(&build_model(&ViTConfig::tiny(StageKind::Gmr), 0).unwrap());
    let linear = median_cos(&build_model(&ViTConfig::tiny_linear(), 0).unwrap());
    assert!(linear < gmr, "{linear} vs {gmr}");
    assert!(gmr > 1.0 - 1e-5);
}

#[test]
fn whole_model_gradient_check() {
    let cfg = small(StageKind::Gmr);
    let model = build_model(&cfg, 11).unwrap().jittered(INIT_STD, 1);
    let x = random_images(12, 2, 3, 64);
    let opts = GradCheckOptions {
        eps: 1e-4,
        max_per_param: Some(6),
        ..Default::default()
    };
    let reports = model_grad_check(&model, &x, &[0, 2], &opts).unwrap();
    assert_eq!(reports.len(), model.params().len());
    for r in &reports {
        assert!(r.passed, "{r:?}");
    }
}
