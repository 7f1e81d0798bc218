//! Patch embedding, merging, the encoder pyramid, decoder blocks, and the
//! assembled model: shapes, hand-computed values, and connectivity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swinception::attention::WindowSpec;
use swinception::decoder::{ResidualBlock, UpsampleBlock};
use swinception::encoder::{Encoder, PatchEmbed, PatchMerge};
use swinception::nn::ParamStore;
use swinception::ops;
use swinception::tensor::no_grad;
use swinception::train::params::merge_params;
use swinception::{DecoderKind, Error, MergeKind, ModelConfig, SegmentationModel, Tensor};

fn random(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_tensor(seed: u64, shape: &[usize]) -> Tensor {
    Tensor::from_vec(random(seed, shape.iter().product()), shape).unwrap()
}

fn fill(t: &Tensor, v: f64) {
    t.set_data(&vec![v; t.numel()]).unwrap();
}

// ---------- patch embedding ----------

#[test]
fn patch_embed_halves_extent_into_48_channels() {
    let store = ParamStore::new(0);
    let pe = PatchEmbed::new(&store.root(), 1, 48);
    let y = no_grad(|| pe.forward(&random_tensor(1, &[1, 1, 32, 32, 32]))).unwrap();
    assert_eq!(y.shape(), &[1, 48, 16, 16, 16]);
}

#[test]
fn patch_embed_of_ones_with_unit_kernel_sums_eight_voxels() {
    let store = ParamStore::new(0);
    let pe = PatchEmbed::new(&store.root(), 1, 3);
    fill(&pe.proj.weight, 1.0);
    fill(pe.proj.bias.as_ref().unwrap(), 0.0);
    let y = pe.forward(&Tensor::ones(&[1, 1, 4, 4, 4])).unwrap();
    assert!(y.to_vec().iter().all(|&v| v == 8.0));
}

#[test]
fn patch_embed_is_the_strided_conv_primitive() {
    let store = ParamStore::new(2);
    let pe = PatchEmbed::new(&store.root(), 2, 5);
    let x = random_tensor(3, &[2, 2, 4, 6, 2]);
    let want = ops::conv3d(&x, &pe.proj.weight, pe.proj.bias.as_ref(), 2, 0, 1).unwrap();
    assert_eq!(pe.forward(&x).unwrap().to_vec(), want.to_vec());
}

#[test]
fn patch_embed_rejects_odd_extent() {
    let store = ParamStore::new(0);
    let pe = PatchEmbed::new(&store.root(), 1, 4);
    assert!(matches!(
        pe.forward(&Tensor::zeros(&[1, 1, 4, 5, 4])),
        Err(Error::Dimension { .. })
    ));
}

// ---------- patch merging ----------

#[test]
fn both_merge_kinds_halve_extent_and_double_channels() {
    for kind in [MergeKind::Linear, MergeKind::Conv] {
        let store = ParamStore::new(4);
        let m = PatchMerge::new(&store.root(), kind, 6);
        let y = m.forward(&random_tensor(5, &[1, 6, 8, 8, 8])).unwrap();
        assert_eq!(y.shape(), &[1, 12, 4, 4, 4], "{kind:?}");
    }
}

#[test]
fn linear_merge_of_constant_input_is_constant_per_channel() {
    let store = ParamStore::new(6);
    let m = PatchMerge::new(&store.root(), MergeKind::Linear, 3);
    let y = m
        .forward(&Tensor::full(&[1, 3, 4, 4, 4], 0.7))
        .unwrap()
        .to_vec();
    for chunk in y.chunks(8) {
        assert!(chunk.iter().all(|&v| (v - chunk[0]).abs() < 1e-12));
    }
}

#[test]
fn linear_merge_gathers_neighbourhoods_in_lexicographic_order() {
    let store = ParamStore::new(7);
    let m = PatchMerge::new(&store.root(), MergeKind::Linear, 2);
    let PatchMerge::Linear { norm, reduction } = &m else {
        unreachable!()
    };
    let (c, d) = (2, 4);
    let x = random_tensor(8, &[1, c, d, d, d]);
    let xv = x.to_vec();
    let mut tokens = Vec::new();
    for z in 0..2 {
        for y in 0..2 {
            for w in 0..2 {
                for dz in 0..2 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            for ch in 0..c {
                                tokens.push(
                                    xv[ch * 64 + ((2 * z + dz) * d + 2 * y + dy) * d + 2 * w + dx],
                                );
                            }
                        }
                    }
                }
            }
        }
    }
    let tokens = Tensor::from_vec(tokens, &[1, 8, 8 * c]).unwrap();
    let want = ops::tokens_to_volume(
        &reduction.forward(&norm.forward(&tokens).unwrap()).unwrap(),
        [2; 3],
    )
    .unwrap();
    assert_eq!(m.forward(&x).unwrap().to_vec(), want.to_vec());
}

#[test]
fn conv_merge_has_more_parameters_than_linear_merge() {
    for c in [1, 8, 48, 384] {
        // linear merge adds LN over 8C; conv merge adds LN over 2C
        assert_eq!(
            merge_params(MergeKind::Conv, c),
            27 * c * 2 * c + 2 * c + 2 * 2 * c
        );
        assert_eq!(
            merge_params(MergeKind::Linear, c),
            8 * c * 2 * c + 2 * c + 2 * 8 * c
        );
        assert!(merge_params(MergeKind::Conv, c) > merge_params(MergeKind::Linear, c));
    }
}

#[test]
fn merge_rejects_odd_extent() {
    let store = ParamStore::new(0);
    let m = PatchMerge::new(&store.root(), MergeKind::Conv, 2);
    assert!(matches!(
        m.forward(&Tensor::zeros(&[1, 2, 4, 4, 3])),
        Err(Error::Dimension { .. })
    ));
}

// ---------- encoder ----------

#[test]
fn default_encoder_pyramid_on_64_cubed() {
    let config = ModelConfig::default();
    let store = ParamStore::new(0);
    let enc = Encoder::new(&store.root(), &config).unwrap();
    store.set_batch_norm_identity_stats().unwrap();
    assert_eq!(enc.merges.len(), 3);
    let pyr = no_grad(|| enc.forward(&random_tensor(1, &[1, 1, 64, 64, 64]), false)).unwrap();
    assert_eq!(
        pyr.shapes(),
        vec![
            vec![1, 48, 32, 32, 32],
            vec![1, 48, 32, 32, 32],
            vec![1, 96, 16, 16, 16],
            vec![1, 192, 8, 8, 8],
            vec![1, 384, 4, 4, 4],
        ]
    );
}

#[test]
fn post_merge_taps_use_four_merges() {
    let config = ModelConfig {
        decoder_kind: DecoderKind::Swinunetr,
        ..ModelConfig::toy()
    };
    let store = ParamStore::new(0);
    let enc = Encoder::new(&store.root(), &config).unwrap();
    store.set_batch_norm_identity_stats().unwrap();
    assert_eq!(enc.merges.len(), 4);
    let pyr = no_grad(|| enc.forward(&random_tensor(1, &[1, 1, 32, 32, 32]), false)).unwrap();
    assert_eq!(
        pyr.shapes(),
        vec![
            vec![1, 8, 16, 16, 16],
            vec![1, 16, 8, 8, 8],
            vec![1, 32, 4, 4, 4],
            vec![1, 64, 2, 2, 2],
            vec![1, 128, 1, 1, 1],
        ]
    );
}

#[test]
fn stages_alternate_regular_and_shifted_windows() {
    let config = ModelConfig {
        depths: [2, 4, 2, 3],
        ..ModelConfig::toy()
    };
    let store = ParamStore::new(0);
    let enc = Encoder::new(&store.root(), &config).unwrap();
    for stage in &enc.stages {
        for (i, b) in stage.blocks.iter().enumerate() {
            let want = if i % 2 == 0 {
                WindowSpec {
                    window: 4,
                    shift: 0,
                }
            } else {
                WindowSpec {
                    window: 4,
                    shift: 2,
                }
            };
            assert_eq!(b.spec, want);
        }
    }
}

#[test]
fn heads_must_divide_stage_width() {
    let config = ModelConfig {
        heads: [3, 2, 4, 8],
        ..ModelConfig::toy()
    };
    assert!(matches!(
        SegmentationModel::new(config, 0),
        Err(Error::Config(_))
    ));
}

// ---------- decoder blocks ----------

#[test]
fn residual_block_with_zero_convs_is_prelu_of_input() {
    let store = ParamStore::new(9);
    let rb = ResidualBlock::new(&store.root(), 3, 3);
    assert!(rb.projection.is_none());
    fill(&rb.conv1.weight, 0.0);
    fill(&rb.conv2.weight, 0.0);
    let x = random_tensor(10, &[1, 3, 4, 4, 4]);
    let want = ops::prelu(&x, &rb.act.slope).unwrap();
    assert_eq!(rb.forward(&x).unwrap().to_vec(), want.to_vec());
}

#[test]
fn residual_block_projects_mismatched_channels() {
    let store = ParamStore::new(11);
    let rb = ResidualBlock::new(&store.root(), 3, 5);
    assert!(rb.projection.is_some());
    let y = rb.forward(&random_tensor(12, &[2, 3, 4, 2, 4])).unwrap();
    assert_eq!(y.shape(), &[2, 5, 4, 2, 4]);
}

#[test]
fn upsample_doubles_extent_and_composes_primitives() {
    let store = ParamStore::new(13);
    let up = UpsampleBlock::new(&store.root(), 6, 3);
    let x = random_tensor(14, &[1, 6, 4, 4, 4]);
    let y = up.forward(&x).unwrap();
    assert_eq!(y.shape(), &[1, 3, 8, 8, 8]);
    let t = ops::conv_transpose3d(&x, &up.tconv.weight, None, 2).unwrap();
    let n =
        ops::instance_norm(&t, &up.norm.affine.gamma, &up.norm.affine.beta, up.norm.eps).unwrap();
    assert_eq!(y.to_vec(), ops::prelu(&n, &up.act.slope).unwrap().to_vec());
}

// ---------- full model ----------

#[test]
fn toy_model_logits_on_64_cubed() {
    let model = SegmentationModel::new(ModelConfig::toy(), 0).unwrap();
    model.store.set_batch_norm_identity_stats().unwrap();
    let y = no_grad(|| model.forward(&random_tensor(1, &[1, 1, 64, 64, 64]), false)).unwrap();
    assert_eq!(y.shape(), &[1, 3, 64, 64, 64]);
}

#[test]
fn logits_are_cropped_back_to_unpadded_extent() {
    for kind in [DecoderKind::Swinception, DecoderKind::Swinunetr] {
        let config = ModelConfig {
            decoder_kind: kind,
            ..ModelConfig::toy()
        };
        let model = SegmentationModel::new(config, 0).unwrap();
        model.store.set_batch_norm_identity_stats().unwrap();
        let x = random_tensor(2, &[2, 1, 12, 20, 9]);
        let y = no_grad(|| model.forward(&x, false)).unwrap();
        assert_eq!(y.shape(), &[2, 3, 12, 20, 9], "{kind:?}");
        assert_eq!(model.predict(&x).unwrap().len(), 2 * 12 * 20 * 9);
    }
}

#[test]
fn model_rejects_wrong_input_channels() {
    let model = SegmentationModel::new(ModelConfig::toy(), 0).unwrap();
    assert!(matches!(
        model.forward(&Tensor::zeros(&[1, 2, 16, 16, 16]), true),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn gradient_reaches_every_parameter() {
    // the post-merge kind needs 64³ so its deepest tap is not a single voxel,
    // where instance norm is constant and blocks all gradient
    for (kind, edge) in [(DecoderKind::Swinception, 32), (DecoderKind::Swinunetr, 64)] {
        let config = ModelConfig {
            decoder_kind: kind,
            ..ModelConfig::toy()
        };
        let model = SegmentationModel::new(config, 1).unwrap();
        let x = random_tensor(3, &[1, 1, edge, edge, edge]);
        let y = model.forward(&x, true).unwrap();
        let w = random_tensor(4, y.shape());
        ops::sum(&ops::mul(&y, &w).unwrap())
            .unwrap()
            .backward()
            .unwrap();
        let dead: Vec<String> = model
            .store
            .trainable()
            .into_iter()
            .filter(|e| e.tensor.grad().is_none_or(|g| g.iter().all(|&v| v == 0.0)))
            .map(|e| e.name)
            .collect();
        assert!(dead.is_empty(), "{kind:?}: no gradient for {dead:?}");
    }
}

#[test]
fn forward_is_deterministic_for_fixed_weights() {
    let model = SegmentationModel::new(ModelConfig::toy(), 5).unwrap();
    model.store.set_batch_norm_identity_stats().unwrap();
    let x = random_tensor(6, &[1, 1, 16, 16, 16]);
    let a = no_grad(|| model.forward(&x, false)).unwrap().to_vec();
    let b = no_grad(|| model.forward(&x, false)).unwrap().to_vec();
    assert_eq!(a, b);
    let twin = SegmentationModel::new(ModelConfig::toy(), 5).unwrap();
    twin.store.set_batch_norm_identity_stats().unwrap();
    assert_eq!(no_grad(|| twin.forward(&x, false)).unwrap().to_vec(), a);
}
