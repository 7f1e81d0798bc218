//! Closed-form parameter counts against allocated tensors, and the
//! size relations between the ablation variants.

use proptest::prelude::*;
use swinception::blocks::FfKind;
use swinception::train::params::{ablation_table, allocated_breakdown, count_params};
use swinception::{DecoderKind, MergeKind, ModelConfig, SegmentationModel};

fn config_strategy() -> impl Strategy<Value = ModelConfig> {
    (
        (
            1usize..9,
            0usize..3,
            prop::array::uniform4(1usize..3),
            1usize..6,
        ),
        (
            0usize..3,
            prop::array::uniform4(0.0f64..2.0),
            0.5f64..2.0,
            0.05f64..0.6,
            0.5f64..6.0,
        ),
        (
            any::<bool>(),
            any::<bool>(),
            1usize..5,
            1usize..3,
            any::<bool>(),
            any::<bool>(),
        ),
    )
        .prop_map(
            |((c_half, head_pow, depths, window), (ff, mut ratios, b1, bottleneck, mlp), flags)| {
                let base_dim = 2 * c_half;
                // 2^head_pow divides base_dim only when it divides 2·c_half
                let h0 = if base_dim % (1 << head_pow) == 0 {
                    1 << head_pow
                } else {
                    1
                };
                ratios[0] = b1;
                let (linear, unetr, classes, in_ch, rel, qkv) = flags;
                ModelConfig {
                    in_channels: in_ch,
                    base_dim,
                    depths,
                    heads: [h0, 2 * h0, 4 * h0, 8 * h0],
                    window,
                    ff_kind: FfKind::ALL[ff],
                    branch_ratios: ratios,
                    bottleneck_ratio: bottleneck,
                    mlp_ratio: mlp,
                    merge_kind: if linear {
                        MergeKind::Linear
                    } else {
                        MergeKind::Conv
                    },
                    decoder_kind: if unetr {
                        DecoderKind::Swinunetr
                    } else {
                        DecoderKind::Swinception
                    },
                    num_classes: classes + 1,
                    use_rel_bias: rel,
                    qkv_bias: qkv,
                }
            },
        )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn analytic_count_equals_allocated_tally(config in config_strategy()) {
        let analytic = count_params(&config).unwrap();
        let model = SegmentationModel::new(config.clone(), 0).unwrap();
        prop_assert_eq!(allocated_breakdown(&model), analytic, "{:?}", config);
        prop_assert_eq!(model.num_parameters(), analytic.total());
    }
}

#[test]
fn toy_and_default_configs_count_exactly() {
    for config in [ModelConfig::toy(), ModelConfig::default()] {
        let model = SegmentationModel::new(config.clone(), 0).unwrap();
        assert_eq!(allocated_breakdown(&model), count_params(&config).unwrap());
    }
}

#[test]
fn default_model_is_within_five_percent_of_63_million() {
    let total = count_params(&ModelConfig::default()).unwrap().total() as f64;
    let rel = (total - 63e6).abs() / 63e6;
    assert!(
        rel < 0.05,
        "default total {total} is {:.2}% from 63M",
        100.0 * rel
    );
}

#[test]
fn breakdown_sums_to_total() {
    let b = count_params(&ModelConfig::default()).unwrap();
    assert_eq!(b.total(), b.encoder() + b.decoder + b.head);
    assert_eq!(b.encoder(), b.embed + b.stages + b.merges);
}

fn with(
    base: &ModelConfig,
    ff: FfKind,
    ratio: f64,
    merge: MergeKind,
    decoder: DecoderKind,
) -> ModelConfig {
    ModelConfig {
        ff_kind: ff,
        mlp_ratio: ratio,
        merge_kind: merge,
        decoder_kind: decoder,
        ..base.clone()
    }
}

fn widths(c0: usize) -> ModelConfig {
    let h = if c0.is_multiple_of(3) { 3 } else { 2 };
    ModelConfig {
        base_dim: c0,
        heads: [h, 2 * h, 4 * h, 8 * h],
        ..ModelConfig::default()
    }
}

#[test]
fn pre_merge_decoder_is_smaller_at_every_width() {
    for c0 in [8, 16, 48] {
        let base = widths(c0);
        for merge in [MergeKind::Linear, MergeKind::Conv] {
            for (ff, ratio) in [(FfKind::Mlp, 4.0), (FfKind::Inception, 4.0)] {
                let a =
                    count_params(&with(&base, ff, ratio, merge, DecoderKind::Swinception)).unwrap();
                let b =
                    count_params(&with(&base, ff, ratio, merge, DecoderKind::Swinunetr)).unwrap();
                assert!(
                    a.decoder < b.decoder,
                    "C0 {c0}: {} vs {}",
                    a.decoder,
                    b.decoder
                );
            }
        }
    }
}

#[test]
fn conv_merging_is_larger_at_every_width() {
    for c0 in [8, 16, 48] {
        let base = widths(c0);
        for decoder in [DecoderKind::Swinception, DecoderKind::Swinunetr] {
            let conv = count_params(&with(
                &base,
                FfKind::Inception,
                4.0,
                MergeKind::Conv,
                decoder,
            ))
            .unwrap();
            let lin = count_params(&with(
                &base,
                FfKind::Inception,
                4.0,
                MergeKind::Linear,
                decoder,
            ))
            .unwrap();
            assert!(conv.total() > lin.total(), "C0 {c0} {decoder:?}");
        }
    }
}

#[test]
fn ratio_seven_mlp_matches_inception_size_within_five_percent() {
    for c0 in [8, 16, 48] {
        let base = widths(c0);
        for decoder in [DecoderKind::Swinception, DecoderKind::Swinunetr] {
            for merge in [MergeKind::Linear, MergeKind::Conv] {
                let swin = count_params(&with(&base, FfKind::Mlp, 7.0, merge, decoder))
                    .unwrap()
                    .total() as f64;
                let inc = count_params(&with(&base, FfKind::Inception, 4.0, merge, decoder))
                    .unwrap()
                    .total() as f64;
                assert!((swin - inc).abs() / inc < 0.05, "C0 {c0}: {swin} vs {inc}");
            }
        }
    }
}

#[test]
fn ablation_table_covers_twelve_cells() {
    let rows = ablation_table(&ModelConfig::default()).unwrap();
    assert_eq!(rows.len(), 12);
    for row in &rows {
        let ff = if row.encoder == "swin" {
            FfKind::Mlp
        } else {
            FfKind::Inception
        };
        let decoder = row.decoder.parse().unwrap();
        let config = with(
            &ModelConfig::default(),
            ff,
            row.mlp_ratio,
            row.merge,
            decoder,
        );
        assert_eq!(row.params, count_params(&config).unwrap());
    }
}

#[test]
fn inception_reduction_differs_from_mlp_by_branch_norm_affines() {
    // widths (4C, 0, 0, 0) versus ratio-4 MLP: the only extra tensors are the
    // branch batch-norm affine pairs, 2·4C per block
    let base = ModelConfig::toy();
    let inc = ModelConfig {
        branch_ratios: [4.0, 0.0, 0.0, 0.0],
        ..base.clone()
    };
    let mlp = ModelConfig {
        ff_kind: FfKind::Mlp,
        mlp_ratio: 4.0,
        ..base.clone()
    };
    let a = count_params(&inc).unwrap().stages;
    let b = count_params(&mlp).unwrap().stages;
    let extra: usize = (0..4)
        .map(|s| base.depths[s] * 2 * 4 * base.stage_dim(s))
        .sum();
    assert_eq!(a, b + extra);
}
