//! Architecture-level checks: manual forward composition, the zero-block
//! skip identity, the FLOP model against the independent recount, width
//! edits and document round trips.

mod common;

use common::*;
use proptest::prelude::*;
use resbuilder::arch::{
    apply_widths, forward_infer, infer_logits, Architecture, LayerId, LayerParams, ParamStore,
    ResBlock, BN_EPS,
};
use resbuilder::cost::{flops, scale_widths};
use resbuilder::rng::rng_from;
use resbuilder::serialize::{arch_from_json, arch_to_json};
use resbuilder::tensor::Tensor;

fn with_blocks(stage0: &[usize], stage1: &[usize]) -> (Architecture, ParamStore) {
    let mut arch = Architecture::new_minimal((12, 12, 1), 4).unwrap();
    for (stage, widths) in [(0usize, stage0), (1, stage1)] {
        for &w in widths {
            let id = arch.fresh_block_id();
            let input = arch.width_at_slot(stage, arch.stages[stage].blocks.len());
            arch.stages[stage].blocks.push(ResBlock {
                id,
                c_mid: w,
                c_out: w,
                projection: input != w,
                birth_step: 0,
            });
        }
    }
    let params = ParamStore::init(&arch, &mut rng_from(31, "init", 0));
    arch.validate().unwrap();
    (arch, params)
}

/// Manual re-implementation of the forward pass in inference mode, built
/// entirely from the naive oracles and plain loops.
fn manual_forward(arch: &Architecture, params: &ParamStore, batch: &Tensor) -> Tensor {
    let bn_apply = |x: &Tensor, bn: &resbuilder::arch::BnParams| -> Tensor {
        let (_, _, _, c) = x.dims4();
        let data: Vec<f64> = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = i % c;
                (v - bn.running_mean[ch]) / (bn.running_var[ch] + BN_EPS).sqrt() * bn.gamma[ch]
                    + bn.beta[ch]
            })
            .collect();
        Tensor::from_vec(x.shape(), data).unwrap()
    };
    let relu = |x: &Tensor| x.map(|v| v.max(0.0));

    let (stem_kernel, stem_bn) = params.conv(LayerId::Stem).unwrap();
    let mut x = relu(&bn_apply(&naive_conv2d_same(batch, stem_kernel), stem_bn));
    for stage in &arch.stages {
        for block in &stage.blocks {
            let (k1, bn1) = params.conv(LayerId::Conv1(block.id)).unwrap();
            let (k2, bn2) = params.conv(LayerId::Conv2(block.id)).unwrap();
            let h1 = relu(&bn_apply(&naive_conv2d_same(&x, k1), bn1));
            let h2 = relu(&bn_apply(&naive_conv2d_same(&h1, k2), bn2));
            let skip = if block.projection {
                naive_conv2d_same(&x, params.kernel(LayerId::Proj(block.id)).unwrap())
            } else {
                x.clone()
            };
            let data: Vec<f64> =
                skip.data().iter().zip(h2.data()).map(|(a, b)| a + b).collect();
            x = Tensor::from_vec(h2.shape(), data).unwrap();
        }
        if stage.pool {
            x = naive_maxpool2(&x);
        }
    }
    let (n, h, w, c) = x.dims4();
    let flat = x.reshape(&[n, h * w * c]).unwrap();
    let (weight, bias) = params.dense().unwrap();
    naive_dense(&flat, weight, bias)
}

#[test]
fn forward_matches_manual_composition() {
    let (arch, params) = with_blocks(&[16, 12], &[12]);
    let batch = Tensor::rand_uniform(&[3, 12, 12, 1], -1.0, 1.0, &mut rng_from(32, "x", 0));
    let got = infer_logits(&arch, &params, &batch).unwrap();
    let expected = manual_forward(&arch, &params, &batch);
    assert!(got.max_abs_diff(&expected) < 1e-9);
}

#[test]
fn zero_blocks_equal_block_free_architecture() {
    let (arch, mut params) = with_blocks(&[16], &[16]);
    for (_, _, b) in arch.iter_blocks() {
        for id in [LayerId::Conv1(b.id), LayerId::Conv2(b.id)] {
            if let Some(LayerParams::Conv { kernel, .. }) = params.get_mut(id) {
                kernel.data_mut().fill(0.0);
            }
        }
    }
    let bare = Architecture::new_minimal((12, 12, 1), 4).unwrap();
    let mut bare_params = ParamStore::new();
    bare_params.insert(LayerId::Stem, params.get(LayerId::Stem).unwrap().clone());
    bare_params.insert(LayerId::Head, params.get(LayerId::Head).unwrap().clone());
    let batch = Tensor::rand_uniform(&[4, 12, 12, 1], -1.0, 1.0, &mut rng_from(33, "x", 0));
    let with = infer_logits(&arch, &params, &batch).unwrap();
    let without = infer_logits(&bare, &bare_params, &batch).unwrap();
    assert_eq!(with.data(), without.data());
}

#[test]
fn flops_equal_recount_on_generated_layouts() {
    let arch = Architecture::resnet18((32, 32, 3), 10).unwrap();
    assert_eq!(flops(&arch), flops_recount(&arch));
    let minimal = Architecture::new_minimal((28, 28, 1), 10).unwrap();
    assert_eq!(flops(&minimal), flops_recount(&minimal));
    let (mixed, _) = with_blocks(&[16, 8], &[24]);
    assert_eq!(flops(&mixed), flops_recount(&mixed));
}

#[test]
fn doubling_widths_quadruples_block_cost() {
    let (arch, mut params) = with_blocks(&[16], &[16]);
    let stem_dense: u64 = {
        let bare = Architecture::new_minimal((12, 12, 1), 4).unwrap();
        flops(&bare)
    };
    let block_cost = flops(&arch) - stem_dense;
    let mut doubled_arch = arch.clone();
    let widths = scale_widths(&arch, 2.0);
    apply_widths(&mut doubled_arch, &mut params, &widths).unwrap();
    // Doubled widths double both c_in and c_out of interior convs, but the
    // stage-entry convs keep their input width; recount settles it exactly.
    assert_eq!(flops(&doubled_arch), flops_recount(&doubled_arch));
    let doubled_block_cost = flops(&doubled_arch) - stem_dense;
    assert!(doubled_block_cost > 2 * block_cost);
}

#[test]
fn shrink_keeps_largest_gamma_channels() {
    let (mut arch, mut params) = with_blocks(&[8], &[]);
    let id = arch.stages[0].blocks[0].id;
    // Distinct gammas so the kept set is unambiguous.
    let gammas = [0.9, 0.1, 0.8, 0.2, 0.7, 0.3, 0.6, 0.05];
    for conv in [LayerId::Conv1(id), LayerId::Conv2(id)] {
        if let Some(LayerParams::Conv { bn, .. }) = params.get_mut(conv) {
            bn.gamma = gammas.to_vec();
        }
    }
    let kernel_before = params.kernel(LayerId::Conv1(id)).unwrap().clone();
    let mut widths = arch.current_widths();
    widths.insert(id, (4, 8));
    apply_widths(&mut arch, &mut params, &widths).unwrap();
    // Largest four gammas sit at indices 0, 2, 4, 6.
    let (kernel_after, bn_after) = params.conv(LayerId::Conv1(id)).unwrap();
    assert_eq!(bn_after.gamma, vec![0.9, 0.8, 0.7, 0.6]);
    assert_eq!(kernel_after.shape(), &[3, 3, 16, 4]);
    for p in 0..9 {
        for ci in 0..16 {
            for (co_new, co_old) in [0usize, 2, 4, 6].iter().enumerate() {
                assert_eq!(
                    kernel_after.data()[(p * 16 + ci) * 4 + co_new],
                    kernel_before.data()[(p * 16 + ci) * 8 + co_old]
                );
            }
        }
    }
    // conv2 input slots follow conv1's kept set.
    let (k2, _) = params.conv(LayerId::Conv2(id)).unwrap();
    assert_eq!(k2.shape(), &[3, 3, 4, 8]);
}

#[test]
fn weights_round_trip_preserves_forward_bits() {
    let (arch, params) = with_blocks(&[16, 8], &[]);
    let dir = tempfile::tempdir().unwrap();
    let wpath = dir.path().join("weights.rbw");
    resbuilder::serialize::save_weights(&params, &wpath).unwrap();
    let loaded = resbuilder::serialize::load_weights(&wpath, &arch).unwrap();
    let batch = Tensor::rand_uniform(&[2, 12, 12, 1], -1.0, 1.0, &mut rng_from(35, "x", 0));
    let a = infer_logits(&arch, &params, &batch).unwrap();
    let b = infer_logits(&arch, &loaded, &batch).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn channel_invariant_holds_after_random_edit_sequences() {
    let mut arch = Architecture::resnet18((16, 16, 1), 4).unwrap();
    let mut params = ParamStore::init(&arch, &mut rng_from(36, "init", 0));
    let mut rng = rng_from(36, "edits", 0);
    use rand::Rng;
    for step in 0..12 {
        match rng.gen_range(0..3) {
            0 => {
                let point = resbuilder::insert::pick_insertion_point(&arch, &mut rng);
                resbuilder::insert::insert_block(&mut arch, &mut params, point, 1e-2, step, &mut rng)
                    .unwrap();
            }
            1 => {
                let ids: Vec<_> = arch.iter_blocks().map(|(_, _, b)| b.id).collect();
                if !ids.is_empty() {
                    let victim = ids[rng.gen_range(0..ids.len())];
                    resbuilder::arch::remove_blocks(&mut arch, &mut params, &[victim]).unwrap();
                }
            }
            _ => {
                let omega = rng.gen_range(0.5..1.5);
                let widths = scale_widths(&arch, omega);
                apply_widths(&mut arch, &mut params, &widths).unwrap();
            }
        }
        arch.validate().unwrap();
        params.validate_against(&arch).unwrap();
        assert_eq!(flops(&arch), flops_recount(&arch));
    }
    // The edited net still evaluates.
    let batch = Tensor::rand_uniform(&[2, 16, 16, 1], -1.0, 1.0, &mut rng_from(36, "x", 0));
    let pass = forward_infer(&arch, &params, &batch).unwrap();
    assert!(pass.tape.value(pass.logits).all_finite());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn arch_json_round_trip_random(
        widths in proptest::collection::vec(1usize..24, 0..5),
        split in 0usize..5,
    ) {
        let mut arch = Architecture::new_minimal((16, 16, 1), 7).unwrap();
        let cut = split.min(widths.len());
        for (i, w) in widths.iter().enumerate() {
            let id = arch.fresh_block_id();
            let stage = usize::from(i >= cut);
            let input = arch.width_at_slot(stage, arch.stages[stage].blocks.len());
            arch.stages[stage].blocks.push(ResBlock {
                id,
                c_mid: *w,
                c_out: *w,
                projection: input != *w,
                birth_step: i as u64,
            });
        }
        arch.validate().unwrap();
        let back = arch_from_json(&arch_to_json(&arch), "<prop>").unwrap();
        prop_assert_eq!(arch, back);
    }
}
