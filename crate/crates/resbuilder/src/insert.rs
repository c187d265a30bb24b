//! The "random in" half of the search: pick a pooling stage uniformly, then
//! a slot within it, and insert a fresh two-conv block initialized close to
//! zero so the skip connection keeps the network near its current function.

use crate::arch::{Architecture, LayerId, LayerParams, ParamStore, ResBlock, BLOCK_KERNEL};
use crate::error::Result;
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Clone, Copy, Debug)]
pub struct InsertConfig {
    /// Mean absolute value of a fresh block's conv weights.
    pub theta_init: f64,
    /// Insertions per morph routine.
    pub per_routine: usize,
}

impl Default for InsertConfig {
    fn default() -> Self {
        InsertConfig { theta_init: 1e-2, per_routine: 4 }
    }
}

/// An insertion slot: 0 is the stage entry (right behind the previous pool),
/// p is after the stage's block p-1. Slots before the stem or after the
/// flatten do not exist.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InsertionPoint {
    pub stage: usize,
    pub position: usize,
}

/// Stage uniform over stages, then position uniform over the stage's slots.
pub fn pick_insertion_point<R: Rng>(arch: &Architecture, rng: &mut R) -> InsertionPoint {
    let stage = rng.gen_range(0..arch.stages.len());
    let position = rng.gen_range(0..=arch.stages[stage].blocks.len());
    InsertionPoint { stage, position }
}

/// Inserts one block at the point. Width matches the local channel count so
/// no projection is needed and the identity continuation is exact in the
/// zero-weight limit. Kernels are i.i.d. uniform on [-2 theta, 2 theta]
/// (mean |w| = theta); batch norm starts at gamma 1, beta 0.
pub fn insert_block<R: Rng>(
    arch: &mut Architecture,
    params: &mut ParamStore,
    point: InsertionPoint,
    theta_init: f64,
    birth_step: u64,
    rng: &mut R,
) -> Result<crate::arch::BlockId> {
    let width = arch.width_at_slot(point.stage, point.position);
    let id = arch.fresh_block_id();
    let a = 2.0 * theta_init;
    let kernel = |rng: &mut R| {
        if a > 0.0 {
            Tensor::rand_uniform(&[BLOCK_KERNEL, BLOCK_KERNEL, width, width], -a, a, rng)
        } else {
            Tensor::zeros(&[BLOCK_KERNEL, BLOCK_KERNEL, width, width])
        }
    };
    params.insert(
        LayerId::Conv1(id),
        LayerParams::Conv { kernel: kernel(rng), bn: crate::arch::BnParams::fresh(width) },
    );
    params.insert(
        LayerId::Conv2(id),
        LayerParams::Conv { kernel: kernel(rng), bn: crate::arch::BnParams::fresh(width) },
    );
    arch.stages[point.stage].blocks.insert(
        point.position,
        ResBlock { id, c_mid: width, c_out: width, projection: false, birth_step },
    );
    arch.validate()?;
    params.validate_against(arch)?;
    Ok(id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{infer_logits, Architecture, ParamStore};
    use crate::rng::rng_from;

    #[test]
    fn single_empty_stage_always_picks_entry() {
        let mut arch = Architecture::new_minimal((12, 12, 1), 4).unwrap();
        arch.stages.truncate(1);
        let mut rng = rng_from(5, "pick", 0);
        for _ in 0..20 {
            let p = pick_insertion_point(&arch, &mut rng);
            assert_eq!(p, InsertionPoint { stage: 0, position: 0 });
        }
    }

    #[test]
    fn same_seed_same_insertion() {
        let arch0 = Architecture::new_minimal((12, 12, 1), 4).unwrap();
        let mut results = Vec::new();
        for _ in 0..2 {
            let mut arch = arch0.clone();
            let mut params = ParamStore::init(&arch, &mut rng_from(7, "init", 0));
            let mut rng = rng_from(7, "insert", 0);
            let p = pick_insertion_point(&arch, &mut rng);
            insert_block(&mut arch, &mut params, p, 1e-2, 1, &mut rng).unwrap();
            results.push((arch, params));
        }
        assert_eq!(results[0].0, results[1].0);
        assert!(results[0].1 == results[1].1);
    }

    #[test]
    fn inserted_weights_break_symmetry() {
        let mut arch = Architecture::new_minimal((12, 12, 1), 4).unwrap();
        let mut params = ParamStore::init(&arch, &mut rng_from(8, "init", 0));
        let mut rng = rng_from(8, "insert", 0);
        let id = insert_block(
            &mut arch,
            &mut params,
            InsertionPoint { stage: 0, position: 0 },
            1e-2,
            1,
            &mut rng,
        )
        .unwrap();
        let kernel = params.kernel(crate::arch::LayerId::Conv1(id)).unwrap();
        let first = kernel.data()[0];
        assert!(kernel.data().iter().any(|&v| v != first));
        let mean_abs = kernel.abs_sum() / kernel.len() as f64;
        assert!((mean_abs - 1e-2).abs() < 4e-3, "mean |w| = {mean_abs}");
    }

    #[test]
    fn zero_weight_insertion_preserves_infer_output_bits() {
        let mut arch = Architecture::new_minimal((12, 12, 1), 4).unwrap();
        let mut params = ParamStore::init(&arch, &mut rng_from(9, "init", 0));
        let batch = Tensor::rand_uniform(&[3, 12, 12, 1], 0.0, 1.0, &mut rng_from(9, "x", 0));
        let before = infer_logits(&arch, &params, &batch).unwrap();
        let mut rng = rng_from(9, "insert", 0);
        insert_block(
            &mut arch,
            &mut params,
            InsertionPoint { stage: 1, position: 0 },
            0.0,
            1,
            &mut rng,
        )
        .unwrap();
        let after = infer_logits(&arch, &params, &batch).unwrap();
        assert_eq!(before.data(), after.data());
    }

    #[test]
    fn insertion_never_touches_existing_parameters() {
        let mut arch = Architecture::resnet18((16, 16, 1), 4).unwrap();
        let mut params = ParamStore::init(&arch, &mut rng_from(10, "init", 0));
        let before = params.clone();
        let mut rng = rng_from(10, "insert", 0);
        let p = pick_insertion_point(&arch, &mut rng);
        let id = insert_block(&mut arch, &mut params, p, 1e-2, 3, &mut rng).unwrap();
        for (layer, lp) in before.iter() {
            assert_eq!(params.get(*layer), Some(lp));
        }
        let (_, _, b) = arch.find_block(id).unwrap();
        assert!(!b.projection);
        assert_eq!(b.birth_step, 3);
    }
}
