//! Block-level L1 pruning: an L1 penalty over the block convolution kernels
//! and a rule deleting every block in which some conv layer's total L1 mass
//! fell below a threshold. Surviving parameters are carried over untouched.

use crate::arch::{Architecture, BlockId, BlockRemovalInfo, LayerId, ParamStore};
use crate::error::Result;
use crate::optim::{l1_subgrad, l1_value};
use crate::tensor::Tensor;
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug)]
pub struct LassoConfig {
    /// Penalty strength lambda_Lambda.
    pub lambda: f64,
    /// Deletion threshold tau_Lambda on a layer's total L1 mass.
    pub tau: f64,
    /// Compare mass / weight-count instead of raw mass. Off by default: the
    /// deletion rule is stated over raw mass, so larger layers survive more
    /// easily.
    pub normalized: bool,
}

impl Default for LassoConfig {
    fn default() -> Self {
        LassoConfig { lambda: 1e-8, tau: 1e-3, normalized: false }
    }
}

/// Sum of L1 norms of the block conv kernels only; the stem, skip
/// projections and the dense head are exempt.
pub fn lasso_penalty(
    arch: &Architecture,
    params: &ParamStore,
) -> Result<(f64, BTreeMap<LayerId, Tensor>)> {
    let mut value = 0.0;
    let mut grads = BTreeMap::new();
    for (_, _, block) in arch.iter_blocks() {
        for id in [LayerId::Conv1(block.id), LayerId::Conv2(block.id)] {
            let (kernel, _) = params.conv(id)?;
            value += l1_value(kernel);
            grads.insert(id, l1_subgrad(kernel));
        }
    }
    Ok((value, grads))
}

fn layer_mass(kernel: &Tensor, cfg: &LassoConfig) -> f64 {
    let mass = l1_value(kernel);
    if cfg.normalized {
        mass / kernel.len() as f64
    } else {
        mass
    }
}

/// Blocks where at least one of the two conv layers has mass strictly below
/// tau.
pub fn blocks_below_threshold(
    arch: &Architecture,
    params: &ParamStore,
    cfg: &LassoConfig,
) -> Result<Vec<BlockId>> {
    let mut flagged = Vec::new();
    for (_, _, block) in arch.iter_blocks() {
        let m1 = layer_mass(params.kernel(LayerId::Conv1(block.id))?, cfg);
        let m2 = layer_mass(params.kernel(LayerId::Conv2(block.id))?, cfg);
        if m1 < cfg.tau || m2 < cfg.tau {
            flagged.push(block.id);
        }
    }
    Ok(flagged)
}

/// Removes every flagged block; all other parameters stay bit-identical
/// except where a removed width change forces a junction repair.
pub fn prune_blocks(
    arch: &mut Architecture,
    params: &mut ParamStore,
    cfg: &LassoConfig,
) -> Result<Vec<BlockRemovalInfo>> {
    let flagged = blocks_below_threshold(arch, params, cfg)?;
    if flagged.is_empty() {
        return Ok(Vec::new());
    }
    crate::arch::remove_blocks(arch, params, &flagged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{LayerParams, ResBlock};
    use crate::rng::rng_from;

    fn toy() -> (Architecture, ParamStore) {
        let mut arch = Architecture::new_minimal((12, 12, 1), 4).unwrap();
        for _ in 0..2 {
            let id = arch.fresh_block_id();
            arch.stages[0].blocks.push(ResBlock {
                id,
                c_mid: 16,
                c_out: 16,
                projection: false,
                birth_step: 0,
            });
        }
        let params = ParamStore::init(&arch, &mut rng_from(2, "init", 0));
        (arch, params)
    }

    fn set_kernel(params: &mut ParamStore, id: LayerId, v: f64) {
        if let Some(LayerParams::Conv { kernel, .. }) = params.get_mut(id) {
            kernel.data_mut().fill(v);
        }
    }

    #[test]
    fn zero_block_architecture_has_zero_penalty() {
        let arch = Architecture::new_minimal((12, 12, 1), 4).unwrap();
        let params = ParamStore::init(&arch, &mut rng_from(3, "init", 0));
        let (value, grads) = lasso_penalty(&arch, &params).unwrap();
        assert_eq!(value, 0.0);
        assert!(grads.is_empty());
    }

    #[test]
    fn unit_kernels_count_weights() {
        let (arch, mut params) = toy();
        for (_, _, b) in arch.clone().iter_blocks() {
            set_kernel(&mut params, LayerId::Conv1(b.id), 1.0);
            set_kernel(&mut params, LayerId::Conv2(b.id), -1.0);
        }
        let (value, _) = lasso_penalty(&arch, &params).unwrap();
        let per_kernel = 3 * 3 * 16 * 16;
        assert_eq!(value, (4 * per_kernel) as f64);
    }

    #[test]
    fn one_small_layer_flags_the_block() {
        let (arch, mut params) = toy();
        let victim = arch.stages[0].blocks[0].id;
        set_kernel(&mut params, LayerId::Conv1(victim), 1e-9);
        set_kernel(&mut params, LayerId::Conv2(victim), 1.0);
        let flagged = blocks_below_threshold(&arch, &params, &LassoConfig::default()).unwrap();
        assert_eq!(flagged, vec![victim]);
    }

    #[test]
    fn exactly_tau_is_not_flagged() {
        let (arch, mut params) = toy();
        let cfg = LassoConfig { tau: 1.0, ..Default::default() };
        let victim = arch.stages[0].blocks[0].id;
        // Mass exactly tau: one weight at 1.0, rest zero.
        set_kernel(&mut params, LayerId::Conv1(victim), 0.0);
        if let Some(LayerParams::Conv { kernel, .. }) = params.get_mut(LayerId::Conv1(victim)) {
            kernel.data_mut()[0] = 1.0;
        }
        let flagged = blocks_below_threshold(&arch, &params, &cfg).unwrap();
        assert!(!flagged.contains(&victim));
    }

    #[test]
    fn prune_is_identity_when_nothing_flagged() {
        let (mut arch, mut params) = toy();
        let arch_before = arch.clone();
        let params_before = params.clone();
        let removed = prune_blocks(&mut arch, &mut params, &LassoConfig::default()).unwrap();
        assert!(removed.is_empty());
        assert_eq!(arch, arch_before);
        assert_eq!(params, params_before);
    }

    #[test]
    fn prune_preserves_survivor_bits_and_positions() {
        let (mut arch, mut params) = toy();
        let victim = arch.stages[0].blocks[0].id;
        let keeper = arch.stages[0].blocks[1].id;
        set_kernel(&mut params, LayerId::Conv1(victim), 0.0);
        let keeper_kernel = params.kernel(LayerId::Conv1(keeper)).unwrap().clone();
        let removed = prune_blocks(&mut arch, &mut params, &LassoConfig::default()).unwrap();
        assert_eq!(removed.len(), 1);
        assert_eq!(removed[0].block_id, victim);
        assert_eq!(removed[0].stage_index, 0);
        // Block 1 of 2 before removal.
        assert_eq!(removed[0].relative_position, 0.5);
        assert_eq!(params.kernel(LayerId::Conv1(keeper)).unwrap(), &keeper_kernel);
        assert_eq!(arch.block_count(), 1);
    }
}
