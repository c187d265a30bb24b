//! Width search: a cost-weighted bidirectional group-lasso on the batch-norm
//! scales, threshold shrinking, and the largest budget-feasible uniform
//! expansion factor.
//!
//! One routine is: train with the penalty active, read surviving widths from
//! the |gamma| > tau aliveness pattern, find the largest omega keeping the
//! FLOP recount within budget, then re-width the network to omega times the
//! survivors. Blocks whose layers lose every channel are removed whole.

use crate::arch::{Architecture, BlockRemovalInfo, LayerId, ParamStore, WidthMap};
use crate::cost::{cost_model, flops_with_widths, scale_width_map};
use crate::error::{Error, Result};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug)]
pub struct MorphConfig {
    /// Penalty strength lambda_M.
    pub lambda: f64,
    /// Aliveness threshold tau_M on |gamma|.
    pub tau: f64,
    /// FLOP budget zeta.
    pub budget: u64,
    /// Number of morph routines in a full search.
    pub n_routines: usize,
}

impl Default for MorphConfig {
    fn default() -> Self {
        MorphConfig { lambda: 1e-7, tau: 1e-2, budget: 100_000_000, n_routines: 7 }
    }
}

/// Omega grid: powers of OMEGA_STEP anchored at 1, capped at OMEGA_MAX.
pub const OMEGA_STEP: f64 = 1.001;
pub const OMEGA_MAX: f64 = 16.0;

fn omega_at(k: i64) -> f64 {
    let v = OMEGA_STEP.powi(k as i32);
    if v > OMEGA_MAX {
        OMEGA_MAX
    } else {
        v
    }
}

/// Smallest grid exponent worth probing: below it every surviving width has
/// already floored to 1.
fn omega_floor_exponent(widths: &WidthMap) -> i64 {
    let max_w = widths.values().map(|&(m, o)| m.max(o)).max().unwrap_or(1).max(1);
    -(((max_w as f64).ln() / OMEGA_STEP.ln()).ceil() as i64) - 1
}

fn omega_cap_exponent() -> i64 {
    (OMEGA_MAX.ln() / OMEGA_STEP.ln()).ceil() as i64
}

/// The chain of batch-normalized convolutions along the main path, each with
/// its fan-in gamma source (`None` for the stem, whose inputs are the image
/// channels, always alive and unpenalized).
fn gamma_chain(arch: &Architecture) -> Vec<(LayerId, Option<LayerId>)> {
    let mut chain = vec![(LayerId::Stem, None)];
    let mut prev = LayerId::Stem;
    for (_, _, block) in arch.iter_blocks() {
        chain.push((LayerId::Conv1(block.id), Some(prev)));
        chain.push((LayerId::Conv2(block.id), Some(LayerId::Conv1(block.id))));
        prev = LayerId::Conv2(block.id);
    }
    chain
}

/// Penalty value and its subgradients with respect to every batch-norm
/// gamma. Per layer: C_j * (sum_in |g| * alive_out + alive_in * sum_out |g|),
/// aliveness counts frozen (they have zero gradient almost everywhere).
pub fn morph_penalty(
    arch: &Architecture,
    params: &ParamStore,
    cfg: &MorphConfig,
) -> Result<(f64, BTreeMap<LayerId, Vec<f64>>)> {
    let model = cost_model(arch);
    let (_, _, c_img) = arch.input_shape;
    let mut value = 0.0;
    let mut grads: BTreeMap<LayerId, Vec<f64>> = BTreeMap::new();
    for (layer, fan_in) in gamma_chain(arch) {
        let (_, bn_out) = params.conv(layer)?;
        let cost = model
            .layer(layer)
            .ok_or_else(|| Error::Invalid(format!("no cost entry for {layer}")))?
            .flops() as f64;
        let (sum_in, alive_in, in_gamma) = match fan_in {
            None => (0.0, c_img as f64, None),
            Some(src) => {
                let (_, bn_in) = params.conv(src)?;
                let sum: f64 = bn_in.gamma.iter().map(|g| g.abs()).sum();
                let alive = bn_in.gamma.iter().filter(|g| g.abs() > cfg.tau).count() as f64;
                (sum, alive, Some(src))
            }
        };
        let sum_out: f64 = bn_out.gamma.iter().map(|g| g.abs()).sum();
        let alive_out = bn_out.gamma.iter().filter(|g| g.abs() > cfg.tau).count() as f64;
        value += cost * (sum_in * alive_out + alive_in * sum_out);

        let gout = grads.entry(layer).or_insert_with(|| vec![0.0; bn_out.gamma.len()]);
        for (g, slot) in bn_out.gamma.iter().zip(gout.iter_mut()) {
            *slot += cost * alive_in * g.signum_or_zero();
        }
        if let Some(src) = in_gamma {
            let (_, bn_in) = params.conv(src)?;
            let gin = grads.entry(src).or_insert_with(|| vec![0.0; bn_in.gamma.len()]);
            for (g, slot) in bn_in.gamma.iter().zip(gin.iter_mut()) {
                *slot += cost * alive_out * g.signum_or_zero();
            }
        }
    }
    Ok((value, grads))
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

/// Widths induced by the trained gammas: per block conv, the number of
/// channels with |gamma| above tau. A zero count marks the block dead. The
/// stem and head never shrink.
pub fn shrink_widths(arch: &Architecture, params: &ParamStore, tau: f64) -> Result<WidthMap> {
    let mut widths = WidthMap::new();
    for (_, _, block) in arch.iter_blocks() {
        let (_, bn1) = params.conv(LayerId::Conv1(block.id))?;
        let (_, bn2) = params.conv(LayerId::Conv2(block.id))?;
        let alive = |bn: &crate::arch::BnParams| bn.gamma.iter().filter(|g| g.abs() > tau).count();
        widths.insert(block.id, (alive(bn1), alive(bn2)));
    }
    Ok(widths)
}

/// Largest omega on the grid such that the exact FLOP recount of the scaled
/// widths stays within budget. Errors when even all-1 widths exceed it.
pub fn expand_omega(arch: &Architecture, shrunk: &WidthMap, budget: u64) -> Result<f64> {
    let cost_at = |k: i64| -> u64 { flops_with_widths(arch, &scale_width_map(shrunk, omega_at(k))) };
    let lo = omega_floor_exponent(shrunk);
    let hi = omega_cap_exponent();
    let min_cost = cost_at(lo);
    if min_cost > budget {
        return Err(Error::BudgetInfeasible { min_flops: min_cost, budget });
    }
    if cost_at(hi) <= budget {
        return Ok(omega_at(hi));
    }
    // Cost is nondecreasing in omega; bisect the largest feasible exponent.
    let (mut lo, mut hi) = (lo, hi);
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if cost_at(mid) <= budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(omega_at(lo))
}

/// The next point on the omega grid, for maximality checks.
pub fn next_grid_omega(omega: f64) -> f64 {
    (omega * OMEGA_STEP).min(OMEGA_MAX)
}

/// Everything one routine did, for the run log.
#[derive(Clone, Debug)]
pub struct MorphRecord {
    pub widths_before: WidthMap,
    pub shrunk: WidthMap,
    pub omega: f64,
    pub widths_after: WidthMap,
    pub flops_before: u64,
    pub flops_after: u64,
    pub removed: Vec<BlockRemovalInfo>,
}

/// One full routine: train via the callback, shrink by gamma aliveness,
/// expand to the budget, re-width in place.
pub fn morph_routine<F>(
    arch: &mut Architecture,
    params: &mut ParamStore,
    cfg: &MorphConfig,
    mut train: F,
) -> Result<MorphRecord>
where
    F: FnMut(&mut Architecture, &mut ParamStore) -> Result<()>,
{
    train(arch, params)?;
    let widths_before = arch.current_widths();
    let flops_before = crate::cost::flops(arch);
    let shrunk = shrink_widths(arch, params, cfg.tau)?;
    // Dead blocks leave the width map before the expansion search.
    let survivors: WidthMap =
        shrunk.iter().filter(|(_, &(m, o))| m > 0 && o > 0).map(|(&k, &v)| (k, v)).collect();
    let dead: Vec<_> = shrunk
        .iter()
        .filter(|(_, &(m, o))| m == 0 || o == 0)
        .map(|(&k, _)| (k, (0usize, 0usize)))
        .collect();
    let omega = expand_omega(arch, &survivors, cfg.budget)?;
    let mut target = scale_width_map(&survivors, omega);
    target.extend(dead);
    let removed = crate::arch::apply_widths(arch, params, &target)?;
    let flops_after = crate::cost::flops(arch);
    debug_assert!(flops_after <= cfg.budget);
    Ok(MorphRecord {
        widths_before,
        shrunk,
        omega,
        widths_after: arch.current_widths(),
        flops_before,
        flops_after,
        removed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{Architecture, LayerParams, ParamStore};
    use crate::rng::rng_from;

    fn arch_with_block(width: usize) -> (Architecture, ParamStore) {
        let mut arch = Architecture::new_minimal((12, 12, 1), 10).unwrap();
        let id = arch.fresh_block_id();
        arch.stages[0].blocks.push(crate::arch::ResBlock {
            id,
            c_mid: width,
            c_out: width,
            projection: width != arch.stem.c_out,
            birth_step: 0,
        });
        let params = ParamStore::init(&arch, &mut rng_from(1, "init", 0));
        (arch, params)
    }

    fn set_gamma(params: &mut ParamStore, id: LayerId, gamma: &[f64]) {
        if let Some(LayerParams::Conv { bn, .. }) = params.get_mut(id) {
            bn.gamma = gamma.to_vec();
        } else {
            panic!("not a conv layer");
        }
    }

    #[test]
    fn zero_gamma_gives_zero_penalty() {
        let (arch, mut params) = arch_with_block(16);
        for (_, _, b) in arch.clone().iter_blocks() {
            set_gamma(&mut params, LayerId::Conv1(b.id), &vec![0.0; 16]);
            set_gamma(&mut params, LayerId::Conv2(b.id), &vec![0.0; 16]);
        }
        set_gamma(&mut params, LayerId::Stem, &vec![0.0; 16]);
        let cfg = MorphConfig::default();
        let (value, _) = morph_penalty(&arch, &params, &cfg).unwrap();
        assert_eq!(value, 0.0);
    }

    #[test]
    fn penalty_doubles_when_gamma_doubles() {
        let (arch, params) = arch_with_block(16);
        let cfg = MorphConfig::default();
        let (v1, _) = morph_penalty(&arch, &params, &cfg).unwrap();
        let mut doubled = params.clone();
        for id in [LayerId::Stem, LayerId::Conv1(0), LayerId::Conv2(0)] {
            if let Some(LayerParams::Conv { bn, .. }) = doubled.get_mut(id) {
                for g in &mut bn.gamma {
                    *g *= 2.0;
                }
            }
        }
        let (v2, _) = morph_penalty(&arch, &doubled, &cfg).unwrap();
        assert!((v2 - 2.0 * v1).abs() < 1e-6 * v1.abs());
    }

    #[test]
    fn shrink_counts_above_threshold() {
        let (arch, mut params) = arch_with_block(3);
        set_gamma(&mut params, LayerId::Conv1(0), &[0.5, 0.0001, 0.3]);
        let widths = shrink_widths(&arch, &params, 1e-2).unwrap();
        assert_eq!(widths[&0].0, 2);
    }

    #[test]
    fn shrink_boundaries() {
        let (arch, mut params) = arch_with_block(3);
        set_gamma(&mut params, LayerId::Conv1(0), &[1e-3, 1e-3, 1e-3]);
        set_gamma(&mut params, LayerId::Conv2(0), &[0.5, 0.5, 0.5]);
        let widths = shrink_widths(&arch, &params, 1e-2).unwrap();
        assert_eq!(widths[&0], (0, 3));
        // Exactly tau is not above tau.
        set_gamma(&mut params, LayerId::Conv1(0), &[1e-2, 1e-2, 1e-2]);
        let widths = shrink_widths(&arch, &params, 1e-2).unwrap();
        assert_eq!(widths[&0].0, 0);
    }

    #[test]
    fn infeasible_budget_is_an_error() {
        let (arch, _) = arch_with_block(8);
        let shrunk = arch.current_widths();
        let err = expand_omega(&arch, &shrunk, 10).unwrap_err();
        assert!(matches!(err, Error::BudgetInfeasible { .. }));
    }

    #[test]
    fn omega_near_one_when_budget_equals_current_cost() {
        // Wide layers so the integer rounding plateau is narrow.
        let (arch, _) = arch_with_block(1000);
        let shrunk = arch.current_widths();
        let budget = flops_with_widths(&arch, &shrunk);
        let omega = expand_omega(&arch, &shrunk, budget).unwrap();
        assert!((omega - 1.0).abs() < 2e-3, "omega {omega}");
        assert!(flops_with_widths(&arch, &scale_width_map(&shrunk, omega)) <= budget);
        assert!(
            flops_with_widths(&arch, &scale_width_map(&shrunk, next_grid_omega(omega))) > budget
        );
    }
}
