//! One training phase: mini-batch Adam on the composite loss
//! cross-entropy + lambda_0 L2 + lambda_Lambda block-L1 + lambda_M width
//! group-lasso. The regularizer gradients are closed-form and added to the
//! tape's cross-entropy gradients.

use crate::arch::{forward_train, infer_logits, Architecture, LayerId, LayerParams, ParamStore, TensorRole};
use crate::data::augment;
use crate::error::{Error, Result};
use crate::lasso::{lasso_penalty, LassoConfig};
use crate::morph::{morph_penalty, MorphConfig};
use crate::optim::{AdamParams, AdamState};
use crate::rng::rng_from;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use std::collections::BTreeMap;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum TrainingVariant {
    /// All penalties active; trains the live search parameters.
    WithReg,
    /// No search penalties, fresh random weights.
    NoRegRi,
    /// No search penalties, warm-started from the WithReg checkpoint.
    NoRegWi,
}

impl TrainingVariant {
    pub fn tag(&self) -> &'static str {
        match self {
            TrainingVariant::WithReg => "with_reg",
            TrainingVariant::NoRegRi => "noreg_ri",
            TrainingVariant::NoRegWi => "noreg_wi",
        }
    }
}

/// When the comparison variants are trained during a search.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum NoRegCadence {
    EveryEdit,
    AfterMorph,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lambda_morph: f64,
    pub lambda_lasso: f64,
    pub lambda_l2: f64,
    pub tau_morph: f64,
    pub tau_lasso: f64,
    pub budget: u64,
    pub inserts_per_routine: usize,
    pub n_routines: usize,
    pub theta_init: f64,
    pub epochs_per_phase: usize,
    /// Epochs of the morph routine's own training step; defaults to
    /// epochs_per_phase.
    pub morph_train_epochs: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub augment: bool,
    pub rng_seed: u64,
    pub noreg_cadence: NoRegCadence,
    pub save_weights: bool,
    pub lasso_normalized: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_morph: 1e-7,
            lambda_lasso: 1e-8,
            lambda_l2: 1e-5,
            tau_morph: 1e-2,
            tau_lasso: 1e-3,
            budget: 100_000_000,
            inserts_per_routine: 4,
            n_routines: 7,
            theta_init: 1e-2,
            epochs_per_phase: 8,
            morph_train_epochs: None,
            batch_size: 128,
            learning_rate: 1e-3,
            augment: true,
            rng_seed: 0,
            noreg_cadence: NoRegCadence::EveryEdit,
            save_weights: true,
            lasso_normalized: false,
        }
    }
}

impl TrainConfig {
    pub fn morph_config(&self) -> MorphConfig {
        MorphConfig {
            lambda: self.lambda_morph,
            tau: self.tau_morph,
            budget: self.budget,
            n_routines: self.n_routines,
        }
    }

    pub fn lasso_config(&self) -> LassoConfig {
        LassoConfig {
            lambda: self.lambda_lasso,
            tau: self.tau_lasso,
            normalized: self.lasso_normalized,
        }
    }

    /// Penalty weights for a variant: the comparison variants drop the
    /// search penalties but keep the L2 term.
    pub fn reg_weights(&self, variant: TrainingVariant) -> RegWeights {
        match variant {
            TrainingVariant::WithReg => RegWeights {
                lambda_morph: self.lambda_morph,
                lambda_lasso: self.lambda_lasso,
                lambda_l2: self.lambda_l2,
                tau_morph: self.tau_morph,
            },
            _ => RegWeights {
                lambda_morph: 0.0,
                lambda_lasso: 0.0,
                lambda_l2: self.lambda_l2,
                tau_morph: self.tau_morph,
            },
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RegWeights {
    pub lambda_morph: f64,
    pub lambda_lasso: f64,
    pub lambda_l2: f64,
    pub tau_morph: f64,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub cross_entropy: f64,
    pub l2: f64,
    pub lasso: f64,
    pub morph: f64,
}

impl LossTerms {
    pub fn total(&self, reg: &RegWeights) -> f64 {
        self.cross_entropy
            + reg.lambda_l2 * self.l2
            + reg.lambda_lasso * self.lasso
            + reg.lambda_morph * self.morph
    }
}

pub type GradMap = BTreeMap<(LayerId, TensorRole), Tensor>;

fn l2_applies(layer: LayerId, role: TensorRole) -> bool {
    matches!(role, TensorRole::Kernel | TensorRole::Weight) && !matches!(layer, LayerId::Proj(_))
        || matches!((layer, role), (LayerId::Proj(_), TensorRole::Kernel))
}

/// Composite loss and gradients for one batch, in train mode (running batch
/// norm statistics are updated in place).
pub fn loss_and_grads(
    arch: &Architecture,
    params: &mut ParamStore,
    batch: &Tensor,
    labels: &[usize],
    reg: &RegWeights,
) -> Result<(LossTerms, GradMap)> {
    let pass = forward_train(arch, params, batch)?;
    let mut tape = pass.tape;
    let loss_node = tape.softmax_cross_entropy(pass.logits, labels)?;
    let mut grads = tape.backward(loss_node)?;

    let mut terms = LossTerms { cross_entropy: tape.value(loss_node).data()[0], ..Default::default() };
    let mut out: GradMap = BTreeMap::new();
    for (layer, role, node) in &pass.param_nodes {
        let g = grads
            .take(*node)
            .unwrap_or_else(|| Tensor::zeros(tape.value(*node).shape()));
        out.insert((*layer, *role), g);
    }

    // L2 on conv/dense weights (not batch norm, not bias).
    if reg.lambda_l2 != 0.0 {
        for ((layer, role), g) in out.iter_mut() {
            if l2_applies(*layer, *role) {
                let theta = param_slice(params, *layer, *role)?;
                terms.l2 += theta.iter().map(|v| v * v).sum::<f64>();
                for (gv, &tv) in g.data_mut().iter_mut().zip(theta) {
                    *gv += reg.lambda_l2 * 2.0 * tv;
                }
            }
        }
    } else {
        for ((layer, role), _) in out.iter() {
            if l2_applies(*layer, *role) {
                let theta = param_slice(params, *layer, *role)?;
                terms.l2 += theta.iter().map(|v| v * v).sum::<f64>();
            }
        }
    }

    if reg.lambda_lasso != 0.0 {
        let (value, subgrads) = lasso_penalty(arch, params)?;
        terms.lasso = value;
        for (layer, sg) in subgrads {
            if let Some(g) = out.get_mut(&(layer, TensorRole::Kernel)) {
                for (gv, &sv) in g.data_mut().iter_mut().zip(sg.data()) {
                    *gv += reg.lambda_lasso * sv;
                }
            }
        }
    } else {
        terms.lasso = lasso_penalty(arch, params)?.0;
    }

    let morph_cfg = MorphConfig { lambda: reg.lambda_morph, tau: reg.tau_morph, budget: 0, n_routines: 0 };
    if reg.lambda_morph != 0.0 {
        let (value, gamma_grads) = morph_penalty(arch, params, &morph_cfg)?;
        terms.morph = value;
        for (layer, gg) in gamma_grads {
            if let Some(g) = out.get_mut(&(layer, TensorRole::Gamma)) {
                for (gv, &sv) in g.data_mut().iter_mut().zip(&gg) {
                    *gv += reg.lambda_morph * sv;
                }
            }
        }
    } else {
        terms.morph = morph_penalty(arch, params, &morph_cfg)?.0;
    }

    Ok((terms, out))
}

/// Total composite loss at the given parameters, without side effects; the
/// finite-difference tests perturb parameters and call this.
pub fn total_loss(
    arch: &Architecture,
    params: &ParamStore,
    batch: &Tensor,
    labels: &[usize],
    reg: &RegWeights,
) -> Result<f64> {
    let mut scratch = params.clone();
    let (terms, _) = loss_and_grads(arch, &mut scratch, batch, labels, reg)?;
    Ok(terms.total(reg))
}

pub fn param_slice<'p>(params: &'p ParamStore, layer: LayerId, role: TensorRole) -> Result<&'p [f64]> {
    let lp = params
        .get(layer)
        .ok_or_else(|| Error::Invalid(format!("missing params for {layer}")))?;
    Ok(match (lp, role) {
        (LayerParams::Conv { kernel, .. }, TensorRole::Kernel) => kernel.data(),
        (LayerParams::Conv { bn, .. }, TensorRole::Gamma) => &bn.gamma,
        (LayerParams::Conv { bn, .. }, TensorRole::Beta) => &bn.beta,
        (LayerParams::Proj { kernel }, TensorRole::Kernel) => kernel.data(),
        (LayerParams::Dense { weight, .. }, TensorRole::Weight) => weight.data(),
        (LayerParams::Dense { bias, .. }, TensorRole::Bias) => bias.data(),
        _ => return Err(Error::Invalid(format!("no {role} tensor in {layer}"))),
    })
}

pub fn param_slice_mut<'p>(
    params: &'p mut ParamStore,
    layer: LayerId,
    role: TensorRole,
) -> Result<&'p mut [f64]> {
    let lp = params
        .get_mut(layer)
        .ok_or_else(|| Error::Invalid(format!("missing params for {layer}")))?;
    Ok(match (lp, role) {
        (LayerParams::Conv { kernel, .. }, TensorRole::Kernel) => kernel.data_mut(),
        (LayerParams::Conv { bn, .. }, TensorRole::Gamma) => &mut bn.gamma,
        (LayerParams::Conv { bn, .. }, TensorRole::Beta) => &mut bn.beta,
        (LayerParams::Proj { kernel }, TensorRole::Kernel) => kernel.data_mut(),
        (LayerParams::Dense { weight, .. }, TensorRole::Weight) => weight.data_mut(),
        (LayerParams::Dense { bias, .. }, TensorRole::Bias) => bias.data_mut(),
        _ => return Err(Error::Invalid(format!("no {role} tensor in {layer}"))),
    })
}

fn gather_batch(images: &Tensor, labels: &[usize], idx: &[usize]) -> (Tensor, Vec<usize>) {
    let (_, h, w, c) = images.dims4();
    let per = h * w * c;
    let mut data = Vec::with_capacity(idx.len() * per);
    let mut out_labels = Vec::with_capacity(idx.len());
    for &i in idx {
        data.extend_from_slice(&images.data()[i * per..(i + 1) * per]);
        out_labels.push(labels[i]);
    }
    (Tensor::from_vec(&[idx.len(), h, w, c], data).unwrap(), out_labels)
}

/// Top-1 accuracy in percent, evaluated in inference mode.
pub fn evaluate_accuracy(
    arch: &Architecture,
    params: &ParamStore,
    images: &Tensor,
    labels: &[usize],
    batch_size: usize,
) -> Result<f64> {
    let (n, h, w, c) = images.dims4();
    assert_eq!(n, labels.len());
    if n == 0 {
        return Ok(0.0);
    }
    let per = h * w * c;
    let mut correct = 0usize;
    let mut start = 0usize;
    while start < n {
        let end = (start + batch_size).min(n);
        let batch = Tensor::from_vec(
            &[end - start, h, w, c],
            images.data()[start * per..end * per].to_vec(),
        )?;
        let logits = infer_logits(arch, params, &batch)?;
        let (_, q) = logits.dims2();
        for (row, &label) in logits.data().chunks(q).zip(&labels[start..end]) {
            let mut best = 0usize;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            if best == label {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(100.0 * correct as f64 / n as f64)
}

#[derive(Clone, Debug)]
pub struct PhaseMetrics {
    pub variant: TrainingVariant,
    pub epochs: usize,
    pub train_loss_per_epoch: Vec<f64>,
    pub test_accuracy: f64,
}

/// Runs `epochs` of Adam over the train split and reports the final test
/// accuracy. Fully deterministic given (config seed, phase_tag): batch order
/// and augmentation draws derive from them alone.
pub fn train_phase(
    arch: &Architecture,
    params: &mut ParamStore,
    variant: TrainingVariant,
    data: &crate::data::Dataset,
    config: &TrainConfig,
    phase_tag: u64,
    epochs: usize,
) -> Result<PhaseMetrics> {
    arch.validate()?;
    params.validate_against(arch)?;
    let reg = config.reg_weights(variant);
    let mut adam = AdamState::new(AdamParams {
        learning_rate: config.learning_rate,
        ..Default::default()
    });
    let mut shuffle_rng = rng_from(config.rng_seed, "shuffle", phase_tag);
    let mut augment_rng = rng_from(config.rng_seed, "augment", phase_tag);
    let n = data.train_images.shape()[0];
    let mut order: Vec<usize> = (0..n).collect();
    let mut loss_curve = Vec::with_capacity(epochs);

    for _epoch in 0..epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0f64;
        for chunk in order.chunks(config.batch_size) {
            let (mut batch, labels) = gather_batch(&data.train_images, &data.train_labels, chunk);
            if config.augment {
                batch = augment(&batch, &mut augment_rng);
            }
            let (terms, grads) = loss_and_grads(arch, params, &batch, &labels, &reg)?;
            let total = terms.total(&reg);
            if !total.is_finite() {
                return Err(Error::NonFinite { context: format!("total loss ({variant:?})", ) });
            }
            epoch_loss += total;
            batches += 1.0;
            adam.begin_step();
            for ((layer, role), g) in &grads {
                let slice = param_slice_mut(params, *layer, *role)?;
                adam.update(&format!("{layer}.{role}"), slice, g.data());
            }
        }
        loss_curve.push(epoch_loss / batches.max(1.0));
    }

    let test_accuracy =
        evaluate_accuracy(arch, params, &data.test_images, &data.test_labels, config.batch_size)?;
    Ok(PhaseMetrics { variant, epochs, train_loss_per_epoch: loss_curve, test_accuracy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;
    use crate::rng::rng_from;

    #[test]
    fn zero_lambdas_reduce_total_to_cross_entropy() {
        let arch = Architecture::new_minimal((12, 12, 1), 4).unwrap();
        let mut params = ParamStore::init(&arch, &mut rng_from(1, "init", 0));
        let batch = Tensor::rand_uniform(&[4, 12, 12, 1], 0.0, 1.0, &mut rng_from(1, "x", 0));
        let labels = vec![0, 1, 2, 3];
        let reg = RegWeights { lambda_morph: 0.0, lambda_lasso: 0.0, lambda_l2: 0.0, tau_morph: 1e-2 };
        let (terms, _) = loss_and_grads(&arch, &mut params, &batch, &labels, &reg).unwrap();
        assert_eq!(terms.total(&reg), terms.cross_entropy);
    }

    #[test]
    fn two_phases_same_seed_identical_params() {
        let arch = Architecture::new_minimal((12, 12, 1), 4).unwrap();
        let data = synthetic_blobs(4, 8, 12, &mut rng_from(2, "data", 0));
        let config = TrainConfig {
            batch_size: 8,
            epochs_per_phase: 2,
            rng_seed: 9,
            ..Default::default()
        };
        let mut runs = Vec::new();
        for _ in 0..2 {
            let mut params = ParamStore::init(&arch, &mut rng_from(9, "init", 0));
            let m = train_phase(&arch, &mut params, TrainingVariant::WithReg, &data, &config, 3, 2)
                .unwrap();
            runs.push((params, m.test_accuracy));
        }
        assert!(runs[0].0 == runs[1].0);
        assert_eq!(runs[0].1, runs[1].1);
    }

    #[test]
    fn zero_epochs_returns_checkpoint_accuracy() {
        let arch = Architecture::new_minimal((12, 12, 1), 4).unwrap();
        let data = synthetic_blobs(4, 8, 12, &mut rng_from(3, "data", 0));
        let config = TrainConfig { batch_size: 8, ..Default::default() };
        let mut params = ParamStore::init(&arch, &mut rng_from(4, "init", 0));
        let direct =
            evaluate_accuracy(&arch, &params, &data.test_images, &data.test_labels, 8).unwrap();
        let before = params.clone();
        let m = train_phase(&arch, &mut params, TrainingVariant::NoRegWi, &data, &config, 0, 0)
            .unwrap();
        assert_eq!(m.test_accuracy, direct);
        assert!(params == before);
    }
}
