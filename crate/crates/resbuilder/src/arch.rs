//! Editable ResNet-style architectures with stable layer identities, plus
//! the forward evaluation over the tape.
//!
//! An architecture is a stem convolution, an ordered list of pooling stages
//! of residual blocks, and a dense head feeding a softmax. Blocks keep their
//! identity across insert/remove/re-width edits so parameters can follow
//! them through the search.

use crate::error::{Error, Result};
use crate::tape::{softmax_rows, NodeId, Padding, Tape};
use crate::tensor::Tensor;
use rand::Rng;
use std::collections::BTreeMap;
use std::fmt;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;
/// Residual block convolutions are 3x3, stride 1, same padding, so blocks
/// preserve the feature map size.
pub const BLOCK_KERNEL: usize = 3;

pub const MINIMAL_STEM_WIDTH: usize = 16;
pub const MINIMAL_STEM_KERNEL: usize = 3;
pub const RESNET18_STAGE_WIDTHS: [usize; 4] = [64, 128, 256, 512];

pub type BlockId = u64;
/// Target (c_mid, c_out) per block; zero in either slot marks the block dead.
pub type WidthMap = BTreeMap<BlockId, (usize, usize)>;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Hash)]
pub enum LayerId {
    Stem,
    Conv1(BlockId),
    Conv2(BlockId),
    Proj(BlockId),
    Head,
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerId::Stem => write!(f, "stem"),
            LayerId::Conv1(b) => write!(f, "b{b}.conv1"),
            LayerId::Conv2(b) => write!(f, "b{b}.conv2"),
            LayerId::Proj(b) => write!(f, "b{b}.proj"),
            LayerId::Head => write!(f, "head"),
        }
    }
}

impl LayerId {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "stem" => return Ok(LayerId::Stem),
            "head" => return Ok(LayerId::Head),
            _ => {}
        }
        let rest = s
            .strip_prefix('b')
            .ok_or_else(|| Error::Invalid(format!("bad layer id `{s}`")))?;
        let (num, kind) = rest
            .split_once('.')
            .ok_or_else(|| Error::Invalid(format!("bad layer id `{s}`")))?;
        let id: BlockId =
            num.parse().map_err(|_| Error::Invalid(format!("bad block id in `{s}`")))?;
        match kind {
            "conv1" => Ok(LayerId::Conv1(id)),
            "conv2" => Ok(LayerId::Conv2(id)),
            "proj" => Ok(LayerId::Proj(id)),
            _ => Err(Error::Invalid(format!("bad layer id `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StemSpec {
    pub kernel: usize,
    pub c_out: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock {
    pub id: BlockId,
    pub c_mid: usize,
    pub c_out: usize,
    /// 1x1 conv on the skip path; present exactly when the block input width
    /// differs from `c_out`.
    pub projection: bool,
    /// Pipeline step at which the block was inserted (0 for initial blocks).
    pub birth_step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolStage {
    pub blocks: Vec<ResBlock>,
    /// Whether a 2x2 max-pool follows the stage.
    pub pool: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub input_shape: (usize, usize, usize),
    pub n_classes: usize,
    pub stem: StemSpec,
    pub stages: Vec<PoolStage>,
    pub(crate) next_block_id: BlockId,
}

impl Architecture {
    /// The minimal start net: one stem convolution, two empty pooled stages
    /// and the dense head. No residual blocks.
    pub fn new_minimal(input_shape: (usize, usize, usize), n_classes: usize) -> Result<Self> {
        let (h, w, _) = input_shape;
        if h < 4 || w < 4 {
            return Err(Error::Invalid(format!(
                "input {h}x{w} too small for two pooling layers"
            )));
        }
        let arch = Architecture {
            input_shape,
            n_classes,
            stem: StemSpec { kernel: MINIMAL_STEM_KERNEL, c_out: MINIMAL_STEM_WIDTH },
            stages: vec![
                PoolStage { blocks: vec![], pool: true },
                PoolStage { blocks: vec![], pool: true },
            ],
            next_block_id: 0,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Standard 18-layer residual layout mapped onto pooled stages: four
    /// stages of two blocks at widths 64/128/256/512, projection blocks at
    /// the width changes, 2x2 max-pool after every stage.
    pub fn resnet18(input_shape: (usize, usize, usize), n_classes: usize) -> Result<Self> {
        let (h, w, _) = input_shape;
        if h < 16 || w < 16 {
            return Err(Error::Invalid(format!("input {h}x{w} too small for four pooling layers")));
        }
        let mut next_block_id = 0;
        let mut stages = Vec::new();
        let mut in_width = 64usize;
        for width in RESNET18_STAGE_WIDTHS {
            let mut blocks = Vec::new();
            for _ in 0..2 {
                blocks.push(ResBlock {
                    id: next_block_id,
                    c_mid: width,
                    c_out: width,
                    projection: in_width != width,
                    birth_step: 0,
                });
                next_block_id += 1;
                in_width = width;
            }
            stages.push(PoolStage { blocks, pool: true });
        }
        let arch = Architecture {
            input_shape,
            n_classes,
            stem: StemSpec { kernel: 3, c_out: 64 },
            stages,
            next_block_id,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn fresh_block_id(&mut self) -> BlockId {
        let id = self.next_block_id;
        self.next_block_id += 1;
        id
    }

    pub fn block_count(&self) -> usize {
        self.stages.iter().map(|s| s.blocks.len()).sum()
    }

    /// Number of weight-carrying layers (convs, projections, dense head).
    pub fn weighted_layers(&self) -> usize {
        2 + self
            .stages
            .iter()
            .flat_map(|s| &s.blocks)
            .map(|b| 2 + usize::from(b.projection))
            .sum::<usize>()
    }

    /// Channel width entering stage `stage_idx`.
    pub fn entry_width(&self, stage_idx: usize) -> usize {
        let mut width = self.stem.c_out;
        for stage in &self.stages[..stage_idx] {
            if let Some(last) = stage.blocks.last() {
                width = last.c_out;
            }
        }
        width
    }

    /// Channel width flowing into insertion slot `pos` of a stage
    /// (0 = stage entry, p = after block p-1).
    pub fn width_at_slot(&self, stage_idx: usize, pos: usize) -> usize {
        if pos == 0 {
            self.entry_width(stage_idx)
        } else {
            self.stages[stage_idx].blocks[pos - 1].c_out
        }
    }

    /// Spatial dims at the input of stage `stage_idx`.
    pub fn stage_spatial(&self, stage_idx: usize) -> (usize, usize) {
        let (mut h, mut w, _) = self.input_shape;
        for stage in &self.stages[..stage_idx] {
            if stage.pool {
                h /= 2;
                w /= 2;
            }
        }
        (h, w)
    }

    /// Spatial dims and channels after the last stage, i.e. at the flatten.
    pub fn final_dims(&self) -> (usize, usize, usize) {
        let (mut h, mut w, _) = self.input_shape;
        let mut c = self.stem.c_out;
        for stage in &self.stages {
            if let Some(last) = stage.blocks.last() {
                c = last.c_out;
            }
            if stage.pool {
                h /= 2;
                w /= 2;
            }
        }
        (h, w, c)
    }

    pub fn flatten_len(&self) -> usize {
        let (h, w, c) = self.final_dims();
        h * w * c
    }

    pub fn max_channels_stage0(&self) -> usize {
        self.stages
            .first()
            .map(|s| s.blocks.iter().map(|b| b.c_mid.max(b.c_out)).max())
            .unwrap_or(None)
            .unwrap_or(self.stem.c_out)
    }

    /// (stage index, index within stage, block) in forward order.
    pub fn iter_blocks(&self) -> impl Iterator<Item = (usize, usize, &ResBlock)> {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(si, s)| s.blocks.iter().enumerate().map(move |(bi, b)| (si, bi, b)))
    }

    pub fn find_block(&self, id: BlockId) -> Option<(usize, usize, &ResBlock)> {
        self.iter_blocks().find(|(_, _, b)| b.id == id)
    }

    pub fn current_widths(&self) -> WidthMap {
        self.iter_blocks().map(|(_, _, b)| (b.id, (b.c_mid, b.c_out))).collect()
    }

    /// Structural invariants: at least one stage, positive widths, spatial
    /// room for the poolings, unique block ids, projection flags exactly at
    /// width changes.
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Invalid("architecture needs at least one stage".into()));
        }
        let (h, w, c) = self.input_shape;
        if h == 0 || w == 0 || c == 0 || self.n_classes < 2 {
            return Err(Error::Invalid("degenerate input shape or class count".into()));
        }
        let (fh, fw, _) = self.final_dims();
        if fh == 0 || fw == 0 {
            return Err(Error::Invalid("spatial dims collapse to zero before the head".into()));
        }
        if self.stem.c_out == 0 || self.stem.kernel == 0 {
            return Err(Error::Invalid("stem must have positive kernel and width".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        let mut width = self.stem.c_out;
        for (si, stage) in self.stages.iter().enumerate() {
            for block in &stage.blocks {
                if !seen.insert(block.id) {
                    return Err(Error::Invalid(format!("duplicate block id {}", block.id)));
                }
                if block.id >= self.next_block_id {
                    return Err(Error::Invalid(format!(
                        "block id {} not below next_block_id {}",
                        block.id, self.next_block_id
                    )));
                }
                if block.c_mid == 0 || block.c_out == 0 {
                    return Err(Error::Invalid(format!("block {} has a zero width", block.id)));
                }
                let needs_proj = width != block.c_out;
                if block.projection != needs_proj {
                    return Err(Error::Invalid(format!(
                        "block {} in stage {si}: projection flag {} but input {width} -> out {}",
                        block.id, block.projection, block.c_out
                    )));
                }
                width = block.c_out;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Parameters

#[derive(Clone, Debug, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnParams {
    pub fn fresh(c: usize) -> Self {
        BnParams {
            gamma: vec![1.0; c],
            beta: vec![0.0; c],
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
        }
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams {
    /// Convolution followed by batch norm (stem and block convs).
    Conv { kernel: Tensor, bn: BnParams },
    /// Bare 1x1 convolution on a skip path.
    Proj { kernel: Tensor },
    /// Dense head.
    Dense { weight: Tensor, bias: Tensor },
}

/// Named tensors within a layer.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub enum TensorRole {
    Kernel,
    Gamma,
    Beta,
    Weight,
    Bias,
}

impl fmt::Display for TensorRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TensorRole::Kernel => "kernel",
            TensorRole::Gamma => "gamma",
            TensorRole::Beta => "beta",
            TensorRole::Weight => "weight",
            TensorRole::Bias => "bias",
        };
        write!(f, "{s}")
    }
}

/// All trainable state, addressed by layer identity. Deterministically
/// ordered so iteration (init, optimizer updates, serialization) is stable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<LayerId, LayerParams>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: LayerId) -> Option<&LayerParams> {
        self.map.get(&id)
    }

    pub fn get_mut(&mut self, id: LayerId) -> Option<&mut LayerParams> {
        self.map.get_mut(&id)
    }

    pub fn insert(&mut self, id: LayerId, params: LayerParams) {
        self.map.insert(id, params);
    }

    pub fn remove(&mut self, id: LayerId) -> Option<LayerParams> {
        self.map.remove(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LayerId, &LayerParams)> {
        self.map.iter()
    }

    pub fn conv(&self, id: LayerId) -> Result<(&Tensor, &BnParams)> {
        match self.map.get(&id) {
            Some(LayerParams::Conv { kernel, bn }) => Ok((kernel, bn)),
            _ => Err(Error::Invalid(format!("missing conv params for {id}"))),
        }
    }

    pub fn conv_mut(&mut self, id: LayerId) -> Result<(&mut Tensor, &mut BnParams)> {
        match self.map.get_mut(&id) {
            Some(LayerParams::Conv { kernel, bn }) => Ok((kernel, bn)),
            _ => Err(Error::Invalid(format!("missing conv params for {id}"))),
        }
    }

    pub fn kernel(&self, id: LayerId) -> Result<&Tensor> {
        match self.map.get(&id) {
            Some(LayerParams::Conv { kernel, .. }) | Some(LayerParams::Proj { kernel }) => {
                Ok(kernel)
            }
            _ => Err(Error::Invalid(format!("missing kernel for {id}"))),
        }
    }

    pub fn dense(&self) -> Result<(&Tensor, &Tensor)> {
        match self.map.get(&LayerId::Head) {
            Some(LayerParams::Dense { weight, bias }) => Ok((weight, bias)),
            _ => Err(Error::Invalid("missing dense head params".into())),
        }
    }

    /// Glorot-uniform init for convs and the head, identity for projections;
    /// BN starts at gamma 1, beta 0, running stats (0, 1). Draw order is the
    /// architecture's forward order, so equal seeds give equal stores.
    pub fn init<R: Rng>(arch: &Architecture, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let (_, _, c_in) = arch.input_shape;
        store.insert(
            LayerId::Stem,
            LayerParams::Conv {
                kernel: glorot_conv(arch.stem.kernel, c_in, arch.stem.c_out, rng),
                bn: BnParams::fresh(arch.stem.c_out),
            },
        );
        let mut width = arch.stem.c_out;
        for stage in &arch.stages {
            for block in &stage.blocks {
                store.insert(
                    LayerId::Conv1(block.id),
                    LayerParams::Conv {
                        kernel: glorot_conv(BLOCK_KERNEL, width, block.c_mid, rng),
                        bn: BnParams::fresh(block.c_mid),
                    },
                );
                store.insert(
                    LayerId::Conv2(block.id),
                    LayerParams::Conv {
                        kernel: glorot_conv(BLOCK_KERNEL, block.c_mid, block.c_out, rng),
                        bn: BnParams::fresh(block.c_out),
                    },
                );
                if block.projection {
                    store.insert(
                        LayerId::Proj(block.id),
                        LayerParams::Proj { kernel: identity_projection(width, block.c_out) },
                    );
                }
                width = block.c_out;
            }
        }
        let d = arch.flatten_len();
        let limit = (6.0 / (d + arch.n_classes) as f64).sqrt();
        store.insert(
            LayerId::Head,
            LayerParams::Dense {
                weight: Tensor::rand_uniform(&[d, arch.n_classes], -limit, limit, rng),
                bias: Tensor::zeros(&[arch.n_classes]),
            },
        );
        store
    }

    /// Every live layer has an entry of the right shape, and no stale layers
    /// remain.
    pub fn validate_against(&self, arch: &Architecture) -> Result<()> {
        let mut expected: BTreeMap<LayerId, Vec<usize>> = BTreeMap::new();
        let (_, _, c_in) = arch.input_shape;
        expected.insert(LayerId::Stem, vec![arch.stem.kernel, arch.stem.kernel, c_in, arch.stem.c_out]);
        let mut width = arch.stem.c_out;
        for stage in &arch.stages {
            for b in &stage.blocks {
                expected.insert(LayerId::Conv1(b.id), vec![BLOCK_KERNEL, BLOCK_KERNEL, width, b.c_mid]);
                expected.insert(LayerId::Conv2(b.id), vec![BLOCK_KERNEL, BLOCK_KERNEL, b.c_mid, b.c_out]);
                if b.projection {
                    expected.insert(LayerId::Proj(b.id), vec![1, 1, width, b.c_out]);
                }
                width = b.c_out;
            }
        }
        expected.insert(LayerId::Head, vec![arch.flatten_len(), arch.n_classes]);

        for (id, shape) in &expected {
            match self.map.get(id) {
                None => return Err(Error::shape(id.to_string(), "missing parameters".to_string())),
                Some(LayerParams::Conv { kernel, bn }) => {
                    if kernel.shape() != shape.as_slice() {
                        return Err(Error::shape(
                            id.to_string(),
                            format!("kernel {:?} expected {:?}", kernel.shape(), shape),
                        ));
                    }
                    let c = shape[3];
                    if bn.gamma.len() != c
                        || bn.beta.len() != c
                        || bn.running_mean.len() != c
                        || bn.running_var.len() != c
                    {
                        return Err(Error::shape(id.to_string(), format!("bn vectors != {c}")));
                    }
                    if bn.running_var.iter().any(|&v| v <= 0.0) {
                        return Err(Error::Invalid(format!("{id}: running var must stay positive")));
                    }
                }
                Some(LayerParams::Proj { kernel }) => {
                    if kernel.shape() != shape.as_slice() {
                        return Err(Error::shape(
                            id.to_string(),
                            format!("projection {:?} expected {:?}", kernel.shape(), shape),
                        ));
                    }
                }
                Some(LayerParams::Dense { weight, bias }) => {
                    if weight.shape() != shape.as_slice() || bias.len() != shape[1] {
                        return Err(Error::shape(
                            id.to_string(),
                            format!("dense {:?} expected {:?}", weight.shape(), shape),
                        ));
                    }
                }
            }
        }
        for id in self.map.keys() {
            if !expected.contains_key(id) {
                return Err(Error::Invalid(format!("stale parameters for {id}")));
            }
        }
        Ok(())
    }
}

pub fn glorot_conv<R: Rng>(k: usize, c_in: usize, c_out: usize, rng: &mut R) -> Tensor {
    let fan_in = (k * k * c_in) as f64;
    let fan_out = (k * k * c_out) as f64;
    let limit = (6.0 / (fan_in + fan_out)).sqrt();
    Tensor::rand_uniform(&[k, k, c_in, c_out], -limit, limit, rng)
}

/// 1x1 kernel that copies channel i to channel i, truncating or zero-padding
/// where the widths differ.
pub fn identity_projection(c_in: usize, c_out: usize) -> Tensor {
    let mut t = Tensor::zeros(&[1, 1, c_in, c_out]);
    for i in 0..c_in.min(c_out) {
        t.data_mut()[i * c_out + i] = 1.0;
    }
    t
}

// ---------------------------------------------------------------------------
// Forward evaluation

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Infer,
}

pub struct ForwardPass {
    pub tape: Tape,
    pub logits: NodeId,
    /// Leaf node per trainable tensor, in deterministic forward order.
    pub param_nodes: Vec<(LayerId, TensorRole, NodeId)>,
}

struct NetBuilder<'a> {
    tape: Tape,
    params: &'a mut ParamStore,
    mode: Mode,
    param_nodes: Vec<(LayerId, TensorRole, NodeId)>,
}

impl<'a> NetBuilder<'a> {
    fn conv_bn_relu(&mut self, x: NodeId, id: LayerId) -> Result<NodeId> {
        let (kernel, bn) = self.params.conv(id)?;
        let label = id.to_string();
        let k_node = self.tape.leaf(kernel.clone(), format!("{label}.kernel"));
        let g_node = self.tape.leaf(
            Tensor::from_vec(&[bn.gamma.len()], bn.gamma.clone())?,
            format!("{label}.gamma"),
        );
        let b_node = self.tape.leaf(
            Tensor::from_vec(&[bn.beta.len()], bn.beta.clone())?,
            format!("{label}.beta"),
        );
        self.param_nodes.push((id, TensorRole::Kernel, k_node));
        self.param_nodes.push((id, TensorRole::Gamma, g_node));
        self.param_nodes.push((id, TensorRole::Beta, b_node));
        let conv = self.tape.conv2d(x, k_node, 1, Padding::Same, label.clone())?;
        let bn_out = match self.mode {
            Mode::Train => {
                let (out, stats) =
                    self.tape.batchnorm_train(conv, g_node, b_node, BN_EPS, format!("{label}.bn"))?;
                let (_, bn) = self.params.conv_mut(id)?;
                for c in 0..bn.running_mean.len() {
                    bn.running_mean[c] =
                        BN_MOMENTUM * bn.running_mean[c] + (1.0 - BN_MOMENTUM) * stats.mean[c];
                    bn.running_var[c] =
                        BN_MOMENTUM * bn.running_var[c] + (1.0 - BN_MOMENTUM) * stats.var[c];
                }
                out
            }
            Mode::Infer => {
                let (_, bn) = self.params.conv(id)?;
                self.tape.batchnorm_infer(
                    conv,
                    g_node,
                    b_node,
                    &bn.running_mean.clone(),
                    &bn.running_var.clone(),
                    BN_EPS,
                    format!("{label}.bn"),
                )?
            }
        };
        Ok(self.tape.relu(bn_out, format!("{label}.relu")))
    }

    fn block(&mut self, x: NodeId, block: &ResBlock) -> Result<NodeId> {
        let h1 = self.conv_bn_relu(x, LayerId::Conv1(block.id))?;
        let h2 = self.conv_bn_relu(h1, LayerId::Conv2(block.id))?;
        let skip = if block.projection {
            let id = LayerId::Proj(block.id);
            let kernel = self.params.kernel(id)?.clone();
            let k_node = self.tape.leaf(kernel, format!("{id}.kernel"));
            self.param_nodes.push((id, TensorRole::Kernel, k_node));
            self.tape.conv2d(x, k_node, 1, Padding::Same, id.to_string())?
        } else {
            x
        };
        self.tape.add(skip, h2, format!("b{}.add", block.id))
    }
}

fn forward_impl(
    arch: &Architecture,
    params: &mut ParamStore,
    batch: &Tensor,
    mode: Mode,
) -> Result<ForwardPass> {
    let (_, h, w, c) = batch.dims4();
    let (ih, iw, ic) = arch.input_shape;
    if (h, w, c) != (ih, iw, ic) {
        return Err(Error::shape(
            "input",
            format!("batch {h}x{w}x{c} but architecture expects {ih}x{iw}x{ic}"),
        ));
    }
    let mut b = NetBuilder { tape: Tape::new(), params, mode, param_nodes: Vec::new() };
    let mut x = b.tape.leaf(batch.clone(), "input");
    x = b.conv_bn_relu(x, LayerId::Stem)?;
    for (si, stage) in arch.stages.iter().enumerate() {
        for block in &stage.blocks {
            x = b.block(x, block)?;
        }
        if stage.pool {
            x = b.tape.maxpool2(x, format!("pool{si}"))?;
        }
    }
    x = b.tape.flatten(x, "flatten");
    let (weight, bias) = b.params.dense()?;
    let (weight, bias) = (weight.clone(), bias.clone());
    let w_node = b.tape.leaf(weight, "head.weight");
    let b_node = b.tape.leaf(bias, "head.bias");
    b.param_nodes.push((LayerId::Head, TensorRole::Weight, w_node));
    b.param_nodes.push((LayerId::Head, TensorRole::Bias, b_node));
    let logits = b.tape.dense(x, w_node, b_node, "head")?;
    Ok(ForwardPass { tape: b.tape, logits, param_nodes: b.param_nodes })
}

/// Train-mode forward: batch-statistics batch norm, running averages updated
/// in place.
pub fn forward_train(
    arch: &Architecture,
    params: &mut ParamStore,
    batch: &Tensor,
) -> Result<ForwardPass> {
    forward_impl(arch, params, batch, Mode::Train)
}

/// Inference forward using running statistics; parameters untouched.
pub fn forward_infer(
    arch: &Architecture,
    params: &ParamStore,
    batch: &Tensor,
) -> Result<ForwardPass> {
    let mut scratch = params.clone();
    forward_impl(arch, &mut scratch, batch, Mode::Infer)
}

pub fn infer_logits(arch: &Architecture, params: &ParamStore, batch: &Tensor) -> Result<Tensor> {
    let pass = forward_infer(arch, params, batch)?;
    Ok(pass.tape.value(pass.logits).clone())
}

/// Per-example class distribution (softmax of the logits).
pub fn predict_proba(arch: &Architecture, params: &ParamStore, batch: &Tensor) -> Result<Tensor> {
    Ok(softmax_rows(&infer_logits(arch, params, batch)?))
}

// ---------------------------------------------------------------------------
// Structural edits shared by the search operators

/// Everything a removal event needs to be logged and analyzed later.
#[derive(Clone, Debug)]
pub struct BlockRemovalInfo {
    pub block_id: BlockId,
    pub stage_index: usize,
    /// 1-based position over all blocks divided by the pre-removal count.
    pub relative_position: f64,
    pub birth_step: u64,
    pub l1_mass_conv1: f64,
    pub l1_mass_conv2: f64,
}

/// Drops the given blocks, keeping every other parameter bit-identical, then
/// repairs channel invariants at the junctions the removals exposed.
pub fn remove_blocks(
    arch: &mut Architecture,
    params: &mut ParamStore,
    ids: &[BlockId],
) -> Result<Vec<BlockRemovalInfo>> {
    let total = arch.block_count();
    let mut infos = Vec::new();
    let mut global_idx = 0usize;
    for (si, _, block) in arch.iter_blocks() {
        global_idx += 1;
        if ids.contains(&block.id) {
            let mass1 = params.kernel(LayerId::Conv1(block.id))?.abs_sum();
            let mass2 = params.kernel(LayerId::Conv2(block.id))?.abs_sum();
            infos.push(BlockRemovalInfo {
                block_id: block.id,
                stage_index: si,
                relative_position: global_idx as f64 / total as f64,
                birth_step: block.birth_step,
                l1_mass_conv1: mass1,
                l1_mass_conv2: mass2,
            });
        }
    }
    for stage in &mut arch.stages {
        stage.blocks.retain(|b| !ids.contains(&b.id));
    }
    for &id in ids {
        params.remove(LayerId::Conv1(id));
        params.remove(LayerId::Conv2(id));
        params.remove(LayerId::Proj(id));
    }
    restore_channel_invariants(arch, params)?;
    arch.validate()?;
    params.validate_against(arch)?;
    Ok(infos)
}

/// Positional truncate/pad repair after an edit changed some junction width:
/// conv1 input slots, skip projections and the dense head rows are adjusted;
/// the adjusted layers get fresh running statistics.
pub fn restore_channel_invariants(arch: &mut Architecture, params: &mut ParamStore) -> Result<()> {
    let mut width = arch.stem.c_out;
    for stage in &mut arch.stages {
        for block in &mut stage.blocks {
            {
                let (kernel, bn) = params.conv_mut(LayerId::Conv1(block.id))?;
                let cin = kernel.shape()[2];
                if cin != width {
                    let in_map: Vec<Option<usize>> =
                        (0..width).map(|i| (i < cin).then_some(i)).collect();
                    let out_map: Vec<Option<usize>> = (0..block.c_mid).map(Some).collect();
                    *kernel = remap_kernel(kernel, &in_map, &out_map);
                    bn.running_mean = vec![0.0; block.c_mid];
                    bn.running_var = vec![1.0; block.c_mid];
                }
            }
            let needs_proj = width != block.c_out;
            if needs_proj {
                let ok = matches!(
                    params.get(LayerId::Proj(block.id)),
                    Some(LayerParams::Proj { kernel }) if kernel.shape() == [1, 1, width, block.c_out]
                );
                if !ok {
                    params.insert(
                        LayerId::Proj(block.id),
                        LayerParams::Proj { kernel: identity_projection(width, block.c_out) },
                    );
                }
            } else {
                params.remove(LayerId::Proj(block.id));
            }
            block.projection = needs_proj;
            width = block.c_out;
        }
    }
    // Dense head rows follow the final feature layout.
    let d = arch.flatten_len();
    let (h, w, c_new) = arch.final_dims();
    if let Some(LayerParams::Dense { weight, .. }) = params.get_mut(LayerId::Head) {
        if weight.shape()[0] != d {
            let c_old = weight.shape()[0] / (h * w);
            let in_map: Vec<Option<usize>> = (0..c_new).map(|i| (i < c_old).then_some(i)).collect();
            *weight = remap_dense_rows(weight, h, w, c_old, &in_map);
        }
    }
    Ok(())
}

/// New kernel whose (in, out) channel slots pull from the old kernel through
/// the given maps; `None` slots are zero-filled.
pub fn remap_kernel(old: &Tensor, in_map: &[Option<usize>], out_map: &[Option<usize>]) -> Tensor {
    let shape = old.shape();
    let (kh, kw, cin_old, cout_old) = (shape[0], shape[1], shape[2], shape[3]);
    let (cin_new, cout_new) = (in_map.len(), out_map.len());
    let mut t = Tensor::zeros(&[kh, kw, cin_new, cout_new]);
    let od = old.data();
    let nd = t.data_mut();
    for p in 0..kh * kw {
        for (ci_new, ci_src) in in_map.iter().enumerate() {
            let Some(ci_old) = ci_src else { continue };
            let src_base = (p * cin_old + ci_old) * cout_old;
            let dst_base = (p * cin_new + ci_new) * cout_new;
            for (co_new, co_src) in out_map.iter().enumerate() {
                if let Some(co_old) = co_src {
                    nd[dst_base + co_new] = od[src_base + co_old];
                }
            }
        }
    }
    t
}

/// Re-index dense weight rows when the final channel count changes; rows are
/// laid out (i, j, c) channels-last.
pub fn remap_dense_rows(
    old: &Tensor,
    h: usize,
    w: usize,
    c_old: usize,
    in_map: &[Option<usize>],
) -> Tensor {
    let units = old.shape()[1];
    let c_new = in_map.len();
    let mut t = Tensor::zeros(&[h * w * c_new, units]);
    let od = old.data();
    let nd = t.data_mut();
    for s in 0..h * w {
        for (c, src) in in_map.iter().enumerate() {
            let Some(c_src) = src else { continue };
            let src_base = (s * c_old + c_src) * units;
            let dst_base = (s * c_new + c) * units;
            nd[dst_base..dst_base + units].copy_from_slice(&od[src_base..src_base + units]);
        }
    }
    t
}

/// Channel-keep map for resizing a layer to `target` channels: keeps the
/// largest-|gamma| channels (ties to the lower index) in their original
/// order when shrinking, appends fresh zero slots when growing.
pub fn select_channels(gamma: &[f64], target: usize) -> Vec<Option<usize>> {
    let current = gamma.len();
    if target <= current {
        let mut order: Vec<usize> = (0..current).collect();
        order.sort_by(|&a, &b| {
            gamma[b]
                .abs()
                .partial_cmp(&gamma[a].abs())
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut kept: Vec<usize> = order.into_iter().take(target).collect();
        kept.sort_unstable();
        kept.into_iter().map(Some).collect()
    } else {
        (0..target).map(|i| (i < current).then_some(i)).collect()
    }
}

fn remap_bn(bn: &BnParams, out_map: &[Option<usize>]) -> BnParams {
    let identity =
        out_map.len() == bn.len() && out_map.iter().enumerate().all(|(i, m)| *m == Some(i));
    if identity {
        return bn.clone();
    }
    let pick = |v: &[f64], fresh: f64| -> Vec<f64> {
        out_map.iter().map(|m| m.map_or(fresh, |i| v[i])).collect()
    };
    BnParams {
        gamma: pick(&bn.gamma, 1.0),
        beta: pick(&bn.beta, 0.0),
        // Edited layers restart their running statistics.
        running_mean: vec![0.0; out_map.len()],
        running_var: vec![1.0; out_map.len()],
    }
}

/// Applies a target width per block: kernels are sliced to the largest-|gamma|
/// channels or zero-padded, skip projections are rebuilt where input and
/// output widths differ, and blocks assigned a zero width are removed whole.
pub fn apply_widths(
    arch: &mut Architecture,
    params: &mut ParamStore,
    widths: &WidthMap,
) -> Result<Vec<BlockRemovalInfo>> {
    for (_, _, block) in arch.iter_blocks() {
        if !widths.contains_key(&block.id) {
            return Err(Error::Invalid(format!("widths missing block {}", block.id)));
        }
    }
    let dead: Vec<BlockId> = arch
        .iter_blocks()
        .filter(|(_, _, b)| {
            let (m, o) = widths[&b.id];
            m == 0 || o == 0
        })
        .map(|(_, _, b)| b.id)
        .collect();
    let removed = remove_blocks(arch, params, &dead)?;

    // Width pass over the survivors, threading the incoming channel map.
    let mut in_map: Vec<Option<usize>> = (0..arch.stem.c_out).map(Some).collect();
    for stage in &mut arch.stages {
        for block in &mut stage.blocks {
            let (tgt_mid, tgt_out) = widths[&block.id];
            let map1;
            let map2;
            {
                let (kernel, bn) = params.conv_mut(LayerId::Conv1(block.id))?;
                map1 = select_channels(&bn.gamma, tgt_mid);
                let identity_in = in_map.len() == kernel.shape()[2]
                    && in_map.iter().enumerate().all(|(i, m)| *m == Some(i));
                let identity_out = tgt_mid == bn.len()
                    && map1.iter().enumerate().all(|(i, m)| *m == Some(i));
                if !(identity_in && identity_out) {
                    *kernel = remap_kernel(kernel, &in_map, &map1);
                    *bn = remap_bn(bn, &map1);
                }
            }
            {
                let (kernel, bn) = params.conv_mut(LayerId::Conv2(block.id))?;
                map2 = select_channels(&bn.gamma, tgt_out);
                let identity_in = map1.len() == kernel.shape()[2]
                    && map1.iter().enumerate().all(|(i, m)| *m == Some(i));
                let identity_out =
                    tgt_out == bn.len() && map2.iter().enumerate().all(|(i, m)| *m == Some(i));
                if !(identity_in && identity_out) {
                    *kernel = remap_kernel(kernel, &map1, &map2);
                    *bn = remap_bn(bn, &map2);
                }
            }
            let needs_proj = in_map.len() != tgt_out;
            if needs_proj {
                let kernel = match params.remove(LayerId::Proj(block.id)) {
                    Some(LayerParams::Proj { kernel })
                        if kernel.shape() == [1, 1, in_map.len(), tgt_out] =>
                    {
                        kernel
                    }
                    Some(LayerParams::Proj { kernel }) => remap_kernel(&kernel, &in_map, &map2),
                    _ => identity_projection(in_map.len(), tgt_out),
                };
                params.insert(LayerId::Proj(block.id), LayerParams::Proj { kernel });
            } else {
                params.remove(LayerId::Proj(block.id));
            }
            block.c_mid = tgt_mid;
            block.c_out = tgt_out;
            block.projection = needs_proj;
            in_map = map2;
        }
    }

    // Head rows follow the (possibly re-ordered) final channels.
    let (h, w, _) = arch.final_dims();
    if let Some(LayerParams::Dense { weight, .. }) = params.get_mut(LayerId::Head) {
        let identity = in_map.len() * h * w == weight.shape()[0]
            && in_map.iter().enumerate().all(|(i, m)| *m == Some(i));
        if !identity {
            let c_old = weight.shape()[0] / (h * w);
            *weight = remap_dense_rows(weight, h, w, c_old, &in_map);
        }
    }

    arch.validate()?;
    params.validate_against(arch)?;
    Ok(removed)
}
