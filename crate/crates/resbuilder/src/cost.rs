//! FLOP cost model. A convolution producing a u x v map from c_in to c_out
//! channels with an s-element filter costs 2*s*u*v*c_in*c_out (one multiply
//! plus one add per connection); the dense head costs 2*in*out. Batch norm,
//! ReLU and pooling are free by convention.

use crate::arch::{Architecture, LayerId, WidthMap};

#[derive(Clone, Debug)]
pub struct LayerCost {
    pub layer: LayerId,
    /// Filter size s = kernel elements per (c_in, c_out) pair.
    pub filter_size: u64,
    pub out_h: u64,
    pub out_w: u64,
    pub c_in: u64,
    pub c_out: u64,
}

impl LayerCost {
    pub fn flops(&self) -> u64 {
        2 * self.filter_size * self.out_h * self.out_w * self.c_in * self.c_out
    }
}

#[derive(Clone, Debug)]
pub struct CostModel {
    pub layers: Vec<LayerCost>,
    pub dense_in: u64,
    pub dense_out: u64,
}

impl CostModel {
    pub fn dense_flops(&self) -> u64 {
        2 * self.dense_in * self.dense_out
    }

    pub fn total(&self) -> u64 {
        self.layers.iter().map(LayerCost::flops).sum::<u64>() + self.dense_flops()
    }

    pub fn layer(&self, id: LayerId) -> Option<&LayerCost> {
        self.layers.iter().find(|l| l.layer == id)
    }
}

/// Cost model at the architecture's live widths.
pub fn cost_model(arch: &Architecture) -> CostModel {
    cost_model_with(arch, &arch.current_widths())
}

/// Cost model with hypothetical block widths. Blocks mapped to a zero width
/// are treated as removed; skip projections are implied wherever the width
/// chain demands them. The stem and head keep their live widths.
pub fn cost_model_with(arch: &Architecture, widths: &WidthMap) -> CostModel {
    let (h0, w0, c_img) = arch.input_shape;
    let k = arch.stem.kernel as u64;
    let mut layers = vec![LayerCost {
        layer: LayerId::Stem,
        filter_size: k * k,
        out_h: h0 as u64,
        out_w: w0 as u64,
        c_in: c_img as u64,
        c_out: arch.stem.c_out as u64,
    }];
    let (mut h, mut w) = (h0 as u64, w0 as u64);
    let mut width = arch.stem.c_out as u64;
    let kb = crate::arch::BLOCK_KERNEL as u64;
    for stage in &arch.stages {
        for block in &stage.blocks {
            let (c_mid, c_out) = widths.get(&block.id).copied().unwrap_or((block.c_mid, block.c_out));
            if c_mid == 0 || c_out == 0 {
                continue;
            }
            let (c_mid, c_out) = (c_mid as u64, c_out as u64);
            layers.push(LayerCost {
                layer: LayerId::Conv1(block.id),
                filter_size: kb * kb,
                out_h: h,
                out_w: w,
                c_in: width,
                c_out: c_mid,
            });
            layers.push(LayerCost {
                layer: LayerId::Conv2(block.id),
                filter_size: kb * kb,
                out_h: h,
                out_w: w,
                c_in: c_mid,
                c_out,
            });
            if width != c_out {
                layers.push(LayerCost {
                    layer: LayerId::Proj(block.id),
                    filter_size: 1,
                    out_h: h,
                    out_w: w,
                    c_in: width,
                    c_out,
                });
            }
            width = c_out;
        }
        if stage.pool {
            h /= 2;
            w /= 2;
        }
    }
    CostModel { layers, dense_in: h * w * width, dense_out: arch.n_classes as u64 }
}

/// Total FLOPs of the live architecture.
pub fn flops(arch: &Architecture) -> u64 {
    cost_model(arch).total()
}

/// Total FLOPs at hypothetical widths, zero-width blocks removed.
pub fn flops_with_widths(arch: &Architecture, widths: &WidthMap) -> u64 {
    cost_model_with(arch, widths).total()
}

/// Hypothetical widths scaled by omega with the expansion rounding rule
/// max(1, floor(omega * c)); does not touch the live architecture. Blocks
/// already at zero width stay dead.
pub fn scale_width_map(widths: &WidthMap, omega: f64) -> WidthMap {
    assert!(omega > 0.0, "omega must be positive");
    let scale = |c: usize| -> usize {
        if c == 0 {
            0
        } else {
            ((omega * c as f64).floor() as usize).max(1)
        }
    };
    widths.iter().map(|(&id, &(m, o))| (id, (scale(m), scale(o)))).collect()
}

/// Convenience: the live widths scaled by omega.
pub fn scale_widths(arch: &Architecture, omega: f64) -> WidthMap {
    scale_width_map(&arch.current_widths(), omega)
}
