//! Independent oracles shared by the integration and acceptance suites.
//! Everything here recomputes results from first principles, bypassing the
//! implementation paths it checks.

#![allow(dead_code)]

use resbuilder::arch::Architecture;
use resbuilder::tape::{NodeId, Tape};
use resbuilder::tensor::Tensor;

/// Direct six-loop convolution, stride 1, zero-padded `same` layout.
pub fn naive_conv2d_same(x: &Tensor, kernel: &Tensor) -> Tensor {
    let (n, h, w, cin) = x.dims4();
    let ks = kernel.shape();
    let (kh, kw, kcin, cout) = (ks[0], ks[1], ks[2], ks[3]);
    assert_eq!(cin, kcin);
    let (pad_top, pad_left) = ((kh - 1) / 2, (kw - 1) / 2);
    let mut out = Tensor::zeros(&[n, h, w, cout]);
    for ex in 0..n {
        for oi in 0..h {
            for oj in 0..w {
                for co in 0..cout {
                    let mut acc = 0.0;
                    for p in 0..kh {
                        for q in 0..kw {
                            let si = oi as isize + p as isize - pad_top as isize;
                            let sj = oj as isize + q as isize - pad_left as isize;
                            if si < 0 || si >= h as isize || sj < 0 || sj >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += x.at4(ex, si as usize, sj as usize, ci)
                                    * kernel.data()
                                        [((p * kw + q) * cin + ci) * cout + co];
                            }
                        }
                    }
                    *out.at4_mut(ex, oi, oj, co) = acc;
                }
            }
        }
    }
    out
}

/// Direct windowed max, 2x2 stride 2, odd edges dropped.
pub fn naive_maxpool2(x: &Tensor) -> Tensor {
    let (n, h, w, c) = x.dims4();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, ho, wo, c]);
    for ex in 0..n {
        for i in 0..ho {
            for j in 0..wo {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    for di in 0..2 {
                        for dj in 0..2 {
                            best = best.max(x.at4(ex, 2 * i + di, 2 * j + dj, ch));
                        }
                    }
                    *out.at4_mut(ex, i, j, ch) = best;
                }
            }
        }
    }
    out
}

/// Plain nested-loop matmul plus bias.
pub fn naive_dense(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let (n, d) = x.dims2();
    let (wd, u) = weight.dims2();
    assert_eq!(d, wd);
    let mut out = Tensor::zeros(&[n, u]);
    for ex in 0..n {
        for k in 0..u {
            let mut acc = bias.data()[k];
            for i in 0..d {
                acc += x.data()[ex * d + i] * weight.data()[i * u + k];
            }
            out.data_mut()[ex * u + k] = acc;
        }
    }
    out
}

/// -sum_i y_i log softmax_i averaged over the batch, evaluated directly.
pub fn naive_softmax_ce(logits: &Tensor, labels: &[usize]) -> f64 {
    let (n, q) = logits.dims2();
    let mut total = 0.0;
    for (row, &label) in logits.data().chunks(q).zip(labels) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        total -= (row[label] - mx) - z.ln();
    }
    total / n as f64
}

/// Relative error with an absolute floor for near-zero pairs.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-8 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-4;

/// Central finite differences against the tape's analytic gradients for a
/// scalar-valued graph over the given leaf tensors. `build` must be a pure
/// function of the leaves.
pub fn fd_check_tape<F>(build: F, inputs: &[Tensor], check: &[bool], context: &str)
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    let eval = |tensors: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> =
            tensors.iter().enumerate().map(|(k, t)| tape.leaf(t.clone(), format!("in{k}"))).collect();
        let loss = build(&mut tape, &ids);
        assert_eq!(tape.value(loss).len(), 1);
        tape.value(loss).data()[0]
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> =
        inputs.iter().enumerate().map(|(k, t)| tape.leaf(t.clone(), format!("in{k}"))).collect();
    let loss = build(&mut tape, &ids);
    let grads = tape.backward(loss).expect("backward succeeds");

    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, tensor) in inputs.iter().enumerate() {
        if !check[k] {
            continue;
        }
        let zero;
        let analytic = match grads.get(ids[k]) {
            Some(g) => g,
            None => {
                zero = Tensor::zeros(tensor.shape());
                &zero
            }
        };
        for i in 0..tensor.len() {
            let orig = tensor.data()[i];
            work[k].data_mut()[i] = orig + FD_STEP;
            let plus = eval(&work);
            work[k].data_mut()[i] = orig - FD_STEP;
            let minus = eval(&work);
            work[k].data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let got = analytic.data()[i];
            assert!(
                rel_err(fd, got) <= FD_TOL,
                "{context}: input {k} element {i}: analytic {got} vs fd {fd}"
            );
        }
    }
}

/// Independent per-layer FLOP recount straight off the architecture:
/// 2 * s * u * v * c_in * c_out per conv (projections included, batch norm /
/// relu / pool free), 2 * in * out for the head.
pub fn flops_recount(arch: &Architecture) -> u64 {
    let (mut h, mut w, c_img) = arch.input_shape;
    let k = arch.stem.kernel as u64;
    let mut total = 2 * k * k * (h * w) as u64 * c_img as u64 * arch.stem.c_out as u64;
    let mut width = arch.stem.c_out as u64;
    for stage in &arch.stages {
        for block in &stage.blocks {
            let (uv, mid, out) = ((h * w) as u64, block.c_mid as u64, block.c_out as u64);
            total += 2 * 9 * uv * width * mid;
            total += 2 * 9 * uv * mid * out;
            if block.projection {
                total += 2 * uv * width * out;
            }
            width = out;
        }
        if stage.pool {
            h /= 2;
            w /= 2;
        }
    }
    total + 2 * (h * w) as u64 * width * arch.n_classes as u64
}

/// Chi-square statistic of observed counts against a uniform expectation.
pub fn chi_square_uniform(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum()
}

/// All files under a directory as (relative path, bytes), sorted.
pub fn dir_contents(root: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    fn walk(dir: &std::path::Path, root: &std::path::Path, out: &mut Vec<(String, Vec<u8>)>) {
        let mut entries: Vec<_> =
            std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for path in entries {
            if path.is_dir() {
                walk(&path, root, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out
}
