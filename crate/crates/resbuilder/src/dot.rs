//! DOT rendering of an architecture: one node per layer, conv widths in the
//! labels, skip connections as bypass edges. Blocks born at
//! `highlight_birth_step` are drawn green, matching the run renderings where
//! fresh insertions are highlighted.

use crate::arch::Architecture;
use std::fmt::Write as _;

const COLOR_CONV: &str = "orange";
const COLOR_FRESH: &str = "green";
const COLOR_POOL: &str = "red";
const COLOR_DENSE: &str = "violet";
const COLOR_SOFTMAX: &str = "lightblue";
const COLOR_PROJ: &str = "khaki";

pub fn to_dot(arch: &Architecture, highlight_birth_step: Option<u64>) -> String {
    let mut s = String::from("digraph arch {\n  rankdir=LR;\n  node [shape=box, style=filled];\n");
    let mut edges = String::new();

    let _ = writeln!(
        s,
        "  stem [label=\"conv {k}x{k}\\n{w}\", fillcolor={COLOR_CONV}];",
        k = arch.stem.kernel,
        w = arch.stem.c_out
    );
    // Nodes the next layer must receive an edge from (main path plus a skip).
    let mut prevs: Vec<String> = vec!["stem".into()];

    for (si, stage) in arch.stages.iter().enumerate() {
        for block in &stage.blocks {
            let id = block.id;
            let fresh = highlight_birth_step == Some(block.birth_step);
            let conv_color = if fresh { COLOR_FRESH } else { COLOR_CONV };
            let c1 = format!("b{id}c1");
            let c2 = format!("b{id}c2");
            let _ = writeln!(
                s,
                "  {c1} [label=\"conv 3x3\\n{}\", fillcolor={conv_color}];",
                block.c_mid
            );
            let _ = writeln!(
                s,
                "  {c2} [label=\"conv 3x3\\n{}\", fillcolor={conv_color}];",
                block.c_out
            );
            for p in &prevs {
                let _ = writeln!(edges, "  {p} -> {c1};");
            }
            let _ = writeln!(edges, "  {c1} -> {c2};");
            let skip_src = if block.projection {
                let proj = format!("b{id}p");
                let _ = writeln!(
                    s,
                    "  {proj} [label=\"proj 1x1\\n{}\", fillcolor={COLOR_PROJ}];",
                    block.c_out
                );
                for p in &prevs {
                    let _ = writeln!(edges, "  {p} -> {proj};");
                }
                proj
            } else {
                prevs[0].clone()
            };
            prevs = vec![c2, skip_src];
        }
        if stage.pool {
            let pool = format!("pool{si}");
            let _ = writeln!(s, "  {pool} [label=\"pool 2x2\", fillcolor={COLOR_POOL}];");
            for p in &prevs {
                let _ = writeln!(edges, "  {p} -> {pool};");
            }
            prevs = vec![pool];
        }
    }

    let _ = writeln!(s, "  dense [label=\"dense {}\", fillcolor={COLOR_DENSE}];", arch.n_classes);
    let _ = writeln!(s, "  softmax [label=\"softmax\", fillcolor={COLOR_SOFTMAX}];");
    for p in &prevs {
        let _ = writeln!(edges, "  {p} -> dense;");
    }
    let _ = writeln!(edges, "  dense -> softmax;");
    s.push_str(&edges);
    s.push_str("}\n");
    s
}
