//! Run directory layout and CSV emission. All formatting is fixed-width
//! deterministic so equal runs produce byte-identical files.

use crate::error::{Error, Result};
use crate::search::{select_best, RunHistory};
use std::fmt::Write as _;
use std::path::Path;

fn fmt_acc(a: Option<f64>) -> String {
    a.map(|v| format!("{v:.6}")).unwrap_or_default()
}

pub fn history_csv(history: &RunHistory) -> String {
    let mut s = String::from(
        "step,event,detail,flops,depth,max_channels_stage0,acc_with_reg,acc_noreg_ri,acc_noreg_wi\n",
    );
    for r in &history.steps {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.step,
            r.event,
            r.detail,
            r.flops,
            r.depth,
            r.max_channels_stage0,
            fmt_acc(r.acc_with_reg),
            fmt_acc(r.acc_noreg_ri),
            fmt_acc(r.acc_noreg_wi),
        );
    }
    s
}

pub fn insertions_csv(history: &RunHistory) -> String {
    let mut s = String::from("step,stage,position,c_mid,c_out,theta_init\n");
    for r in &history.insertions {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:e}",
            r.step, r.stage, r.position, r.c_mid, r.c_out, r.theta_init
        );
    }
    s
}

pub fn removals_csv(history: &RunHistory) -> String {
    let mut s =
        String::from("step,stage_index,relative_position,birth_step,l1_mass_conv1,l1_mass_conv2\n");
    for r in &history.removals {
        let _ = writeln!(
            s,
            "{},{},{:.6},{},{:.6e},{:.6e}",
            r.step, r.stage_index, r.relative_position, r.birth_step, r.l1_mass_conv1, r.l1_mass_conv2
        );
    }
    s
}

pub fn morphs_csv(history: &RunHistory) -> String {
    let mut s =
        String::from("step,omega,flops_before,flops_after,widths_before,c_prime,widths_after\n");
    for r in &history.morphs {
        let _ = writeln!(
            s,
            "{},{:.6},{},{},{},{},{}",
            r.step, r.omega, r.flops_before, r.flops_after, r.widths_before, r.c_prime, r.widths_after
        );
    }
    s
}

pub fn summary_csv(history: &RunHistory, dataset: &str, init: &str) -> String {
    let mut s = String::from(
        "dataset,init,benchmark_acc,best_step,best_acc,best_flops,final_step,final_flops,final_depth,terminal\n",
    );
    let last = history.steps.last();
    let best = select_best(history).ok();
    let _ = writeln!(
        s,
        "{},{},{:.6},{},{},{},{},{},{},{}",
        dataset,
        init,
        history.benchmark_accuracy,
        best.map(|(step, _)| step.to_string()).unwrap_or_default(),
        best.and_then(|(_, r)| history.best_noreg(r)).map(|a| format!("{a:.6}")).unwrap_or_default(),
        best.map(|(_, r)| r.flops.to_string()).unwrap_or_default(),
        last.map(|r| r.step.to_string()).unwrap_or_default(),
        last.map(|r| r.flops.to_string()).unwrap_or_default(),
        last.map(|r| r.depth.to_string()).unwrap_or_default(),
        history.terminal.as_deref().unwrap_or(""),
    );
    s
}

fn write(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn write_run_csvs(dir: &Path, history: &RunHistory) -> Result<()> {
    write(&dir.join("history.csv"), &history_csv(history))?;
    write(&dir.join("insertions.csv"), &insertions_csv(history))?;
    write(&dir.join("removals.csv"), &removals_csv(history))?;
    write(&dir.join("morphs.csv"), &morphs_csv(history))?;
    Ok(())
}
