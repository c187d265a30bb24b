//! The full search loop: repeated (insert -> train-with-penalties -> prune)
//! phases followed by a width-morph routine, a configurable number of times.
//! After structural edits the two comparison variants are trained on
//! parameter snapshots so every visited architecture gets a comparable
//! no-penalty accuracy. Everything lands in a RunHistory; callers can point
//! the run at a directory to get per-step artifacts and CSV logs.

use crate::arch::{Architecture, BlockRemovalInfo, ParamStore, WidthMap};
use crate::cost::flops;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::insert::{insert_block, pick_insertion_point};
use crate::lasso::prune_blocks;
use crate::morph::{morph_routine, MorphRecord};
use crate::rng::rng_from;
use crate::serialize::{arch_to_json, save_arch, save_weights};
use crate::train::{train_phase, NoRegCadence, TrainConfig, TrainingVariant};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug)]
pub struct StepRecord {
    pub step: usize,
    pub event: String,
    pub detail: String,
    pub flops: u64,
    pub depth: usize,
    pub max_channels_stage0: usize,
    pub acc_with_reg: Option<f64>,
    pub acc_noreg_ri: Option<f64>,
    pub acc_noreg_wi: Option<f64>,
    pub arch_json: String,
}

#[derive(Clone, Debug)]
pub struct InsertionRow {
    pub step: usize,
    pub stage: usize,
    pub position: usize,
    pub c_mid: usize,
    pub c_out: usize,
    pub theta_init: f64,
}

#[derive(Clone, Debug)]
pub struct RemovalRow {
    pub step: usize,
    pub stage_index: usize,
    pub relative_position: f64,
    pub birth_step: u64,
    pub l1_mass_conv1: f64,
    pub l1_mass_conv2: f64,
}

#[derive(Clone, Debug)]
pub struct MorphRow {
    pub step: usize,
    pub omega: f64,
    pub flops_before: u64,
    pub flops_after: u64,
    pub widths_before: String,
    pub c_prime: String,
    pub widths_after: String,
}

#[derive(Clone, Debug, Default)]
pub struct RunHistory {
    pub steps: Vec<StepRecord>,
    pub insertions: Vec<InsertionRow>,
    pub removals: Vec<RemovalRow>,
    pub morphs: Vec<MorphRow>,
    pub benchmark_accuracy: f64,
    pub terminal: Option<String>,
}

impl RunHistory {
    pub fn count_events(&self, event: &str) -> usize {
        self.steps.iter().filter(|s| s.event == event).count()
    }

    pub fn best_noreg(&self, s: &StepRecord) -> Option<f64> {
        match (s.acc_noreg_ri, s.acc_noreg_wi) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (Some(a), None) => Some(a),
            (None, Some(b)) => Some(b),
            (None, None) => None,
        }
    }
}

pub struct RunOutcome {
    pub history: RunHistory,
    pub final_arch: Architecture,
    pub final_params: ParamStore,
}

#[derive(Clone, Debug)]
pub enum InitialArch {
    Minimal,
    ResNet18,
    Loaded(Architecture),
}

pub fn widths_string(widths: &WidthMap) -> String {
    widths
        .iter()
        .map(|(id, (m, o))| format!("{id}:{m}:{o}"))
        .collect::<Vec<_>>()
        .join(";")
}

fn sanitize(detail: &str) -> String {
    detail.replace([',', '\n'], ";")
}

struct Runner<'a> {
    data: &'a Dataset,
    config: &'a TrainConfig,
    out: Option<PathBuf>,
    history: RunHistory,
    phase_counter: u64,
    step: usize,
}

impl<'a> Runner<'a> {
    fn next_phase_tag(&mut self) -> u64 {
        self.phase_counter += 1;
        self.phase_counter
    }

    fn record_step(
        &mut self,
        event: &str,
        detail: String,
        arch: &Architecture,
        params: &ParamStore,
        acc_with_reg: Option<f64>,
        acc_noreg: Option<(f64, f64)>,
    ) -> Result<()> {
        let record = StepRecord {
            step: self.step,
            event: event.to_string(),
            detail: sanitize(&detail),
            flops: flops(arch),
            depth: arch.block_count(),
            max_channels_stage0: arch.max_channels_stage0(),
            acc_with_reg,
            acc_noreg_ri: acc_noreg.map(|a| a.0),
            acc_noreg_wi: acc_noreg.map(|a| a.1),
            arch_json: arch_to_json(arch),
        };
        if let Some(dir) = &self.out {
            let step_dir = dir.join(format!("step_{:04}", self.step));
            std::fs::create_dir_all(&step_dir)
                .map_err(|e| Error::io(step_dir.display().to_string(), e))?;
            save_arch(arch, &step_dir.join("arch.json"))?;
            if self.config.save_weights {
                save_weights(params, &step_dir.join("weights.rbw"))?;
            }
        }
        self.history.steps.push(record);
        Ok(())
    }

    fn push_removals(&mut self, removed: &[BlockRemovalInfo]) {
        for r in removed {
            self.history.removals.push(RemovalRow {
                step: self.step,
                stage_index: r.stage_index,
                relative_position: r.relative_position,
                birth_step: r.birth_step,
                l1_mass_conv1: r.l1_mass_conv1,
                l1_mass_conv2: r.l1_mass_conv2,
            });
        }
    }

    /// Trains the two no-penalty comparison variants on snapshots; the live
    /// parameters are never touched.
    fn noreg_pair(
        &mut self,
        arch: &Architecture,
        live: &ParamStore,
    ) -> Result<(f64, f64)> {
        let mut fresh = ParamStore::init(arch, &mut rng_from(self.config.rng_seed, "ri_init", self.step as u64));
        let tag = self.next_phase_tag();
        let ri = train_phase(
            arch,
            &mut fresh,
            TrainingVariant::NoRegRi,
            self.data,
            self.config,
            tag,
            self.config.epochs_per_phase,
        )?;
        let mut warm = live.clone();
        let tag = self.next_phase_tag();
        let wi = train_phase(
            arch,
            &mut warm,
            TrainingVariant::NoRegWi,
            self.data,
            self.config,
            tag,
            self.config.epochs_per_phase,
        )?;
        Ok((ri.test_accuracy, wi.test_accuracy))
    }
}

/// Builds the initial architecture for a dataset.
pub fn initial_architecture(init: &InitialArch, data: &Dataset, _config: &TrainConfig) -> Result<Architecture> {
    let shape = data.image_shape();
    match init {
        InitialArch::Minimal => Architecture::new_minimal(shape, data.n_classes),
        InitialArch::ResNet18 => Architecture::resnet18(shape, data.n_classes),
        InitialArch::Loaded(arch) => {
            if arch.input_shape != shape || arch.n_classes != data.n_classes {
                return Err(Error::Invalid(format!(
                    "architecture expects input {:?} / {} classes but dataset has {:?} / {}",
                    arch.input_shape, arch.n_classes, shape, data.n_classes
                )));
            }
            Ok(arch.clone())
        }
    }
}

/// Runs the full search. Divergence and budget infeasibility terminate the
/// run gracefully: the partial history gets a final `terminal` record and is
/// returned as a normal outcome.
pub fn run_resbuilder(
    init: InitialArch,
    data: &Dataset,
    config: &TrainConfig,
    out: Option<&Path>,
) -> Result<RunOutcome> {
    data.validate()?;
    let mut arch = initial_architecture(&init, data, config)?;
    let mut params = ParamStore::init(&arch, &mut rng_from(config.rng_seed, "init", 0));
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    let mut r = Runner {
        data,
        config,
        out: out.map(Path::to_path_buf),
        history: RunHistory::default(),
        phase_counter: 0,
        step: 0,
    };

    // Benchmark: the initial architecture trained without search penalties
    // from a fresh init, under the same epoch budget as every later variant.
    let bench = {
        let mut fresh = ParamStore::init(&arch, &mut rng_from(config.rng_seed, "ri_init", 0));
        let tag = r.next_phase_tag();
        train_phase(&arch, &mut fresh, TrainingVariant::NoRegRi, data, config, tag, config.epochs_per_phase)?
    };
    r.history.benchmark_accuracy = bench.test_accuracy;
    r.record_step("init", String::new(), &arch, &params, None, Some((bench.test_accuracy, bench.test_accuracy)))?;

    let mut insert_rng = rng_from(config.rng_seed, "insert", 0);
    let morph_cfg = config.morph_config();
    let lasso_cfg = config.lasso_config();

    'outer: for _routine in 0..config.n_routines {
        for _ins in 0..config.inserts_per_routine {
            // Random in.
            let point = pick_insertion_point(&arch, &mut insert_rng);
            r.step += 1;
            let block_id = insert_block(
                &mut arch,
                &mut params,
                point,
                config.theta_init,
                r.step as u64,
                &mut insert_rng,
            )?;
            let (_, _, b) = arch.find_block(block_id).expect("fresh block exists");
            r.history.insertions.push(InsertionRow {
                step: r.step,
                stage: point.stage,
                position: point.position,
                c_mid: b.c_mid,
                c_out: b.c_out,
                theta_init: config.theta_init,
            });

            // Train with all penalties active.
            let tag = r.next_phase_tag();
            let trained = train_phase(
                &arch,
                &mut params,
                TrainingVariant::WithReg,
                data,
                config,
                tag,
                config.epochs_per_phase,
            );
            let acc_with_reg = match trained {
                Ok(m) => Some(m.test_accuracy),
                Err(Error::NonFinite { context }) => {
                    let detail = format!("diverged: {context}");
                    r.record_step("insert", format!("stage={} pos={} block={block_id}", point.stage, point.position), &arch, &params, None, None)?;
                    r.step += 1;
                    r.record_step("terminal", detail.clone(), &arch, &params, None, None)?;
                    r.history.terminal = Some(detail);
                    break 'outer;
                }
                Err(e) => return Err(e),
            };
            let noreg = if config.noreg_cadence == NoRegCadence::EveryEdit {
                Some(r.noreg_pair(&arch, &params)?)
            } else {
                None
            };
            r.record_step(
                "insert",
                format!("stage={} pos={} block={block_id}", point.stage, point.position),
                &arch,
                &params,
                acc_with_reg,
                noreg,
            )?;

            // Greedy out.
            let removed = prune_blocks(&mut arch, &mut params, &lasso_cfg)?;
            if !removed.is_empty() {
                r.step += 1;
                r.push_removals(&removed);
                let ids: Vec<String> = removed.iter().map(|x| x.block_id.to_string()).collect();
                let noreg = if config.noreg_cadence == NoRegCadence::EveryEdit {
                    Some(r.noreg_pair(&arch, &params)?)
                } else {
                    None
                };
                r.record_step("remove", format!("blocks={}", ids.join("+")), &arch, &params, None, noreg)?;
            }
        }

        // Width morph routine; its training step is the routine's step 1.
        let morph_epochs = config.morph_train_epochs.unwrap_or(config.epochs_per_phase);
        let mut trained_acc: Option<f64> = None;
        let morph_result: Result<MorphRecord> = {
            let data_ref = r.data;
            let cfg_ref = r.config;
            let tag = r.next_phase_tag();
            let acc_slot = &mut trained_acc;
            morph_routine(&mut arch, &mut params, &morph_cfg, |a, p| {
                if morph_epochs > 0 {
                    let m = train_phase(a, p, TrainingVariant::WithReg, data_ref, cfg_ref, tag, morph_epochs)?;
                    *acc_slot = Some(m.test_accuracy);
                }
                Ok(())
            })
        };
        if let (Some(acc), Some(last)) = (trained_acc, r.history.steps.last_mut()) {
            last.acc_with_reg = Some(acc);
        }
        match morph_result {
            Ok(record) => {
                r.step += 1;
                r.push_removals(&record.removed);
                r.history.morphs.push(MorphRow {
                    step: r.step,
                    omega: record.omega,
                    flops_before: record.flops_before,
                    flops_after: record.flops_after,
                    widths_before: widths_string(&record.widths_before),
                    c_prime: widths_string(&record.shrunk),
                    widths_after: widths_string(&record.widths_after),
                });
                debug_assert!(record.flops_after <= config.budget);
                let noreg = Some(r.noreg_pair(&arch, &params)?);
                // The live parameters just went through channel slicing;
                // record where that leaves them on the new architecture.
                let post_morph_acc = crate::train::evaluate_accuracy(
                    &arch,
                    &params,
                    &data.test_images,
                    &data.test_labels,
                    config.batch_size,
                )?;
                r.record_step("morph", format!("omega={:.6}", record.omega), &arch, &params, Some(post_morph_acc), noreg)?;
            }
            Err(Error::BudgetInfeasible { min_flops, budget }) => {
                r.step += 1;
                let detail = format!("budget infeasible: min {min_flops} > budget {budget}");
                r.record_step("terminal", detail.clone(), &arch, &params, None, None)?;
                r.history.terminal = Some(detail);
                break 'outer;
            }
            Err(Error::NonFinite { context }) => {
                r.step += 1;
                let detail = format!("diverged: {context}");
                r.record_step("terminal", detail.clone(), &arch, &params, None, None)?;
                r.history.terminal = Some(detail);
                break 'outer;
            }
            Err(e) => return Err(e),
        }
    }

    let history = r.history;
    if let Some(dir) = out {
        crate::runlog::write_run_csvs(dir, &history)?;
    }
    Ok(RunOutcome { history, final_arch: arch, final_params: params })
}

/// The history step maximizing no-penalty test accuracy; ties prefer fewer
/// FLOPs, then the earlier step.
pub fn select_best(history: &RunHistory) -> Result<(usize, &StepRecord)> {
    let mut best: Option<(f64, u64, usize, &StepRecord)> = None;
    for s in &history.steps {
        let Some(acc) = history.best_noreg(s) else { continue };
        let candidate = (acc, s.flops, s.step, s);
        best = Some(match best {
            None => candidate,
            Some(cur) => {
                let (bacc, bflops, bstep, _) = cur;
                if acc > bacc
                    || (acc == bacc && s.flops < bflops)
                    || (acc == bacc && s.flops == bflops && s.step < bstep)
                {
                    candidate
                } else {
                    cur
                }
            }
        });
    }
    best.map(|(_, _, step, rec)| (step, rec))
        .ok_or_else(|| Error::Invalid("history has no step with a no-penalty accuracy".into()))
}

#[derive(Clone, Debug, Default)]
pub struct RemovalStats {
    pub positions: Vec<f64>,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

/// Relative positions (in [0, 1]) of all removal events plus quartiles.
pub fn removal_position_stats(history: &RunHistory) -> RemovalStats {
    let mut positions: Vec<f64> = history.removals.iter().map(|r| r.relative_position).collect();
    positions.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if positions.is_empty() {
        return RemovalStats::default();
    }
    let quantile = |q: f64| -> f64 {
        let idx = q * (positions.len() - 1) as f64;
        let lo = idx.floor() as usize;
        let hi = idx.ceil() as usize;
        let frac = idx - lo as f64;
        positions[lo] * (1.0 - frac) + positions[hi] * frac
    };
    RemovalStats {
        q1: quantile(0.25),
        median: quantile(0.5),
        q3: quantile(0.75),
        positions,
    }
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub strength: f64,
    pub final_flops: u64,
    pub with_reg_accuracy: f64,
    pub collapsed: bool,
}

/// One search per strength with lambda_M = lambda_Lambda = s and the L2 term
/// off. A run collapses when every block dies (or the run terminates early).
pub fn regularization_sweep(
    strengths: &[f64],
    init: InitialArch,
    data: &Dataset,
    base: &TrainConfig,
    out: Option<&Path>,
) -> Result<Vec<SweepRow>> {
    if strengths.len() < 2 {
        return Err(Error::Config("sweep needs at least 2 strengths".into()));
    }
    let mut rows = Vec::new();
    for (i, &s) in strengths.iter().enumerate() {
        let mut config = base.clone();
        config.lambda_morph = s;
        config.lambda_lasso = s;
        config.lambda_l2 = 0.0;
        let run_dir = out.map(|d| d.join(format!("sweep_{i}")));
        let outcome = run_resbuilder(init.clone(), data, &config, run_dir.as_deref())?;
        let last = outcome.history.steps.last().expect("history never empty");
        let with_reg_accuracy = outcome
            .history
            .steps
            .iter()
            .rev()
            .find_map(|st| st.acc_with_reg)
            .unwrap_or(0.0);
        rows.push(SweepRow {
            strength: s,
            final_flops: last.flops,
            with_reg_accuracy,
            collapsed: last.depth == 0 || outcome.history.terminal.is_some(),
        });
    }
    Ok(rows)
}
