//! Search-loop structure, best-architecture selection, removal statistics
//! and run determinism at smoke scale.

mod common;

use common::{dir_contents, flops_recount};
use resbuilder::config::RunConfig;
use resbuilder::data::synthetic_blobs;
use resbuilder::rng::rng_from;
use resbuilder::search::{
    regularization_sweep, removal_position_stats, run_resbuilder, select_best, InitialArch,
    RunHistory, StepRecord,
};
use resbuilder::serialize::arch_from_json;
use resbuilder::train::{NoRegCadence, TrainConfig};

fn smoke_config() -> TrainConfig {
    TrainConfig {
        budget: 3_000_000,
        inserts_per_routine: 2,
        n_routines: 2,
        epochs_per_phase: 1,
        batch_size: 16,
        augment: false,
        rng_seed: 7,
        noreg_cadence: NoRegCadence::AfterMorph,
        save_weights: true,
        ..Default::default()
    }
}

#[test]
fn loop_shape_and_budget_postconditions() {
    let data = synthetic_blobs(4, 16, 12, &mut rng_from(71, "data", 0));
    let config = smoke_config();
    let outcome = run_resbuilder(InitialArch::Minimal, &data, &config, None).unwrap();
    let h = &outcome.history;
    assert!(h.terminal.is_none(), "unexpected terminal: {:?}", h.terminal);
    assert_eq!(h.count_events("insert"), config.n_routines * config.inserts_per_routine);
    assert_eq!(h.count_events("morph"), config.n_routines);
    assert_eq!(h.count_events("init"), 1);
    assert_eq!(h.morphs.len(), config.n_routines);
    for m in &h.morphs {
        assert!(m.flops_after <= config.budget, "morph left {} > budget", m.flops_after);
    }
    // Every snapshot deserializes, satisfies the structural invariants and
    // carries a FLOP figure matching the independent recount.
    for s in &h.steps {
        let arch = arch_from_json(&s.arch_json, "<history>").unwrap();
        arch.validate().unwrap();
        assert_eq!(s.flops, flops_recount(&arch));
        assert_eq!(s.depth, arch.block_count());
    }
    // Step indices strictly increase.
    for pair in h.steps.windows(2) {
        assert!(pair[1].step > pair[0].step);
    }
}

#[test]
fn select_best_agrees_with_exhaustive_scan_and_tie_rules() {
    let mk = |step: usize, flops: u64, ri: Option<f64>, wi: Option<f64>| StepRecord {
        step,
        event: "morph".into(),
        detail: String::new(),
        flops,
        depth: 0,
        max_channels_stage0: 0,
        acc_with_reg: None,
        acc_noreg_ri: ri,
        acc_noreg_wi: wi,
        arch_json: String::new(),
    };
    // Single record.
    let mut h = RunHistory { steps: vec![mk(0, 10, Some(50.0), None)], ..Default::default() };
    assert_eq!(select_best(&h).unwrap().0, 0);
    // Equal accuracy, different cost: cheaper wins.
    h.steps = vec![mk(0, 100, Some(80.0), None), mk(1, 50, Some(70.0), Some(80.0))];
    assert_eq!(select_best(&h).unwrap().0, 1);
    // Full tie: earlier step wins.
    h.steps = vec![mk(0, 50, Some(80.0), None), mk(1, 50, Some(80.0), None)];
    assert_eq!(select_best(&h).unwrap().0, 0);
    // Records without accuracies are skipped.
    h.steps = vec![mk(0, 1, None, None), mk(1, 99, Some(10.0), None)];
    assert_eq!(select_best(&h).unwrap().0, 1);
    // Exhaustive scan agreement on a seeded random table.
    use rand::Rng;
    let mut rng = rng_from(72, "table", 0);
    let steps: Vec<StepRecord> = (0..40)
        .map(|i| {
            mk(
                i,
                rng.gen_range(1..1000),
                rng.gen_bool(0.8).then(|| f64::from(rng.gen_range(0..1000)) / 10.0),
                rng.gen_bool(0.8).then(|| f64::from(rng.gen_range(0..1000)) / 10.0),
            )
        })
        .collect();
    let h = RunHistory { steps, ..Default::default() };
    let (got, _) = select_best(&h).unwrap();
    let mut best: Option<(f64, u64, usize)> = None;
    for s in &h.steps {
        if let Some(acc) = h.best_noreg(s) {
            let cand = (acc, s.flops, s.step);
            best = Some(match best {
                None => cand,
                Some(b) => {
                    if cand.0 > b.0
                        || (cand.0 == b.0 && cand.1 < b.1)
                        || (cand.0 == b.0 && cand.1 == b.1 && cand.2 < b.2)
                    {
                        cand
                    } else {
                        b
                    }
                }
            });
        }
    }
    assert_eq!(got, best.unwrap().2);
    // Empty history is an error.
    assert!(select_best(&RunHistory::default()).is_err());
}

#[test]
fn removal_stats_match_recount() {
    let data = synthetic_blobs(4, 16, 12, &mut rng_from(73, "data", 0));
    // A deletion threshold far above the kernel mass floor forces removals.
    let config = TrainConfig { tau_lasso: 50.0, ..smoke_config() };
    let outcome = run_resbuilder(InitialArch::Minimal, &data, &config, None).unwrap();
    let h = &outcome.history;
    assert!(!h.removals.is_empty(), "expected forced removals");
    let stats = removal_position_stats(h);
    assert_eq!(stats.positions.len(), h.removals.len());
    let mut expected: Vec<f64> = h.removals.iter().map(|r| r.relative_position).collect();
    expected.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(stats.positions, expected);
    assert!(stats.positions.iter().all(|p| (0.0..=1.0).contains(p)));
    assert!(stats.q1 <= stats.median && stats.median <= stats.q3);
    // Empty history gives an empty distribution.
    let empty = removal_position_stats(&RunHistory::default());
    assert!(empty.positions.is_empty());
}

#[test]
fn single_removal_of_block_two_of_four_is_position_half() {
    use resbuilder::arch::{remove_blocks, Architecture, ParamStore, ResBlock};
    let mut arch = Architecture::new_minimal((12, 12, 1), 4).unwrap();
    for _ in 0..4 {
        let id = arch.fresh_block_id();
        arch.stages[0].blocks.push(ResBlock {
            id,
            c_mid: 16,
            c_out: 16,
            projection: false,
            birth_step: 0,
        });
    }
    let mut params = ParamStore::init(&arch, &mut rng_from(74, "init", 0));
    let second = arch.stages[0].blocks[1].id;
    let infos = remove_blocks(&mut arch, &mut params, &[second]).unwrap();
    assert_eq!(infos.len(), 1);
    assert_eq!(infos[0].relative_position, 0.5);
}

#[test]
fn full_run_determinism_in_memory_and_on_disk() {
    let data = synthetic_blobs(3, 12, 12, &mut rng_from(75, "data", 0));
    let config = smoke_config();
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let a = run_resbuilder(InitialArch::Minimal, &data, &config, Some(dir_a.path())).unwrap();
    let b = run_resbuilder(InitialArch::Minimal, &data, &config, Some(dir_b.path())).unwrap();
    assert_eq!(a.history.steps.len(), b.history.steps.len());
    for (x, y) in a.history.steps.iter().zip(&b.history.steps) {
        assert_eq!(x.arch_json, y.arch_json);
        assert_eq!(x.acc_with_reg, y.acc_with_reg);
        assert_eq!(x.acc_noreg_ri, y.acc_noreg_ri);
        assert_eq!(x.acc_noreg_wi, y.acc_noreg_wi);
        assert_eq!(x.flops, y.flops);
    }
    assert!(a.final_params == b.final_params);
    let ca = dir_contents(dir_a.path());
    let cb = dir_contents(dir_b.path());
    assert_eq!(ca.len(), cb.len());
    for ((pa, ba), (pb, bb)) in ca.iter().zip(&cb) {
        assert_eq!(pa, pb);
        assert_eq!(ba, bb, "file {pa} differs between runs");
    }
}

#[test]
fn warm_start_noreg_wi_at_epoch_zero_matches_checkpoint() {
    use resbuilder::arch::{Architecture, ParamStore};
    use resbuilder::train::{evaluate_accuracy, train_phase, TrainingVariant};
    let data = synthetic_blobs(4, 16, 12, &mut rng_from(76, "data", 0));
    let arch = Architecture::new_minimal((12, 12, 1), 4).unwrap();
    let mut checkpoint = ParamStore::init(&arch, &mut rng_from(76, "init", 0));
    let config = TrainConfig { batch_size: 16, augment: false, rng_seed: 76, ..Default::default() };
    train_phase(&arch, &mut checkpoint, TrainingVariant::WithReg, &data, &config, 1, 2).unwrap();
    let checkpoint_acc =
        evaluate_accuracy(&arch, &checkpoint, &data.test_images, &data.test_labels, 16).unwrap();
    let mut warm = checkpoint.clone();
    let m = train_phase(&arch, &mut warm, TrainingVariant::NoRegWi, &data, &config, 2, 0).unwrap();
    assert_eq!(m.test_accuracy, checkpoint_acc);
    assert!(warm == checkpoint);
}

#[test]
fn sweep_zero_strength_has_maximal_flops_and_two_rows() {
    let data = synthetic_blobs(3, 12, 12, &mut rng_from(77, "data", 0));
    let config = TrainConfig {
        inserts_per_routine: 1,
        n_routines: 1,
        epochs_per_phase: 1,
        batch_size: 16,
        augment: false,
        rng_seed: 77,
        budget: 1_000_000_000_000,
        noreg_cadence: NoRegCadence::AfterMorph,
        save_weights: false,
        ..Default::default()
    };
    let rows =
        regularization_sweep(&[0.0, 1e-3], InitialArch::Minimal, &data, &config, None).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].final_flops >= rows[1].final_flops, "rows {rows:?}");
    // Fewer than two strengths is a usage error.
    assert!(regularization_sweep(&[0.0], InitialArch::Minimal, &data, &config, None).is_err());
}

#[test]
fn infeasible_budget_terminates_gracefully_with_partial_history() {
    let data = synthetic_blobs(3, 12, 12, &mut rng_from(78, "data", 0));
    // Budget below even the stem+head cost: the first morph routine cannot
    // satisfy it.
    let config = TrainConfig { budget: 1000, ..smoke_config() };
    let outcome = run_resbuilder(InitialArch::Minimal, &data, &config, None).unwrap();
    let h = &outcome.history;
    assert!(h.terminal.is_some());
    assert_eq!(h.steps.last().unwrap().event, "terminal");
    assert!(h.count_events("insert") >= 1);
}

#[test]
fn config_round_trip_defaults_match_spec_values() {
    let cfg = RunConfig::default();
    let t = &cfg.train;
    assert_eq!(t.lambda_morph, 1e-7);
    assert_eq!(t.lambda_lasso, 1e-8);
    assert_eq!(t.lambda_l2, 1e-5);
    assert_eq!(t.tau_lasso, 1e-3);
    assert_eq!(t.budget, 100_000_000);
    assert_eq!(t.inserts_per_routine, 4);
    assert_eq!(t.n_routines, 7);
    assert_eq!(t.theta_init, 1e-2);
    let parsed = RunConfig::parse(&cfg.canonical(), "<canon>").unwrap();
    assert_eq!(parsed.hash(), cfg.hash());
}
