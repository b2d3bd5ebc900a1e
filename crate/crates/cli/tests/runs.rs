use std::path::Path;
use std::process::Command;

use tempfile::TempDir;
use warpgrad_core::autodiff::ParamStore;
use warpgrad_core::train::OnlineTrainerState;
use warpgrad_harness::config::{ContinualConfig, FewshotConfig, Synth2dConfig};
use warpgrad_harness::io::{Checkpoint, CHECKPOINT_VERSION};
use warpgrad_harness::run::{
    self, RunOptions, CHECKPOINT_FILE, CONTINUAL, FEWSHOT_METRICS_HEADER, METRICS_FILE, METRICS_HEADER, SYNTH2D,
};
use warpgrad_harness::HarnessError;

fn synth(meta_steps: usize) -> Synth2dConfig {
    let mut c = Synth2dConfig::default();
    c.train.meta_steps = meta_steps;
    c.train.k = 8;
    c.train.meta_batch = 2;
    c.protocol.warp_hidden = vec![6];
    c.protocol.eval_surfaces = 3;
    c.protocol.eval_inits = 2;
    c
}

fn continual(meta_steps: usize) -> ContinualConfig {
    let mut c = ContinualConfig::default();
    c.train.meta_steps = meta_steps;
    c.train.k = 10;
    c.train.meta_batch = 2;
    c.protocol.steps_per_subtask = 2;
    c.protocol.width = 6;
    c.protocol.warp_hidden = 3;
    c.protocol.eval_tasks = 2;
    c.protocol.eval_points = 6;
    c.metrics_every = 1;
    c.emit_plot_data = true;
    c
}

fn fewshot(meta_steps: usize) -> FewshotConfig {
    let mut c = FewshotConfig::default();
    c.train.meta_steps = meta_steps;
    c.train.meta_batch = 2;
    c.train.k = 2;
    c.protocol.hidden = vec![8];
    c.protocol.eval_tasks = 3;
    c.protocol.eval_every = 2;
    c
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

fn max_diff(a: &ParamStore, b: &ParamStore) -> f64 {
    let ids: Vec<String> = a.ids().map(str::to_string).collect();
    let (x, y) = (a.flatten(&ids).unwrap(), b.flatten(&ids).unwrap());
    x.iter().zip(&y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

#[test]
fn metrics_headers_are_stable() {
    let dir = TempDir::new().unwrap();
    run::run_synth2d(&synth(1), &RunOptions::new(dir.path())).unwrap();
    let text = read(&dir.path().join(METRICS_FILE));
    assert_eq!(
        text.lines().next().unwrap(),
        "meta_step,task_id,subtask_id,adapt_step,loss_current,loss_meta,wall_ms"
    );
    assert_eq!(METRICS_HEADER.join(","), text.lines().next().unwrap());
    // one row per task and inner step
    assert_eq!(text.lines().count(), 1 + 2 * 8);
    assert_eq!(
        FEWSHOT_METRICS_HEADER.join(","),
        "meta_step,stream,task_id,subtask_id,adapt_step,loss_current,loss_meta,wall_ms"
    );
}

#[test]
fn repeated_runs_are_byte_identical() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    for dir in [&a, &b] {
        run::run_synth2d(&synth(3), &RunOptions::new(dir.path())).unwrap();
        run::run_continual(&continual(3), &RunOptions::new(dir.path().join("c"))).unwrap();
    }
    for file in [METRICS_FILE, "summary.csv", "c/metrics.csv", "c/forgetting.csv", "c/loss_breakdown_shuffled.csv"] {
        assert_eq!(read(&a.path().join(file)), read(&b.path().join(file)), "{file}");
    }
}

#[test]
fn resumed_synth2d_matches_an_uninterrupted_run() {
    let (whole, split) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let full = run::run_synth2d(&synth(4), &RunOptions::new(whole.path())).unwrap();
    run::run_synth2d(&synth(2), &RunOptions::new(split.path())).unwrap();
    let mut opts = RunOptions::new(split.path());
    opts.resume = Some(split.path().join(CHECKPOINT_FILE));
    let resumed = run::run_synth2d(&synth(4), &opts).unwrap();
    assert!(max_diff(&full.params, &resumed.params) <= 1e-12);
    assert_eq!(read(&whole.path().join(METRICS_FILE)), read(&split.path().join(METRICS_FILE)));
}

#[test]
fn resumed_continual_matches_an_uninterrupted_run() {
    let (whole, split) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let mut cfg = continual(4);
    cfg.protocol.eval_every = 1;
    let full = run::run_continual(&cfg, &RunOptions::new(whole.path())).unwrap();
    let mut first = cfg.clone();
    first.train.meta_steps = 3;
    run::run_continual(&first, &RunOptions::new(split.path())).unwrap();
    let mut opts = RunOptions::new(split.path());
    opts.resume = Some(split.path().join(CHECKPOINT_FILE));
    let resumed = run::run_continual(&cfg, &opts).unwrap();
    assert!(max_diff(&full.params, &resumed.params) <= 1e-12);
    for file in [METRICS_FILE, "eval.csv", "forgetting.csv"] {
        assert_eq!(read(&whole.path().join(file)), read(&split.path().join(file)), "{file}");
    }
}

#[test]
fn resumed_fewshot_matches_an_uninterrupted_run() {
    let (whole, split) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let full = run::run_fewshot(&fewshot(4), &RunOptions::new(whole.path())).unwrap();
    run::run_fewshot(&fewshot(2), &RunOptions::new(split.path())).unwrap();
    let mut opts = RunOptions::new(split.path());
    opts.resume = Some(split.path().join(CHECKPOINT_FILE));
    run::run_fewshot(&fewshot(4), &opts).unwrap();
    let last = full.evals.last().unwrap();
    assert_eq!(last.completed_steps, 4);
    for file in [METRICS_FILE, "eval.csv"] {
        assert_eq!(read(&whole.path().join(file)), read(&split.path().join(file)), "{file}");
    }
}

#[test]
fn checkpoints_round_trip_and_reject_mismatches() {
    let dir = TempDir::new().unwrap();
    let cfg = synth(1);
    run::run_synth2d(&cfg, &RunOptions::new(dir.path())).unwrap();
    let path = dir.path().join(CHECKPOINT_FILE);
    let ck: Checkpoint<OnlineTrainerState> = Checkpoint::load(&path, SYNTH2D, &cfg.digest()).unwrap();
    assert_eq!((ck.version, ck.meta_step), (CHECKPOINT_VERSION, 1));
    assert_eq!(ck.rng.len(), cfg.train.meta_batch);
    let copy = dir.path().join("copy.json");
    ck.save(&copy).unwrap();
    let again: Checkpoint<OnlineTrainerState> = Checkpoint::load(&copy, SYNTH2D, &cfg.digest()).unwrap();
    assert_eq!(again.state, ck.state);

    let mut other = cfg.clone();
    other.train.alpha = 0.2;
    let wrong_config = Checkpoint::<OnlineTrainerState>::load(&path, SYNTH2D, &other.digest());
    assert!(matches!(wrong_config, Err(HarnessError::CheckpointConfig { .. })));
    let wrong_experiment = Checkpoint::<OnlineTrainerState>::load(&path, CONTINUAL, &cfg.digest());
    assert!(matches!(wrong_experiment, Err(HarnessError::CheckpointConfig { .. })));

    let mut value: serde_json::Value = serde_json::from_str(&read(&path)).unwrap();
    value["version"] = serde_json::json!(CHECKPOINT_VERSION + 1);
    std::fs::write(&path, value.to_string()).unwrap();
    let wrong_version = Checkpoint::<OnlineTrainerState>::load(&path, SYNTH2D, &cfg.digest());
    assert!(matches!(wrong_version, Err(HarnessError::CheckpointVersion { found, .. }) if found == CHECKPOINT_VERSION + 1));
}

#[test]
fn configs_reject_unknown_keys_and_keep_defaults() {
    for text in [r#"{"bogus": 1}"#, r#"{"train": {"alpah": 0.1}}"#, r#"{"protocol": {"width": 8, "depth": 3}}"#] {
        assert!(ContinualConfig::from_json(text).is_err(), "{text}");
    }
    let partial = Synth2dConfig::from_json(r#"{"train": {"seed": 7}}"#).unwrap();
    let mut expected = Synth2dConfig::default();
    expected.train.seed = 7;
    assert_eq!(partial, expected);
    let sgd = ContinualConfig::from_json(r#"{"train": {"optimizer": {"type": "sgd"}}}"#).unwrap();
    assert_eq!(sgd.train.k, ContinualConfig::default().train.k);
}

#[test]
fn configs_and_digests_round_trip() {
    let cfg = continual(5);
    let back = ContinualConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.digest(), cfg.digest());
    let mut longer = cfg.clone();
    longer.train.meta_steps = 50;
    longer.train.threads = 2;
    assert_eq!(longer.digest(), cfg.digest());
    let mut seeded = cfg.clone();
    seeded.train.seed += 1;
    assert_ne!(seeded.digest(), cfg.digest());
}

#[test]
fn synth2d_without_meta_training_is_plain_descent() {
    let dir = TempDir::new().unwrap();
    let out = run::run_synth2d(&synth(0), &RunOptions::new(dir.path())).unwrap();
    for s in &out.evaluation.surfaces {
        assert_eq!(s.plain_final.to_bits(), s.warped_final.to_bits());
        assert!(!s.warped_wins());
    }
}

#[test]
fn fewshot_with_frozen_warps_and_no_prior_stays_flat() {
    let dir = TempDir::new().unwrap();
    let mut cfg = fewshot(4);
    cfg.train.lambda = 0.0;
    cfg.train.beta = 0.0;
    let out = run::run_fewshot(&cfg, &RunOptions::new(dir.path())).unwrap();
    assert_eq!(out.evals.len(), 3);
    let first = out.evals[0];
    for e in &out.evals {
        assert_eq!(e.warp_maml.to_bits(), first.warp_maml.to_bits());
        assert_eq!(e.maml.to_bits(), first.maml.to_bits());
    }
    // identity warps make the two learners coincide
    assert!((first.warp_maml - first.maml).abs() <= 1e-12 * (1.0 + first.maml));
}

#[test]
fn continual_outputs_cover_every_update() {
    let dir = TempDir::new().unwrap();
    let out = run::run_continual(&continual(1), &RunOptions::new(dir.path())).unwrap();
    assert_eq!(out.in_order.rows.len(), 10);
    assert_eq!(out.shuffled.order, vec![2, 4, 5, 3, 1]);
    let breakdown = read(&dir.path().join("loss_breakdown_in_order.csv"));
    assert_eq!(breakdown.lines().next().unwrap(), run::breakdown_header().join(","));
    assert_eq!(breakdown.lines().count(), 11);
    assert_eq!(read(&dir.path().join("forgetting.csv")).lines().count(), 1 + 2 * 5);
}

fn warpgrad(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_warpgrad")).args(args).output().unwrap()
}

#[test]
fn gradcheck_exit_status_reflects_failures() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().to_str().unwrap();
    let ok = warpgrad(&["gradcheck", "--out", out]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stdout));
    assert!(read(&dir.path().join("gradcheck.csv")).lines().skip(1).all(|l| l.ends_with(",true")));
    let bad = warpgrad(&["gradcheck", "--inject-fault"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}

#[test]
fn cli_rejects_bad_configs_with_status_one() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"train": {"k": 7}}"#).unwrap();
    let out = warpgrad(&["continual-sine", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("k must equal"));
}
