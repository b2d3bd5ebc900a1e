//! Experiment drivers: training loops, metrics, checkpoints and plot data.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use warpgrad_core::autodiff::ParamStore;
use warpgrad_core::network::{build_network, ParameterPartition};
use warpgrad_core::tasks::{split_rng, stream_id, RngState, SUBTASKS};
use warpgrad_core::train::{MetaStepReport, OnlineTrainer, OnlineTrainerState, TaskSource};

use crate::config::{ContinualConfig, ExperimentConfig, FewshotConfig, Protocol, Synth2dConfig};
use crate::error::{io_err, HarnessError, Result};
use crate::experiments::continual::{self, ContinualSource, LossBreakdown};
use crate::experiments::fewshot::{self, FewshotSource};
use crate::experiments::gradcheck::{run_gradcheck, CheckReport, GradcheckConfig};
use crate::experiments::synth2d::{self, SurfaceSource, Synth2dEvaluation, THETA};
use crate::io::{num, Checkpoint, CsvSink};

pub const SYNTH2D: &str = "synth2d";
pub const CONTINUAL: &str = "continual-sine";
pub const FEWSHOT: &str = "fewshot-sine";

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

pub const METRICS_HEADER: [&str; 7] = [
    "meta_step",
    "task_id",
    "subtask_id",
    "adapt_step",
    "loss_current",
    "loss_meta",
    "wall_ms",
];

pub const FEWSHOT_METRICS_HEADER: [&str; 8] = [
    "meta_step",
    "stream",
    "task_id",
    "subtask_id",
    "adapt_step",
    "loss_current",
    "loss_meta",
    "wall_ms",
];

/// Labels of the two few-shot metric streams.
pub const WARP_MAML: &str = "warp_maml";
pub const MAML: &str = "maml";

/// Where a run writes and what it resumes from.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    /// Print progress lines to stderr.
    pub verbose: bool,
}

impl RunOptions {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self {
            out: out.into(),
            resume: None,
            verbose: false,
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

struct Clock {
    start: Instant,
    enabled: bool,
}

impl Clock {
    fn new(enabled: bool) -> Self {
        Self {
            start: Instant::now(),
            enabled,
        }
    }

    fn ms(&self) -> String {
        if self.enabled {
            self.start.elapsed().as_millis().to_string()
        } else {
            "0".into()
        }
    }
}

/// Lines describing every setting that differs from the reference protocol.
pub fn deviation_lines<P: Protocol>(experiment: &str, config: &ExperimentConfig<P>) -> Vec<String> {
    config
        .deviations()
        .into_iter()
        .map(|(name, reference, used)| format!("{experiment}: {name} = {used} (reference protocol: {reference})"))
        .collect()
}

fn prepare<P: Protocol>(experiment: &str, config: &ExperimentConfig<P>, opts: &RunOptions) -> Result<()> {
    config.validate()?;
    std::fs::create_dir_all(&opts.out).map_err(io_err(&opts.out))?;
    for line in deviation_lines(experiment, config) {
        println!("{line}");
    }
    let path = opts.path("config.json");
    let text = serde_json::to_string_pretty(config).map_err(|source| HarnessError::Json {
        path: path.clone(),
        source,
    })?;
    std::fs::write(&path, text).map_err(io_err(&path))
}

/// Task streams the next meta-step draws from, one per task.
fn next_streams(seed: u64, purpose: u8, meta_step: usize, meta_batch: usize) -> Vec<RngState> {
    (0..meta_batch)
        .map(|task| RngState::capture(seed, &split_rng(seed, stream_id(purpose, meta_step as u64, task as u64))))
        .collect()
}

/// Opens the metrics file fresh, or for a resumed run keeps only rows of earlier meta-steps.
fn open_rows(path: &Path, header: &[&str], resume_at: Option<usize>, keep: impl Fn(usize, usize) -> bool) -> Result<CsvSink> {
    match resume_at {
        Some(step) => CsvSink::resume(path, header, |row_step| keep(row_step, step)),
        None => CsvSink::create(path, header),
    }
}

fn task_rows(
    sink: &mut CsvSink,
    prefix: &[&str],
    report: &MetaStepReport,
    subtask: impl Fn(usize) -> i64,
    clock: &Clock,
) -> Result<()> {
    let wall = clock.ms();
    for t in &report.tasks {
        for (k, (lt, lm)) in t.task_losses.iter().zip(&t.meta_losses).enumerate() {
            let mut row = vec![report.meta_step.to_string()];
            row.extend(prefix.iter().map(|s| s.to_string()));
            row.extend([
                t.task.to_string(),
                subtask(k).to_string(),
                k.to_string(),
                num(*lt),
                num(*lm),
                wall.clone(),
            ]);
            sink.row(&row)?;
        }
    }
    Ok(())
}

fn load_state<S: Serialize + serde::de::DeserializeOwned>(
    opts: &RunOptions,
    experiment: &str,
    digest: &str,
) -> Result<Option<Checkpoint<S>>> {
    opts.resume
        .as_deref()
        .map(|p| Checkpoint::load(p, experiment, digest))
        .transpose()
}

/// Shared loop of the single-trainer experiments.
///
/// On a failed step the last good state is checkpointed before the error is returned.
fn drive<S: TaskSource>(
    experiment: &str,
    purpose: u8,
    digest: &str,
    checkpoint_every: usize,
    metrics_every: usize,
    trainer: &mut OnlineTrainer,
    source: &S,
    opts: &RunOptions,
    metrics: &mut CsvSink,
    clock: &Clock,
    subtask: impl Fn(usize) -> i64,
    mut after_step: impl FnMut(&OnlineTrainer) -> Result<()>,
) -> Result<()> {
    let save = |trainer: &OnlineTrainer| {
        let step = trainer.state.meta_step;
        Checkpoint {
            version: crate::io::CHECKPOINT_VERSION,
            experiment: experiment.to_string(),
            config_digest: digest.to_string(),
            meta_step: step,
            rng: next_streams(trainer.config.seed, purpose, step, trainer.config.meta_batch),
            state: trainer.state.clone(),
        }
        .save(&opts.path(CHECKPOINT_FILE))
    };
    while trainer.state.meta_step < trainer.config.meta_steps {
        let report = match trainer.step(source) {
            Ok(r) => r,
            Err(e) => {
                metrics.flush()?;
                save(trainer)?;
                return Err(e.into());
            }
        };
        if report.meta_step % metrics_every == 0 {
            task_rows(metrics, &[], &report, &subtask, clock)?;
        }
        if opts.verbose && report.meta_step % metrics_every == 0 {
            eprintln!(
                "{experiment} step {} task loss {:.4e} meta loss {:.4e}",
                report.meta_step,
                report.mean_task_loss(),
                report.mean_meta_loss()
            );
        }
        after_step(trainer)?;
        if checkpoint_every > 0 && trainer.state.meta_step % checkpoint_every == 0 {
            metrics.flush()?;
            save(trainer)?;
        }
    }
    metrics.flush()?;
    save(trainer)
}

/// Result of a 2-D synthetic run.
#[derive(Clone, Debug)]
pub struct Synth2dOutcome {
    pub params: ParamStore,
    pub evaluation: Synth2dEvaluation,
}

/// Meta-trains the explicit 2-D warp and compares warped against plain descent.
///
/// Writes `metrics.csv`, `trajectories.csv`, `summary.csv` and `checkpoint.json`.
pub fn run_synth2d(config: &Synth2dConfig, opts: &RunOptions) -> Result<Synth2dOutcome> {
    prepare(SYNTH2D, config, opts)?;
    let digest = config.digest();
    let train = &config.train;
    let warp = config.protocol.warp(train.seed)?;
    let partition = ParameterPartition {
        task_ids: vec![THETA.to_string()],
        warp_ids: warp.network().partition().warp_ids.clone(),
    };
    let resumed = load_state::<OnlineTrainerState>(opts, SYNTH2D, &digest)?;
    let resume_at = resumed.as_ref().map(|c| c.meta_step);
    let mut trainer = match resumed {
        Some(ck) => OnlineTrainer::from_state(train.clone(), partition, ck.state)?,
        None => OnlineTrainer::new(train.clone(), synth2d::initial_store(&warp)?, partition)?,
    };
    let source = SurfaceSource {
        warp: &warp,
        seed: train.seed,
    };
    let clock = Clock::new(config.wall_clock);
    let mut metrics = open_rows(&opts.path(METRICS_FILE), &METRICS_HEADER, resume_at, |r, s| r < s)?;
    drive(
        SYNTH2D,
        synth2d::SURFACE_STREAM,
        &digest,
        config.checkpoint_every,
        config.metrics_every,
        &mut trainer,
        &source,
        opts,
        &mut metrics,
        &clock,
        |_| -1,
        |_| Ok(()),
    )?;

    let evaluation = synth2d::evaluate(trainer.params(), &config.protocol, train.alpha, train.k, train.seed)?;
    if config.emit_plot_data {
        let mut traj = CsvSink::create(
            &opts.path("trajectories.csv"),
            &["surface", "init", "step", "loss_plain", "loss_warped"],
        )?;
        for t in &evaluation.trajectories {
            for (k, (p, w)) in t.plain.iter().zip(&t.warped).enumerate() {
                traj.row(&[t.surface.to_string(), t.init.to_string(), k.to_string(), num(*p), num(*w)])?;
            }
        }
        traj.flush()?;
    }
    let mut summary = CsvSink::create(
        &opts.path("summary.csv"),
        &["surface", "final_plain", "final_warped", "warped_lower"],
    )?;
    for (s, c) in evaluation.surfaces.iter().enumerate() {
        summary.row(&[
            s.to_string(),
            num(c.plain_final),
            num(c.warped_final),
            c.warped_wins().to_string(),
        ])?;
    }
    summary.flush()?;
    println!(
        "{SYNTH2D}: warped descent lower on {:.0}% of {} surfaces; mean final loss plain {:.4e}, warped {:.4e}",
        100.0 * evaluation.win_rate(),
        evaluation.surfaces.len(),
        evaluation.mean_plain(),
        evaluation.mean_warped()
    );
    Ok(Synth2dOutcome {
        params: trainer.params().clone(),
        evaluation,
    })
}

/// Result of a continual sine run.
#[derive(Clone, Debug)]
pub struct ContinualOutcome {
    pub params: ParamStore,
    pub in_order: LossBreakdown,
    pub shuffled: LossBreakdown,
}

/// Header of the loss-breakdown CSVs: the update index and one column per sub-task.
pub fn breakdown_header() -> Vec<String> {
    std::iter::once("step".to_string())
        .chain((1..=SUBTASKS).map(|t| format!("subtask_{t}")))
        .collect()
}

fn write_breakdown(path: &Path, b: &LossBreakdown) -> Result<()> {
    let header = breakdown_header();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut sink = CsvSink::create(path, &header)?;
    for (k, row) in b.rows.iter().enumerate() {
        let mut fields = vec![(k + 1).to_string()];
        fields.extend(row.iter().map(|v| num(*v)));
        sink.row(&fields)?;
    }
    sink.flush()
}

fn max_forgetting(b: &LossBreakdown) -> f64 {
    b.forgetting().iter().map(|(_, at, end)| end / at).fold(0.0, f64::max)
}

fn mean_block_end(b: &LossBreakdown) -> f64 {
    let v = b.block_end_losses();
    v.iter().map(|(_, l)| l).sum::<f64>() / v.len() as f64
}

/// Meta-trains the warps of the continual sine learner from a fixed
/// initialisation and evaluates the per-sub-task loss breakdown.
///
/// Writes `metrics.csv`, `loss_breakdown_in_order.csv`,
/// `loss_breakdown_shuffled.csv`, `forgetting.csv` and `checkpoint.json`.
pub fn run_continual(config: &ContinualConfig, opts: &RunOptions) -> Result<ContinualOutcome> {
    prepare(CONTINUAL, config, opts)?;
    let digest = config.digest();
    let train = &config.train;
    let protocol = &config.protocol;
    let (net, store) = build_network(&protocol.architecture(), train.seed)?;
    let resumed = load_state::<OnlineTrainerState>(opts, CONTINUAL, &digest)?;
    let resume_at = resumed.as_ref().map(|c| c.meta_step);
    let mut trainer = match resumed {
        Some(ck) => OnlineTrainer::from_state(train.clone(), net.partition().clone(), ck.state)?,
        None => OnlineTrainer::new(train.clone(), store, net.partition().clone())?,
    };
    let source = ContinualSource {
        net: &net,
        seed: train.seed,
        protocol: protocol.clone(),
        weighting: train.weighting,
    };
    let in_order: Vec<usize> = (1..=SUBTASKS).collect();
    let clock = Clock::new(config.wall_clock);
    let mut metrics = open_rows(&opts.path(METRICS_FILE), &METRICS_HEADER, resume_at, |r, s| r < s)?;
    let eval_header = ["completed_steps", "order", "mean_block_end_loss", "max_forgetting_ratio"];
    let mut progress = if protocol.eval_every > 0 {
        Some(open_rows(&opts.path("eval.csv"), &eval_header, resume_at, |r, s| r <= s)?)
    } else {
        None
    };
    let n = protocol.steps_per_subtask;
    drive(
        CONTINUAL,
        continual::TASK_STREAM,
        &digest,
        config.checkpoint_every,
        config.metrics_every,
        &mut trainer,
        &source,
        opts,
        &mut metrics,
        &clock,
        |k| (k / n + 1).min(SUBTASKS) as i64,
        |trainer| {
            let done = trainer.state.meta_step;
            if let Some(sink) = progress.as_mut() {
                if done % protocol.eval_every == 0 {
                    let b = continual::evaluate(&net, trainer.params(), train.alpha, train.seed, protocol, &in_order)?;
                    sink.row(&[done.to_string(), "in_order".into(), num(mean_block_end(&b)), num(max_forgetting(&b))])?;
                    sink.flush()?;
                }
            }
            Ok(())
        },
    )?;

    let eval = |order: &[usize]| continual::evaluate(&net, trainer.params(), train.alpha, train.seed, protocol, order);
    let in_order = eval(&in_order)?;
    let shuffled = eval(&protocol.shuffled_order)?;
    if config.emit_plot_data {
        write_breakdown(&opts.path("loss_breakdown_in_order.csv"), &in_order)?;
        write_breakdown(&opts.path("loss_breakdown_shuffled.csv"), &shuffled)?;
    }
    let mut forgetting = CsvSink::create(
        &opts.path("forgetting.csv"),
        &["order", "subtask", "block_end_loss", "final_loss", "ratio"],
    )?;
    for (label, b) in [("in_order", &in_order), ("shuffled", &shuffled)] {
        let finals: Vec<f64> = b.rows[b.rows.len() - 1].to_vec();
        for (t, end) in b.block_end_losses() {
            let last = finals[t - 1];
            forgetting.row(&[label.into(), t.to_string(), num(end), num(last), num(last / end)])?;
        }
        println!(
            "{CONTINUAL}: {label} mean block-end loss {:.4e}, worst forgetting ratio {:.2}",
            mean_block_end(b),
            max_forgetting(b)
        );
    }
    forgetting.flush()?;
    Ok(ContinualOutcome {
        params: trainer.params().clone(),
        in_order,
        shuffled,
    })
}

/// Checkpointed state of the few-shot run: both learners advance in lockstep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FewshotState {
    pub warped: OnlineTrainerState,
    pub baseline: OnlineTrainerState,
}

/// Mean post-adaptation test loss of both learners after `completed_steps` meta-steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FewshotEval {
    pub completed_steps: usize,
    pub warp_maml: f64,
    pub maml: f64,
}

#[derive(Clone, Debug)]
pub struct FewshotOutcome {
    pub evals: Vec<FewshotEval>,
}

/// Trains warped MAML and a plain MAML baseline on the same task stream.
///
/// Writes `metrics.csv` and `eval.csv`, each with a `stream` column, plus `checkpoint.json`.
pub fn run_fewshot(config: &FewshotConfig, opts: &RunOptions) -> Result<FewshotOutcome> {
    prepare(FEWSHOT, config, opts)?;
    let digest = config.digest();
    let train = &config.train;
    let protocol = &config.protocol;
    let [(wnet, wstore), (pnet, pstore)] = protocol.networks(train.seed)?;
    let resumed = load_state::<FewshotState>(opts, FEWSHOT, &digest)?;
    let resume_at = resumed.as_ref().map(|c| c.meta_step);
    let (mut warped, mut baseline) = match resumed {
        Some(ck) => (
            OnlineTrainer::from_state(train.clone(), wnet.partition().clone(), ck.state.warped)?,
            OnlineTrainer::from_state(train.clone(), pnet.partition().clone(), ck.state.baseline)?,
        ),
        None => (
            OnlineTrainer::new(train.clone(), wstore, wnet.partition().clone())?,
            OnlineTrainer::new(train.clone(), pstore, pnet.partition().clone())?,
        ),
    };
    let source = |net| FewshotSource {
        net,
        seed: train.seed,
        shots: protocol.shots,
        test_size: protocol.test_size,
    };
    let (wsource, psource) = (source(&wnet), source(&pnet));
    let clock = Clock::new(config.wall_clock);
    let mut metrics = open_rows(&opts.path(METRICS_FILE), &FEWSHOT_METRICS_HEADER, resume_at, |r, s| r < s)?;
    let mut eval_sink = open_rows(
        &opts.path("eval.csv"),
        &["completed_steps", "stream", "test_loss"],
        resume_at,
        |r, s| r <= s,
    )?;
    let mut evals = Vec::new();
    let mut evaluate = |w: &OnlineTrainer, p: &OnlineTrainer, sink: &mut CsvSink| -> Result<()> {
        let e = FewshotEval {
            completed_steps: w.state.meta_step,
            warp_maml: fewshot::evaluate(&wnet, w.params(), protocol, train.alpha, train.k, train.seed)?,
            maml: fewshot::evaluate(&pnet, p.params(), protocol, train.alpha, train.k, train.seed)?,
        };
        for (label, v) in [(WARP_MAML, e.warp_maml), (MAML, e.maml)] {
            sink.row(&[e.completed_steps.to_string(), label.into(), num(v)])?;
        }
        sink.flush()?;
        if opts.verbose {
            eprintln!(
                "{FEWSHOT} step {} test loss {WARP_MAML} {:.4e} {MAML} {:.4e}",
                e.completed_steps, e.warp_maml, e.maml
            );
        }
        evals.push(e);
        Ok(())
    };
    let save = |w: &OnlineTrainer, p: &OnlineTrainer| {
        let step = w.state.meta_step;
        Checkpoint {
            version: crate::io::CHECKPOINT_VERSION,
            experiment: FEWSHOT.to_string(),
            config_digest: digest.clone(),
            meta_step: step,
            rng: next_streams(train.seed, fewshot::TASK_STREAM, step, train.meta_batch),
            state: FewshotState {
                warped: w.state.clone(),
                baseline: p.state.clone(),
            },
        }
        .save(&opts.path(CHECKPOINT_FILE))
    };

    if resume_at.is_none() {
        evaluate(&warped, &baseline, &mut eval_sink)?;
    }
    while warped.state.meta_step < train.meta_steps {
        let reports = warped.step(&wsource).and_then(|w| Ok((w, baseline.step(&psource)?)));
        let (rw, rp) = match reports {
            Ok(r) => r,
            Err(e) => {
                // a failure in the baseline leaves the warped learner one step ahead
                if baseline.state.meta_step == warped.state.meta_step {
                    metrics.flush()?;
                    save(&warped, &baseline)?;
                }
                return Err(e.into());
            }
        };
        if rw.meta_step % config.metrics_every == 0 {
            task_rows(&mut metrics, &[WARP_MAML], &rw, |_| -1, &clock)?;
            task_rows(&mut metrics, &[MAML], &rp, |_| -1, &clock)?;
        }
        let done = warped.state.meta_step;
        if done % protocol.eval_every == 0 || done == train.meta_steps {
            evaluate(&warped, &baseline, &mut eval_sink)?;
        }
        if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 {
            metrics.flush()?;
            save(&warped, &baseline)?;
        }
    }
    metrics.flush()?;
    save(&warped, &baseline)?;
    if let Some(last) = evals.last() {
        println!(
            "{FEWSHOT}: test loss after {} meta-steps: {WARP_MAML} {:.4e}, {MAML} {:.4e}",
            last.completed_steps, last.warp_maml, last.maml
        );
    }
    Ok(FewshotOutcome { evals })
}

/// Runs the oracle suite, prints one line per check and writes `gradcheck.csv`.
///
/// Returns the reports; the caller decides the exit status.
pub fn run_gradcheck_suite(config: &GradcheckConfig, corrupt: bool, out: Option<&Path>) -> Result<Vec<CheckReport>> {
    config.validate()?;
    let reports = run_gradcheck(config, corrupt)?;
    for r in &reports {
        println!("{r}");
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut sink = CsvSink::create(
            &dir.join("gradcheck.csv"),
            &["check", "samples", "worst", "threshold", "passed"],
        )?;
        for r in &reports {
            sink.row(&[
                r.name.clone(),
                r.samples.to_string(),
                num(r.worst),
                r.threshold.clone(),
                r.passed.to_string(),
            ])?;
        }
        sink.flush()?;
    }
    Ok(reports)
}
