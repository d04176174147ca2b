use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{hex, init_extractor, FeatureTensor};
use crate::error::{Error, Result};
use crate::harness::config::ScenarioConfig;
use crate::heads::{
    begin_task, load_checkpoint, save_checkpoint, train_task, Checkpoint, EpochLog, SegModel,
};
use crate::memory::ExemplarMemory;
use crate::metrics::{step_report, ConfusionMatrix, MetricsReport, StepReport, REPORT_VERSION};
use crate::schedule::{ClassId, TaskSchedule};
use crate::seed;
use crate::synth::{build_eval_set, build_task_dataset, restrict_to_seen, Scene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryTrace {
    pub capacity: usize,
    pub size: usize,
    pub quota: usize,
    pub warning: Option<String>,
    /// Entries holding each seen class (zero counts included).
    pub holdings: BTreeMap<ClassId, usize>,
}

/// Per-step bookkeeping beside the metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    pub model_digest: String,
    /// Extractor plus past-foreground heads before and after training this step.
    pub past_digest_before: String,
    pub past_digest_after: String,
    pub pseudo_labeled_pixels: usize,
    pub unknown_pixels: usize,
    pub final_loss: f64,
    pub memory: Option<MemoryTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub report: MetricsReport,
    pub trace: Vec<StepTrace>,
    pub logs: Vec<EpochLog>,
    pub model: SegModel,
    pub memory: Option<ExemplarMemory>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Stop after this step (checkpoint still written).
    pub stop_after: Option<usize>,
    /// Continue from a checkpoint written by an earlier run of the same config.
    pub resume_from: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct RunState {
    config_digest: String,
    steps: Vec<StepReport>,
    trace: Vec<StepTrace>,
    logs: Vec<EpochLog>,
}

/// Digest of everything that affects results (the output directory does not).
pub fn config_digest(cfg: &ScenarioConfig) -> String {
    let mut c = cfg.clone();
    c.output_dir = None;
    hex(&Sha256::digest(c.to_json().as_bytes()))
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("step_{step:02}.ckpt"))
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunOutcome> {
    run_scenario_with(cfg, &RunOptions::default())
}

pub fn run_scenario_with(cfg: &ScenarioConfig, opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let schedule = cfg.schedule.build()?;
    let digest = config_digest(cfg);
    let last = opts
        .stop_after
        .unwrap_or(schedule.num_tasks())
        .min(schedule.num_tasks());

    let (mut model, mut memory, mut state) = match &opts.resume_from {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let st: RunState = serde_json::from_str(&ck.run_state)
                .map_err(|e| Error::corrupt(format!("run state: {e}")))?;
            if st.config_digest != digest || ck.schedule != schedule {
                return Err(Error::config(format!(
                    "checkpoint {} was written by a different configuration",
                    path.display()
                )));
            }
            (ck.model, ck.memory, st)
        }
        None => {
            let extractor = init_extractor(cfg.seeds.extractor, &cfg.extractor)?;
            let memory = cfg
                .uses_memory()
                .then(|| ExemplarMemory::new(cfg.memory.capacity));
            (
                SegModel::new(extractor, cfg.seeds.init),
                memory,
                RunState {
                    config_digest: digest,
                    steps: Vec::new(),
                    trace: Vec::new(),
                    logs: Vec::new(),
                },
            )
        }
    };

    let out_dir = cfg.output_dir.clone();
    if let Some(dir) = &out_dir {
        std::fs::create_dir_all(dir.join("checkpoints"))?;
        std::fs::write(dir.join("config.json"), cfg.to_json())?;
    }

    let eval = build_eval_set(&schedule, cfg.data.eval_size, cfg.seeds.eval, &cfg.data.geometry)?;
    let eval_features: Vec<FeatureTensor> = eval
        .par_iter()
        .map(|s| model.features(&s.image))
        .collect::<Result<_>>()?;

    let start = model.task_index() + 1;
    let mut timing = Vec::new();
    for t in start..=last {
        let clock = Instant::now();
        let (next_model, next_memory, report, trace, logs) =
            run_step(cfg, &schedule, t, &model, memory.as_ref(), &eval, &eval_features)
                .map_err(|e| e.at_step(t))?;
        model = next_model;
        memory = next_memory;
        state.steps.push(report);
        state.trace.push(trace);
        state.logs.extend(logs);
        timing.push((t, clock.elapsed().as_secs_f64()));
        if let Some(dir) = &out_dir {
            let ck = Checkpoint {
                schedule: schedule.clone(),
                model: model.clone(),
                memory: memory.clone(),
                run_state: serde_json::to_string(&state)?,
            };
            save_checkpoint(checkpoint_path(dir, t), &ck)?;
        }
    }

    let outcome = RunOutcome {
        report: MetricsReport {
            version: REPORT_VERSION,
            steps: state.steps,
        },
        trace: state.trace,
        logs: state.logs,
        model,
        memory,
    };
    if let Some(dir) = &out_dir {
        write_outputs(dir, &outcome, &timing)?;
    }
    Ok(outcome)
}

type StepOutput = (SegModel, Option<ExemplarMemory>, StepReport, StepTrace, Vec<EpochLog>);

fn run_step(
    cfg: &ScenarioConfig,
    schedule: &TaskSchedule,
    t: usize,
    prev: &SegModel,
    memory: Option<&ExemplarMemory>,
    eval: &[Scene],
    eval_features: &[FeatureTensor],
) -> Result<StepOutput> {
    let train_cfg = cfg.train_config(t);
    let mut data = build_task_dataset(
        schedule,
        t,
        cfg.data.scenes_for_task(t),
        cfg.seeds.data,
        cfg.protocol,
        &cfg.data.geometry,
    )?;
    let p = cfg.augment.saliency_corruption;
    if p > 0.0 {
        for (i, s) in data.iter_mut().enumerate() {
            s.scene.saliency = s
                .scene
                .saliency
                .corrupted(p, seed::derive(cfg.seeds.saliency, &[t as u64, i as u64]))?;
        }
    }

    let opened = begin_task(prev, schedule.task(t)?, &train_cfg)?;
    let past = opened.past_classes();
    let past_digest_before = prev.digest_of(&past);
    let prev_model = (t >= 2).then_some(prev);
    let (model, summary) = train_task(
        &opened,
        &data,
        memory,
        &train_cfg,
        &cfg.augment_config(),
        prev_model,
    )?;

    let (memory, memory_trace) = match memory {
        Some(m) => {
            let (next, rep) =
                m.update(cfg.memory.sampling, &data, schedule, t, cfg.seeds.memory)?;
            let holdings = schedule
                .seen_classes(t)?
                .into_iter()
                .map(|c| (c, next.holdings(c)))
                .collect();
            let trace = MemoryTrace {
                capacity: next.capacity(),
                size: rep.size,
                quota: rep.quota,
                warning: rep.warning,
                holdings,
            };
            (Some(next), Some(trace))
        }
        None => (None, None),
    };

    let cm = evaluate(&model, &schedule.seen_classes(t)?, eval, eval_features)?;
    let report = step_report(&cm, schedule, t)?;
    let trace = StepTrace {
        step: t,
        model_digest: model.digest(),
        past_digest_before,
        past_digest_after: model.digest_of(&past),
        pseudo_labeled_pixels: summary.pseudo_labeled_pixels,
        unknown_pixels: summary.unknown_pixels,
        final_loss: summary.epochs.last().map_or(f64::NAN, |e| e.loss),
        memory: memory_trace,
    };
    Ok((model, memory, report, trace, summary.epochs))
}

/// Confusion matrix over the evaluation scenes, ground truth restricted to `seen`.
pub fn evaluate(
    model: &SegModel,
    seen: &BTreeSet<ClassId>,
    eval: &[Scene],
    features: &[FeatureTensor],
) -> Result<ConfusionMatrix> {
    let empty = ConfusionMatrix::new(seen)?;
    let parts: Vec<ConfusionMatrix> = eval
        .par_iter()
        .zip(features)
        .map(|(scene, f)| {
            let gt = restrict_to_seen(&scene.full_labels, seen);
            empty.clone().accumulate(&model.predict_features(f)?, &gt)
        })
        .collect::<Result<_>>()?;
    let mut cm = empty;
    for p in &parts {
        cm.merge(p)?;
    }
    Ok(cm)
}

fn write_outputs(dir: &Path, outcome: &RunOutcome, timing: &[(usize, f64)]) -> Result<()> {
    outcome.report.write(dir)?;
    std::fs::write(
        dir.join("trace.json"),
        serde_json::to_string_pretty(&outcome.trace)? + "\n",
    )?;
    let mut log = std::fs::File::create(dir.join("train_log.jsonl"))?;
    for e in &outcome.logs {
        writeln!(log, "{}", serde_json::to_string(e)?)?;
    }
    // Wall-clock numbers stay out of every deterministic file.
    let mut tf = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join("timing.log"))?;
    for (t, secs) in timing {
        writeln!(tf, "step {t}: {secs:.3} s")?;
    }
    Ok(())
}
