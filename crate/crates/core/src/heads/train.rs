use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{bce_loss_grad, dot, ce_loss_grad, HeadParams, ScoreTensor, SegModel, DEFAULT_INIT_STD};
use crate::labelaug::{augment_labels, AugmentConfig, PrevModelOutput};
use crate::memory::ExemplarMemory;
use crate::schedule::ClassId;
use crate::seed;
use crate::synth::{LabelRaster, SaliencyMask, TaskSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    SigmoidBce,
    SoftmaxCe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    /// Copy of the previous unknown-class head.
    #[default]
    WeightTransfer,
    Random,
    /// Copy of the previous background head.
    FromCb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub n_epochs: usize,
    /// Images per SGD step; half come from memory when replay is active.
    pub batch_size: usize,
    pub loss_kind: LossKind,
    pub freeze: bool,
    pub head_init: HeadInit,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            momentum: 0.9,
            n_epochs: 5,
            batch_size: 8,
            loss_kind: LossKind::SigmoidBce,
            freeze: true,
            head_init: HeadInit::WeightTransfer,
            init_std: DEFAULT_INIT_STD,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config("learning_rate must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return Err(Error::config("init_std must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub task: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: Vec<EpochLog>,
    pub steps: usize,
    /// Pseudo-labeled pixels in the task data targets.
    pub pseudo_labeled_pixels: usize,
    pub unknown_pixels: usize,
}

/// Open task `t = model.task_index + 1`: add heads for `new_classes` and set
/// freeze flags. Background and unknown heads keep their values.
pub fn begin_task(
    model: &SegModel,
    new_classes: &BTreeSet<ClassId>,
    cfg: &TrainConfig,
) -> Result<SegModel> {
    cfg.validate()?;
    if new_classes.is_empty() {
        return Err(Error::precondition("a task needs at least one new class"));
    }
    let t = model.task_index + 1;
    let mut next = model.clone();
    for (&c, head) in next.heads.iter_mut() {
        head.frozen = cfg.freeze && t >= 2 && c.is_foreground();
    }
    let dim = next.feature_dim();
    for &c in new_classes {
        if !c.is_foreground() {
            return Err(Error::precondition(format!("{c} is not a foreground class")));
        }
        if next.heads.contains_key(&c) {
            return Err(Error::precondition(format!("class {c} already has a head")));
        }
        let init = if t == 1 {
            HeadInit::Random
        } else {
            cfg.head_init
        };
        let mut head = match init {
            HeadInit::WeightTransfer => model.heads[&ClassId::UNKNOWN].clone(),
            HeadInit::FromCb => model.heads[&ClassId::BACKGROUND].clone(),
            HeadInit::Random => HeadParams::gaussian(
                dim,
                cfg.init_std,
                cfg.seed,
                &[seed::tag::HEAD_INIT, t as u64, c.0 as u64],
            ),
        };
        head.frozen = false;
        next.heads.insert(c, head);
    }
    next.task_index = t;
    next.current_classes = new_classes.clone();
    Ok(next)
}

struct Prepared {
    /// Row-major `N × D` features widened once for the inner loops.
    features: Vec<f64>,
    height: usize,
    width: usize,
    target: LabelRaster,
}

/// Augmented targets for one group of samples.
fn prepare(
    model: &SegModel,
    prev: Option<&SegModel>,
    items: Vec<(&crate::synth::Image, &LabelRaster, &SaliencyMask)>,
    aug: &AugmentConfig,
) -> Result<Vec<Prepared>> {
    let current = model.current_classes().clone();
    let past = model.past_classes();
    items
        .into_par_iter()
        .map(|(image, labels, saliency)| {
            let features = model.features(image)?;
            let prev_out = match prev {
                Some(p) => {
                    let pf = if p.extractor == model.extractor {
                        p.forward(&features)?
                    } else {
                        p.forward(&p.features(image)?)?
                    };
                    Some(PrevModelOutput::from_scores(&pf, &past)?)
                }
                None => None,
            };
            let target =
                augment_labels(labels, saliency, prev_out.as_ref(), aug, &current, &past)?;
            Ok(Prepared {
                features: features.data.iter().map(|&v| v as f64).collect(),
                height: features.height,
                width: features.width,
                target,
            })
        })
        .collect()
}

/// Per-head accumulated parameter gradient.
#[derive(Clone)]
struct HeadGrad {
    weight: Vec<f64>,
    bias: f64,
}

fn item_gradient(
    model: &SegModel,
    trainable: &[ClassId],
    item: &Prepared,
    loss_kind: LossKind,
) -> Result<(f64, Vec<HeadGrad>)> {
    let dim = model.feature_dim();
    let heads: Vec<&HeadParams> = model.heads.values().collect();
    let k = heads.len();
    let n = item.height * item.width;
    let mut data = vec![0.0; n * k];
    for (f, out) in item.features.chunks_exact(dim).zip(data.chunks_exact_mut(k)) {
        for (o, h) in out.iter_mut().zip(&heads) {
            *o = h.bias + dot(&h.weight, f);
        }
    }
    let scores = ScoreTensor {
        height: item.height,
        width: item.width,
        classes: model.classes(),
        data,
    };
    let lg = match loss_kind {
        LossKind::SigmoidBce => bce_loss_grad(&scores, &item.target)?,
        LossKind::SoftmaxCe => ce_loss_grad(&scores, &item.target)?,
    };
    let cols: Vec<usize> = trainable
        .iter()
        .map(|&c| scores.class_index(c).expect("trainable class has a head"))
        .collect();
    let mut grads = vec![
        HeadGrad {
            weight: vec![0.0; dim],
            bias: 0.0,
        };
        trainable.len()
    ];
    for (f, g) in item.features.chunks_exact(dim).zip(lg.grad.data.chunks_exact(k)) {
        for (hg, &col) in grads.iter_mut().zip(&cols) {
            let gi = g[col];
            hg.bias += gi;
            for (w, &x) in hg.weight.iter_mut().zip(f) {
                *w += gi * x;
            }
        }
    }
    Ok((lg.loss, grads))
}

/// Train the heads of `model` on task data (plus memory replay when given).
///
/// Targets are augmented once per sample before the epoch loop; the previous
/// model is fixed so this matches augmenting every drawn batch. Gradients reach
/// every head through the loss, but only unfrozen heads are updated.
pub fn train_task(
    model: &SegModel,
    task_data: &[TaskSample],
    memory: Option<&ExemplarMemory>,
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    prev_model: Option<&SegModel>,
) -> Result<(SegModel, TrainSummary)> {
    cfg.validate()?;
    aug.validate()?;
    let t = model.task_index;
    if t == 0 {
        return Err(Error::precondition("call begin_task before train_task"));
    }
    match (t >= 2, prev_model.is_some()) {
        (true, false) => {
            return Err(Error::precondition(
                "incremental tasks need the previous model",
            ))
        }
        (false, true) => {
            return Err(Error::precondition(
                "the first task has no previous model",
            ))
        }
        _ => {}
    }
    if task_data.is_empty() {
        return Err(Error::precondition("task dataset is empty"));
    }
    let replay = match memory {
        Some(m) if t >= 2 => {
            if m.is_empty() {
                return Err(Error::precondition(format!(
                    "memory is empty at task {t}; it must be updated after task {}",
                    t - 1
                )));
            }
            if !cfg.batch_size.is_multiple_of(2) || cfg.batch_size < 2 {
                return Err(Error::config(
                    "batch_size must be even when memory replay is active",
                ));
            }
            Some(m)
        }
        _ => None,
    };

    let data = prepare(
        model,
        prev_model,
        task_data
            .iter()
            .map(|s| (&s.scene.image, &s.labels, &s.scene.saliency))
            .collect(),
        aug,
    )?;
    let mem_items = match replay {
        Some(m) => prepare(
            model,
            prev_model,
            m.entries()
                .iter()
                .map(|e| (&e.scene.image, &e.labels, &e.scene.saliency))
                .collect(),
            aug,
        )?,
        None => Vec::new(),
    };

    let past = model.past_classes();
    let mut summary = TrainSummary {
        pseudo_labeled_pixels: data
            .iter()
            .flat_map(|p| &p.target.ids)
            .filter(|c| past.contains(c))
            .count(),
        unknown_pixels: data
            .iter()
            .flat_map(|p| &p.target.ids)
            .filter(|c| **c == ClassId::UNKNOWN)
            .count(),
        ..TrainSummary::default()
    };

    let mut model = model.clone();
    let trainable: Vec<ClassId> = model
        .heads
        .iter()
        .filter(|(_, h)| !h.frozen)
        .map(|(&c, _)| c)
        .collect();
    let dim = model.feature_dim();
    let mut velocity: BTreeMap<ClassId, HeadGrad> = trainable
        .iter()
        .map(|&c| {
            (
                c,
                HeadGrad {
                    weight: vec![0.0; dim],
                    bias: 0.0,
                },
            )
        })
        .collect();

    let half = if replay.is_some() {
        cfg.batch_size / 2
    } else {
        cfg.batch_size
    };
    let mut step: u64 = 0;
    for epoch in 0..cfg.n_epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut seed::rng(
            cfg.seed,
            &[seed::tag::SHUFFLE, t as u64, epoch as u64],
        ));
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(half) {
            let mut batch: Vec<&Prepared> = chunk.iter().map(|&i| &data[i]).collect();
            if let Some(m) = replay {
                let mem_seed = seed::derive(cfg.seed, &[t as u64]);
                for j in m.sample_indices(chunk.len(), mem_seed, step)? {
                    batch.push(&mem_items[j]);
                }
            }
            let per_item: Vec<(f64, Vec<HeadGrad>)> = batch
                .par_iter()
                .map(|item| item_gradient(&model, &trainable, item, cfg.loss_kind))
                .collect::<Result<_>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut loss = 0.0;
            let mut total = vec![
                HeadGrad {
                    weight: vec![0.0; dim],
                    bias: 0.0,
                };
                trainable.len()
            ];
            for (l, grads) in &per_item {
                loss += l;
                for (acc, g) in total.iter_mut().zip(grads) {
                    acc.bias += g.bias;
                    acc.weight.iter_mut().zip(&g.weight).for_each(|(a, b)| *a += b);
                }
            }
            for (c, g) in trainable.iter().zip(&total) {
                let v = velocity.get_mut(c).expect("velocity per trainable head");
                let head = model.head_mut(*c)?;
                v.bias = cfg.momentum * v.bias + g.bias * scale;
                head.bias -= cfg.learning_rate * v.bias;
                for ((vw, gw), w) in v.weight.iter_mut().zip(&g.weight).zip(head.weight.iter_mut()) {
                    *vw = cfg.momentum * *vw + gw * scale;
                    *w -= cfg.learning_rate * *vw;
                }
            }
            epoch_loss += loss * scale;
            batches += 1;
            step += 1;
        }
        summary.epochs.push(EpochLog {
            task: t,
            epoch: epoch + 1,
            loss: epoch_loss / batches.max(1) as f64,
            lr: cfg.learning_rate,
        });
    }
    summary.steps = step as usize;
    Ok((model, summary))
}
