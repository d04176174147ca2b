//! Confusion matrices and IoU / mIoU with the background-unknown merge.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::{ClassId, TaskSchedule};
use crate::synth::LabelRaster;

/// Counts over the evaluation space `{background} ∪ seen`; row = ground truth,
/// column = prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: Vec<ClassId>,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(seen: &BTreeSet<ClassId>) -> Result<Self> {
        if let Some(c) = seen.iter().find(|c| !c.is_foreground()) {
            return Err(Error::config(format!("{c} is not a foreground class")));
        }
        let classes: Vec<ClassId> = std::iter::once(ClassId::BACKGROUND)
            .chain(seen.iter().copied())
            .collect();
        let n = classes.len();
        Ok(Self {
            classes,
            counts: vec![0; n * n],
        })
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn count(&self, gt: ClassId, pred: ClassId) -> u64 {
        match (self.index(gt), self.index(pred)) {
            (Some(g), Some(p)) => self.counts[g * self.classes.len() + p],
            _ => 0,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn index(&self, c: ClassId) -> Option<usize> {
        self.classes.binary_search(&c).ok()
    }

    /// Add one `(pred, gt)` pair. Unknown predictions count as background.
    pub fn add(&mut self, pred: &LabelRaster, gt: &LabelRaster) -> Result<()> {
        if !pred.same_shape(gt.height, gt.width) {
            return Err(Error::shape(format!(
                "prediction is {}x{}, ground truth is {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        let n = self.classes.len();
        let mut local = vec![0u64; n * n];
        for (i, (&p, &g)) in pred.ids.iter().zip(&gt.ids).enumerate() {
            let gi = self
                .index(g)
                .ok_or(Error::InvalidLabel { pixel: i, id: g })?;
            let p = if p == ClassId::UNKNOWN {
                ClassId::BACKGROUND
            } else {
                p
            };
            let pi = self
                .index(p)
                .ok_or(Error::InvalidLabel { pixel: i, id: p })?;
            local[gi * n + pi] += 1;
        }
        self.counts.iter_mut().zip(local).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn accumulate(mut self, pred: &LabelRaster, gt: &LabelRaster) -> Result<Self> {
        self.add(pred, gt)?;
        Ok(self)
    }

    /// Sum of two matrices over the same class list.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.classes != other.classes {
            return Err(Error::shape("confusion matrices have different class lists"));
        }
        self.counts
            .iter_mut()
            .zip(&other.counts)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// `(TP, FP, FN)` for class `c`.
    pub fn tally(&self, c: ClassId) -> Option<(u64, u64, u64)> {
        let k = self.index(c)?;
        let n = self.classes.len();
        let tp = self.counts[k * n + k];
        let row: u64 = self.counts[k * n..(k + 1) * n].iter().sum();
        let col: u64 = (0..n).map(|r| self.counts[r * n + k]).sum();
        Some((tp, col - tp, row - tp))
    }

    /// IoU per class; classes never in ground truth nor predicted are absent.
    pub fn iou_per_class(&self) -> BTreeMap<ClassId, f64> {
        self.classes
            .iter()
            .filter_map(|&c| {
                let (tp, fp, fn_) = self.tally(c)?;
                let den = tp + fp + fn_;
                (den > 0).then(|| (c, tp as f64 / den as f64))
            })
            .collect()
    }

    /// Mean IoU over the classes of `subset` that have a defined IoU.
    pub fn miou(&self, subset: &BTreeSet<ClassId>) -> Result<f64> {
        if subset.is_empty() {
            return Err(Error::precondition("mIoU over an empty class subset"));
        }
        let fractions: Vec<(u64, u64)> = subset
            .iter()
            .filter_map(|&c| {
                let (tp, fp, fn_) = self.tally(c)?;
                let den = tp + fp + fn_;
                (den > 0).then_some((tp, den))
            })
            .collect();
        if fractions.is_empty() {
            return Err(Error::precondition(
                "no class of the subset appears in ground truth or predictions",
            ));
        }
        Ok(exact_mean(&fractions).unwrap_or_else(|| {
            fractions.iter().map(|&(n, d)| n as f64 / d as f64).sum::<f64>() / fractions.len() as f64
        }))
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Mean of `n/d` fractions in rational arithmetic, rounded once. `None` when
/// the intermediate terms no longer fit.
fn exact_mean(fractions: &[(u64, u64)]) -> Option<f64> {
    let (mut num, mut den) = (0u128, 1u128);
    for &(n, d) in fractions {
        let (n, d) = (n as u128, d as u128);
        num = num.checked_mul(d)?.checked_add(n.checked_mul(den)?)?;
        den = den.checked_mul(d)?;
        let g = gcd(num, den).max(1);
        num /= g;
        den /= g;
    }
    den = den.checked_mul(fractions.len() as u128)?;
    let g = gcd(num, den).max(1);
    let (num, den) = (num / g, den / g);
    const EXACT: u128 = 1 << 53;
    (num < EXACT && den < EXACT).then(|| num as f64 / den as f64)
}

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class_id: ClassId,
    /// `None` when the class never occurs in ground truth or predictions.
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub per_class: Vec<ClassIou>,
    /// Background plus the first task's classes.
    pub miou_base: Option<f64>,
    /// Classes of tasks 2..=step; `None` at step 1.
    pub miou_incremental: Option<f64>,
    pub miou_all: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub version: u32,
    pub steps: Vec<StepReport>,
}

#[derive(Serialize)]
struct CsvRow {
    step: usize,
    class_id: u16,
    iou: Option<f64>,
}

fn group_miou(cm: &ConfusionMatrix, group: &BTreeSet<ClassId>) -> Option<f64> {
    if group.is_empty() {
        None
    } else {
        cm.miou(group).ok()
    }
}

/// Build the report from per-step matrices; `matrices[t - 1]` belongs to step `t`.
pub fn report(matrices: &[ConfusionMatrix], schedule: &TaskSchedule) -> Result<MetricsReport> {
    let steps = matrices
        .iter()
        .enumerate()
        .map(|(i, cm)| step_report(cm, schedule, i + 1))
        .collect::<Result<_>>()?;
    Ok(MetricsReport {
        version: REPORT_VERSION,
        steps,
    })
}

pub fn step_report(cm: &ConfusionMatrix, schedule: &TaskSchedule, t: usize) -> Result<StepReport> {
    let seen = schedule.seen_classes(t)?;
    let mut base: BTreeSet<ClassId> = schedule.task(1)?.clone();
    base.insert(ClassId::BACKGROUND);
    let incremental: BTreeSet<ClassId> = seen.difference(schedule.task(1)?).copied().collect();
    let mut all = seen;
    all.insert(ClassId::BACKGROUND);
    let per = cm.iou_per_class();
    Ok(StepReport {
        step: t,
        per_class: cm
            .classes()
            .iter()
            .map(|&c| ClassIou {
                class_id: c,
                iou: per.get(&c).copied(),
            })
            .collect(),
        miou_base: group_miou(cm, &base),
        miou_incremental: group_miou(cm, &incremental),
        miou_all: group_miou(cm, &all),
    })
}

impl MetricsReport {
    pub fn final_step(&self) -> Option<&StepReport> {
        self.steps.last()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(s)?;
        if r.version != REPORT_VERSION {
            return Err(Error::Version {
                found: r.version,
                supported: REPORT_VERSION,
            });
        }
        Ok(r)
    }

    /// `step,class_id,iou`; undefined IoUs are left empty.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for s in &self.steps {
            for c in &s.per_class {
                w.serialize(CsvRow {
                    step: s.step,
                    class_id: c.class_id.0,
                    iou: c.iou,
                })?;
            }
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.to_json()?)?;
        std::fs::write(dir.join("report.csv"), self.to_csv()?)?;
        Ok(())
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(dir.as_ref().join("report.json"))?)
    }
}
