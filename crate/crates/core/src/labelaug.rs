//! Background-label augmentation: unknown-class marking from saliency and
//! confidence-thresholded pseudo-labels from the previous task's model.
//!
//! Per pixel, first match wins:
//!
//! 1. label is a current class, or stored ground truth of a past class: keep it;
//! 2. label is background, the previous model predicts a past foreground class,
//!    and its confidence `μ > τ`: take the prediction;
//! 3. label is background, the pixel is salient (or saliency is disabled), and
//!    the previous model predicts background/unknown or `μ ≤ τ`: unknown;
//! 4. background.
//!
//! At the first task there is no previous model and rule 3 is gated only by
//! saliency.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{sigmoid, ScoreTensor};
use crate::schedule::ClassId;
use crate::synth::{LabelRaster, SaliencyMask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub tau: f64,
    /// When false every background pixel reaching rule 3 becomes unknown.
    pub use_saliency: bool,
    /// When false rule 3 is disabled (no unknown labels at all).
    pub unknown: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            tau: 0.7,
            use_saliency: true,
            unknown: true,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::config(format!("tau {} outside [0, 1]", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrevModelOutput {
    pub pred: LabelRaster,
    pub confidence: Vec<f64>,
}

impl PrevModelOutput {
    pub fn from_scores(scores: &ScoreTensor, past_foreground: &BTreeSet<ClassId>) -> Result<Self> {
        Ok(Self {
            pred: scores.argmax(),
            confidence: confidence_map(scores, past_foreground)?,
        })
    }
}

/// `μ_i = max_{c ∈ past foreground} σ(s_ic)`.
pub fn confidence_map(scores: &ScoreTensor, past_foreground: &BTreeSet<ClassId>) -> Result<Vec<f64>> {
    if past_foreground.is_empty() {
        return Err(Error::precondition(
            "confidence needs at least one past foreground class",
        ));
    }
    let cols: Vec<usize> = past_foreground
        .iter()
        .map(|&c| {
            if !c.is_foreground() {
                return Err(Error::precondition(format!(
                    "{c} is not a foreground class"
                )));
            }
            scores
                .class_index(c)
                .ok_or_else(|| Error::shape(format!("scores have no channel for class {c}")))
        })
        .collect::<Result<_>>()?;
    Ok((0..scores.num_pixels())
        .map(|i| {
            let px = scores.pixel(i);
            let best = cols.iter().map(|&j| px[j]).fold(f64::NEG_INFINITY, f64::max);
            sigmoid(best)
        })
        .collect())
}

/// Augmented target `ỹ` for one sample.
pub fn augment_labels(
    y: &LabelRaster,
    saliency: &SaliencyMask,
    prev: Option<&PrevModelOutput>,
    cfg: &AugmentConfig,
    current_classes: &BTreeSet<ClassId>,
    past_foreground: &BTreeSet<ClassId>,
) -> Result<LabelRaster> {
    let (h, w) = (y.height, y.width);
    if saliency.height != h || saliency.width != w {
        return Err(Error::shape(format!(
            "saliency is {}x{}, labels are {h}x{w}",
            saliency.height, saliency.width
        )));
    }
    match (prev, past_foreground.is_empty()) {
        (None, false) => {
            return Err(Error::precondition(
                "incremental tasks need the previous model's output",
            ))
        }
        (Some(_), true) => {
            return Err(Error::precondition(
                "previous-model output given but there are no past classes",
            ))
        }
        _ => {}
    }
    if let Some(p) = prev {
        if !p.pred.same_shape(h, w) || p.confidence.len() != h * w {
            return Err(Error::shape("previous-model output does not match labels"));
        }
    }
    let ids = (0..h * w)
        .map(|i| {
            let yi = y.ids[i];
            if current_classes.contains(&yi) || past_foreground.contains(&yi) {
                return Ok(yi);
            }
            if yi != ClassId::BACKGROUND {
                return Err(Error::InvalidLabel { pixel: i, id: yi });
            }
            let (pseudo, weak) = match prev {
                Some(p) => {
                    let pred = p.pred.ids[i];
                    let mu = p.confidence[i];
                    let past = past_foreground.contains(&pred);
                    (past && mu > cfg.tau, !past || mu <= cfg.tau)
                }
                None => (false, true),
            };
            if pseudo {
                return Ok(prev.expect("pseudo implies prev").pred.ids[i]);
            }
            let salient = saliency.mask[i] || !cfg.use_saliency;
            if cfg.unknown && salient && weak {
                Ok(ClassId::UNKNOWN)
            } else {
                Ok(ClassId::BACKGROUND)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LabelRaster {
        height: h,
        width: w,
        ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(ids: &[u16]) -> BTreeSet<ClassId> {
        ids.iter().map(|&i| ClassId(i)).collect()
    }

    fn one(
        y: u16,
        salient: bool,
        prev: Option<(u16, f64)>,
        tau: f64,
        use_saliency: bool,
    ) -> ClassId {
        let labels = LabelRaster::filled(1, 1, ClassId(y));
        let sal = SaliencyMask {
            height: 1,
            width: 1,
            mask: vec![salient],
        };
        let prev = prev.map(|(p, mu)| PrevModelOutput {
            pred: LabelRaster::filled(1, 1, ClassId(p)),
            confidence: vec![mu],
        });
        let past = if prev.is_some() { set(&[3]) } else { set(&[]) };
        let cfg = AugmentConfig {
            tau,
            use_saliency,
            unknown: true,
        };
        augment_labels(&labels, &sal, prev.as_ref(), &cfg, &set(&[5]), &past).unwrap().ids[0]
    }

    #[test]
    fn first_task_salient_background_is_unknown() {
        assert_eq!(one(0, true, None, 0.7, true), ClassId::UNKNOWN);
        assert_eq!(one(0, false, None, 0.7, true), ClassId::BACKGROUND);
        assert_eq!(one(5, true, None, 0.7, true), ClassId(5));
    }

    #[test]
    fn confident_pseudo_label() {
        assert_eq!(one(0, false, Some((3, 0.9)), 0.7, true), ClassId(3));
        assert_eq!(one(0, true, Some((3, 0.9)), 0.7, true), ClassId(3));
    }

    #[test]
    fn salient_with_dummy_prediction_is_unknown() {
        assert_eq!(one(0, true, Some((1, 0.2)), 0.7, true), ClassId::UNKNOWN);
        assert_eq!(one(0, true, Some((0, 0.95)), 0.7, true), ClassId::UNKNOWN);
    }

    #[test]
    fn unconfident_non_salient_stays_background() {
        assert_eq!(one(0, false, Some((3, 0.5)), 0.7, true), ClassId::BACKGROUND);
        // Strict inequality at the threshold.
        assert_eq!(one(0, false, Some((3, 0.7)), 0.7, true), ClassId::BACKGROUND);
        // Without saliency the same pixel becomes unknown.
        assert_eq!(one(0, false, Some((3, 0.5)), 0.7, false), ClassId::UNKNOWN);
    }

    #[test]
    fn confidence_examples() {
        let classes = vec![ClassId(0), ClassId(1), ClassId(2), ClassId(3)];
        let s = ScoreTensor::new(1, 2, classes, vec![9.0, 9.0, -1.0, 0.5, -5.0, 3.0, 0.0, 0.0])
            .unwrap();
        let mu = confidence_map(&s, &set(&[2, 3])).unwrap();
        assert!((mu[0] - 0.622_459_331_2).abs() < 1e-9);
        assert_eq!(mu[1], 0.5);
        assert!(confidence_map(&s, &set(&[])).is_err());
    }

    #[test]
    fn preconditions() {
        let y = LabelRaster::filled(2, 2, ClassId(0));
        let sal = SaliencyMask {
            height: 1,
            width: 4,
            mask: vec![false; 4],
        };
        let cfg = AugmentConfig::default();
        assert!(matches!(
            augment_labels(&y, &sal, None, &cfg, &set(&[5]), &set(&[])),
            Err(Error::Shape(_))
        ));
        let sal = SaliencyMask {
            height: 2,
            width: 2,
            mask: vec![false; 4],
        };
        assert!(matches!(
            augment_labels(&y, &sal, None, &cfg, &set(&[5]), &set(&[3])),
            Err(Error::Precondition(_))
        ));
        let bad = LabelRaster::filled(2, 2, ClassId(9));
        assert!(matches!(
            augment_labels(&bad, &sal, None, &cfg, &set(&[5]), &set(&[])),
            Err(Error::InvalidLabel { .. })
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn lower_tau_never_fewer_pseudo_labels(
                seed_ids in proptest::collection::vec((0u16..3, any::<bool>(), 0u16..4, 0.0f64..1.0), 16),
                hi in 0.0f64..1.0,
                drop in 0.0f64..1.0,
            ) {
                let lo = hi * drop;
                let n = seed_ids.len();
                // y ∈ {bg, 5}, pred ∈ {bg, unk, 3, 4}
                let y = LabelRaster::from_ids(1, n, seed_ids.iter().map(|s| if s.0 == 2 { ClassId(5) } else { ClassId(0) }).collect()).unwrap();
                let sal = SaliencyMask { height: 1, width: n, mask: seed_ids.iter().map(|s| s.1).collect() };
                let prev = PrevModelOutput {
                    pred: LabelRaster::from_ids(1, n, seed_ids.iter().map(|s| ClassId(s.2)).collect()).unwrap(),
                    confidence: seed_ids.iter().map(|s| s.3).collect(),
                };
                let past = set(&[3, 4]);
                let count = |tau: f64| {
                    let cfg = AugmentConfig { tau, ..AugmentConfig::default() };
                    augment_labels(&y, &sal, Some(&prev), &cfg, &set(&[5]), &past).unwrap()
                        .ids.iter().filter(|c| past.contains(c)).count()
                };
                prop_assert!(count(lo) >= count(hi));
                prop_assert_eq!(count(1.0), 0);
                let out = augment_labels(&y, &sal, Some(&prev), &AugmentConfig { tau: hi, ..AugmentConfig::default() }, &set(&[5]), &past).unwrap();
                for i in 0..n {
                    if y.ids[i] == ClassId(5) {
                        prop_assert_eq!(out.ids[i], ClassId(5));
                    }
                }
            }
        }
    }
}
