//! Per-class 1×1 linear heads over frozen features.
//!
//! A [`SegModel`] owns the extractor and one head per class of the current label
//! space `{c_b, c_u} ∪ C^{1:t}`. Heads are kept in ascending class-id order, which
//! is also the channel order of every [`ScoreTensor`].

mod checkpoint;
mod loss;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use loss::{bce_loss_grad, ce_loss_grad, sigmoid, LossGrad};
pub use train::{
    begin_task, train_task, EpochLog, HeadInit, LossKind, TrainConfig, TrainSummary,
};

use std::collections::{BTreeMap, BTreeSet};

use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::backbone::{hex, Extractor, FeatureTensor};
use crate::error::{Error, Result};
use crate::schedule::ClassId;
use crate::seed;
use crate::synth::{Image, LabelRaster};

/// `H × W × |classes|` scores, row-major with classes innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTensor {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<ClassId>,
    pub data: Vec<f64>,
}

impl ScoreTensor {
    pub fn new(height: usize, width: usize, classes: Vec<ClassId>, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * classes.len() {
            return Err(Error::shape(format!(
                "score tensor {height}x{width}x{} needs {} values, got {}",
                classes.len(),
                height * width * classes.len(),
                data.len()
            )));
        }
        if classes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::shape("score classes must be strictly ascending"));
        }
        Ok(Self {
            height,
            width,
            classes,
            data,
        })
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn pixel(&self, i: usize) -> &[f64] {
        let k = self.classes.len();
        &self.data[i * k..(i + 1) * k]
    }

    pub fn class_index(&self, c: ClassId) -> Option<usize> {
        self.classes.binary_search(&c).ok()
    }

    /// Per-pixel argmax over all classes; ties go to the smallest class id.
    pub fn argmax(&self) -> LabelRaster {
        let ids = self
            .data
            .chunks(self.classes.len())
            .map(|px| {
                let mut best = 0;
                for (j, &v) in px.iter().enumerate().skip(1) {
                    if v > px[best] {
                        best = j;
                    }
                }
                self.classes[best]
            })
            .collect();
        LabelRaster {
            height: self.height,
            width: self.width,
            ids,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub weight: Vec<f64>,
    pub bias: f64,
    pub frozen: bool,
}

impl HeadParams {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weight: vec![0.0; dim],
            bias: 0.0,
            frozen: false,
        }
    }

    pub(crate) fn gaussian(dim: usize, std: f64, base_seed: u64, tags: &[u64]) -> Self {
        let mut rng = seed::rng(base_seed, tags);
        let normal = Normal::new(0.0, std.max(0.0)).expect("non-negative std");
        Self {
            weight: (0..dim).map(|_| normal.sample(&mut rng)).collect(),
            bias: 0.0,
            frozen: false,
        }
    }

    fn hash_into(&self, h: &mut Sha256) {
        for w in &self.weight {
            h.update(w.to_le_bytes());
        }
        h.update(self.bias.to_le_bytes());
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    pub(crate) extractor: Extractor,
    pub(crate) heads: BTreeMap<ClassId, HeadParams>,
    pub(crate) task_index: usize,
    pub(crate) current_classes: BTreeSet<ClassId>,
}

/// Dot product with four independent accumulators so the loop vectorizes.
pub(crate) fn dot(w: &[f64], x: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (wc, wr) = w.split_at(w.len() / 4 * 4);
    let (xc, xr) = x.split_at(wc.len().min(x.len()));
    for (a, b) in wc.chunks_exact(4).zip(xc.chunks_exact(4)) {
        for j in 0..4 {
            acc[j] += a[j] * b[j];
        }
    }
    let tail: f64 = wr.iter().zip(xr).map(|(a, b)| a * b).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Std. dev. of the Gaussian used for freshly initialized heads.
pub const DEFAULT_INIT_STD: f64 = 0.01;

impl SegModel {
    /// Model before the first task: background and unknown heads only.
    pub fn new(extractor: Extractor, init_seed: u64) -> Self {
        let dim = extractor.output_dim();
        let mut heads = BTreeMap::new();
        for c in [ClassId::BACKGROUND, ClassId::UNKNOWN] {
            heads.insert(
                c,
                HeadParams::gaussian(
                    dim,
                    DEFAULT_INIT_STD,
                    init_seed,
                    &[seed::tag::HEAD_INIT, 0, c.0 as u64],
                ),
            );
        }
        Self {
            extractor,
            heads,
            task_index: 0,
            current_classes: BTreeSet::new(),
        }
    }

    /// Build from explicit parts (checkpoint loading, tests).
    pub fn from_parts(
        extractor: Extractor,
        heads: BTreeMap<ClassId, HeadParams>,
        task_index: usize,
        current_classes: BTreeSet<ClassId>,
    ) -> Result<Self> {
        let dim = extractor.output_dim();
        for c in [ClassId::BACKGROUND, ClassId::UNKNOWN] {
            if !heads.contains_key(&c) {
                return Err(Error::config(format!("model is missing the {c} head")));
            }
        }
        for (c, h) in &heads {
            if h.weight.len() != dim {
                return Err(Error::shape(format!(
                    "head {c} has dim {} but the extractor outputs {dim}",
                    h.weight.len()
                )));
            }
            if !h.bias.is_finite() || h.weight.iter().any(|w| !w.is_finite()) {
                return Err(Error::config(format!("head {c} has non-finite parameters")));
            }
        }
        if let Some(c) = current_classes.iter().find(|c| !heads.contains_key(c)) {
            return Err(Error::config(format!("current class {c} has no head")));
        }
        Ok(Self {
            extractor,
            heads,
            task_index,
            current_classes,
        })
    }

    pub fn extractor(&self) -> &Extractor {
        &self.extractor
    }

    pub fn heads(&self) -> &BTreeMap<ClassId, HeadParams> {
        &self.heads
    }

    pub fn head(&self, c: ClassId) -> Option<&HeadParams> {
        self.heads.get(&c)
    }

    /// Mutable head access. Frozen heads are refused.
    pub fn head_mut(&mut self, c: ClassId) -> Result<&mut HeadParams> {
        match self.heads.get_mut(&c) {
            Some(h) if h.frozen => Err(Error::precondition(format!("head {c} is frozen"))),
            Some(h) => Ok(h),
            None => Err(Error::precondition(format!("no head for class {c}"))),
        }
    }

    pub fn task_index(&self) -> usize {
        self.task_index
    }

    pub fn classes(&self) -> Vec<ClassId> {
        self.heads.keys().copied().collect()
    }

    /// Foreground classes with heads: `C^{1:t}`.
    pub fn foreground_classes(&self) -> BTreeSet<ClassId> {
        self.heads.keys().copied().filter(|c| c.is_foreground()).collect()
    }

    /// Classes introduced by the current task.
    pub fn current_classes(&self) -> &BTreeSet<ClassId> {
        &self.current_classes
    }

    /// Foreground classes from earlier tasks: `C^{1:t-1}`.
    pub fn past_classes(&self) -> BTreeSet<ClassId> {
        self.foreground_classes()
            .difference(&self.current_classes)
            .copied()
            .collect()
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.output_dim()
    }

    pub fn features(&self, image: &Image) -> Result<FeatureTensor> {
        self.extractor.extract(image)
    }

    /// Scores `s_ic = <w_c, feat_i> + b_c` for every head.
    pub fn forward(&self, features: &FeatureTensor) -> Result<ScoreTensor> {
        let dim = self.feature_dim();
        if features.dim != dim {
            return Err(Error::shape(format!(
                "heads expect {dim}-dim features, got {}",
                features.dim
            )));
        }
        let heads: Vec<&HeadParams> = self.heads.values().collect();
        let k = heads.len();
        let n = features.num_pixels();
        let mut data = vec![0.0; n * k];
        let mut f64_px = vec![0.0; dim];
        for i in 0..n {
            for (d, &v) in f64_px.iter_mut().zip(features.pixel(i)) {
                *d = v as f64;
            }
            let out = &mut data[i * k..(i + 1) * k];
            for (o, h) in out.iter_mut().zip(&heads) {
                *o = h.bias + dot(&h.weight, &f64_px);
            }
        }
        Ok(ScoreTensor {
            height: features.height,
            width: features.width,
            classes: self.classes(),
            data,
        })
    }

    pub fn predict(&self, image: &Image) -> Result<LabelRaster> {
        Ok(self.forward(&self.features(image)?)?.argmax())
    }

    pub fn predict_features(&self, features: &FeatureTensor) -> Result<LabelRaster> {
        Ok(self.forward(features)?.argmax())
    }

    /// SHA-256 over the extractor and the heads of `classes`, in id order.
    pub fn digest_of(&self, classes: &BTreeSet<ClassId>) -> String {
        let mut h = Sha256::new();
        self.extractor.hash_into(&mut h);
        for c in classes {
            h.update(c.0.to_le_bytes());
            match self.heads.get(c) {
                Some(head) => head.hash_into(&mut h),
                None => h.update(b"missing"),
            }
        }
        hex(&h.finalize())
    }

    /// Digest of every parameter in the model.
    pub fn digest(&self) -> String {
        let all: BTreeSet<ClassId> = self.heads.keys().copied().collect();
        self.digest_of(&all)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::init_extractor;

    fn identity_model(classes: &[u16]) -> SegModel {
        let ex = init_extractor(0, &[]).unwrap();
        let mut m = SegModel::new(ex, 0);
        for &c in classes {
            m.heads.insert(ClassId(c), HeadParams::zeros(3));
        }
        m
    }

    #[test]
    fn zero_weights_give_bias_plane() {
        let mut m = identity_model(&[2]);
        for h in m.heads.values_mut() {
            h.weight = vec![0.0; 3];
            h.bias = 0.25;
        }
        let f = FeatureTensor::new(2, 2, 3, vec![0.7; 12]).unwrap();
        let s = m.forward(&f).unwrap();
        assert!(s.data.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn one_hot_feature_picks_weight() {
        let mut m = identity_model(&[2]);
        let h = m.heads.get_mut(&ClassId(2)).unwrap();
        h.weight = vec![0.5, -2.0, 3.0];
        h.bias = 0.1;
        let f = FeatureTensor::new(1, 1, 3, vec![0.0, 1.0, 0.0]).unwrap();
        let s = m.forward(&f).unwrap();
        assert_eq!(s.pixel(0)[s.class_index(ClassId(2)).unwrap()], -2.0 + 0.1);
    }

    #[test]
    fn forward_is_affine() {
        let mut m = identity_model(&[2, 3]);
        for (k, h) in m.heads.values_mut().enumerate() {
            h.weight = vec![k as f64 * 0.3 - 0.2, 0.4, -0.1 * k as f64];
            h.bias = 0.0;
        }
        let a = FeatureTensor::new(1, 2, 3, vec![0.1, 0.2, 0.3, 0.5, 0.25, 0.125]).unwrap();
        let b = FeatureTensor::new(1, 2, 3, vec![0.5, 0.0, 0.25, 0.75, 0.5, 0.0]).unwrap();
        let sum = FeatureTensor::new(
            1,
            2,
            3,
            a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
        )
        .unwrap();
        let (sa, sb, ss) = (
            m.forward(&a).unwrap(),
            m.forward(&b).unwrap(),
            m.forward(&sum).unwrap(),
        );
        for i in 0..ss.data.len() {
            assert!((ss.data[i] - sa.data[i] - sb.data[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn argmax_and_ties() {
        let classes = vec![ClassId(0), ClassId(1), ClassId(2)];
        let s = ScoreTensor::new(1, 3, classes, vec![0.1, 0.3, 0.9, 0.0, 0.5, 0.5, 2.0, 2.0, 2.0])
            .unwrap();
        assert_eq!(s.argmax().ids, vec![ClassId(2), ClassId(1), ClassId(0)]);
        let shifted = ScoreTensor {
            data: s.data.iter().map(|v| v + 17.5).collect(),
            ..s.clone()
        };
        assert_eq!(shifted.argmax(), s.argmax());
    }

    #[test]
    fn dim_mismatch_and_frozen_guard() {
        let mut m = identity_model(&[2]);
        let f = FeatureTensor::new(1, 1, 4, vec![0.0; 4]).unwrap();
        assert!(matches!(m.forward(&f), Err(Error::Shape(_))));
        m.heads.get_mut(&ClassId(2)).unwrap().frozen = true;
        assert!(m.head_mut(ClassId(2)).is_err());
        assert!(m.head_mut(ClassId(1)).is_ok());
    }
}
