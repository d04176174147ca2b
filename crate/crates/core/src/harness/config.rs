use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{default_stages, StageSpec};
use crate::error::{Error, Result};
use crate::heads::{HeadInit, LossKind, TrainConfig, DEFAULT_INIT_STD};
use crate::labelaug::AugmentConfig;
use crate::memory::SamplingPolicy;
use crate::schedule::{make_schedule, TaskSchedule};
use crate::seed;
use crate::synth::{GeometryConfig, Protocol};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub base: usize,
    pub step: usize,
    pub num_steps: usize,
    /// 0 keeps catalog order.
    #[serde(default)]
    pub ordering_seed: u64,
    /// Defaults to `base + step * num_steps`.
    #[serde(default)]
    pub catalog_size: Option<usize>,
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<TaskSchedule> {
        let total = self.base + self.step * self.num_steps;
        make_schedule(
            self.base,
            self.step,
            self.num_steps,
            self.ordering_seed,
            self.catalog_size.unwrap_or(total),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    /// Scenes in each incremental `D_t`.
    pub train_per_task: usize,
    /// Scenes in `D_1`; `None` uses `train_per_task`.
    pub base_train: Option<usize>,
    pub eval_size: usize,
    pub geometry: GeometryConfig,
}

impl DataSpec {
    pub fn scenes_for_task(&self, t: usize) -> usize {
        match (t, self.base_train) {
            (1, Some(n)) => n,
            _ => self.train_per_task,
        }
    }

    /// Scenes over the first `num_tasks` tasks.
    pub fn total_scenes(&self, num_tasks: usize) -> usize {
        (1..=num_tasks).map(|t| self.scenes_for_task(t)).sum()
    }
}

pub const SCENES_PER_BASE_CLASS: usize = 30;

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            train_per_task: 60,
            base_train: None,
            eval_size: 120,
            geometry: GeometryConfig::default(),
        }
    }
}

/// Every random stream of a run; derived from one master seed by default.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub eval: u64,
    pub extractor: u64,
    pub init: u64,
    pub train: u64,
    pub memory: u64,
    pub saliency: u64,
}

impl Seeds {
    pub fn from_master(master: u64) -> Self {
        let d = |k: u64| seed::derive(master, &[0x5EED, k]);
        Self {
            data: d(1),
            eval: d(2),
            extractor: d(3),
            init: d(4),
            train: d(5),
            memory: d(6),
            saliency: d(7),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    pub tau: f64,
    pub use_saliency: bool,
    /// Fraction of saliency pixels flipped in every training scene.
    pub saliency_corruption: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        let a = AugmentConfig::default();
        Self {
            tau: a.tau,
            use_saliency: a.use_saliency,
            saliency_corruption: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Epochs for the first task.
    pub base_epochs: usize,
    /// Epochs for every later task.
    pub incremental_epochs: usize,
    pub batch_size: usize,
    /// Std. dev. of randomly initialized heads; `None` is He-normal,
    /// `sqrt(2 / feature_dim)`.
    pub init_std: Option<f64>,
}

/// The loss is a mean over pixels and classes, so per-parameter gradients are
/// small and the step size is correspondingly large.
pub const SCENARIO_LEARNING_RATE: f64 = 10.0;

impl Default for TrainSpec {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: SCENARIO_LEARNING_RATE,
            momentum: t.momentum,
            base_epochs: 10,
            incremental_epochs: 30,
            batch_size: t.batch_size,
            init_std: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Ssul,
    /// With exemplar memory replay.
    SsulM,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemorySpec {
    pub capacity: usize,
    pub sampling: SamplingPolicy,
}

impl Default for MemorySpec {
    fn default() -> Self {
        Self {
            capacity: 32,
            sampling: SamplingPolicy::ClassBalanced,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct AblationToggles {
    /// Drop unknown-class labels; new heads then start from random weights.
    pub no_unknown: bool,
    pub no_freeze: bool,
    pub softmax_ce: bool,
    pub head_init: HeadInit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub version: u32,
    #[serde(default)]
    pub name: String,
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub protocol: Protocol,
    #[serde(default)]
    pub data: DataSpec,
    pub seeds: Seeds,
    #[serde(default)]
    pub augment: AugmentSpec,
    #[serde(default)]
    pub train: TrainSpec,
    #[serde(default)]
    pub method: Method,
    #[serde(default)]
    pub memory: MemorySpec,
    #[serde(default)]
    pub ablation: AblationToggles,
    #[serde(default = "default_stages")]
    pub extractor: Vec<StageSpec>,
    /// Where checkpoints and reports go; nothing is written when unset.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

/// Named scenario presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// 4 base classes + 2 steps of 2.
    S8,
    /// 8 base classes + 4 steps of 2.
    S16,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s8" => Ok(Self::S8),
            "s16" => Ok(Self::S16),
            other => Err(Error::config(format!("unknown preset '{other}' (expected s8 or s16)"))),
        }
    }
}

impl ScenarioConfig {
    /// Presets size `D_1` per class so the base task is not
    /// under-represented next to the incremental ones.
    pub fn preset(p: Preset, master_seed: u64) -> Self {
        let (name, base, step, num_steps) = match p {
            Preset::S8 => ("s8", 4, 2, 2),
            Preset::S16 => ("s16", 8, 2, 4),
        };
        Self {
            version: CONFIG_VERSION,
            name: name.into(),
            schedule: ScheduleSpec {
                base,
                step,
                num_steps,
                ordering_seed: 0,
                catalog_size: None,
            },
            protocol: Protocol::Overlapped,
            data: DataSpec {
                base_train: Some(SCENES_PER_BASE_CLASS * base),
                ..DataSpec::default()
            },
            seeds: Seeds::from_master(master_seed),
            augment: AugmentSpec::default(),
            train: TrainSpec::default(),
            method: Method::Ssul,
            memory: MemorySpec {
                capacity: 2 * (base + step * num_steps),
                ..MemorySpec::default()
            },
            ablation: AblationToggles::default(),
            extractor: default_stages(),
            output_dir: None,
        }
    }

    /// Replace every seed with streams derived from `master`.
    pub fn with_seed(mut self, master: u64) -> Self {
        self.seeds = Seeds::from_master(master);
        self
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::Version {
                found: cfg.version,
                supported: CONFIG_VERSION,
            });
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_json(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        self.data.geometry.validate()?;
        if self.data.train_per_task == 0 || self.data.eval_size == 0 {
            return Err(Error::config("dataset sizes must be positive"));
        }
        self.augment_config().validate()?;
        if !(0.0..=1.0).contains(&self.augment.saliency_corruption) {
            return Err(Error::config("saliency_corruption must lie in [0, 1]"));
        }
        self.train_config(1).validate()?;
        if self.method == Method::SsulM {
            if self.memory.capacity == 0 {
                return Err(Error::config("ssul_m needs a positive memory capacity"));
            }
            if self.train.batch_size < 2 || !self.train.batch_size.is_multiple_of(2) {
                return Err(Error::config("ssul_m needs an even batch_size of at least 2"));
            }
        }
        crate::backbone::init_extractor(self.seeds.extractor, &self.extractor)?;
        Ok(())
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            tau: self.augment.tau,
            use_saliency: self.augment.use_saliency,
            unknown: !self.ablation.no_unknown,
        }
    }

    /// Effective training settings for task `t`.
    pub fn train_config(&self, t: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            momentum: self.train.momentum,
            n_epochs: if t <= 1 {
                self.train.base_epochs
            } else {
                self.train.incremental_epochs
            },
            batch_size: self.train.batch_size,
            loss_kind: if self.ablation.softmax_ce {
                LossKind::SoftmaxCe
            } else {
                LossKind::SigmoidBce
            },
            freeze: !self.ablation.no_freeze,
            head_init: if self.ablation.no_unknown {
                HeadInit::Random
            } else {
                self.ablation.head_init
            },
            init_std: self.train.init_std.unwrap_or_else(|| self.he_std()),
            seed: self.seeds.train,
        }
    }

    fn he_std(&self) -> f64 {
        crate::backbone::init_extractor(self.seeds.extractor, &self.extractor)
            .map_or(DEFAULT_INIT_STD, |e| (2.0 / e.output_dim() as f64).sqrt())
    }

    pub fn uses_memory(&self) -> bool {
        self.method == Method::SsulM
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for p in [Preset::S8, Preset::S16] {
            let c = ScenarioConfig::preset(p, 3);
            c.validate().unwrap();
            assert_eq!(ScenarioConfig::from_json(&c.to_json()).unwrap(), c);
        }
        assert_eq!(ScenarioConfig::preset(Preset::S16, 0).schedule.build().unwrap().num_tasks(), 5);
    }

    #[test]
    fn rejects_unknown_fields_and_versions() {
        let c = ScenarioConfig::preset(Preset::S8, 0);
        let mut v: serde_json::Value = serde_json::from_str(&c.to_json()).unwrap();
        v["bogus"] = 1.into();
        assert!(ScenarioConfig::from_json(&v.to_string()).unwrap_err().is_config());
        let mut v: serde_json::Value = serde_json::from_str(&c.to_json()).unwrap();
        v["version"] = 99.into();
        assert!(matches!(ScenarioConfig::from_json(&v.to_string()), Err(Error::Version { .. })));
    }

    #[test]
    fn toggles_map_onto_training() {
        let mut c = ScenarioConfig::preset(Preset::S8, 0);
        c.ablation.no_unknown = true;
        c.ablation.no_freeze = true;
        c.ablation.softmax_ce = true;
        let t = c.train_config(2);
        assert_eq!(t.head_init, HeadInit::Random);
        assert!(!t.freeze);
        assert_eq!(t.loss_kind, LossKind::SoftmaxCe);
        assert!(!c.augment_config().unknown);
    }
}
