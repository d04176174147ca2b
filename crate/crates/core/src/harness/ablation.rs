use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::{Method, ScenarioConfig};
use crate::harness::run::{run_scenario, RunOutcome};
use crate::heads::HeadInit;
use crate::memory::SamplingPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Table3,
    Table4,
    TauSweep,
    MemorySize,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table3" => Ok(Self::Table3),
            "table4" => Ok(Self::Table4),
            "tau_sweep" | "tau-sweep" => Ok(Self::TauSweep),
            "memory_size" | "memory-size" => Ok(Self::MemorySize),
            other => Err(Error::config(format!(
                "unknown suite '{other}' (expected table3, table4, tau_sweep or memory_size)"
            ))),
        }
    }
}

pub const TAU_GRID: [f64; 6] = [0.0, 0.3, 0.5, 0.7, 0.9, 1.0];

/// One configuration of a suite, applied on top of the base config.
#[derive(Debug, Clone)]
pub struct Variant {
    pub name: String,
    pub apply: fn(&mut ScenarioConfig, f64),
    pub arg: f64,
}

fn variant(name: impl Into<String>, apply: fn(&mut ScenarioConfig, f64), arg: f64) -> Variant {
    Variant {
        name: name.into(),
        apply,
        arg,
    }
}

/// Replay with class-balanced memory sized `arg` scenes (`0` disables replay,
/// negative means "every training scene").
fn set_memory(c: &mut ScenarioConfig, arg: f64) {
    if arg == 0.0 {
        c.method = Method::Ssul;
        return;
    }
    c.method = Method::SsulM;
    c.memory.sampling = SamplingPolicy::ClassBalanced;
    c.memory.capacity = if arg < 0.0 {
        c.data.total_scenes(c.schedule.num_steps + 1)
    } else {
        arg as usize
    };
}

pub fn variants(suite: Suite, base: &ScenarioConfig) -> Vec<Variant> {
    match suite {
        Suite::Table3 => vec![
            variant("ssul", |_, _| {}, 0.0),
            variant("softmax_ce", |c, _| c.ablation.softmax_ce = true, 0.0),
            variant("no_freeze", |c, _| c.ablation.no_freeze = true, 0.0),
            variant("no_unknown", |c, _| c.ablation.no_unknown = true, 0.0),
        ],
        Suite::Table4 => {
            let m = base.memory.capacity as f64;
            vec![
                variant("weight_transfer", |c, _| c.ablation.head_init = HeadInit::WeightTransfer, 0.0),
                variant("random_init", |c, _| c.ablation.head_init = HeadInit::Random, 0.0),
                variant("from_cb_init", |c, _| c.ablation.head_init = HeadInit::FromCb, 0.0),
                variant("noisy_saliency", |c, p| c.augment.saliency_corruption = p, 0.2),
                variant("memory_class_balanced", set_memory, m),
                variant(
                    "memory_random",
                    |c, m| {
                        set_memory(c, m);
                        c.memory.sampling = SamplingPolicy::Random;
                    },
                    m,
                ),
            ]
        }
        Suite::TauSweep => TAU_GRID
            .iter()
            .map(|&tau| variant(format!("tau={tau:.1}"), |c, t| c.augment.tau = t, tau))
            .collect(),
        Suite::MemorySize => [0.0, 4.0, 16.0, 64.0, -1.0]
            .iter()
            .map(|&m| {
                let name = if m < 0.0 {
                    "memory=full".to_string()
                } else {
                    format!("memory={m}")
                };
                variant(name, set_memory, m)
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupMiou {
    pub base: f64,
    /// NaN when the scenario has a single task.
    pub incremental: f64,
    pub all: f64,
}

impl GroupMiou {
    fn of(outcome: &RunOutcome) -> Self {
        let last = outcome.report.final_step().expect("non-empty report");
        let pct = |v: Option<f64>| v.map_or(f64::NAN, |x| 100.0 * x);
        Self {
            base: pct(last.miou_base),
            incremental: pct(last.miou_incremental),
            all: pct(last.miou_all),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub per_seed: Vec<GroupMiou>,
    pub median: GroupMiou,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Base,
    Incremental,
    All,
}

impl GroupMiou {
    pub fn get(&self, g: Group) -> f64 {
        match g {
            Group::Base => self.base,
            Group::Incremental => self.incremental,
            Group::All => self.all,
        }
    }
}

/// Median comparison of the first row against another row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub lhs: String,
    pub rhs: String,
    pub group: Group,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub suite: Suite,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub comparisons: Vec<Comparison>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Run every variant of `suite` for every seed (in parallel) and tabulate.
/// Each seed replaces the base config's seeds, so variants share data.
pub fn run_ablation_suite(base: &ScenarioConfig, suite: Suite, seeds: &[u64]) -> Result<AblationReport> {
    run_variants(base, suite, &variants(suite, base), seeds)
}

pub fn run_variants(
    base: &ScenarioConfig,
    suite: Suite,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<AblationReport> {
    if seeds.is_empty() || variants.is_empty() {
        return Err(Error::config("an ablation needs at least one seed and one variant"));
    }
    let jobs: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results: Vec<GroupMiou> = jobs
        .par_iter()
        .map(|&(v, s)| {
            let mut cfg = base.clone().with_seed(s);
            cfg.output_dir = None;
            (variants[v].apply)(&mut cfg, variants[v].arg);
            run_scenario(&cfg).map(|o| GroupMiou::of(&o))
        })
        .collect::<Result<_>>()?;
    let rows: Vec<AblationRow> = variants
        .iter()
        .enumerate()
        .map(|(v, var)| {
            let per_seed: Vec<GroupMiou> = results[v * seeds.len()..(v + 1) * seeds.len()].to_vec();
            let col = |g: Group| median(&per_seed.iter().map(|m| m.get(g)).collect::<Vec<_>>());
            AblationRow {
                name: var.name.clone(),
                median: GroupMiou {
                    base: col(Group::Base),
                    incremental: col(Group::Incremental),
                    all: col(Group::All),
                },
                per_seed,
            }
        })
        .collect();
    let group = match suite {
        Suite::MemorySize => Group::Incremental,
        _ => Group::All,
    };
    let comparisons = rows[1..]
        .iter()
        .map(|r| Comparison {
            lhs: rows[0].name.clone(),
            rhs: r.name.clone(),
            group,
            gap: rows[0].median.get(group) - r.median.get(group),
        })
        .collect();
    Ok(AblationReport {
        suite,
        seeds: seeds.to_vec(),
        rows,
        comparisons,
    })
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Plain-text side-by-side table of median mIoU (percent).
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>8} {:>8} {:>8}", "variant", "base", "incr", "all");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<24} {:>8.2} {:>8.2} {:>8.2}",
                r.name, r.median.base, r.median.incremental, r.median.all
            );
        }
        for c in &self.comparisons {
            let _ = writeln!(
                s,
                "{} - {} ({:?}): {:+.2}",
                c.lhs, c.rhs, c.group, c.gap
            );
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::Preset;

    #[test]
    fn suite_shapes() {
        let base = ScenarioConfig::preset(Preset::S8, 0);
        assert_eq!(variants(Suite::Table3, &base).len(), 4);
        assert_eq!(variants(Suite::TauSweep, &base).len(), 6);
        assert_eq!(variants(Suite::MemorySize, &base).len(), 5);
        let mut c = base.clone();
        let full = &variants(Suite::MemorySize, &base)[4];
        (full.apply)(&mut c, full.arg);
        assert_eq!(c.memory.capacity, c.data.total_scenes(3));
    }

    #[test]
    fn median_handles_even_and_nan() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[f64::NAN, 1.0]), 1.0);
        assert!(median(&[]).is_nan());
    }
}
