//! Class id conventions and incremental task schedules.
//!
//! Id 0 is the background class, id 1 the unknown class; every id from 2 up is a
//! foreground object class. Tasks are numbered from 1.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct ClassId(pub u16);

impl ClassId {
    pub const BACKGROUND: ClassId = ClassId(0);
    pub const UNKNOWN: ClassId = ClassId(1);
    pub const FIRST_FOREGROUND: u16 = 2;

    pub fn is_foreground(self) -> bool {
        self.0 >= Self::FIRST_FOREGROUND
    }

    /// Background or unknown: the dummy label set.
    pub fn is_dummy(self) -> bool {
        !self.is_foreground()
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ClassId::BACKGROUND => f.write_str("bg"),
            ClassId::UNKNOWN => f.write_str("unk"),
            ClassId(id) => write!(f, "{id}"),
        }
    }
}

/// The foreground catalog `{2, .., catalog_size + 1}`.
pub fn catalog(catalog_size: usize) -> Vec<ClassId> {
    (0..catalog_size)
        .map(|i| ClassId(ClassId::FIRST_FOREGROUND + i as u16))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSchedule {
    tasks: Vec<BTreeSet<ClassId>>,
    ordering_seed: u64,
}

impl TaskSchedule {
    /// Build a schedule from explicit class sets, checking every invariant.
    pub fn from_tasks(tasks: Vec<BTreeSet<ClassId>>, ordering_seed: u64) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::config("schedule needs at least one task"));
        }
        let mut seen = BTreeSet::new();
        for (i, task) in tasks.iter().enumerate() {
            if task.is_empty() {
                return Err(Error::config(format!("task {} has no classes", i + 1)));
            }
            for &c in task {
                if !c.is_foreground() {
                    return Err(Error::config(format!(
                        "task {} contains reserved class id {}",
                        i + 1,
                        c.0
                    )));
                }
                if !seen.insert(c) {
                    return Err(Error::config(format!(
                        "class {} appears in more than one task",
                        c.0
                    )));
                }
            }
        }
        Ok(Self {
            tasks,
            ordering_seed,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn ordering_seed(&self) -> u64 {
        self.ordering_seed
    }

    pub fn tasks(&self) -> &[BTreeSet<ClassId>] {
        &self.tasks
    }

    /// Class set `C_t`, 1-based.
    pub fn task(&self, t: usize) -> Result<&BTreeSet<ClassId>> {
        self.check_step(t)?;
        Ok(&self.tasks[t - 1])
    }

    /// Union `C_1 ∪ .. ∪ C_t`.
    pub fn seen_classes(&self, t: usize) -> Result<BTreeSet<ClassId>> {
        self.check_step(t)?;
        Ok(self.tasks[..t].iter().flatten().copied().collect())
    }

    /// Classes learned before task `t` (empty for t = 1).
    pub fn past_classes(&self, t: usize) -> Result<BTreeSet<ClassId>> {
        self.check_step(t)?;
        Ok(self.tasks[..t - 1].iter().flatten().copied().collect())
    }

    pub fn all_classes(&self) -> BTreeSet<ClassId> {
        self.tasks.iter().flatten().copied().collect()
    }

    /// Task index that introduces `class`, if any.
    pub fn task_of(&self, class: ClassId) -> Option<usize> {
        self.tasks.iter().position(|s| s.contains(&class)).map(|i| i + 1)
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.tasks.len() {
            return Err(Error::Range {
                what: "task index",
                value: t as i64,
                lo: 1,
                hi: self.tasks.len() as i64,
            });
        }
        Ok(())
    }
}

/// Base-step schedule (`B-S` naming): `base_count` classes first, then
/// `num_steps` tasks of `step_count` classes each, drawn from a permutation of
/// the catalog keyed by `ordering_seed`.
pub fn make_schedule(
    base_count: usize,
    step_count: usize,
    num_steps: usize,
    ordering_seed: u64,
    catalog_size: usize,
) -> Result<TaskSchedule> {
    if base_count == 0 || step_count == 0 || catalog_size == 0 {
        return Err(Error::config(
            "base_count, step_count and catalog_size must all be at least 1",
        ));
    }
    let needed = base_count + step_count * num_steps;
    if needed > catalog_size {
        return Err(Error::config(format!(
            "schedule needs {needed} classes but the catalog has {catalog_size} (short by {})",
            needed - catalog_size
        )));
    }
    let mut order = catalog(catalog_size);
    if ordering_seed != 0 {
        order.shuffle(&mut seed::rng(ordering_seed, &[seed::tag::ORDERING]));
    }
    let mut tasks = Vec::with_capacity(num_steps + 1);
    tasks.push(order[..base_count].iter().copied().collect());
    for s in 0..num_steps {
        let lo = base_count + s * step_count;
        tasks.push(order[lo..lo + step_count].iter().copied().collect());
    }
    TaskSchedule::from_tasks(tasks, ordering_seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_two_two() {
        let s = make_schedule(4, 2, 2, 0, 8).unwrap();
        assert_eq!(s.num_tasks(), 3);
        assert_eq!(s.task(1).unwrap().len(), 4);
        assert_eq!(s.task(2).unwrap().len(), 2);
        assert_eq!(s.task(3).unwrap().len(), 2);
        let all = s.all_classes();
        assert_eq!(all.len(), 8);
        assert!(all.iter().all(|c| c.0 >= 2));
    }

    #[test]
    fn voc_15_1_has_six_tasks() {
        let s = make_schedule(15, 1, 5, 0, 20).unwrap();
        assert_eq!(s.num_tasks(), 6);
        assert_eq!(s.seen_classes(6).unwrap().len(), 20);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = make_schedule(4, 2, 2, 3, 8).unwrap();
        let b = make_schedule(4, 2, 2, 3, 8).unwrap();
        assert_eq!(a, b);
        let orders: BTreeSet<Vec<ClassId>> = (1..6)
            .map(|seed| {
                make_schedule(4, 2, 2, seed, 8)
                    .unwrap()
                    .tasks()
                    .iter()
                    .flatten()
                    .copied()
                    .collect()
            })
            .collect();
        assert!(orders.len() > 1);
    }

    #[test]
    fn catalog_deficit_is_named() {
        let err = make_schedule(15, 2, 5, 0, 20).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("short by 5")), "{err}");
        assert!(make_schedule(0, 1, 1, 0, 4).is_err());
    }

    #[test]
    fn seen_classes_bounds() {
        let s = make_schedule(4, 2, 2, 0, 8).unwrap();
        assert_eq!(&s.seen_classes(1).unwrap(), s.task(1).unwrap());
        assert_eq!(s.seen_classes(3).unwrap(), s.all_classes());
        assert!(matches!(s.seen_classes(0), Err(Error::Range { .. })));
        assert!(matches!(s.seen_classes(4), Err(Error::Range { .. })));
        assert!(s.past_classes(1).unwrap().is_empty());
    }

    #[test]
    fn rejects_overlap_and_reserved_ids() {
        let t = |ids: &[u16]| ids.iter().map(|&i| ClassId(i)).collect::<BTreeSet<_>>();
        assert!(TaskSchedule::from_tasks(vec![t(&[2, 3]), t(&[3])], 0).is_err());
        assert!(TaskSchedule::from_tasks(vec![t(&[1, 3])], 0).is_err());
        assert!(TaskSchedule::from_tasks(vec![t(&[2]), t(&[])], 0).is_err());
        assert!(TaskSchedule::from_tasks(vec![], 0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn nested_and_disjoint(base in 1usize..6, step in 1usize..4, steps in 0usize..4, seed in 0u64..1000) {
                let size = base + step * steps + 2;
                let s = make_schedule(base, step, steps, seed, size).unwrap();
                let mut total = 0;
                for t in 1..=s.num_tasks() {
                    total += s.task(t).unwrap().len();
                    let seen = s.seen_classes(t).unwrap();
                    prop_assert_eq!(seen.len(), total);
                    if t > 1 {
                        prop_assert!(s.seen_classes(t - 1).unwrap().is_subset(&seen));
                    }
                }
                for c in s.all_classes() {
                    let owners = s.tasks().iter().filter(|task| task.contains(&c)).count();
                    prop_assert_eq!(owners, 1);
                }
            }
        }
    }
}
