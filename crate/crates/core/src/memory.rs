//! Tiny exemplar memory.
//!
//! Entries keep the scene together with the labels it had when its task was
//! trained. Two maintenance policies: class-balanced (per-class quota
//! `⌊M / |C^{1:t}|⌋`, then random drop/supplement to exactly `M`) and a
//! reservoir over all task data seen so far.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::schedule::{ClassId, TaskSchedule};
use crate::seed;
use crate::synth::{LabelRaster, Scene, TaskSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplingPolicy {
    #[default]
    ClassBalanced,
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub scene: Scene,
    /// Task-time labels, never rewritten after storage.
    pub labels: LabelRaster,
    pub source_task: usize,
}

impl MemoryEntry {
    fn from_sample(s: &TaskSample, t: usize) -> Self {
        Self {
            scene: s.scene.clone(),
            labels: s.labels.clone(),
            source_task: t,
        }
    }

    pub fn classes(&self) -> BTreeSet<ClassId> {
        self.labels
            .classes_present()
            .into_iter()
            .filter(|c| c.is_foreground())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExemplarMemory {
    capacity: usize,
    entries: Vec<MemoryEntry>,
    index: BTreeMap<ClassId, Vec<usize>>,
    /// Total samples offered to the reservoir policy so far.
    seen_total: u64,
}

/// Outcome details of a memory update.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub quota: usize,
    pub size: usize,
    pub warning: Option<String>,
}

impl ExemplarMemory {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            ..Self::default()
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    /// Entry ids holding at least one pixel of each class.
    pub fn index(&self) -> &BTreeMap<ClassId, Vec<usize>> {
        &self.index
    }

    pub fn holdings(&self, c: ClassId) -> usize {
        self.index.get(&c).map_or(0, Vec::len)
    }

    fn with_entries(&self, entries: Vec<MemoryEntry>, seen_total: u64) -> Self {
        let mut index: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
        for (i, e) in entries.iter().enumerate() {
            for c in e.classes() {
                index.entry(c).or_default().push(i);
            }
        }
        Self {
            capacity: self.capacity,
            entries,
            index,
            seen_total,
        }
    }

    pub fn update(
        &self,
        policy: SamplingPolicy,
        task_dataset: &[TaskSample],
        schedule: &TaskSchedule,
        t: usize,
        seed: u64,
    ) -> Result<(Self, UpdateReport)> {
        match policy {
            SamplingPolicy::ClassBalanced => {
                self.update_class_balanced(task_dataset, schedule, t, seed)
            }
            SamplingPolicy::Random => {
                let mem = self.update_random(task_dataset, schedule, t, seed)?;
                let size = mem.len();
                Ok((
                    mem,
                    UpdateReport {
                        quota: 0,
                        size,
                        warning: None,
                    },
                ))
            }
        }
    }

    /// Class-balanced update after training task `t` on `task_dataset`.
    pub fn update_class_balanced(
        &self,
        task_dataset: &[TaskSample],
        schedule: &TaskSchedule,
        t: usize,
        seed: u64,
    ) -> Result<(Self, UpdateReport)> {
        let seen = schedule.seen_classes(t)?;
        let current = schedule.task(t)?;
        let mut rng = seed::rng(seed, &[seed::tag::MEMORY_UPDATE, t as u64]);
        let m = self.capacity;

        let new: Vec<MemoryEntry> = task_dataset
            .iter()
            .map(|s| MemoryEntry::from_sample(s, t))
            .collect();
        let new_classes: Vec<BTreeSet<ClassId>> = new.iter().map(MemoryEntry::classes).collect();

        if m < seen.len() {
            let entries = round_robin(&self.entries, &new, &seen, m, &mut rng);
            let mem = self.with_entries(entries, self.seen_total);
            let size = mem.len();
            return Ok((
                mem,
                UpdateReport {
                    quota: 0,
                    size,
                    warning: Some(format!(
                        "capacity {m} is below the {} seen classes; kept at most one entry per class",
                        seen.len()
                    )),
                },
            ));
        }

        let quota = m / seen.len();
        let mut pool: Vec<(MemoryEntry, BTreeSet<ClassId>)> = self
            .entries
            .iter()
            .map(|e| (e.clone(), e.classes()))
            .collect();

        // Trim every past class down to the quota without pushing any co-held
        // class below it.
        for &c in seen.difference(current) {
            loop {
                let counts = class_counts(pool.iter().map(|(_, cs)| cs));
                if counts.get(&c).copied().unwrap_or(0) <= quota {
                    break;
                }
                let candidates: Vec<usize> = pool
                    .iter()
                    .enumerate()
                    .filter(|(_, (_, cs))| {
                        cs.contains(&c)
                            && cs
                                .iter()
                                .all(|d| d == &c || counts.get(d).copied().unwrap_or(0) > quota)
                    })
                    .map(|(i, _)| i)
                    .collect();
                if candidates.is_empty() {
                    break;
                }
                let victim = candidates[rng.random_range(0..candidates.len())];
                pool.remove(victim);
            }
        }

        // Fill each current class up to the quota from D_t.
        let mut chosen: Vec<usize> = Vec::new();
        for &c in current {
            let have = chosen.iter().filter(|&&i| new_classes[i].contains(&c)).count();
            let need = quota.saturating_sub(have);
            let candidates: Vec<usize> = (0..new.len())
                .filter(|i| new_classes[*i].contains(&c) && !chosen.contains(i))
                .collect();
            let take = need.min(candidates.len());
            for j in index::sample(&mut rng, candidates.len(), take) {
                chosen.push(candidates[j]);
            }
        }
        for &i in &chosen {
            pool.push((new[i].clone(), new_classes[i].clone()));
        }

        // Random drop (keeping one holder per class) or supplement to exactly M.
        while pool.len() > m {
            let counts = class_counts(pool.iter().map(|(_, cs)| cs));
            let droppable: Vec<usize> = (0..pool.len())
                .filter(|&i| pool[i].1.iter().all(|d| counts[d] > 1))
                .collect();
            let victim = if droppable.is_empty() {
                rng.random_range(0..pool.len())
            } else {
                droppable[rng.random_range(0..droppable.len())]
            };
            pool.remove(victim);
        }
        let mut spare: Vec<usize> = (0..new.len()).filter(|i| !chosen.contains(i)).collect();
        while pool.len() < m && !spare.is_empty() {
            let j = spare.remove(rng.random_range(0..spare.len()));
            pool.push((new[j].clone(), new_classes[j].clone()));
        }

        let entries: Vec<MemoryEntry> = pool.into_iter().map(|(e, _)| e).collect();
        let mem = self.with_entries(entries, self.seen_total);
        let size = mem.len();
        Ok((
            mem,
            UpdateReport {
                quota,
                size,
                warning: None,
            },
        ))
    }

    /// Reservoir sampling over the stream of all task data seen so far.
    pub fn update_random(
        &self,
        task_dataset: &[TaskSample],
        schedule: &TaskSchedule,
        t: usize,
        seed: u64,
    ) -> Result<Self> {
        schedule.task(t)?;
        let mut rng = seed::rng(seed, &[seed::tag::MEMORY_UPDATE, t as u64]);
        let mut entries = self.entries.clone();
        let mut seen_total = self.seen_total;
        for s in task_dataset {
            seen_total += 1;
            if entries.len() < self.capacity {
                entries.push(MemoryEntry::from_sample(s, t));
            } else if self.capacity > 0 {
                let j = rng.random_range(0..seen_total);
                if (j as usize) < self.capacity {
                    entries[j as usize] = MemoryEntry::from_sample(s, t);
                }
            }
        }
        Ok(self.with_entries(entries, seen_total))
    }

    /// `k` entries for one half batch: without replacement when `k ≤ len`,
    /// with replacement otherwise. Deterministic per `(seed, step)`.
    pub fn sample_half_batch(&self, k: usize, seed: u64, step: u64) -> Result<Vec<&MemoryEntry>> {
        Ok(self
            .sample_indices(k, seed, step)?
            .into_iter()
            .map(|i| &self.entries[i])
            .collect())
    }

    pub fn sample_indices(&self, k: usize, seed: u64, step: u64) -> Result<Vec<usize>> {
        if self.entries.is_empty() {
            return Err(Error::precondition("cannot sample from an empty memory"));
        }
        let n = self.entries.len();
        let mut rng = seed::rng(seed, &[seed::tag::MEMORY_SAMPLE, step]);
        Ok(if k <= n {
            index::sample(&mut rng, n, k).into_vec()
        } else {
            (0..k).map(|_| rng.random_range(0..n)).collect()
        })
    }

    pub(crate) fn encode(&self, w: &mut Writer) {
        w.u64(self.capacity as u64);
        w.u64(self.seen_total);
        w.u64(self.entries.len() as u64);
        for e in &self.entries {
            w.u64(e.scene.scene_seed);
            w.u32(e.source_task as u32);
            w.bytes(&Raster::from_image(&e.scene.image).encode());
            w.bytes(&Raster::from_labels(&e.scene.full_labels).encode());
            w.bytes(&Raster::from_saliency(&e.scene.saliency).encode());
            w.bytes(&Raster::from_labels(&e.labels).encode());
        }
    }

    pub(crate) fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let capacity = r.u64()? as usize;
        let seen_total = r.u64()?;
        let n = r.len()?;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let scene_seed = r.u64()?;
            let source_task = r.u32()? as usize;
            let image = Raster::decode(r.bytes()?)?.to_image()?;
            let full_labels = Raster::decode(r.bytes()?)?.to_labels()?;
            let saliency = Raster::decode(r.bytes()?)?.to_saliency()?;
            let labels = Raster::decode(r.bytes()?)?.to_labels()?;
            entries.push(MemoryEntry {
                scene: Scene {
                    image,
                    full_labels,
                    saliency,
                    scene_seed,
                },
                labels,
                source_task,
            });
        }
        let base = Self::new(capacity);
        Ok(base.with_entries(entries, seen_total))
    }

    /// Write the memory as a directory of raster files plus `memory.json`.
    pub fn spill(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut manifest = SpillManifest {
            capacity: self.capacity,
            seen_total: self.seen_total,
            entries: Vec::new(),
        };
        for (i, e) in self.entries.iter().enumerate() {
            let stem = format!("entry_{i:05}");
            Raster::from_image(&e.scene.image).write(dir.join(format!("{stem}.image.ras")))?;
            Raster::from_labels(&e.scene.full_labels).write(dir.join(format!("{stem}.full.ras")))?;
            Raster::from_saliency(&e.scene.saliency)
                .write(dir.join(format!("{stem}.saliency.ras")))?;
            Raster::from_labels(&e.labels).write(dir.join(format!("{stem}.labels.ras")))?;
            manifest.entries.push(SpillEntry {
                stem,
                scene_seed: e.scene.scene_seed,
                source_task: e.source_task,
            });
        }
        fs::write(dir.join("memory.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load_spill(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: SpillManifest = serde_json::from_slice(&fs::read(dir.join("memory.json"))?)?;
        let entries = manifest
            .entries
            .iter()
            .map(|s| {
                let p = |suffix: &str| dir.join(format!("{}.{suffix}.ras", s.stem));
                Ok(MemoryEntry {
                    scene: Scene {
                        image: Raster::read(p("image"))?.to_image()?,
                        full_labels: Raster::read(p("full"))?.to_labels()?,
                        saliency: Raster::read(p("saliency"))?.to_saliency()?,
                        scene_seed: s.scene_seed,
                    },
                    labels: Raster::read(p("labels"))?.to_labels()?,
                    source_task: s.source_task,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(manifest.capacity).with_entries(entries, manifest.seen_total))
    }
}

#[derive(Serialize, Deserialize)]
struct SpillManifest {
    capacity: usize,
    seen_total: u64,
    entries: Vec<SpillEntry>,
}

#[derive(Serialize, Deserialize)]
struct SpillEntry {
    stem: String,
    scene_seed: u64,
    source_task: usize,
}

fn class_counts<'a>(sets: impl Iterator<Item = &'a BTreeSet<ClassId>>) -> BTreeMap<ClassId, usize> {
    let mut counts = BTreeMap::new();
    for s in sets {
        for &c in s {
            *counts.entry(c).or_insert(0) += 1;
        }
    }
    counts
}

/// Fallback when capacity is below the number of seen classes: one pass over the
/// seen classes, at most one entry each, until full.
fn round_robin(
    old: &[MemoryEntry],
    new: &[MemoryEntry],
    seen: &BTreeSet<ClassId>,
    capacity: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<MemoryEntry> {
    let all: Vec<&MemoryEntry> = old.iter().chain(new).collect();
    let classes: Vec<BTreeSet<ClassId>> = all.iter().map(|e| e.classes()).collect();
    let mut picked: Vec<usize> = Vec::new();
    for &c in seen {
        if picked.len() >= capacity {
            break;
        }
        if picked.iter().any(|&i| classes[i].contains(&c)) {
            continue;
        }
        let candidates: Vec<usize> = (0..all.len())
            .filter(|i| classes[*i].contains(&c) && !picked.contains(i))
            .collect();
        if !candidates.is_empty() {
            picked.push(candidates[rng.random_range(0..candidates.len())]);
        }
    }
    picked.into_iter().map(|i| all[i].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::make_schedule;
    use crate::synth::{Image, SaliencyMask};

    /// Sample whose task labels contain exactly `classes`.
    fn sample(seed: u64, classes: &[u16]) -> TaskSample {
        let mut ids = vec![ClassId::BACKGROUND; 16];
        for (j, &c) in classes.iter().enumerate() {
            ids[j] = ClassId(c);
        }
        let labels = LabelRaster::from_ids(4, 4, ids).unwrap();
        TaskSample {
            scene: Scene {
                image: Image::new(4, 4),
                saliency: SaliencyMask::oracle(&labels),
                full_labels: labels.clone(),
                scene_seed: seed,
            },
            labels,
        }
    }

    fn dataset(t_classes: &[u16], per_class: usize, base_seed: u64) -> Vec<TaskSample> {
        let mut out = Vec::new();
        for (k, &c) in t_classes.iter().enumerate() {
            for j in 0..per_class {
                out.push(sample(base_seed + (k * per_class + j) as u64, &[c]));
            }
        }
        out
    }

    #[test]
    fn ten_slots_three_classes() {
        // C_1 = {2, 3, 4}
        let sched = make_schedule(3, 1, 1, 0, 4).unwrap();
        let data = dataset(&[2, 3, 4], 6, 0);
        let (mem, rep) = ExemplarMemory::new(10)
            .update_class_balanced(&data, &sched, 1, 1)
            .unwrap();
        assert_eq!(rep.quota, 3);
        assert_eq!(mem.len(), 10);
        let holdings: Vec<usize> = [2, 3, 4].iter().map(|&c| mem.holdings(ClassId(c))).collect();
        assert_eq!(holdings.iter().sum::<usize>(), 10);
        assert!(holdings.iter().all(|&h| h == 3 || h == 4));
    }

    #[test]
    fn quota_shrinks_as_classes_arrive() {
        // 16 base classes, then 5 more: 100 / 16 = 6, 100 / 21 = 4.
        let sched = make_schedule(16, 5, 1, 0, 21).unwrap();
        let base: Vec<u16> = (2..18).collect();
        let inc: Vec<u16> = (18..23).collect();
        let (m1, r1) = ExemplarMemory::new(100)
            .update_class_balanced(&dataset(&base, 10, 0), &sched, 1, 3)
            .unwrap();
        assert_eq!(r1.quota, 6);
        assert_eq!(m1.len(), 100);
        let (m2, r2) = m1
            .update_class_balanced(&dataset(&inc, 10, 1000), &sched, 2, 3)
            .unwrap();
        assert_eq!(r2.quota, 4);
        assert_eq!(m2.len(), 100);
        // Past classes trimmed to the quota; the supplement comes from D_2.
        for c in 2..18 {
            assert_eq!(m2.holdings(ClassId(c)), 4, "class {c}");
        }
        for c in 18..23 {
            assert!(m2.holdings(ClassId(c)) >= 4, "class {c}");
        }
        let mean = (2..23).map(|c| m2.holdings(ClassId(c))).sum::<usize>() as f64 / 21.0;
        assert!((4.0..=6.0).contains(&mean));
    }

    #[test]
    fn multi_class_entries_respect_coverage() {
        let sched = make_schedule(2, 2, 1, 0, 4).unwrap();
        // Task 1: every image has both classes but a few have only class 3.
        let mut d1: Vec<TaskSample> = (0..8).map(|i| sample(i, &[2, 3])).collect();
        d1.push(sample(20, &[3]));
        let (m1, _) = ExemplarMemory::new(4).update_class_balanced(&d1, &sched, 1, 0).unwrap();
        let (m2, rep) = m1
            .update_class_balanced(&dataset(&[4, 5], 5, 100), &sched, 2, 0)
            .unwrap();
        assert_eq!(rep.quota, 1);
        assert_eq!(m2.len(), 4);
        for c in 2..6 {
            assert!(m2.holdings(ClassId(c)) >= 1, "class {c} lost");
        }
    }

    #[test]
    fn capacity_below_classes_warns() {
        let sched = make_schedule(3, 1, 1, 0, 4).unwrap();
        let (mem, rep) = ExemplarMemory::new(2)
            .update_class_balanced(&dataset(&[2, 3, 4], 3, 0), &sched, 1, 0)
            .unwrap();
        assert_eq!(rep.quota, 0);
        assert!(rep.warning.is_some());
        assert_eq!(mem.len(), 2);
        assert!(mem.index().values().all(|v| v.len() == 1));
    }

    #[test]
    fn class_balanced_is_pure() {
        let sched = make_schedule(3, 1, 1, 0, 4).unwrap();
        let data = dataset(&[2, 3, 4], 5, 0);
        let mem = ExemplarMemory::new(7);
        assert_eq!(
            mem.update_class_balanced(&data, &sched, 1, 9).unwrap(),
            mem.update_class_balanced(&data, &sched, 1, 9).unwrap()
        );
    }

    #[test]
    fn random_keeps_everything_when_large() {
        let sched = make_schedule(2, 1, 1, 0, 3).unwrap();
        let d1 = dataset(&[2, 3], 3, 0);
        let d2 = dataset(&[4], 3, 100);
        let m = ExemplarMemory::new(50).update_random(&d1, &sched, 1, 0).unwrap();
        let m = m.update_random(&d2, &sched, 2, 0).unwrap();
        assert_eq!(m.len(), 9);
        let again = ExemplarMemory::new(50)
            .update_random(&d1, &sched, 1, 0)
            .unwrap()
            .update_random(&d2, &sched, 2, 0)
            .unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn random_can_miss_classes() {
        // One large class and many singletons; a 4-slot reservoir misses some.
        let sched = make_schedule(9, 1, 1, 0, 10).unwrap();
        let mut data = dataset(&[2], 40, 0);
        for c in 3..11 {
            data.push(sample(1000 + c as u64, &[c]));
        }
        let mut missed = 0;
        for seed in 0..100 {
            let m = ExemplarMemory::new(4).update_random(&data, &sched, 1, seed).unwrap();
            assert_eq!(m.len(), 4);
            if (2..11).any(|c| m.holdings(ClassId(c)) == 0) {
                missed += 1;
            }
        }
        assert!(missed > 0);
    }

    #[test]
    fn half_batch_sampling() {
        let sched = make_schedule(2, 1, 1, 0, 3).unwrap();
        let (mem, _) = ExemplarMemory::new(6)
            .update_class_balanced(&dataset(&[2, 3], 3, 0), &sched, 1, 0)
            .unwrap();
        let mut perm = mem.sample_indices(6, 1, 0).unwrap();
        perm.sort();
        assert_eq!(perm, (0..6).collect::<Vec<_>>());
        assert_eq!(mem.sample_indices(1, 4, 2).unwrap(), mem.sample_indices(1, 4, 2).unwrap());
        assert_eq!(mem.sample_indices(10, 4, 2).unwrap().len(), 10);
        assert!(ExemplarMemory::new(3).sample_half_batch(1, 0, 0).is_err());

        // Chi-square on 10k single draws: 5 degrees of freedom.
        let mut counts = [0usize; 6];
        for step in 0..10_000 {
            counts[mem.sample_indices(1, 7, step).unwrap()[0]] += 1;
        }
        let expect = 10_000.0 / 6.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
        // 99.9th percentile of chi-square(5) is 20.5.
        assert!(chi2 < 20.5, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn encode_and_spill_round_trip() {
        let sched = make_schedule(2, 1, 1, 0, 3).unwrap();
        let (mem, _) = ExemplarMemory::new(4)
            .update_class_balanced(&dataset(&[2, 3], 3, 0), &sched, 1, 0)
            .unwrap();
        let mut w = Writer::default();
        mem.encode(&mut w);
        let back = ExemplarMemory::decode(&mut Reader::new(&w.buf)).unwrap();
        assert_eq!(back, mem);
        let dir = tempfile::tempdir().unwrap();
        mem.spill(dir.path()).unwrap();
        assert_eq!(ExemplarMemory::load_spill(dir.path()).unwrap(), mem);
    }
}
