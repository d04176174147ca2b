//! Deterministic synthetic scenes: textured background plus a few flat-shaded
//! geometric objects whose color and stripe texture are keyed by class id.
//! Classes come in look-alike sibling pairs, so a head trained without
//! negatives of its sibling tends to fire on it.
//! Saliency is the oracle union of object masks.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::{ClassId, TaskSchedule};
use crate::seed;

pub const CHANNELS: usize = 3;

/// Row-major `H × W × 3` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * CHANNELS],
        }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * CHANNELS {
            return Err(Error::shape(format!(
                "image {height}x{width}x{CHANNELS} needs {} values, got {}",
                height * width * CHANNELS,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, i: usize) -> &[f32] {
        &self.data[i * CHANNELS..(i + 1) * CHANNELS]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelRaster {
    pub height: usize,
    pub width: usize,
    pub ids: Vec<ClassId>,
}

impl LabelRaster {
    pub fn filled(height: usize, width: usize, id: ClassId) -> Self {
        Self {
            height,
            width,
            ids: vec![id; height * width],
        }
    }

    pub fn from_ids(height: usize, width: usize, ids: Vec<ClassId>) -> Result<Self> {
        if ids.len() != height * width {
            return Err(Error::shape(format!(
                "label raster {height}x{width} needs {} ids, got {}",
                height * width,
                ids.len()
            )));
        }
        Ok(Self { height, width, ids })
    }

    pub fn num_pixels(&self) -> usize {
        self.ids.len()
    }

    pub fn classes_present(&self) -> BTreeSet<ClassId> {
        self.ids.iter().copied().collect()
    }

    pub fn contains(&self, c: ClassId) -> bool {
        self.ids.contains(&c)
    }

    pub fn same_shape(&self, height: usize, width: usize) -> bool {
        self.height == height && self.width == width
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SaliencyMask {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
}

impl SaliencyMask {
    /// Oracle saliency: exactly the foreground pixels of `labels`.
    pub fn oracle(labels: &LabelRaster) -> Self {
        Self {
            height: labels.height,
            width: labels.width,
            mask: labels.ids.iter().map(|c| c.is_foreground()).collect(),
        }
    }

    /// Flip a random `fraction` of the pixels, emulating an imperfect detector.
    pub fn corrupted(&self, fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::config(format!(
                "saliency corruption {fraction} outside [0, 1]"
            )));
        }
        let n = self.mask.len();
        let flips = (fraction * n as f64).round() as usize;
        let mut out = self.clone();
        let mut rng = seed::rng(seed, &[seed::tag::SALIENCY]);
        for i in index::sample(&mut rng, n, flips) {
            out.mask[i] = !out.mask[i];
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub full_labels: LabelRaster,
    pub saliency: SaliencyMask,
    pub scene_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    #[default]
    Overlapped,
    Disjoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeometryConfig {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object extent (bounding box side) range in pixels.
    pub min_size: usize,
    pub max_size: usize,
    /// Std. dev. of i.i.d. per-pixel noise.
    pub noise_sigma: f32,
    /// Half-width of the per-object uniform color jitter.
    pub color_jitter: f32,
    /// Amplitude of the class-keyed stripe texture.
    pub texture_amplitude: f32,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            min_objects: 1,
            max_objects: 3,
            min_size: 8,
            max_size: 16,
            noise_sigma: 0.02,
            color_jitter: 0.04,
            texture_amplitude: 0.08,
        }
    }
}

impl GeometryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::config("images must be at least 8x8"));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::config(format!(
                "object count range {}..={} is invalid",
                self.min_objects, self.max_objects
            )));
        }
        if self.min_size < 3 || self.min_size > self.max_size {
            return Err(Error::config(format!(
                "object size range {}..={} is invalid",
                self.min_size, self.max_size
            )));
        }
        if self.min_size > self.height.min(self.width) {
            return Err(Error::config(format!(
                "minimum object size {} does not fit a {}x{} image",
                self.min_size, self.height, self.width
            )));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("color_jitter", self.color_jitter),
            ("texture_amplitude", self.texture_amplitude),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect,
    Disc,
    Triangle,
}

/// Class-keyed appearance: an HSV base color and a stripe texture.
#[derive(Debug, Clone, Copy)]
struct Appearance {
    rgb: [f32; 3],
    /// Stripe direction as (dy, dx) weights; zero means untextured.
    stripe: (f32, f32),
    period: f32,
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor() as i32;
    let f = h6 - sector as f32;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn appearance(class: ClassId) -> Appearance {
    let k = class.0.saturating_sub(ClassId::FIRST_FOREGROUND) as usize;
    // Within each block of eight, classes k and k + 4 are siblings: same hue and
    // value, saturation 0.1 apart. Golden-ratio spacing over the families keeps
    // unrelated classes well spread.
    let family = (k / 8) * 4 + k % 4;
    let hue = (family as f32 * 0.618_034).fract();
    let sat = [0.85, 0.75][(k / 4) % 2];
    let val = [0.9, 0.65][family % 2];
    let stripe = [(0.0, 1.0), (1.0, 0.0), (0.707, 0.707), (0.0, 0.0)][(k / 4) % 4];
    Appearance {
        rgb: hsv_to_rgb(hue, sat, val),
        stripe,
        period: 3.0 + (k % 3) as f32,
    }
}

struct Placed {
    class: ClassId,
    shape: Shape,
    cy: f32,
    cx: f32,
    half_h: f32,
    half_w: f32,
    /// Triangle orientation flip.
    flip: bool,
}

impl Placed {
    fn covers(&self, y: usize, x: usize) -> bool {
        let dy = (y as f32 + 0.5 - self.cy) / self.half_h;
        let dx = (x as f32 + 0.5 - self.cx) / self.half_w;
        match self.shape {
            Shape::Rect => dy.abs() <= 1.0 && dx.abs() <= 1.0,
            Shape::Disc => dy * dy + dx * dx <= 1.0,
            Shape::Triangle => {
                // Apex at top (or bottom when flipped), base spanning the box.
                let dy = if self.flip { -dy } else { dy };
                (-1.0..=1.0).contains(&dy) && dx.abs() <= (dy + 1.0) / 2.0
            }
        }
    }
}

fn place_object(rng: &mut ChaCha8Rng, class: ClassId, geom: &GeometryConfig) -> Placed {
    let shape = match rng.random_range(0..3) {
        0 => Shape::Rect,
        1 => Shape::Disc,
        _ => Shape::Triangle,
    };
    let max_h = geom.max_size.min(geom.height);
    let max_w = geom.max_size.min(geom.width);
    let h = rng.random_range(geom.min_size..=max_h) as f32;
    let w = rng.random_range(geom.min_size..=max_w) as f32;
    let cy = rng.random_range(h / 2.0..=geom.height as f32 - h / 2.0);
    let cx = rng.random_range(w / 2.0..=geom.width as f32 - w / 2.0);
    Placed {
        class,
        shape,
        cy,
        cx,
        half_h: h / 2.0,
        half_w: w / 2.0,
        flip: rng.random_bool(0.5),
    }
}

fn paint_background(rng: &mut ChaCha8Rng, image: &mut Image) {
    // Low-saturation gray with a tint and a slow two-wave blotch pattern.
    let gray: f32 = rng.random_range(0.3..0.7);
    let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.04..0.04));
    let fy: f32 = rng.random_range(0.1..0.35);
    let fx: f32 = rng.random_range(0.1..0.35);
    let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    for y in 0..image.height {
        for x in 0..image.width {
            let wave = 0.08 * ((fy * y as f32 + phase).sin() * (fx * x as f32).cos());
            let base = (y * image.width + x) * CHANNELS;
            for ch in 0..CHANNELS {
                image.data[base + ch] = gray + tint[ch] + wave;
            }
        }
    }
}

fn paint_object(rng: &mut ChaCha8Rng, obj: &Placed, geom: &GeometryConfig, scene: &mut Scene) {
    let look = appearance(obj.class);
    let j = geom.color_jitter;
    let jitter: [f32; 3] = std::array::from_fn(|_| {
        if j > 0.0 {
            rng.random_range(-j..=j)
        } else {
            0.0
        }
    });
    let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let amp = if look.stripe == (0.0, 0.0) {
        0.0
    } else {
        geom.texture_amplitude
    };
    let width = scene.image.width;
    for y in 0..scene.image.height {
        for x in 0..width {
            if !obj.covers(y, x) {
                continue;
            }
            let i = y * width + x;
            let along = look.stripe.0 * y as f32 + look.stripe.1 * x as f32;
            let tex = amp * (std::f32::consts::TAU * along / look.period + phase).sin();
            for ch in 0..CHANNELS {
                scene.image.data[i * CHANNELS + ch] = look.rgb[ch] + jitter[ch] + tex;
            }
            scene.full_labels.ids[i] = obj.class;
        }
    }
}

fn finish_image(rng: &mut ChaCha8Rng, sigma: f32, image: &mut Image) {
    let noise = (sigma > 0.0).then(|| Normal::new(0.0f32, sigma).expect("sigma validated"));
    for v in image.data.iter_mut() {
        if let Some(n) = &noise {
            *v += n.sample(rng);
        }
        *v = v.clamp(0.0, 1.0);
    }
}

/// Draws objects back to front; the classes come from `classes` in order.
fn render(seed: u64, geom: &GeometryConfig, classes: &[ClassId], rng: &mut ChaCha8Rng) -> Scene {
    let (h, w) = (geom.height, geom.width);
    let mut scene = Scene {
        image: Image::new(h, w),
        full_labels: LabelRaster::filled(h, w, ClassId::BACKGROUND),
        saliency: SaliencyMask {
            height: h,
            width: w,
            mask: vec![false; h * w],
        },
        scene_seed: seed,
    };
    paint_background(rng, &mut scene.image);
    for &class in classes {
        let obj = place_object(rng, class, geom);
        paint_object(rng, &obj, geom, &mut scene);
    }
    finish_image(rng, geom.noise_sigma, &mut scene.image);
    scene.saliency = SaliencyMask::oracle(&scene.full_labels);
    scene
}

/// One scene with 1..=max_objects objects whose classes are drawn uniformly from
/// `catalog`.
pub fn generate_scene(seed: u64, catalog: &[ClassId], geom: &GeometryConfig) -> Result<Scene> {
    geom.validate()?;
    if catalog.is_empty() {
        return Err(Error::config("scene catalog is empty"));
    }
    if let Some(c) = catalog.iter().find(|c| !c.is_foreground()) {
        return Err(Error::config(format!("catalog contains reserved id {}", c.0)));
    }
    let mut rng = seed::rng(seed, &[seed::tag::SCENE]);
    let k = rng.random_range(geom.min_objects..=geom.max_objects);
    let classes: Vec<ClassId> = (0..k)
        .map(|_| catalog[rng.random_range(0..catalog.len())])
        .collect();
    Ok(render(seed, geom, &classes, &mut rng))
}

/// Scene containing at least one object of `required` (drawn at a random depth)
/// with the remaining objects from `others`.
fn compose_scene(
    seed: u64,
    required: &[ClassId],
    others: &[ClassId],
    geom: &GeometryConfig,
) -> Scene {
    let mut rng = seed::rng(seed, &[seed::tag::SCENE]);
    let k = rng.random_range(geom.min_objects..=geom.max_objects);
    let slot = rng.random_range(0..k);
    let classes: Vec<ClassId> = (0..k)
        .map(|j| {
            let pool = if j == slot { required } else { others };
            pool[rng.random_range(0..pool.len())]
        })
        .collect();
    render(seed, geom, &classes, &mut rng)
}

/// Task-time labels: pixels of `C_t` keep their class, everything else is
/// background. Identical for both protocols; the disjoint protocol differs only
/// in which scenes are sampled.
pub fn relabel_for_task(
    scene: &Scene,
    schedule: &TaskSchedule,
    t: usize,
    _protocol: Protocol,
) -> Result<LabelRaster> {
    let current = schedule.task(t)?;
    Ok(relabel(&scene.full_labels, current))
}

pub(crate) fn relabel(labels: &LabelRaster, keep: &BTreeSet<ClassId>) -> LabelRaster {
    LabelRaster {
        height: labels.height,
        width: labels.width,
        ids: labels
            .ids
            .iter()
            .map(|c| {
                if keep.contains(c) {
                    *c
                } else {
                    ClassId::BACKGROUND
                }
            })
            .collect(),
    }
}

/// Full labels with every class outside `seen` mapped to background.
pub fn restrict_to_seen(labels: &LabelRaster, seen: &BTreeSet<ClassId>) -> LabelRaster {
    relabel(labels, seen)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSample {
    pub scene: Scene,
    /// Task-time labels over `{c_b} ∪ C_t`.
    pub labels: LabelRaster,
}

const MAX_COMPOSE_ATTEMPTS: u64 = 64;

/// Training set `D_t`. Every sample shows at least one pixel of `C_t`.
/// Overlapped: other objects come from the whole schedule catalog (past and
/// future classes appear unlabeled). Disjoint: other objects only from `C^{1:t}`.
pub fn build_task_dataset(
    schedule: &TaskSchedule,
    t: usize,
    n_scenes: usize,
    dataset_seed: u64,
    protocol: Protocol,
    geom: &GeometryConfig,
) -> Result<Vec<TaskSample>> {
    geom.validate()?;
    if n_scenes == 0 {
        return Err(Error::config("task dataset needs at least one scene"));
    }
    let current = schedule.task(t)?;
    let required: Vec<ClassId> = current.iter().copied().collect();
    let others: Vec<ClassId> = match protocol {
        Protocol::Overlapped => schedule.all_classes().into_iter().collect(),
        Protocol::Disjoint => schedule.seen_classes(t)?.into_iter().collect(),
    };
    (0..n_scenes)
        .map(|i| {
            for attempt in 0..MAX_COMPOSE_ATTEMPTS {
                let s = seed::derive(
                    dataset_seed,
                    &[seed::tag::TASK_DATA, t as u64, i as u64, attempt],
                );
                let scene = compose_scene(s, &required, &others, geom);
                let labels = relabel(&scene.full_labels, current);
                if labels.ids.iter().any(|c| current.contains(c)) {
                    return Ok(TaskSample { scene, labels });
                }
            }
            Err(Error::config(format!(
                "could not place a visible task-{t} object after {MAX_COMPOSE_ATTEMPTS} attempts"
            )))
        })
        .collect()
}

/// Held-out scenes drawn from the whole schedule catalog.
pub fn build_eval_set(
    schedule: &TaskSchedule,
    n_scenes: usize,
    eval_seed: u64,
    geom: &GeometryConfig,
) -> Result<Vec<Scene>> {
    let all: Vec<ClassId> = schedule.all_classes().into_iter().collect();
    (0..n_scenes)
        .map(|i| {
            generate_scene(
                seed::derive(eval_seed, &[seed::tag::EVAL_DATA, i as u64]),
                &all,
                geom,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::make_schedule;

    fn components(labels: &LabelRaster) -> usize {
        let (h, w) = (labels.height, labels.width);
        let mut seen = vec![false; h * w];
        let mut count = 0;
        for start in 0..h * w {
            if seen[start] || !labels.ids[start].is_foreground() {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(i) = stack.pop() {
                let (y, x) = (i / w, i % w);
                let mut push = |ny: usize, nx: usize| {
                    let j = ny * w + nx;
                    if !seen[j] && labels.ids[j].is_foreground() {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if y > 0 {
                    push(y - 1, x);
                }
                if y + 1 < h {
                    push(y + 1, x);
                }
                if x > 0 {
                    push(y, x - 1);
                }
                if x + 1 < w {
                    push(y, x + 1);
                }
            }
        }
        count
    }

    #[test]
    fn single_class_catalog() {
        let scene = generate_scene(11, &[ClassId(2)], &GeometryConfig::default()).unwrap();
        let fg: BTreeSet<_> = scene
            .full_labels
            .ids
            .iter()
            .filter(|c| c.is_foreground())
            .collect();
        assert_eq!(fg.into_iter().collect::<Vec<_>>(), vec![&ClassId(2)]);
    }

    #[test]
    fn deterministic() {
        let cat = crate::schedule::catalog(8);
        let g = GeometryConfig::default();
        assert_eq!(
            generate_scene(5, &cat, &g).unwrap(),
            generate_scene(5, &cat, &g).unwrap()
        );
        assert_ne!(
            generate_scene(5, &cat, &g).unwrap().image,
            generate_scene(6, &cat, &g).unwrap().image
        );
    }

    #[test]
    fn component_count_within_requested() {
        let cat = crate::schedule::catalog(8);
        let g = GeometryConfig {
            max_objects: 4,
            ..GeometryConfig::default()
        };
        for s in 0..200 {
            let scene = generate_scene(s, &cat, &g).unwrap();
            let n = components(&scene.full_labels);
            assert!((1..=4).contains(&n), "seed {s}: {n} components");
        }
    }

    #[test]
    fn oracle_saliency_and_value_range() {
        let cat = crate::schedule::catalog(8);
        for s in 0..50 {
            let scene = generate_scene(s, &cat, &GeometryConfig::default()).unwrap();
            for (i, &m) in scene.saliency.mask.iter().enumerate() {
                assert_eq!(m, scene.full_labels.ids[i].is_foreground());
            }
            assert!(scene.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn impossible_geometry_rejected() {
        let g = GeometryConfig {
            min_size: 40,
            max_size: 40,
            ..GeometryConfig::default()
        };
        assert!(matches!(
            generate_scene(0, &[ClassId(2)], &g),
            Err(Error::Config(_))
        ));
        assert!(generate_scene(0, &[], &GeometryConfig::default()).is_err());
        assert!(generate_scene(0, &[ClassId::UNKNOWN], &GeometryConfig::default()).is_err());
    }

    #[test]
    fn relabel_branches() {
        let sched = make_schedule(2, 1, 1, 0, 3).unwrap();
        // C_1 = {2, 3}, C_2 = {4}
        let labels = LabelRaster::from_ids(
            1,
            4,
            vec![ClassId(4), ClassId(2), ClassId::BACKGROUND, ClassId(3)],
        )
        .unwrap();
        let scene = Scene {
            image: Image::new(1, 4),
            saliency: SaliencyMask::oracle(&labels),
            full_labels: labels,
            scene_seed: 0,
        };
        let out = relabel_for_task(&scene, &sched, 2, Protocol::Overlapped).unwrap();
        assert_eq!(
            out.ids,
            vec![
                ClassId(4),
                ClassId::BACKGROUND,
                ClassId::BACKGROUND,
                ClassId::BACKGROUND
            ]
        );
        assert!(relabel_for_task(&scene, &sched, 3, Protocol::Overlapped).is_err());
    }

    #[test]
    fn task_datasets() {
        let sched = make_schedule(4, 2, 2, 0, 8).unwrap();
        let g = GeometryConfig::default();
        for t in 1..=3 {
            let current = sched.task(t).unwrap();
            let data = build_task_dataset(&sched, t, 30, 9, Protocol::Overlapped, &g).unwrap();
            assert_eq!(data.len(), 30);
            for s in &data {
                assert!(s.labels.ids.iter().any(|c| current.contains(c)));
                assert!(s
                    .labels
                    .ids
                    .iter()
                    .all(|c| *c == ClassId::BACKGROUND || current.contains(c)));
            }
            let again = build_task_dataset(&sched, t, 30, 9, Protocol::Overlapped, &g).unwrap();
            assert_eq!(data, again);
        }
        // Overlapped task-2 data sees other tasks' classes sitting in the background.
        let d2 = build_task_dataset(&sched, 2, 60, 9, Protocol::Overlapped, &g).unwrap();
        let hidden: BTreeSet<ClassId> = d2
            .iter()
            .flat_map(|s| s.scene.full_labels.classes_present())
            .filter(|c| c.is_foreground() && !sched.task(2).unwrap().contains(c))
            .collect();
        assert!(!hidden.is_empty());
        // Disjoint task-2 data never contains future classes.
        let seen = sched.seen_classes(2).unwrap();
        let dj = build_task_dataset(&sched, 2, 60, 9, Protocol::Disjoint, &g).unwrap();
        for s in &dj {
            assert!(s
                .scene
                .full_labels
                .classes_present()
                .iter()
                .all(|c| !c.is_foreground() || seen.contains(c)));
        }
    }

    #[test]
    fn saliency_corruption_flips_exact_fraction() {
        let scene = generate_scene(3, &[ClassId(2)], &GeometryConfig::default()).unwrap();
        let noisy = scene.saliency.corrupted(0.1, 1).unwrap();
        let flipped = noisy
            .mask
            .iter()
            .zip(&scene.saliency.mask)
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(flipped, (0.1f64 * 1024.0).round() as usize);
        assert_eq!(scene.saliency.corrupted(0.0, 1).unwrap(), scene.saliency);
        assert!(scene.saliency.corrupted(1.5, 1).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn relabel_is_idempotent_and_confined(seed in 0u64..10_000, t in 1usize..=3) {
                let sched = make_schedule(4, 2, 2, 0, 8).unwrap();
                let cat: Vec<ClassId> = sched.all_classes().into_iter().collect();
                let scene = generate_scene(seed, &cat, &GeometryConfig::default()).unwrap();
                let once = relabel_for_task(&scene, &sched, t, Protocol::Overlapped).unwrap();
                let current = sched.task(t).unwrap();
                prop_assert!(once.ids.iter().all(|c| *c == ClassId::BACKGROUND || current.contains(c)));
                let twice = relabel(&once, current);
                prop_assert_eq!(once, twice);
            }
        }
    }
}
