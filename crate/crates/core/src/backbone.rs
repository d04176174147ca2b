//! Fixed convolutional feature extractor.
//!
//! Weights are set once at construction and never updated: there is no mutable
//! access to them. All convolutions are stride 1 with zero "same" padding, so
//! features stay pixel-aligned with labels.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed;
use crate::synth::{Image, CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StageSpec {
    /// Color identity, 3×3 box average per channel, and 3×3 Sobel gradients of
    /// luminance: 3 → 8 channels, no nonlinearity.
    Handcrafted,
    /// Seeded Gaussian `k × k` convolution, weights scaled by `1/sqrt(fan_in)`.
    Random {
        kernel: usize,
        out_channels: usize,
        #[serde(default)]
        relu: bool,
        #[serde(default)]
        bias_std: f32,
    },
    /// Random Fourier features: `cos(<w, x> + b)` with `w ~ N(0, bandwidth²)`
    /// and `b ~ U[0, 2π)`, 1×1.
    Fourier { out_channels: usize, bandwidth: f32 },
    /// 1×1 identity.
    Identity,
}

/// Pointwise nonlinearity applied after a stage's convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Cos,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Cos => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Cos),
            _ => None,
        }
    }
}

pub const HANDCRAFTED_CHANNELS: usize = 8;

pub fn default_stages() -> Vec<StageSpec> {
    vec![
        StageSpec::Handcrafted,
        StageSpec::Fourier {
            out_channels: 64,
            bandwidth: 4.0,
        },
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvStage {
    kernel: usize,
    in_channels: usize,
    out_channels: usize,
    /// `[out][in][ky][kx]`
    weights: Vec<f32>,
    bias: Vec<f32>,
    activation: Activation,
}

impl ConvStage {
    pub fn new(
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
        activation: Activation,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::config(format!("kernel size {kernel} must be odd")));
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::config("stage channel counts must be positive"));
        }
        if weights.len() != out_channels * in_channels * kernel * kernel
            || bias.len() != out_channels
        {
            return Err(Error::config(format!(
                "stage {kernel}x{kernel}x{in_channels}x{out_channels} has {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        if weights.iter().chain(&bias).any(|w| !w.is_finite()) {
            return Err(Error::config("stage weights must be finite"));
        }
        Ok(Self {
            kernel,
            in_channels,
            out_channels,
            weights,
            bias,
            activation,
        })
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    fn handcrafted() -> Self {
        let (k, cin, cout) = (3, CHANNELS, HANDCRAFTED_CHANNELS);
        let mut w = vec![0.0f32; cout * cin * k * k];
        let at = |o: usize, i: usize, ky: usize, kx: usize| ((o * cin + i) * k + ky) * k + kx;
        for ch in 0..CHANNELS {
            w[at(ch, ch, 1, 1)] = 1.0;
            for ky in 0..3 {
                for kx in 0..3 {
                    w[at(CHANNELS + ch, ch, ky, kx)] = 1.0 / 9.0;
                }
            }
        }
        // Sobel on luminance (mean of RGB), normalized to [-1, 1] on [0,1] input.
        let sobel_x = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
        for ch in 0..CHANNELS {
            for ky in 0..3 {
                for kx in 0..3 {
                    w[at(6, ch, ky, kx)] = sobel_x[ky][kx] / (4.0 * CHANNELS as f32);
                    w[at(7, ch, ky, kx)] = sobel_x[kx][ky] / (4.0 * CHANNELS as f32);
                }
            }
        }
        Self {
            kernel: k,
            in_channels: cin,
            out_channels: cout,
            weights: w,
            bias: vec![0.0; cout],
            activation: Activation::Identity,
        }
    }

    fn identity(channels: usize) -> Self {
        let mut w = vec![0.0; channels * channels];
        for c in 0..channels {
            w[c * channels + c] = 1.0;
        }
        Self {
            kernel: 1,
            in_channels: channels,
            out_channels: channels,
            weights: w,
            bias: vec![0.0; channels],
            activation: Activation::Identity,
        }
    }

    fn apply(&self, input: &FeatureTensor) -> FeatureTensor {
        let (h, w, k) = (input.height, input.width, self.kernel);
        let r = (k / 2) as isize;
        let (cin, cout) = (self.in_channels, self.out_channels);
        let mut out = vec![0.0f32; h * w * cout];
        for y in 0..h {
            for x in 0..w {
                let acc = &mut out[(y * w + x) * cout..(y * w + x + 1) * cout];
                acc.copy_from_slice(&self.bias);
                for ky in 0..k {
                    let sy = y as isize + ky as isize - r;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = x as isize + kx as isize - r;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = &input.data[(sy as usize * w + sx as usize) * cin..][..cin];
                        for (o, a) in acc.iter_mut().enumerate() {
                            let base = o * cin * k * k + ky * k + kx;
                            let mut s = 0.0f32;
                            for (i, &v) in src.iter().enumerate() {
                                s += self.weights[base + i * k * k] * v;
                            }
                            *a += s;
                        }
                    }
                }
                match self.activation {
                    Activation::Identity => {}
                    Activation::Relu => acc.iter_mut().for_each(|v| *v = v.max(0.0)),
                    Activation::Cos => acc.iter_mut().for_each(|v| *v = v.cos()),
                }
            }
        }
        FeatureTensor {
            height: h,
            width: w,
            dim: cout,
            data: out,
        }
    }

    /// Per-output-channel bound on |value| given per-input-channel bounds.
    fn bound(&self, input: &[f32]) -> Vec<f32> {
        if self.activation == Activation::Cos {
            return vec![1.0; self.out_channels];
        }
        let kk = self.kernel * self.kernel;
        (0..self.out_channels)
            .map(|o| {
                let mut b = self.bias[o].abs();
                for (i, &bi) in input.iter().enumerate() {
                    let row = &self.weights[(o * self.in_channels + i) * kk..][..kk];
                    b += bi * row.iter().map(|w| w.abs()).sum::<f32>();
                }
                b
            })
            .collect()
    }
}

/// Row-major `H × W × D` per-pixel features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureTensor {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * dim {
            return Err(Error::shape(format!(
                "feature tensor {height}x{width}x{dim} needs {} values, got {}",
                height * width * dim,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            dim,
            data,
        })
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

impl From<&Image> for FeatureTensor {
    fn from(img: &Image) -> Self {
        Self {
            height: img.height,
            width: img.width,
            dim: CHANNELS,
            data: img.data.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extractor {
    stages: Vec<ConvStage>,
    seed: u64,
}

/// Build an extractor from a stage list. Random stages draw from a stream keyed
/// by `(seed, stage index)`.
pub fn init_extractor(seed: u64, spec: &[StageSpec]) -> Result<Extractor> {
    let mut channels = CHANNELS;
    let mut stages = Vec::with_capacity(spec.len());
    for (idx, s) in spec.iter().enumerate() {
        let stage = match *s {
            StageSpec::Handcrafted => {
                if channels != CHANNELS {
                    return Err(Error::config(format!(
                        "stage {idx}: handcrafted stage needs {CHANNELS} input channels, previous stage gives {channels}"
                    )));
                }
                ConvStage::handcrafted()
            }
            StageSpec::Identity => ConvStage::identity(channels),
            StageSpec::Random {
                kernel,
                out_channels,
                relu,
                bias_std,
            } => {
                if kernel == 0 || kernel % 2 == 0 {
                    return Err(Error::config(format!(
                        "stage {idx}: kernel size {kernel} must be odd"
                    )));
                }
                if out_channels == 0 {
                    return Err(Error::config(format!("stage {idx}: zero output channels")));
                }
                let fan_in = (channels * kernel * kernel) as f32;
                let mut rng = seed::rng(seed, &[seed::tag::EXTRACTOR, idx as u64]);
                let normal = Normal::new(0.0f32, 1.0 / fan_in.sqrt()).expect("positive std");
                let weights: Vec<f32> = (0..out_channels * channels * kernel * kernel)
                    .map(|_| normal.sample(&mut rng))
                    .collect();
                let bias: Vec<f32> = if bias_std > 0.0 {
                    let nb = Normal::new(0.0f32, bias_std).expect("positive std");
                    (0..out_channels).map(|_| nb.sample(&mut rng)).collect()
                } else {
                    vec![0.0; out_channels]
                };
                let act = if relu {
                    Activation::Relu
                } else {
                    Activation::Identity
                };
                ConvStage::new(kernel, channels, out_channels, weights, bias, act)
                    .map_err(|e| Error::config(format!("stage {idx}: {e}")))?
            }
            StageSpec::Fourier {
                out_channels,
                bandwidth,
            } => {
                if out_channels == 0 {
                    return Err(Error::config(format!("stage {idx}: zero output channels")));
                }
                if !(bandwidth.is_finite() && bandwidth > 0.0) {
                    return Err(Error::config(format!(
                        "stage {idx}: bandwidth must be positive"
                    )));
                }
                let mut rng = seed::rng(seed, &[seed::tag::EXTRACTOR, idx as u64]);
                let normal = Normal::new(0.0f32, bandwidth).expect("positive std");
                let weights: Vec<f32> = (0..out_channels * channels)
                    .map(|_| normal.sample(&mut rng))
                    .collect();
                let bias: Vec<f32> = (0..out_channels)
                    .map(|_| rng.random_range(0.0..std::f32::consts::TAU))
                    .collect();
                ConvStage::new(1, channels, out_channels, weights, bias, Activation::Cos)
                    .map_err(|e| Error::config(format!("stage {idx}: {e}")))?
            }
        };
        channels = stage.out_channels;
        stages.push(stage);
    }
    Ok(Extractor { stages, seed })
}

impl Extractor {
    /// Rebuild from explicit stages (checkpoint loading).
    pub fn from_stages(stages: Vec<ConvStage>, seed: u64) -> Result<Self> {
        let mut channels = CHANNELS;
        for (i, s) in stages.iter().enumerate() {
            if s.in_channels != channels {
                return Err(Error::config(format!(
                    "stage {i} expects {} input channels, previous stage gives {channels}",
                    s.in_channels
                )));
            }
            channels = s.out_channels;
        }
        Ok(Self { stages, seed })
    }

    pub fn stages(&self) -> &[ConvStage] {
        &self.stages
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn output_dim(&self) -> usize {
        self.stages.last().map_or(CHANNELS, |s| s.out_channels)
    }

    /// The extractor is never trained.
    pub fn is_frozen(&self) -> bool {
        true
    }

    pub fn extract(&self, image: &Image) -> Result<FeatureTensor> {
        self.apply(&FeatureTensor::from(image))
    }

    pub fn apply(&self, input: &FeatureTensor) -> Result<FeatureTensor> {
        let want = self.stages.first().map_or(CHANNELS, |s| s.in_channels);
        if input.dim != want {
            return Err(Error::shape(format!(
                "extractor expects {want} input channels, got {}",
                input.dim
            )));
        }
        if input.data.len() != input.num_pixels() * input.dim {
            return Err(Error::shape("input buffer does not match its dimensions"));
        }
        let mut x = input.clone();
        for stage in &self.stages {
            x = stage.apply(&x);
        }
        Ok(x)
    }

    /// Per-channel bound on |feature| for any input with values in `[0, 1]`.
    pub fn output_bound(&self) -> Vec<f32> {
        self.stages
            .iter()
            .fold(vec![1.0; CHANNELS], |b, s| s.bound(&b))
    }

    pub(crate) fn hash_into(&self, h: &mut Sha256) {
        h.update(self.seed.to_le_bytes());
        for s in &self.stages {
            h.update((s.kernel as u32).to_le_bytes());
            h.update((s.in_channels as u32).to_le_bytes());
            h.update((s.out_channels as u32).to_le_bytes());
            h.update([s.activation.code()]);
            for w in s.weights.iter().chain(&s.bias) {
                h.update(w.to_le_bytes());
            }
        }
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        self.hash_into(&mut h);
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, GeometryConfig};

    fn test_image(seed: u64) -> Image {
        generate_scene(seed, &crate::schedule::catalog(6), &GeometryConfig::default())
            .unwrap()
            .image
    }

    #[test]
    fn default_spec_shape_and_range() {
        let e = init_extractor(0, &default_stages()).unwrap();
        assert_eq!(e.output_dim(), 64);
        let f = e.extract(&test_image(1)).unwrap();
        assert_eq!((f.height, f.width, f.dim), (32, 32, 64));
        assert!(f.data.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn deterministic_weights() {
        let a = init_extractor(7, &default_stages()).unwrap();
        let b = init_extractor(7, &default_stages()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), init_extractor(8, &default_stages()).unwrap().digest());
    }

    #[test]
    fn empty_spec_passes_through() {
        let e = init_extractor(0, &[]).unwrap();
        assert_eq!(e.output_dim(), 3);
        let img = test_image(2);
        assert_eq!(e.extract(&img).unwrap().data, img.data);
    }

    #[test]
    fn identity_stage_returns_image() {
        let e = init_extractor(0, &[StageSpec::Identity]).unwrap();
        let img = test_image(3);
        assert_eq!(e.extract(&img).unwrap().data, img.data);
    }

    #[test]
    fn zero_image_gives_zero_features() {
        let spec = [
            StageSpec::Handcrafted,
            StageSpec::Random {
                kernel: 3,
                out_channels: 5,
                relu: false,
                bias_std: 0.0,
            },
        ];
        let e = init_extractor(1, &spec).unwrap();
        let f = e.extract(&Image::new(8, 8)).unwrap();
        assert!(f.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn repeatable_and_bounded() {
        let e = init_extractor(4, &default_stages()).unwrap();
        let img = test_image(4);
        let before = e.digest();
        let a = e.extract(&img).unwrap();
        let b = e.extract(&img).unwrap();
        assert_eq!(a, b);
        assert_eq!(before, e.digest());
        let bound = e.output_bound();
        for px in a.data.chunks(a.dim) {
            for (v, b) in px.iter().zip(&bound) {
                assert!(v.is_finite() && v.abs() <= *b + 1e-5);
            }
        }
    }

    #[test]
    fn chaining_errors() {
        let bad = [
            StageSpec::Random {
                kernel: 1,
                out_channels: 4,
                relu: true,
                bias_std: 0.0,
            },
            StageSpec::Handcrafted,
        ];
        assert!(matches!(init_extractor(0, &bad), Err(Error::Config(_))));
        let even = [StageSpec::Random {
            kernel: 2,
            out_channels: 4,
            relu: true,
            bias_std: 0.0,
        }];
        assert!(init_extractor(0, &even).is_err());
        let e = init_extractor(0, &default_stages()).unwrap();
        let wrong = FeatureTensor::new(4, 4, 5, vec![0.0; 80]).unwrap();
        assert!(matches!(e.apply(&wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn translation_equivariant_on_interior() {
        let spec = [
            StageSpec::Handcrafted,
            StageSpec::Random {
                kernel: 3,
                out_channels: 6,
                relu: true,
                bias_std: 0.1,
            },
        ];
        let e = init_extractor(2, &spec).unwrap();
        let img = test_image(5);
        // Shift right by 3 pixels, filling the left border with zeros.
        let shift = 3;
        let mut moved = Image::new(img.height, img.width);
        for y in 0..img.height {
            for x in shift..img.width {
                for c in 0..CHANNELS {
                    moved.data[(y * img.width + x) * 3 + c] =
                        img.data[(y * img.width + x - shift) * 3 + c];
                }
            }
        }
        let a = e.extract(&img).unwrap();
        let b = e.extract(&moved).unwrap();
        // Receptive field radius is 2 (two 3x3 stages).
        for y in 2..img.height - 2 {
            for x in (shift + 2)..img.width - 2 {
                let pa = a.pixel(y * img.width + x - shift);
                let pb = b.pixel(y * img.width + x);
                for (u, v) in pa.iter().zip(pb) {
                    assert!((u - v).abs() < 1e-5);
                }
            }
        }
    }
}
