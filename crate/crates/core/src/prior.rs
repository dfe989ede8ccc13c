//! Tileable style-modulated generator and tiling utilities.
//!
//! The latent code is `θ = (W⁺, N)`: a per-channel scale and bias for every
//! block plus one single-channel noise grid per block. Every convolution
//! pads circularly and every upsample wraps, and the learned base is constant
//! over space, so the output is a toroidal function of the noise alone:
//! shifting block `b`'s noise by `2^b · (dx, dy)` shifts the maps by
//! `2^B · (dx, dy)`, where `B` is the index of the last block.

use std::path::Path;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container::{Container, Kind};
use crate::error::{Error, Result};
use crate::grad::{Padding, Tape, Upsample, Var};
use crate::render::{layout, MaterialMaps, ROUGHNESS_MIN};
use crate::rng::{self, Stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BASE_RESOLUTION: usize = 4;

/// Initial gain on the normal rows of each to-maps projection.
const NORMAL_INIT_GAIN: f64 = 0.25;
const LEAKY_SLOPE: f64 = 0.2;

/// Default width of the block working at `res²`.
pub fn default_channels(res: usize) -> usize {
    match res {
        0..=8 => 256,
        16 | 32 => 128,
        64 | 128 => 64,
        256 => 32,
        _ => 16,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub resolution: usize,
    /// Width per block, coarsest first; `len = log2(resolution / 4) + 1`.
    pub channels: Vec<usize>,
    pub seed: u64,
}

impl GeneratorConfig {
    pub fn new(resolution: usize, seed: u64) -> Result<Self> {
        check_resolution(resolution)?;
        let blocks = resolution.trailing_zeros() as usize - 1;
        let channels = (0..blocks)
            .map(|b| default_channels(BASE_RESOLUTION << b))
            .collect();
        Ok(Self {
            resolution,
            channels,
            seed,
        })
    }

    /// Uniform width for every block; handy for small tests.
    pub fn with_width(resolution: usize, width: usize, seed: u64) -> Result<Self> {
        let mut cfg = Self::new(resolution, seed)?;
        cfg.channels.iter_mut().for_each(|c| *c = width);
        Ok(cfg)
    }

    pub fn blocks(&self) -> usize {
        self.channels.len()
    }

    pub fn block_resolution(&self, b: usize) -> usize {
        BASE_RESOLUTION << b
    }

    pub fn validate(&self) -> Result<()> {
        check_resolution(self.resolution)?;
        let want = self.resolution.trailing_zeros() as usize - 1;
        if self.channels.len() != want {
            return Err(Error::invalid(
                "generator config",
                format!(
                    "{} blocks needed for {}², got {}",
                    want,
                    self.resolution,
                    self.channels.len()
                ),
            ));
        }
        if self.channels.contains(&0) {
            return Err(Error::invalid("generator config", "zero-width block"));
        }
        Ok(())
    }
}

fn check_resolution(res: usize) -> Result<()> {
    if res < BASE_RESOLUTION || !res.is_power_of_two() {
        return Err(Error::invalid(
            "generator config",
            format!("resolution {res} is not a power of two ≥ {BASE_RESOLUTION}"),
        ));
    }
    Ok(())
}

/// Network parameters `f`. Shared read-only across runs in latent mode.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorWeights<T> {
    config: GeneratorConfig,
    /// `[C₀]`, broadcast over the 4×4 base grid.
    pub base: Rc<Tensor<T>>,
    /// Per block: `[Cᵦ, Cᵦ₋₁, 3, 3]` weight, `[Cᵦ]` bias.
    pub convs: Vec<(Rc<Tensor<T>>, Rc<Tensor<T>>)>,
    /// Per block: `[9, Cᵦ, 1, 1]` weight, `[9]` bias.
    pub to_maps: Vec<(Rc<Tensor<T>>, Rc<Tensor<T>>)>,
    /// Per block: `[Cᵦ]` noise gain.
    pub noise_strength: Vec<Rc<Tensor<T>>>,
}

/// Tape handles for every generator tensor, in [`GeneratorWeights::tensors`] order.
#[derive(Clone, Debug)]
pub struct WeightVars {
    pub vars: Vec<Var>,
}

/// The latent code θ.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTheta<T> {
    /// Per block: `[Cᵦ]` scale.
    pub scale: Vec<Tensor<T>>,
    /// Per block: `[Cᵦ]` bias.
    pub bias: Vec<Tensor<T>>,
    /// Per block: `[1, Hᵦ, Wᵦ]`.
    pub noise: Vec<Tensor<T>>,
}

/// Tape handles for θ; `scale`, `bias`, `noise` per block.
#[derive(Clone, Debug)]
pub struct ThetaVars {
    pub scale: Vec<Var>,
    pub bias: Vec<Var>,
    pub noise: Vec<Var>,
}

impl ThetaVars {
    /// All handles in [`LatentTheta::tensors`] order.
    pub fn all(&self) -> Vec<Var> {
        self.scale
            .iter()
            .chain(&self.bias)
            .chain(&self.noise)
            .copied()
            .collect()
    }
}

impl<T: Scalar> GeneratorWeights<T> {
    /// He-initialized convolutions from the config seed.
    pub fn init(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(config.seed, Stream::Init, 200);
        let blocks = config.blocks();
        let base = Tensor::randn(&[config.channels[0]], 1.0, &mut rng);
        let mut convs = Vec::with_capacity(blocks);
        let mut to_maps = Vec::with_capacity(blocks);
        let mut noise_strength = Vec::with_capacity(blocks);
        let mut c_in = config.channels[0];
        for &c in &config.channels {
            let std = (2.0 / (9 * c_in) as f64).sqrt();
            convs.push((
                Rc::new(Tensor::randn(&[c, c_in, 3, 3], std, &mut rng)),
                Rc::new(Tensor::zeros(&[c])),
            ));
            let std = (1.0 / (c * blocks) as f64).sqrt();
            let mut bias = Tensor::zeros(&[layout::CHANNELS]);
            // start with a dielectric-like F0 rather than 0.5
            for i in 0..3 {
                bias.data_mut()[layout::SPECULAR + i] = T::lit(-2.0 / blocks as f64);
            }
            let mut weight = Tensor::randn(&[layout::CHANNELS, c, 1, 1], std, &mut rng);
            // Full-scale normal rows saturate tanh and pin most texels to the
            // disk rim, where the radial clamp passes no gradient inward.
            for v in &mut weight.data_mut()[layout::NORMAL * c..(layout::NORMAL + 2) * c] {
                *v = *v * T::lit(NORMAL_INIT_GAIN);
            }
            to_maps.push((Rc::new(weight), Rc::new(bias)));
            noise_strength.push(Rc::new(Tensor::full(&[c], T::lit(0.5))));
            c_in = c;
        }
        Ok(Self {
            config,
            base: Rc::new(base),
            convs,
            to_maps,
            noise_strength,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn resolution(&self) -> usize {
        self.config.resolution
    }

    /// Every tensor: base, then per block conv weight, conv bias, map weight,
    /// map bias, noise strength.
    pub fn tensors(&self) -> Vec<&Rc<Tensor<T>>> {
        let mut out = vec![&self.base];
        for b in 0..self.config.blocks() {
            out.extend([
                &self.convs[b].0,
                &self.convs[b].1,
                &self.to_maps[b].0,
                &self.to_maps[b].1,
                &self.noise_strength[b],
            ]);
        }
        out
    }

    /// Relative Adam step size per tensor, in [`Self::tensors`] order: the
    /// init std for weight matrices, 1 for biases and gains. Adam moves
    /// every element by about the learning rate, so without this a rate
    /// that suits the biases would swamp He-scaled weights.
    pub fn step_scales(&self) -> Vec<f64> {
        let blocks = self.config.blocks();
        let mut out = vec![1.0];
        let mut c_in = self.config.channels[0];
        for &c in &self.config.channels {
            out.extend([
                (2.0 / (9 * c_in) as f64).sqrt(),
                1.0,
                (1.0 / (c * blocks) as f64).sqrt(),
                1.0,
                1.0,
            ]);
            c_in = c;
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Rc<Tensor<T>>> {
        let mut out = vec![&mut self.base];
        for (((conv, maps), ns), _) in self
            .convs
            .iter_mut()
            .zip(self.to_maps.iter_mut())
            .zip(self.noise_strength.iter_mut())
            .zip(0..)
        {
            out.push(&mut conv.0);
            out.push(&mut conv.1);
            out.push(&mut maps.0);
            out.push(&mut maps.1);
            out.push(ns);
        }
        out
    }

    /// Records the weights on a tape, as parameters when `trainable`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> WeightVars {
        let vars = self
            .tensors()
            .into_iter()
            .map(|t| {
                if trainable {
                    tape.param((**t).clone())
                } else {
                    tape.constant_shared(Rc::clone(t))
                }
            })
            .collect();
        WeightVars { vars }
    }

    /// Replaces every tensor, in [`Self::tensors`] order.
    pub fn set_tensors(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        let slots = self.tensors_mut();
        if values.len() != slots.len() {
            return Err(Error::invalid("generator weights", "tensor count mismatch"));
        }
        for (slot, v) in slots.iter().zip(&values) {
            if slot.shape() != v.shape() {
                return Err(Error::shape(
                    "generator weights",
                    "tensor",
                    format!("{:?}", slot.shape()),
                    v.shape(),
                ));
            }
        }
        for (slot, v) in slots.into_iter().zip(values) {
            *slot = Rc::new(v);
        }
        Ok(())
    }

    pub fn to_container(&self) -> Container {
        let meta = serde_json::to_string(&self.config).expect("config");
        let tensors: Vec<&Tensor<T>> = self.tensors().into_iter().map(|t| &**t).collect();
        Container::new(Kind::Generator, meta, &tensors)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(Kind::Generator)?;
        let config: GeneratorConfig =
            serde_json::from_str(&c.metadata).map_err(|e| Error::Format {
                offset: 20,
                msg: format!("generator config: {e}"),
            })?;
        config.validate().map_err(|e| Error::Format {
            offset: 20,
            msg: e.to_string(),
        })?;
        let mut w = Self::init(config)?;
        let shapes: Vec<Vec<usize>> = w.tensors().iter().map(|t| t.shape().to_vec()).collect();
        if c.tensors.len() != shapes.len() {
            return Err(Error::Format {
                offset: 20 + c.metadata.len() as u64,
                msg: format!(
                    "expected {} tensors, found {}",
                    shapes.len(),
                    c.tensors.len()
                ),
            });
        }
        for (i, s) in shapes.iter().enumerate() {
            c.expect_shape(i, s)?;
        }
        w.set_tensors(c.tensors.iter().map(|t| t.cast()).collect())?;
        Ok(w)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    /// Maps for `theta`, evaluated without gradients.
    pub fn synthesize(&self, theta: &LatentTheta<T>) -> Result<MaterialMaps<T>> {
        let mut tape = Tape::new();
        let w = self.bind(&mut tape, false);
        let th = theta.bind(&mut tape, false);
        let out = synthesize_on_tape(&mut tape, &self.config, &w, &th)?;
        MaterialMaps::from_stack(tape.value(out))
    }
}

impl<T: Scalar> LatentTheta<T> {
    /// Unit scales, zero biases, standard normal noise from the init stream.
    pub fn init(config: &GeneratorConfig, seed: u64) -> Self {
        let mut rng = rng::stream(seed, Stream::Init, 0);
        let mut theta = Self {
            scale: Vec::new(),
            bias: Vec::new(),
            noise: Vec::new(),
        };
        for (b, &c) in config.channels.iter().enumerate() {
            let r = config.block_resolution(b);
            theta.scale.push(Tensor::full(&[c], T::one()));
            theta.bias.push(Tensor::zeros(&[c]));
            theta.noise.push(Tensor::randn(&[1, r, r], 1.0, &mut rng));
        }
        theta
    }

    /// Random style as well as noise; used to draw diverse generator samples.
    pub fn sample(config: &GeneratorConfig, seed: u64, style_std: f64) -> Self {
        let mut theta = Self::init(config, seed);
        let mut rng = rng::stream(seed, Stream::Init, 1);
        for (s, b) in theta.scale.iter_mut().zip(&mut theta.bias) {
            *s = Tensor::randn(s.shape(), style_std, &mut rng).map(|v| v + T::one());
            *b = Tensor::randn(b.shape(), style_std, &mut rng);
        }
        theta
    }

    pub fn blocks(&self) -> usize {
        self.noise.len()
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.scale
            .iter()
            .chain(&self.bias)
            .chain(&self.noise)
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.scale
            .iter_mut()
            .chain(&mut self.bias)
            .chain(&mut self.noise)
            .collect()
    }

    pub fn numel(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    /// Checks shapes against a generator config.
    pub fn check(&self, config: &GeneratorConfig) -> Result<()> {
        let reference = Self::init(config, 0);
        if self.blocks() != reference.blocks() {
            return Err(Error::invalid(
                "latent",
                format!(
                    "{} blocks, generator has {}",
                    self.blocks(),
                    reference.blocks()
                ),
            ));
        }
        for (a, b) in self.tensors().iter().zip(reference.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::shape(
                    "latent",
                    "tensor",
                    format!("{:?}", b.shape()),
                    a.shape(),
                ));
            }
        }
        if !self.all_finite() {
            return Err(Error::invalid("latent", "non-finite values"));
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> ThetaVars {
        let mut put = |t: &Tensor<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        ThetaVars {
            scale: self.scale.iter().map(&mut put).collect(),
            bias: self.bias.iter().map(&mut put).collect(),
            noise: self.noise.iter().map(&mut put).collect(),
        }
    }

    /// Noise of block `b` moved by `2^b · (dx, dy)`; style unchanged.
    pub fn shift_noise(&self, dx: isize, dy: isize) -> Self {
        let mut out = self.clone();
        for (b, n) in out.noise.iter_mut().enumerate() {
            let k = 1isize << b;
            let mut tape = Tape::new();
            let v = tape.constant(n.clone());
            let s = tape
                .cyclic_shift(v, dx * k, dy * k)
                .expect("noise is [1,H,W]");
            *n = tape.value(s).clone();
        }
        out
    }

    pub fn to_container(&self) -> Container {
        let meta = serde_json::json!({ "blocks": self.blocks() }).to_string();
        Container::new(Kind::Latent, meta, &self.tensors())
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(Kind::Latent)?;
        if c.tensors.len() % 3 != 0 || c.tensors.is_empty() {
            return Err(Error::Format {
                offset: 20 + c.metadata.len() as u64,
                msg: format!("{} tensors is not three per block", c.tensors.len()),
            });
        }
        let b = c.tensors.len() / 3;
        let t: Vec<Tensor<T>> = c.tensors.iter().map(|t| t.cast()).collect();
        Ok(Self {
            scale: t[..b].to_vec(),
            bias: t[b..2 * b].to_vec(),
            noise: t[2 * b..].to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Records `f(θ)` as a `[9,H,W]` material stack.
pub fn synthesize_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    config: &GeneratorConfig,
    weights: &WeightVars,
    theta: &ThetaVars,
) -> Result<Var> {
    let blocks = config.blocks();
    if weights.vars.len() != 1 + 5 * blocks {
        return Err(Error::invalid(
            "synthesize",
            "weight count does not match config",
        ));
    }
    if theta.noise.len() != blocks || theta.scale.len() != blocks || theta.bias.len() != blocks {
        return Err(Error::invalid(
            "synthesize",
            format!(
                "latent has {} blocks, generator has {blocks}",
                theta.noise.len()
            ),
        ));
    }
    let c0 = config.channels[0];
    let r0 = BASE_RESOLUTION;
    let zeros = tape.constant(Tensor::zeros(&[c0, r0, r0]));
    let ones = tape.constant(Tensor::full(&[c0], T::one()));
    let mut x = tape.channel_affine(zeros, ones, weights.vars[0])?;
    let mut maps: Option<Var> = None;
    for b in 0..blocks {
        let w = &weights.vars[1 + 5 * b..1 + 5 * (b + 1)];
        if b > 0 {
            x = tape.upsample2x(x, Upsample::BilinearCircular)?;
        }
        x = tape.conv2d(x, w[0], Some(w[1]), Padding::Circular)?;
        x = tape.channel_affine(x, theta.scale[b], theta.bias[b])?;
        x = tape.add_noise(x, theta.noise[b], w[4])?;
        x = tape.leaky_relu(x, T::lit(LEAKY_SLOPE))?;
        let m = tape.conv2d(x, w[2], Some(w[3]), Padding::Circular)?;
        maps = Some(match maps {
            None => m,
            Some(prev) => {
                let up = tape.upsample2x(prev, Upsample::BilinearCircular)?;
                tape.add(up, m)?
            }
        });
    }
    let raw = maps.expect("at least one block");
    squash(tape, raw)
}

/// Maps unconstrained `[9,H,W]` values into valid material ranges.
pub fn squash<T: Scalar>(tape: &mut Tape<T>, raw: Var) -> Result<Var> {
    let albedo = tape.slice_channels(raw, layout::ALBEDO, 3)?;
    let albedo = tape.sigmoid(albedo)?;
    let normal = tape.slice_channels(raw, layout::NORMAL, 2)?;
    let normal = tape.tanh(normal)?;
    let normal = tape.unit_disk_clamp(normal)?;
    let rough = tape.slice_channels(raw, layout::ROUGHNESS, 1)?;
    let rough = tape.sigmoid(rough)?;
    let rough = tape.scale(rough, T::lit(1.0 - ROUGHNESS_MIN))?;
    let rough = tape.add_scalar(rough, T::lit(ROUGHNESS_MIN))?;
    let spec = tape.slice_channels(raw, layout::SPECULAR, 3)?;
    let spec = tape.sigmoid(spec)?;
    tape.concat_channels(&[albedo, normal, rough, spec])
}

/// Inverse of [`squash`] (up to clamping at the range ends): the
/// unconstrained `[9,H,W]` values whose squash reproduces `maps`.
pub fn unsquash<T: Scalar>(maps: &MaterialMaps<T>) -> Tensor<T> {
    let lim = 1e-4;
    let logit = |p: f64| {
        let p = p.clamp(lim, 1.0 - lim);
        (p / (1.0 - p)).ln()
    };
    let mut stack = maps.to_stack();
    let hw = maps.size() * maps.size();
    for (i, v) in stack.data_mut().iter_mut().enumerate() {
        let x = v.to_f64_lossy();
        let raw = match i / hw {
            c if c == layout::NORMAL || c == layout::NORMAL + 1 => {
                x.clamp(lim - 1.0, 1.0 - lim).atanh()
            }
            layout::ROUGHNESS => logit((x - ROUGHNESS_MIN) / (1.0 - ROUGHNESS_MIN)),
            _ => logit(x),
        };
        *v = T::lit(raw);
    }
    stack
}

fn map_stack<T: Scalar>(
    maps: &MaterialMaps<T>,
    f: impl FnOnce(&mut Tape<T>, Var) -> Result<Var>,
) -> Result<MaterialMaps<T>> {
    let mut tape = Tape::new();
    let v = tape.constant(maps.to_stack());
    let out = f(&mut tape, v)?;
    MaterialMaps::from_stack(tape.value(out))
}

/// `k × k` toroidal repetition of every map.
pub fn tile<T: Scalar>(maps: &MaterialMaps<T>, k: usize) -> Result<MaterialMaps<T>> {
    map_stack(maps, |tape, v| tape.tile(v, k))
}

/// `size²` window at `(oy, ox)` with wrapped indexing.
pub fn crop<T: Scalar>(
    maps: &MaterialMaps<T>,
    oy: usize,
    ox: usize,
    size: usize,
) -> Result<MaterialMaps<T>> {
    map_stack(maps, |tape, v| {
        tape.crop_toroidal(v, oy as isize, ox as isize, size, size)
    })
}

/// Crop of the 2×2 tiling at a uniformly random offset.
pub fn random_crop<T: Scalar, R: Rng + ?Sized>(
    maps: &MaterialMaps<T>,
    size: usize,
    rng: &mut R,
) -> Result<MaterialMaps<T>> {
    let extent = 2 * maps.size();
    if size == 0 || size > extent {
        return Err(Error::invalid(
            "random_crop",
            format!("crop {size} does not fit the {extent}² tiling"),
        ));
    }
    let oy = rng.random_range(0..=extent - size);
    let ox = rng.random_range(0..=extent - size);
    let tiled = tile(maps, 2)?;
    crop(&tiled, oy, ox, size)
}

/// Factor by which the wrap-around step must beat every interior step to
/// count as a seam.
pub const SEAM_FACTOR: f64 = 1.5;

/// Seam score per channel of a `[C,H,W]` grid: the largest wrap-around
/// forward difference minus [`SEAM_FACTOR`] times the largest interior one.
/// `≤ 0` means no visible seam.
pub fn seam_scores<T: Scalar>(grid: &Tensor<T>) -> Vec<f64> {
    let Some((c, h, w)) = grid.chw() else {
        return Vec::new();
    };
    let d = grid.data();
    (0..c)
        .map(|ci| {
            let p = &d[ci * h * w..(ci + 1) * h * w];
            let at = |y: usize, x: usize| p[y * w + x].to_f64_lossy();
            let mut wrap = 0.0f64;
            let mut interior = 0.0f64;
            for y in 0..h {
                for x in 0..w {
                    let dx = (at(y, (x + 1) % w) - at(y, x)).abs();
                    let dy = (at((y + 1) % h, x) - at(y, x)).abs();
                    if x + 1 == w {
                        wrap = wrap.max(dx);
                    } else {
                        interior = interior.max(dx);
                    }
                    if y + 1 == h {
                        wrap = wrap.max(dy);
                    } else {
                        interior = interior.max(dy);
                    }
                }
            }
            wrap - SEAM_FACTOR * interior
        })
        .collect()
}

/// Largest [`seam_scores`] entry over all nine channels.
pub fn seam_metric<T: Scalar>(maps: &MaterialMaps<T>) -> f64 {
    seam_scores(&maps.to_stack())
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max)
}
