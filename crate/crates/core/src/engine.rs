//! Projection of material maps into the generator latent space and
//! label-guided appearance transfer from target images.
//!
//! Projection minimizes
//! `Σ_maps w · mean|f(θ) − M₀| + Σ_taps mean|F(f(θ)) − F(M₀)|`
//! (normals weighted 5×). Transfer minimizes the mean over rules of the
//! tap-weighted statistical distance between features of the render
//! `R(f(θ))` and of the target, plus the feature loss against `M₀` at s4c2.
//!
//! Targets are display-space images, directly comparable with the output of
//! [`render_on_tape`](crate::render::render_on_tape).

use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featnet::{downsample_labels, FeatureExtractor, Tap};
use crate::grad::{Tape, Var};
use crate::labels::{LabelMap, Mask, UNLABELED};
use crate::optim::{Adam, AdamConfig};
use crate::prior::{self, GeneratorWeights, LatentTheta};
use crate::render::{layout, render_on_tape, MaterialMaps, RenderConfig};
use crate::rng::{self, Stream};
use crate::scalar::Scalar;
use crate::statloss::{self, LossKind, ProjectionSet};
use crate::tensor::Tensor;

/// "Input label X takes the appearance of region Z of target Y."
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferRule {
    pub input_label: u8,
    pub target_index: usize,
    pub target_label: u8,
}

impl TransferRule {
    pub fn new(input_label: u8, target_index: usize, target_label: u8) -> Self {
        Self {
            input_label,
            target_index,
            target_label,
        }
    }
}

impl fmt::Display for TransferRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}:{}",
            self.input_label, self.target_index, self.target_label
        )
    }
}

impl FromStr for TransferRule {
    type Err = Error;

    /// `IN:TI:TL`, three colon-separated integers.
    fn from_str(s: &str) -> Result<Self> {
        let bad = |msg: String| Error::invalid("rule", format!("'{s}': {msg}"));
        let parts: Vec<&str> = s.split(':').collect();
        let [a, b, c] = parts.as_slice() else {
            return Err(bad("expected IN:TI:TL".into()));
        };
        let label = |p: &str| -> Result<u8> {
            match p.trim().parse::<u8>() {
                Ok(UNLABELED) => Err(bad(format!("label {UNLABELED} means unlabeled"))),
                Ok(v) => Ok(v),
                Err(e) => Err(bad(format!("label '{p}': {e}"))),
            }
        };
        let ti = b
            .trim()
            .parse::<usize>()
            .map_err(|e| bad(format!("target index '{b}': {e}")))?;
        Ok(Self::new(label(a)?, ti, label(c)?))
    }
}

/// Whether generator weights stay fixed (the latent prior) or are
/// co-optimized during projection (deep image prior).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorMode {
    #[default]
    Latent,
    Dip,
}

fn taps(list: &[(Tap, f64)]) -> BTreeMap<Tap, f64> {
    list.iter().copied().collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatentLrScale {
    pub style: f64,
    pub noise: f64,
}

impl Default for LatentLrScale {
    fn default() -> Self {
        Self {
            style: 0.125,
            noise: 1.0,
        }
    }
}

impl LatentLrScale {
    /// Per-tensor rates in [`LatentTheta::tensors`] order.
    fn rates(&self, lr: f64, blocks: usize) -> Vec<f64> {
        let mut r = vec![lr * self.style; 2 * blocks];
        r.extend(vec![lr * self.noise; blocks]);
        r
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSettings {
    pub projection_iters: usize,
    pub projection_lr: f64,
    pub transfer_iters: usize,
    pub transfer_lr: f64,
    pub adam: AdamConfig,
    /// Style taps and their weights.
    pub style_weights: BTreeMap<Tap, f64>,
    /// Feature-loss taps during transfer.
    pub feature_weights: BTreeMap<Tap, f64>,
    /// Feature-loss taps during projection.
    pub projection_feature_weights: BTreeMap<Tap, f64>,
    /// Weight of the normal map in the projection L1 term; other maps use 1.
    pub normal_weight: f64,
    pub erosion_radius: usize,
    pub loss: LossKind,
    /// Slicing directions per tap; `None` uses the tap's channel count.
    pub directions: Option<usize>,
    pub seed: u64,
    pub render: RenderConfig,
    pub prior: PriorMode,
    /// Multipliers on the latent learning rate for the style (scale and
    /// bias) and noise parts of θ.
    pub latent_lr_scale: LatentLrScale,
    /// Learning rate for generator weights in dip mode, scaled per tensor
    /// by [`GeneratorWeights::step_scales`].
    pub dip_lr: f64,
    /// Loss above `factor × initial` for `patience` consecutive iterations
    /// aborts the run.
    pub divergence_factor: f64,
    pub divergence_patience: usize,
}

impl Default for OptimSettings {
    fn default() -> Self {
        Self {
            projection_iters: 1000,
            projection_lr: 0.08,
            transfer_iters: 500,
            transfer_lr: 0.02,
            adam: AdamConfig::default(),
            style_weights: taps(&[
                (Tap::S1C1, 5.0),
                (Tap::S2C1, 5.0),
                (Tap::S3C1, 5.0),
                (Tap::S4C1, 0.5),
            ]),
            feature_weights: taps(&[(Tap::S4C2, 1.0)]),
            projection_feature_weights: taps(&[
                (Tap::S1C2, 1.0),
                (Tap::S2C2, 1.0),
                (Tap::S3C2, 1.0),
                (Tap::S4C2, 1.0),
            ]),
            normal_weight: 5.0,
            erosion_radius: 2,
            loss: LossKind::Sw,
            directions: None,
            seed: 0,
            render: RenderConfig::default(),
            prior: PriorMode::Latent,
            latent_lr_scale: LatentLrScale::default(),
            dip_lr: 0.003,
            divergence_factor: 10.0,
            divergence_patience: 50,
        }
    }
}

impl OptimSettings {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::invalid("settings", msg.to_string()));
        if self.projection_iters == 0 || self.transfer_iters == 0 {
            return bad("iteration counts must be positive");
        }
        let rates = [
            self.projection_lr,
            self.transfer_lr,
            self.dip_lr,
            self.latent_lr_scale.style,
            self.latent_lr_scale.noise,
        ];
        if rates.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return bad("learning rates must be positive");
        }
        if self.style_weights.is_empty() {
            return bad("no style taps");
        }
        let weights = self
            .style_weights
            .values()
            .chain(self.feature_weights.values())
            .chain(self.projection_feature_weights.values())
            .chain([&self.normal_weight]);
        if weights.into_iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return bad("loss weights must be non-negative");
        }
        if self.directions == Some(0) {
            return bad("direction count must be positive");
        }
        if self.divergence_factor <= 1.0 || self.divergence_patience == 0 {
            return bad("divergence factor must exceed 1 and patience be positive");
        }
        self.render.validate()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub total: Vec<f64>,
    /// Running minimum of `total`.
    pub best: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub style: Vec<f64>,
    pub feature: Vec<f64>,
    /// Map-space L1 term (projection only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pixel: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_seconds: f64,
    pub per_iteration_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// `project`, `transfer` or `per_pixel_transfer`.
    pub kind: String,
    pub seed: u64,
    pub scalar: String,
    pub iterations: usize,
    pub best_iteration: usize,
    pub best_loss: f64,
    pub diverged: bool,
    pub losses: LossTrace,
    pub settings: OptimSettings,
    pub timings: Timings,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// The report with wall-clock fields zeroed, for run-to-run comparison.
    pub fn without_timings(&self) -> Self {
        Self {
            timings: Timings::default(),
            ..self.clone()
        }
    }
}

/// Shared bookkeeping for an optimization loop.
struct Run {
    kind: &'static str,
    started: Instant,
    trace: LossTrace,
    best: f64,
    best_iteration: usize,
    above: usize,
    factor: f64,
    patience: usize,
}

impl Run {
    fn new(kind: &'static str, settings: &OptimSettings) -> Self {
        Self {
            kind,
            started: Instant::now(),
            trace: LossTrace::default(),
            best: f64::INFINITY,
            best_iteration: 0,
            above: 0,
            factor: settings.divergence_factor,
            patience: settings.divergence_patience,
        }
    }

    /// Records one iteration; `Ok(true)` when it is a new best.
    fn record(&mut self, total: f64) -> Result<bool> {
        let it = self.trace.total.len();
        if !total.is_finite() {
            return Err(self.diverged(it, total));
        }
        self.trace.total.push(total);
        let improved = total < self.best;
        if improved {
            self.best = total;
            self.best_iteration = it;
        }
        self.trace.best.push(self.best);
        let initial = self.trace.total[0];
        if total > self.factor * initial {
            self.above += 1;
            if self.above >= self.patience {
                return Err(self.diverged(it, total));
            }
        } else {
            self.above = 0;
        }
        Ok(improved)
    }

    fn diverged(&self, iteration: usize, loss: f64) -> Error {
        Error::Diverged {
            iteration,
            loss,
            initial: self.trace.total.first().copied().unwrap_or(f64::NAN),
            trace: self.trace.total.clone(),
        }
    }

    fn finish<T: Scalar>(self, settings: &OptimSettings, diverged: bool) -> RunReport {
        let secs = self.started.elapsed().as_secs_f64();
        let n = self.trace.total.len();
        RunReport {
            kind: self.kind.into(),
            seed: settings.seed,
            scalar: T::NAME.into(),
            iterations: n,
            best_iteration: self.best_iteration,
            best_loss: self.best,
            diverged,
            losses: self.trace,
            settings: settings.clone(),
            timings: Timings {
                total_seconds: secs,
                per_iteration_ms: if n > 0 { 1e3 * secs / n as f64 } else { 0.0 },
            },
        }
    }
}

fn grads_of<T: Scalar>(tape: &Tape<T>, vars: &[Var]) -> Vec<Vec<T>> {
    vars.iter()
        .map(|&v| {
            tape.grad(v)
                .map(<[T]>::to_vec)
                .unwrap_or_else(|| vec![T::zero(); tape.value(v).numel()])
        })
        .collect()
}

/// Cached features of `M₀` per extractor group, compared against the
/// current maps with a tap-weighted mean L1 averaged over groups.
struct ContentObjective<T> {
    reference: Vec<BTreeMap<Tap, Rc<Tensor<T>>>>,
    weights: Vec<(Tap, T)>,
}

impl<T: Scalar> ContentObjective<T> {
    fn new(
        extractor: &FeatureExtractor<T>,
        maps: &MaterialMaps<T>,
        weights: &BTreeMap<Tap, f64>,
    ) -> Result<Self> {
        let list: Vec<Tap> = weights.keys().copied().collect();
        let mut tape = Tape::new();
        let stack = tape.constant(maps.to_stack());
        let groups = extractor.extract_material_on_tape(&mut tape, stack, &list)?;
        let reference = groups
            .into_iter()
            .map(|g| {
                g.into_iter()
                    .map(|(t, v)| (t, Rc::new(tape.value(v).clone())))
                    .collect()
            })
            .collect();
        let n = 4.0;
        Ok(Self {
            reference,
            weights: weights.iter().map(|(&t, &w)| (t, T::lit(w / n))).collect(),
        })
    }

    fn eval(
        &self,
        tape: &mut Tape<T>,
        extractor: &FeatureExtractor<T>,
        stack: Var,
    ) -> Result<Option<Var>> {
        if self.weights.is_empty() {
            return Ok(None);
        }
        let list: Vec<Tap> = self.weights.iter().map(|w| w.0).collect();
        let groups = extractor.extract_material_on_tape(tape, stack, &list)?;
        let mut terms = Vec::new();
        for (g, reference) in groups.iter().zip(&self.reference) {
            for &(tap, w) in &self.weights {
                let r = tape.constant_shared(Rc::clone(&reference[&tap]));
                terms.push((tape.l1_distance(g[&tap], r)?, w));
            }
        }
        tape.weighted_sum(&terms).map(Some)
    }
}

/// Eroded input masks and cached target samples for each rule and tap.
struct StyleObjective<T> {
    /// `[rule][tap] → (input mask, target samples)`; `None` = skipped tap.
    terms: Vec<Vec<Option<(Mask, Rc<Tensor<T>>)>>>,
    taps: Vec<(Tap, T)>,
    channels: Vec<usize>,
    kind: LossKind,
    directions: Option<usize>,
    seed: u64,
}

/// One target image with optional labels; `None` labels means the whole
/// image carries label 0.
#[derive(Clone, Debug)]
pub struct Target<T> {
    pub image: Tensor<T>,
    pub labels: Option<LabelMap>,
}

impl<T: Scalar> Target<T> {
    pub fn new(image: Tensor<T>, labels: Option<LabelMap>) -> Self {
        Self { image, labels }
    }

    fn label_map(&self) -> Result<LabelMap> {
        let Some((3, h, w)) = self.image.chw() else {
            return Err(Error::shape(
                "target",
                "image",
                "[3, H, W]",
                self.image.shape(),
            ));
        };
        match &self.labels {
            None => Ok(LabelMap::uniform(h, w, 0)),
            Some(l) if l.height() == h && l.width() == w => Ok(l.clone()),
            Some(l) => Err(Error::shape(
                "target",
                "labels",
                format!("{h}x{w}"),
                &[l.height(), l.width()],
            )),
        }
    }
}

fn eroded_mask(labels: &LabelMap, label: u8, tap: Tap, radius: usize) -> Mask {
    statloss::erode(&downsample_labels(labels, tap).mask(label), radius)
}

impl<T: Scalar> StyleObjective<T> {
    fn new(
        extractor: &FeatureExtractor<T>,
        input_labels: &LabelMap,
        targets: &[Target<T>],
        rules: &[TransferRule],
        settings: &OptimSettings,
    ) -> Result<Self> {
        if rules.is_empty() {
            return Err(Error::invalid("transfer", "no transfer rules"));
        }
        let taps: Vec<(Tap, T)> = settings
            .style_weights
            .iter()
            .map(|(&t, &w)| (t, T::lit(w)))
            .collect();
        let tap_list: Vec<Tap> = taps.iter().map(|t| t.0).collect();
        let target_labels = targets
            .iter()
            .map(Target::label_map)
            .collect::<Result<Vec<_>>>()?;
        for r in rules {
            if r.target_index >= targets.len() {
                return Err(Error::invalid(
                    "transfer",
                    format!(
                        "rule {r}: target {} does not exist ({} given)",
                        r.target_index,
                        targets.len()
                    ),
                ));
            }
            if !input_labels.contains(r.input_label) {
                return Err(Error::invalid(
                    "transfer",
                    format!("rule {r}: input has no label {}", r.input_label),
                ));
            }
            if !target_labels[r.target_index].contains(r.target_label) {
                return Err(Error::invalid(
                    "transfer",
                    format!(
                        "rule {r}: target {} has no label {}",
                        r.target_index, r.target_label
                    ),
                ));
            }
        }
        let used: Vec<usize> = (0..targets.len())
            .filter(|i| rules.iter().any(|r| r.target_index == *i))
            .collect();
        let mut pyramids = BTreeMap::new();
        for &i in &used {
            pyramids.insert(i, extractor.extract(&targets[i].image, &tap_list)?);
        }
        let radius = settings.erosion_radius;
        let mut terms = Vec::with_capacity(rules.len());
        for r in rules {
            let mut per_tap = Vec::with_capacity(taps.len());
            for &(tap, _) in &taps {
                let a = eroded_mask(input_labels, r.input_label, tap, radius);
                let b = eroded_mask(&target_labels[r.target_index], r.target_label, tap, radius);
                let feats = pyramids[&r.target_index].get(tap).expect("tap extracted");
                let samples = statloss::gather(feats, &b)?;
                per_tap.push(
                    (a.count() > 0 && !samples.is_empty()).then(|| (a, Rc::new(samples.values))),
                );
            }
            if per_tap.iter().all(Option::is_none) {
                return Err(Error::EmptyRule {
                    rule: r.to_string(),
                });
            }
            terms.push(per_tap);
        }
        Ok(Self {
            terms,
            channels: tap_list
                .iter()
                .map(|&t| extractor.tap_channels(t))
                .collect(),
            taps,
            kind: settings.loss,
            directions: settings.directions,
            seed: settings.seed,
        })
    }

    fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let (tap, _) = self.taps[0];
        for rule in &self.terms {
            if let Some(Some((m, _))) = rule.first() {
                let s = tap.stride();
                if m.height() * s != h || m.width() * s != w {
                    return Err(Error::shape(
                        "transfer",
                        "input labels",
                        format!("{h}x{w}"),
                        &[m.height() * s, m.width() * s],
                    ));
                }
            }
        }
        Ok(())
    }

    /// Mean over rules of the tap-weighted distances for a `[3,H,W]` render.
    fn eval(
        &self,
        tape: &mut Tape<T>,
        extractor: &FeatureExtractor<T>,
        render: Var,
        iteration: usize,
    ) -> Result<Var> {
        let tap_list: Vec<Tap> = self.taps.iter().map(|t| t.0).collect();
        let feats = extractor.extract_on_tape(tape, render, &tap_list)?;
        let it = iteration as u32;
        let mut dir_rng = rng::stream(self.seed, Stream::Directions, it);
        let mut sub_rng = rng::stream(self.seed, Stream::Subsample, it);
        let projections: Vec<ProjectionSet<T>> = self
            .channels
            .iter()
            .map(|&c| ProjectionSet::random(self.directions.unwrap_or(c), c, &mut dir_rng))
            .collect();
        let inv_rules = T::one() / T::from_usize_lossy(self.terms.len());
        let mut terms = Vec::new();
        for rule in &self.terms {
            for (ti, term) in rule.iter().enumerate() {
                let Some((mask, target)) = term else { continue };
                let (tap, w) = self.taps[ti];
                let Some(a) = statloss::gather_on_tape(tape, feats[&tap], mask)? else {
                    continue;
                };
                let b = tape.constant_shared(Rc::clone(target));
                let d = statloss::distance_on_tape(
                    tape,
                    self.kind,
                    a,
                    b,
                    &projections[ti],
                    &mut sub_rng,
                )?;
                terms.push((d, w * inv_rules));
            }
        }
        tape.weighted_sum(&terms)
    }
}

/// Result of [`Engine::project`].
#[derive(Clone, Debug)]
pub struct Projection<T> {
    pub theta: LatentTheta<T>,
    /// Co-optimized generator in dip mode.
    pub weights: Option<GeneratorWeights<T>>,
    pub report: RunReport,
}

/// Result of [`Engine::transfer`] and [`per_pixel_transfer`].
#[derive(Clone, Debug)]
pub struct Transfer<T> {
    pub theta: Option<LatentTheta<T>>,
    pub maps: MaterialMaps<T>,
    pub report: RunReport,
}

/// Generator, extractor and settings for one run.
pub struct Engine<'a, T> {
    pub extractor: &'a FeatureExtractor<T>,
    pub generator: &'a GeneratorWeights<T>,
    pub settings: &'a OptimSettings,
}

fn map_weights<T: Scalar>(normal_weight: f64) -> [(usize, usize, T); 4] {
    [
        (layout::ALBEDO, 3, T::one()),
        (layout::NORMAL, 2, T::lit(normal_weight)),
        (layout::ROUGHNESS, 1, T::one()),
        (layout::SPECULAR, 3, T::one()),
    ]
}

impl<'a, T: Scalar> Engine<'a, T> {
    pub fn new(
        extractor: &'a FeatureExtractor<T>,
        generator: &'a GeneratorWeights<T>,
        settings: &'a OptimSettings,
    ) -> Self {
        Self {
            extractor,
            generator,
            settings,
        }
    }

    /// Fits θ (and the weights in dip mode) so `f(θ)` reproduces `maps`.
    /// Starts from `init`, or a fresh latent drawn from the settings seed.
    pub fn project(
        &self,
        maps: &MaterialMaps<T>,
        init: Option<LatentTheta<T>>,
    ) -> Result<Projection<T>> {
        let s = self.settings;
        s.validate()?;
        maps.validate()?;
        let cfg = self.generator.config();
        if maps.size() != cfg.resolution {
            return Err(Error::invalid(
                "project",
                format!(
                    "maps are {}², generator makes {}²",
                    maps.size(),
                    cfg.resolution
                ),
            ));
        }
        let mut theta = init.unwrap_or_else(|| LatentTheta::init(cfg, s.seed));
        theta.check(cfg)?;
        let dip = s.prior == PriorMode::Dip;
        let mut weights = self.generator.clone();
        let content = ContentObjective::new(self.extractor, maps, &s.projection_feature_weights)?;
        let reference = Rc::new(maps.to_stack());
        let per_map = map_weights::<T>(s.normal_weight);

        let mut adam = Adam::new(s.adam, theta.tensors().iter().map(|t| t.numel()));
        let mut weight_adam = Adam::new(s.adam, weights.tensors().iter().map(|t| t.numel()));
        let mut run = Run::new("project", s);
        let projection_rates = s.latent_lr_scale.rates(s.projection_lr, theta.blocks());
        let weight_rates: Vec<f64> = weights.step_scales().iter().map(|k| k * s.dip_lr).collect();
        let mut best = (theta.clone(), dip.then(|| weights.clone()));
        for _ in 0..s.projection_iters {
            let mut tape = Tape::new();
            let wv = weights.bind(&mut tape, dip);
            let tv = theta.bind(&mut tape, true);
            let stack = prior::synthesize_on_tape(&mut tape, cfg, &wv, &tv)?;
            let target = tape.constant_shared(Rc::clone(&reference));
            let mut pixel_terms = Vec::with_capacity(4);
            for &(start, len, w) in &per_map {
                let a = tape.slice_channels(stack, start, len)?;
                let b = tape.slice_channels(target, start, len)?;
                pixel_terms.push((tape.l1_distance(a, b)?, w));
            }
            let pixel = tape.weighted_sum(&pixel_terms)?;
            let feature = content.eval(&mut tape, self.extractor, stack)?;
            let total = match feature {
                Some(f) => tape.add(pixel, f)?,
                None => pixel,
            };
            let value = tape.value(total).item().to_f64_lossy();
            run.trace
                .pixel
                .push(tape.value(pixel).item().to_f64_lossy());
            run.trace
                .feature
                .push(feature.map_or(0.0, |f| tape.value(f).item().to_f64_lossy()));
            if run.record(value)? {
                best = (theta.clone(), dip.then(|| weights.clone()));
            }
            tape.backward(total)?;
            let grads = grads_of(&tape, &tv.all());
            let refs: Vec<&[T]> = grads.iter().map(Vec::as_slice).collect();
            adam.step_each(&mut theta.tensors_mut(), &refs, &projection_rates);
            if dip {
                let grads = grads_of(&tape, &wv.vars);
                let refs: Vec<&[T]> = grads.iter().map(Vec::as_slice).collect();
                let mut values: Vec<Tensor<T>> =
                    weights.tensors().iter().map(|t| (***t).clone()).collect();
                let mut slots: Vec<&mut Tensor<T>> = values.iter_mut().collect();
                weight_adam.step_each(&mut slots, &refs, &weight_rates);
                weights.set_tensors(values)?;
            }
        }
        let report = run.finish::<T>(s, false);
        Ok(Projection {
            theta: best.0,
            weights: best.1,
            report,
        })
    }

    /// Optimizes θ so the render of `f(θ)` takes on the statistics of the
    /// target regions named by `rules`, while its features stay close to
    /// those of `maps` (`M₀`). `labels` defaults to label 0 everywhere.
    pub fn transfer(
        &self,
        theta: &LatentTheta<T>,
        maps: &MaterialMaps<T>,
        labels: Option<&LabelMap>,
        targets: &[Target<T>],
        rules: &[TransferRule],
    ) -> Result<Transfer<T>> {
        let s = self.settings;
        s.validate()?;
        maps.validate()?;
        let cfg = self.generator.config();
        theta.check(cfg)?;
        if maps.size() != cfg.resolution {
            return Err(Error::invalid(
                "transfer",
                format!(
                    "maps are {}², generator makes {}²",
                    maps.size(),
                    cfg.resolution
                ),
            ));
        }
        let n = maps.size();
        let labels = labels
            .cloned()
            .unwrap_or_else(|| LabelMap::uniform(n, n, 0));
        if labels.height() != n || labels.width() != n {
            return Err(Error::shape(
                "transfer",
                "input labels",
                format!("{n}x{n}"),
                &[labels.height(), labels.width()],
            ));
        }
        let style = StyleObjective::new(self.extractor, &labels, targets, rules, s)?;
        style.check_input(n, n)?;
        let content = ContentObjective::new(self.extractor, maps, &s.feature_weights)?;

        let mut theta = theta.clone();
        let mut adam = Adam::new(s.adam, theta.tensors().iter().map(|t| t.numel()));
        let mut run = Run::new("transfer", s);
        let rates = s.latent_lr_scale.rates(s.transfer_lr, theta.blocks());
        let mut best = theta.clone();
        for it in 0..s.transfer_iters {
            let mut tape = Tape::new();
            let wv = self.generator.bind(&mut tape, false);
            let tv = theta.bind(&mut tape, true);
            let stack = prior::synthesize_on_tape(&mut tape, cfg, &wv, &tv)?;
            let (total, sv, fv) = objective(
                &mut tape,
                self.extractor,
                &style,
                &content,
                stack,
                &s.render,
                it,
            )?;
            run.trace.style.push(sv);
            run.trace.feature.push(fv);
            if run.record(tape.value(total).item().to_f64_lossy())? {
                best = theta.clone();
            }
            tape.backward(total)?;
            let grads = grads_of(&tape, &tv.all());
            let refs: Vec<&[T]> = grads.iter().map(Vec::as_slice).collect();
            adam.step_each(&mut theta.tensors_mut(), &refs, &rates);
        }
        let report = run.finish::<T>(s, false);
        let maps = self.generator.synthesize(&best)?;
        Ok(Transfer {
            theta: Some(best),
            maps,
            report,
        })
    }
}

/// Style + content objective for one iteration. Returns the total and the
/// two term values.
fn objective<T: Scalar>(
    tape: &mut Tape<T>,
    extractor: &FeatureExtractor<T>,
    style: &StyleObjective<T>,
    content: &ContentObjective<T>,
    stack: Var,
    render: &RenderConfig,
    iteration: usize,
) -> Result<(Var, f64, f64)> {
    let image = render_on_tape(tape, stack, render)?;
    let sl = style.eval(tape, extractor, image, iteration)?;
    let fl = content.eval(tape, extractor, stack)?;
    let total = match fl {
        Some(f) => tape.add(sl, f)?,
        None => sl,
    };
    let sv = tape.value(sl).item().to_f64_lossy();
    let fv = fl.map_or(0.0, |f| tape.value(f).item().to_f64_lossy());
    Ok((total, sv, fv))
}

/// Same objective as [`Engine::transfer`], optimizing the map pixels
/// directly (through the output range squashing) instead of a latent code.
/// Divergence ends the run early and is flagged in the report rather than
/// returned as an error.
pub fn per_pixel_transfer<T: Scalar>(
    extractor: &FeatureExtractor<T>,
    maps: &MaterialMaps<T>,
    labels: Option<&LabelMap>,
    targets: &[Target<T>],
    rules: &[TransferRule],
    settings: &OptimSettings,
) -> Result<Transfer<T>> {
    let s = settings;
    s.validate()?;
    maps.validate()?;
    let n = maps.size();
    let labels = labels
        .cloned()
        .unwrap_or_else(|| LabelMap::uniform(n, n, 0));
    let style = StyleObjective::new(extractor, &labels, targets, rules, s)?;
    style.check_input(n, n)?;
    let content = ContentObjective::new(extractor, maps, &s.feature_weights)?;

    let mut raw = prior::unsquash(maps);
    let mut adam = Adam::new(s.adam, [raw.numel()]);
    let mut run = Run::new("per_pixel_transfer", s);
    let mut best = raw.clone();
    let mut diverged = false;
    for it in 0..s.transfer_iters {
        let mut tape = Tape::new();
        let rv = tape.param(raw.clone());
        let stack = prior::squash(&mut tape, rv)?;
        let (total, sv, fv) =
            objective(&mut tape, extractor, &style, &content, stack, &s.render, it)?;
        run.trace.style.push(sv);
        run.trace.feature.push(fv);
        match run.record(tape.value(total).item().to_f64_lossy()) {
            Ok(true) => best = raw.clone(),
            Ok(false) => {}
            Err(Error::Diverged { .. }) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        }
        tape.backward(total)?;
        let g = tape.grad(rv).expect("param").to_vec();
        adam.step(&mut [&mut raw], &[&g], s.transfer_lr);
    }
    let report = run.finish::<T>(s, diverged);
    let mut tape = Tape::new();
    let rv = tape.constant(best);
    let stack = prior::squash(&mut tape, rv)?;
    Ok(Transfer {
        theta: None,
        maps: MaterialMaps::from_stack(tape.value(stack))?,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rule_syntax() {
        let r: TransferRule = "1:0:2".parse().unwrap();
        assert_eq!(r, TransferRule::new(1, 0, 2));
        assert_eq!(r.to_string(), "1:0:2");
        assert!("1:0".parse::<TransferRule>().is_err());
        assert!("255:0:0".parse::<TransferRule>().is_err());
        assert!("a:0:0".parse::<TransferRule>().is_err());
    }

    #[test]
    fn settings_roundtrip_and_reject_unknown_keys() {
        let s = OptimSettings::default();
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<OptimSettings>(&json).unwrap(), s);
        assert!(serde_json::from_str::<OptimSettings>("{\"itres\": 3}").is_err());
        let partial: OptimSettings = serde_json::from_str("{\"transfer_iters\": 7}").unwrap();
        assert_eq!(partial.transfer_iters, 7);
        assert_eq!(partial.projection_lr, 0.08);
    }

    #[test]
    fn divergence_needs_patience() {
        let s = OptimSettings {
            divergence_patience: 3,
            ..Default::default()
        };
        let mut run = Run::new("t", &s);
        run.record(1.0).unwrap();
        run.record(20.0).unwrap();
        run.record(20.0).unwrap();
        run.record(1.0).unwrap();
        run.record(20.0).unwrap();
        run.record(20.0).unwrap();
        assert!(matches!(
            run.record(20.0),
            Err(Error::Diverged { iteration: 6, .. })
        ));
    }
}
