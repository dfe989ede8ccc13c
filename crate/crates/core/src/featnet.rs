//! Fixed multi-scale convolutional feature extractor.
//!
//! Four scales, each two 3×3 zero-padded conv + ReLU layers, with a 2×2
//! average pool between scales. Default widths are 64, 128, 256 and 512
//! channels. Weights are either a seeded orthogonal filter bank or loaded
//! from a [`container`](crate::container) file.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::container::{Container, Kind};
use crate::error::{Error, Result};
use crate::grad::{Padding, Tape, Var};
use crate::labels::LabelMap;
use crate::render::{encode_normal_on_tape, layout};
use crate::rng::{self, Stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_CHANNELS: [usize; 4] = [64, 128, 256, 512];

/// Named activation taps, `s{scale}c{conv}`, after the ReLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tap {
    S1C1,
    S1C2,
    S2C1,
    S2C2,
    S3C1,
    S3C2,
    S4C1,
    S4C2,
}

impl Tap {
    pub const ALL: [Tap; 8] = [
        Tap::S1C1,
        Tap::S1C2,
        Tap::S2C1,
        Tap::S2C2,
        Tap::S3C1,
        Tap::S3C2,
        Tap::S4C1,
        Tap::S4C2,
    ];

    /// Index of the conv layer this tap follows.
    pub fn layer(self) -> usize {
        self as usize
    }

    /// Scale, 1-based.
    pub fn scale(self) -> usize {
        self.layer() / 2 + 1
    }

    /// Spatial stride relative to the input, `2^(scale−1)`.
    pub fn stride(self) -> usize {
        1 << (self.scale() - 1)
    }

    pub fn name(self) -> &'static str {
        [
            "s1c1", "s1c2", "s2c1", "s2c2", "s3c1", "s3c2", "s4c1", "s4c2",
        ][self.layer()]
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Tap::ALL.into_iter().find(|t| t.name() == name)
    }
}

impl fmt::Display for Tap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Provenance {
    SeededRandom(u64),
    Loaded(PathBuf),
}

#[derive(Serialize, Deserialize)]
struct Meta {
    channels: [usize; 4],
}

/// Frozen conv stack; weights are shared read-only across tapes.
#[derive(Clone, Debug)]
pub struct FeatureExtractor<T> {
    channels: [usize; 4],
    layers: Vec<(Rc<Tensor<T>>, Rc<Tensor<T>>)>,
    provenance: Provenance,
}

/// `[K, C, 3, 3]` shape of every layer for the given widths.
fn layer_shapes(channels: [usize; 4]) -> Vec<[usize; 4]> {
    let mut shapes = Vec::with_capacity(8);
    let mut c_in = 3;
    for &c in &channels {
        shapes.push([c, c_in, 3, 3]);
        shapes.push([c, c, 3, 3]);
        c_in = c;
    }
    shapes
}

/// Row-major `rows × cols` matrix with orthonormal rows (`rows ≤ cols`) or
/// orthonormal columns (`rows > cols`), from Gaussian draws.
pub(crate) fn orthogonal<R: rand::Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Vec<f64> {
    let (r, c) = if rows <= cols {
        (rows, cols)
    } else {
        (cols, rows)
    };
    let g: Tensor<f64> = Tensor::randn(&[r, c], 1.0, rng);
    let mut m = g.into_data();
    // modified Gram-Schmidt, two passes
    for _ in 0..2 {
        for i in 0..r {
            for j in 0..i {
                let dot: f64 = (0..c).map(|k| m[i * c + k] * m[j * c + k]).sum();
                for k in 0..c {
                    m[i * c + k] -= dot * m[j * c + k];
                }
            }
            let norm = (0..c)
                .map(|k| m[i * c + k] * m[i * c + k])
                .sum::<f64>()
                .sqrt();
            for k in 0..c {
                m[i * c + k] /= norm;
            }
        }
    }
    if rows <= cols {
        m
    } else {
        let mut t = vec![0.0; rows * cols];
        for i in 0..r {
            for k in 0..c {
                t[k * cols + i] = m[i * c + k];
            }
        }
        t
    }
}

impl<T: Scalar> FeatureExtractor<T> {
    pub fn init_random(seed: u64) -> Self {
        Self::init_random_with(DEFAULT_CHANNELS, seed)
    }

    /// Orthogonal filters (per-layer `[K, C·9]` matrix), zero biases.
    pub fn init_random_with(channels: [usize; 4], seed: u64) -> Self {
        let mut rng = rng::stream(seed, Stream::Init, 100);
        let layers = layer_shapes(channels)
            .into_iter()
            .map(|s| {
                let w = orthogonal(s[0], s[1] * 9, &mut rng);
                let w =
                    Tensor::from_vec(&s, w.into_iter().map(T::lit).collect()).expect("layer shape");
                (Rc::new(w), Rc::new(Tensor::zeros(&[s[0]])))
            })
            .collect();
        Self {
            channels,
            layers,
            provenance: Provenance::SeededRandom(seed),
        }
    }

    /// Builds an extractor from explicit `(weight, bias)` pairs.
    pub fn from_layers(channels: [usize; 4], layers: Vec<(Tensor<T>, Tensor<T>)>) -> Result<Self> {
        let shapes = layer_shapes(channels);
        if layers.len() != shapes.len() {
            return Err(Error::invalid(
                "feature extractor",
                format!("need 8 layers, got {}", layers.len()),
            ));
        }
        for (i, ((w, b), s)) in layers.iter().zip(&shapes).enumerate() {
            if w.shape() != s || b.shape() != [s[0]] {
                return Err(Error::invalid(
                    "feature extractor",
                    format!(
                        "layer {i}: weight {:?} bias {:?}, expected {s:?}",
                        w.shape(),
                        b.shape()
                    ),
                ));
            }
        }
        Ok(Self {
            channels,
            layers: layers
                .into_iter()
                .map(|(w, b)| (Rc::new(w), Rc::new(b)))
                .collect(),
            provenance: Provenance::SeededRandom(0),
        })
    }

    pub fn channels(&self) -> [usize; 4] {
        self.channels
    }

    pub fn tap_channels(&self, tap: Tap) -> usize {
        self.channels[tap.scale() - 1]
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// `(weight, bias)` of layer `i`.
    pub fn layer(&self, i: usize) -> (&Tensor<T>, &Tensor<T>) {
        let (w, b) = &self.layers[i];
        (w, b)
    }

    pub fn to_container(&self) -> Container {
        let meta = serde_json::to_string(&Meta {
            channels: self.channels,
        })
        .expect("meta");
        let tensors: Vec<&Tensor<T>> = self.layers.iter().flat_map(|(w, b)| [&**w, &**b]).collect();
        Container::new(Kind::Extractor, meta, &tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(Kind::Extractor)?;
        let meta: Meta = serde_json::from_str(&c.metadata).map_err(|e| Error::Format {
            offset: 20,
            msg: format!("metadata: {e}"),
        })?;
        let shapes = layer_shapes(meta.channels);
        for (i, s) in shapes.iter().enumerate() {
            c.expect_shape(2 * i, s)?;
            c.expect_shape(2 * i + 1, &[s[0]])?;
        }
        if c.tensors.len() != 16 {
            return Err(Error::Format {
                offset: 20 + c.metadata.len() as u64,
                msg: format!("expected 16 tensors, found {}", c.tensors.len()),
            });
        }
        let layers = c
            .tensors
            .chunks(2)
            .map(|p| (Rc::new(p[0].cast()), Rc::new(p[1].cast())))
            .collect();
        Ok(Self {
            channels: meta.channels,
            layers,
            provenance: Provenance::SeededRandom(0),
        })
    }

    pub fn load_weights(path: &Path) -> Result<Self> {
        let mut ex = Self::from_container(&Container::load(path)?)?;
        ex.provenance = Provenance::Loaded(path.to_path_buf());
        Ok(ex)
    }

    /// Features of a `[3,H,W]` image at `taps`; layers past the deepest
    /// requested tap are not evaluated.
    pub fn extract_on_tape(
        &self,
        tape: &mut Tape<T>,
        image: Var,
        taps: &[Tap],
    ) -> Result<BTreeMap<Tap, Var>> {
        let (c, h, w) = tape.chw_of("extract", image)?;
        if c != 3 {
            return Err(Error::shape(
                "extract",
                "image",
                "[3, H, W]",
                tape.shape(image),
            ));
        }
        if h % 8 != 0 || w % 8 != 0 || h < 8 || w < 8 {
            return Err(Error::shape(
                "extract",
                "image",
                "H and W divisible by 8",
                tape.shape(image),
            ));
        }
        let mut out = BTreeMap::new();
        let Some(deepest) = taps.iter().map(|t| t.layer()).max() else {
            return Ok(out);
        };
        let mut x = image;
        for layer in 0..=deepest {
            if layer > 0 && layer % 2 == 0 {
                x = tape.avgpool2x(x)?;
            }
            let (wt, b) = &self.layers[layer];
            let wv = tape.constant_shared(Rc::clone(wt));
            let bv = tape.constant_shared(Rc::clone(b));
            let y = tape.conv2d(x, wv, Some(bv), Padding::Zero)?;
            x = tape.relu(y)?;
            let tap = Tap::ALL[layer];
            if taps.contains(&tap) {
                out.insert(tap, x);
            }
        }
        Ok(out)
    }

    /// Plain-value extraction.
    pub fn extract(&self, image: &Tensor<T>, taps: &[Tap]) -> Result<FeaturePyramid<T>> {
        let mut tape = Tape::new();
        let v = tape.constant(image.clone());
        let vars = self.extract_on_tape(&mut tape, v, taps)?;
        Ok(FeaturePyramid {
            features: vars
                .into_iter()
                .map(|(t, v)| (t, tape.value(v).clone()))
                .collect(),
            labels: BTreeMap::new(),
        })
    }

    /// Extracts each 3-channel group of a `[9,H,W]` material stack:
    /// albedo, RGB-encoded normal, roughness repeated to 3 channels, specular.
    pub fn extract_material_on_tape(
        &self,
        tape: &mut Tape<T>,
        stack: Var,
        taps: &[Tap],
    ) -> Result<Vec<BTreeMap<Tap, Var>>> {
        material_groups(tape, stack)?
            .into_iter()
            .map(|g| self.extract_on_tape(tape, g, taps))
            .collect()
    }
}

/// The four 3-channel images fed to the extractor for a `[9,H,W]` stack.
pub fn material_groups<T: Scalar>(tape: &mut Tape<T>, stack: Var) -> Result<[Var; 4]> {
    let (c, _, _) = tape.chw_of("material_groups", stack)?;
    if c != layout::CHANNELS {
        return Err(Error::shape(
            "material_groups",
            "maps",
            "[9, H, W]",
            tape.shape(stack),
        ));
    }
    let albedo = tape.slice_channels(stack, layout::ALBEDO, 3)?;
    let normal = tape.slice_channels(stack, layout::NORMAL, 2)?;
    let normal = encode_normal_on_tape(tape, normal)?;
    let rough = tape.slice_channels(stack, layout::ROUGHNESS, 1)?;
    let rough = tape.repeat_channels(rough, 3)?;
    let spec = tape.slice_channels(stack, layout::SPECULAR, 3)?;
    Ok([albedo, normal, rough, spec])
}

/// Plain features per tap, with optional per-tap label maps.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T> {
    pub features: BTreeMap<Tap, Tensor<T>>,
    pub labels: BTreeMap<Tap, LabelMap>,
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn get(&self, tap: Tap) -> Option<&Tensor<T>> {
        self.features.get(&tap)
    }

    /// Attaches `labels` (full resolution) downsampled to every present tap.
    pub fn with_labels(mut self, labels: &LabelMap) -> Self {
        self.labels = self
            .features
            .keys()
            .map(|&t| (t, downsample_labels(labels, t)))
            .collect();
        self
    }
}

/// Nearest-neighbour subsampling at the tap's stride (top-left sample of
/// each block).
pub fn downsample_labels(labels: &LabelMap, tap: Tap) -> LabelMap {
    let s = tap.stride();
    let (h, w) = (labels.height() / s, labels.width() / s);
    LabelMap::from_fn(h, w, |y, x| labels.get(y * s, x * s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tap_geometry() {
        assert_eq!(Tap::S1C1.scale(), 1);
        assert_eq!(Tap::S2C1.stride(), 2);
        assert_eq!(Tap::S4C2.stride(), 8);
        assert_eq!(Tap::from_name("s3c2"), Some(Tap::S3C2));
        assert_eq!(serde_json::to_string(&Tap::S4C2).unwrap(), "\"s4c2\"");
    }

    #[test]
    fn checkerboard_downsample() {
        let l = LabelMap::from_fn(8, 8, |y, x| ((y / 4 + x / 4) % 2) as u8);
        let d = downsample_labels(&l, Tap::S2C1);
        let want = LabelMap::from_fn(4, 4, |y, x| ((y / 2 + x / 2) % 2) as u8);
        assert_eq!(d, want);
    }

    #[test]
    fn uniform_labels_stay_uniform() {
        let l = LabelMap::uniform(16, 16, 3);
        for t in Tap::ALL {
            let d = downsample_labels(&l, t);
            assert!(d.data().iter().all(|&v| v == 3));
            assert_eq!(d.height(), 16 / t.stride());
        }
    }

    #[test]
    fn indivisible_size_is_rejected() {
        let ex = FeatureExtractor::<f32>::init_random_with([4, 4, 4, 4], 1);
        let img = Tensor::zeros(&[3, 12, 12]);
        assert!(ex.extract(&img, &[Tap::S1C1]).is_err());
    }
}
