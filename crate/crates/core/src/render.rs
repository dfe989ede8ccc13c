//! Differentiable Cook-Torrance/GGX renderer for planar material maps under a
//! co-located point light.
//!
//! Geometry: the texture tile spans `plane_extent` world units centred on the
//! origin of the `z = 0` plane, `x` to the right and `y` up (row 0 is the top
//! edge). Camera and light sit together at `(0, 0, light_height)`; each texel
//! is shaded at its own world position (orthographic texel-to-pixel mapping).
//!
//! Shading per texel, with `l = v` the unit vector to the light and
//! `h = normalize(l + v)`:
//!
//! ```text
//! α  = max(roughness, 0.045)²
//! D  = α² / (π ((n·h)² (α² − 1) + 1)²)
//! F  = F0 + (1 − F0)(1 − h·v)⁵
//! Λ(c) = (√(1 + α² (1 − c²)/c²) − 1) / 2
//! G  = 1 / (1 + Λ(n·l) + Λ(n·v))
//! f  = albedo/π + D F G / (4 (n·l)(n·v))
//! L  = f · max(n·l, 0) · intensity / dist²
//! out = clamp(L, 0, 1)^(1/γ)
//! ```
//!
//! `n·l` and `n·v` inside denominators and `Λ` are floored at [`NDOT_FLOOR`];
//! `n·h` is floored at 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Roughness floor; keeps `D` finite as `α → 0`.
pub const ROUGHNESS_MIN: f64 = 0.045;
/// Floor for cosines appearing in denominators.
pub const NDOT_FLOOR: f64 = 1e-4;
/// Light intensity at which a flat 0.8-albedo diffuse material renders at
/// ≈ 0.75 (display value) beneath a light at height 1.
pub const DEFAULT_INTENSITY: f64 = 2.0854;

/// Channel layout of the 9-channel material stack.
pub mod layout {
    pub const ALBEDO: usize = 0;
    pub const NORMAL: usize = 3;
    pub const ROUGHNESS: usize = 5;
    pub const SPECULAR: usize = 6;
    pub const CHANNELS: usize = 9;
}

/// SVBRDF parameter maps of one square tile.
#[derive(Clone, Debug, PartialEq)]
pub struct MaterialMaps<T> {
    /// Linear diffuse albedo `[3,H,W]` in `[0, 1]`.
    pub albedo: Tensor<T>,
    /// Tangent-space normal `(x, y)` `[2,H,W]` in `[-1, 1]`.
    pub normal: Tensor<T>,
    /// `[1,H,W]`; floored at [`ROUGHNESS_MIN`] when rendered.
    pub roughness: Tensor<T>,
    /// Fresnel F0 `[3,H,W]` in `[0, 1]`.
    pub specular: Tensor<T>,
}

impl<T: Scalar> MaterialMaps<T> {
    pub fn new(
        albedo: Tensor<T>,
        normal: Tensor<T>,
        roughness: Tensor<T>,
        specular: Tensor<T>,
    ) -> Result<Self> {
        let maps = Self {
            albedo,
            normal,
            roughness,
            specular,
        };
        maps.validate()?;
        Ok(maps)
    }

    /// Spatially constant maps.
    pub fn constant(
        size: usize,
        albedo: [f64; 3],
        normal: [f64; 2],
        roughness: f64,
        specular: [f64; 3],
    ) -> Self {
        let fill = |vals: &[f64]| {
            let plane = size * size;
            Tensor::from_fn(&[vals.len(), size, size], |i| T::lit(vals[i / plane]))
        };
        Self {
            albedo: fill(&albedo),
            normal: fill(&normal),
            roughness: fill(&[roughness]),
            specular: fill(&specular),
        }
    }

    pub fn size(&self) -> usize {
        self.albedo.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let Some((_, h, w)) = self.albedo.chw() else {
            return Err(Error::shape(
                "material maps",
                "albedo",
                "[3, N, N]",
                self.albedo.shape(),
            ));
        };
        if h != w || !h.is_power_of_two() {
            return Err(Error::shape(
                "material maps",
                "albedo",
                "square power-of-two size",
                self.albedo.shape(),
            ));
        }
        for (name, t, c) in [
            ("albedo", &self.albedo, 3),
            ("normal", &self.normal, 2),
            ("roughness", &self.roughness, 1),
            ("specular", &self.specular, 3),
        ] {
            if t.shape() != [c, h, w] {
                return Err(Error::shape(
                    "material maps",
                    name,
                    format!("[{c}, {h}, {w}]"),
                    t.shape(),
                ));
            }
            if !t.all_finite() {
                return Err(Error::invalid(
                    "material maps",
                    format!("{name} has non-finite values"),
                ));
            }
        }
        Ok(())
    }

    /// `[9,H,W]` stack in [`layout`] order.
    pub fn to_stack(&self) -> Tensor<T> {
        let (_, h, w) = self.albedo.chw().expect("validated maps");
        let mut data = Vec::with_capacity(layout::CHANNELS * h * w);
        for t in [&self.albedo, &self.normal, &self.roughness, &self.specular] {
            data.extend_from_slice(t.data());
        }
        Tensor::from_vec(&[layout::CHANNELS, h, w], data).expect("stack shape")
    }

    pub fn from_stack(stack: &Tensor<T>) -> Result<Self> {
        match stack.chw() {
            Some((c, _, _)) if c == layout::CHANNELS => {}
            _ => {
                return Err(Error::shape(
                    "material maps",
                    "stack",
                    "[9, N, N]",
                    stack.shape(),
                ))
            }
        }
        Self::new(
            stack.channels(layout::ALBEDO, 3),
            stack.channels(layout::NORMAL, 2),
            stack.channels(layout::ROUGHNESS, 1),
            stack.channels(layout::SPECULAR, 3),
        )
    }

    /// Per-channel mean absolute difference over all 9 channels.
    pub fn mean_abs_diff(&self, other: &Self) -> T {
        self.to_stack().mean_abs_diff(&other.to_stack())
    }
}

/// Light, camera and display settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    /// Height of the co-located light/camera above the plane centre.
    pub light_height: f64,
    pub light_intensity: f64,
    /// World size of one texture tile.
    pub plane_extent: f64,
    pub gamma: f64,
    /// `k` for `k × k` previews.
    pub tile_repeat: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            light_height: 1.0,
            light_intensity: DEFAULT_INTENSITY,
            plane_extent: 1.0,
            gamma: 2.2,
            tile_repeat: 1,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.light_height > 0.0
            && self.light_intensity > 0.0
            && self.gamma > 0.0
            && self.plane_extent > 0.0
            && self.tile_repeat >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(
                "render config",
                format!("height, intensity, extent and gamma must be positive and tile_repeat >= 1: {self:?}"),
            ))
        }
    }
}

/// Per-texel light geometry for an `h × w` grid.
struct Geometry<T> {
    l: [Tensor<T>; 3],
    half: [Tensor<T>; 3],
    h_dot_v: Tensor<T>,
    /// `intensity / dist²`
    falloff: Tensor<T>,
}

fn geometry<T: Scalar>(h: usize, w: usize, cfg: &RenderConfig) -> Geometry<T> {
    let n = h * w;
    let mut l = [vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]];
    let mut half = l.clone();
    let mut hdv = vec![T::zero(); n];
    let mut falloff = vec![T::zero(); n];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let px = ((x as f64 + 0.5) / w as f64 - 0.5) * cfg.plane_extent;
            let py = (0.5 - (y as f64 + 0.5) / h as f64) * cfg.plane_extent;
            let d = [-px, -py, cfg.light_height];
            let dist2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
            let dist = dist2.sqrt();
            let lv = [d[0] / dist, d[1] / dist, d[2] / dist];
            // view = light direction
            let s = [2.0 * lv[0], 2.0 * lv[1], 2.0 * lv[2]];
            let sn = (s[0] * s[0] + s[1] * s[1] + s[2] * s[2]).sqrt();
            let hv = [s[0] / sn, s[1] / sn, s[2] / sn];
            for k in 0..3 {
                l[k][i] = T::lit(lv[k]);
                half[k][i] = T::lit(hv[k]);
            }
            hdv[i] = T::lit(hv[0] * lv[0] + hv[1] * lv[1] + hv[2] * lv[2]);
            falloff[i] = T::lit(cfg.light_intensity / dist2);
        }
    }
    let grid = |v: Vec<T>| Tensor::from_vec(&[1, h, w], v).expect("grid");
    let [l0, l1, l2] = l;
    let [h0, h1, h2] = half;
    Geometry {
        l: [grid(l0), grid(l1), grid(l2)],
        half: [grid(h0), grid(h1), grid(h2)],
        h_dot_v: grid(hdv),
        falloff: grid(falloff),
    }
}

/// Maps a debug-tape non-finite error onto the shading term and pixel.
fn term<T: Scalar>(tape: &Tape<T>, name: &str, v: Result<Var>) -> Result<Var> {
    let v = v.map_err(|e| match e {
        Error::NonFinite { location, .. } => Error::NonFinite {
            op: "render",
            term: name.to_string(),
            location,
        },
        other => other,
    })?;
    if tape.is_debug() {
        let value = tape.value(v);
        if let Some(i) = value.data().iter().position(|x| !x.is_finite()) {
            let (_, h, w) = value.chw().unwrap_or((1, 1, value.numel()));
            let p = i % (h * w);
            return Err(Error::NonFinite {
                op: "render",
                term: name.to_string(),
                location: format!("pixel (y={}, x={})", p / w, p % w),
            });
        }
    }
    Ok(v)
}

/// Unit surface normal `(x, y, z)` from a `[2,H,W]` normal-map variable.
fn unit_normal<T: Scalar>(tape: &mut Tape<T>, normal: Var) -> Result<[Var; 3]> {
    let nx = tape.slice_channels(normal, 0, 1)?;
    let ny = tape.slice_channels(normal, 1, 1)?;
    let nz = normal_z(tape, nx, ny)?;
    let xx = tape.mul(nx, nx)?;
    let yy = tape.mul(ny, ny)?;
    let zz = tape.mul(nz, nz)?;
    let s = tape.add(xx, yy)?;
    let len2 = tape.add(s, zz)?;
    let len = tape.sqrt(len2)?;
    Ok([tape.div(nx, len)?, tape.div(ny, len)?, tape.div(nz, len)?])
}

/// `sqrt(max(0, 1 − x² − y²))`.
fn normal_z<T: Scalar>(tape: &mut Tape<T>, nx: Var, ny: Var) -> Result<Var> {
    let xx = tape.mul(nx, nx)?;
    let yy = tape.mul(ny, ny)?;
    let s = tape.add(xx, yy)?;
    let neg = tape.neg(s)?;
    let one_minus = tape.add_scalar(neg, T::one())?;
    let clamped = tape.clamp_min(one_minus, T::zero())?;
    tape.sqrt(clamped)
}

fn dot3<T: Scalar>(tape: &mut Tape<T>, n: &[Var; 3], c: &[Var; 3]) -> Result<Var> {
    let a = tape.mul(n[0], c[0])?;
    let b = tape.mul(n[1], c[1])?;
    let d = tape.mul(n[2], c[2])?;
    let ab = tape.add(a, b)?;
    tape.add(ab, d)
}

/// Smith `Λ` for GGX, `c` already floored.
fn smith_lambda<T: Scalar>(tape: &mut Tape<T>, c: Var, alpha2: Var) -> Result<Var> {
    let c2 = tape.mul(c, c)?;
    let neg = tape.neg(c2)?;
    let sin2 = tape.add_scalar(neg, T::one())?;
    let sin2 = tape.clamp_min(sin2, T::zero())?;
    let tan2 = tape.div(sin2, c2)?;
    let at = tape.mul(alpha2, tan2)?;
    let inner = tape.add_scalar(at, T::one())?;
    let root = tape.sqrt(inner)?;
    let m = tape.add_scalar(root, -T::one())?;
    tape.scale(m, T::lit(0.5))
}

/// Linear, pre-clamp radiance `[3,H,W]` of a `[9,H,W]` material stack.
pub fn radiance_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    stack: Var,
    cfg: &RenderConfig,
) -> Result<Var> {
    cfg.validate()?;
    let (c, h, w) = tape.chw_of("render", stack)?;
    if c != layout::CHANNELS {
        return Err(Error::shape(
            "render",
            "maps",
            "[9, H, W]",
            tape.shape(stack),
        ));
    }
    let geo = geometry::<T>(h, w, cfg);
    let l = geo.l.map(|t| tape.constant(t));
    let half = geo.half.map(|t| tape.constant(t));
    let floor = T::lit(NDOT_FLOOR);

    let albedo = tape.slice_channels(stack, layout::ALBEDO, 3)?;
    let normal = tape.slice_channels(stack, layout::NORMAL, 2)?;
    let rough = tape.slice_channels(stack, layout::ROUGHNESS, 1)?;
    let f0 = tape.slice_channels(stack, layout::SPECULAR, 3)?;

    let n = unit_normal(tape, normal)?;
    let n = [
        term(tape, "normal", Ok(n[0]))?,
        term(tape, "normal", Ok(n[1]))?,
        term(tape, "normal", Ok(n[2]))?,
    ];
    // co-located: v = l
    let n_dot_l = dot3(tape, &n, &l)?;
    let n_dot_h = dot3(tape, &n, &half)?;
    let nl_pos = tape.clamp_min(n_dot_l, T::zero())?;
    let nl = tape.clamp_min(n_dot_l, floor)?;
    let nv = nl;
    let nh = tape.clamp_min(n_dot_h, T::zero())?;

    let r = tape.clamp_min(rough, T::lit(ROUGHNESS_MIN))?;
    let alpha = tape.mul(r, r)?;
    let alpha2 = tape.mul(alpha, alpha)?;

    // D
    let nh2 = tape.mul(nh, nh)?;
    let a2m1 = tape.add_scalar(alpha2, -T::one())?;
    let t = tape.mul(nh2, a2m1)?;
    let t = tape.add_scalar(t, T::one())?;
    let t2 = tape.mul(t, t)?;
    let denom = tape.scale(t2, T::PI())?;
    let d = {
        let r = tape.div(alpha2, denom);
        term(tape, "D", r)
    }?;

    // G (height-correlated Smith)
    let lam_l = smith_lambda(tape, nl, alpha2)?;
    let lam_v = smith_lambda(tape, nv, alpha2)?;
    let lam = tape.add(lam_l, lam_v)?;
    let gden = tape.add_scalar(lam, T::one())?;
    let gden_inv = tape.pow(gden, -T::one())?;
    let g = term(tape, "G", Ok(gden_inv))?;

    // F with per-texel Schlick weight (1 − h·v)⁵, constant in the maps
    let weight: Vec<T> = geo
        .h_dot_v
        .data()
        .iter()
        .map(|&x| (T::one() - x).max(T::zero()).powi(5))
        .collect();
    let keep = Tensor::from_fn(&[3, h, w], |i| T::one() - weight[i % (h * w)]);
    let add = Tensor::from_fn(&[3, h, w], |i| weight[i % (h * w)]);
    let keep = tape.constant(keep);
    let add = tape.constant(add);
    let f_scaled = tape.mul(f0, keep)?;
    let fresnel = {
        let r = tape.add(f_scaled, add);
        term(tape, "F", r)
    }?;

    // specular lobe: D G / (4 n·l n·v), times F per channel
    let dg = tape.mul(d, g)?;
    let nlnv = tape.mul(nl, nv)?;
    let nlnv4 = tape.scale(nlnv, T::lit(4.0))?;
    let lobe = tape.div(dg, nlnv4)?;
    let lobe3 = tape.repeat_channels(lobe, 3)?;
    let specular = {
        let r = tape.mul(fresnel, lobe3);
        term(tape, "specular", r)
    }?;

    let diffuse = tape.scale(albedo, T::FRAC_1_PI())?;
    let brdf = tape.add(diffuse, specular)?;

    let falloff = tape.constant(geo.falloff);
    let irradiance = tape.mul(nl_pos, falloff)?;
    let irradiance3 = tape.repeat_channels(irradiance, 3)?;
    {
        let r = tape.mul(brdf, irradiance3);
        term(tape, "radiance", r)
    }
}

/// Display-space render `[3,H,W]`: `clamp(radiance, 0, 1)^(1/γ)`.
pub fn render_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    stack: Var,
    cfg: &RenderConfig,
) -> Result<Var> {
    let radiance = radiance_on_tape(tape, stack, cfg)?;
    tone_map(tape, radiance, cfg)
}

pub fn tone_map<T: Scalar>(tape: &mut Tape<T>, radiance: Var, cfg: &RenderConfig) -> Result<Var> {
    let clamped = tape.clamp(radiance, T::zero(), T::one())?;
    {
        let r = tape.pow(clamped, T::lit(1.0 / cfg.gamma));
        term(tape, "tone map", r)
    }
}

/// Renders plain maps (no gradients).
pub fn render<T: Scalar>(maps: &MaterialMaps<T>, cfg: &RenderConfig) -> Result<Tensor<T>> {
    maps.validate()?;
    let mut tape = Tape::new();
    let stack = tape.constant(maps.to_stack());
    let out = render_on_tape(&mut tape, stack, cfg)?;
    Ok(tape.value(out).clone())
}

/// Linear pre-clamp radiance of plain maps.
pub fn radiance<T: Scalar>(maps: &MaterialMaps<T>, cfg: &RenderConfig) -> Result<Tensor<T>> {
    maps.validate()?;
    let mut tape = Tape::new();
    let stack = tape.constant(maps.to_stack());
    let out = radiance_on_tape(&mut tape, stack, cfg)?;
    Ok(tape.value(out).clone())
}

/// Renders `k × k` toroidal copies of the maps on a plane `k` times wider, so
/// texel size is unchanged.
pub fn tile_render<T: Scalar>(
    maps: &MaterialMaps<T>,
    cfg: &RenderConfig,
    k: usize,
) -> Result<Tensor<T>> {
    if k == 0 {
        return Err(Error::invalid("tile_render", "k must be at least 1"));
    }
    let tiled = crate::prior::tile(maps, k)?;
    let cfg = RenderConfig {
        plane_extent: cfg.plane_extent * k as f64,
        ..*cfg
    };
    render(&tiled, &cfg)
}

/// GGX normal distribution for one cosine.
pub fn ggx_distribution<T: Scalar>(n_dot_h: T, alpha: T) -> T {
    let a2 = alpha * alpha;
    let t = n_dot_h * n_dot_h * (a2 - T::one()) + T::one();
    a2 / (T::PI() * t * t)
}

/// `x = 2r − 1`, `y = 2g − 1` from an RGB-encoded normal map.
pub fn decode_normal<T: Scalar>(rgb: &Tensor<T>) -> Result<Tensor<T>> {
    match rgb.chw() {
        Some((3, _, _)) => {}
        _ => {
            return Err(Error::shape(
                "decode_normal",
                "rgb",
                "[3, H, W]",
                rgb.shape(),
            ))
        }
    }
    let two = T::lit(2.0);
    Ok(rgb.channels(0, 2).map(|v| two * v - T::one()))
}

/// Inverse of [`decode_normal`]; blue is `(√max(0, 1 − x² − y²) + 1) / 2`.
pub fn encode_normal<T: Scalar>(xy: &Tensor<T>) -> Result<Tensor<T>> {
    let Some((2, h, w)) = xy.chw() else {
        return Err(Error::shape("encode_normal", "xy", "[2, H, W]", xy.shape()));
    };
    let hw = h * w;
    let half = T::lit(0.5);
    let x = xy.data();
    let mut out = Vec::with_capacity(3 * hw);
    out.extend(x.iter().map(|&v| (v + T::one()) * half));
    out.extend((0..hw).map(|i| {
        let z = (T::one() - x[i] * x[i] - x[hw + i] * x[hw + i])
            .max(T::zero())
            .sqrt();
        (z + T::one()) * half
    }));
    Tensor::from_vec(&[3, h, w], out)
}

/// Differentiable [`encode_normal`].
pub fn encode_normal_on_tape<T: Scalar>(tape: &mut Tape<T>, xy: Var) -> Result<Var> {
    let nx = tape.slice_channels(xy, 0, 1)?;
    let ny = tape.slice_channels(xy, 1, 1)?;
    let nz = normal_z(tape, nx, ny)?;
    let all = tape.concat_channels(&[nx, ny, nz])?;
    let shifted = tape.add_scalar(all, T::one())?;
    tape.scale(shifted, T::lit(0.5))
}
