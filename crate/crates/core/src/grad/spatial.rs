//! Resampling, toroidal indexing and channel plumbing on `[C, H, W]` grids.

use std::rc::Rc;

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Interpolation used by [`Tape::upsample2x`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsample {
    Nearest,
    /// Half-pixel-centred bilinear with wrapped neighbours.
    BilinearCircular,
}

impl<T: Scalar> Tape<T> {
    pub(crate) fn chw_of(&self, op: &'static str, v: Var) -> Result<(usize, usize, usize)> {
        self.value(v)
            .chw()
            .ok_or_else(|| Error::shape(op, "input", "[C, H, W]", self.shape(v)))
    }

    /// `out[i] = input[src[i]]`; gradients scatter back.
    pub fn gather_index(
        &mut self,
        name: &'static str,
        a: Var,
        out_shape: &[usize],
        src: Vec<usize>,
    ) -> Result<Var> {
        let n = self.value(a).numel();
        debug_assert!(src.iter().all(|&s| s < n));
        let x = self.value(a).data();
        let value = Tensor::from_vec(out_shape, src.iter().map(|&s| x[s]).collect())?;
        self.push(name, &[a], value, move |ctx| {
            let mut g = vec![T::zero(); ctx.inputs[0].numel()];
            for (&s, &d) in src.iter().zip(ctx.grad) {
                g[s] += d;
            }
            vec![Some(g)]
        })
    }

    /// Output element `i` is `Σ w · input[j]` over `taps[i]`.
    fn weighted_gather<const N: usize>(
        &mut self,
        name: &'static str,
        a: Var,
        out_shape: &[usize],
        taps: Vec<[(usize, T); N]>,
    ) -> Result<Var> {
        let x = self.value(a).data();
        let data = taps
            .iter()
            .map(|t| t.iter().fold(T::zero(), |s, &(j, w)| s + w * x[j]))
            .collect();
        let value = Tensor::from_vec(out_shape, data)?;
        let taps = Rc::new(taps);
        self.push(name, &[a], value, move |ctx| {
            let mut g = vec![T::zero(); ctx.inputs[0].numel()];
            for (t, &d) in taps.iter().zip(ctx.grad) {
                for &(j, w) in t {
                    g[j] += w * d;
                }
            }
            vec![Some(g)]
        })
    }

    pub fn upsample2x(&mut self, a: Var, mode: Upsample) -> Result<Var> {
        let (c, h, w) = self.chw_of("upsample2x", a)?;
        let (oh, ow) = (2 * h, 2 * w);
        let out_shape = [c, oh, ow];
        match mode {
            Upsample::Nearest => {
                let mut src = Vec::with_capacity(c * oh * ow);
                for ci in 0..c {
                    for y in 0..oh {
                        for x in 0..ow {
                            src.push((ci * h + y / 2) * w + x / 2);
                        }
                    }
                }
                self.gather_index("upsample2x", a, &out_shape, src)
            }
            Upsample::BilinearCircular => {
                let near = T::lit(0.75);
                let far = T::lit(0.25);
                // output row 2y sits at y - 1/4, row 2y+1 at y + 1/4
                let axis = |o: usize, n: usize| -> [(usize, T); 2] {
                    let i = o / 2;
                    let j = if o % 2 == 0 {
                        (i + n - 1) % n
                    } else {
                        (i + 1) % n
                    };
                    [(i, near), (j, far)]
                };
                let mut taps = Vec::with_capacity(c * oh * ow);
                for ci in 0..c {
                    let base = ci * h * w;
                    for y in 0..oh {
                        let ry = axis(y, h);
                        for x in 0..ow {
                            let rx = axis(x, w);
                            let mut t = [(0usize, T::zero()); 4];
                            for (a_i, &(sy, wy)) in ry.iter().enumerate() {
                                for (b_i, &(sx, wx)) in rx.iter().enumerate() {
                                    t[a_i * 2 + b_i] = (base + sy * w + sx, wy * wx);
                                }
                            }
                            taps.push(t);
                        }
                    }
                }
                self.weighted_gather("upsample2x", a, &out_shape, taps)
            }
        }
    }

    /// Non-overlapping 2×2 mean.
    pub fn avgpool2x(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = self.chw_of("avgpool2x", a)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "avgpool2x",
                "input",
                "even H and W",
                self.shape(a),
            ));
        }
        let (oh, ow) = (h / 2, w / 2);
        let q = T::lit(0.25);
        let mut taps = Vec::with_capacity(c * oh * ow);
        for ci in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let i = (ci * h + 2 * y) * w + 2 * x;
                    taps.push([(i, q), (i + 1, q), (i + w, q), (i + w + 1, q)]);
                }
            }
        }
        self.weighted_gather("avgpool2x", a, &[c, oh, ow], taps)
    }

    /// Toroidal translation: content at `(y, x)` moves to `(y+dy, x+dx) mod (H, W)`.
    pub fn cyclic_shift(&mut self, a: Var, dx: isize, dy: isize) -> Result<Var> {
        let (c, h, w) = self.chw_of("cyclic_shift", a)?;
        let src = toroidal_window(c, h, w, -dy, -dx, h, w);
        self.gather_index("cyclic_shift", a, &[c, h, w], src)
    }

    /// `k × k` toroidal repetition.
    pub fn tile(&mut self, a: Var, k: usize) -> Result<Var> {
        if k == 0 {
            return Err(Error::invalid("tile", "repeat count must be at least 1"));
        }
        let (c, h, w) = self.chw_of("tile", a)?;
        let src = toroidal_window(c, h, w, 0, 0, k * h, k * w);
        self.gather_index("tile", a, &[c, k * h, k * w], src)
    }

    /// `out_h × out_w` window starting at `(oy, ox)` with wrapped indexing.
    pub fn crop_toroidal(
        &mut self,
        a: Var,
        oy: isize,
        ox: isize,
        out_h: usize,
        out_w: usize,
    ) -> Result<Var> {
        let (c, h, w) = self.chw_of("crop_toroidal", a)?;
        let src = toroidal_window(c, h, w, oy, ox, out_h, out_w);
        self.gather_index("crop_toroidal", a, &[c, out_h, out_w], src)
    }

    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (c, h, w) = self.chw_of("slice_channels", a)?;
        if start + len > c || len == 0 {
            return Err(Error::shape(
                "slice_channels",
                "input",
                format!("at least {} channels", start + len),
                self.shape(a),
            ));
        }
        let src = (start * h * w..(start + len) * h * w).collect();
        self.gather_index("slice_channels", a, &[len, h, w], src)
    }

    /// Repeats a `[C,H,W]` grid `k` times along channels.
    pub fn repeat_channels(&mut self, a: Var, k: usize) -> Result<Var> {
        let (c, h, w) = self.chw_of("repeat_channels", a)?;
        let n = c * h * w;
        let src = (0..k * n).map(|i| i % n).collect();
        self.gather_index("repeat_channels", a, &[k * c, h, w], src)
    }

    /// Stacks `[Cᵢ,H,W]` grids along channels.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::invalid("concat_channels", "no inputs"));
        };
        let (_, h, w) = self.chw_of("concat_channels", first)?;
        let mut total = 0;
        for &p in parts {
            let (c, ph, pw) = self.chw_of("concat_channels", p)?;
            if (ph, pw) != (h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    "part",
                    format!("[C, {h}, {w}]"),
                    self.shape(p),
                ));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(total * h * w);
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
            sizes.push(self.value(p).numel());
        }
        let value = Tensor::from_vec(&[total, h, w], data)?;
        self.push("concat_channels", parts, value, move |ctx| {
            let mut off = 0;
            sizes
                .iter()
                .zip(&ctx.needs)
                .map(|(&n, &need)| {
                    let g = need.then(|| ctx.grad[off..off + n].to_vec());
                    off += n;
                    g
                })
                .collect()
        })
    }

    /// `x[c] * scale[c] + bias[c]` on a `[C,H,W]` grid.
    pub fn channel_affine(&mut self, a: Var, scale: Var, bias: Var) -> Result<Var> {
        let (c, h, w) = self.chw_of("channel_affine", a)?;
        for (name, v) in [("scale", scale), ("bias", bias)] {
            if self.shape(v) != [c] {
                return Err(Error::shape(
                    "channel_affine",
                    name,
                    format!("[{c}]"),
                    self.shape(v),
                ));
            }
        }
        let hw = h * w;
        let (s, b) = (self.value(scale).data(), self.value(bias).data());
        let data = self
            .value(a)
            .data()
            .chunks(hw)
            .enumerate()
            .flat_map(|(ci, p)| p.iter().map(move |&x| x * s[ci] + b[ci]))
            .collect();
        let value = Tensor::from_vec(&[c, h, w], data)?;
        self.push("channel_affine", &[a, scale, bias], value, move |ctx| {
            let (x, s) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let g = ctx.grad;
            let dx = ctx.needs[0].then(|| {
                g.chunks(hw)
                    .enumerate()
                    .flat_map(|(ci, p)| p.iter().map(move |&d| d * s[ci]))
                    .collect()
            });
            let ds = ctx.needs[1].then(|| {
                g.chunks(hw)
                    .zip(x.chunks(hw))
                    .map(|(gp, xp)| gp.iter().zip(xp).map(|(&d, &v)| d * v).sum())
                    .collect()
            });
            let db = ctx.needs[2].then(|| g.chunks(hw).map(|p| p.iter().copied().sum()).collect());
            vec![dx, ds, db]
        })
    }

    /// `x[c] + strength[c] * noise[0]` with a single-channel noise grid.
    pub fn add_noise(&mut self, a: Var, noise: Var, strength: Var) -> Result<Var> {
        let (c, h, w) = self.chw_of("add_noise", a)?;
        if self.shape(noise) != [1, h, w] {
            return Err(Error::shape(
                "add_noise",
                "noise",
                format!("[1, {h}, {w}]"),
                self.shape(noise),
            ));
        }
        if self.shape(strength) != [c] {
            return Err(Error::shape(
                "add_noise",
                "strength",
                format!("[{c}]"),
                self.shape(strength),
            ));
        }
        let hw = h * w;
        let (n, s) = (self.value(noise).data(), self.value(strength).data());
        let data = self
            .value(a)
            .data()
            .chunks(hw)
            .enumerate()
            .flat_map(|(ci, p)| p.iter().zip(n).map(move |(&x, &nv)| x + s[ci] * nv))
            .collect();
        let value = Tensor::from_vec(&[c, h, w], data)?;
        self.push("add_noise", &[a, noise, strength], value, move |ctx| {
            let (n, s) = (ctx.inputs[1].data(), ctx.inputs[2].data());
            let g = ctx.grad;
            let dx = ctx.needs[0].then(|| g.to_vec());
            let dn = ctx.needs[1].then(|| {
                let mut dn = vec![T::zero(); hw];
                for (ci, p) in g.chunks(hw).enumerate() {
                    for (acc, &d) in dn.iter_mut().zip(p) {
                        *acc += d * s[ci];
                    }
                }
                dn
            });
            let ds = ctx.needs[2].then(|| {
                g.chunks(hw)
                    .map(|p| p.iter().zip(n).map(|(&d, &nv)| d * nv).sum())
                    .collect()
            });
            vec![dx, dn, ds]
        })
    }

    /// Scales each `(x, y)` pixel of a `[2,H,W]` grid back into the unit disk.
    pub fn unit_disk_clamp(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = self.chw_of("unit_disk_clamp", a)?;
        if c != 2 {
            return Err(Error::shape(
                "unit_disk_clamp",
                "input",
                "[2, H, W]",
                self.shape(a),
            ));
        }
        let hw = h * w;
        let x = self.value(a).data();
        let mut data = x.to_vec();
        for i in 0..hw {
            let r = (x[i] * x[i] + x[hw + i] * x[hw + i]).sqrt();
            if r > T::one() {
                data[i] = x[i] / r;
                data[hw + i] = x[hw + i] / r;
            }
        }
        let value = Tensor::from_vec(&[2, h, w], data)?;
        self.push("unit_disk_clamp", &[a], value, move |ctx| {
            let x = ctx.inputs[0].data();
            let g = ctx.grad;
            let mut d = g.to_vec();
            for i in 0..hw {
                let (u, v) = (x[i], x[hw + i]);
                let r2 = u * u + v * v;
                if r2 > T::one() {
                    // d(p/r)/dp = (I - p pᵀ / r²) / r
                    let r = r2.sqrt();
                    let dot = (g[i] * u + g[hw + i] * v) / r2;
                    d[i] = (g[i] - dot * u) / r;
                    d[hw + i] = (g[hw + i] - dot * v) / r;
                }
            }
            vec![Some(d)]
        })
    }
}

/// Source indices of an `out_h × out_w` window at `(oy, ox)` on a wrapped `[C,H,W]` grid.
pub(crate) fn toroidal_window(
    c: usize,
    h: usize,
    w: usize,
    oy: isize,
    ox: isize,
    out_h: usize,
    out_w: usize,
) -> Vec<usize> {
    let mut src = Vec::with_capacity(c * out_h * out_w);
    for ci in 0..c {
        for y in 0..out_h {
            let sy = (y as isize + oy).rem_euclid(h as isize) as usize;
            for x in 0..out_w {
                let sx = (x as isize + ox).rem_euclid(w as isize) as usize;
                src.push((ci * h + sy) * w + sx);
            }
        }
    }
    src
}
