//! Feature statistics and distances: masked sample gathering with erosion,
//! resampled sliced Wasserstein, sliced Cramér and Gram matrices.
//!
//! Sample sets are `[n, C]` matrices, one row per selected pixel. All sliced
//! distances project both sets onto the rows of a [`ProjectionSet`] and
//! average a 1D distance over directions.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featnet::{FeaturePyramid, Tap};
use crate::grad::{argsort, Tape, Var};
use crate::labels::Mask;
use crate::rng::sample_without_replacement;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Sw,
    Cramer,
    Gram,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sw" => Ok(LossKind::Sw),
            "cramer" => Ok(LossKind::Cramer),
            "gram" => Ok(LossKind::Gram),
            _ => Err(Error::invalid(
                "loss kind",
                format!("unknown loss '{s}' (sw, cramer, gram)"),
            )),
        }
    }
}

/// Erosion by a `(2r+1)²` square. Neighbourhoods leaving the grid erode the
/// pixel; there is no wraparound.
pub fn erode(mask: &Mask, radius: usize) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = (mask.height(), mask.width());
    // the square element is separable: erode rows, then columns
    let run = |get: &dyn Fn(usize) -> bool, n: usize| -> Vec<bool> {
        (0..n)
            .map(|i| i >= radius && i + radius < n && (i - radius..=i + radius).all(get))
            .collect()
    };
    let mut rows = vec![false; h * w];
    for y in 0..h {
        let r = run(&|x| mask.get(y, x), w);
        rows[y * w..(y + 1) * w].copy_from_slice(&r);
    }
    let mut out = vec![false; h * w];
    for x in 0..w {
        let c = run(&|y| rows[y * w + x], h);
        for y in 0..h {
            out[y * w + x] = c[y];
        }
    }
    Mask::new(h, w, out).expect("same size")
}

/// `n` feature vectors from one region at one tap, `[n, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet<T> {
    pub values: Tensor<T>,
}

impl<T: Scalar> SampleSet<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::shape(
                "sample set",
                "values",
                "[n, C]",
                values.shape(),
            ));
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Rows of `features` (`[C,H,W]`) at the set pixels of `mask`, in raster order.
pub fn gather<T: Scalar>(features: &Tensor<T>, mask: &Mask) -> Result<SampleSet<T>> {
    let Some((c, h, w)) = features.chw() else {
        return Err(Error::shape(
            "gather",
            "features",
            "[C, H, W]",
            features.shape(),
        ));
    };
    check_mask("gather", mask, h, w)?;
    let idx = mask.indices();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &p in &idx {
        for ci in 0..c {
            data.push(features.data()[ci * h * w + p]);
        }
    }
    SampleSet::new(Tensor::from_vec(&[idx.len(), c], data)?)
}

/// Differentiable [`gather`]; `None` for an empty mask.
pub fn gather_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    features: Var,
    mask: &Mask,
) -> Result<Option<Var>> {
    let shape = tape.shape(features).to_vec();
    let &[_, h, w] = shape.as_slice() else {
        return Err(Error::shape("gather", "features", "[C, H, W]", &shape));
    };
    check_mask("gather", mask, h, w)?;
    if mask.count() == 0 {
        return Ok(None);
    }
    tape.gather_pixels(features, &mask.indices()).map(Some)
}

fn check_mask(op: &'static str, mask: &Mask, h: usize, w: usize) -> Result<()> {
    if mask.height() != h || mask.width() != w {
        return Err(Error::shape(
            op,
            "mask",
            format!("{h}x{w}"),
            &[mask.height(), mask.width()],
        ));
    }
    Ok(())
}

/// Unit slicing directions, `[D, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionSet<T> {
    directions: Tensor<T>,
    /// `directions` transposed, `[C, D]`, ready for `samples × dirsᵀ`.
    transposed: Tensor<T>,
}

impl<T: Scalar> ProjectionSet<T> {
    /// Rows are normalized; zero rows are rejected.
    pub fn from_rows(directions: Tensor<T>) -> Result<Self> {
        let &[d, c] = directions.shape() else {
            return Err(Error::shape(
                "projection set",
                "directions",
                "[D, C]",
                directions.shape(),
            ));
        };
        let mut rows = directions.into_data();
        for r in rows.chunks_mut(c) {
            let norm = r.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm == T::zero() || !norm.is_finite() {
                return Err(Error::invalid(
                    "projection set",
                    "direction with zero or non-finite norm",
                ));
            }
            r.iter_mut().for_each(|v| *v /= norm);
        }
        let mut t = vec![T::zero(); c * d];
        for i in 0..d {
            for j in 0..c {
                t[j * d + i] = rows[i * c + j];
            }
        }
        Ok(Self {
            directions: Tensor::from_vec(&[d, c], rows)?,
            transposed: Tensor::from_vec(&[c, d], t)?,
        })
    }

    /// `d` Gaussian directions in `c` dimensions, normalized.
    pub fn random<R: Rng + ?Sized>(d: usize, c: usize, rng: &mut R) -> Self {
        loop {
            if let Ok(p) = Self::from_rows(Tensor::randn(&[d, c], 1.0, rng)) {
                return p;
            }
        }
    }

    /// Single coordinate axis `e_axis` in `c` dimensions.
    pub fn axis(c: usize, axis: usize) -> Self {
        Self::from_rows(Tensor::from_fn(&[1, c], |j| {
            if j == axis {
                T::one()
            } else {
                T::zero()
            }
        }))
        .expect("unit axis")
    }

    pub fn directions(&self) -> &Tensor<T> {
        &self.directions
    }

    pub fn count(&self) -> usize {
        self.directions.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.directions.shape()[1]
    }

    fn project(&self, tape: &mut Tape<T>, samples: Var) -> Result<Var> {
        let dirs = tape.constant(self.transposed.clone());
        tape.matmul(samples, dirs)
    }
}

fn check_pair<T: Scalar>(
    tape: &Tape<T>,
    op: &'static str,
    a: Var,
    b: Var,
    c: usize,
) -> Result<(usize, usize)> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    match (sa, sb) {
        (&[n, ca], &[m, cb]) if ca == c && cb == c => {
            if n == 0 || m == 0 {
                Err(Error::invalid(op, "empty sample set"))
            } else {
                Ok((n, m))
            }
        }
        _ => Err(Error::shape(
            op,
            "samples",
            format!("[n, {c}] on both sides"),
            if sa.len() == 2 && sa[1] == c { sb } else { sa },
        )),
    }
}

/// Resampled sliced Wasserstein-1 between `a` (`[n,C]`, optimized side) and
/// `b` (`[m,C]`). Per direction the larger projected set is subsampled
/// without replacement to the smaller count, both are sorted, and the mean
/// absolute difference is taken; the result averages over directions.
pub fn sw_loss_on_tape<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    a: Var,
    b: Var,
    proj: &ProjectionSet<T>,
    rng: &mut R,
) -> Result<Var> {
    let (n, m) = check_pair(tape, "sw_loss", a, b, proj.dim())?;
    let d = proj.count();
    let mut pa = proj.project(tape, a)?;
    let mut pb = proj.project(tape, b)?;
    if n < m {
        let rows: Vec<Vec<usize>> = (0..d)
            .map(|_| sample_without_replacement(m, n, rng))
            .collect();
        pb = tape.gather_rows_per_column(pb, &rows)?;
    } else if n > m {
        let rows: Vec<Vec<usize>> = (0..d)
            .map(|_| sample_without_replacement(n, m, rng))
            .collect();
        pa = tape.gather_rows_per_column(pa, &rows)?;
    }
    let sa = tape.sort_columns(pa)?;
    let sb = tape.sort_columns(pb)?;
    tape.l1_distance(sa, sb)
}

/// Sliced Cramér distance: per direction `∫ (F_a − F_b)² dx` between the
/// empirical CDFs, averaged over directions. Unequal counts need no
/// resampling.
pub fn cramer_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    a: Var,
    b: Var,
    proj: &ProjectionSet<T>,
) -> Result<Var> {
    let (n, m) = check_pair(tape, "cramer_loss", a, b, proj.dim())?;
    let d = proj.count();
    let pa = proj.project(tape, a)?;
    let pb = proj.project(tape, b)?;
    let (u, v) = (tape.value(pa).data(), tape.value(pb).data());
    let mut total = T::zero();
    let mut grads_u = vec![T::zero(); n * d];
    let mut grads_v = vec![T::zero(); m * d];
    let mut col_u = vec![T::zero(); n];
    let mut col_v = vec![T::zero(); m];
    let mut gu = vec![T::zero(); n];
    let mut gv = vec![T::zero(); m];
    for j in 0..d {
        for i in 0..n {
            col_u[i] = u[i * d + j];
        }
        for i in 0..m {
            col_v[i] = v[i * d + j];
        }
        total += cramer_1d(&col_u, &col_v, &mut gu, &mut gv);
        for i in 0..n {
            grads_u[i * d + j] = gu[i];
        }
        for i in 0..m {
            grads_v[i * d + j] = gv[i];
        }
    }
    let inv_d = T::one() / T::from_usize_lossy(d);
    tape.push(
        "cramer_loss",
        &[pa, pb],
        Tensor::scalar(total * inv_d),
        move |ctx| {
            let g = ctx.grad[0] * inv_d;
            vec![
                ctx.needs[0].then(|| grads_u.iter().map(|&x| x * g).collect()),
                ctx.needs[1].then(|| grads_v.iter().map(|&x| x * g).collect()),
            ]
        },
    )
}

/// Exact `∫ (F_u − F_v)² dx` by sweeping the merged sorted samples. Writes
/// the derivative with respect to each sample into `gu` / `gv`: moving a
/// sample right widens the interval on its left, so its derivative is
/// `D_left² − D_right²` with `D = F_u − F_v` on either side of it.
pub fn cramer_1d<T: Scalar>(u: &[T], v: &[T], gu: &mut [T], gv: &mut [T]) -> T {
    let (n, m) = (u.len(), v.len());
    let (su, sv) = (
        T::one() / T::from_usize_lossy(n),
        T::one() / T::from_usize_lossy(m),
    );
    let ou = argsort(u);
    let ov = argsort(v);
    let (mut i, mut k) = (0, 0);
    let mut diff = T::zero();
    let mut total = T::zero();
    let mut prev: Option<T> = None;
    while i < n || k < m {
        let take_u = k == m || (i < n && u[ou[i]] <= v[ov[k]]);
        let x = if take_u { u[ou[i]] } else { v[ov[k]] };
        if let Some(p) = prev {
            total += diff * diff * (x - p);
        }
        let before = diff;
        if take_u {
            diff += su;
            gu[ou[i]] = before * before - diff * diff;
            i += 1;
        } else {
            diff -= sv;
            gv[ov[k]] = before * before - diff * diff;
            k += 1;
        }
        prev = Some(x);
    }
    total
}

/// `XᵀX / n` of an `[n, C]` sample matrix.
pub fn gram_on_tape<T: Scalar>(tape: &mut Tape<T>, samples: Var) -> Result<Var> {
    let &[n, c] = tape.shape(samples) else {
        return Err(Error::shape(
            "gram",
            "samples",
            "[n, C]",
            tape.shape(samples),
        ));
    };
    if n == 0 {
        return Err(Error::invalid("gram", "empty sample set"));
    }
    let inv = T::one() / T::from_usize_lossy(n);
    let mut g = vec![T::zero(); c * c];
    T::gemm(
        c,
        n,
        c,
        tape.value(samples).data(),
        true,
        tape.value(samples).data(),
        false,
        T::zero(),
        &mut g,
    );
    g.iter_mut().for_each(|v| *v *= inv);
    tape.push(
        "gram",
        &[samples],
        Tensor::from_vec(&[c, c], g)?,
        move |ctx| {
            // d/dX of XᵀX/n is X (Ḡ + Ḡᵀ) / n
            let gs: Vec<T> = (0..c * c)
                .map(|idx| (ctx.grad[idx] + ctx.grad[(idx % c) * c + idx / c]) * inv)
                .collect();
            let mut dx = vec![T::zero(); n * c];
            T::gemm(
                n,
                c,
                c,
                ctx.inputs[0].data(),
                false,
                &gs,
                false,
                T::zero(),
                &mut dx,
            );
            vec![Some(dx)]
        },
    )
}

/// Gram matrix of `features` (`[C,H,W]`) over `mask` (all pixels if `None`).
/// `None` when the mask selects nothing.
pub fn gram<T: Scalar>(features: &Tensor<T>, mask: Option<&Mask>) -> Result<Option<Tensor<T>>> {
    let Some((_, h, w)) = features.chw() else {
        return Err(Error::shape(
            "gram",
            "features",
            "[C, H, W]",
            features.shape(),
        ));
    };
    let full = Mask::full(h, w, true);
    let set = gather(features, mask.unwrap_or(&full))?;
    if set.is_empty() {
        return Ok(None);
    }
    let mut tape = Tape::new();
    let x = tape.constant(set.values);
    let g = gram_on_tape(&mut tape, x)?;
    Ok(Some(tape.value(g).clone()))
}

/// Configured distance between two `[n, C]` sample sets. The Gram variant
/// compares Gram matrices by mean absolute difference.
pub fn distance_on_tape<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    kind: LossKind,
    a: Var,
    b: Var,
    proj: &ProjectionSet<T>,
    rng: &mut R,
) -> Result<Var> {
    match kind {
        LossKind::Sw => sw_loss_on_tape(tape, a, b, proj, rng),
        LossKind::Cramer => cramer_loss_on_tape(tape, a, b, proj),
        LossKind::Gram => {
            let ga = gram_on_tape(tape, a)?;
            let gb = gram_on_tape(tape, b)?;
            tape.l1_distance(ga, gb)
        }
    }
}

fn plain<T: Scalar>(
    a: &SampleSet<T>,
    b: &SampleSet<T>,
    f: impl FnOnce(&mut Tape<T>, Var, Var) -> Result<Var>,
) -> Result<Option<T>> {
    if a.is_empty() || b.is_empty() {
        return Ok(None);
    }
    let mut tape = Tape::new();
    let va = tape.constant(a.values.clone());
    let vb = tape.constant(b.values.clone());
    let out = f(&mut tape, va, vb)?;
    Ok(Some(tape.value(out).item()))
}

/// Value of [`sw_loss_on_tape`]; `None` (skip) when either set is empty.
pub fn sw_loss<T: Scalar, R: Rng + ?Sized>(
    a: &SampleSet<T>,
    b: &SampleSet<T>,
    proj: &ProjectionSet<T>,
    rng: &mut R,
) -> Result<Option<T>> {
    plain(a, b, |t, x, y| sw_loss_on_tape(t, x, y, proj, rng))
}

/// Value of [`cramer_loss_on_tape`]; `None` (skip) when either set is empty.
pub fn cramer_loss<T: Scalar>(
    a: &SampleSet<T>,
    b: &SampleSet<T>,
    proj: &ProjectionSet<T>,
) -> Result<Option<T>> {
    plain(a, b, |t, x, y| cramer_loss_on_tape(t, x, y, proj))
}

/// `Σ w · mean|p − q|` over weighted taps, on a tape.
pub fn feature_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BTreeMap<Tap, Var>,
    q: &BTreeMap<Tap, Var>,
    weights: &[(Tap, T)],
) -> Result<Var> {
    let mut terms = Vec::with_capacity(weights.len());
    for &(tap, w) in weights {
        let (Some(&a), Some(&b)) = (p.get(&tap), q.get(&tap)) else {
            return Err(Error::invalid("feature_loss", format!("tap {tap} missing")));
        };
        terms.push((tape.l1_distance(a, b)?, w));
    }
    tape.weighted_sum(&terms)
}

/// Value of [`feature_loss_on_tape`] for two plain pyramids.
pub fn feature_loss<T: Scalar>(
    p: &FeaturePyramid<T>,
    q: &FeaturePyramid<T>,
    weights: &[(Tap, T)],
) -> Result<T> {
    let mut tape = Tape::new();
    let mut bind = |pyr: &FeaturePyramid<T>| -> BTreeMap<Tap, Var> {
        weights
            .iter()
            .filter_map(|&(t, _)| pyr.get(t).map(|f| (t, tape.constant(f.clone()))))
            .collect()
    };
    let (a, b) = (bind(p), bind(q));
    let out = feature_loss_on_tape(&mut tape, &a, &b, weights)?;
    Ok(tape.value(out).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(rows: &[&[f64]]) -> SampleSet<f64> {
        let c = rows[0].len();
        SampleSet::new(Tensor::from_vec(&[rows.len(), c], rows.concat()).unwrap()).unwrap()
    }

    #[test]
    fn erosion_radius_zero_and_border() {
        let m = Mask::from_fn(5, 5, |y, x| (y + x) % 3 != 0);
        assert_eq!(erode(&m, 0), m);
        let full = Mask::full(7, 7, true);
        let e = erode(&full, 2);
        assert_eq!(e.count(), 9);
        assert!(e.get(2, 2) && e.get(4, 4) && !e.get(1, 3));
    }

    #[test]
    fn hand_value_of_eq4() {
        let u = set(&[&[1.0], &[2.0], &[3.0]]);
        let v = set(&[&[0.0], &[0.0], &[0.0]]);
        let mut rng = crate::rng::stream(0, crate::rng::Stream::Subsample, 0);
        let l = sw_loss(&u, &v, &ProjectionSet::axis(1, 0), &mut rng)
            .unwrap()
            .unwrap();
        assert_eq!(l, 2.0);
    }

    #[test]
    fn cramer_step_cdfs() {
        let u = set(&[&[0.0]]);
        let v = set(&[&[1.0]]);
        let l = cramer_loss(&u, &v, &ProjectionSet::axis(1, 0))
            .unwrap()
            .unwrap();
        assert!((l - 1.0).abs() < 1e-15);
    }

    #[test]
    fn empty_sets_skip() {
        let u = SampleSet::new(Tensor::<f64>::zeros(&[0, 2])).unwrap();
        let v = set(&[&[1.0, 2.0]]);
        assert_eq!(
            cramer_loss(&u, &v, &ProjectionSet::axis(2, 0)).unwrap(),
            None
        );
    }

    #[test]
    fn gram_two_constant_channels() {
        let f = Tensor::from_fn(&[2, 3, 3], |i| if i < 9 { 1.0 } else { 2.0 });
        let g = gram(&f, None).unwrap().unwrap();
        assert_eq!(g.data(), &[1.0, 2.0, 2.0, 4.0]);
        let empty = Mask::full(3, 3, false);
        assert_eq!(gram(&f, Some(&empty)).unwrap(), None);
    }

    #[test]
    fn directions_are_unit() {
        let mut rng = crate::rng::stream(3, crate::rng::Stream::Directions, 0);
        let p = ProjectionSet::<f32>::random(16, 16, &mut rng);
        for r in p.directions().data().chunks(16) {
            let n: f32 = r.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }
}
