//! Stride-1 "same" 2D convolution via im2col + GEMM.

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Border handling for [`Tape::conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Indices wrap toroidally.
    Circular,
    /// Out-of-range taps read 0.
    Zero,
}

#[derive(Clone, Copy)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    padding: Padding,
}

impl Geom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Source index for output pixel (y, x) and kernel tap (dy, dx), if any.
    #[inline]
    fn source(&self, y: usize, x: usize, dy: usize, dx: usize) -> Option<(usize, usize)> {
        let sy = y as isize + dy as isize - (self.kh / 2) as isize;
        let sx = x as isize + dx as isize - (self.kw / 2) as isize;
        let (h, w) = (self.h as isize, self.w as isize);
        match self.padding {
            Padding::Circular => Some((sy.rem_euclid(h) as usize, sx.rem_euclid(w) as usize)),
            Padding::Zero => {
                (sy >= 0 && sy < h && sx >= 0 && sx < w).then_some((sy as usize, sx as usize))
            }
        }
    }

    fn im2col<T: Scalar>(&self, input: &[T]) -> Vec<T> {
        let hw = self.h * self.w;
        let mut cols = vec![T::zero(); self.rows() * hw];
        for ci in 0..self.c {
            let plane = &input[ci * hw..(ci + 1) * hw];
            for dy in 0..self.kh {
                for dx in 0..self.kw {
                    let row = (ci * self.kh + dy) * self.kw + dx;
                    let out = &mut cols[row * hw..(row + 1) * hw];
                    for y in 0..self.h {
                        for x in 0..self.w {
                            if let Some((sy, sx)) = self.source(y, x, dy, dx) {
                                out[y * self.w + x] = plane[sy * self.w + sx];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Scalar>(&self, cols: &[T]) -> Vec<T> {
        let hw = self.h * self.w;
        let mut img = vec![T::zero(); self.c * hw];
        for ci in 0..self.c {
            let plane = &mut img[ci * hw..(ci + 1) * hw];
            for dy in 0..self.kh {
                for dx in 0..self.kw {
                    let row = (ci * self.kh + dy) * self.kw + dx;
                    let src = &cols[row * hw..(row + 1) * hw];
                    for y in 0..self.h {
                        for x in 0..self.w {
                            if let Some((sy, sx)) = self.source(y, x, dy, dx) {
                                plane[sy * self.w + sx] += src[y * self.w + x];
                            }
                        }
                    }
                }
            }
        }
        img
    }
}

impl<T: Scalar> Tape<T> {
    /// `input [C,H,W] ⊛ weight [K,C,kh,kw] + bias [K] → [K,H,W]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        padding: Padding,
    ) -> Result<Var> {
        let (c, h, w) = self
            .value(input)
            .chw()
            .ok_or_else(|| Error::shape("conv2d", "input", "[C, H, W]", self.shape(input)))?;
        let &[k, wc, kh, kw] = self.shape(weight) else {
            return Err(Error::shape(
                "conv2d",
                "weight",
                format!("[K, {c}, kh, kw]"),
                self.shape(weight),
            ));
        };
        if wc != c || kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                "weight",
                format!("[K, {c}, odd, odd]"),
                self.shape(weight),
            ));
        }
        // a circular kernel wider than the grid would wrap onto itself
        if padding == Padding::Circular && (h < kh || w < kw) {
            return Err(Error::shape(
                "conv2d",
                "input",
                format!("spatial size at least {kh}x{kw}"),
                self.shape(input),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [k] {
                return Err(Error::shape(
                    "conv2d",
                    "bias",
                    format!("[{k}]"),
                    self.shape(b),
                ));
            }
        }
        let geom = Geom {
            c,
            h,
            w,
            kh,
            kw,
            padding,
        };
        let hw = h * w;
        let pointwise = kh == 1 && kw == 1;
        let mut out = vec![T::zero(); k * hw];
        {
            let x = self.value(input).data();
            let cols_owned;
            let cols: &[T] = if pointwise {
                x
            } else {
                cols_owned = geom.im2col(x);
                &cols_owned
            };
            T::gemm(
                k,
                geom.rows(),
                hw,
                self.value(weight).data(),
                false,
                cols,
                false,
                T::zero(),
                &mut out,
            );
        }
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for (ki, plane) in out.chunks_mut(hw).enumerate() {
                plane.iter_mut().for_each(|v| *v += bv[ki]);
            }
        }
        let value = Tensor::from_vec(&[k, h, w], out)?;
        let inputs: Vec<Var> = std::iter::once(input)
            .chain(std::iter::once(weight))
            .chain(bias)
            .collect();
        self.push("conv2d", &inputs, value, move |ctx| {
            let x = ctx.inputs[0].data();
            let wt = ctx.inputs[1].data();
            let g = ctx.grad;
            let rows = geom.rows();
            let dx = ctx.needs[0].then(|| {
                if pointwise {
                    let mut dx = vec![T::zero(); rows * hw];
                    T::gemm(rows, k, hw, wt, true, g, false, T::zero(), &mut dx);
                    dx
                } else {
                    let mut dcols = vec![T::zero(); rows * hw];
                    T::gemm(rows, k, hw, wt, true, g, false, T::zero(), &mut dcols);
                    geom.col2im(&dcols)
                }
            });
            let dw = ctx.needs[1].then(|| {
                let mut dw = vec![T::zero(); k * rows];
                if pointwise {
                    T::gemm(k, hw, rows, g, false, x, true, T::zero(), &mut dw);
                } else {
                    let cols = geom.im2col(x);
                    T::gemm(k, hw, rows, g, false, &cols, true, T::zero(), &mut dw);
                }
                dw
            });
            let mut grads = vec![dx, dw];
            if ctx.inputs.len() == 3 {
                grads.push(
                    ctx.needs[2].then(|| g.chunks(hw).map(|p| p.iter().copied().sum()).collect()),
                );
            }
            grads
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(x: Tensor<f64>, w: Tensor<f64>, padding: Padding) -> Tensor<f64> {
        let mut t = Tape::new();
        let x = t.constant(x);
        let w = t.constant(w);
        let y = t.conv2d(x, w, None, padding).unwrap();
        t.value(y).clone()
    }

    #[test]
    fn ones_kernel_on_ones_sums_nine_circularly() {
        let y = conv(
            Tensor::full(&[1, 3, 3], 1.0),
            Tensor::full(&[1, 1, 3, 3], 1.0),
            Padding::Circular,
        );
        assert!(y.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = Tensor::from_fn(&[2, 5, 6], |i| (i as f64 * 0.7).sin());
        let mut w = Tensor::zeros(&[2, 2, 3, 3]);
        w.data_mut()[4] = 1.0; // k0 <- c0 center
        w.data_mut()[3 * 9 + 4] = 1.0; // k1 <- c1 center
        for p in [Padding::Circular, Padding::Zero] {
            assert_eq!(conv(x.clone(), w.clone(), p), x);
        }
    }

    #[test]
    fn zero_padding_corner_sees_four_taps() {
        let y = conv(
            Tensor::full(&[1, 3, 3], 1.0),
            Tensor::full(&[1, 1, 3, 3], 1.0),
            Padding::Zero,
        );
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[4], 9.0);
    }

    #[test]
    fn rejects_even_kernel() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::zeros(&[1, 4, 4]));
        let w = t.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let err = t.conv2d(x, w, None, Padding::Zero).unwrap_err().to_string();
        assert!(err.contains("weight"), "{err}");
    }
}
