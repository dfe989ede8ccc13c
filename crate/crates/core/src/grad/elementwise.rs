//! Pointwise ops and full reductions.
//!
//! Binary ops accept identical shapes only; tensor-scalar variants take the
//! scalar as a plain value. Kinks (relu, abs, clamp) use subgradient 0.

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<T: Scalar> Tape<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            let expected = format!("{:?} (same as lhs)", self.shape(a));
            return Err(Error::shape(op, "rhs", expected, self.shape(b)));
        }
        Ok(())
    }

    /// Pointwise `f` with derivative `df(x, y)` evaluated at input `x`, output `y`.
    pub fn unary<F, D>(&mut self, name: &'static str, a: Var, f: F, df: D) -> Result<Var>
    where
        F: Fn(T) -> T,
        D: Fn(T, T) -> T + 'static,
    {
        let value = self.value(a).map(f);
        self.push(name, &[a], value, move |ctx| {
            let x = ctx.inputs[0].data();
            let y = ctx.output.data();
            let g = ctx
                .grad
                .iter()
                .zip(x.iter().zip(y))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(g)]
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push("add", &[a, b], value, |ctx| {
            vec![
                ctx.needs[0].then(|| ctx.grad.to_vec()),
                ctx.needs[1].then(|| ctx.grad.to_vec()),
            ]
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push("sub", &[a, b], value, |ctx| {
            vec![
                ctx.needs[0].then(|| ctx.grad.to_vec()),
                ctx.needs[1].then(|| ctx.grad.iter().map(|&g| -g).collect()),
            ]
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push("mul", &[a, b], value, |ctx| {
            let (x, y) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            vec![
                ctx.needs[0].then(|| ctx.grad.iter().zip(y).map(|(&g, &y)| g * y).collect()),
                ctx.needs[1].then(|| ctx.grad.iter().zip(x).map(|(&g, &x)| g * x).collect()),
            ]
        })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        if self.is_debug() {
            if let Some(index) = self.value(b).data().iter().position(|v| v.is_zero()) {
                return Err(Error::DivisionByZero { op: "div", index });
            }
        }
        let value = zip_map(self.value(a), self.value(b), |x, y| x / y);
        self.push("div", &[a, b], value, |ctx| {
            let (x, y) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            vec![
                ctx.needs[0].then(|| ctx.grad.iter().zip(y).map(|(&g, &y)| g / y).collect()),
                ctx.needs[1].then(|| {
                    ctx.grad
                        .iter()
                        .zip(x.iter().zip(y))
                        .map(|(&g, (&x, &y))| -g * x / (y * y))
                        .collect()
                }),
            ]
        })
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        self.unary("add_scalar", a, move |x| x + s, |_, _| T::one())
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.unary("scale", a, move |x| x * s, move |_, _| s)
    }

    /// `x^p`. The derivative is taken as 0 where `x == 0` and `p < 1`.
    pub fn pow(&mut self, a: Var, p: T) -> Result<Var> {
        self.unary(
            "pow",
            a,
            move |x| x.powf(p),
            move |x, _| {
                if x.is_zero() && p < T::one() {
                    T::zero()
                } else {
                    p * x.powf(p - T::one())
                }
            },
        )
    }

    /// Square root with derivative 0 at exactly 0.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(
            "sqrt",
            a,
            |x| x.sqrt(),
            |_, y| {
                if y.is_zero() {
                    T::zero()
                } else {
                    T::lit(0.5) / y
                }
            },
        )
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, |x| x.exp(), |_, y| y)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(
            "sigmoid",
            a,
            |x| T::one() / (T::one() + (-x).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, |x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn clamp_min(&mut self, a: Var, lo: T) -> Result<Var> {
        self.unary(
            "clamp_min",
            a,
            move |x| x.max(lo),
            move |x, _| if x > lo { T::one() } else { T::zero() },
        )
    }

    pub fn clamp_max(&mut self, a: Var, hi: T) -> Result<Var> {
        self.unary(
            "clamp_max",
            a,
            move |x| x.min(hi),
            move |x, _| if x < hi { T::one() } else { T::zero() },
        )
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        self.unary(
            "clamp",
            a,
            move |x| x.max(lo).min(hi),
            move |x, _| {
                if x > lo && x < hi {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.leaky_relu(a, T::zero())
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Result<Var> {
        self.unary(
            "leaky_relu",
            a,
            move |x| if x > T::zero() { x } else { x * slope },
            move |x, _| if x > T::zero() { T::one() } else { slope },
        )
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(
            "abs",
            a,
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -T::one())
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push("sum", &[a], Tensor::scalar(s), |ctx| {
            vec![Some(vec![ctx.grad[0]; ctx.inputs[0].numel()])]
        })
    }

    /// Mean of all elements, as a rank-0 tensor.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::invalid("mean", "empty tensor"));
        }
        let inv = T::one() / T::from_usize_lossy(n);
        let s: T = self.value(a).data().iter().copied().sum();
        self.push("mean", &[a], Tensor::scalar(s * inv), move |ctx| {
            vec![Some(vec![ctx.grad[0] * inv; ctx.inputs[0].numel()])]
        })
    }

    /// Mean absolute difference `mean(|a - b|)`.
    pub fn l1_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l1_distance", a, b)?;
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::invalid("l1_distance", "empty tensor"));
        }
        let inv = T::one() / T::from_usize_lossy(n);
        let s: T = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y).abs())
            .sum();
        self.push(
            "l1_distance",
            &[a, b],
            Tensor::scalar(s * inv),
            move |ctx| {
                let g = ctx.grad[0] * inv;
                let sign: Vec<T> = ctx.inputs[0]
                    .data()
                    .iter()
                    .zip(ctx.inputs[1].data())
                    .map(|(&x, &y)| {
                        if x > y {
                            g
                        } else if x < y {
                            -g
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                let rhs = ctx.needs[1].then(|| sign.iter().map(|&s| -s).collect());
                vec![ctx.needs[0].then_some(sign), rhs]
            },
        )
    }

    /// `Σ wᵢ xᵢ` over rank-0 inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        if terms.is_empty() {
            return Err(Error::invalid("weighted_sum", "no terms"));
        }
        for &(v, _) in terms {
            if self.value(v).numel() != 1 {
                return Err(Error::shape(
                    "weighted_sum",
                    "term",
                    "a scalar",
                    self.shape(v),
                ));
            }
        }
        let s: T = terms.iter().map(|&(v, w)| self.value(v).item() * w).sum();
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let weights: Vec<T> = terms.iter().map(|t| t.1).collect();
        self.push("weighted_sum", &vars, Tensor::scalar(s), move |ctx| {
            weights
                .iter()
                .zip(&ctx.needs)
                .map(|(&w, &need)| need.then(|| vec![ctx.grad[0] * w]))
                .collect()
        })
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}
