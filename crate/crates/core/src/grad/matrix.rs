//! Matrix-shaped ops: products, pixel gathering and sorting.

use std::cmp::Ordering;

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stable ascending argsort; NaNs compare equal.
pub fn argsort<T: Scalar>(values: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(Ordering::Equal));
    idx
}

impl<T: Scalar> Tape<T> {
    fn matrix_of(&self, op: &'static str, operand: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(op, operand, "[rows, cols]", self.shape(v))),
        }
    }

    /// `[n,k] × [k,m] → [n,m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.matrix_of("matmul", "lhs", a)?;
        let (k2, m) = self.matrix_of("matmul", "rhs", b)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                "rhs",
                format!("[{k}, cols]"),
                self.shape(b),
            ));
        }
        let mut out = vec![T::zero(); n * m];
        T::gemm(
            n,
            k,
            m,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            T::zero(),
            &mut out,
        );
        let value = Tensor::from_vec(&[n, m], out)?;
        self.push("matmul", &[a, b], value, move |ctx| {
            let (av, bv, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
            let da = ctx.needs[0].then(|| {
                let mut d = vec![T::zero(); n * k];
                T::gemm(n, m, k, g, false, bv, true, T::zero(), &mut d);
                d
            });
            let db = ctx.needs[1].then(|| {
                let mut d = vec![T::zero(); k * m];
                T::gemm(k, n, m, av, true, g, false, T::zero(), &mut d);
                d
            });
            vec![da, db]
        })
    }

    /// Ascending sort of a vector. Returns the sorted values and the
    /// permutation `perm` with `sorted[i] = input[perm[i]]`.
    pub fn sort1d(&mut self, a: Var) -> Result<(Var, Vec<usize>)> {
        let &[n] = self.shape(a) else {
            return Err(Error::shape("sort1d", "input", "[n]", self.shape(a)));
        };
        if n == 0 {
            return Err(Error::invalid("sort1d", "empty input"));
        }
        let perm = argsort(self.value(a).data());
        let src = perm.clone();
        let out = self.gather_index("sort1d", a, &[n], src)?;
        Ok((out, perm))
    }

    /// Sorts every column of an `[n, D]` matrix independently.
    pub fn sort_columns(&mut self, a: Var) -> Result<Var> {
        let (n, d) = self.matrix_of("sort_columns", "input", a)?;
        let x = self.value(a).data();
        let mut src = vec![0usize; n * d];
        let mut column = vec![T::zero(); n];
        for j in 0..d {
            for i in 0..n {
                column[i] = x[i * d + j];
            }
            for (i, p) in argsort(&column).into_iter().enumerate() {
                src[i * d + j] = p * d + j;
            }
        }
        self.gather_index("sort_columns", a, &[n, d], src)
    }

    /// Picks rows `rows[j]` from column `j` of an `[n, D]` matrix; every list
    /// must have the same length `m`, giving `[m, D]`.
    pub fn gather_rows_per_column(&mut self, a: Var, rows: &[Vec<usize>]) -> Result<Var> {
        let (n, d) = self.matrix_of("gather_rows_per_column", "input", a)?;
        if rows.len() != d {
            return Err(Error::invalid(
                "gather_rows_per_column",
                format!("{} index lists for {d} columns", rows.len()),
            ));
        }
        let m = rows.first().map_or(0, Vec::len);
        if rows
            .iter()
            .any(|r| r.len() != m || r.iter().any(|&i| i >= n))
        {
            return Err(Error::invalid(
                "gather_rows_per_column",
                format!("index lists must all have length {m} and indices < {n}"),
            ));
        }
        let mut src = vec![0usize; m * d];
        for (j, list) in rows.iter().enumerate() {
            for (i, &r) in list.iter().enumerate() {
                src[i * d + j] = r * d + j;
            }
        }
        self.gather_index("gather_rows_per_column", a, &[m, d], src)
    }

    /// Channel vectors of the listed pixels (`y * W + x`) of a `[C,H,W]` grid, as `[n, C]`.
    pub fn gather_pixels(&mut self, a: Var, pixels: &[usize]) -> Result<Var> {
        let (c, h, w) = self.chw_of("gather_pixels", a)?;
        let hw = h * w;
        if let Some(&bad) = pixels.iter().find(|&&p| p >= hw) {
            return Err(Error::invalid(
                "gather_pixels",
                format!("pixel {bad} outside {h}x{w}"),
            ));
        }
        let mut src = Vec::with_capacity(pixels.len() * c);
        for &p in pixels {
            for ci in 0..c {
                src.push(ci * hw + p);
            }
        }
        self.gather_index("gather_pixels", a, &[pixels.len(), c], src)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sort_example_and_permutation_transport() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::from_vec(&[3], vec![3.0, 1.0, 2.0]).unwrap());
        let (s, perm) = t.sort1d(x).unwrap();
        assert_eq!(t.value(s).data(), &[1.0, 2.0, 3.0]);
        assert_eq!(perm, vec![1, 2, 0]);
        // upstream [a, b, c] = [10, 20, 30]
        let w = t.constant(Tensor::from_vec(&[3], vec![10.0, 20.0, 30.0]).unwrap());
        let p = t.mul(s, w).unwrap();
        let l = t.sum(p).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[30.0, 10.0, 20.0]);
    }

    #[test]
    fn sort_columns_sorts_each_column() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::from_vec(&[3, 2], vec![3.0, 0.0, 1.0, 5.0, 2.0, -1.0]).unwrap());
        let s = t.sort_columns(x).unwrap();
        assert_eq!(t.value(s).data(), &[1.0, -1.0, 2.0, 0.0, 3.0, 5.0]);
    }

    #[test]
    fn matmul_small() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = t.constant(Tensor::from_vec(&[2, 1], vec![1.0, 1.0]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[3.0, 7.0]);
    }
}
