//! Compressed sparse row storage and a banded LU solver with partial
//! pivoting for the structured-grid systems.

use crate::error::{Error, Result};

/// Triplet accumulator; duplicates are summed on [`TripletBuilder::build`].
#[derive(Debug, Clone, Default)]
pub struct TripletBuilder {
    nrows: usize,
    ncols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl TripletBuilder {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            entries: Vec::new(),
        }
    }

    pub fn with_capacity(nrows: usize, ncols: usize, cap: usize) -> Self {
        Self {
            nrows,
            ncols,
            entries: Vec::with_capacity(cap),
        }
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.nrows && j < self.ncols);
        self.entries.push((i, j, v));
    }

    /// Sort, sum duplicates, and drop exact zeros.
    pub fn build(mut self) -> CsrMatrix {
        // stable: duplicates are summed in insertion order
        self.entries.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; self.nrows + 1];
        let mut cols = Vec::with_capacity(self.entries.len());
        let mut vals: Vec<f64> = Vec::with_capacity(self.entries.len());
        let mut rows = Vec::with_capacity(self.entries.len());
        for (i, j, v) in self.entries {
            if let (Some(&li), Some(&lj)) = (rows.last(), cols.last()) {
                if li == i && lj == j {
                    *vals.last_mut().unwrap() += v;
                    continue;
                }
            }
            rows.push(i);
            cols.push(j);
            vals.push(v);
        }
        let mut col_idx = Vec::with_capacity(cols.len());
        let mut values = Vec::with_capacity(vals.len());
        for ((i, j), v) in rows.into_iter().zip(cols).zip(vals) {
            if v != 0.0 {
                row_ptr[i + 1] += 1;
                col_idx.push(j);
                values.push(v);
            }
        }
        for i in 0..self.nrows {
            row_ptr[i + 1] += row_ptr[i];
        }
        CsrMatrix {
            nrows: self.nrows,
            ncols: self.ncols,
            row_ptr,
            col_idx,
            values,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values of row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[r.clone()], &self.values[r])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(p) => vals[p],
            Err(_) => 0.0,
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        (0..self.nrows).map(|i| self.row_dot(i, x)).collect()
    }

    #[inline]
    pub fn row_dot(&self, i: usize, x: &[f64]) -> f64 {
        let (cols, vals) = self.row(i);
        cols.iter().zip(vals).map(|(&j, &v)| v * x[j]).sum()
    }

    /// `xᵀ A x`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        (0..self.nrows).map(|i| x[i] * self.row_dot(i, x)).sum()
    }

    pub fn is_symmetric(&self) -> bool {
        self.nrows == self.ncols
            && (0..self.nrows).all(|i| {
                let (cols, vals) = self.row(i);
                cols.iter().zip(vals).all(|(&j, &v)| self.get(j, i) == v)
            })
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.ncols]; self.nrows];
        for (i, row) in d.iter_mut().enumerate() {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                row[j] = v;
            }
        }
        d
    }

    /// Sparse product `self · b`.
    pub fn matmul(&self, b: &CsrMatrix) -> CsrMatrix {
        assert_eq!(self.ncols, b.nrows);
        let mut row_ptr = Vec::with_capacity(self.nrows + 1);
        row_ptr.push(0);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        let mut acc = vec![0.0; b.ncols];
        let mut touched = vec![false; b.ncols];
        let mut pattern: Vec<usize> = Vec::new();
        for i in 0..self.nrows {
            let (ac, av) = self.row(i);
            for (&k, &a) in ac.iter().zip(av) {
                let (bc, bv) = b.row(k);
                for (&j, &x) in bc.iter().zip(bv) {
                    if !touched[j] {
                        touched[j] = true;
                        pattern.push(j);
                    }
                    acc[j] += a * x;
                }
            }
            pattern.sort_unstable();
            for &j in &pattern {
                if acc[j] != 0.0 {
                    col_idx.push(j);
                    values.push(acc[j]);
                }
                acc[j] = 0.0;
                touched[j] = false;
            }
            pattern.clear();
            row_ptr.push(col_idx.len());
        }
        CsrMatrix {
            nrows: self.nrows,
            ncols: b.ncols,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// `selfᵀ x`.
    pub fn tr_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows);
        let mut y = vec![0.0; self.ncols];
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                let (cols, vals) = self.row(i);
                for (&j, &v) in cols.iter().zip(vals) {
                    y[j] += v * xi;
                }
            }
        }
        y
    }

    /// Lower and upper bandwidths.
    pub fn bandwidths(&self) -> (usize, usize) {
        let mut kl = 0;
        let mut ku = 0;
        for i in 0..self.nrows {
            for &j in self.row(i).0 {
                if j < i {
                    kl = kl.max(i - j);
                } else {
                    ku = ku.max(j - i);
                }
            }
        }
        (kl, ku)
    }
}

/// LU factorization of a square banded matrix with row partial pivoting.
///
/// Row `i` keeps absolute columns `[i - kl, i + kl + ku]`, which is enough to
/// hold the fill created by row interchanges.
#[derive(Debug, Clone)]
pub struct BandedLu {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    band: Vec<f64>,
    mult: Vec<f64>,
    piv: Vec<usize>,
}

impl BandedLu {
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::SizeMismatch {
                expected: a.nrows(),
                got: a.ncols(),
            });
        }
        let n = a.nrows();
        let (kl, ku) = a.bandwidths();
        let width = 2 * kl + ku + 1;
        let mut lu = Self {
            n,
            kl,
            ku,
            width,
            band: vec![0.0; n * width],
            mult: vec![0.0; n * kl.max(1)],
            piv: vec![0; n],
        };
        let scale = a.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..n {
            let (cols, vals) = a.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                *lu.at_mut(i, j) = v;
            }
        }
        let tiny = scale * f64::EPSILON * 1e-3;
        let umax = kl + ku;
        for k in 0..n {
            let last = (k + kl).min(n - 1);
            let mut p = k;
            let mut best = lu.at(k, k).abs();
            for i in k + 1..=last {
                let v = lu.at(i, k).abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if !(best > tiny) {
                return Err(Error::Singular {
                    row: k,
                    context: format!("banded LU pivot {best:e}"),
                });
            }
            lu.piv[k] = p;
            let jend = (k + umax).min(n - 1);
            if p != k {
                for j in k..=jend {
                    let a = lu.at(k, j);
                    let b = lu.at(p, j);
                    *lu.at_mut(k, j) = b;
                    *lu.at_mut(p, j) = a;
                }
            }
            let pivot = lu.at(k, k);
            for i in k + 1..=last {
                let m = lu.at(i, k) / pivot;
                lu.mult[k * kl + (i - k - 1)] = m;
                *lu.at_mut(i, k) = 0.0;
                if m != 0.0 {
                    for j in k + 1..=jend {
                        let u = lu.at(k, j);
                        *lu.at_mut(i, j) -= m * u;
                    }
                }
            }
        }
        Ok(lu)
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.band[i * self.width + (j + self.kl - i)]
    }

    #[inline]
    fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.band[i * self.width + (j + self.kl - i)]
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let n = self.n;
        let mut x = b.to_vec();
        for k in 0..n {
            let p = self.piv[k];
            if p != k {
                x.swap(k, p);
            }
            let xk = x[k];
            if xk != 0.0 {
                for i in k + 1..=(k + self.kl).min(n - 1) {
                    x[i] -= self.mult[k * self.kl + (i - k - 1)] * xk;
                }
            }
        }
        let umax = self.kl + self.ku;
        for k in (0..n).rev() {
            let mut s = x[k];
            for j in k + 1..=(k + umax).min(n - 1) {
                s -= self.at(k, j) * x[j];
            }
            x[k] = s / self.at(k, k);
        }
        x
    }
}

/// Solve `A x = b` with one step of iterative refinement.
pub fn solve_banded(a: &CsrMatrix, b: &[f64]) -> Result<Vec<f64>> {
    let lu = BandedLu::factor(a)?;
    let mut x = lu.solve(b);
    let ax = a.mul_vec(&x);
    let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let dx = lu.solve(&r);
    x.iter_mut().zip(dx).for_each(|(xi, d)| *xi += d);
    Ok(x)
}
