//! Compressed sparse rows and the iterative and banded solvers used by the
//! finite element code.

use std::collections::BTreeMap;

use crate::error::{MatwError, Result};

/// Row-major sparse matrix with sorted column indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Csr {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

/// Accumulates `(row, col, value)` triples; duplicates add up.
#[derive(Default)]
pub struct Triplets {
    rows: Vec<BTreeMap<usize, f64>>,
}

impl Triplets {
    pub fn new(n: usize) -> Triplets {
        Triplets { rows: vec![BTreeMap::new(); n] }
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        *self.rows[i].entry(j).or_insert(0.0) += v;
    }

    pub fn build(self) -> Csr {
        let n = self.rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for r in self.rows {
            for (j, v) in r {
                cols.push(j);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        Csr { n, row_ptr, cols, vals }
    }
}

impl Csr {
    pub fn mul(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.n {
            let mut s = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.vals[k] * x[self.cols[k]];
            }
            y[i] = s;
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.mul(x, &mut y);
        y
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = &self.cols[self.row_ptr[i]..self.row_ptr[i + 1]];
        r.binary_search(&j).map(|k| self.vals[self.row_ptr[i] + k]).unwrap_or(0.0)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// Largest `|a_ij - a_ji|` relative to the largest entry.
    pub fn asymmetry(&self) -> f64 {
        let scale = self.vals.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                worst = worst.max((self.vals[k] - self.get(self.cols[k], i)).abs());
            }
        }
        worst / scale
    }

    pub fn bandwidth(&self) -> usize {
        (0..self.n)
            .flat_map(|i| self.cols[self.row_ptr[i]..self.row_ptr[i + 1]].iter().map(move |&j| i.abs_diff(j)))
            .max()
            .unwrap_or(0)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Clone, Debug)]
pub struct SolveStats {
    pub method: &'static str,
    pub iterations: usize,
    /// `‖b - Ax‖ / ‖b‖`.
    pub residual: f64,
}

fn relative_residual(a: &Csr, x: &[f64], b: &[f64]) -> f64 {
    let ax = a.apply(x);
    let r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    norm(&r) / norm(b).max(f64::MIN_POSITIVE)
}

/// Jacobi-preconditioned conjugate gradients from the initial iterate `x`.
pub fn cg(a: &Csr, b: &[f64], x: &mut [f64], tol: f64, max_iter: usize) -> Result<SolveStats> {
    let n = a.n;
    let bn = norm(b);
    if bn == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(SolveStats { method: "cg", iterations: 0, residual: 0.0 });
    }
    let dinv: Vec<f64> = a.diagonal().iter().map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 }).collect();
    let mut r = a.apply(x);
    r.iter_mut().zip(b).for_each(|(r, b)| *r = b - *r);
    let mut z: Vec<f64> = r.iter().zip(&dinv).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for it in 0..max_iter {
        let res = norm(&r) / bn;
        if res <= tol {
            return Ok(SolveStats { method: "cg", iterations: it, residual: res });
        }
        a.mul(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(MatwError::SolverFailure { iterations: it, residual: res });
        }
        let alpha = rz / pap;
        x.iter_mut().zip(&p).for_each(|(x, p)| *x += alpha * p);
        r.iter_mut().zip(&ap).for_each(|(r, ap)| *r -= alpha * ap);
        z.iter_mut().zip(r.iter().zip(&dinv)).for_each(|(z, (r, d))| *z = r * d);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        p.iter_mut().zip(&z).for_each(|(p, z)| *p = z + beta * *p);
    }
    let res = relative_residual(a, x, b);
    if res <= tol {
        return Ok(SolveStats { method: "cg", iterations: max_iter, residual: res });
    }
    Err(MatwError::SolverFailure { iterations: max_iter, residual: res })
}

/// Jacobi-preconditioned BiCGSTAB for nonsymmetric systems.
pub fn bicgstab(a: &Csr, b: &[f64], x: &mut [f64], tol: f64, max_iter: usize) -> Result<SolveStats> {
    let n = a.n;
    let bn = norm(b);
    if bn == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(SolveStats { method: "bicgstab", iterations: 0, residual: 0.0 });
    }
    let dinv: Vec<f64> = a.diagonal().iter().map(|&d| if d != 0.0 { 1.0 / d } else { 1.0 }).collect();
    let precond = |v: &[f64]| -> Vec<f64> { v.iter().zip(&dinv).map(|(v, d)| v * d).collect() };
    let mut r = a.apply(x);
    r.iter_mut().zip(b).for_each(|(r, b)| *r = b - *r);
    let r0 = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut t = vec![0.0; n];
    for it in 0..max_iter {
        let res = norm(&r) / bn;
        if res <= tol {
            return Ok(SolveStats { method: "bicgstab", iterations: it, residual: res });
        }
        let rho_new = dot(&r0, &r);
        if rho_new == 0.0 || omega == 0.0 {
            break;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        let ph = precond(&p);
        a.mul(&ph, &mut v);
        alpha = rho / dot(&r0, &v);
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        let sh = precond(&s);
        a.mul(&sh, &mut t);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        for i in 0..n {
            x[i] += alpha * ph[i] + omega * sh[i];
            r[i] = s[i] - omega * t[i];
        }
    }
    let res = relative_residual(a, x, b);
    if res <= tol {
        return Ok(SolveStats { method: "bicgstab", iterations: max_iter, residual: res });
    }
    Err(MatwError::SolverFailure { iterations: max_iter, residual: res })
}

/// Gaussian elimination without pivoting inside the band; valid when the
/// symmetric part of `a` is positive definite.
pub fn banded_solve(a: &Csr, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.n;
    let w = a.bandwidth();
    let width = 2 * w + 1;
    let mut band = vec![0.0; n * width];
    let at = |i: usize, j: usize| i * width + (j + w - i);
    for i in 0..n {
        for k in a.row_ptr[i]..a.row_ptr[i + 1] {
            band[at(i, a.cols[k])] = a.vals[k];
        }
    }
    let mut x = b.to_vec();
    for k in 0..n {
        let piv = band[at(k, k)];
        if piv.abs() < 1e-300 {
            return Err(MatwError::SolverFailure { iterations: k, residual: f64::INFINITY });
        }
        for i in k + 1..(k + w + 1).min(n) {
            let f = band[at(i, k)] / piv;
            if f == 0.0 {
                continue;
            }
            for j in k..(k + w + 1).min(n) {
                band[at(i, j)] -= f * band[at(k, j)];
            }
            x[i] -= f * x[k];
        }
    }
    for k in (0..n).rev() {
        let mut s = x[k];
        for j in k + 1..(k + w + 1).min(n) {
            s -= band[at(k, j)] * x[j];
        }
        x[k] = s / band[at(k, k)];
    }
    Ok(x)
}

/// Picks a banded direct solve for narrow bands, conjugate gradients for
/// symmetric systems, and BiCGSTAB otherwise.
pub fn solve(a: &Csr, b: &[f64], x0: Option<&[f64]>, tol: f64, max_iter: usize) -> Result<(Vec<f64>, SolveStats)> {
    let mut x = x0.map(|v| v.to_vec()).unwrap_or_else(|| vec![0.0; a.n]);
    if a.n == 0 {
        return Ok((x, SolveStats { method: "empty", iterations: 0, residual: 0.0 }));
    }
    if a.bandwidth() <= 8 {
        let x = banded_solve(a, b)?;
        let residual = relative_residual(a, &x, b);
        return Ok((x, SolveStats { method: "banded", iterations: 1, residual }));
    }
    let stats = if a.asymmetry() < 1e-12 {
        match cg(a, b, &mut x, tol, max_iter) {
            Ok(s) => s,
            Err(_) => bicgstab(a, b, &mut x, tol, max_iter)?,
        }
    } else {
        bicgstab(a, b, &mut x, tol, max_iter)?
    };
    Ok((x, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplace_2d(m: usize) -> Csr {
        let mut t = Triplets::new(m * m);
        for i in 0..m {
            for j in 0..m {
                let r = i * m + j;
                t.add(r, r, 4.0);
                if i > 0 {
                    t.add(r, r - m, -1.0);
                }
                if i + 1 < m {
                    t.add(r, r + m, -1.0);
                }
                if j > 0 {
                    t.add(r, r - 1, -1.0);
                }
                if j + 1 < m {
                    t.add(r, r + 1, -1.0);
                }
            }
        }
        t.build()
    }

    #[test]
    fn solvers_agree() {
        let a = laplace_2d(12);
        let b: Vec<f64> = (0..a.n).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let mut x1 = vec![0.0; a.n];
        cg(&a, &b, &mut x1, 1e-13, 1000).unwrap();
        let mut x2 = vec![0.0; a.n];
        bicgstab(&a, &b, &mut x2, 1e-13, 1000).unwrap();
        let x3 = banded_solve(&a, &b).unwrap();
        for i in 0..a.n {
            assert!((x1[i] - x3[i]).abs() < 1e-10);
            assert!((x2[i] - x3[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn nonsymmetric_system() {
        let mut t = Triplets::new(30);
        for i in 0..30 {
            t.add(i, i, 3.0);
            if i > 0 {
                t.add(i, i - 1, -1.5);
            }
            if i + 1 < 30 {
                t.add(i, i + 1, -0.5);
            }
        }
        let a = t.build();
        assert!(a.asymmetry() > 0.1);
        let b = vec![1.0; 30];
        let (x, _) = solve(&a, &b, None, 1e-13, 500).unwrap();
        let r = a.apply(&x);
        assert!(r.iter().zip(&b).all(|(r, b)| (r - b).abs() < 1e-10));
    }
}
