//! Small dense symmetric linear algebra: eigen-based matrix powers, spectral
//! norms, and a minimum-volume enclosing ellipsoid for centred point sets.
//!
//! Hot loops work on flat row-major slices; `n = 1, 2` have closed forms.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{MatwError, Result};

pub type Mat = DMatrix<f64>;

/// Relative eigenvalue floor applied before fractional powers.
pub const EIG_FLOOR: f64 = 1e-12;
/// Largest tolerated asymmetry, relative to the largest entry.
pub const SYM_TOL: f64 = 1e-9;

pub fn asymmetry(m: &Mat) -> f64 {
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let mut worst: f64 = 0.0;
    for i in 0..m.nrows() {
        for j in 0..i {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst / scale
}

pub fn check_symmetric(m: &Mat) -> Result<()> {
    let a = asymmetry(m);
    if a > SYM_TOL || m.nrows() != m.ncols() {
        Err(MatwError::NotSymmetric(a))
    } else {
        Ok(())
    }
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues floored at
/// `EIG_FLOOR · λmax`.
#[derive(Clone, Debug)]
pub struct Eig {
    pub values: Vec<f64>,
    /// Column eigenvectors.
    pub vectors: Mat,
    /// True when a negative or sub-floor eigenvalue was raised.
    pub floored: bool,
}

impl Eig {
    pub fn new(m: &Mat) -> Eig {
        let n = m.nrows();
        let (mut values, vectors) = if n == 1 {
            (vec![m[(0, 0)]], Mat::identity(1, 1))
        } else if n == 2 {
            eig2(m[(0, 0)], 0.5 * (m[(0, 1)] + m[(1, 0)]), m[(1, 1)])
        } else {
            let sym = 0.5 * (m + m.transpose());
            let e = SymmetricEigen::new(sym);
            (e.eigenvalues.iter().copied().collect(), e.eigenvectors)
        };
        let top = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let floor = EIG_FLOOR * top.abs().max(f64::MIN_POSITIVE);
        let mut floored = false;
        for v in values.iter_mut() {
            if *v < floor {
                floored = true;
                *v = floor;
            }
        }
        Eig { values, vectors, floored }
    }

    pub fn power(&self, s: f64) -> Mat {
        let n = self.values.len();
        let mut out = Mat::zeros(n, n);
        for (k, &lam) in self.values.iter().enumerate() {
            let w = lam.powf(s);
            let v = self.vectors.column(k);
            for i in 0..n {
                for j in 0..n {
                    out[(i, j)] += w * v[i] * v[j];
                }
            }
        }
        out
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

fn eig2(a: f64, b: f64, c: f64) -> (Vec<f64>, Mat) {
    let mean = 0.5 * (a + c);
    let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let (l1, l2) = (mean - rad, mean + rad);
    if b == 0.0 {
        return if a <= c {
            (vec![a, c], Mat::identity(2, 2))
        } else {
            (vec![c, a], Mat::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]))
        };
    }
    // eigenvector for l2 is (b, l2 - a) or (l2 - c, b); pick the better scaled
    let (x, y) = if (l2 - a).abs() > (l2 - c).abs() { (b, l2 - a) } else { (l2 - c, b) };
    let nrm = (x * x + y * y).sqrt();
    let (x, y) = (x / nrm, y / nrm);
    (vec![l1, l2], Mat::from_row_slice(2, 2, &[-y, x, x, y]))
}

/// `m^s` for symmetric positive semidefinite `m` (eigenvalues floored).
pub fn matrix_power(m: &Mat, s: f64) -> Result<Mat> {
    check_symmetric(m)?;
    Ok(Eig::new(m).power(s))
}

pub fn spectral_norm(m: &Mat) -> f64 {
    let (r, c) = m.shape();
    if r == 1 && c == 1 {
        return m[(0, 0)].abs();
    }
    if r == 2 && c == 2 {
        return norm2_flat(&[m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]]);
    }
    let g = m.transpose() * m;
    let e = SymmetricEigen::new(g);
    e.eigenvalues.max().max(0.0).sqrt()
}

fn norm2_flat(c: &[f64]) -> f64 {
    let t = c[0] * c[0] + c[1] * c[1] + c[2] * c[2] + c[3] * c[3];
    let det = c[0] * c[3] - c[1] * c[2];
    let disc = (t * t - 4.0 * det * det).max(0.0);
    (0.5 * (t + disc.sqrt())).sqrt()
}

/// Spectral norm of `A·B` for flat row-major `n×n` inputs.
#[inline]
pub fn prod_norm(a: &[f64], b: &[f64], n: usize) -> f64 {
    match n {
        1 => (a[0] * b[0]).abs(),
        2 => {
            let c = [
                a[0] * b[0] + a[1] * b[2],
                a[0] * b[1] + a[1] * b[3],
                a[2] * b[0] + a[3] * b[2],
                a[2] * b[1] + a[3] * b[3],
            ];
            norm2_flat(&c)
        }
        _ => {
            let am = Mat::from_row_slice(n, n, a);
            let bm = Mat::from_row_slice(n, n, b);
            spectral_norm(&(am * bm))
        }
    }
}

/// Squared spectral norm of `A·B` for flat row-major `n×n` inputs.
#[inline]
pub fn prod_norm_sq(a: &[f64], b: &[f64], n: usize) -> f64 {
    match n {
        1 => (a[0] * b[0]) * (a[0] * b[0]),
        2 => {
            let c0 = a[0] * b[0] + a[1] * b[2];
            let c1 = a[0] * b[1] + a[1] * b[3];
            let c2 = a[2] * b[0] + a[3] * b[2];
            let c3 = a[2] * b[1] + a[3] * b[3];
            let t = c0 * c0 + c1 * c1 + c2 * c2 + c3 * c3;
            let det = c0 * c3 - c1 * c2;
            0.5 * (t + (t * t - 4.0 * det * det).max(0.0).sqrt())
        }
        _ => {
            let v = prod_norm(a, b, n);
            v * v
        }
    }
}

/// Spectral norm of a flat row-major `n×n` matrix.
#[inline]
pub fn flat_norm(a: &[f64], n: usize) -> f64 {
    match n {
        1 => a[0].abs(),
        2 => norm2_flat(a),
        _ => spectral_norm(&Mat::from_row_slice(n, n, a)),
    }
}

/// Spectral norm of a flat row-major `r×c` matrix.
pub fn rect_norm(a: &[f64], r: usize, c: usize) -> f64 {
    if r == 1 || c == 1 {
        return a.iter().map(|x| x * x).sum::<f64>().sqrt();
    }
    // Gram matrix on the smaller side
    let (k, g) = if c <= r {
        (c, (0..c * c).map(|ij| (0..r).map(|l| a[l * c + ij / c] * a[l * c + ij % c]).sum()).collect::<Vec<f64>>())
    } else {
        (r, (0..r * r).map(|ij| (0..c).map(|l| a[(ij / r) * c + l] * a[(ij % r) * c + l]).sum()).collect())
    };
    if k == 2 {
        let t = 0.5 * (g[0] + g[3]);
        let dd = 0.5 * (g[0] - g[3]);
        return (t + (dd * dd + g[1] * g[2]).max(0.0).sqrt()).max(0.0).sqrt();
    }
    SymmetricEigen::new(Mat::from_row_slice(k, k, &g)).eigenvalues.max().max(0.0).sqrt()
}

/// Euclidean norm of `A·v`, `A` flat row-major `rows × v.len()`.
#[inline]
pub fn matvec_norm(a: &[f64], v: &[f64]) -> f64 {
    let c = v.len();
    let r = a.len() / c;
    let mut s = 0.0;
    for i in 0..r {
        let mut acc = 0.0;
        for j in 0..c {
            acc += a[i * c + j] * v[j];
        }
        s += acc * acc;
    }
    s.sqrt()
}

#[inline]
pub fn matvec_into(a: &[f64], v: &[f64], out: &mut [f64]) {
    let c = v.len();
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for j in 0..c {
            acc += a[i * c + j] * v[j];
        }
        *o = acc;
    }
}

/// Flat row-major product of `a` (`r×k`) and `b` (`k×c`).
pub fn matmul_flat(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for l in 0..k {
            let x = a[i * k + l];
            if x != 0.0 {
                for j in 0..c {
                    out[i * c + j] += x * b[l * c + j];
                }
            }
        }
    }
    out
}

pub fn to_flat(m: &Mat) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut v = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            v.push(m[(i, j)]);
        }
    }
    v
}

pub fn from_flat(v: &[f64], n: usize) -> Mat {
    Mat::from_row_slice(n, n, v)
}

pub fn inverse(m: &Mat) -> Result<Mat> {
    m.clone()
        .try_inverse()
        .ok_or_else(|| MatwError::InvalidInput("singular matrix".into()))
}

/// Minimum-volume origin-centred ellipsoid `{x : xᵀ M x ≤ 1}` containing the
/// symmetric set `±points`, by Khachiyan's coordinate ascent with away steps.
/// `M` is scaled so that every point satisfies `pᵀ M p ≤ 1` exactly.
pub fn mvee_centered(points: &[Vec<f64>], tol: f64, max_iter: usize) -> Mat {
    let n = points[0].len();
    let m = points.len();
    let mut u = vec![1.0 / m as f64; m];
    let pts: Vec<DVector<f64>> = points.iter().map(|p| DVector::from_column_slice(p)).collect();
    let scatter = |u: &[f64]| {
        let mut x = Mat::zeros(n, n);
        for (w, p) in u.iter().zip(&pts) {
            x += *w * p * p.transpose();
        }
        x
    };
    let mut xinv = scatter(&u).try_inverse().unwrap_or_else(|| Mat::identity(n, n));
    let nf = n as f64;
    for _ in 0..max_iter {
        let g: Vec<f64> = pts.iter().map(|p| (p.transpose() * &xinv * p)[(0, 0)]).collect();
        let (jp, gmax) = g
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        let (jm, gmin) = g
            .iter()
            .enumerate()
            .filter(|(i, _)| u[*i] > 0.0)
            .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
        if gmax <= nf * (1.0 + tol) && gmin >= nf * (1.0 - tol) {
            break;
        }
        // Wolfe-Atwood: either move weight toward the worst point or away
        // from the least useful one
        let (j, step) = if gmax - nf >= nf - gmin {
            (jp, (gmax - nf) / (nf * (gmax - 1.0)))
        } else {
            let raw = (gmin - nf) / (nf * (gmin - 1.0));
            (jm, raw.max(-u[jm] / (1.0 - u[jm])))
        };
        for w in u.iter_mut() {
            *w *= 1.0 - step;
        }
        u[j] += step;
        if u[j] < 0.0 {
            u[j] = 0.0;
        }
        xinv = scatter(&u).try_inverse().unwrap_or_else(|| Mat::identity(n, n));
    }
    let mut mmat = xinv / n as f64;
    let worst = pts
        .iter()
        .map(|p| (p.transpose() * &mmat * p)[(0, 0)])
        .fold(0.0f64, f64::max);
    if worst > 0.0 {
        mmat /= worst;
    }
    mmat
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn random_spd(n: usize, seed: &[f64]) -> Mat {
        let b = Mat::from_fn(n, n, |i, j| seed[(i * n + j) % seed.len()] + 0.1 * (i as f64 - j as f64));
        &b * b.transpose() + Mat::identity(n, n) * 0.5
    }

    #[test]
    fn identity_power_is_identity() {
        let p = matrix_power(&Mat::identity(3, 3), -0.5).unwrap();
        assert_abs_diff_eq!(p, Mat::identity(3, 3), epsilon = 1e-14);
    }

    #[test]
    fn diagonal_square_root() {
        let m = Mat::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 9.0]);
        let r = matrix_power(&m, 0.5).unwrap();
        assert_abs_diff_eq!(r, Mat::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]), epsilon = 1e-14);
    }

    #[test]
    fn rejects_asymmetric() {
        let m = Mat::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(matches!(matrix_power(&m, 0.5), Err(MatwError::NotSymmetric(_))));
    }

    #[test]
    fn rank_one_is_floored() {
        let e = Eig::new(&Mat::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]));
        assert!(e.floored);
        assert!(e.min() > 0.0);
    }

    #[test]
    fn mvee_of_square_is_circle() {
        let pts = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![1.0, -1.0]];
        let m = mvee_centered(&pts, 1e-9, 10_000);
        // the square [-1,1]^2 has minimal enclosing ellipse x² + y² ≤ 2
        assert_abs_diff_eq!(m, Mat::identity(2, 2) * 0.5, epsilon = 1e-6);
    }

    proptest! {
        #[test]
        fn square_matches_product(n in 1usize..5, seed in proptest::collection::vec(-2.0f64..2.0, 16)) {
            let m = random_spd(n, &seed);
            let sq = matrix_power(&m, 2.0).unwrap();
            let direct = &m * &m;
            prop_assert!((sq - &direct).amax() <= 1e-10 * direct.amax().max(1.0));
        }

        #[test]
        fn power_round_trip(n in 1usize..5, s in 0.2f64..3.0, seed in proptest::collection::vec(-2.0f64..2.0, 16)) {
            let m = random_spd(n, &seed);
            let ms = matrix_power(&m, s).unwrap();
            prop_assert!(asymmetry(&ms) < 1e-10);
            let back = matrix_power(&ms, 1.0 / s).unwrap();
            prop_assert!((back - &m).amax() <= 1e-9 * m.amax());
            let one = matrix_power(&m, 1.0).unwrap();
            prop_assert!((one - &m).amax() <= 1e-10 * m.amax());
        }

        #[test]
        fn prod_norm_matches_generic(seed in proptest::collection::vec(-3.0f64..3.0, 8)) {
            let a = &seed[..4];
            let b = &seed[4..];
            let direct = (from_flat(a, 2) * from_flat(b, 2)).singular_values().max();
            prop_assert!((prod_norm(a, b, 2) - direct).abs() <= 1e-10 * direct.max(1.0));
        }

        #[test]
        fn rect_norm_matches_svd(r in 1usize..4, c in 1usize..4, seed in proptest::collection::vec(-3.0f64..3.0, 9)) {
            let a = &seed[..r * c];
            let direct = Mat::from_row_slice(r, c, a).singular_values().max();
            prop_assert!((rect_norm(a, r, c) - direct).abs() <= 1e-9 * direct.max(1.0));
        }
    }
}
