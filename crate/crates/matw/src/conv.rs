//! Convolution of lattice data with translation-invariant kernels, by
//! zero-padded FFT. Kernel tables hold the integral of the kernel over each
//! offset cell, so singular kernels are handled by the caller's cell rule.

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; m];
    let mut w = vec![0.0; m];
    for i in 0..m.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (m as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=m {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = m as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[m - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[m - 1 - i] = w[i];
    }
    if m % 2 == 1 {
        x[m / 2] = 0.0;
    }
    (x, w)
}

/// `∫ k` over the cube `center + [-h/2, h/2]^d` by tensor Gauss–Legendre.
pub fn cell_integral_gl(center: &[f64], h: f64, m: usize, k: &impl Fn(&[f64]) -> f64) -> f64 {
    let d = center.len();
    let (x, w) = gauss_legendre(m);
    let mut idx = vec![0usize; d];
    let mut total = 0.0;
    let mut pt = vec![0.0; d];
    loop {
        let mut wt = 1.0;
        for a in 0..d {
            pt[a] = center[a] + 0.5 * h * x[idx[a]];
            wt *= w[idx[a]];
        }
        total += wt * k(&pt);
        let mut a = d;
        loop {
            if a == 0 {
                return total * (0.5 * h).powi(d as i32);
            }
            a -= 1;
            idx[a] += 1;
            if idx[a] < m {
                break;
            }
            idx[a] = 0;
        }
    }
}

fn fft_axes(data: &mut [Complex64], m: usize, d: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let fft = if inverse { planner.plan_fft_inverse(m) } else { planner.plan_fft_forward(m) };
    for axis in 0..d {
        let stride = m.pow((d - 1 - axis) as u32);
        let lines = data.len() / m;
        let mut buf: Vec<Vec<Complex64>> = (0..lines)
            .map(|l| {
                let (hi, lo) = (l / stride, l % stride);
                let start = hi * stride * m + lo;
                (0..m).map(|i| data[start + i * stride]).collect()
            })
            .collect();
        buf.par_iter_mut().for_each(|line| fft.process(line));
        for (l, line) in buf.iter().enumerate() {
            let (hi, lo) = (l / stride, l % stride);
            let start = hi * stride * m + lo;
            for (i, v) in line.iter().enumerate() {
                data[start + i * stride] = *v;
            }
        }
    }
}

/// Discrete convolution `out_i = Σ_j K(i - j) f_j` on an `n^d` lattice.
pub struct Convolver {
    n: usize,
    d: usize,
    kernel_hat: Vec<Complex64>,
}

impl Convolver {
    /// `cell(o)` is the kernel integrated over the cell at integer offset `o`.
    pub fn new(n: usize, d: usize, cell: impl Fn(&[i64]) -> f64 + Sync) -> Convolver {
        let m = 2 * n;
        let total = m.pow(d as u32);
        let mut kernel: Vec<Complex64> = (0..total)
            .into_par_iter()
            .map(|flat| {
                let mut o = vec![0i64; d];
                let mut r = flat;
                for a in (0..d).rev() {
                    let i = r % m;
                    r /= m;
                    if i == n {
                        return Complex64::new(0.0, 0.0);
                    }
                    o[a] = if i < n { i as i64 } else { i as i64 - m as i64 };
                }
                Complex64::new(cell(&o), 0.0)
            })
            .collect();
        fft_axes(&mut kernel, m, d, false);
        Convolver { n, d, kernel_hat: kernel }
    }

    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        let (n, d) = (self.n, self.d);
        let m = 2 * n;
        assert_eq!(f.len(), n.pow(d as u32));
        let embed = |flat: usize| {
            let mut r = flat;
            let mut out = 0;
            let mut mul = 1;
            for _ in 0..d {
                out += (r % n) * mul;
                r /= n;
                mul *= m;
            }
            out
        };
        let mut buf = vec![Complex64::new(0.0, 0.0); m.pow(d as u32)];
        for (i, &v) in f.iter().enumerate() {
            buf[embed(i)] = Complex64::new(v, 0.0);
        }
        fft_axes(&mut buf, m, d, false);
        buf.iter_mut().zip(&self.kernel_hat).for_each(|(a, k)| *a *= k);
        fft_axes(&mut buf, m, d, true);
        let scale = 1.0 / buf.len() as f64;
        (0..f.len()).map(|i| buf[embed(i)].re * scale).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        for m in 1..12 {
            let (x, w) = gauss_legendre(m);
            for deg in 0..2 * m {
                let num: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(deg as i32)).sum();
                let exact = if deg % 2 == 1 { 0.0 } else { 2.0 / (deg as f64 + 1.0) };
                assert!((num - exact).abs() < 1e-13, "m={m} deg={deg}");
            }
        }
    }

    #[test]
    fn fft_matches_direct_sum() {
        let n = 6;
        let kern = |o: &[i64]| 1.0 / (1.0 + (o[0] * o[0] + 2 * o[1] * o[1]) as f64) + 0.1 * o[0] as f64;
        let conv = Convolver::new(n, 2, kern);
        let f: Vec<f64> = (0..n * n).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let out = conv.apply(&f);
        for i in 0..n * n {
            let (ix, iy) = ((i / n) as i64, (i % n) as i64);
            let direct: f64 = (0..n * n)
                .map(|j| {
                    let (jx, jy) = ((j / n) as i64, (j % n) as i64);
                    kern(&[ix - jx, iy - jy]) * f[j]
                })
                .sum();
            assert!((out[i] - direct).abs() < 1e-12);
        }
    }
}
