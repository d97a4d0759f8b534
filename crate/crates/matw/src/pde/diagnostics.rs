//! Caccioppoli, reverse Hölder, decay and Hölder-modulus measurements on
//! discrete solutions. Everything is evaluated at element centres; balls and
//! annuli are the elements whose centres lie inside.

use serde::{Deserialize, Serialize};

use super::{element_weights, DiscreteSolution, EllipticProblem, Sampling};
use crate::analysis::Region;
use crate::error::{MatwError, Result};
use crate::grid::Lattice;
use crate::linalg;
use crate::weight::conjugate;

/// Weighted pointwise quantities on the element lattice.
pub struct CellFields {
    pub lattice: Lattice,
    pub p: f64,
    n: usize,
    width: usize,
    d: usize,
    values: Vec<f64>,
    grad: Vec<f64>,
    /// `W^{1/p}` per element.
    a: Vec<f64>,
    /// `W^{-1/p}` per element.
    b: Vec<f64>,
    /// `F` per element (`n×d`), empty when zero.
    f: Vec<f64>,
}

impl CellFields {
    pub fn new(sol: &DiscreteSolution, prob: &EllipticProblem) -> Result<CellFields> {
        if sol.mesh != prob.mesh || sol.n != prob.n {
            return Err(MatwError::DimensionMismatch("solution and problem meshes differ".into()));
        }
        let ew = element_weights(prob, Sampling::Barycenter)?;
        let p = prob.p;
        let lattice = prob.mesh.lattice();
        let d = lattice.dim();
        let f = if prob.source.is_zero() {
            Vec::new()
        } else {
            (0..lattice.len()).flat_map(|e| prob.source.at(e, &lattice.center(e), prob.n * d)).collect()
        };
        Ok(CellFields {
            p,
            n: prob.n,
            width: sol.width(),
            d,
            values: sol.cell_values().values,
            grad: sol.cell_gradient().values,
            a: ew.samples.power(1.0 / p),
            b: ew.samples.power(-1.0 / p),
            f,
            lattice,
        })
    }

    /// `|W^{1/p}(u - shift)|` on element `e`; complex data act blockwise.
    pub fn value(&self, e: usize, shift: &[f64]) -> f64 {
        let (n, w) = (self.n, self.width);
        let a = &self.a[e * n * n..(e + 1) * n * n];
        let u = &self.values[e * w..(e + 1) * w];
        let mut s = 0.0;
        for block in 0..w / n {
            let diff: Vec<f64> = (0..n).map(|i| u[block * n + i] - shift[block * n + i]).collect();
            s += linalg::matvec_norm(a, &diff).powi(2);
        }
        s.sqrt()
    }

    /// `‖W^{1/p} Du‖` (Frobenius) on element `e`.
    pub fn gradient(&self, e: usize) -> f64 {
        let (n, w, d) = (self.n, self.width, self.d);
        let a = &self.a[e * n * n..(e + 1) * n * n];
        let g = &self.grad[e * w * d..(e + 1) * w * d];
        let mut s = 0.0;
        for block in 0..w / n {
            let m = linalg::matmul_flat(a, &g[block * n * d..(block + 1) * n * d], n, n, d);
            s += m.iter().map(|v| v * v).sum::<f64>();
        }
        s.sqrt()
    }

    /// `‖W^{-1/p} F‖` (Frobenius) on element `e`.
    pub fn source(&self, e: usize) -> f64 {
        if self.f.is_empty() {
            return 0.0;
        }
        let (n, d) = (self.n, self.d);
        let b = &self.b[e * n * n..(e + 1) * n * n];
        let m = linalg::matmul_flat(b, &self.f[e * n * d..(e + 1) * n * d], n, n, d);
        m.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Spectral norm of `W^{-1/p}` squared on element `e`.
    pub fn inverse_norm_sq(&self, e: usize) -> f64 {
        let n = self.n;
        linalg::flat_norm(&self.b[e * n * n..(e + 1) * n * n], n).powi(2)
    }

    /// Unweighted mean of `u` over a region.
    pub fn mean(&self, region: &Region) -> Vec<f64> {
        let w = self.width;
        let mut acc = vec![0.0; w];
        let mut tot = 0.0;
        for &(c, wt) in &region.cells {
            for i in 0..w {
                acc[i] += wt * self.values[c * w + i];
            }
            tot += wt;
        }
        acc.iter().map(|a| a / tot.max(f64::MIN_POSITIVE)).collect()
    }

    fn integral(&self, region: &Region, f: impl Fn(usize) -> f64) -> f64 {
        region.cells.iter().map(|&(c, wt)| wt * f(c)).sum::<f64>() * self.lattice.cell_volume()
    }
}

fn ball_inside(lat: &Lattice, center: &[f64], r: f64) -> bool {
    let tol = 1e-12 * lat.base.side();
    (0..lat.dim()).all(|k| center[k] - r >= lat.base.lower(k) - tol && center[k] + r <= lat.base.upper(k) + tol)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CaccioppoliReport {
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
    /// Both sides vanish to rounding.
    pub vacuous: bool,
    pub center: Vec<f64>,
    pub radius: f64,
}

/// `∫_{B_{r/2}} ‖W^{1/p}Du‖^p` against
/// `r^{-p}∫_{B_r \ B_{r/2}} |W^{1/p}(u - ū)|^p + ∫_{B_r} ‖W^{-1/p}F‖^{p'}`,
/// `ū` the mean of `u` over the annulus.
pub fn caccioppoli_check(sol: &DiscreteSolution, prob: &EllipticProblem, center: &[f64], r: f64) -> Result<CaccioppoliReport> {
    let cf = CellFields::new(sol, prob)?;
    caccioppoli_on(&cf, center, r)
}

pub fn caccioppoli_on(cf: &CellFields, center: &[f64], r: f64) -> Result<CaccioppoliReport> {
    let lat = &cf.lattice;
    if !ball_inside(lat, center, r) {
        return Err(MatwError::BallOutsideDomain);
    }
    let p = cf.p;
    let inner = Region::ball(lat, center, 0.5 * r, 1);
    let ann = Region::annulus(lat, center, r, 0.5 * r, 1);
    let full = Region::ball(lat, center, r, 1);
    if inner.is_empty() || ann.is_empty() {
        return Err(MatwError::EmptyAnnulus);
    }
    let mean = cf.mean(&ann);
    let lhs = cf.integral(&inner, |c| cf.gradient(c).powf(p));
    let size = r.powf(-p) * cf.integral(&ann, |c| cf.value(c, &vec![0.0; mean.len()]).powf(p));
    let rhs = r.powf(-p) * cf.integral(&ann, |c| cf.value(c, &mean).powf(p))
        + cf.integral(&full, |c| cf.source(c).powf(conjugate(p)));
    let tiny = 1e-9f64.powf(p) * size.max(f64::MIN_POSITIVE);
    let vacuous = rhs <= tiny && lhs <= tiny * r.powf(-p);
    let ratio = if vacuous || rhs == 0.0 { 0.0 } else { lhs / rhs };
    Ok(CaccioppoliReport { lhs, rhs, ratio, vacuous, center: center.to_vec(), radius: r })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MeyersOptions {
    /// Sweep `q = p(1 + k·step)` up to `cap·p`.
    pub step: f64,
    pub cap: f64,
    /// A `q` passes when its ratio is at most `band · ratio(p)`.
    pub band: f64,
}

impl Default for MeyersOptions {
    fn default() -> Self {
        MeyersOptions { step: 0.05, cap: 4.0, band: 2.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MeyersReport {
    pub p: f64,
    pub q: Vec<f64>,
    pub ratio: Vec<f64>,
    pub band: f64,
    /// Largest swept `q` below which every ratio stays in the band.
    pub q_max: f64,
}

/// Sweeps `(avg_{B_{r/2}} ‖W^{1/p}Du‖^q)^{1/q}` against
/// `(avg_{B_r} ‖W^{1/p}Du‖^p)^{1/p} + (avg_{B_r} ‖W^{-1/p}F‖^{p'q/p})^{p/(p'q(p-1))}`.
pub fn meyers_exponent(
    sol: &DiscreteSolution,
    prob: &EllipticProblem,
    center: &[f64],
    r: f64,
    opts: &MeyersOptions,
) -> Result<MeyersReport> {
    let cf = CellFields::new(sol, prob)?;
    meyers_on(&cf, center, r, opts)
}

pub fn meyers_on(cf: &CellFields, center: &[f64], r: f64, opts: &MeyersOptions) -> Result<MeyersReport> {
    let lat = &cf.lattice;
    if !ball_inside(lat, center, 2.0 * r) {
        return Err(MatwError::BallOutsideDomain);
    }
    let p = cf.p;
    let pp = conjugate(p);
    let inner = Region::ball(lat, center, 0.5 * r, 1);
    let full = Region::ball(lat, center, r, 1);
    if inner.is_empty() {
        return Err(MatwError::EmptyAnnulus);
    }
    let g_in: Vec<(f64, f64)> = inner.cells.iter().map(|&(c, w)| (cf.gradient(c), w)).collect();
    let g_full: Vec<(f64, f64)> = full.cells.iter().map(|&(c, w)| (cf.gradient(c), w)).collect();
    let f_full: Vec<(f64, f64)> = full.cells.iter().map(|&(c, w)| (cf.source(c), w)).collect();
    let mean = |v: &[(f64, f64)], e: f64| {
        let tot: f64 = v.iter().map(|x| x.1).sum();
        v.iter().map(|(g, w)| w * g.powf(e)).sum::<f64>() / tot
    };
    let grad_term = mean(&g_full, p).powf(1.0 / p);
    let steps = ((opts.cap - 1.0) / opts.step).round() as usize;
    let mut qs = Vec::with_capacity(steps + 1);
    let mut ratios = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let q = p * (1.0 + k as f64 * opts.step);
        let lhs = mean(&g_in, q).powf(1.0 / q);
        let t = pp * q / p;
        let src = if f_full.iter().all(|x| x.0 == 0.0) { 0.0 } else { mean(&f_full, t).powf(1.0 / (t * (p - 1.0))) };
        let rhs = grad_term + src;
        qs.push(q);
        ratios.push(if rhs > 0.0 { lhs / rhs } else { 0.0 });
    }
    let band = opts.band * ratios[0].max(f64::MIN_POSITIVE);
    let mut q_max = p;
    for (q, r) in qs.iter().zip(&ratios) {
        if *r > band {
            break;
        }
        q_max = *q;
    }
    Ok(MeyersReport { p, q: qs, ratio: ratios, band, q_max })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecayReport {
    pub radii: Vec<f64>,
    pub integrals: Vec<f64>,
    /// Least-squares `γ` in `E(r) ≈ (r/R)^γ E(R)`.
    pub gamma: f64,
    /// Root-mean-square residual of the log-log fit.
    pub residual: f64,
    pub vacuous: bool,
}

/// Fits the decay of `E(r) = ∫_{B_r} ‖W^{1/p}Du‖^p` over `r_j = R·8^{-j}`.
pub fn decay_check(sol: &DiscreteSolution, prob: &EllipticProblem, center: &[f64], big_r: f64, count: usize) -> Result<DecayReport> {
    if count < 3 {
        return Err(MatwError::TooFewRadii(count));
    }
    if !prob.source.is_zero() {
        return Err(MatwError::InvalidInput("decay check needs F = 0".into()));
    }
    let cf = CellFields::new(sol, prob)?;
    if !ball_inside(&cf.lattice, center, big_r) {
        return Err(MatwError::BallOutsideDomain);
    }
    let radii: Vec<f64> = (0..count).map(|j| big_r * 8f64.powi(-(j as i32))).collect();
    let mut integrals = Vec::with_capacity(count);
    for &r in &radii {
        let ball = Region::ball(&cf.lattice, center, r, 1);
        if ball.is_empty() {
            return Err(MatwError::EmptyAnnulus);
        }
        integrals.push(cf.integral(&ball, |c| cf.gradient(c).powf(cf.p)));
    }
    let top = integrals[0];
    let ball = Region::ball(&cf.lattice, center, big_r, 1);
    let size = big_r.powf(-cf.p) * cf.integral(&ball, |c| cf.value(c, &vec![0.0; cf.width]).powf(cf.p));
    let vacuous = top <= 1e-9f64.powf(cf.p) * size || integrals.iter().any(|&e| e <= 0.0);
    if vacuous {
        return Ok(DecayReport { radii, integrals, gamma: 0.0, residual: 0.0, vacuous });
    }
    let pts: Vec<(f64, f64)> = radii.iter().zip(&integrals).skip(1).map(|(r, e)| ((r / big_r).ln(), (e / top).ln())).collect();
    let gamma = pts.iter().map(|(x, y)| x * y).sum::<f64>() / pts.iter().map(|(x, _)| x * x).sum::<f64>();
    let residual = (pts.iter().map(|(x, y)| (y - gamma * x).powi(2)).sum::<f64>() / pts.len() as f64).sqrt();
    Ok(DecayReport { radii, integrals, gamma, residual, vacuous })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HolderReport {
    pub eps: Vec<f64>,
    /// Smallest `C` with `|u(x)-u(y)| ≤ C·C_{x,y}(|x-y|/R)^ε` over all pairs.
    pub c_cal: Vec<f64>,
    /// Largest `ε` whose `C` stays within `growth` times the first one.
    pub eps_max: f64,
    pub growth: f64,
    pub pairs: usize,
}

/// Checks the modulus `|u(x)-u(y)| ≲ C_{x,y}(|x-y|/R)^ε` with
/// `C_{x,y}^2 = sup_{B'} |B'|^{ε-1}∫_{B'}‖W^{-1/2}‖²`, the supremum taken over
/// balls centred at `x` or `y` with dyadic radii `2|x-y|·2^{-k}` no smaller
/// than two elements.
pub fn holder_modulus(
    sol: &DiscreteSolution,
    prob: &EllipticProblem,
    center: &[f64],
    big_r: f64,
    pairs: &[(Vec<f64>, Vec<f64>)],
    eps: &[f64],
    growth: f64,
) -> Result<HolderReport> {
    if prob.mesh.dim() != 2 {
        return Err(MatwError::DimensionMismatch("the Hölder modulus check is two-dimensional".into()));
    }
    if !prob.source.is_zero() {
        return Err(MatwError::InvalidInput("Hölder modulus check needs F = 0".into()));
    }
    if eps.is_empty() {
        return Err(MatwError::InvalidInput("empty ε grid".into()));
    }
    let cf = CellFields::new(sol, prob)?;
    let lat = &cf.lattice;
    if !ball_inside(lat, center, 6.0 * big_r) {
        return Err(MatwError::BallOutsideDomain);
    }
    let h = lat.h();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut c_cal = vec![0.0f64; eps.len()];
    for (x, y) in pairs {
        if dist(x, center) > big_r || dist(y, center) > big_r {
            return Err(MatwError::PairOutsideBall);
        }
        let delta = dist(x, y);
        if delta == 0.0 {
            continue;
        }
        let ux = sol.eval(x).ok_or(MatwError::PairOutsideBall)?;
        let uy = sol.eval(y).ok_or(MatwError::PairOutsideBall)?;
        let diff = dist(&ux, &uy);
        // (measure, integral) of every admissible ball
        let mut balls = Vec::new();
        let mut rho = 2.0 * delta;
        loop {
            for c in [x, y] {
                let ball = Region::ball(lat, c, rho, 1);
                if !ball.is_empty() {
                    balls.push((ball.measure(lat), cf.integral(&ball, |e| cf.inverse_norm_sq(e))));
                }
            }
            rho *= 0.5;
            if rho < 2.0 * h {
                break;
            }
        }
        if balls.is_empty() {
            continue;
        }
        for (k, &e) in eps.iter().enumerate() {
            let cxy = balls.iter().map(|(m, i)| m.powf(e - 1.0) * i).fold(0.0, f64::max).sqrt();
            let bound = cxy * (delta / big_r).powf(e);
            if bound > 0.0 {
                c_cal[k] = c_cal[k].max(diff / bound);
            }
        }
    }
    let base = c_cal[0];
    let mut eps_max = eps[0];
    for (e, c) in eps.iter().zip(&c_cal) {
        if *c > growth * base {
            break;
        }
        eps_max = *e;
    }
    Ok(HolderReport { eps: eps.to_vec(), c_cal, eps_max, growth, pairs: pairs.len() })
}

/// Largest `ε` at which two resolutions agree on `C` within `tol` (relative).
pub fn holder_stable_eps(coarse: &HolderReport, fine: &HolderReport, tol: f64) -> Option<f64> {
    coarse
        .eps
        .iter()
        .zip(coarse.c_cal.iter().zip(&fine.c_cal))
        .filter(|(_, (a, b))| (*a - *b).abs() <= tol * a.abs().max(b.abs()))
        .map(|(e, _)| *e)
        .fold(None, |m: Option<f64>, e| Some(m.map_or(e, |v| v.max(e))))
}

/// `(∫ ‖W^{1/p}Du‖^p)^{1/p}` over the whole mesh.
pub fn weighted_energy_norm(sol: &DiscreteSolution, prob: &EllipticProblem) -> Result<f64> {
    let cf = CellFields::new(sol, prob)?;
    let all = Region::whole(&cf.lattice);
    Ok(cf.integral(&all, |c| cf.gradient(c).powf(cf.p)).powf(1.0 / cf.p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dyadic::Cube;
    use crate::pde::{solve_linear, Mesh};
    use crate::weight::MatrixWeight;

    fn harmonic(depth: u32) -> (DiscreteSolution, EllipticProblem) {
        let prob = EllipticProblem::new(Mesh::new(Cube::parse("[-1,1)^2").unwrap(), depth), MatrixWeight::identity(1, 2))
            .with_boundary(|x| vec![x[0] * x[0] - x[1] * x[1]]);
        (solve_linear(&prob).unwrap(), prob)
    }

    #[test]
    fn constant_solution_is_vacuous() {
        let prob = EllipticProblem::new(Mesh::new(Cube::parse("[-1,1)^2").unwrap(), 7), MatrixWeight::identity(1, 2))
            .with_boundary(|_| vec![3.0]);
        let sol = solve_linear(&prob).unwrap();
        let c = caccioppoli_check(&sol, &prob, &[0.0, 0.0], 0.8).unwrap();
        assert!(c.vacuous && c.ratio == 0.0);
        let d = decay_check(&sol, &prob, &[0.0, 0.0], 0.8, 3).unwrap();
        assert!(d.vacuous);
    }

    #[test]
    fn decay_of_quadratic_harmonic() {
        let (sol, prob) = harmonic(7);
        let d = decay_check(&sol, &prob, &[0.0, 0.0], 0.9, 3).unwrap();
        assert!((d.gamma - 4.0).abs() < 0.3, "γ = {}", d.gamma);
        assert!(matches!(decay_check(&sol, &prob, &[0.0, 0.0], 0.9, 2), Err(MatwError::TooFewRadii(2))));
    }

    #[test]
    fn harmonic_meyers_passes_everything() {
        let (sol, prob) = harmonic(6);
        let m = meyers_exponent(&sol, &prob, &[0.0, 0.0], 0.4, &MeyersOptions::default()).unwrap();
        assert!((m.q_max - 8.0).abs() < 1e-9);
        assert!(m.ratio[0] <= 2f64.sqrt() * 1.0001);
    }

    #[test]
    fn holder_pairs() {
        let (sol, prob) = harmonic(6);
        let x = vec![0.05, 0.0];
        let same = holder_modulus(&sol, &prob, &[0.0, 0.0], 0.15, &[(x.clone(), x.clone())], &[0.5], 2.0).unwrap();
        assert_eq!(same.c_cal[0], 0.0);
        let bad = holder_modulus(&sol, &prob, &[0.0, 0.0], 0.15, &[(x.clone(), vec![0.9, 0.0])], &[0.5], 2.0);
        assert!(matches!(bad, Err(MatwError::PairOutsideBall)));
        assert!(matches!(caccioppoli_check(&sol, &prob, &[0.5, 0.5], 0.8), Err(MatwError::BallOutsideDomain)));
    }
}
