//! Weighted Poincaré and Sobolev ratios, the gradient representation formula,
//! and annulus estimates on lattice data.

use serde::{Deserialize, Serialize};

use crate::conv::{cell_integral_gl, Convolver};
use crate::error::{MatwError, Result};
use crate::grid::{GridFunction, Lattice};
use crate::linalg;
use crate::weight::{conjugate, MatrixWeight, Samples};

/// Volume of the unit ball in `R^d`.
pub fn unit_ball_volume(d: usize) -> f64 {
    match d {
        1 => 2.0,
        2 => std::f64::consts::PI,
        3 => 4.0 / 3.0 * std::f64::consts::PI,
        _ => {
            let h = 0.5 * d as f64;
            std::f64::consts::PI.powf(h) / gamma_half(d)
        }
    }
}

fn gamma_half(d: usize) -> f64 {
    // Γ(d/2 + 1) by the recurrence from Γ(1) or Γ(3/2)
    let mut g = if d % 2 == 0 { 1.0 } else { 0.5 * std::f64::consts::PI.sqrt() };
    let mut x = if d % 2 == 0 { 1.0 } else { 1.5 };
    while x < 0.5 * d as f64 + 1.0 - 1e-9 {
        g *= x;
        x += 1.0;
    }
    g
}

/// `Df` as an `n×d` matrix per cell: centred differences inside, second-order
/// one-sided differences on the boundary layer.
pub fn jacobian(f: &GridFunction) -> Result<GridFunction> {
    f.validate()?;
    let lat = f.lattice();
    let m = lat.per_axis();
    if m < 4 {
        return Err(MatwError::ResolutionTooLow { need: 4, got: m });
    }
    if f.cols != 1 {
        return Err(MatwError::DimensionMismatch("jacobian needs a vector field".into()));
    }
    let (n, d) = (f.rows, lat.dim());
    let h = lat.h();
    let mut out = GridFunction::zeros(&lat, n, d);
    for c in 0..lat.len() {
        let idx = lat.multi(c);
        for k in 0..d {
            let at = |shift: i64| {
                let mut j = idx.clone();
                j[k] = (j[k] as i64 + shift) as usize;
                f.at(lat.flat(&j))
            };
            for i in 0..n {
                let v = if idx[k] == 0 {
                    (-3.0 * at(0)[i] + 4.0 * at(1)[i] - at(2)[i]) / (2.0 * h)
                } else if idx[k] == m - 1 {
                    (3.0 * at(0)[i] - 4.0 * at(-1)[i] + at(-2)[i]) / (2.0 * h)
                } else {
                    (at(1)[i] - at(-1)[i]) / (2.0 * h)
                };
                out.values[c * n * d + i * d + k] = v;
            }
        }
    }
    Ok(out)
}

fn boundary_cells(lat: &Lattice) -> Vec<usize> {
    let m = lat.per_axis();
    (0..lat.len()).filter(|&c| lat.multi(c).iter().any(|&i| i == 0 || i == m - 1)).collect()
}

/// Fails with `SupportViolation` unless `f` is below `1e-8·max|f|` on the
/// outermost layer of cells.
pub fn check_support(f: &GridFunction) -> Result<()> {
    let lat = f.lattice();
    let top = (0..f.len()).map(|c| f.magnitude(c)).fold(0.0, f64::max);
    let edge = boundary_cells(&lat).into_iter().map(|c| f.magnitude(c)).fold(0.0, f64::max);
    if edge > 1e-8 * top {
        return Err(MatwError::SupportViolation(edge));
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RepresentationReport {
    pub max_error: f64,
    pub max_value: f64,
    pub resolution: usize,
}

fn gradient_kernel_cell(h: f64, k: usize, o: &[i64]) -> f64 {
    let d = o.len();
    if d == 1 {
        return h * (o[0].signum() as f64);
    }
    let far = o.iter().map(|v| v.abs()).max().unwrap_or(0);
    if far == 0 {
        return 0.0;
    }
    let center: Vec<f64> = o.iter().map(|&v| v as f64 * h).collect();
    let kern = |z: &[f64]| z[k] / z.iter().map(|v| v * v).sum::<f64>().powf(0.5 * d as f64);
    match far {
        1..=2 => cell_integral_gl(&center, h, 12, &kern),
        3..=8 => cell_integral_gl(&center, h, 4, &kern),
        _ => h.powi(d as i32) * kern(&center),
    }
}

/// Reconstructs `f(x) = (1/(d ω_d)) ∫ ⟨∇f(y), x-y⟩ |x-y|^{-d} dy` from the
/// finite-difference gradient and reports the largest pointwise error.
pub fn representation_check(f: &GridFunction) -> Result<RepresentationReport> {
    check_support(f)?;
    let lat = f.lattice();
    let df = jacobian(f)?;
    let (n, d) = (f.rows, lat.dim());
    let h = lat.h();
    let norm = 1.0 / (d as f64 * unit_ball_volume(d));
    let mut recon = vec![0.0; lat.len() * n];
    for k in 0..d {
        let conv = Convolver::new(lat.per_axis(), d, |o| gradient_kernel_cell(h, k, o));
        for i in 0..n {
            let col: Vec<f64> = (0..lat.len()).map(|c| df.values[c * n * d + i * d + k]).collect();
            for (c, v) in conv.apply(&col).into_iter().enumerate() {
                recon[c * n + i] += norm * v;
            }
        }
    }
    let max_error = recon.iter().zip(&f.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let max_value = f.values.iter().map(|v| v.abs()).fold(0.0, f64::max);
    Ok(RepresentationReport { max_error, max_value, resolution: lat.per_axis() })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InequalityReport {
    pub lhs: f64,
    pub rhs_without_c: f64,
    pub ratio: f64,
    pub p: f64,
    pub eps: f64,
    pub region: String,
    /// Exponent of `[W]_{A_p}` in the predicted constant.
    pub predicted_exponent: f64,
}

pub fn predicted_exponent(p: f64) -> f64 {
    let pp = conjugate(p);
    (1.0 + 2.0 * pp / p).max(2.0 + pp / p)
}

fn ratio(lhs: f64, rhs: f64) -> f64 {
    if lhs == 0.0 {
        0.0
    } else {
        lhs / rhs
    }
}

/// Cells with fractional weights; a cell of weight 1 lies in the region.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Region {
    pub cells: Vec<(usize, f64)>,
    /// Cells entirely inside the region.
    pub inner: usize,
    /// Cells meeting the region.
    pub outer: usize,
    pub label: String,
}

impl Region {
    pub fn whole(lat: &Lattice) -> Region {
        Region { cells: (0..lat.len()).map(|c| (c, 1.0)).collect(), inner: lat.len(), outer: lat.len(), label: "cube".into() }
    }

    /// `{r_in ≤ |x - center| < r_out}`. `sub = 1` keeps cells whose centres
    /// lie inside; larger `sub` weights each cell by the fraction of a
    /// `sub^d` grid of sample points inside.
    pub fn annulus(lat: &Lattice, center: &[f64], r_out: f64, r_in: f64, sub: usize) -> Region {
        let h = lat.h();
        let d = lat.dim();
        let inside = |x: &[f64]| {
            let r = x.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            r >= r_in && r < r_out
        };
        let mut cells = Vec::new();
        let (mut inner, mut outer) = (0, 0);
        let half_diag = 0.5 * h * (d as f64).sqrt();
        for c in 0..lat.len() {
            let x = lat.center(c);
            let r = x.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            if r - half_diag >= r_out || r + half_diag < r_in {
                continue;
            }
            let full = r + half_diag < r_out && r - half_diag >= r_in;
            let w = if full {
                1.0
            } else if sub <= 1 {
                if inside(&x) {
                    1.0
                } else {
                    0.0
                }
            } else {
                let total = sub.pow(d as u32);
                let mut hit = 0;
                let mut pt = vec![0.0; d];
                for s in 0..total {
                    let mut r = s;
                    for k in 0..d {
                        let i = r % sub;
                        r /= sub;
                        pt[k] = x[k] - 0.5 * h + (i as f64 + 0.5) * h / sub as f64;
                    }
                    if inside(&pt) {
                        hit += 1;
                    }
                }
                hit as f64 / total as f64
            };
            outer += 1;
            if full {
                inner += 1;
            }
            if w > 0.0 {
                cells.push((c, w));
            }
        }
        Region { cells, inner, outer, label: format!("annulus r∈[{r_in},{r_out}) at {center:?}") }
    }

    pub fn ball(lat: &Lattice, center: &[f64], r: f64, sub: usize) -> Region {
        let mut reg = Region::annulus(lat, center, r, 0.0, sub);
        reg.label = format!("ball r={r} at {center:?}");
        reg
    }

    pub fn measure(&self, lat: &Lattice) -> f64 {
        self.cells.iter().map(|c| c.1).sum::<f64>() * lat.cell_volume()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Weighted average of a vector field over the region.
    pub fn mean(&self, f: &GridFunction) -> Vec<f64> {
        let w = f.width();
        let mut acc = vec![0.0; w];
        let mut tot = 0.0;
        for &(c, wt) in &self.cells {
            acc.iter_mut().zip(f.at(c)).for_each(|(a, v)| *a += wt * v);
            tot += wt;
        }
        acc.iter().map(|a| a / tot).collect()
    }
}

/// `|W^{1/p}(x)(f(x) - shift)|` and `‖W^{1/p}(x) Df(x)‖` at each region cell.
struct Pointwise {
    value: Vec<f64>,
    grad: Vec<f64>,
    weights: Vec<f64>,
}

fn pointwise(w: &MatrixWeight, p: f64, f: &GridFunction, df: &GridFunction, region: &Region, shift: &[f64]) -> Result<Pointwise> {
    let lat = f.lattice();
    let n = f.rows;
    let d = lat.dim();
    let cells: Vec<usize> = region.cells.iter().map(|c| c.0).collect();
    let pts: Vec<Vec<f64>> = cells.iter().map(|&c| lat.center(c)).collect();
    let a = Samples::at_points(w, &pts)?.power(1.0 / p);
    let mut value = Vec::with_capacity(cells.len());
    let mut grad = Vec::with_capacity(cells.len());
    let mut diff = vec![0.0; n];
    for (i, &c) in cells.iter().enumerate() {
        let ai = &a[i * n * n..(i + 1) * n * n];
        diff.iter_mut().zip(f.at(c)).zip(shift).for_each(|((o, v), s)| *o = v - s);
        value.push(linalg::matvec_norm(ai, &diff));
        let g = linalg::matmul_flat(ai, df.at(c), n, n, d);
        grad.push(linalg::rect_norm(&g, n, d));
    }
    Ok(Pointwise { value, grad, weights: region.cells.iter().map(|c| c.1).collect() })
}

fn power_mean(vals: &[f64], wts: &[f64], e: f64) -> f64 {
    let tot: f64 = wts.iter().sum();
    (vals.iter().zip(wts).map(|(v, w)| w * v.powf(e)).sum::<f64>() / tot).powf(1.0 / e)
}

fn check_eps(p: f64, eps: f64) -> Result<()> {
    if !(p > 1.0 && eps >= 0.0 && eps < p - 1.0) {
        return Err(MatwError::ExponentOutOfRange(format!("need p > 1 and 0 ≤ ε < p - 1, got p={p}, ε={eps}")));
    }
    Ok(())
}

/// `(avg_R |W^{1/p}(f - f_R)|^{p+ε})^{1/(p+ε)}` against
/// `|R|^{1/d} (avg_R ‖W^{1/p} Df‖^{p-ε})^{1/(p-ε)}` on a region of `f`'s
/// lattice; `f_R` is the unweighted mean. `subtract_mean = false` gives the
/// Sobolev form.
pub fn local_ratio(
    w: &MatrixWeight,
    p: f64,
    eps: f64,
    f: &GridFunction,
    region: &Region,
    subtract_mean: bool,
) -> Result<InequalityReport> {
    check_eps(p, eps)?;
    if region.is_empty() {
        return Err(MatwError::EmptyAnnulus);
    }
    let lat = f.lattice();
    let df = jacobian(f)?;
    let shift = if subtract_mean { region.mean(f) } else { vec![0.0; f.rows] };
    let pw = pointwise(w, p, f, &df, region, &shift)?;
    let lhs = power_mean(&pw.value, &pw.weights, p + eps);
    let size = region.measure(&lat).powf(1.0 / lat.dim() as f64);
    let rhs = size * power_mean(&pw.grad, &pw.weights, p - eps);
    Ok(InequalityReport {
        lhs,
        rhs_without_c: rhs,
        ratio: ratio(lhs, rhs),
        p,
        eps,
        region: region.label.clone(),
        predicted_exponent: predicted_exponent(p),
    })
}

/// Poincaré ratio on the base cube of `f`.
pub fn poincare_ratio(w: &MatrixWeight, p: f64, eps: f64, f: &GridFunction) -> Result<InequalityReport> {
    local_ratio(w, p, eps, f, &Region::whole(&f.lattice()), true)
}

/// Sobolev ratio for `f` vanishing near the boundary of its base cube.
pub fn sobolev_ratio(w: &MatrixWeight, p: f64, eps: f64, f: &GridFunction) -> Result<InequalityReport> {
    check_support(f)?;
    local_ratio(w, p, eps, f, &Region::whole(&f.lattice()), false)
}

/// Constant `c` used by [`default_eps`] unless a sweep overrides it.
pub const EPS_CONSTANT: f64 = 0.1;

/// Default `ε = c / [W]_{A_p}^{max(1, p'/p)}`.
pub fn default_eps(p: f64, characteristic: f64, c: f64) -> f64 {
    c / characteristic.powf(1.0f64.max(conjugate(p) / p))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GlobalReport {
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
    pub p: f64,
    pub q: f64,
}

/// `‖W^{1/q} f‖_q / ‖W^{1/q} Df‖_p` with `1/q = 1/p - 1/d` on the lattice box.
pub fn global_sobolev_ratio(w: &MatrixWeight, p: f64, f: &GridFunction) -> Result<GlobalReport> {
    let d = w.d as f64;
    if !(p > 1.0 && p < d) {
        return Err(MatwError::ExponentOutOfRange(format!("need 1 < p < d, got p={p}, d={d}")));
    }
    let q = 1.0 / (1.0 / p - 1.0 / d);
    check_support(f)?;
    let lat = f.lattice();
    let df = jacobian(f)?;
    let region = Region::whole(&lat);
    let pw = pointwise(w, q, f, &df, &region, &vec![0.0; f.rows])?;
    let vol = lat.cell_volume();
    let lhs = (pw.value.iter().map(|v| v.powf(q)).sum::<f64>() * vol).powf(1.0 / q);
    let rhs = (pw.grad.iter().map(|v| v.powf(p)).sum::<f64>() * vol).powf(1.0 / p);
    Ok(GlobalReport { lhs, rhs, ratio: ratio(lhs, rhs), p, q })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnnulusReport {
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
    pub inner_cells: usize,
    pub outer_cells: usize,
}

fn ball_inside(lat: &Lattice, center: &[f64], r: f64) -> bool {
    (0..lat.dim()).all(|k| center[k] - r >= lat.base.lower(k) && center[k] + r <= lat.base.upper(k))
}

/// `avg_A |W^{1/p}(u - u_A)|^p` against `[W]_{A_p} · avg_A |W^{1/p}(u - a)|^p`
/// on the annulus `A = B_{r/2} \ B_{r/4}`.
pub fn annulus_mean_comparison(
    w: &MatrixWeight,
    p: f64,
    u: &GridFunction,
    center: &[f64],
    r: f64,
    a: &[f64],
    characteristic: f64,
) -> Result<AnnulusReport> {
    let lat = u.lattice();
    let ann = Region::annulus(&lat, center, 0.5 * r, 0.25 * r, 1);
    if ann.is_empty() {
        return Err(MatwError::EmptyAnnulus);
    }
    let df = GridFunction::zeros(&lat, u.rows, lat.dim());
    let mean = ann.mean(u);
    let about_mean = pointwise(w, p, u, &df, &ann, &mean)?;
    let about_a = pointwise(w, p, u, &df, &ann, a)?;
    let lhs = power_mean(&about_mean.value, &about_mean.weights, p).powf(p);
    let rhs = characteristic * power_mean(&about_a.value, &about_a.weights, p).powf(p);
    Ok(AnnulusReport { lhs, rhs, ratio: ratio(lhs, rhs), inner_cells: ann.inner, outer_cells: ann.outer })
}

/// `∫_{B_{r/2}\B_{r/4}} |W^{1/p}(u - u_A)|^p` against
/// `r^p ∫_{B_r\B_{r/8}} ‖W^{1/p} Du‖^p`; `sub` controls rasterisation.
pub fn annulus_poincare(w: &MatrixWeight, p: f64, u: &GridFunction, center: &[f64], r: f64, sub: usize) -> Result<AnnulusReport> {
    let lat = u.lattice();
    if !ball_inside(&lat, center, r) {
        return Err(MatwError::BallOutsideDomain);
    }
    let inner = Region::annulus(&lat, center, 0.5 * r, 0.25 * r, sub);
    let outer = Region::annulus(&lat, center, r, 0.125 * r, sub);
    if inner.is_empty() || outer.is_empty() {
        return Err(MatwError::EmptyAnnulus);
    }
    let du = jacobian(u)?;
    let mean = inner.mean(u);
    let pi = pointwise(w, p, u, &du, &inner, &mean)?;
    let po = pointwise(w, p, u, &du, &outer, &mean)?;
    let vol = lat.cell_volume();
    let lhs = pi.value.iter().zip(&pi.weights).map(|(v, wt)| wt * v.powf(p)).sum::<f64>() * vol;
    let rhs = r.powf(p) * po.grad.iter().zip(&po.weights).map(|(v, wt)| wt * v.powf(p)).sum::<f64>() * vol;
    Ok(AnnulusReport {
        lhs,
        rhs,
        ratio: ratio(lhs, rhs),
        inner_cells: inner.inner + outer.inner,
        outer_cells: inner.outer + outer.outer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dyadic::Cube;

    #[test]
    fn affine_jacobian_is_exact() {
        let lat = Lattice::new(Cube::unit(2), 3);
        let f = GridFunction::from_fn(&lat, 2, 1, |x| vec![2.0 * x[0] - x[1] + 1.0, 0.5 * x[1] + 3.0]);
        let df = jacobian(&f).unwrap();
        for c in 0..lat.len() {
            let got = df.at(c);
            let want = [2.0, -1.0, 0.0, 0.5];
            assert!(got.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-12));
        }
        let constant = GridFunction::from_fn(&lat, 1, 1, |_| vec![4.0]);
        assert!(jacobian(&constant).unwrap().values.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn jacobian_needs_resolution() {
        let lat = Lattice::new(Cube::unit(1), 1);
        let f = GridFunction::zeros(&lat, 1, 1);
        assert!(matches!(jacobian(&f), Err(MatwError::ResolutionTooLow { need: 4, got: 2 })));
    }

    #[test]
    fn unit_ball_volumes() {
        assert!((unit_ball_volume(4) - std::f64::consts::PI.powi(2) / 2.0).abs() < 1e-12);
        assert!((unit_ball_volume(5) - 8.0 * std::f64::consts::PI.powi(2) / 15.0).abs() < 1e-12);
    }

    #[test]
    fn constant_poincare_is_zero() {
        let lat = Lattice::new(Cube::unit(2), 4);
        let f = GridFunction::from_fn(&lat, 2, 1, |_| vec![1.0, -2.0]);
        let r = poincare_ratio(&MatrixWeight::identity(2, 2), 2.0, 0.0, &f).unwrap();
        assert!(r.lhs < 1e-14);
        assert_eq!(r.ratio, 0.0);
    }

    #[test]
    fn linear_poincare_closed_form() {
        let lat = Lattice::new(Cube::unit(1), 10);
        let f = GridFunction::from_fn(&lat, 1, 1, |x| vec![x[0]]);
        let r = poincare_ratio(&MatrixWeight::identity(1, 1), 2.0, 0.0, &f).unwrap();
        assert!((r.ratio - 1.0 / 12f64.sqrt()).abs() < 1e-4);
    }

    #[test]
    fn zero_function_ratios() {
        let lat = Lattice::new(Cube::parse("[-2,2)^2").unwrap(), 5);
        let z = GridFunction::zeros(&lat, 1, 1);
        let w = MatrixWeight::identity(1, 2);
        assert_eq!(sobolev_ratio(&w, 2.0, 0.0, &z).unwrap().ratio, 0.0);
        assert_eq!(global_sobolev_ratio(&w, 1.5, &z).unwrap().ratio, 0.0);
        assert_eq!(representation_check(&z).unwrap().max_error, 0.0);
    }

    #[test]
    fn support_violation() {
        let lat = Lattice::new(Cube::unit(1), 5);
        let f = GridFunction::from_fn(&lat, 1, 1, |x| vec![x[0]]);
        assert!(matches!(sobolev_ratio(&MatrixWeight::identity(1, 1), 2.0, 0.0, &f), Err(MatwError::SupportViolation(_))));
    }

    #[test]
    fn empty_annulus() {
        let lat = Lattice::new(Cube::unit(2), 2);
        let u = GridFunction::zeros(&lat, 1, 1);
        let w = MatrixWeight::identity(1, 2);
        assert!(matches!(
            annulus_mean_comparison(&w, 2.0, &u, &[0.5, 0.5], 0.01, &[0.0], 1.0),
            Err(MatwError::EmptyAnnulus)
        ));
    }
}

#[cfg(test)]
mod representation_tests {
    use super::*;
    use crate::dyadic::Cube;

    fn bump(x: &[f64]) -> f64 {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        if r2 < 1.0 {
            (-1.0 / (1.0 - r2)).exp()
        } else {
            0.0
        }
    }

    #[test]
    fn bump_reconstruction() {
        for (d, depth) in [(1usize, 9u32), (2, 7)] {
            let lat = Lattice::new(Cube::parse(&format!("[-2,2)^{d}")).unwrap(), depth);
            let f = GridFunction::from_fn(&lat, 1, 1, |x| vec![bump(x)]);
            let r = representation_check(&f).unwrap();
            eprintln!("d={d} err={} max={}", r.max_error, r.max_value);
            assert!(r.max_error < 1e-2 * r.max_value);
        }
    }
}
