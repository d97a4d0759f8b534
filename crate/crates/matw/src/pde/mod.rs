//! Q1 finite elements on tensor grids for degenerate elliptic systems
//! `div(A Du) = -div F` and the weighted p-Laplacian, with regularity
//! diagnostics on the computed solutions.

pub mod diagnostics;
pub mod linear;
mod plaplace;

use std::sync::Arc;

use nalgebra::SymmetricEigen;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dyadic::Cube;
use crate::error::{MatwError, Result};
use crate::grid::{GridFunction, Lattice};
use crate::linalg::{self, Eig, Mat};
use crate::weight::{MatrixWeight, Samples};

pub use diagnostics::*;
pub use plaplace::{plaplace_energy, solve_plaplace};

/// Uniform tensor grid of `2^depth` elements per axis over `base`. Elements
/// coincide with the cells of `Lattice::new(base, depth)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    pub base: Cube,
    pub depth: u32,
}

impl Mesh {
    pub fn new(base: Cube, depth: u32) -> Mesh {
        Mesh { base, depth }
    }

    pub fn dim(&self) -> usize {
        self.base.dim
    }

    pub fn elements_per_axis(&self) -> usize {
        1 << self.depth
    }

    pub fn h(&self) -> f64 {
        self.base.side() / self.elements_per_axis() as f64
    }

    pub fn lattice(&self) -> Lattice {
        Lattice::new(self.base.clone(), self.depth)
    }

    pub fn node_count(&self) -> usize {
        (self.elements_per_axis() + 1).pow(self.dim() as u32)
    }

    pub fn node_multi(&self, node: usize) -> Vec<usize> {
        let m = self.elements_per_axis() + 1;
        let mut out = vec![0; self.dim()];
        let mut r = node;
        for k in (0..self.dim()).rev() {
            out[k] = r % m;
            r /= m;
        }
        out
    }

    pub fn node_flat(&self, idx: &[usize]) -> usize {
        let m = self.elements_per_axis() + 1;
        idx.iter().fold(0, |acc, &i| acc * m + i)
    }

    pub fn node_coord(&self, node: usize) -> Vec<f64> {
        let h = self.h();
        self.node_multi(node).iter().enumerate().map(|(k, &i)| self.base.lower(k) + i as f64 * h).collect()
    }

    pub fn on_boundary(&self, node: usize) -> bool {
        let m = self.elements_per_axis();
        self.node_multi(node).iter().any(|&i| i == 0 || i == m)
    }

    /// The `2^d` corner nodes of an element; corner `a` is offset by bit
    /// `d-1-k` of `a` along axis `k`.
    pub fn element_nodes(&self, element: usize) -> Vec<usize> {
        let d = self.dim();
        let idx = self.lattice().multi(element);
        (0..1usize << d)
            .map(|a| {
                let corner: Vec<usize> = (0..d).map(|k| idx[k] + ((a >> (d - 1 - k)) & 1)).collect();
                self.node_flat(&corner)
            })
            .collect()
    }
}

/// Reference Q1 data at points of the unit element.
struct Reference {
    /// Points in `[0,1]^d`.
    points: Vec<Vec<f64>>,
    /// Quadrature weights summing to one.
    weights: Vec<f64>,
    /// `values[q][a]`.
    values: Vec<Vec<f64>>,
    /// `grads[q][a][k]` for the unit element; divide by `h`.
    grads: Vec<Vec<Vec<f64>>>,
}

impl Reference {
    fn at(d: usize, points: Vec<Vec<f64>>, weights: Vec<f64>) -> Reference {
        let nb = 1usize << d;
        let mut values = Vec::new();
        let mut grads = Vec::new();
        for t in &points {
            let bit = |a: usize, k: usize| (a >> (d - 1 - k)) & 1;
            let l = |a: usize, k: usize| if bit(a, k) == 1 { t[k] } else { 1.0 - t[k] };
            values.push((0..nb).map(|a| (0..d).map(|k| l(a, k)).product()).collect());
            grads.push(
                (0..nb)
                    .map(|a| {
                        (0..d)
                            .map(|k| {
                                let sign = if bit(a, k) == 1 { 1.0 } else { -1.0 };
                                sign * (0..d).filter(|&j| j != k).map(|j| l(a, j)).product::<f64>()
                            })
                            .collect()
                    })
                    .collect(),
            );
        }
        Reference { points, weights, values, grads }
    }

    /// Two-point Gauss rule per axis, exact for every Q1 stiffness entry.
    fn gauss2(d: usize) -> Reference {
        let g = 0.5 / 3f64.sqrt();
        let nq = 1usize << d;
        let points = (0..nq).map(|q| (0..d).map(|k| if (q >> (d - 1 - k)) & 1 == 1 { 0.5 + g } else { 0.5 - g }).collect()).collect();
        Reference::at(d, points, vec![1.0 / nq as f64; nq])
    }

    fn center(d: usize) -> Reference {
        Reference::at(d, vec![vec![0.5; d]], vec![1.0])
    }
}

/// How `A = Φ(W)` is built from the weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum CoefficientForm {
    /// `A = W(x) δ_{αβ}`.
    Weight,
    /// `A = (1 + i·skew) W(x) δ_{αβ}`, solved in real form.
    Complex { skew: f64 },
    /// `A_{ij}^{αβ} = W_ij(x) M_{αβ}` for a symmetric positive definite `d×d` matrix `M`.
    Anisotropic { m: Vec<f64> },
}

/// Where the weight is sampled inside each element.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    Barycenter,
    /// At the `2^d` Gauss points.
    Tensor2,
    /// `(avg_e W^{-1})^{-1}`, which makes one-dimensional solutions exact at nodes.
    Harmonic,
}

impl std::str::FromStr for Sampling {
    type Err = MatwError;
    fn from_str(s: &str) -> Result<Sampling> {
        match s {
            "barycenter" => Ok(Sampling::Barycenter),
            "tensor2" => Ok(Sampling::Tensor2),
            "harmonic" => Ok(Sampling::Harmonic),
            _ => Err(MatwError::InvalidInput(format!("unknown sampling {s}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Domain {
    Box,
    /// `{r_in < |x - center| < r_out}`; nodes outside are held at the boundary data.
    Annulus { center: Vec<f64>, r_in: f64, r_out: f64 },
}

pub type VectorField = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// Right-hand side `F`, an `n×d` field, row-major.
#[derive(Clone)]
pub enum Source {
    Zero,
    /// Piecewise constant on elements.
    Cells(GridFunction),
    Function(VectorField),
}

impl Source {
    fn at(&self, element: usize, x: &[f64], width: usize) -> Vec<f64> {
        match self {
            Source::Zero => vec![0.0; width],
            Source::Cells(g) => g.at(element).to_vec(),
            Source::Function(f) => f(x),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Source::Zero => true,
            Source::Cells(g) => g.is_zero(),
            Source::Function(_) => false,
        }
    }
}

/// A Dirichlet problem on a tensor mesh. For `p > 2` the energy
/// `(1/p)∫⟨G Du, Du⟩^{p/2} + ∫⟨F, Du⟩` with `G = W^{2/p}` is minimised.
#[derive(Clone)]
pub struct EllipticProblem {
    pub mesh: Mesh,
    /// Number of solution components.
    pub n: usize,
    pub weight: MatrixWeight,
    pub form: CoefficientForm,
    pub sampling: Sampling,
    /// Relative eigenvalue floor, against the largest sampled eigenvalue.
    pub eig_floor: f64,
    pub p: f64,
    pub source: Source,
    /// Boundary values: `n` reals, or `2n` (real parts then imaginary parts)
    /// for complex coefficients.
    pub boundary: VectorField,
    pub domain: Domain,
    pub tol: f64,
    pub max_iter: usize,
}

impl EllipticProblem {
    pub fn new(mesh: Mesh, weight: MatrixWeight) -> EllipticProblem {
        let n = weight.n;
        EllipticProblem {
            mesh,
            n,
            weight,
            form: CoefficientForm::Weight,
            sampling: Sampling::Barycenter,
            eig_floor: 1e-10,
            p: 2.0,
            source: Source::Zero,
            boundary: Arc::new(move |_| vec![0.0; n]),
            domain: Domain::Box,
            tol: 1e-11,
            max_iter: 50_000,
        }
    }

    pub fn with_boundary(mut self, f: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        self.boundary = Arc::new(f);
        self
    }

    pub fn with_source(mut self, s: Source) -> Self {
        self.source = s;
        self
    }

    pub fn is_complex(&self) -> bool {
        matches!(self.form, CoefficientForm::Complex { .. })
    }

    /// Real unknowns per node.
    pub fn width(&self) -> usize {
        if self.is_complex() {
            2 * self.n
        } else {
            self.n
        }
    }

    fn validate(&self) -> Result<()> {
        let d = self.mesh.dim();
        self.mesh.base.validate()?;
        if self.weight.n != self.n || self.weight.d != d {
            return Err(MatwError::DimensionMismatch(format!(
                "weight is {}×{} on R^{}, problem has n={} d={d}",
                self.weight.n, self.weight.n, self.weight.d, self.n
            )));
        }
        if d > 3 {
            return Err(MatwError::InvalidInput("meshes support d ≤ 3".into()));
        }
        if let CoefficientForm::Anisotropic { m } = &self.form {
            if m.len() != d * d {
                return Err(MatwError::DimensionMismatch("anisotropy matrix must be d×d".into()));
            }
        }
        if let Source::Cells(g) = &self.source {
            if g.lattice() != self.mesh.lattice() || g.rows != self.n || g.cols != d {
                return Err(MatwError::DimensionMismatch("source must be n×d on the element lattice".into()));
            }
        }
        if self.mesh.depth < 1 {
            return Err(MatwError::ResolutionTooLow { need: 2, got: 1 });
        }
        Ok(())
    }

    /// Nodes whose values are prescribed.
    pub fn fixed_nodes(&self) -> Vec<bool> {
        (0..self.mesh.node_count())
            .map(|v| {
                self.mesh.on_boundary(v)
                    || match &self.domain {
                        Domain::Box => false,
                        Domain::Annulus { center, r_in, r_out } => {
                            let x = self.mesh.node_coord(v);
                            let r = x.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                            r <= *r_in || r >= *r_out
                        }
                    }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FloorReport {
    /// Absolute eigenvalue floor applied.
    pub floor: f64,
    pub floored: usize,
    pub samples: usize,
}

/// Weight samples at each element (one per element, or one per Gauss point).
pub struct ElementWeights {
    pub per_element: usize,
    pub samples: Samples,
    pub floor: FloorReport,
}

fn tanh_sinh(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let r = 0.5 * (b - a);
    let step = 1.0 / 32.0;
    let half_pi = std::f64::consts::FRAC_PI_2;
    let mut total = 0.0;
    for k in -160i32..=160 {
        let t = k as f64 * step;
        let u = half_pi * t.sinh();
        let w = half_pi * t.cosh() / u.cosh().powi(2);
        // distance to the nearer endpoint, without cancellation
        let gap = 2.0 / (1.0 + (2.0 * u.abs()).exp());
        let x = if u < 0.0 { a + r * gap } else { b - r * gap };
        if w < 1e-300 || gap == 0.0 {
            continue;
        }
        total += w * f(x);
    }
    total * r * step
}

fn harmonic_average(w: &MatrixWeight, lower: &[f64], h: f64) -> Result<Mat> {
    let d = lower.len();
    let n = w.n;
    let inv = |x: &[f64]| -> Result<Mat> { Ok(w.eig(x)?.power(-1.0)) };
    let mut acc = Mat::zeros(n, n);
    if d == 1 {
        for i in 0..n {
            for j in 0..n {
                let f = |x: f64| inv(&[x]).map(|m| m[(i, j)]).unwrap_or(f64::NAN);
                acc[(i, j)] = tanh_sinh(&f, lower[0], lower[0] + h) / h;
            }
        }
        if acc.iter().any(|v| !v.is_finite()) {
            return Err(MatwError::QuadratureFailure("harmonic average is not finite".into()));
        }
    } else {
        let (x, wt) = crate::conv::gauss_legendre(6);
        let total = 6usize.pow(d as u32);
        for s in 0..total {
            let mut r = s;
            let mut pt = vec![0.0; d];
            let mut weight = 1.0;
            for k in (0..d).rev() {
                let i = r % 6;
                r /= 6;
                pt[k] = lower[k] + 0.5 * h * (1.0 + x[i]);
                weight *= 0.5 * wt[i];
            }
            acc += inv(&pt)? * weight;
        }
    }
    Ok(Eig::new(&acc).power(-1.0))
}

/// Samples the weight over the mesh and applies the relative floor.
pub fn element_weights(prob: &EllipticProblem, sampling: Sampling) -> Result<ElementWeights> {
    let mesh = &prob.mesh;
    let lat = mesh.lattice();
    let d = mesh.dim();
    let h = mesh.h();
    let reference = match sampling {
        Sampling::Tensor2 => Reference::gauss2(d),
        _ => Reference::center(d),
    };
    let per_element = reference.points.len();
    let origin = lat.origin();
    let mats: Vec<Mat> = (0..lat.len() * per_element)
        .into_par_iter()
        .map(|s| {
            let (e, q) = (s / per_element, s % per_element);
            let idx = lat.multi(e);
            let lower: Vec<f64> = (0..d).map(|k| origin[k] + idx[k] as f64 * h).collect();
            match sampling {
                Sampling::Harmonic => harmonic_average(&prob.weight, &lower, h),
                _ => {
                    let x: Vec<f64> = (0..d).map(|k| lower[k] + reference.points[q][k] * h).collect();
                    prob.weight.evaluate(&x)
                }
            }
        })
        .collect::<Result<_>>()?;
    let n = prob.n;
    let eigs: Vec<Eig> = mats.par_iter().map(Eig::new).collect();
    let top = eigs.iter().map(Eig::max).fold(0.0, f64::max);
    let floor = prob.eig_floor * top;
    let mut samples = Samples { n, vals: Vec::new(), vecs: Vec::new(), floored: Vec::new() };
    let mut count = 0;
    for e in eigs {
        let mut hit = e.floored;
        for &v in &e.values {
            if v < floor {
                hit = true;
            }
            samples.vals.push(v.max(floor));
        }
        count += hit as usize;
        samples.vecs.extend(linalg::to_flat(&e.vectors));
        samples.floored.push(hit);
    }
    let report = FloorReport { floor, floored: count, samples: samples.len() };
    Ok(ElementWeights { per_element, samples, floor: report })
}

/// The coefficient on the real unknowns: `(w·d)×(w·d)` with index `i·d + α`.
fn real_tensor(form: &CoefficientForm, wm: &[f64], n: usize, d: usize) -> Vec<f64> {
    let (width, blocks): (usize, Vec<(usize, usize, f64)>) = match form {
        CoefficientForm::Complex { skew } => (2 * n, vec![(0, 0, 1.0), (0, 1, -skew), (1, 0, *skew), (1, 1, 1.0)]),
        _ => (n, vec![(0, 0, 1.0)]),
    };
    let size = width * d;
    let mut t = vec![0.0; size * size];
    for (bi, bj, c) in blocks {
        for i in 0..n {
            for j in 0..n {
                let wij = c * wm[i * n + j];
                for a in 0..d {
                    for b in 0..d {
                        let m = match form {
                            CoefficientForm::Anisotropic { m } => m[a * d + b],
                            _ => (a == b) as u8 as f64,
                        };
                        t[((bi * n + i) * d + a) * size + (bj * n + j) * d + b] = wij * m;
                    }
                }
            }
        }
    }
    t
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipticity {
    /// Smallest `Re⟨Aη,η⟩ / ‖W^{1/2}η‖²` over samples.
    pub lower: f64,
    /// Largest `|⟨Aν,η⟩| / (‖W^{1/2}ν‖‖W^{1/2}η‖)` over samples.
    pub upper: f64,
}

/// Measures the ellipticity sandwich at every weight sample.
pub fn ellipticity(prob: &EllipticProblem, ew: &ElementWeights) -> Result<Ellipticity> {
    let (n, d) = (prob.n, prob.mesh.dim());
    let wd = prob.width();
    let whole = ew.samples.power(1.0);
    let inv_half = ew.samples.power(-0.5);
    let size = wd * d;
    let per: Vec<(f64, f64)> = (0..ew.samples.len())
        .into_par_iter()
        .map(|s| {
            let t = real_tensor(&prob.form, &whole[s * n * n..(s + 1) * n * n], n, d);
            let si = &inv_half[s * n * n..(s + 1) * n * n];
            // S ⊗ I on the real unknowns, S = W^{-1/2} on each real block
            let scale = Mat::from_fn(size, size, |r, c| {
                let (ri, a) = (r / d, r % d);
                let (ci, b) = (c / d, c % d);
                if a != b || ri / n != ci / n {
                    0.0
                } else {
                    si[(ri % n) * n + ci % n]
                }
            });
            let tm = Mat::from_row_slice(size, size, &t);
            let tt = &scale * tm * &scale;
            let sym = 0.5 * (&tt + tt.transpose());
            let lo = SymmetricEigen::new(sym).eigenvalues.min();
            (lo, linalg::spectral_norm(&tt))
        })
        .collect();
    let mut out = Ellipticity { lower: f64::INFINITY, upper: 0.0 };
    for (s, (lo, hi)) in per.into_iter().enumerate() {
        if lo <= 1e-12 {
            return Err(MatwError::NonEllipticSample(s / ew.per_element));
        }
        out.lower = out.lower.min(lo);
        out.upper = out.upper.max(hi);
    }
    Ok(out)
}

/// Coefficient tensors at every element and Gauss point.
struct Coefficients {
    per_element: usize,
    tensors: Vec<Vec<f64>>,
}

impl Coefficients {
    fn at(&self, e: usize, q: usize) -> &[f64] {
        if self.per_element == 1 {
            &self.tensors[e]
        } else {
            &self.tensors[e * self.per_element + q]
        }
    }
}

fn coefficients(prob: &EllipticProblem, ew: &ElementWeights) -> Coefficients {
    let n = prob.n;
    let whole = ew.samples.power(1.0);
    let tensors = (0..ew.samples.len())
        .into_par_iter()
        .map(|s| real_tensor(&prob.form, &whole[s * n * n..(s + 1) * n * n], n, prob.mesh.dim()))
        .collect();
    Coefficients { per_element: ew.per_element, tensors }
}

/// Nodal interpolation of the boundary data on the fixed nodes (zero elsewhere).
fn boundary_vector(prob: &EllipticProblem, fixed: &[bool]) -> Result<Vec<f64>> {
    let wd = prob.width();
    let mut u = vec![0.0; prob.mesh.node_count() * wd];
    for (v, &f) in fixed.iter().enumerate() {
        if f {
            let val = (prob.boundary)(&prob.mesh.node_coord(v));
            if val.len() != wd {
                return Err(MatwError::DimensionMismatch(format!("boundary data returns {} values, expected {wd}", val.len())));
            }
            u[v * wd..(v + 1) * wd].copy_from_slice(&val);
        }
    }
    Ok(u)
}

/// Assembled Galerkin system on the free unknowns.
pub struct LinearSystem {
    pub matrix: linear::Csr,
    pub rhs: Vec<f64>,
    /// Free unknown index for every global unknown, `usize::MAX` if fixed.
    pub free: Vec<usize>,
    /// Full nodal vector holding the boundary data.
    pub lifted: Vec<f64>,
    pub floor: FloorReport,
    pub ellipticity: Ellipticity,
}

/// Element stiffness `K[(a,i),(b,j)] = Σ_q w_q Σ A[(i,α),(j,β)] ∂_βφ_b ∂_αφ_a`
/// and load `-Σ_q w_q F_{iα} ∂_αφ_a`, both scaled to an element of side `h`.
fn element_matrices(
    r: &Reference,
    coef: &Coefficients,
    e: usize,
    source: &Source,
    x_of: &dyn Fn(usize) -> Vec<f64>,
    n: usize,
    wd: usize,
    d: usize,
    h: f64,
) -> (Vec<f64>, Vec<f64>) {
    let nb = 1usize << d;
    let size = nb * wd;
    let vol = h.powi(d as i32);
    let mut k = vec![0.0; size * size];
    let mut load = vec![0.0; size];
    let td = wd * d;
    for q in 0..r.points.len() {
        let t = coef.at(e, q);
        let g = &r.grads[q];
        let wq = r.weights[q] * vol / (h * h);
        for a in 0..nb {
            for b in 0..nb {
                for i in 0..wd {
                    for j in 0..wd {
                        let mut s = 0.0;
                        for al in 0..d {
                            let row = (i * d + al) * td + j * d;
                            for be in 0..d {
                                s += t[row + be] * g[b][be] * g[a][al];
                            }
                        }
                        k[(a * wd + i) * size + b * wd + j] += wq * s;
                    }
                }
            }
        }
        if !source.is_zero() {
            let f = source.at(e, &x_of(q), n * d);
            let wl = r.weights[q] * vol / h;
            for a in 0..nb {
                for i in 0..n {
                    let s: f64 = (0..d).map(|al| f[i * d + al] * g[a][al]).sum();
                    load[a * wd + i] -= wl * s;
                }
            }
        }
    }
    (k, load)
}

/// Assembles the linear Galerkin system with the boundary data eliminated.
pub fn assemble_linear(prob: &EllipticProblem) -> Result<LinearSystem> {
    prob.validate()?;
    let ew = element_weights(prob, prob.sampling)?;
    let ell = ellipticity(prob, &ew)?;
    let coef = coefficients(prob, &ew);
    let fixed = prob.fixed_nodes();
    let lifted = boundary_vector(prob, &fixed)?;
    let mesh = &prob.mesh;
    let (n, d, wd, h) = (prob.n, mesh.dim(), prob.width(), mesh.h());
    let mut free = vec![usize::MAX; mesh.node_count() * wd];
    let mut count = 0;
    for (v, &f) in fixed.iter().enumerate() {
        if !f {
            for i in 0..wd {
                free[v * wd + i] = count;
                count += 1;
            }
        }
    }
    let r = Reference::gauss2(d);
    let lat = mesh.lattice();
    let origin = lat.origin();
    let nb = 1usize << d;
    let locals: Vec<(Vec<usize>, Vec<f64>, Vec<f64>)> = (0..lat.len())
        .into_par_iter()
        .map(|e| {
            let idx = lat.multi(e);
            let x_of = |q: usize| -> Vec<f64> { (0..d).map(|k| origin[k] + (idx[k] as f64 + r.points[q][k]) * h).collect() };
            let (k, l) = element_matrices(&r, &coef, e, &prob.source, &x_of, n, wd, d, h);
            (mesh.element_nodes(e), k, l)
        })
        .collect();
    let mut trip = linear::Triplets::new(count);
    let mut rhs = vec![0.0; count];
    let size = nb * wd;
    for (nodes, k, l) in locals {
        for a in 0..nb {
            for i in 0..wd {
                let gi = free[nodes[a] * wd + i];
                if gi == usize::MAX {
                    continue;
                }
                rhs[gi] += l[a * wd + i];
                for b in 0..nb {
                    for j in 0..wd {
                        let gj = nodes[b] * wd + j;
                        let v = k[(a * wd + i) * size + b * wd + j];
                        match free[gj] {
                            usize::MAX => rhs[gi] -= v * lifted[gj],
                            fj => trip.add(gi, fj, v),
                        }
                    }
                }
            }
        }
    }
    Ok(LinearSystem { matrix: trip.build(), rhs, free, lifted, floor: ew.floor, ellipticity: ell })
}

/// Nodal solution and solver metadata.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiscreteSolution {
    pub mesh: Mesh,
    pub n: usize,
    pub complex: bool,
    /// `width()` reals per node, node-major.
    #[serde(skip)]
    pub values: Vec<f64>,
    pub p: f64,
    /// Relative residual of the final linear solve, or the final Newton decrement.
    pub residual: f64,
    pub energy: f64,
    pub iterations: usize,
    pub method: String,
    pub energy_history: Vec<f64>,
    pub floor: FloorReport,
    pub ellipticity: Option<Ellipticity>,
}

impl DiscreteSolution {
    pub fn width(&self) -> usize {
        if self.complex {
            2 * self.n
        } else {
            self.n
        }
    }

    pub fn at(&self, node: usize) -> &[f64] {
        let w = self.width();
        &self.values[node * w..(node + 1) * w]
    }

    /// Q1 interpolation at `x`.
    pub fn eval(&self, x: &[f64]) -> Option<Vec<f64>> {
        let mesh = &self.mesh;
        let d = mesh.dim();
        let h = mesh.h();
        let m = mesh.elements_per_axis();
        let mut idx = vec![0; d];
        let mut t = vec![0.0; d];
        for k in 0..d {
            let s = (x[k] - mesh.base.lower(k)) / h;
            if !(-1e-12..=m as f64 + 1e-12).contains(&s) {
                return None;
            }
            let i = (s.floor().max(0.0) as usize).min(m - 1);
            idx[k] = i;
            t[k] = s - i as f64;
        }
        let e = mesh.lattice().flat(&idx);
        let r = Reference::at(d, vec![t], vec![1.0]);
        let w = self.width();
        let mut out = vec![0.0; w];
        for (a, node) in mesh.element_nodes(e).into_iter().enumerate() {
            let phi = r.values[0][a];
            out.iter_mut().zip(self.at(node)).for_each(|(o, v)| *o += phi * v);
        }
        Some(out)
    }

    /// Values at element centres.
    pub fn cell_values(&self) -> GridFunction {
        self.cell_data(false)
    }

    /// Jacobian at element centres, `width()×d` per element.
    pub fn cell_gradient(&self) -> GridFunction {
        self.cell_data(true)
    }

    fn cell_data(&self, grad: bool) -> GridFunction {
        let mesh = &self.mesh;
        let lat = mesh.lattice();
        let d = mesh.dim();
        let w = self.width();
        let r = Reference::center(d);
        let h = mesh.h();
        let cols = if grad { d } else { 1 };
        let mut g = GridFunction::zeros(&lat, w, cols);
        for e in 0..lat.len() {
            let out = &mut g.values[e * w * cols..(e + 1) * w * cols];
            for (a, node) in mesh.element_nodes(e).into_iter().enumerate() {
                let u = &self.values[node * w..(node + 1) * w];
                for i in 0..w {
                    if grad {
                        for k in 0..d {
                            out[i * d + k] += u[i] * r.grads[0][a][k] / h;
                        }
                    } else {
                        out[i] += u[i] * r.values[0][a];
                    }
                }
            }
        }
        g
    }

    /// Largest nodal deviation from `exact`.
    pub fn max_error(&self, exact: &dyn Fn(&[f64]) -> Vec<f64>) -> f64 {
        let w = self.width();
        (0..self.mesh.node_count())
            .map(|v| {
                let e = exact(&self.mesh.node_coord(v));
                self.at(v).iter().zip(&e[..w]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }
}

/// `½∫⟨A Du, Du⟩ + ∫⟨F, Du⟩` of a nodal vector, with the problem's sampling.
pub fn quadratic_energy(prob: &EllipticProblem, values: &[f64]) -> Result<f64> {
    prob.validate()?;
    let ew = element_weights(prob, prob.sampling)?;
    let coef = coefficients(prob, &ew);
    let mesh = &prob.mesh;
    let (n, d, wd, h) = (prob.n, mesh.dim(), prob.width(), mesh.h());
    let r = Reference::gauss2(d);
    let lat = mesh.lattice();
    let origin = lat.origin();
    let vol = lat.cell_volume();
    let td = wd * d;
    let per: Vec<f64> = (0..lat.len())
        .into_par_iter()
        .map(|e| {
            let nodes = mesh.element_nodes(e);
            let idx = lat.multi(e);
            let mut total = 0.0;
            for q in 0..r.points.len() {
                let mut du = vec![0.0; td];
                for (a, &node) in nodes.iter().enumerate() {
                    for i in 0..wd {
                        for k in 0..d {
                            du[i * d + k] += values[node * wd + i] * r.grads[q][a][k] / h;
                        }
                    }
                }
                let t = coef.at(e, q);
                let mut quad = 0.0;
                for row in 0..td {
                    for col in 0..td {
                        quad += du[row] * t[row * td + col] * du[col];
                    }
                }
                let mut lin = 0.0;
                if !prob.source.is_zero() {
                    let x: Vec<f64> = (0..d).map(|k| origin[k] + (idx[k] as f64 + r.points[q][k]) * h).collect();
                    let f = prob.source.at(e, &x, n * d);
                    lin = (0..n * d).map(|s| f[s] * du[s]).sum();
                }
                total += r.weights[q] * vol * (0.5 * quad + lin);
            }
            total
        })
        .collect();
    Ok(per.iter().sum())
}

fn scatter(sys: &LinearSystem, x: &[f64]) -> Vec<f64> {
    let mut u = sys.lifted.clone();
    for (g, &f) in sys.free.iter().enumerate() {
        if f != usize::MAX {
            u[g] = x[f];
        }
    }
    u
}

fn gather(sys: &LinearSystem, u: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; sys.rhs.len()];
    for (g, &f) in sys.free.iter().enumerate() {
        if f != usize::MAX {
            x[f] = u[g];
        }
    }
    x
}

/// Solves the linear problem (`p = 2`), optionally from a nodal initial iterate.
pub fn solve_linear_from(prob: &EllipticProblem, initial: Option<&[f64]>) -> Result<DiscreteSolution> {
    if prob.p != 2.0 {
        return Err(MatwError::ExponentOutOfRange(format!("linear solve needs p = 2, got {}", prob.p)));
    }
    let sys = assemble_linear(prob)?;
    let x0 = initial.map(|u| gather(&sys, u));
    let (x, stats) = linear::solve(&sys.matrix, &sys.rhs, x0.as_deref(), prob.tol, prob.max_iter)?;
    let values = scatter(&sys, &x);
    let energy = quadratic_energy(prob, &values)?;
    Ok(DiscreteSolution {
        mesh: prob.mesh.clone(),
        n: prob.n,
        complex: prob.is_complex(),
        values,
        p: 2.0,
        residual: stats.residual,
        energy,
        iterations: stats.iterations,
        method: stats.method.into(),
        energy_history: vec![energy],
        floor: sys.floor,
        ellipticity: Some(sys.ellipticity),
    })
}

pub fn solve_linear(prob: &EllipticProblem) -> Result<DiscreteSolution> {
    solve_linear_from(prob, None)
}

/// Largest `|K u - b|` over free unknowns, relative to `max |b|` (or to the
/// largest stiffness row sum when `b = 0`).
pub fn galerkin_residual(prob: &EllipticProblem, values: &[f64]) -> Result<f64> {
    let sys = assemble_linear(prob)?;
    let x = gather(&sys, values);
    let kx = sys.matrix.apply(&x);
    let worst = kx.iter().zip(&sys.rhs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = sys.rhs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if scale > 0.0 { scale } else { sys.matrix.vals.iter().fold(0.0f64, |m, v| m.max(v.abs())) };
    Ok(worst / scale.max(f64::MIN_POSITIVE))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplace(depth: u32, d: usize) -> EllipticProblem {
        EllipticProblem::new(Mesh::new(Cube::unit(d), depth), MatrixWeight::identity(1, d))
    }

    #[test]
    fn laplace_stiffness_matches_textbook() {
        // d=1: tridiagonal (2, -1)/h; d=2: the 9-point Q1 stencil 8/3, -1/3
        let sys = assemble_linear(&laplace(3, 1)).unwrap();
        let h = 1.0 / 8.0;
        for i in 0..sys.matrix.n {
            assert!((sys.matrix.get(i, i) - 2.0 / h).abs() < 1e-12);
            if i + 1 < sys.matrix.n {
                assert!((sys.matrix.get(i, i + 1) + 1.0 / h).abs() < 1e-12);
            }
        }
        let sys = assemble_linear(&laplace(3, 2)).unwrap();
        let m = 7;
        let c = 3 * m + 3;
        assert!((sys.matrix.get(c, c) - 8.0 / 3.0).abs() < 1e-12);
        for off in [1, m, m - 1, m + 1] {
            assert!((sys.matrix.get(c, c + off) + 1.0 / 3.0).abs() < 1e-12);
        }
        assert!(sys.rhs.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn quadratic_harmonic_is_nodally_exact() {
        let prob = laplace(4, 2).with_boundary(|x| vec![x[0] * x[0] - x[1] * x[1]]);
        let sol = solve_linear(&prob).unwrap();
        assert!(sol.max_error(&|x| vec![x[0] * x[0] - x[1] * x[1]]) < 1e-10);
    }

    #[test]
    fn interpolation_reproduces_nodes() {
        let prob = laplace(2, 2).with_boundary(|x| vec![x[0] + 2.0 * x[1]]);
        let sol = solve_linear(&prob).unwrap();
        let v = sol.eval(&[0.3, 0.7]).unwrap();
        assert!((v[0] - 1.7).abs() < 1e-10);
        let g = sol.cell_gradient();
        assert!((g.at(5)[0] - 1.0).abs() < 1e-10 && (g.at(5)[1] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn weight_form_is_exactly_elliptic() {
        let a = Mat::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let g = Mat::from_row_slice(2, 2, &[0.3, 0.1, 0.1, -0.2]);
        let w = MatrixWeight::power_radial(&a, &g, 2).unwrap();
        let mut prob = EllipticProblem::new(Mesh::new(Cube::parse("[-1,1)^2").unwrap(), 3), w);
        let e = ellipticity(&prob, &element_weights(&prob, Sampling::Barycenter).unwrap()).unwrap();
        assert!((e.lower - 1.0).abs() < 1e-9 && (e.upper - 1.0).abs() < 1e-9);
        prob.form = CoefficientForm::Complex { skew: 0.75 };
        let e = ellipticity(&prob, &element_weights(&prob, Sampling::Barycenter).unwrap()).unwrap();
        assert!((e.lower - 1.0).abs() < 1e-9 && (e.upper - 1.25).abs() < 1e-9);
        prob.form = CoefficientForm::Anisotropic { m: vec![1.0, 0.0, 0.0, -1.0] };
        assert!(matches!(
            ellipticity(&prob, &element_weights(&prob, Sampling::Barycenter).unwrap()),
            Err(MatwError::NonEllipticSample(_))
        ));
    }

    #[test]
    fn tanh_sinh_endpoint_singularity() {
        let v = tanh_sinh(&|x: f64| x.powf(-0.5), 0.0, 0.25);
        assert!((v - 1.0).abs() < 1e-10);
    }
}
