//! Damped Newton descent on the weighted p-Dirichlet energy.

use rayon::prelude::*;

use super::linear::{self, Triplets};
use super::{boundary_vector, element_weights, CoefficientForm, DiscreteSolution, EllipticProblem, Reference};
use crate::error::{MatwError, Result};

/// Per-element data for `J(u) = (1/p)∫⟨G Du, Du⟩^{p/2} + ∫⟨F, Du⟩`,
/// evaluated by the two-point Gauss rule.
struct Functional<'a> {
    prob: &'a EllipticProblem,
    r: Reference,
    /// `G = W^{2/p}` per element (or per Gauss point).
    g: Vec<f64>,
    per_element: usize,
    /// `F` at every (element, Gauss point), empty when zero.
    f: Vec<f64>,
    nodes: Vec<Vec<usize>>,
}

impl<'a> Functional<'a> {
    fn new(prob: &'a EllipticProblem) -> Result<(Functional<'a>, super::FloorReport)> {
        let ew = element_weights(prob, prob.sampling)?;
        let g = ew.samples.power(2.0 / prob.p);
        let mesh = &prob.mesh;
        let d = mesh.dim();
        let r = Reference::gauss2(d);
        let lat = mesh.lattice();
        let h = mesh.h();
        let origin = lat.origin();
        let nq = r.points.len();
        let f = if prob.source.is_zero() {
            Vec::new()
        } else {
            (0..lat.len() * nq)
                .flat_map(|s| {
                    let (e, q) = (s / nq, s % nq);
                    let idx = lat.multi(e);
                    let x: Vec<f64> = (0..d).map(|k| origin[k] + (idx[k] as f64 + r.points[q][k]) * h).collect();
                    prob.source.at(e, &x, prob.n * d)
                })
                .collect()
        };
        let nodes = (0..lat.len()).map(|e| mesh.element_nodes(e)).collect();
        Ok((Functional { prob, r, g, per_element: ew.per_element, f, nodes }, ew.floor))
    }

    fn g_at(&self, e: usize, q: usize) -> &[f64] {
        let n = self.prob.n;
        let s = if self.per_element == 1 { e } else { e * self.per_element + q };
        &self.g[s * n * n..(s + 1) * n * n]
    }

    /// `Du` at Gauss point `q` of element `e`, `n×d` row-major.
    fn du(&self, u: &[f64], e: usize, q: usize) -> Vec<f64> {
        let (n, d, h) = (self.prob.n, self.prob.mesh.dim(), self.prob.mesh.h());
        let mut du = vec![0.0; n * d];
        for (a, &node) in self.nodes[e].iter().enumerate() {
            for i in 0..n {
                for k in 0..d {
                    du[i * d + k] += u[node * n + i] * self.r.grads[q][a][k] / h;
                }
            }
        }
        du
    }

    /// `G Du` and `s = ⟨G Du, Du⟩`.
    fn gdu(&self, du: &[f64], e: usize, q: usize) -> (Vec<f64>, f64) {
        let (n, d) = (self.prob.n, self.prob.mesh.dim());
        let g = self.g_at(e, q);
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..n {
                for k in 0..d {
                    out[i * d + k] += g[i * n + j] * du[j * d + k];
                }
            }
        }
        let s = out.iter().zip(du).map(|(a, b)| a * b).sum::<f64>().max(0.0);
        (out, s)
    }

    fn source_dot(&self, du: &[f64], e: usize, q: usize) -> f64 {
        if self.f.is_empty() {
            return 0.0;
        }
        let w = du.len();
        let nq = self.r.points.len();
        let f = &self.f[(e * nq + q) * w..(e * nq + q + 1) * w];
        f.iter().zip(du).map(|(a, b)| a * b).sum()
    }

    fn energy(&self, u: &[f64]) -> f64 {
        let p = self.prob.p;
        let vol = self.prob.mesh.lattice().cell_volume();
        let per: Vec<f64> = (0..self.nodes.len())
            .into_par_iter()
            .map(|e| {
                (0..self.r.points.len())
                    .map(|q| {
                        let du = self.du(u, e, q);
                        let (_, s) = self.gdu(&du, e, q);
                        self.r.weights[q] * vol * (s.powf(0.5 * p) / p + self.source_dot(&du, e, q))
                    })
                    .sum()
            })
            .collect();
        per.iter().sum()
    }

    /// Largest `⟨G Du, Du⟩` over Gauss points.
    fn max_s(&self, u: &[f64]) -> f64 {
        (0..self.nodes.len())
            .into_par_iter()
            .map(|e| (0..self.r.points.len()).map(|q| self.gdu(&self.du(u, e, q), e, q).1).fold(0.0, f64::max))
            .reduce(|| 0.0, f64::max)
    }

    /// Gradient on all nodal unknowns and the Hessian of the energy with `s`
    /// floored at `delta`, restricted to free unknowns. `linear` replaces the
    /// energy by the quadratic one with `s ≡ 1`.
    fn gradient_hessian(&self, u: &[f64], free: &[usize], nfree: usize, delta: f64, linear: bool) -> (Vec<f64>, linear::Csr) {
        let (n, d, h) = (self.prob.n, self.prob.mesh.dim(), self.prob.mesh.h());
        let p = self.prob.p;
        let nb = 1usize << d;
        let size = nb * n;
        let vol = self.prob.mesh.lattice().cell_volume();
        let locals: Vec<(Vec<f64>, Vec<f64>)> = (0..self.nodes.len())
            .into_par_iter()
            .map(|e| {
                let mut grad = vec![0.0; size];
                let mut hess = vec![0.0; size * size];
                for q in 0..self.r.points.len() {
                    let du = self.du(u, e, q);
                    let (gdu, s) = self.gdu(&du, e, q);
                    let sr = s.max(delta);
                    let (c1, c2) = if linear { (1.0, 0.0) } else { (s.powf(0.5 * p - 1.0), (p - 2.0) * sr.powf(0.5 * p - 2.0)) };
                    let c1h = if linear { 1.0 } else { sr.powf(0.5 * p - 1.0) };
                    let wq = self.r.weights[q] * vol;
                    let gr = &self.r.grads[q];
                    let g = self.g_at(e, q);
                    let f = if self.f.is_empty() {
                        None
                    } else {
                        let nq = self.r.points.len();
                        Some(&self.f[(e * nq + q) * n * d..(e * nq + q + 1) * n * d])
                    };
                    // v[a][i] = Σ_k (G Du)_{ik} ∂_k φ_a
                    let mut v = vec![0.0; size];
                    for a in 0..nb {
                        for i in 0..n {
                            let mut t = 0.0;
                            let mut lin = 0.0;
                            for k in 0..d {
                                t += gdu[i * d + k] * gr[a][k] / h;
                                if let Some(f) = f {
                                    lin += f[i * d + k] * gr[a][k] / h;
                                }
                            }
                            v[a * n + i] = t;
                            grad[a * n + i] += wq * (c1 * t + lin);
                        }
                    }
                    for a in 0..nb {
                        for b in 0..nb {
                            let dot: f64 = (0..d).map(|k| gr[a][k] * gr[b][k]).sum::<f64>() / (h * h);
                            for i in 0..n {
                                for j in 0..n {
                                    let mut val = c1h * g[i * n + j] * dot;
                                    if c2 != 0.0 {
                                        val += c2 * v[a * n + i] * v[b * n + j];
                                    }
                                    hess[(a * n + i) * size + b * n + j] += wq * val;
                                }
                            }
                        }
                    }
                }
                (grad, hess)
            })
            .collect();
        let mut grad = vec![0.0; u.len()];
        let mut trip = Triplets::new(nfree);
        for (e, (g, hm)) in locals.into_iter().enumerate() {
            let nodes = &self.nodes[e];
            for a in 0..nb {
                for i in 0..n {
                    let gi = nodes[a] * n + i;
                    grad[gi] += g[a * n + i];
                    let fi = free[gi];
                    if fi == usize::MAX {
                        continue;
                    }
                    for b in 0..nb {
                        for j in 0..n {
                            let fj = free[nodes[b] * n + j];
                            if fj != usize::MAX {
                                trip.add(fi, fj, hm[(a * n + i) * size + b * n + j]);
                            }
                        }
                    }
                }
            }
        }
        (grad, trip.build())
    }
}

/// `(1/p)∫⟨G Du, Du⟩^{p/2} + ∫⟨F, Du⟩` for a nodal vector.
pub fn plaplace_energy(prob: &EllipticProblem, values: &[f64]) -> Result<f64> {
    prob.validate()?;
    Ok(Functional::new(prob)?.0.energy(values))
}

/// Minimises the discrete energy by Newton directions with Armijo
/// backtracking, starting from the `p = 2` solution. Every accepted step
/// lowers the energy.
pub fn solve_plaplace(prob: &EllipticProblem) -> Result<DiscreteSolution> {
    prob.validate()?;
    if prob.form != CoefficientForm::Weight {
        return Err(MatwError::InvalidInput("the p-Laplacian takes the plain weight form with real data".into()));
    }
    if prob.p < 2.0 {
        return Err(MatwError::ExponentOutOfRange(format!("need p ≥ 2, got {}", prob.p)));
    }
    let (fun, floor) = Functional::new(prob)?;
    let n = prob.n;
    let fixed = prob.fixed_nodes();
    let mut u = boundary_vector(prob, &fixed)?;
    let mut free = vec![usize::MAX; u.len()];
    let mut nfree = 0;
    for (v, &f) in fixed.iter().enumerate() {
        if !f {
            for i in 0..n {
                free[v * n + i] = nfree;
                nfree += 1;
            }
        }
    }
    let inner_tol = 1e-12;
    let step = |u: &[f64], delta: f64, linear: bool| -> Result<(Vec<f64>, Vec<f64>)> {
        let (grad, hess) = fun.gradient_hessian(u, &free, nfree, delta, linear);
        let mut rhs = vec![0.0; nfree];
        for (g, &f) in free.iter().enumerate() {
            if f != usize::MAX {
                rhs[f] = -grad[g];
            }
        }
        let (dir, _) = linear::solve(&hess, &rhs, None, inner_tol, prob.max_iter)?;
        let mut full = vec![0.0; u.len()];
        for (g, &f) in free.iter().enumerate() {
            if f != usize::MAX {
                full[g] = dir[f];
            }
        }
        Ok((grad, full))
    };
    // start from the minimiser of the quadratic energy with the same G
    if nfree > 0 {
        let (_, d0) = step(&u, 0.0, true)?;
        u.iter_mut().zip(&d0).for_each(|(a, b)| *a += b);
    }
    let mut energy = fun.energy(&u);
    let mut history = vec![energy];
    let max_newton = 200;
    for it in 0..max_newton {
        if nfree == 0 {
            break;
        }
        let delta = 1e-12 * fun.max_s(&u).max(f64::MIN_POSITIVE);
        let (grad, dir) = step(&u, delta, false)?;
        let slope: f64 = grad.iter().zip(&dir).map(|(a, b)| a * b).sum();
        let decrement = -slope;
        let scale = energy.abs().max(f64::MIN_POSITIVE);
        if decrement <= 1e-13 * scale || slope >= 0.0 {
            return Ok(finish(prob, u, energy, history, it, decrement, floor));
        }
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = u.iter().zip(&dir).map(|(a, b)| a + t * b).collect();
            let e = fun.energy(&trial);
            if e <= energy + 1e-4 * t * slope {
                u = trial;
                energy = e;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            if decrement <= 1e-9 * scale {
                return Ok(finish(prob, u, energy, history, it, decrement, floor));
            }
            return Err(MatwError::LineSearchFailure(it));
        }
        history.push(energy);
    }
    if nfree == 0 {
        return Ok(finish(prob, u, energy, history, 0, 0.0, floor));
    }
    Err(MatwError::NonConvergence(max_newton))
}

fn finish(
    prob: &EllipticProblem,
    values: Vec<f64>,
    energy: f64,
    history: Vec<f64>,
    iterations: usize,
    decrement: f64,
    floor: super::FloorReport,
) -> DiscreteSolution {
    DiscreteSolution {
        mesh: prob.mesh.clone(),
        n: prob.n,
        complex: false,
        values,
        p: prob.p,
        residual: decrement,
        energy,
        iterations,
        method: "newton-armijo".into(),
        energy_history: history,
        floor,
        ellipticity: None,
    }
}
