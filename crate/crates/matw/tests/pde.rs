use std::time::Instant;

use matw::dyadic::Cube;
use matw::linalg::Mat;
use matw::pde::*;
use matw::weight::MatrixWeight;

fn slope(hs: &[f64], errs: &[f64]) -> f64 {
    let n = hs.len() as f64;
    let xs: Vec<f64> = hs.iter().map(|h| h.ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>()
}

fn quartic(x: &[f64]) -> f64 {
    x[0].powi(4) - 6.0 * x[0] * x[0] * x[1] * x[1] + x[1].powi(4)
}

#[test]
fn harmonic_quartic_converges_at_second_order() {
    let mut hs = vec![];
    let mut errs = vec![];
    for depth in [4, 5, 6] {
        let mesh = Mesh::new(Cube::parse("[-1,1)^2").unwrap(), depth);
        let h = mesh.h();
        let prob = EllipticProblem::new(mesh, MatrixWeight::identity(1, 2)).with_boundary(|x| vec![quartic(x)]);
        let sol = solve_linear(&prob).unwrap();
        hs.push(h);
        errs.push(sol.max_error(&|x| vec![quartic(x)]));
    }
    let s = slope(&hs, &errs);
    eprintln!("quartic errors {errs:?} slope {s}");
    assert!((s - 2.0).abs() <= 0.3);
}

#[test]
fn square_root_solution_in_one_dimension() {
    let w = MatrixWeight::power_radial(&Mat::from_element(1, 1, 1.0), &Mat::from_element(1, 1, 0.5), 1).unwrap();
    let mut prob = EllipticProblem::new(Mesh::new(Cube::unit(1), 10), w).with_boundary(|x| vec![x[0]]);
    prob.sampling = Sampling::Harmonic;
    let t = Instant::now();
    let sol = solve_linear(&prob).unwrap();
    let err = sol.max_error(&|x| vec![x[0].sqrt()]);
    eprintln!("sqrt err {err} in {:?}", t.elapsed());
    assert!(err < 1e-3);
}

#[test]
fn manufactured_weighted_solution() {
    let a = Mat::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
    let g = Mat::from_row_slice(2, 2, &[0.4, 0.2, 0.2, 0.3]);
    let w = MatrixWeight::power_radial(&a, &g, 2).unwrap();
    let exact = |x: &[f64]| vec![(2.0 * x[0]).sin() * x[1], x[0] * x[0] + (x[1]).cos()];
    let grad = |x: &[f64]| [2.0 * (2.0 * x[0]).cos() * x[1], (2.0 * x[0]).sin(), 2.0 * x[0], -(x[1]).sin()];
    let mut hs = vec![];
    let mut errs = vec![];
    for depth in [4, 5, 6] {
        let mesh = Mesh::new(Cube::unit(2), depth);
        let h = mesh.h();
        let wc = w.clone();
        let source = Source::Function(std::sync::Arc::new(move |x: &[f64]| {
            let m = wc.evaluate(x).unwrap();
            let du = grad(x);
            let mut f = vec![0.0; 4];
            for i in 0..2 {
                for k in 0..2 {
                    f[i * 2 + k] = -(0..2).map(|j| m[(i, j)] * du[j * 2 + k]).sum::<f64>();
                }
            }
            f
        }));
        let mut prob = EllipticProblem::new(mesh, w.clone()).with_boundary(exact).with_source(source);
        prob.sampling = Sampling::Tensor2;
        let sol = solve_linear(&prob).unwrap();
        hs.push(h);
        errs.push(sol.max_error(&exact));
    }
    let s = slope(&hs, &errs);
    eprintln!("manufactured errors {errs:?} slope {s}");
    assert!((s - 2.0).abs() <= 0.3);
}

#[test]
fn radial_p_harmonic_benchmark() {
    let p = 4.0;
    let exact = move |x: &[f64]| vec![(x[0] * x[0] + x[1] * x[1]).sqrt().powf((p - 2.0) / (p - 1.0))];
    let mut prob = EllipticProblem::new(Mesh::new(Cube::parse("[-1,1)^2").unwrap(), 8), MatrixWeight::identity(1, 2)).with_boundary(exact);
    prob.p = p;
    prob.domain = Domain::Annulus { center: vec![0.0, 0.0], r_in: 0.25, r_out: 1.0 };
    let t = Instant::now();
    let sol = solve_plaplace(&prob).unwrap();
    let err = sol.max_error(&exact);
    eprintln!("radial err {err} its {} in {:?}", sol.iterations, t.elapsed());
    assert!(err < 1e-2);
    assert!(sol.energy_history.windows(2).all(|w| w[1] <= w[0]));
}

fn weighted_problem(depth: u32) -> EllipticProblem {
    let a = Mat::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 1.5]);
    let g = Mat::from_row_slice(2, 2, &[0.5, 0.1, 0.1, -0.3]);
    let w = MatrixWeight::power_radial(&a, &g, 2).unwrap();
    EllipticProblem::new(Mesh::new(Cube::parse("[-1,1)^2").unwrap(), depth), w)
        .with_boundary(|x| vec![x[0] * x[1], (x[0] - x[1]).sin()])
}

/// Small deterministic perturbation that vanishes on the boundary.
fn interior_direction(prob: &EllipticProblem, k: usize) -> Vec<f64> {
    let mesh = &prob.mesh;
    let wd = prob.width();
    let mut v = vec![0.0; mesh.node_count() * wd];
    for node in 0..mesh.node_count() {
        if mesh.on_boundary(node) {
            continue;
        }
        let x = mesh.node_coord(node);
        for i in 0..wd {
            v[node * wd + i] = ((k + 1) as f64 * x[0] + (i as f64 + 0.5) * x[1] + 0.37 * k as f64).sin();
        }
    }
    v
}

#[test]
fn galerkin_orthogonality_and_uniqueness() {
    let prob = weighted_problem(5);
    let sol = solve_linear(&prob).unwrap();
    assert!(galerkin_residual(&prob, &sol.values).unwrap() < 1e-9);
    let mut start = sol.values.clone();
    for (s, d) in start.iter_mut().zip(interior_direction(&prob, 3)) {
        *s += 5.0 * d;
    }
    let again = solve_linear_from(&prob, Some(&start)).unwrap();
    let diff = sol.values.iter().zip(&again.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-10, "solutions differ by {diff}");
}

#[test]
fn linear_solution_minimises_energy() {
    let prob = weighted_problem(4);
    let sol = solve_linear(&prob).unwrap();
    let e0 = quadratic_energy(&prob, &sol.values).unwrap();
    for k in 0..6 {
        let dir = interior_direction(&prob, k);
        for t in [1e-3, -1e-2, 0.5] {
            let moved: Vec<f64> = sol.values.iter().zip(&dir).map(|(u, d)| u + t * d).collect();
            let e = quadratic_energy(&prob, &moved).unwrap();
            assert!(e >= e0 - 1e-10 * e0.abs().max(1.0), "k={k} t={t}: {e} < {e0}");
        }
    }
}

#[test]
fn ellipticity_sandwich_for_each_coefficient_form() {
    let base = weighted_problem(3);
    let forms = [
        (CoefficientForm::Weight, 1.0, 1.0),
        (CoefficientForm::Complex { skew: 0.75 }, 1.0, 1.25),
        (CoefficientForm::Anisotropic { m: vec![2.0, 0.0, 0.0, 0.5] }, 0.5, 2.0),
    ];
    for (form, lo, hi) in forms {
        let mut prob = base.clone();
        prob.form = form.clone();
        if prob.is_complex() {
            prob = prob.with_boundary(|x| vec![x[0], x[1], 0.0, 0.0]);
        }
        for sampling in [Sampling::Barycenter, Sampling::Tensor2] {
            prob.sampling = sampling;
            let ew = element_weights(&prob, sampling).unwrap();
            let e = ellipticity(&prob, &ew).unwrap();
            assert!((e.lower - lo).abs() < 1e-9 && (e.upper - hi).abs() < 1e-9, "{form:?}: {e:?}");
        }
    }
}

#[test]
fn energy_norm_stays_bounded_under_refinement() {
    let norms: Vec<f64> = [4u32, 5, 6]
        .iter()
        .map(|&k| {
            let prob = weighted_problem(k);
            weighted_energy_norm(&solve_linear(&prob).unwrap(), &prob).unwrap()
        })
        .collect();
    eprintln!("energy norms {norms:?}");
    for w in norms.windows(2) {
        assert!((w[1] / w[0] - 1.0).abs() < 0.05);
    }
}
