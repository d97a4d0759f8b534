use matw::analysis::*;
use matw::dyadic::Cube;
use matw::grid::{GridFunction, Lattice};
use matw::linalg::Mat;
use matw::weight::MatrixWeight;
use proptest::prelude::*;

fn cube(s: &str) -> Cube {
    Cube::parse(s).unwrap()
}

fn gaussian(x: &[f64]) -> f64 {
    (-x.iter().map(|v| v * v).sum::<f64>()).exp()
}

fn sym2(a: f64, b: f64, c: f64) -> Mat {
    Mat::from_row_slice(2, 2, &[a, b, b, c])
}

#[test]
fn sine_jacobian_second_order() {
    let lat = Lattice::new(cube("[0,1)^2"), 10);
    let f = GridFunction::from_fn(&lat, 2, 1, |x| vec![x[0].sin(), 0.0]);
    let df = jacobian(&f).unwrap();
    let mut worst = 0.0f64;
    for c in 0..lat.len() {
        let x = lat.center(c);
        let j = df.at(c);
        worst = worst.max((j[0] - x[0].cos()).abs()).max(j[1].abs()).max(j[2].abs()).max(j[3].abs());
    }
    assert!(worst < 1e-4, "max error {worst}");
}

fn bump(x: &[f64]) -> f64 {
    let r2: f64 = x.iter().map(|v| v * v).sum();
    if r2 < 1.0 {
        (1.0 - r2).powi(2)
    } else {
        0.0
    }
}

#[test]
fn planar_bump_representation() {
    let mut errs = Vec::new();
    for depth in [7u32, 8, 9] {
        let lat = Lattice::new(cube("[-2,2)^2"), depth);
        let f = GridFunction::from_fn(&lat, 2, 1, |x| vec![bump(x), 0.0]);
        let r = representation_check(&f).unwrap();
        errs.push(r.max_error);
    }
    eprintln!("representation errors {errs:?}");
    assert!(errs[2] < 1e-2);
    for w in errs.windows(2) {
        assert!(w[1] <= 0.5 * w[0], "error did not halve: {errs:?}");
    }
}

/// Unweighted Poincaré or Sobolev ratio, computed directly: Euclidean norm of
/// the value, spectral norm (by SVD) of the Jacobian, the same difference
/// stencils, cell-centre sums.
fn unweighted_ratio(f: &dyn Fn(&[f64]) -> Vec<f64>, base: &Cube, depth: u32, p: f64, eps: f64, subtract_mean: bool) -> f64 {
    let m = 1usize << depth;
    let d = base.dim;
    let h = base.side() / m as f64;
    let total = m.pow(d as u32);
    let idx_of = |flat: usize| -> Vec<usize> {
        let mut r = flat;
        let mut idx = vec![0; d];
        for k in (0..d).rev() {
            idx[k] = r % m;
            r /= m;
        }
        idx
    };
    let flat_of = |idx: &[usize]| idx.iter().fold(0, |a, &i| a * m + i);
    let vals: Vec<Vec<f64>> = (0..total)
        .map(|c| {
            let x: Vec<f64> = idx_of(c).iter().enumerate().map(|(k, &i)| base.lower(k) + (i as f64 + 0.5) * h).collect();
            f(&x)
        })
        .collect();
    let n = vals[0].len();
    let mean: Vec<f64> = (0..n).map(|i| vals.iter().map(|v| v[i]).sum::<f64>() / total as f64).collect();
    let (mut num, mut den) = (0.0, 0.0);
    for c in 0..total {
        let idx = idx_of(c);
        let mut jac = Mat::zeros(n, d);
        for i in 0..n {
            for k in 0..d {
                let at = |s: i64| {
                    let mut j = idx.clone();
                    j[k] = (j[k] as i64 + s) as usize;
                    vals[flat_of(&j)][i]
                };
                let g = if idx[k] == 0 {
                    (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * h)
                } else if idx[k] == m - 1 {
                    (3.0 * at(0) - 4.0 * at(-1) + at(-2)) / (2.0 * h)
                } else {
                    (at(1) - at(-1)) / (2.0 * h)
                };
                jac[(i, k)] = g;
            }
        }
        let gn = jac.singular_values().max();
        let dv: f64 = (0..n).map(|i| (vals[c][i] - if subtract_mean { mean[i] } else { 0.0 }).powi(2)).sum::<f64>().sqrt();
        num += dv.powf(p + eps);
        den += gn.powf(p - eps);
    }
    let k = total as f64;
    (num / k).powf(1.0 / (p + eps)) / (base.side() * (den / k).powf(1.0 / (p - eps)))
}

#[test]
fn identity_weight_matches_unweighted_verifier() {
    let base = cube("[-1,1)^2");
    let lat = Lattice::new(base.clone(), 6);
    let field = |x: &[f64]| vec![x[0] * x[1] + x[0].sin(), (2.0 * x[1]).cos()];
    let f = GridFunction::from_fn(&lat, 2, 1, field);
    let w = MatrixWeight::identity(2, 2);
    for (p, eps) in [(2.0, 0.0), (3.0, 0.4), (1.5, 0.2)] {
        let got = poincare_ratio(&w, p, eps, &f).unwrap().ratio;
        let want = unweighted_ratio(&field, &base, 6, p, eps, true);
        assert!((got - want).abs() <= 1e-8 * want, "p={p} eps={eps}: {got} vs {want}");
    }
    let bumped = |x: &[f64]| vec![bump(&[2.0 * x[0], 2.0 * x[1]]), x[0] * bump(&[2.0 * x[0], 2.0 * x[1]])];
    let g = GridFunction::from_fn(&lat, 2, 1, bumped);
    for (p, eps) in [(2.0, 0.0), (2.5, 0.3)] {
        let got = sobolev_ratio(&w, p, eps, &g).unwrap().ratio;
        let want = unweighted_ratio(&bumped, &base, 6, p, eps, false);
        assert!((got - want).abs() <= 1e-8 * want, "sobolev p={p}: {got} vs {want}");
    }
}

#[test]
fn global_sobolev_is_dilation_invariant() {
    let w = MatrixWeight::identity(1, 2);
    let ratio_at = |lambda: f64, box_: &str, depth: u32| {
        let lat = Lattice::new(cube(box_), depth);
        let f = GridFunction::from_fn(&lat, 1, 1, |x| vec![gaussian(&[lambda * x[0], lambda * x[1]])]);
        global_sobolev_ratio(&w, 1.5, &f).unwrap().ratio
    };
    let base = ratio_at(1.0, "[-8,8)^2", 10);
    for lambda in [0.75, 1.5] {
        let r = ratio_at(lambda, "[-8,8)^2", 10);
        assert!((r - base).abs() <= 1e-3 * base, "λ={lambda}: {r} vs {base}");
    }
    let wide = ratio_at(1.0, "[-16,16)^2", 11);
    assert!((wide - base).abs() <= 0.05 * base);
}

#[test]
fn annulus_about_the_mean() {
    let lat = Lattice::new(cube("[-1,1)^2"), 6);
    let u = GridFunction::from_fn(&lat, 1, 1, |x| vec![x[0] + x[1] * x[1]]);
    let w = MatrixWeight::identity(1, 2);
    let ann = Region::annulus(&lat, &[0.0, 0.0], 0.5, 0.25, 1);
    let mean = ann.mean(&u);
    let r = annulus_mean_comparison(&w, 2.0, &u, &[0.0, 0.0], 1.0, &mean, 3.0).unwrap();
    assert!((r.ratio - 1.0 / 3.0).abs() < 1e-12);
    let flat = GridFunction::from_fn(&lat, 1, 1, |_| vec![2.0]);
    assert_eq!(annulus_mean_comparison(&w, 2.0, &flat, &[0.0, 0.0], 1.0, &[5.0], 1.0).unwrap().lhs, 0.0);
    assert_eq!(annulus_poincare(&w, 2.0, &flat, &[0.0, 0.0], 1.0, 1).unwrap().lhs, 0.0);
}

fn random_field(lat: &Lattice, n: usize, coef: &[f64]) -> GridFunction {
    GridFunction::from_fn(lat, n, 1, |x| {
        (0..n)
            .map(|i| {
                let c = &coef[4 * i..4 * i + 4];
                c[0] * (3.0 * x[0] + c[1]).sin() + c[2] * x[x.len() - 1] * x[0] + c[3] * (x[0] - c[1]).powi(2)
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mean_minimises_unweighted_quadratic_deviation(coef in prop::collection::vec(-2.0f64..2.0, 8), shift in prop::collection::vec(-3.0f64..3.0, 2), n in 1usize..3) {
        let lat = Lattice::new(cube("[-1,1)^2"), 5);
        let u = random_field(&lat, n, &coef);
        let w = MatrixWeight::identity(n, 2);
        let r = annulus_mean_comparison(&w, 2.0, &u, &[0.0, 0.0], 1.5, &shift[..n], 1.0).unwrap();
        prop_assert!(r.lhs <= r.rhs * (1.0 + 1e-12) + 1e-300);
    }

    #[test]
    fn ratios_are_homogeneous(coef in prop::collection::vec(-2.0f64..2.0, 8), scale in prop_oneof![-50.0f64..-0.01, 0.01f64..50.0], g in -0.8f64..0.8, p in 1.5f64..3.0) {
        let lat = Lattice::new(cube("[-1,1)^2"), 5);
        let f = random_field(&lat, 2, &coef);
        prop_assume!(!f.is_zero());
        let w = MatrixWeight::power_radial(&sym2(1.0, 0.3, 1.0), &sym2(g, 0.0, -g), 2).unwrap();
        let eps = 0.1 * (p - 1.0);
        let a = poincare_ratio(&w, p, eps, &f).unwrap().ratio;
        let b = poincare_ratio(&w, p, eps, &f.scaled(scale)).unwrap().ratio;
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300));
        let c = annulus_poincare(&w, p, &f, &[0.0, 0.0], 1.0, 1).unwrap().ratio;
        let d = annulus_poincare(&w, p, &f.scaled(scale), &[0.0, 0.0], 1.0, 1).unwrap().ratio;
        prop_assert!((c - d).abs() <= 1e-12 * c.abs().max(1e-300));
    }

    #[test]
    fn sobolev_ratio_is_homogeneous(scale in prop_oneof![-20.0f64..-0.05, 0.05f64..20.0], cx in -0.3f64..0.3, g in -0.8f64..0.8) {
        let lat = Lattice::new(cube("[-1,1)^2"), 5);
        let f = GridFunction::from_fn(&lat, 1, 1, |x| vec![bump(&[1.6 * (x[0] - cx), 1.6 * x[1]])]);
        let w = MatrixWeight::power_radial(&Mat::from_element(1, 1, 1.0), &Mat::from_element(1, 1, g), 2).unwrap();
        let a = sobolev_ratio(&w, 2.0, 0.2, &f).unwrap().ratio;
        let b = sobolev_ratio(&w, 2.0, 0.2, &f.scaled(scale)).unwrap().ratio;
        prop_assert!((a - b).abs() <= 1e-12 * a);
        let ga = global_sobolev_ratio(&w, 1.5, &f).unwrap().ratio;
        let gb = global_sobolev_ratio(&w, 1.5, &f.scaled(scale)).unwrap().ratio;
        prop_assert!((ga - gb).abs() <= 1e-12 * ga);
    }
}
