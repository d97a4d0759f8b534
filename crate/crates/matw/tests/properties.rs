//! Structural invariants of characteristics, sparse families and operators
//! on randomly drawn inputs.

use matw::dyadic::{Cube, CubeFamily};
use matw::grid::{GridFunction, Lattice};
use matw::linalg::Mat;
use matw::operators::{aux_maximal, maximal, riesz};
use matw::sparse::stopping_family;
use matw::weight::{characteristic, MatrixWeight, Method, Quadrature};
use proptest::prelude::*;

fn sym2(a: f64, b: f64, c: f64) -> Mat {
    Mat::from_row_slice(2, 2, &[a, b, b, c])
}

fn weight(d: usize, g1: f64, g2: f64, rho: f64) -> MatrixWeight {
    MatrixWeight::power_radial(&sym2(1.0, rho, 1.0), &sym2(g1, 0.5 * (g1 + g2), g2), d).unwrap()
}

fn field(lat: &Lattice, coef: &[f64]) -> GridFunction {
    GridFunction::from_fn(lat, 2, 1, |x| {
        let s: f64 = x.iter().sum();
        vec![coef[0] * (4.0 * s + coef[1]).sin() + coef[2], coef[3] * (-8.0 * x[0] * x[0]).exp() + coef[4] * s]
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn deeper_families_never_lower_the_characteristic(d in 1usize..3, g1 in -0.7f64..0.7, g2 in -0.7f64..0.7, rho in -0.6f64..0.6, p in 1.5f64..3.0, method in 0usize..3) {
        let w = weight(d, g1, g2, rho);
        let m = [Method::Definition, Method::Reducing, Method::Trace][method];
        let base = Cube::parse(&format!("[-1,1)^{d}")).unwrap();
        let quad = Quadrature::PerCube { refine: 2 };
        let lo = characteristic(&w, p, p, &CubeFamily::new(base.clone(), 2), m, quad).unwrap().value;
        let hi = characteristic(&w, p, p, &CubeFamily::new(base, 3), m, quad).unwrap().value;
        prop_assert!(hi >= lo);
    }

    #[test]
    fn characteristic_is_scale_invariant(g1 in -0.7f64..0.7, g2 in -0.7f64..0.7, c in 0.01f64..100.0) {
        let base = Cube::parse("[-1,1)^2").unwrap();
        let fam = CubeFamily::new(base, 2);
        let a = characteristic(&weight(2, g1, g2, 0.3), 2.0, 3.0, &fam, Method::Definition, Quadrature::PerCube { refine: 2 }).unwrap().value;
        let scaled = MatrixWeight::power_radial(&(sym2(1.0, 0.3, 1.0) * c), &sym2(g1, 0.5 * (g1 + g2), g2), 2).unwrap();
        let b = characteristic(&scaled, 2.0, 3.0, &fam, Method::Definition, Quadrature::PerCube { refine: 2 }).unwrap().value;
        prop_assert!((a - b).abs() <= 1e-9 * a);
    }

    #[test]
    fn sparse_family_invariants(d in 1usize..3, g1 in -0.7f64..0.7, g2 in -0.7f64..0.7, coef in prop::collection::vec(-2.0f64..2.0, 5), p in 1.5f64..3.0) {
        let lat = Lattice::new(Cube::parse(&format!("[-1,1)^{d}")).unwrap(), if d == 1 { 7 } else { 4 });
        let f = field(&lat, &coef);
        prop_assume!(!f.is_zero());
        let fam = stopping_family(&weight(d, g1, g2, 0.2), &f, p, None).unwrap();
        prop_assert_eq!(fam.report.violations(), 0);
        prop_assert!(fam.report.min_core_fraction >= 0.5);
        // pairwise disjoint within a level, and across levels no cube repeats
        let mut seen = std::collections::HashSet::new();
        for level in &fam.levels {
            for (i, a) in level.cubes.iter().enumerate() {
                prop_assert!(seen.insert(a.clone()));
                for b in &level.cubes[i + 1..] {
                    prop_assert!(!a.intersects(b));
                }
            }
        }
        // every cube below the first level sits strictly inside one of the previous level
        for pair in fam.levels.windows(2) {
            for c in &pair[1].cubes {
                prop_assert!(pair[0].cubes.iter().any(|q| q.contains(c) && q != c));
            }
        }
        // core cells lie in their cube and are disjoint
        let mut owner = std::collections::HashSet::new();
        for core in &fam.cores {
            for &cell in &core.cells {
                prop_assert!(core.cube.contains_point(&lat.center(cell)));
                prop_assert!(owner.insert(cell));
            }
        }
    }

    #[test]
    fn maximal_operators_are_sublinear_and_homogeneous(g1 in -0.6f64..0.6, g2 in -0.6f64..0.6, a in prop::collection::vec(-2.0f64..2.0, 5), b in prop::collection::vec(-2.0f64..2.0, 5), c in -5.0f64..5.0, alpha in 0.0f64..1.0) {
        let lat = Lattice::new(Cube::parse("[-1,1)^2").unwrap(), 4);
        let w = weight(2, g1, g2, 0.4);
        let (f, g) = (field(&lat, &a), field(&lat, &b));
        let q = 1.0 / (0.5 - alpha / 2.0);
        let mf = maximal(&w, alpha, q, &f, 4).unwrap().values;
        let mg = maximal(&w, alpha, q, &g, 4).unwrap().values;
        let mfg = maximal(&w, alpha, q, &f.add(&g), 4).unwrap().values;
        let mcf = maximal(&w, alpha, q, &f.scaled(c), 4).unwrap().values;
        for i in 0..mf.values.len() {
            prop_assert!(mfg.values[i] <= (mf.values[i] + mg.values[i]) * (1.0 + 1e-10) + 1e-12);
            prop_assert!((mcf.values[i] - c.abs() * mf.values[i]).abs() <= 1e-12 * mf.values[i].max(1e-300) * c.abs().max(1.0));
        }
        let af = aux_maximal(&w, alpha, 2.0, q, &f, 4).unwrap().values;
        let ag = aux_maximal(&w, alpha, 2.0, q, &g, 4).unwrap().values;
        let afg = aux_maximal(&w, alpha, 2.0, q, &f.add(&g), 4).unwrap().values;
        let acf = aux_maximal(&w, alpha, 2.0, q, &f.scaled(c), 4).unwrap().values;
        for i in 0..af.values.len() {
            prop_assert!(afg.values[i] <= (af.values[i] + ag.values[i]) * (1.0 + 1e-10) + 1e-12);
            prop_assert!((acf.values[i] - c.abs() * af.values[i]).abs() <= 1e-12 * af.values[i].max(1e-300) * c.abs().max(1.0));
        }
    }

    #[test]
    fn riesz_commutes_with_lattice_shifts(alpha in 0.2f64..1.5, sx in 0usize..6, sy in 0usize..6, seed in prop::collection::vec(-1.0f64..1.0, 64)) {
        let lat = Lattice::new(Cube::parse("[0,1)^2").unwrap(), 5);
        let m = lat.per_axis();
        // an 8×8 block of values placed at the origin, then shifted by (sx, sy)
        let place = |dx: usize, dy: usize| {
            let mut f = GridFunction::zeros(&lat, 1, 1);
            for i in 0..8 {
                for j in 0..8 {
                    f.values[lat.flat(&[i + dx, j + dy])] = seed[i * 8 + j];
                }
            }
            f
        };
        let a = riesz(alpha, &place(0, 0)).unwrap();
        let b = riesz(alpha, &place(sx, sy)).unwrap();
        let scale = a.values.iter().fold(0.0f64, |s, v| s.max(v.abs()));
        for i in 0..m - sx {
            for j in 0..m - sy {
                let x = a.values[lat.flat(&[i, j])];
                let y = b.values[lat.flat(&[i + sx, j + sy])];
                prop_assert!((x - y).abs() <= 1e-11 * scale, "({i},{j}): {x} vs {y}");
            }
        }
    }
}
