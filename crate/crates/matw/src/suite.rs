//! The acceptance battery: fourteen numbered checks, each reduced to named
//! metrics with explicit bounds.

use std::fmt::Write as _;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::analysis;
use crate::dyadic::{Cube, CubeFamily};
use crate::error::{MatwError, Result};
use crate::grid::{GridFunction, Lattice};
use crate::linalg::Mat;
use crate::operators;
use crate::pde::{self, Domain, EllipticProblem, Mesh, MeyersOptions, Sampling, Source};
use crate::scalar;
use crate::sparse;
use crate::weight::{self, Gammas, MatrixWeight, Quadrature};

/// One measured quantity and the bound it must meet.
#[derive(Clone, Debug, Serialize)]
pub struct Metric {
    pub name: String,
    pub value: f64,
    pub bound: String,
    pub ok: bool,
}

impl Metric {
    fn at_most(name: &str, value: f64, bound: f64) -> Metric {
        Metric { name: name.into(), value, bound: format!("<= {bound}"), ok: value <= bound }
    }

    fn below(name: &str, value: f64, bound: f64) -> Metric {
        Metric { name: name.into(), value, bound: format!("< {bound}"), ok: value < bound }
    }

    fn above(name: &str, value: f64, bound: f64) -> Metric {
        Metric { name: name.into(), value, bound: format!("> {bound}"), ok: value > bound }
    }

    fn at_least(name: &str, value: f64, bound: f64) -> Metric {
        Metric { name: name.into(), value, bound: format!(">= {bound}"), ok: value >= bound }
    }

    fn within(name: &str, value: f64, lo: f64, hi: f64) -> Metric {
        Metric { name: name.into(), value, bound: format!("in [{lo}, {hi}]"), ok: value >= lo && value <= hi }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Outcome {
    pub id: u32,
    pub name: String,
    pub metrics: Vec<Metric>,
    pub error: Option<String>,
    pub seconds: f64,
    pub time_limit: Option<f64>,
}

impl Outcome {
    pub fn pass(&self) -> bool {
        self.error.is_none()
            && self.metrics.iter().all(|m| m.ok)
            && self.time_limit.is_none_or(|t| self.seconds < t)
    }

    /// One human-readable line.
    pub fn line(&self) -> String {
        let mut s = format!("[{}] {:>2} {}", if self.pass() { "PASS" } else { "FAIL" }, self.id, self.name);
        if let Some(e) = &self.error {
            let _ = write!(s, ": error: {e}");
        }
        let parts: Vec<String> = self.metrics.iter().map(|m| format!("{}={:.4e} ({})", m.name, m.value, m.bound)).collect();
        if !parts.is_empty() {
            let _ = write!(s, ": {}", parts.join(", "));
        }
        match self.time_limit {
            Some(t) => {
                let _ = write!(s, " [{:.1} s, limit {t} s]", self.seconds);
            }
            None => {
                let _ = write!(s, " [{:.1} s]", self.seconds);
            }
        }
        s
    }
}

pub const CRITERIA: [(u32, &str); 14] = [
    (1, "identity-weight exactness"),
    (2, "scalar oracle equivalence"),
    (3, "power-weight A2 dichotomy"),
    (4, "duality of A_pq characteristics"),
    (5, "sparse family invariants"),
    (6, "heavy-function integral bound"),
    (7, "weak-type bound of the auxiliary maximal operator"),
    (8, "Riesz potential closed form"),
    (9, "Poincare ratios"),
    (10, "elliptic convergence"),
    (11, "Caccioppoli weight independence"),
    (12, "Meyers gain"),
    (13, "p-Laplace benchmarks"),
    (14, "determinism"),
];

/// State shared by the criteria of one run.
pub struct Context {
    pub seed: u64,
    battery: Vec<MatrixWeight>,
    battery_chars: OnceLock<Vec<f64>>,
}

fn sym2(a: f64, b: f64, c: f64) -> Mat {
    Mat::from_row_slice(2, 2, &[a, b, b, c])
}

/// `a_ij |x|^{γ_ij}` with `a = [[1,ρ],[ρ,1]]` and `γ_12` the mean of the
/// diagonal exponents.
pub fn blm_weight(rho: f64, g1: f64, g2: f64) -> MatrixWeight {
    MatrixWeight::power_radial(&sym2(1.0, rho, 1.0), &sym2(g1, 0.5 * (g1 + g2), g2), 2)
        .expect("symmetric by construction")
        .with_id(format!("blm(rho={rho},g={g1},{g2})"))
}

/// Matrix `A_2` power weights on `R^2` of increasing severity.
pub fn a2_battery() -> Vec<MatrixWeight> {
    vec![
        MatrixWeight::identity(2, 2).with_id("identity"),
        blm_weight(0.0, 0.5, -0.5),
        blm_weight(0.5, 1.0, -1.0),
        blm_weight(0.8, 1.5, 0.0),
        blm_weight(0.3, -1.5, 1.5),
        blm_weight(0.6, 1.8, -1.2),
        blm_weight(0.0, -1.8, 1.0),
        blm_weight(0.9, 1.2, 1.2),
    ]
}

fn square() -> Cube {
    Cube::parse("[-1,1)^2").expect("valid cube")
}

fn interval() -> Cube {
    Cube::parse("[-1,1)").expect("valid cube")
}

impl Context {
    pub fn new(seed: u64) -> Context {
        Context { seed, battery: a2_battery(), battery_chars: OnceLock::new() }
    }

    fn rng(&self, id: u32) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ u64::from(id))
    }

    /// Truncated `A_2` characteristics of the battery on `[-1,1)^2`, depth 5.
    fn battery_chars(&self) -> Result<&[f64]> {
        if let Some(c) = self.battery_chars.get() {
            return Ok(c);
        }
        let fam = CubeFamily::new(square(), 5);
        let vals: Vec<f64> = self
            .battery
            .iter()
            .map(|w| weight::ap_characteristic(w, 2.0, &fam, Quadrature::PerCube { refine: 3 }).map(|c| c.value))
            .collect::<Result<_>>()?;
        Ok(self.battery_chars.get_or_init(|| vals))
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    sxy / sxx
}

fn max_of(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(f64::NEG_INFINITY, f64::max)
}

fn min_of(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(f64::INFINITY, f64::min)
}

fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn c01_identity() -> Result<Vec<Metric>> {
    let mut worst = 0.0f64;
    for d in [1usize, 2] {
        for n in [1usize, 2, 3] {
            let w = MatrixWeight::identity(n, d);
            for k in 0..=6u32 {
                let fam = CubeFamily::new(Cube::unit(d), k);
                let quad = Quadrature::default_for(d);
                for p in [1.5, 2.0, 3.0] {
                    worst = worst.max((weight::ap_characteristic(&w, p, &fam, quad)?.value - 1.0).abs());
                    worst = worst.max((weight::apq_characteristic(&w, p, p + 1.0, &fam, quad)?.value - 1.0).abs());
                }
                worst = worst.max((weight::a2_trace(&w, &fam, quad)?.value - 1.0).abs());
            }
        }
    }
    Ok(vec![Metric::at_most("max_abs_deviation", worst, 1e-8)])
}

fn c02_scalar_oracle() -> Result<Vec<Metric>> {
    let cases: [(usize, f64, f64); 5] = [(1, 2.0, 0.5), (1, 1.0, -0.5), (1, 0.7, 0.3), (2, 1.0, 1.0), (2, 1.5, -0.8)];
    let (mut char_err, mut max_err, mut poin_err) = (0.0f64, 0.0f64, 0.0f64);
    for (d, c, g) in cases {
        let w = MatrixWeight::power_radial(&Mat::from_element(1, 1, c), &Mat::from_element(1, 1, g), d)?;
        let ws = move |x: &[f64]| c * x.iter().map(|v| v * v).sum::<f64>().sqrt().powf(g);
        let base = if d == 1 { interval() } else { square() };
        let (k, refine) = if d == 1 { (7, 4) } else { (4, 3) };
        let fam = CubeFamily::new(base.clone(), k);
        let quad = Quadrature::PerCube { refine };
        let (p, q) = if d == 1 { (1.5, 3.0) } else { (1.5, 6.0) };
        let pairs = [
            (weight::ap_characteristic(&w, 2.0, &fam, quad)?.value, scalar::apq(&ws, 2.0, 2.0, &base, k, refine)),
            (weight::apq_characteristic(&w, p, q, &fam, quad)?.value, scalar::apq(&ws, p, q, &base, k, refine)),
            (weight::a2_trace(&w, &fam, quad)?.value, scalar::a2(&ws, &base, k, refine)),
        ];
        for (a, b) in pairs {
            char_err = char_err.max(rel_diff(a, b));
        }
        let depth = if d == 1 { 10 } else { 6 };
        let lat = Lattice::new(base.clone(), depth);
        let f = |x: &[f64]| (3.0 * x[0]).cos() + x.iter().map(|v| v * v).sum::<f64>();
        let gf = GridFunction::from_fn(&lat, 1, 1, |x| vec![f(x)]);
        for (alpha, q) in [(0.0, 2.0), (0.5, 4.0)] {
            let m = operators::maximal(&w, alpha, q, &gf, depth)?;
            let s = scalar::maximal(&ws, alpha, q, &f, &base, depth, depth);
            max_err = max_err.max(max_of(m.values.values.iter().zip(&s).map(|(a, b)| rel_diff(*a, *b))));
        }
        for (p, eps) in [(2.0, 0.0), (2.0, 0.3), (3.0, 0.5)] {
            let a = analysis::poincare_ratio(&w, p, eps, &gf)?.ratio;
            let b = scalar::poincare_ratio(&ws, p, eps, &f, &base, depth);
            poin_err = poin_err.max(rel_diff(a, b));
        }
    }
    Ok(vec![
        Metric::at_most("characteristic_rel_diff", char_err, 1e-6),
        Metric::at_most("maximal_rel_diff", max_err, 1e-6),
        Metric::at_most("poincare_rel_diff", poin_err, 1e-6),
    ])
}

fn c03_dichotomy() -> Result<Vec<Metric>> {
    let grid = [-3.0, -1.5, 0.0, 1.5, 3.0];
    let a = sym2(1.0, 0.5, 1.0);
    let quad = Quadrature::Lattice { refine: 1 };
    let mut cases = Vec::new();
    for &g1 in &grid {
        for &g2 in &grid {
            cases.push((g1, g2));
        }
    }
    let results: Vec<(bool, f64)> = cases
        .iter()
        .map(|&(g1, g2)| {
            let gamma = sym2(g1, 0.5 * (g1 + g2), g2);
            let w = MatrixWeight::power_radial(&a, &gamma, 2)?;
            let lo = weight::a2_trace(&w, &CubeFamily::new(square(), 6), quad)?.value;
            let hi = weight::a2_trace(&w, &CubeFamily::new(square(), 8), quad)?.value;
            Ok((weight::blm_is_a2(&a, &Gammas::Radial(gamma), 2), hi / lo))
        })
        .collect::<Result<_>>()?;
    let inside: Vec<f64> = results.iter().filter(|r| r.0).map(|r| r.1).collect();
    let outside: Vec<f64> = results.iter().filter(|r| !r.0).map(|r| r.1).collect();
    Ok(vec![
        Metric::at_least("a2_cases", inside.len() as f64, 1.0),
        Metric::at_least("non_a2_cases", outside.len() as f64, 1.0),
        Metric::below("a2_max_growth", max_of(inside), 1.5),
        Metric::above("non_a2_min_growth", min_of(outside), 2.0),
    ])
}

fn c04_duality() -> Result<Vec<Metric>> {
    let (p, q) = (2.0, 4.0);
    let target = weight::conjugate(p) / q;
    let mut weights = Vec::new();
    for (g1, g2) in [(-0.8, 0.0), (1.5, 0.5), (-0.6, 1.2), (0.9, -0.9), (1.8, 1.8)] {
        weights.push(MatrixWeight::power_radial(&sym2(1.0, 0.0, 2.0), &sym2(g1, 0.0, g2), 1)?);
    }
    for (rho, g1, g2) in [(0.5, -0.8, 0.6), (0.3, 1.5, -0.5), (0.7, 1.0, 1.6), (0.4, -0.7, -0.2), (0.6, 1.7, -0.6)] {
        weights.push(MatrixWeight::power_radial(&sym2(1.0, rho, 1.0), &sym2(g1, 0.5 * (g1 + g2), g2), 1)?);
    }
    let fam = CubeFamily::new(interval(), 8);
    let quad = Quadrature::PerCube { refine: 4 };
    let mut ratios = Vec::new();
    for w in &weights {
        let primal = weight::apq_characteristic(w, p, q, &fam, quad)?.value;
        let dual_w = weight::dual_weight(w, p, q)?;
        let dual = weight::apq_characteristic(&dual_w, weight::conjugate(q), weight::conjugate(p), &fam, quad)?.value;
        ratios.push(dual.ln() / primal.ln());
    }
    Ok(vec![
        Metric::at_least("min_log_ratio", min_of(ratios.iter().copied()), 0.5 * target),
        Metric::at_most("max_log_ratio", max_of(ratios.iter().copied()), 2.0 * target),
    ])
}

fn random_instance(rng: &mut ChaCha8Rng) -> Result<(MatrixWeight, GridFunction, f64)> {
    let d: usize = rng.random_range(1..=2);
    let n: usize = rng.random_range(1..=2);
    let df = d as f64;
    let gam: Vec<f64> = (0..n).map(|_| rng.random_range(-0.8 * df..0.8 * df)).collect();
    let w = if n == 1 {
        MatrixWeight::power_radial(&Mat::from_element(1, 1, rng.random_range(0.5..2.0)), &Mat::from_element(1, 1, gam[0]), d)?
    } else {
        let rho = rng.random_range(-0.7..0.7);
        MatrixWeight::power_radial(&sym2(1.0, rho, 1.0), &sym2(gam[0], 0.5 * (gam[0] + gam[1]), gam[1]), d)?
    };
    let bumps: Vec<(Vec<f64>, Vec<f64>, f64)> = (0..3)
        .map(|_| {
            let c: Vec<f64> = (0..d).map(|_| rng.random_range(-0.8..0.8)).collect();
            let amp: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            (c, amp, rng.random_range(0.05..0.4))
        })
        .collect();
    let p = [1.5, 2.0, 3.0][rng.random_range(0..3usize)];
    let lat = Lattice::new(if d == 1 { interval() } else { square() }, if d == 1 { 8 } else { 5 });
    let f = GridFunction::from_fn(&lat, n, 1, |x| {
        let mut v = vec![0.0; n];
        for (c, amp, s) in &bumps {
            let r2: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
            let e = (-r2 / (s * s)).exp();
            v.iter_mut().zip(amp).for_each(|(o, a)| *o += a * e);
        }
        v
    });
    Ok((w, f, p))
}

fn c05_sparse(ctx: &Context) -> Result<Vec<Metric>> {
    let mut rng = ctx.rng(5);
    let instances: Vec<_> = (0..20).map(|_| random_instance(&mut rng)).collect::<Result<_>>()?;
    let reports: Vec<(usize, f64)> = instances
        .par_iter()
        .map(|(w, f, p)| sparse::stopping_family(w, f, *p, None).map(|s| (s.report.violations(), s.report.min_core_fraction)))
        .collect::<Result<_>>()?;
    Ok(vec![
        Metric::at_most("violations", reports.iter().map(|r| r.0 as f64).sum(), 0.0),
        Metric::at_least("min_core_fraction", min_of(reports.iter().map(|r| r.1)), 0.5),
    ])
}

fn c06_heavy(ctx: &Context) -> Result<Vec<Metric>> {
    let chars = ctx.battery_chars()?;
    let ratios: Vec<f64> = ctx
        .battery
        .iter()
        .zip(chars)
        .map(|(w, &c)| {
            let hf = sparse::heavy_function(w, &square(), 2.0, 2.0, 5, 7, Quadrature::PerCube { refine: 3 })?;
            Ok(sparse::heavy_integral_check(&hf, c, 0.0).ratio)
        })
        .collect::<Result<_>>()?;
    let spread = max_of(ratios.iter().copied()) / min_of(ratios.iter().copied());
    Ok(vec![Metric::below("ratio_spread", spread, 50.0)])
}

/// Vector fields on `[-1,1)^2` used as operator and inequality inputs.
fn test_fields(lat: &Lattice) -> Vec<GridFunction> {
    vec![
        GridFunction::from_fn(lat, 2, 1, |x| vec![x[0], x[1]]),
        GridFunction::from_fn(lat, 2, 1, |x| vec![(2.0 * x[0]).sin(), (3.0 * x[1]).cos() * x[0]]),
        GridFunction::from_fn(lat, 2, 1, |x| vec![(-(x[0] * x[0] + x[1] * x[1]) * 4.0).exp(), x[0] * x[1]]),
        GridFunction::from_fn(lat, 2, 1, |x| {
            let pi = std::f64::consts::PI;
            vec![x[0] * x[0] - x[1], (pi * x[0]).sin() * (pi * x[1]).sin()]
        }),
    ]
}

fn c07_weak_type(ctx: &Context) -> Result<Vec<Metric>> {
    let lat = Lattice::new(square(), 6);
    let mut inputs = test_fields(&lat);
    inputs.push(GridFunction::from_fn(&lat, 2, 1, |x| if x[0] > 0.25 && x[1] < -0.25 { vec![1.0, 0.0] } else { vec![0.0, 0.0] }));
    let mut worst = 0.0f64;
    let mut constant = 0.0;
    for w in &ctx.battery {
        for f in &inputs {
            let mf = operators::aux_maximal(w, 0.0, 2.0, 2.0, f, lat.depth)?;
            let lambdas = operators::lambda_grid(&mf.values.values, 20);
            let rep = operators::weak_type_check(w, 0.0, 2.0, 2.0, f, lat.depth, &lambdas)?;
            worst = worst.max(rep.max_ratio);
            constant = rep.constant;
        }
    }
    Ok(vec![
        Metric::at_most("constant", constant, operators::weak_type_constant(2, 2.0)),
        Metric::at_most("max_ratio_to_constant", worst, 1.0),
    ])
}

fn riesz_indicator(depth: u32) -> Result<GridFunction> {
    let lat = Lattice::new(Cube::unit(1), depth);
    operators::riesz(0.5, &GridFunction::from_fn(&lat, 1, 1, |_| vec![1.0]))
}

fn riesz_exact(x: f64) -> f64 {
    2.0 * (x.sqrt() + (1.0 - x).sqrt())
}

/// `∫_0^1 |I(x) - g(x)|` with `I` the linear interpolant of the cell-centre
/// values, held constant on the two half cells at the ends.
fn interpolant_l1_error(values: &[f64]) -> f64 {
    let m = values.len();
    let h = 1.0 / m as f64;
    let (xs, ws) = crate::conv::gauss_legendre(16);
    let mut total = 0.0;
    for i in 0..m - 1 {
        let (a, b) = ((i as f64 + 0.5) * h, (i as f64 + 1.5) * h);
        for (x, w) in xs.iter().zip(&ws) {
            let t = 0.5 * (x + 1.0);
            let y = a + t * (b - a);
            let lin = values[i] + t * (values[i + 1] - values[i]);
            total += 0.5 * h * w * (lin - riesz_exact(y)).abs();
        }
    }
    // End half cells via x = s², which removes the square-root singularity.
    let half = (0.5 * h).sqrt();
    for (x, w) in xs.iter().zip(&ws) {
        let s = 0.5 * half * (x + 1.0);
        let jac = 0.5 * half * w * 2.0 * s;
        total += jac * (values[0] - riesz_exact(s * s)).abs();
        total += jac * (values[m - 1] - riesz_exact(1.0 - s * s)).abs();
    }
    total
}

fn c08_riesz() -> Result<Vec<Metric>> {
    let fine = riesz_indicator(12)?;
    let lat = fine.lattice();
    let err = max_of((0..lat.len()).map(|c| (fine.values[c] - riesz_exact(lat.center(c)[0])).abs()));
    let depths = [8u32, 9, 10, 11, 12];
    let mut hs = Vec::new();
    let mut errs = Vec::new();
    for &k in &depths {
        let out = if k == 12 { fine.clone() } else { riesz_indicator(k)? };
        hs.push(0.5f64.powi(k as i32));
        errs.push(interpolant_l1_error(&out.values));
    }
    Ok(vec![
        Metric::at_most("max_error_at_4096", err, 1e-4),
        Metric::at_least("l1_order", loglog_slope(&hs, &errs), 1.0),
    ])
}

fn c09_poincare(ctx: &Context) -> Result<Vec<Metric>> {
    let lat = Lattice::new(Cube::unit(1), 10);
    let f = GridFunction::from_fn(&lat, 1, 1, |x| vec![x[0]]);
    let r = analysis::poincare_ratio(&MatrixWeight::identity(1, 1), 2.0, 0.0, &f)?.ratio;
    let chars = ctx.battery_chars()?;
    let lat2 = Lattice::new(square(), 6);
    let fields = test_fields(&lat2);
    let ratios: Vec<f64> = ctx
        .battery
        .iter()
        .zip(chars)
        .map(|(w, &c)| {
            let eps = analysis::default_eps(2.0, c, analysis::EPS_CONSTANT);
            let mut best = 0.0f64;
            for g in &fields {
                best = best.max(analysis::poincare_ratio(w, 2.0, eps, g)?.ratio);
            }
            Ok(best)
        })
        .collect::<Result<_>>()?;
    Ok(vec![
        Metric::at_most("unweighted_error", (r - 1.0 / 12f64.sqrt()).abs(), 1e-4),
        Metric::below("max_weighted_ratio", max_of(ratios.iter().copied()), f64::INFINITY),
        Metric::at_most("slope_vs_a2", loglog_slope(chars, &ratios), 3.5),
    ])
}

fn quartic(x: &[f64]) -> f64 {
    x[0].powi(4) - 6.0 * x[0] * x[0] * x[1] * x[1] + x[1].powi(4)
}

fn c10_convergence(ctx: &Context) -> Result<(Vec<Metric>, f64)> {
    let mut slowest = 0.0f64;
    let mut timed = |prob: &EllipticProblem| -> Result<pde::DiscreteSolution> {
        let t = Instant::now();
        let sol = pde::solve_linear(prob)?;
        slowest = slowest.max(t.elapsed().as_secs_f64());
        Ok(sol)
    };
    let (mut hs, mut e_harm, mut e_man) = (Vec::new(), Vec::new(), Vec::new());
    let a = sym2(2.0, 0.5, 1.0);
    let g = sym2(0.4, 0.2, 0.3);
    let w = MatrixWeight::power_radial(&a, &g, 2)?;
    let exact = |x: &[f64]| vec![(2.0 * x[0]).sin() * x[1], x[0] * x[0] + x[1].cos()];
    for depth in [4u32, 5, 6] {
        let mesh = Mesh::new(square(), depth);
        hs.push(mesh.h());
        let prob = EllipticProblem::new(mesh, MatrixWeight::identity(1, 2)).with_boundary(|x| vec![quartic(x)]);
        e_harm.push(timed(&prob)?.max_error(&|x| vec![quartic(x)]));
        let wc = w.clone();
        let source = Source::Function(std::sync::Arc::new(move |x: &[f64]| {
            let m = wc.evaluate(x).expect("finite away from the origin");
            let du = [2.0 * (2.0 * x[0]).cos() * x[1], (2.0 * x[0]).sin(), 2.0 * x[0], -x[1].sin()];
            let mut f = vec![0.0; 4];
            for i in 0..2 {
                for k in 0..2 {
                    f[i * 2 + k] = -(0..2).map(|j| m[(i, j)] * du[j * 2 + k]).sum::<f64>();
                }
            }
            f
        }));
        let mut prob = EllipticProblem::new(Mesh::new(Cube::unit(2), depth), w.clone()).with_boundary(exact).with_source(source);
        prob.sampling = Sampling::Tensor2;
        e_man.push(timed(&prob)?.max_error(&exact));
    }
    let root = MatrixWeight::power_radial(&Mat::from_element(1, 1, 1.0), &Mat::from_element(1, 1, 0.5), 1)?;
    let mut prob = EllipticProblem::new(Mesh::new(Cube::unit(1), 10), root).with_boundary(|x| vec![x[0]]);
    prob.sampling = Sampling::Harmonic;
    let sqrt_err = timed(&prob)?.max_error(&|x| vec![x[0].sqrt()]);
    let big = EllipticProblem::new(Mesh::new(square(), 8), ctx.battery[5].clone()).with_boundary(boundary_data);
    timed(&big)?;
    Ok((
        vec![
            Metric::within("harmonic_order", loglog_slope(&hs, &e_harm), 1.7, 2.3),
            Metric::within("manufactured_order", loglog_slope(&hs, &e_man), 1.7, 2.3),
            Metric::at_most("sqrt_error", sqrt_err, 1e-3),
        ],
        slowest,
    ))
}

/// Dirichlet data for the solution battery.
fn boundary_data(x: &[f64]) -> Vec<f64> {
    vec![x[0] + 0.5 * x[1] * x[1], x[0] * x[1] - (2.0 * x[1]).sin()]
}

fn battery_problem(w: &MatrixWeight, depth: u32, p: f64) -> EllipticProblem {
    let mut prob = EllipticProblem::new(Mesh::new(square(), depth), w.clone()).with_boundary(boundary_data);
    prob.p = p;
    prob
}

fn solve(prob: &EllipticProblem) -> Result<pde::DiscreteSolution> {
    if prob.p == 2.0 {
        pde::solve_linear(prob)
    } else {
        pde::solve_plaplace(prob)
    }
}

const CACCIOPPOLI_BALLS: [([f64; 2], f64); 3] = [([0.0, 0.0], 0.5), ([0.3, -0.2], 0.4), ([-0.4, 0.4], 0.3)];

fn c11_caccioppoli(ctx: &Context) -> Result<Vec<Metric>> {
    let chars = ctx.battery_chars()?;
    let ratios: Vec<f64> = ctx
        .battery
        .iter()
        .map(|w| {
            let prob = battery_problem(w, 6, 2.0);
            let sol = solve(&prob)?;
            let cf = pde::CellFields::new(&sol, &prob)?;
            let mut best = 0.0f64;
            for (c, r) in CACCIOPPOLI_BALLS {
                best = best.max(pde::caccioppoli_on(&cf, &c, r)?.ratio);
            }
            Ok(best)
        })
        .collect::<Result<_>>()?;
    Ok(vec![Metric::within("slope_vs_a2", loglog_slope(chars, &ratios), -0.5, 0.5)])
}

fn meyers_pair(w: &MatrixWeight, depth: u32, p: f64) -> Result<(f64, f64, bool)> {
    let mut q = [0.0; 2];
    let mut monotone = true;
    for (i, k) in [depth, depth + 1].into_iter().enumerate() {
        let prob = battery_problem(w, k, p);
        let sol = solve(&prob)?;
        monotone &= sol.energy_history.windows(2).all(|e| e[1] <= e[0]);
        let cf = pde::CellFields::new(&sol, &prob)?;
        q[i] = pde::meyers_on(&cf, &[0.0, 0.0], 0.4, &MeyersOptions::default())?.q_max;
    }
    Ok((q[0], q[1], monotone))
}

fn c12_meyers(ctx: &Context) -> Result<Vec<Metric>> {
    let mut gain = f64::INFINITY;
    let mut drift = 0.0f64;
    for w in ctx.battery.iter().skip(1) {
        let (a, b, _) = meyers_pair(w, 6, 2.0)?;
        gain = gain.min(a.min(b) - 2.0);
        drift = drift.max(rel_diff(a, b));
    }
    let mut nl_gain = f64::INFINITY;
    for w in [&ctx.battery[2], &ctx.battery[5]] {
        let (a, b, _) = meyers_pair(w, 5, 3.0)?;
        nl_gain = nl_gain.min(a.min(b) - 3.0);
        drift = drift.max(rel_diff(a, b));
    }
    Ok(vec![
        Metric::above("linear_min_gain_over_2", gain, 0.0),
        Metric::above("nonlinear_min_gain_over_p", nl_gain, 0.0),
        Metric::at_most("max_refinement_drift", drift, 0.1),
    ])
}

fn c13_plaplace() -> Result<Vec<Metric>> {
    let mut monotone = true;
    let mut affine_err = 0.0f64;
    for (p, w) in [(4.0, MatrixWeight::identity(1, 1)), (3.0, MatrixWeight::constant(&Mat::from_element(1, 1, 2.5), 1)?)] {
        let mut prob = EllipticProblem::new(Mesh::new(Cube::unit(1), 6), w).with_boundary(|x| vec![1.0 - 2.0 * x[0]]);
        prob.p = p;
        let sol = pde::solve_plaplace(&prob)?;
        monotone &= sol.energy_history.windows(2).all(|e| e[1] <= e[0]);
        affine_err = affine_err.max(sol.max_error(&|x| vec![1.0 - 2.0 * x[0]]));
    }
    let w = MatrixWeight::constant(&sym2(2.0, 0.5, 1.0), 2)?;
    let mut prob = EllipticProblem::new(Mesh::new(square(), 5), w).with_boundary(|x| vec![x[0] - x[1], 2.0 * x[0] + 0.5]);
    prob.p = 3.0;
    let sol = pde::solve_plaplace(&prob)?;
    monotone &= sol.energy_history.windows(2).all(|e| e[1] <= e[0]);
    affine_err = affine_err.max(sol.max_error(&|x| vec![x[0] - x[1], 2.0 * x[0] + 0.5]));

    let p = 4.0;
    let exact = move |x: &[f64]| vec![(x[0] * x[0] + x[1] * x[1]).sqrt().powf((p - 2.0) / (p - 1.0))];
    let mut prob = EllipticProblem::new(Mesh::new(square(), 8), MatrixWeight::identity(1, 2)).with_boundary(exact);
    prob.p = p;
    prob.domain = Domain::Annulus { center: vec![0.0, 0.0], r_in: 0.25, r_out: 1.0 };
    let sol = pde::solve_plaplace(&prob)?;
    monotone &= sol.energy_history.windows(2).all(|e| e[1] <= e[0]);
    let radial_err = sol.max_error(&exact);
    Ok(vec![
        Metric::at_most("affine_error", affine_err, 1e-6),
        Metric::at_most("radial_error", radial_err, 1e-2),
        Metric::at_least("energy_monotone", if monotone { 1.0 } else { 0.0 }, 1.0),
    ])
}

fn time_limit(id: u32) -> Option<f64> {
    match id {
        1 => Some(10.0),
        2 => Some(60.0),
        3 => Some(300.0),
        10 => Some(120.0),
        _ => None,
    }
}

/// Runs criterion `id` (1 to 13).
pub fn run_criterion(ctx: &Context, id: u32) -> Outcome {
    let name = CRITERIA.iter().find(|c| c.0 == id).map_or("unknown", |c| c.1).to_string();
    let t = Instant::now();
    let mut limit = time_limit(id);
    let res: Result<Vec<Metric>> = match id {
        1 => c01_identity(),
        2 => c02_scalar_oracle(),
        3 => c03_dichotomy(),
        4 => c04_duality(),
        5 => c05_sparse(ctx),
        6 => c06_heavy(ctx),
        7 => c07_weak_type(ctx),
        8 => c08_riesz(),
        9 => c09_poincare(ctx),
        10 => c10_convergence(ctx).map(|(m, slowest)| {
            // The limit applies to each solve, not to the whole study.
            limit = limit.map(|l| if slowest < l { f64::INFINITY } else { l });
            m
        }),
        11 => c11_caccioppoli(ctx),
        12 => c12_meyers(ctx),
        13 => c13_plaplace(),
        _ => Err(MatwError::InvalidInput(format!("no criterion {id}"))),
    };
    let seconds = t.elapsed().as_secs_f64();
    let (metrics, error) = match res {
        Ok(m) => (m, None),
        Err(e) => (Vec::new(), Some(e.to_string())),
    };
    Outcome { id, name, metrics, error, seconds, time_limit: limit.filter(|l| l.is_finite()) }
}

/// `id,name,metric,value,bound,ok` rows; timings are left out so that
/// reruns compare byte for byte.
pub fn to_csv(outcomes: &[Outcome]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["id", "criterion", "metric", "value", "bound", "ok"]).expect("in-memory write");
    for o in outcomes {
        if let Some(e) = &o.error {
            w.write_record([o.id.to_string(), o.name.clone(), "error".into(), e.clone(), String::new(), "false".into()])
                .expect("in-memory write");
        }
        for m in &o.metrics {
            w.write_record([o.id.to_string(), o.name.clone(), m.name.clone(), format!("{}", m.value), m.bound.clone(), m.ok.to_string()])
                .expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

fn run_in_pool(seed: u64, ids: &[u32], threads: usize, each: &mut dyn FnMut(&Outcome)) -> Result<Vec<Outcome>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| MatwError::InvalidInput(format!("thread pool: {e}")))?;
    let ctx = Context::new(seed);
    let mut out = Vec::new();
    for &id in ids {
        let o = pool.install(|| run_criterion(&ctx, id));
        each(&o);
        out.push(o);
    }
    Ok(out)
}

/// Result of the full battery.
pub struct Acceptance {
    pub outcomes: Vec<Outcome>,
    /// CSV of the first pass over criteria 1 to 13.
    pub csv: String,
}

/// Runs criteria 1 to 13 with `threads` workers, reruns them with a
/// different worker count, and records whether the two CSVs match as
/// criterion 14. `each` sees every outcome as it completes.
pub fn acceptance(seed: u64, threads: usize, each: &mut dyn FnMut(&Outcome)) -> Result<Acceptance> {
    let ids: Vec<u32> = (1..=13).collect();
    let threads = threads.max(1);
    let mut outcomes = run_in_pool(seed, &ids, threads, each)?;
    let csv = to_csv(&outcomes);
    let t = Instant::now();
    let other = if threads == 1 { 2 } else { 1 };
    let rerun = run_in_pool(seed, &ids, other, &mut |_| {})?;
    let same = to_csv(&rerun) == csv;
    let o = Outcome {
        id: 14,
        name: CRITERIA[13].1.into(),
        metrics: vec![Metric::at_least("identical_csv", if same { 1.0 } else { 0.0 }, 1.0)],
        error: None,
        seconds: t.elapsed().as_secs_f64(),
        time_limit: None,
    };
    each(&o);
    outcomes.push(o);
    Ok(Acceptance { outcomes, csv })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.5)).collect();
        assert!((loglog_slope(&xs, &ys) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn battery_is_a2() {
        for w in a2_battery().iter().skip(1) {
            let crate::weight::WeightKind::PowerRadial { a, gamma } = &w.kind else { panic!("power weight expected") };
            let a = Mat::from_row_slice(2, 2, a);
            let g = Mat::from_row_slice(2, 2, gamma);
            assert!(weight::blm_is_a2(&a, &Gammas::Radial(g), 2), "{}", w.id);
        }
    }

    #[test]
    fn csv_has_header_for_empty_run() {
        assert_eq!(to_csv(&[]).lines().count(), 1);
    }

    #[test]
    fn interpolant_error_of_exact_values_is_small() {
        let m = 256;
        let vals: Vec<f64> = (0..m).map(|i| riesz_exact((i as f64 + 0.5) / m as f64)).collect();
        let e = interpolant_l1_error(&vals);
        assert!(e > 0.0 && e < 1e-3);
    }
}
