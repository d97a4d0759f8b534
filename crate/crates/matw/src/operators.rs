//! Weighted fractional maximal operators, the Riesz potential, its dyadic
//! surrogate, operator-norm ratios and weak-type checks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv::{cell_integral_gl, gauss_legendre, Convolver};
use crate::dyadic::{Cube, CubeFamily};
use crate::error::{MatwError, Result};
use crate::grid::{GridFunction, Lattice};
use crate::linalg;
use crate::weight::{self, conjugate, MatrixWeight, Method, Quadrature, Samples};

/// Pointwise data shared by the maximal operators: `a = W^{s_a}` and
/// `h = W^{s_b} f` at each cell of `f`'s lattice.
struct Prepared {
    lat: Lattice,
    n: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    h: Vec<f64>,
}

fn check_vector(w: &MatrixWeight, f: &GridFunction) -> Result<()> {
    f.validate()?;
    if f.cols != 1 || f.rows != w.n {
        return Err(MatwError::DimensionMismatch(format!(
            "expected a {}-vector field, got {}x{}",
            w.n, f.rows, f.cols
        )));
    }
    if f.base.dim != w.d {
        return Err(MatwError::DimensionMismatch(format!("field in R^{} but weight in R^{}", f.base.dim, w.d)));
    }
    Ok(())
}

fn prepare(w: &MatrixWeight, f: &GridFunction, q: f64) -> Result<Prepared> {
    check_vector(w, f)?;
    let lat = f.lattice();
    let s = Samples::on_lattice(w, &lat)?;
    let a = s.power(1.0 / q);
    let b = s.power(-1.0 / q);
    let n = w.n;
    let mut h = vec![0.0; lat.len() * n];
    h.par_chunks_mut(n).enumerate().for_each(|(c, out)| linalg::matvec_into(&b[c * n * n..(c + 1) * n * n], f.at(c), out));
    Ok(Prepared { lat, n, a, b, h })
}

fn check_alpha(alpha: f64, d: usize) -> Result<()> {
    if !(alpha >= 0.0 && alpha < d as f64) {
        return Err(MatwError::ExponentOutOfRange(format!("need 0 ≤ α < d = {d}, got {alpha}")));
    }
    Ok(())
}

/// Output of a maximal operator with the level of the cube attaining the
/// maximum at each cell.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MaximalOutput {
    pub values: GridFunction,
    pub argmax_level: Vec<u32>,
}

fn scalar_output(lat: &Lattice, vals: Vec<f64>) -> GridFunction {
    GridFunction { base: lat.base.clone(), depth: lat.depth, rows: 1, cols: 1, values: vals }
}

/// `M_{W,α} f(x) = max_{Q ∋ x} |Q|^{α/d-1} ∫_Q |W^{1/q}(x) W^{-1/q}(y) f(y)| dy`
/// over the cubes of the first `depth + 1` levels above `f`'s cells.
pub fn maximal(w: &MatrixWeight, alpha: f64, q: f64, f: &GridFunction, depth: u32) -> Result<MaximalOutput> {
    check_alpha(alpha, w.d)?;
    let pr = prepare(w, f, q)?;
    let (lat, n) = (&pr.lat, pr.n);
    let d = lat.dim();
    let vol = lat.cell_volume();
    let depth = depth.min(lat.depth);
    let mut best = vec![(f64::NEG_INFINITY, 0u32); lat.len()];
    for level in 0..=depth {
        let qvol = lat.base.volume() * 0.5f64.powi((level as usize * d) as i32);
        let scale = qvol.powf(alpha / d as f64 - 1.0) * vol;
        let blocks = lat.blocks(level);
        let vals: Vec<Vec<(usize, f64)>> = blocks
            .par_iter()
            .map(|nodes| {
                if n == 1 {
                    let s: f64 = nodes.iter().map(|&y| pr.h[y].abs()).sum();
                    return nodes.iter().map(|&x| (x, pr.a[x].abs() * s * scale)).collect();
                }
                let mut buf = vec![0.0; n];
                nodes
                    .iter()
                    .map(|&x| {
                        let ax = &pr.a[x * n * n..(x + 1) * n * n];
                        let mut s = 0.0;
                        for &y in nodes {
                            linalg::matvec_into(ax, &pr.h[y * n..(y + 1) * n], &mut buf);
                            s += buf.iter().map(|v| v * v).sum::<f64>().sqrt();
                        }
                        (x, s * scale)
                    })
                    .collect()
            })
            .collect();
        for block in vals {
            for (x, v) in block {
                if v > best[x].0 {
                    best[x] = (v, level);
                }
            }
        }
    }
    Ok(MaximalOutput {
        values: scalar_output(lat, best.iter().map(|b| b.0).collect()),
        argmax_level: best.iter().map(|b| b.1).collect(),
    })
}

/// Per-cube values `|Q|^{α/d-1} ∫_Q |V_Q^{-1} W^{-s}(y) f(y)| dy` where `V_Q`
/// reduces `W^{-s}` with exponent `r` on the cells of `Q`.
fn aux_cube_values(pr: &Prepared, alpha: f64, r: f64, depth: u32) -> Result<Vec<Vec<f64>>> {
    let (lat, n) = (&pr.lat, pr.n);
    let d = lat.dim();
    let vol = lat.cell_volume();
    (0..=depth)
        .map(|level| {
            let qvol = lat.base.volume() * 0.5f64.powi((level as usize * d) as i32);
            let scale = qvol.powf(alpha / d as f64 - 1.0) * vol;
            lat.blocks(level)
                .par_iter()
                .map(|nodes| {
                    let (v, _) = weight::reducing_operator(&pr.b, n, nodes, r);
                    let vinv = linalg::to_flat(&linalg::inverse(&v)?);
                    let s: f64 = nodes.iter().map(|&y| linalg::matvec_norm(&vinv, &pr.h[y * n..(y + 1) * n])).sum();
                    Ok(s * scale)
                })
                .collect()
        })
        .collect()
}

fn aux_from_cubes(lat: &Lattice, cube_vals: &[Vec<f64>]) -> MaximalOutput {
    let ids: Vec<Vec<usize>> = (0..cube_vals.len() as u32).map(|l| lat.level_ids(l)).collect();
    let mut vals = vec![f64::NEG_INFINITY; lat.len()];
    let mut arg = vec![0u32; lat.len()];
    for (c, (v, a)) in vals.iter_mut().zip(arg.iter_mut()).enumerate() {
        for (l, lv) in cube_vals.iter().enumerate() {
            let x = lv[ids[l][c]];
            if x > *v {
                *v = x;
                *a = l as u32;
            }
        }
    }
    MaximalOutput { values: scalar_output(lat, vals), argmax_level: arg }
}

/// `M'_{W,α} f(x) = max_{Q ∋ x} |Q|^{α/d-1} ∫_Q |V_Q^{-1} W^{-1/q}(y) f(y)| dy`,
/// with `V_Q` the reducing operator of `W^{-1/q}` and exponent `p'`, computed
/// on the same cells as the integral.
pub fn aux_maximal(w: &MatrixWeight, alpha: f64, p: f64, q: f64, f: &GridFunction, depth: u32) -> Result<MaximalOutput> {
    check_alpha(alpha, w.d)?;
    let pr = prepare(w, f, q)?;
    let depth = depth.min(pr.lat.depth);
    let cubes = aux_cube_values(&pr, alpha, conjugate(p), depth)?;
    Ok(aux_from_cubes(&pr.lat, &cubes))
}

/// Integral of `|z|^{α-d}` over the cube of side `h` centred at the origin.
pub fn riesz_diagonal(alpha: f64, d: usize, h: f64) -> f64 {
    if d == 1 {
        return 2.0 * (0.5 * h).powf(alpha) / alpha;
    }
    // split the cube into 2d pyramids over its faces
    let (x, w) = gauss_legendre(48);
    let e = 0.5 * (alpha - d as f64);
    let face: f64 = match d {
        2 => x.iter().zip(&w).map(|(u, wu)| wu * (1.0 + u * u).powf(e)).sum(),
        3 => x
            .iter()
            .zip(&w)
            .flat_map(|(u, wu)| x.iter().zip(&w).map(move |(v, wv)| wu * wv * (1.0 + u * u + v * v).powf(e)))
            .sum(),
        _ => unreachable!("lattices live in dimension ≤ 3"),
    };
    2.0 * d as f64 / alpha * face * (0.5 * h).powf(alpha)
}

/// Integral of the Riesz kernel over the lattice cell at offset `o`.
fn riesz_cell(alpha: f64, h: f64, o: &[i64]) -> f64 {
    let d = o.len();
    if d == 1 {
        let anti = |z: f64| z.signum() * z.abs().powf(alpha) / alpha;
        let c = o[0] as f64;
        return anti(h * (c + 0.5)) - anti(h * (c - 0.5));
    }
    let far = o.iter().map(|v| v.abs()).max().unwrap_or(0);
    if far == 0 {
        return riesz_diagonal(alpha, d, h);
    }
    let center: Vec<f64> = o.iter().map(|&v| v as f64 * h).collect();
    let e = 0.5 * (alpha - d as f64);
    let k = |z: &[f64]| z.iter().map(|v| v * v).sum::<f64>().powf(e);
    match far {
        1..=2 => cell_integral_gl(&center, h, 12, &k),
        3..=8 => cell_integral_gl(&center, h, 4, &k),
        _ => h.powi(d as i32) * k(&center),
    }
}

/// Convolution with the Riesz kernel on a lattice.
pub struct Riesz {
    pub alpha: f64,
    lattice: Lattice,
    conv: Convolver,
}

impl Riesz {
    pub fn new(alpha: f64, lattice: &Lattice) -> Result<Riesz> {
        let d = lattice.dim();
        if !(alpha > 0.0 && alpha < d as f64) {
            return Err(MatwError::ExponentOutOfRange(format!("need 0 < α < d = {d}, got {alpha}")));
        }
        let h = lattice.h();
        let conv = Convolver::new(lattice.per_axis(), d, move |o| riesz_cell(alpha, h, o));
        Ok(Riesz { alpha, lattice: lattice.clone(), conv })
    }

    /// `I_α f(x) = ∫_base f(y) |x-y|^{α-d} dy` at cell centres, componentwise.
    pub fn apply(&self, f: &GridFunction) -> Result<GridFunction> {
        f.validate()?;
        if f.lattice() != self.lattice {
            return Err(MatwError::DimensionMismatch("input lives on a different lattice".into()));
        }
        let wdt = f.width();
        let mut out = f.clone();
        for comp in 0..wdt {
            let col: Vec<f64> = (0..f.len()).map(|c| f.values[c * wdt + comp]).collect();
            for (c, v) in self.conv.apply(&col).into_iter().enumerate() {
                out.values[c * wdt + comp] = v;
            }
        }
        Ok(out)
    }
}

pub fn riesz(alpha: f64, f: &GridFunction) -> Result<GridFunction> {
    Riesz::new(alpha, &f.lattice())?.apply(f)
}

/// `|⟨W^{1/q} I_α W^{-1/q} f, g⟩|` on `f`'s lattice.
pub fn riesz_pairing(w: &MatrixWeight, alpha: f64, q: f64, f: &GridFunction, g: &GridFunction) -> Result<f64> {
    let pr = prepare(w, f, q)?;
    check_vector(w, g)?;
    let n = pr.n;
    let hf = GridFunction { values: pr.h.clone(), ..f.clone() };
    let ih = riesz(alpha, &hf)?;
    let mut buf = vec![0.0; n];
    let mut total = 0.0;
    for c in 0..pr.lat.len() {
        linalg::matvec_into(&pr.a[c * n * n..(c + 1) * n * n], ih.at(c), &mut buf);
        total += buf.iter().zip(g.at(c)).map(|(x, y)| x * y).sum::<f64>();
    }
    Ok((total * pr.lat.cell_volume()).abs())
}

/// Cells of `lat` grouped by the cube of the (shifted) grid at `scale` that
/// contains their centres.
fn raster_groups(lat: &Lattice, scale: i32, shift: &[u8]) -> Vec<Vec<usize>> {
    let side = (2.0f64).powi(scale);
    let probe = Cube::shifted(vec![0; lat.dim()], scale, shift.to_vec());
    let offsets: Vec<f64> = (0..lat.dim()).map(|k| probe.lower(k)).collect();
    let mut groups: std::collections::BTreeMap<Vec<i64>, Vec<usize>> = std::collections::BTreeMap::new();
    for c in 0..lat.len() {
        let x = lat.center(c);
        let key: Vec<i64> = x.iter().zip(&offsets).map(|(xi, o)| ((xi - o) / side).floor() as i64).collect();
        groups.entry(key).or_default().push(c);
    }
    groups.into_values().collect()
}

/// `Σ_t Σ_Q |Q|^{α/d-1} ∫_Q ∫_Q |⟨W^{-1/q}(y) f(y), W^{1/q}(x) g(x)⟩| dx dy`
/// over the standard and 1/3-shifted grids, cubes rasterised by cell centres,
/// scales from four times the base side down to the cell size.
pub fn riesz_dyadic_surrogate(w: &MatrixWeight, alpha: f64, q: f64, f: &GridFunction, g: &GridFunction) -> Result<f64> {
    let pr = prepare(w, f, q)?;
    check_vector(w, g)?;
    let (lat, n) = (&pr.lat, pr.n);
    let d = lat.dim();
    let vol = lat.cell_volume();
    let mut k = vec![0.0; lat.len() * n];
    k.par_chunks_mut(n).enumerate().for_each(|(c, out)| linalg::matvec_into(&pr.a[c * n * n..(c + 1) * n * n], g.at(c), out));
    let top = lat.base.scale + 2;
    let bottom = lat.base.scale - lat.depth as i32;
    let mut total = 0.0;
    for bits in 0..(1usize << d) {
        let shift: Vec<u8> = (0..d).map(|a| ((bits >> a) & 1) as u8).collect();
        for scale in (bottom..=top).rev() {
            let qvol = (2.0f64).powi(scale * d as i32);
            let factor = qvol.powf(alpha / d as f64 - 1.0) * vol * vol;
            let groups = raster_groups(lat, scale, &shift);
            let per: Vec<f64> = groups
                .par_iter()
                .map(|cells| {
                    if n == 1 {
                        let sh: f64 = cells.iter().map(|&y| pr.h[y].abs()).sum();
                        let sk: f64 = cells.iter().map(|&x| k[x].abs()).sum();
                        return sh * sk;
                    }
                    let mut acc = 0.0;
                    for &y in cells {
                        let hy = &pr.h[y * n..(y + 1) * n];
                        for &x in cells {
                            acc += hy.iter().zip(&k[x * n..(x + 1) * n]).map(|(a, b)| a * b).sum::<f64>().abs();
                        }
                    }
                    acc
                })
                .collect();
            total += factor * per.iter().sum::<f64>();
        }
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    Max,
    Auxmax,
    Riesz,
}

impl std::str::FromStr for OperatorKind {
    type Err = MatwError;
    fn from_str(s: &str) -> Result<OperatorKind> {
        match s {
            "max" => Ok(OperatorKind::Max),
            "auxmax" => Ok(OperatorKind::Auxmax),
            "riesz" => Ok(OperatorKind::Riesz),
            _ => Err(MatwError::InvalidInput(format!("unknown operator {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OperatorReport {
    pub operator: OperatorKind,
    pub p: f64,
    pub q: f64,
    pub alpha: f64,
    pub input_norm: f64,
    pub output_norm: f64,
    pub ratio: f64,
    pub characteristic: f64,
    pub ceiling_exponent: f64,
    pub ceiling: f64,
    pub family: CubeFamily,
    pub resolution: usize,
}

/// Exponent of `[W]_{A_{p,q}}` in the norm bound for each operator.
pub fn ceiling_exponent(kind: OperatorKind, alpha: f64, p: f64, q: f64, d: usize) -> f64 {
    let base = conjugate(p) / q * (1.0 - alpha / d as f64);
    match kind {
        OperatorKind::Max | OperatorKind::Auxmax => base,
        OperatorKind::Riesz => base + 1.0 / conjugate(q),
    }
}

fn vector_lp(lat: &Lattice, vals: &[f64], n: usize, p: f64) -> f64 {
    let s: f64 = vals.chunks(n).map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt().powf(p)).sum();
    (s * lat.cell_volume()).powf(1.0 / p)
}

fn weighted_lp(lat: &Lattice, a: &[f64], vals: &[f64], n: usize, p: f64) -> f64 {
    let s: f64 = (0..lat.len())
        .map(|c| linalg::matvec_norm(&a[c * n * n..(c + 1) * n * n], &vals[c * n..(c + 1) * n]).powf(p))
        .sum();
    (s * lat.cell_volume()).powf(1.0 / p)
}

/// Measured operator ratio on one input. Maximal operators map `L^p` to
/// `L^q` unweighted (the weight sits inside the operator); the Riesz
/// potential is measured as `‖W^{1/q} I_α f‖_q / ‖W^{1/q} f‖_p`.
/// `characteristic` defaults to the truncated `A_{p,q}` value on the family.
pub fn operator_ratio(
    kind: OperatorKind,
    w: &MatrixWeight,
    alpha: f64,
    p: f64,
    q: f64,
    f: &GridFunction,
    depth: u32,
    characteristic: Option<f64>,
) -> Result<OperatorReport> {
    let d = w.d as f64;
    if !(p > 1.0 && q >= p) || (1.0 / q - (1.0 / p - alpha / d)).abs() > 1e-9 {
        return Err(MatwError::ExponentOutOfRange(format!("need 1/q = 1/p - α/d, got p={p}, q={q}, α={alpha}")));
    }
    check_vector(w, f)?;
    if f.is_zero() {
        return Err(MatwError::ZeroInput);
    }
    let lat = f.lattice();
    let depth = depth.min(lat.depth);
    let fam = CubeFamily::new(lat.base.clone(), depth);
    let (input_norm, output_norm) = match kind {
        OperatorKind::Max => (vector_lp(&lat, &f.values, w.n, p), maximal(w, alpha, q, f, depth)?.values.lp_norm(q)),
        OperatorKind::Auxmax => {
            (vector_lp(&lat, &f.values, w.n, p), aux_maximal(w, alpha, p, q, f, depth)?.values.lp_norm(q))
        }
        OperatorKind::Riesz => {
            let a = Samples::on_lattice(w, &lat)?.power(1.0 / q);
            let out = riesz(alpha, f)?;
            (weighted_lp(&lat, &a, &f.values, w.n, p), weighted_lp(&lat, &a, &out.values, w.n, q))
        }
    };
    let characteristic = match characteristic {
        Some(c) => c,
        None => weight::characteristic(w, p, q, &fam, Method::Definition, Quadrature::default_for(w.d))?.value,
    };
    let e = ceiling_exponent(kind, alpha, p, q, w.d);
    Ok(OperatorReport {
        operator: kind,
        p,
        q,
        alpha,
        input_norm,
        output_norm,
        ratio: output_norm / input_norm,
        characteristic,
        ceiling_exponent: e,
        ceiling: characteristic.powf(e),
        family: fam,
        resolution: lat.per_axis(),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WeakTypeRow {
    pub lambda: f64,
    pub measure: f64,
    pub bound: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WeakTypeReport {
    pub constant: f64,
    pub input_norm: f64,
    pub rows: Vec<WeakTypeRow>,
    pub max_ratio: f64,
}

/// `n^q`: Hölder on each cube and `|V_Q^{-1}...|` bounded column by column
/// through the reducing-operator sandwich give `M'f ≤ n·sup_Q (|Q|^{-p/q}∫_Q|f|^p)^{1/p}`,
/// whose dyadic weak `(p,q)` constant is one.
pub fn weak_type_constant(n: usize, q: f64) -> f64 {
    (n as f64).powf(q)
}

/// `count` geometric levels spanning the positive range of `values`, extended
/// by a factor two at both ends.
pub fn lambda_grid(values: &[f64], count: usize) -> Vec<f64> {
    let pos: Vec<f64> = values.iter().copied().filter(|v| *v > 0.0).collect();
    if pos.is_empty() || count == 0 {
        return Vec::new();
    }
    let lo = pos.iter().copied().fold(f64::INFINITY, f64::min) / 2.0;
    let hi = pos.iter().copied().fold(0.0f64, f64::max) * 2.0;
    if count == 1 {
        return vec![lo];
    }
    (0..count).map(|i| lo * (hi / lo).powf(i as f64 / (count - 1) as f64)).collect()
}

/// Measures `λ^q |{M'f > λ}| / (C ‖f‖_p^q)` on each `λ` (cell-exact level sets).
pub fn weak_type_check(
    w: &MatrixWeight,
    alpha: f64,
    p: f64,
    q: f64,
    f: &GridFunction,
    depth: u32,
    lambdas: &[f64],
) -> Result<WeakTypeReport> {
    if f.is_zero() {
        return Err(MatwError::ZeroInput);
    }
    if lambdas.iter().any(|l| !(*l > 0.0)) {
        return Err(MatwError::InvalidInput("λ values must be positive".into()));
    }
    let mf = aux_maximal(w, alpha, p, q, f, depth)?;
    let lat = f.lattice();
    let norm = vector_lp(&lat, &f.values, w.n, p);
    let c = weak_type_constant(w.n, q);
    let rows: Vec<WeakTypeRow> = lambdas
        .iter()
        .map(|&lambda| {
            let count = mf.values.values.iter().filter(|&&v| v > lambda).count();
            let measure = count as f64 * lat.cell_volume();
            let bound = c * norm.powf(q) / lambda.powf(q);
            WeakTypeRow { lambda, measure, bound, ratio: measure / bound }
        })
        .collect();
    let max_ratio = rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
    Ok(WeakTypeReport { constant: c, input_norm: norm, rows, max_ratio })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FksReport {
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
    pub k: f64,
    pub q_star: f64,
}

/// Local fractional bound for `M'_{W,1}` (reducing operators of `W^{-1/p}`
/// with exponent `p'`) on the base cube of `f`.
pub fn fks_local_bound(w: &MatrixWeight, p: f64, f: &GridFunction, k: f64, q_star: f64, depth: u32) -> Result<FksReport> {
    let d = w.d as f64;
    if !(p > 1.0 && p <= d) {
        return Err(MatwError::ExponentOutOfRange(format!("need 1 < p ≤ d, got p={p}")));
    }
    let kmax = if w.d == 1 { f64::INFINITY } else { d / (d - 1.0) };
    if !(k >= 1.0 && k <= kmax) {
        return Err(MatwError::ExponentOutOfRange(format!("need 1 ≤ k ≤ d/(d-1), got {k}")));
    }
    if !(q_star >= 1.0 && q_star <= p) {
        return Err(MatwError::ExponentOutOfRange(format!("need 1 ≤ q* ≤ p, got {q_star}")));
    }
    check_vector(w, f)?;
    if f.is_zero() {
        return Ok(FksReport { lhs: 0.0, rhs: 0.0, ratio: 0.0, k, q_star });
    }
    let pr = prepare(w, f, p)?;
    let depth = depth.min(pr.lat.depth);
    let cubes = aux_cube_values(&pr, 1.0, conjugate(p), depth)?;
    let mf = aux_from_cubes(&pr.lat, &cubes);
    let lat = &pr.lat;
    let m = lat.len() as f64;
    let e = k * q_star;
    let lhs = (mf.values.values.iter().map(|v| v.powf(e)).sum::<f64>() / m).powf(1.0 / e);
    let avg = f.values.chunks(w.n).map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt().powf(q_star)).sum::<f64>() / m;
    let rhs = lat.base.volume().powf(1.0 / d) * avg.powf(1.0 / q_star);
    Ok(FksReport { lhs, rhs, ratio: lhs / rhs, k, q_star })
}
