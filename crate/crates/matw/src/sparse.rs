//! Stopping-time selections: the heavy function, maximal stopping cubes, and
//! leveled sparse families with their cores.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dyadic::{Cube, CubeFamily};
use crate::error::{MatwError, Result};
use crate::grid::{GridFunction, Lattice};
use crate::linalg::{self, Mat};
use crate::weight::{self, conjugate, MatrixWeight, Method, Quadrature, Samples};

/// Index of the parent of cube `id` at `level` (row-major, `2^level` per axis).
pub(crate) fn parent_id(id: usize, level: u32, d: usize) -> usize {
    let m = 1usize << level;
    let mut out = 0;
    let mut r = id;
    let mut mul = 1;
    for _ in 0..d {
        let i = r % m;
        r /= m;
        out += (i >> 1) * mul;
        mul *= m >> 1;
    }
    out
}

/// `x ↦ max_R ‖W^{1/q}(x) V_R‖` over cubes `R ∋ x` of the depth-`depth`
/// family, sampled at the cell centres of the depth-`eval_depth` lattice.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeavyFunction {
    pub root: Cube,
    pub depth: u32,
    pub eval_depth: u32,
    pub samples: Vec<f64>,
    pub p: f64,
    pub q: f64,
    pub weight_id: String,
}

impl HeavyFunction {
    pub fn lattice(&self) -> Lattice {
        Lattice::new(self.root.clone(), self.eval_depth)
    }

    /// `∫ N^s` by the midpoint rule.
    pub fn integral(&self, s: f64) -> f64 {
        let vol = self.lattice().cell_volume();
        self.samples.iter().map(|v| v.powf(s)).sum::<f64>() * vol
    }
}

/// `V_R` is the reducing operator of `W^{-1/q}` with exponent `p'`;
/// `eval_depth` is raised to `m` if smaller.
pub fn heavy_function(
    w: &MatrixWeight,
    root: &Cube,
    p: f64,
    q: f64,
    m: u32,
    eval_depth: u32,
    quad: Quadrature,
) -> Result<HeavyFunction> {
    let fam = CubeFamily::new(root.clone(), m);
    let vs = weight::family_reducing(w, &fam, -1.0 / q, conjugate(p), quad)?;
    let eval_depth = eval_depth.max(m);
    let lat = Lattice::new(root.clone(), eval_depth);
    let a = Samples::on_lattice(w, &lat)?.power(1.0 / q);
    let n = w.n;
    let ids: Vec<Vec<usize>> = (0..=m).map(|l| lat.level_ids(l)).collect();
    let flat: Vec<Vec<Vec<f64>>> = vs.iter().map(|lv| lv.iter().map(linalg::to_flat).collect()).collect();
    let samples = (0..lat.len())
        .into_par_iter()
        .map(|c| {
            let ac = &a[c * n * n..(c + 1) * n * n];
            (0..=m as usize)
                .map(|l| linalg::prod_norm(ac, &flat[l][ids[l][c]], n))
                .fold(0.0f64, f64::max)
        })
        .collect();
    Ok(HeavyFunction { root: root.clone(), depth: m, eval_depth, samples, p, q, weight_id: w.id.clone() })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeavyReport {
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
    pub characteristic: f64,
    pub eps: f64,
}

/// Compares `∫ N^{q+ε}` with `|Q|·[W]`, where `characteristic` is the
/// truncated `A_{p,q}` value on the same family.
pub fn heavy_integral_check(hf: &HeavyFunction, characteristic: f64, eps: f64) -> HeavyReport {
    let lhs = hf.integral(hf.q + eps);
    let rhs = hf.root.volume() * characteristic;
    HeavyReport { lhs, rhs, ratio: lhs / rhs, characteristic, eps }
}

fn descendant_ratios(vs: &[Vec<Mat>]) -> Result<Vec<Vec<f64>>> {
    let vq_inv = linalg::inverse(&vs[0][0])?;
    Ok(vs.iter().map(|lv| lv.iter().map(|v| linalg::spectral_norm(&(&vq_inv * v))).collect()).collect())
}

fn maximal_selection(vals: &[Vec<f64>], d: usize, from_level: u32, pass: impl Fn(f64) -> bool) -> Vec<(u32, usize)> {
    let mut out = Vec::new();
    let mut covered = vec![false];
    for (level, lv) in vals.iter().enumerate() {
        let level = level as u32;
        let mut next = vec![false; lv.len()];
        for (id, &v) in lv.iter().enumerate() {
            let inherited = level > 0 && covered[parent_id(id, level, d)];
            if inherited {
                next[id] = true;
            } else if level >= from_level && pass(v) {
                next[id] = true;
                out.push((level, id));
            }
        }
        covered = next;
    }
    out
}

/// Maximal proper descendants `R` of `q_cube` (to `depth` levels) with
/// `‖V_Q^{-1} V_R‖ > c`.
pub fn stopping_children(
    w: &MatrixWeight,
    q_cube: &Cube,
    p: f64,
    q: f64,
    c: f64,
    depth: u32,
    quad: Quadrature,
) -> Result<Vec<Cube>> {
    if !(c > 1.0) {
        return Err(MatwError::InvalidInput(format!("stopping threshold must exceed 1, got {c}")));
    }
    let fam = CubeFamily::new(q_cube.clone(), depth);
    let vs = weight::family_reducing(w, &fam, -1.0 / q, conjugate(p), quad)?;
    let ratios = descendant_ratios(&vs)?;
    let lat = Lattice::new(q_cube.clone(), depth);
    Ok(maximal_selection(&ratios, q_cube.dim, 1, |v| v > c)
        .into_iter()
        .map(|(l, id)| lat.cube(l, id))
        .collect())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChildrenReport {
    pub threshold: f64,
    pub children: Vec<Cube>,
    pub measure_fraction: f64,
}

/// Doubles the threshold from 2 until the children cover at most half of `q_cube`.
pub fn calibrated_stopping_children(
    w: &MatrixWeight,
    q_cube: &Cube,
    p: f64,
    q: f64,
    depth: u32,
    quad: Quadrature,
) -> Result<ChildrenReport> {
    let fam = CubeFamily::new(q_cube.clone(), depth);
    let vs = weight::family_reducing(w, &fam, -1.0 / q, conjugate(p), quad)?;
    let ratios = descendant_ratios(&vs)?;
    let lat = Lattice::new(q_cube.clone(), depth);
    let d = q_cube.dim;
    let mut c = 2.0;
    for _ in 0..60 {
        let sel = maximal_selection(&ratios, d, 1, |v| v > c);
        let frac: f64 = sel.iter().map(|&(l, _)| 0.5f64.powi((l as usize * d) as i32)).sum();
        if frac <= 0.5 {
            return Ok(ChildrenReport {
                threshold: c,
                children: sel.into_iter().map(|(l, id)| lat.cube(l, id)).collect(),
                measure_fraction: frac,
            });
        }
        c *= 2.0;
    }
    Err(MatwError::QuadratureFailure("stopping threshold calibration did not terminate".into()))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Level {
    pub k: i64,
    pub cubes: Vec<Cube>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Core {
    pub cube: Cube,
    /// Cells of the depth-`K` lattice over the root.
    pub cells: Vec<usize>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SparseReport {
    pub level_disjoint: bool,
    pub core_violations: usize,
    pub min_core_fraction: f64,
    pub selected: usize,
    pub attempts: usize,
}

impl SparseReport {
    pub fn violations(&self) -> usize {
        self.core_violations + usize::from(!self.level_disjoint)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SparseFamily {
    pub root: Cube,
    pub depth: u32,
    pub a: f64,
    pub levels: Vec<Level>,
    pub cores: Vec<Core>,
    pub origin: String,
    /// Factor applied to `f` before selection (1 for a user threshold).
    pub scale: f64,
    pub report: SparseReport,
}

/// Averages `g(P) = avg_P |V_P^{-1} W^{-1/p}(y) f(y)|` for every cube of the
/// family spanned by `f`'s lattice, `[level][id]`.
pub fn stopping_averages(w: &MatrixWeight, f: &GridFunction, p: f64) -> Result<Vec<Vec<f64>>> {
    f.validate()?;
    if f.cols != 1 || f.rows != w.n {
        return Err(MatwError::DimensionMismatch(format!(
            "f must be a vector field with {} components, got {}x{}",
            w.n, f.rows, f.cols
        )));
    }
    let lat = f.lattice();
    let n = w.n;
    let b = Samples::on_lattice(w, &lat)?.power(-1.0 / p);
    let h: Vec<f64> = (0..lat.len())
        .flat_map(|c| {
            let mut out = vec![0.0; n];
            linalg::matvec_into(&b[c * n * n..(c + 1) * n * n], f.at(c), &mut out);
            out
        })
        .collect();
    let pp = conjugate(p);
    let mut out = Vec::with_capacity(lat.depth as usize + 1);
    for level in 0..=lat.depth {
        let blocks = lat.blocks(level);
        let vals = blocks
            .par_iter()
            .map(|nodes| {
                let (v, _) = weight::reducing_operator(&b, n, nodes, pp);
                let vinv = linalg::to_flat(&linalg::inverse(&v)?);
                let s: f64 = nodes.iter().map(|&c| linalg::matvec_norm(&vinv, &h[c * n..(c + 1) * n])).sum();
                Ok(s / nodes.len() as f64)
            })
            .collect::<Result<Vec<f64>>>()?;
        out.push(vals);
    }
    Ok(out)
}

struct Selection {
    levels: Vec<(i64, Vec<(u32, usize)>)>,
    disjoint: bool,
}

fn select_levels(g: &[Vec<f64>], d: usize, a: f64, scale: f64) -> Result<Selection> {
    let root = g[0][0] * scale;
    if !(root > 0.0) {
        return Err(MatwError::ZeroInput);
    }
    let mut k0 = (root.ln() / a.ln()).floor() as i64;
    while a.powf(k0 as f64) >= root {
        k0 -= 1;
    }
    while a.powf((k0 + 1) as f64) < root {
        k0 += 1;
    }
    let mut levels = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut disjoint = true;
    let mut k = k0;
    loop {
        let t = a.powf(k as f64);
        let sel = maximal_selection(g, d, 0, |v| v * scale > t);
        if sel.is_empty() {
            break;
        }
        for c in &sel {
            if !seen.insert(*c) {
                disjoint = false;
            }
        }
        levels.push((k, sel));
        k += 1;
    }
    Ok(Selection { levels, disjoint })
}

/// Leveled maximal cubes `S^k = {P maximal: g(P) > a^k}` over the lattice of
/// `f`, starting at the level of the root. `a = None` picks the threshold
/// automatically: `max(2, [W]_{A_p}^{(1+p')/p})`, doubled until the family
/// invariants hold, with `f` rescaled so that `g(root) = √a`.
pub fn stopping_family(w: &MatrixWeight, f: &GridFunction, p: f64, a: Option<f64>) -> Result<SparseFamily> {
    if !(p > 1.0 && p.is_finite()) {
        return Err(MatwError::ExponentOutOfRange(format!("need 1 < p < ∞, got {p}")));
    }
    let g = stopping_averages(w, f, p)?;
    let lat = f.lattice();
    let d = lat.dim();
    let build = |a: f64, scale: f64, attempts: usize| -> Result<SparseFamily> {
        let sel = select_levels(&g, d, a, scale)?;
        let ids: Vec<Vec<usize>> = (0..=lat.depth).map(|l| lat.level_ids(l)).collect();
        let mut chosen: std::collections::HashMap<(u32, usize), usize> = std::collections::HashMap::new();
        let mut order = Vec::new();
        for (_, cubes) in &sel.levels {
            for &c in cubes {
                if !chosen.contains_key(&c) {
                    chosen.insert(c, order.len());
                    order.push(c);
                }
            }
        }
        let mut cells: Vec<Vec<usize>> = vec![Vec::new(); order.len()];
        for cell in 0..lat.len() {
            if let Some(slot) = (0..=lat.depth).rev().find_map(|l| chosen.get(&(l, ids[l as usize][cell]))) {
                cells[*slot].push(cell);
            }
        }
        let mut report = SparseReport { level_disjoint: sel.disjoint, min_core_fraction: 1.0, attempts, ..Default::default() };
        for (i, &(l, _)) in order.iter().enumerate() {
            let total = 1usize << ((lat.depth - l) as usize * d);
            if 2 * cells[i].len() < total {
                report.core_violations += 1;
            }
            report.min_core_fraction = report.min_core_fraction.min(cells[i].len() as f64 / total as f64);
        }
        report.selected = order.len();
        Ok(SparseFamily {
            root: lat.base.clone(),
            depth: lat.depth,
            a,
            levels: sel
                .levels
                .iter()
                .map(|(k, cubes)| Level { k: *k, cubes: cubes.iter().map(|&(l, id)| lat.cube(l, id)).collect() })
                .collect(),
            cores: order.iter().zip(cells).map(|(&(l, id), cells)| Core { cube: lat.cube(l, id), cells }).collect(),
            origin: "stopping_family".into(),
            scale,
            report,
        })
    };
    match a {
        Some(a) => {
            if !(a > 1.0) {
                return Err(MatwError::InvalidInput(format!("threshold must exceed 1, got {a}")));
            }
            let fam = build(a, 1.0, 1)?;
            if !fam.report.level_disjoint {
                return Err(MatwError::ThresholdTooSmall(a));
            }
            Ok(fam)
        }
        None => {
            let char_fam = CubeFamily::new(lat.base.clone(), lat.depth);
            let wa = weight::characteristic(w, p, p, &char_fam, Method::Definition, Quadrature::Lattice { refine: 0 })?;
            let mut a = wa.value.powf((1.0 + conjugate(p)) / p).max(2.0);
            for attempt in 1..=60 {
                // Homogeneity lets us rescale f so the root average sits at
                // √a, midway between two thresholds in log scale.
                let fam = build(a, a.sqrt() / g[0][0], attempt)?;
                if fam.report.violations() == 0 {
                    return Ok(fam);
                }
                a *= 2.0;
            }
            Err(MatwError::ThresholdTooSmall(a))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parent_ids_match_geometry() {
        let lat = Lattice::new(Cube::unit(2), 3);
        for id in 0..64 {
            let child = lat.cube(3, id);
            assert_eq!(lat.cube(2, parent_id(id, 3, 2)), child.parent());
        }
    }

    #[test]
    fn constant_weight_heavy_is_one() {
        let w = MatrixWeight::identity(2, 2);
        let hf = heavy_function(&w, &Cube::unit(2), 2.0, 2.0, 3, 3, Quadrature::default_for(2)).unwrap();
        assert!(hf.samples.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let rep = heavy_integral_check(&hf, 1.0, 0.0);
        assert!((rep.ratio - 1.0).abs() < 1e-12);
    }

    #[test]
    fn heavy_is_monotone_in_depth() {
        let a = Mat::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let g = Mat::from_row_slice(2, 2, &[0.6, 0.2, 0.2, -0.2]);
        let w = MatrixWeight::power_radial(&a, &g, 1).unwrap();
        let root = Cube::parse("[-1,1)^1").unwrap();
        let quad = Quadrature::default_for(1);
        let h3 = heavy_function(&w, &root, 2.0, 2.0, 3, 6, quad).unwrap();
        let h4 = heavy_function(&w, &root, 2.0, 2.0, 4, 6, quad).unwrap();
        assert!(h4.samples.iter().zip(&h3.samples).all(|(a, b)| a >= b));
        assert!(h4.samples.iter().zip(&h3.samples).any(|(a, b)| a > b));
    }

    #[test]
    fn constant_weight_has_no_stopping_children() {
        let w = MatrixWeight::identity(2, 1);
        let kids = stopping_children(&w, &Cube::unit(1), 2.0, 2.0, 1.5, 5, Quadrature::default_for(1)).unwrap();
        assert!(kids.is_empty());
    }

    #[test]
    fn constant_input_gives_one_level() {
        let w = MatrixWeight::identity(2, 2);
        let lat = Lattice::new(Cube::unit(2), 4);
        let f = GridFunction::from_fn(&lat, 2, 1, |_| vec![1.0, 2.0]);
        let fam = stopping_family(&w, &f, 2.0, None).unwrap();
        assert_eq!(fam.levels.len(), 1);
        assert_eq!(fam.levels[0].cubes, vec![Cube::unit(2)]);
        assert_eq!(fam.cores[0].cells.len(), lat.len());
        assert_eq!(fam.report.violations(), 0);
    }

    #[test]
    fn zero_input_rejected() {
        let w = MatrixWeight::identity(1, 1);
        let lat = Lattice::new(Cube::unit(1), 4);
        let f = GridFunction::zeros(&lat, 1, 1);
        assert!(matches!(stopping_family(&w, &f, 2.0, Some(4.0)), Err(MatwError::ZeroInput)));
    }

    #[test]
    fn tiny_threshold_overlaps_levels() {
        let w = MatrixWeight::identity(1, 1);
        let lat = Lattice::new(Cube::unit(1), 6);
        let f = GridFunction::from_fn(&lat, 1, 1, |x| vec![if x[0] < 1.0 / 64.0 { 1000.0 } else { 0.0 }]);
        assert!(matches!(stopping_family(&w, &f, 2.0, Some(1.01)), Err(MatwError::ThresholdTooSmall(_))));
    }
}
