//! Direct scalar implementations of the characteristic, the fractional
//! maximal operator and the Poincaré ratio. They share no code with the
//! matrix paths and serve as a cross-check for `n = 1`.

use crate::dyadic::Cube;

pub type ScalarFn<'a> = &'a (dyn Fn(&[f64]) -> f64 + Sync);

fn conj(p: f64) -> f64 {
    p / (p - 1.0)
}

/// Row-major multi-indices of an `m^d` grid, axis 0 slowest.
fn for_each_index(m: usize, d: usize, mut f: impl FnMut(&[usize])) {
    let mut idx = vec![0usize; d];
    let total = m.pow(d as u32);
    for flat in 0..total {
        let mut r = flat;
        for k in (0..d).rev() {
            idx[k] = r % m;
            r /= m;
        }
        f(&idx);
    }
}

/// Midpoints of the `2^refine` per-axis subcells of the cube with lower
/// corner `lo` and side `side`.
fn midpoints(lo: &[f64], side: f64, refine: u32) -> Vec<Vec<f64>> {
    let m = 1usize << refine;
    let h = side / m as f64;
    let mut out = Vec::with_capacity(m.pow(lo.len() as u32));
    for_each_index(m, lo.len(), |idx| out.push(idx.iter().zip(lo).map(|(&i, &a)| a + (i as f64 + 0.5) * h).collect()));
    out
}

/// `sup_Q avg_Q w · (avg_Q w^{-p'/q})^{q/p'}` over the dyadic descendants of
/// `base` down to `depth`, averaging on `2^refine` midpoints per axis in
/// every cube.
pub fn apq(w: ScalarFn, p: f64, q: f64, base: &Cube, depth: u32, refine: u32) -> f64 {
    let d = base.dim;
    let lo: Vec<f64> = (0..d).map(|k| base.lower(k)).collect();
    let e = conj(p) / q;
    let mut best = f64::NEG_INFINITY;
    for level in 0..=depth {
        let m = 1usize << level;
        let side = base.side() / m as f64;
        for_each_index(m, d, |idx| {
            let corner: Vec<f64> = idx.iter().zip(&lo).map(|(&i, &a)| a + i as f64 * side).collect();
            let pts = midpoints(&corner, side, refine);
            let k = pts.len() as f64;
            let pos = pts.iter().map(|x| w(x)).sum::<f64>() / k;
            let neg = pts.iter().map(|x| w(x).powf(-e)).sum::<f64>() / k;
            best = best.max(pos * neg.powf(1.0 / e));
        });
    }
    best
}

/// `sup_Q avg_Q w · avg_Q w^{-1}` on the same nodes as [`apq`].
pub fn a2(w: ScalarFn, base: &Cube, depth: u32, refine: u32) -> f64 {
    apq(w, 2.0, 2.0, base, depth, refine)
}

/// `M_{w,α} f(x) = max_{Q ∋ x} |Q|^{α/d-1} ∫_Q w(x)^{1/q} w(y)^{-1/q} |f(y)| dy`
/// over cubes of the first `levels + 1` levels, at the cell centres of the
/// depth-`depth` lattice over `base`.
pub fn maximal(w: ScalarFn, alpha: f64, q: f64, f: ScalarFn, base: &Cube, depth: u32, levels: u32) -> Vec<f64> {
    let d = base.dim;
    let lo: Vec<f64> = (0..d).map(|k| base.lower(k)).collect();
    let m = 1usize << depth;
    let h = base.side() / m as f64;
    let mut centers = Vec::with_capacity(m.pow(d as u32));
    for_each_index(m, d, |idx| centers.push(idx.to_vec()));
    let point = |idx: &[usize]| -> Vec<f64> { idx.iter().zip(&lo).map(|(&i, &a)| a + (i as f64 + 0.5) * h).collect() };
    let vals: Vec<f64> = centers.iter().map(|i| w(&point(i)).powf(-1.0 / q) * f(&point(i)).abs()).collect();
    let outer: Vec<f64> = centers.iter().map(|i| w(&point(i)).powf(1.0 / q)).collect();
    let mut best = vec![f64::NEG_INFINITY; centers.len()];
    for level in 0..=levels.min(depth) {
        let shift = depth - level;
        let per = 1usize << level;
        let mut sums = vec![0.0; per.pow(d as u32)];
        let cube_of = |idx: &[usize]| idx.iter().fold(0, |acc, &i| acc * per + (i >> shift));
        for (c, idx) in centers.iter().enumerate() {
            sums[cube_of(idx)] += vals[c];
        }
        let qvol = base.volume() / (per.pow(d as u32) as f64);
        let scale = qvol.powf(alpha / d as f64 - 1.0) * h.powi(d as i32);
        for (c, idx) in centers.iter().enumerate() {
            best[c] = best[c].max(outer[c] * sums[cube_of(idx)] * scale);
        }
    }
    best
}

/// `(avg |w^{1/p}(f - f̄)|^{p+ε})^{1/(p+ε)} / (ℓ(Q) (avg |w^{1/p}∇f|^{p-ε})^{1/(p-ε)})`
/// on the cell centres of the depth-`depth` lattice over `base`, gradients by
/// centred differences with second-order one-sided stencils at the edges.
pub fn poincare_ratio(w: ScalarFn, p: f64, eps: f64, f: ScalarFn, base: &Cube, depth: u32) -> f64 {
    let d = base.dim;
    let lo: Vec<f64> = (0..d).map(|k| base.lower(k)).collect();
    let m = 1usize << depth;
    let h = base.side() / m as f64;
    let mut idxs = Vec::new();
    for_each_index(m, d, |i| idxs.push(i.to_vec()));
    let point = |idx: &[usize]| -> Vec<f64> { idx.iter().zip(&lo).map(|(&i, &a)| a + (i as f64 + 0.5) * h).collect() };
    let fv: Vec<f64> = idxs.iter().map(|i| f(&point(i))).collect();
    let flat = |idx: &[usize]| idx.iter().fold(0, |acc, &i| acc * m + i);
    let mean = fv.iter().sum::<f64>() / fv.len() as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for (c, idx) in idxs.iter().enumerate() {
        let wp = w(&point(idx)).powf(1.0 / p);
        let mut g2 = 0.0;
        for k in 0..d {
            let nb = |s: i64| {
                let mut j = idx.clone();
                j[k] = (j[k] as i64 + s) as usize;
                fv[flat(&j)]
            };
            let g = if idx[k] == 0 {
                (4.0 * nb(1) - 3.0 * fv[c] - nb(2)) / (2.0 * h)
            } else if idx[k] == m - 1 {
                (3.0 * fv[c] - 4.0 * nb(-1) + nb(-2)) / (2.0 * h)
            } else {
                (nb(1) - nb(-1)) / (2.0 * h)
            };
            g2 += g * g;
        }
        num += (wp * (fv[c] - mean).abs()).powf(p + eps);
        den += (wp * g2.sqrt()).powf(p - eps);
    }
    let k = fv.len() as f64;
    let lhs = (num / k).powf(1.0 / (p + eps));
    let rhs = base.side() * (den / k).powf(1.0 / (p - eps));
    lhs / rhs
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_weight_has_unit_characteristic() {
        let w = |_: &[f64]| 3.0;
        assert!((apq(&w, 1.5, 3.0, &Cube::unit(2), 3, 2) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn linear_function_poincare_ratio() {
        let one = |_: &[f64]| 1.0;
        let f = |x: &[f64]| x[0];
        let r = poincare_ratio(&one, 2.0, 0.0, &f, &Cube::unit(1), 10);
        assert!((r - 1.0 / 12f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn maximal_of_constant_is_constant() {
        let one = |_: &[f64]| 1.0;
        let out = maximal(&one, 0.0, 2.0, &one, &Cube::unit(1), 5, 5);
        assert!(out.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }
}
