//! Regular lattices of cells over a dyadic base cube and functions sampled on them.

use serde::{Deserialize, Serialize};

use crate::dyadic::Cube;
use crate::error::{MatwError, Result};
use crate::linalg;

/// The `2^(depth·d)` cells of side `ℓ(base)/2^depth` tiling `base`.
/// Cells are numbered row-major with axis 0 slowest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    pub base: Cube,
    pub depth: u32,
}

impl Lattice {
    pub fn new(base: Cube, depth: u32) -> Lattice {
        Lattice { base, depth }
    }

    pub fn dim(&self) -> usize {
        self.base.dim
    }

    pub fn per_axis(&self) -> usize {
        1usize << self.depth
    }

    pub fn len(&self) -> usize {
        self.per_axis().pow(self.dim() as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Cell side length.
    pub fn h(&self) -> f64 {
        self.base.side() / self.per_axis() as f64
    }

    pub fn cell_volume(&self) -> f64 {
        self.h().powi(self.dim() as i32)
    }

    pub fn origin(&self) -> Vec<f64> {
        (0..self.dim()).map(|k| self.base.lower(k)).collect()
    }

    pub fn multi(&self, flat: usize) -> Vec<usize> {
        let n = self.per_axis();
        let d = self.dim();
        let mut out = vec![0; d];
        let mut r = flat;
        for k in (0..d).rev() {
            out[k] = r % n;
            r /= n;
        }
        out
    }

    pub fn flat(&self, idx: &[usize]) -> usize {
        let n = self.per_axis();
        idx.iter().fold(0, |acc, &i| acc * n + i)
    }

    pub fn center(&self, flat: usize) -> Vec<f64> {
        let h = self.h();
        let o = self.origin();
        self.multi(flat).iter().zip(o).map(|(&i, lo)| lo + (i as f64 + 0.5) * h).collect()
    }

    /// Cell containing `x`, if any (cells are half-open).
    pub fn locate(&self, x: &[f64]) -> Option<usize> {
        let h = self.h();
        let n = self.per_axis();
        let mut idx = Vec::with_capacity(self.dim());
        for (k, &xk) in x.iter().enumerate() {
            let t = ((xk - self.base.lower(k)) / h).floor();
            if t < 0.0 || t >= n as f64 {
                return None;
            }
            idx.push(t as usize);
        }
        Some(self.flat(&idx))
    }

    /// For each cell, the index of the dyadic descendant of `base` at `level`
    /// containing it (row-major among the `2^(level·d)` cubes of that level).
    pub fn level_ids(&self, level: u32) -> Vec<usize> {
        assert!(level <= self.depth);
        let shift = self.depth - level;
        let m = 1usize << level;
        (0..self.len())
            .map(|c| self.multi(c).iter().fold(0, |acc, &i| acc * m + (i >> shift)))
            .collect()
    }

    /// Cells of every cube at `level`, grouped by cube index.
    pub fn blocks(&self, level: u32) -> Vec<Vec<usize>> {
        let ids = self.level_ids(level);
        let count = 1usize << (level as usize * self.dim());
        let mut out = vec![Vec::with_capacity(self.len() / count); count];
        for (c, &id) in ids.iter().enumerate() {
            out[id].push(c);
        }
        out
    }

    /// The dyadic cube at `level` with row-major index `id`.
    pub fn cube(&self, level: u32, id: usize) -> Cube {
        let m = 1usize << level;
        let d = self.dim();
        let mut local = vec![0u64; d];
        let mut r = id;
        for k in (0..d).rev() {
            local[k] = (r % m) as u64;
            r /= m;
        }
        self.base.descendant(level, &local)
    }
}

/// Values in `R^{rows×cols}` (a vector when `cols == 1`) at each lattice cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    pub base: Cube,
    pub depth: u32,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn zeros(lattice: &Lattice, rows: usize, cols: usize) -> GridFunction {
        GridFunction {
            base: lattice.base.clone(),
            depth: lattice.depth,
            rows,
            cols,
            values: vec![0.0; lattice.len() * rows * cols],
        }
    }

    /// Samples `f` at cell centres; `f` returns `rows·cols` numbers row-major.
    pub fn from_fn(lattice: &Lattice, rows: usize, cols: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> GridFunction {
        let mut g = GridFunction::zeros(lattice, rows, cols);
        let w = rows * cols;
        for c in 0..lattice.len() {
            let v = f(&lattice.center(c));
            assert_eq!(v.len(), w, "sampled value has the wrong length");
            g.values[c * w..(c + 1) * w].copy_from_slice(&v);
        }
        g
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        let expect = self.lattice().len() * self.rows * self.cols;
        if self.values.len() != expect {
            return Err(MatwError::DimensionMismatch(format!(
                "grid function has {} values, expected {expect}",
                self.values.len()
            )));
        }
        Ok(())
    }

    pub fn lattice(&self) -> Lattice {
        Lattice::new(self.base.clone(), self.depth)
    }

    pub fn width(&self) -> usize {
        self.rows * self.cols
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.width()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn at(&self, cell: usize) -> &[f64] {
        let w = self.width();
        &self.values[cell * w..(cell + 1) * w]
    }

    /// Pointwise magnitude: Euclidean for vectors, spectral for matrices.
    pub fn magnitude(&self, cell: usize) -> f64 {
        let v = self.at(cell);
        if self.cols == 1 {
            v.iter().map(|x| x * x).sum::<f64>().sqrt()
        } else {
            let m = nalgebra::DMatrix::from_row_slice(self.rows, self.cols, v);
            linalg::spectral_norm(&m)
        }
    }

    /// Unweighted `L^p` norm by the midpoint rule.
    pub fn lp_norm(&self, p: f64) -> f64 {
        let vol = self.lattice().cell_volume();
        let s: f64 = (0..self.len()).map(|c| self.magnitude(c).powf(p)).sum();
        (s * vol).powf(1.0 / p)
    }

    pub fn scaled(&self, c: f64) -> GridFunction {
        let mut g = self.clone();
        g.values.iter_mut().for_each(|v| *v *= c);
        g
    }

    pub fn add(&self, other: &GridFunction) -> GridFunction {
        let mut g = self.clone();
        g.values.iter_mut().zip(&other.values).for_each(|(a, b)| *a += b);
        g
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blocks_partition_cells() {
        let lat = Lattice::new(Cube::new(vec![-1, -1], 1), 3);
        for level in 0..=3 {
            let blocks = lat.blocks(level);
            assert_eq!(blocks.len(), 1 << (2 * level));
            let total: usize = blocks.iter().map(Vec::len).sum();
            assert_eq!(total, lat.len());
            for (id, cells) in blocks.iter().enumerate() {
                let q = lat.cube(level, id);
                assert!(cells.iter().all(|&c| q.contains_point(&lat.center(c))));
            }
        }
    }

    #[test]
    fn locate_inverts_center() {
        let lat = Lattice::new(Cube::shifted(vec![0, 2], -1, vec![1, 0]), 4);
        for c in [0, 17, 100, 255] {
            assert_eq!(lat.locate(&lat.center(c)), Some(c));
        }
    }

    #[test]
    fn lp_norm_of_constant() {
        let lat = Lattice::new(Cube::unit(2), 3);
        let g = GridFunction::from_fn(&lat, 2, 1, |_| vec![3.0, 4.0]);
        assert!((g.lp_norm(2.0) - 5.0).abs() < 1e-12);
    }
}
