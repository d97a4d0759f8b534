//! Dyadic cubes on the standard grid and on the grid shifted by 1/3.
//!
//! A cube at scale `s` with integer corner `m` and shift bit `b` along an axis
//! occupies `[2^s (m + b·(-1)^s/3), 2^s (m + 1 + b·(-1)^s/3))`. The sign flip
//! with the parity of `s` is what keeps the shifted grid nested. A third
//! shift value 2 places the corner at `2^s (m + 1/2)`; such cubes (for
//! example `[-1,1)`) only serve as family roots, their children lie on the
//! standard grid. All containment tests are done on exact dyadic rationals.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{MatwError, Result};

/// Exact value `num · 2^exp`.
#[derive(Clone, Copy, Debug)]
struct Dy {
    num: i128,
    exp: i32,
}

impl Dy {
    fn from_f64(x: f64) -> Dy {
        if x == 0.0 {
            return Dy { num: 0, exp: 0 };
        }
        let bits = x.to_bits();
        let sign = if bits >> 63 == 1 { -1 } else { 1 };
        let raw_exp = ((bits >> 52) & 0x7ff) as i32;
        let frac = (bits & ((1u64 << 52) - 1)) as i128;
        let (mant, exp) = if raw_exp == 0 {
            (frac, -1074)
        } else {
            (frac | (1i128 << 52), raw_exp - 1075)
        };
        Dy { num: sign * mant, exp }
    }

    fn int(num: i128, exp: i32) -> Dy {
        Dy { num, exp }
    }

    fn scale(self, k: i128) -> Dy {
        Dy { num: self.num * k, exp: self.exp }
    }

    /// Aligns both values to the smaller exponent; returns `None` on overflow.
    fn align(a: Dy, b: Dy) -> Option<(i128, i128)> {
        let (lo, hi, swapped) = if a.exp <= b.exp { (a, b, false) } else { (b, a, true) };
        let shift = (hi.exp - lo.exp) as u32;
        let hi_num = if hi.num == 0 {
            0
        } else if shift >= 126 || hi.num.unsigned_abs().leading_zeros() <= shift + 1 {
            return None;
        } else {
            hi.num << shift
        };
        Some(if swapped { (hi_num, lo.num) } else { (lo.num, hi_num) })
    }

    fn add(self, other: Dy) -> Dy {
        match Dy::align(self, other) {
            Some((a, b)) => Dy { num: a + b, exp: self.exp.min(other.exp) },
            // one term dwarfs the other by > 70 bits: keep the larger
            None => {
                if self.exp > other.exp {
                    self
                } else {
                    other
                }
            }
        }
    }

    fn cmp(self, other: Dy) -> Ordering {
        match Dy::align(self, other) {
            Some((a, b)) => a.cmp(&b),
            None => {
                let big = if self.exp > other.exp { self.num } else { -other.num };
                if big > 0 {
                    Ordering::Greater
                } else {
                    Ordering::Less
                }
            }
        }
    }
}

/// An axis-parallel dyadic cube, possibly on the 1/3-shifted grid.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cube {
    pub corner: Vec<i64>,
    pub scale: i32,
    pub dim: usize,
    /// Per-axis shift: 0 for the standard grid, 1 for the grid shifted by 1/3,
    /// 2 for a half-cell offset.
    pub shift: Vec<u8>,
}

impl Cube {
    pub fn new(corner: Vec<i64>, scale: i32) -> Cube {
        let dim = corner.len();
        Cube { corner, scale, dim, shift: vec![0; dim] }
    }

    pub fn shifted(corner: Vec<i64>, scale: i32, shift: Vec<u8>) -> Cube {
        let dim = corner.len();
        assert_eq!(shift.len(), dim, "shift length must equal dimension");
        Cube { corner, scale, dim, shift }
    }

    /// The cube `[0,1)^d`.
    pub fn unit(dim: usize) -> Cube {
        Cube::new(vec![0; dim], 0)
    }

    /// Checks the fields of a deserialised cube for consistency.
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.corner.len() != self.dim || self.shift.len() != self.dim {
            return Err(MatwError::InvalidInput(format!(
                "cube dim {} does not match corner/shift lengths {}/{}",
                self.dim,
                self.corner.len(),
                self.shift.len()
            )));
        }
        if self.shift.iter().any(|&b| b > 2) {
            return Err(MatwError::InvalidInput("cube shift entries must be 0, 1 or 2".into()));
        }
        Ok(())
    }

    pub fn side(&self) -> f64 {
        (2.0f64).powi(self.scale)
    }

    pub fn volume(&self) -> f64 {
        (2.0f64).powi(self.scale * self.dim as i32)
    }

    fn sigma(&self, axis: usize) -> i64 {
        match self.shift[axis] {
            0 => 0,
            1 if self.scale.rem_euclid(2) == 0 => 1,
            1 => -1,
            _ => 1,
        }
    }

    /// Corner index and shift of the child along `axis` on side `b` (0 or 1).
    fn child_axis(&self, axis: usize, b: i64) -> (i64, u8) {
        let shift = if self.shift[axis] == 2 { 0 } else { self.shift[axis] };
        (2 * self.corner[axis] + self.sigma(axis) + b, shift)
    }

    /// Left endpoint along `axis` as `num · 2^scale / 6`.
    fn left_num(&self, axis: usize) -> i128 {
        let off = match self.shift[axis] {
            0 => 0,
            1 => 2 * self.sigma(axis) as i128,
            _ => 3,
        };
        6 * self.corner[axis] as i128 + off
    }

    fn left_dy(&self, axis: usize) -> Dy {
        Dy::int(self.left_num(axis), self.scale)
    }

    fn right_dy(&self, axis: usize) -> Dy {
        Dy::int(self.left_num(axis) + 6, self.scale)
    }

    pub fn lower(&self, axis: usize) -> f64 {
        self.left_num(axis) as f64 / 6.0 * self.side()
    }

    pub fn upper(&self, axis: usize) -> f64 {
        self.lower(axis) + self.side()
    }

    pub fn center(&self) -> Vec<f64> {
        (0..self.dim).map(|k| self.lower(k) + 0.5 * self.side()).collect()
    }

    /// The `2^d` children at scale `scale - 1`, in lexicographic order
    /// (axis 0 varies slowest).
    pub fn children(&self) -> Vec<Cube> {
        let d = self.dim;
        let mut out = Vec::with_capacity(1 << d);
        for bits in 0..(1usize << d) {
            let (corner, shift) = (0..d)
                .map(|k| self.child_axis(k, ((bits >> (d - 1 - k)) & 1) as i64))
                .unzip();
            out.push(Cube { corner, scale: self.scale - 1, dim: d, shift });
        }
        out
    }

    /// The unique cube one scale up in the same grid containing `self`.
    /// Half-offset axes have no such cube; there the result is a
    /// half-offset cube of twice the side that still contains `self`.
    pub fn parent(&self) -> Cube {
        let up = Cube { corner: vec![0; self.dim], scale: self.scale + 1, dim: self.dim, shift: self.shift.clone() };
        let corner = (0..self.dim)
            .map(|k| match self.shift[k] {
                2 => (self.corner[k] - 1).div_euclid(2),
                _ => (self.corner[k] - up.sigma(k)).div_euclid(2),
            })
            .collect();
        Cube { corner, ..up }
    }

    /// Descendant `depth` levels down whose position inside `self`, counted in
    /// cells of side `2^(scale - depth)`, is `local`.
    pub fn descendant(&self, depth: u32, local: &[u64]) -> Cube {
        let mut c = self.clone();
        for level in (0..depth).rev() {
            let (corner, shift) = (0..self.dim)
                .map(|k| c.child_axis(k, ((local[k] >> level) & 1) as i64))
                .unzip();
            c = Cube { corner, scale: c.scale - 1, dim: c.dim, shift };
        }
        c
    }

    /// Exact containment `other ⊆ self`.
    pub fn contains(&self, other: &Cube) -> bool {
        self.dim == other.dim
            && (0..self.dim).all(|k| {
                self.left_dy(k).cmp(other.left_dy(k)) != Ordering::Greater
                    && other.right_dy(k).cmp(self.right_dy(k)) != Ordering::Greater
            })
    }

    /// Exact test for a nonempty intersection.
    pub fn intersects(&self, other: &Cube) -> bool {
        self.dim == other.dim
            && (0..self.dim).all(|k| {
                self.left_dy(k).cmp(other.right_dy(k)) == Ordering::Less
                    && other.left_dy(k).cmp(self.right_dy(k)) == Ordering::Less
            })
    }

    /// Exact membership of a point.
    pub fn contains_point(&self, x: &[f64]) -> bool {
        x.len() == self.dim
            && (0..self.dim).all(|k| {
                let p = Dy::from_f64(x[k]).scale(6);
                self.left_dy(k).cmp(p) != Ordering::Greater && p.cmp(self.right_dy(k)) == Ordering::Less
            })
    }

    /// Parses `"[a,b)^d"` with `b - a` a power of two and `a` a multiple of
    /// it (or an odd multiple of half of it), or a product `"[a,b)x[c,e)"`.
    pub fn parse(s: &str) -> Result<Cube> {
        let bad = || MatwError::InvalidInput(format!("cannot parse cube {s:?}"));
        let s = s.trim();
        let (body, power) = match s.rsplit_once(")^") {
            Some((b, p)) => (format!("{b})"), Some(p.trim().parse::<usize>().map_err(|_| bad())?)),
            None => (s.to_string(), None),
        };
        let mut intervals = Vec::new();
        for piece in body.split(['x', '*']) {
            let piece = piece.trim();
            let inner = piece.strip_prefix('[').and_then(|r| r.strip_suffix(')')).ok_or_else(bad)?;
            let (a, b) = inner.split_once(',').ok_or_else(bad)?;
            let a: f64 = a.trim().parse().map_err(|_| bad())?;
            let b: f64 = b.trim().parse().map_err(|_| bad())?;
            intervals.push((a, b));
        }
        if let Some(p) = power {
            if intervals.len() != 1 || p == 0 {
                return Err(bad());
            }
            intervals = vec![intervals[0]; p];
        }
        let side = intervals[0].1 - intervals[0].0;
        if !(side > 0.0) {
            return Err(bad());
        }
        let scale = side.log2().round() as i32;
        if (2.0f64).powi(scale) != side {
            return Err(MatwError::InvalidInput(format!("side of {s:?} is not a power of two")));
        }
        let mut corner = Vec::new();
        let mut shift = Vec::new();
        for &(a, b) in &intervals {
            if b - a != side {
                return Err(MatwError::InvalidInput(format!("{s:?} is not a cube")));
            }
            let m = a / side;
            if m.fract() == 0.0 {
                corner.push(m as i64);
                shift.push(0);
            } else if (m - 0.5).fract() == 0.0 {
                corner.push((m - 0.5) as i64);
                shift.push(2);
            } else {
                return Err(MatwError::InvalidInput(format!("{s:?} is not dyadic")));
            }
        }
        Ok(Cube::shifted(corner, scale, shift))
    }
}

/// An arbitrary axis-parallel cube `corner + [0, side)^d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealCube {
    pub corner: Vec<f64>,
    pub side: f64,
}

impl RealCube {
    pub fn new(corner: Vec<f64>, side: f64) -> RealCube {
        RealCube { corner, side }
    }

    /// Exact containment of this cube in a dyadic cube.
    pub fn inside(&self, q: &Cube) -> bool {
        let side = Dy::from_f64(self.side).scale(6);
        (0..q.dim).all(|k| {
            let a = Dy::from_f64(self.corner[k]).scale(6);
            let b = a.add(side);
            q.left_dy(k).cmp(a) != Ordering::Greater && b.cmp(q.right_dy(k)) != Ordering::Greater
        })
    }
}

/// Finds a shift `t ∈ {0,1/3}^d` and a cube of the shifted grid containing `q`
/// whose side is at most six times that of `q`.
pub fn shifted_cover(q: &RealCube) -> (Vec<u8>, Cube) {
    let d = q.corner.len();
    assert!(q.side > 0.0, "cube side must be positive");
    let mut s = q.side.log2().floor() as i32;
    while (2.0f64).powi(s) < q.side {
        s += 1;
    }
    loop {
        let mut corner = Vec::with_capacity(d);
        let mut shift = Vec::with_capacity(d);
        for k in 0..d {
            let one = RealCube { corner: vec![q.corner[k]], side: q.side };
            let found = [0u8, 1u8].into_iter().find_map(|b| {
                let probe = Cube::shifted(vec![0], s, vec![b]);
                let sigma = probe.sigma(0) as f64;
                let guess = (q.corner[k] / (2.0f64).powi(s) - sigma / 3.0).floor() as i64;
                (guess - 1..=guess + 1).find_map(|m| {
                    let c = Cube::shifted(vec![m], s, vec![b]);
                    one.inside(&c).then_some((m, b))
                })
            });
            match found {
                Some((m, b)) => {
                    corner.push(m);
                    shift.push(b);
                }
                None => break,
            }
        }
        if corner.len() == d {
            let cube = Cube::shifted(corner, s, shift.clone());
            return (shift, cube);
        }
        s += 1;
        debug_assert!((2.0f64).powi(s) <= 6.0 * q.side, "cover search exceeded the side bound");
    }
}

/// All dyadic descendants of `base` down to `depth` levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CubeFamily {
    pub base: Cube,
    pub depth: u32,
}

impl CubeFamily {
    pub fn new(base: Cube, depth: u32) -> CubeFamily {
        CubeFamily { base, depth }
    }

    pub fn count(&self) -> u64 {
        let d = self.base.dim as u32;
        (0..=self.depth).map(|j| 1u64 << (j * d)).sum()
    }

    /// Members coarse-to-fine, each level in lexicographic order.
    pub fn enumerate(&self) -> Vec<Cube> {
        let mut out = Vec::with_capacity(self.count() as usize);
        let mut level = vec![self.base.clone()];
        for j in 0..=self.depth {
            out.extend(level.iter().cloned());
            if j < self.depth {
                level = level.iter().flat_map(|c| c.children()).collect();
            }
        }
        out
    }

    /// Short label used in reports.
    pub fn label(&self) -> String {
        let b = &self.base;
        let lo: Vec<String> = (0..b.dim).map(|k| format!("{}", b.lower(k))).collect();
        format!("[{}]+{}^{} K={}", lo.join(","), b.side(), b.dim, self.depth)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn children_of_unit_interval() {
        let kids = Cube::unit(1).children();
        assert_eq!(kids.len(), 2);
        assert_eq!((kids[0].lower(0), kids[0].upper(0)), (0.0, 0.5));
        assert_eq!((kids[1].lower(0), kids[1].upper(0)), (0.5, 1.0));
    }

    #[test]
    fn children_of_unit_square_are_quadrants() {
        let kids = Cube::unit(2).children();
        let corners: Vec<(f64, f64)> = kids.iter().map(|c| (c.lower(0), c.lower(1))).collect();
        assert_eq!(corners, vec![(0.0, 0.0), (0.0, 0.5), (0.5, 0.0), (0.5, 0.5)]);
    }

    #[test]
    fn children_volume_in_3d() {
        let q = Cube::shifted(vec![3, -2, 5], 2, vec![1, 0, 1]);
        let kids = q.children();
        assert_eq!(kids.len(), 8);
        let vol: f64 = kids.iter().map(Cube::volume).sum();
        assert_eq!(vol, q.volume());
        assert!(kids.iter().all(|k| q.contains(k)));
    }

    #[test]
    fn shifted_children_tile_parent() {
        for scale in -3..3 {
            let q = Cube::shifted(vec![7], scale, vec![1]);
            let kids = q.children();
            assert_eq!(kids[0].lower(0), q.lower(0));
            assert_eq!(kids[0].upper(0), kids[1].lower(0));
            assert_eq!(kids[1].upper(0), q.upper(0));
            assert!(kids.iter().all(|k| k.parent() == q));
        }
    }

    #[test]
    fn cover_of_example_interval() {
        let q = RealCube::new(vec![0.9], 1.0);
        let (_, c) = shifted_cover(&q);
        assert!(q.inside(&c));
        assert!(c.side() == 2.0 || c.side() == 4.0);
    }

    #[test]
    fn cover_of_dyadic_cube_is_itself() {
        let q = RealCube::new(vec![0.5, 0.25], 0.25);
        let (t, c) = shifted_cover(&q);
        assert_eq!(t, vec![0, 0]);
        assert_eq!(c, Cube::new(vec![2, 1], -2));
    }

    #[test]
    fn family_counts() {
        assert_eq!(CubeFamily::new(Cube::unit(2), 0).enumerate(), vec![Cube::unit(2)]);
        assert_eq!(CubeFamily::new(Cube::unit(2), 2).enumerate().len(), 21);
        for d in 1..=3usize {
            for k in 0..=10u32 {
                if d == 3 && k > 6 {
                    continue;
                }
                let fam = CubeFamily::new(Cube::unit(d), k);
                let expect: u64 = (0..=k).map(|j| 2u64.pow(j * d as u32)).sum();
                assert_eq!(fam.count(), expect);
                if d * (k as usize) <= 12 {
                    assert_eq!(fam.enumerate().len() as u64, expect);
                }
            }
        }
    }

    #[test]
    fn deep_family_is_nested_or_disjoint() {
        let fam = CubeFamily::new(Cube::shifted(vec![-1], 1, vec![1]), 10).enumerate();
        assert_eq!(fam.len(), 2047);
        // cubes at the same scale are disjoint, across scales nested or disjoint
        for (i, p) in fam.iter().enumerate().step_by(7) {
            for q in &fam[i + 1..] {
                if p.intersects(q) {
                    assert!(p.contains(q) || q.contains(p));
                }
            }
        }
    }

    #[test]
    fn parse_cube_strings() {
        let half = Cube::parse("[-1,1)^2").unwrap();
        assert_eq!(half, Cube::shifted(vec![-1, -1], 1, vec![2, 2]));
        assert_eq!((half.lower(0), half.upper(1)), (-1.0, 1.0));
        let kids = half.children();
        assert_eq!(kids[0], Cube::new(vec![-1, -1], 0));
        assert_eq!(kids[3], Cube::new(vec![0, 0], 0));
        assert!(kids.iter().all(|k| half.contains(k) && half.parent().contains(k)));
        assert_eq!(Cube::parse("[-2,0)^1").unwrap(), Cube::new(vec![-1], 1));
        assert_eq!(Cube::parse("[0,0.5)x[0.5,1)").unwrap(), Cube::new(vec![0, 1], -1));
        assert!(Cube::parse("[0,3)^1").is_err());
    }

    #[test]
    fn json_round_trip() {
        let q = Cube::shifted(vec![1, -3], -4, vec![0, 1]);
        let s = serde_json::to_string(&q).unwrap();
        assert_eq!(s, r#"{"corner":[1,-3],"scale":-4,"dim":2,"shift":[0,1]}"#);
        assert_eq!(serde_json::from_str::<Cube>(&s).unwrap(), q);
    }

    proptest! {
        #[test]
        fn cover_contains_and_is_small(
            d in 1usize..=3,
            corner in proptest::collection::vec(-50.0f64..50.0, 3),
            log_side in -12.0f64..4.0,
        ) {
            let q = RealCube::new(corner[..d].to_vec(), (2.0f64).powf(log_side));
            let (t, c) = shifted_cover(&q);
            prop_assert_eq!(t, c.shift.clone());
            prop_assert!(q.inside(&c));
            prop_assert!(c.side() >= q.side);
            prop_assert!(c.side() <= 6.0 * q.side);
        }

        #[test]
        fn same_grid_cubes_are_nested_or_disjoint(
            m1 in -40i64..40, m2 in -40i64..40, s1 in -4i32..3, s2 in -4i32..3, b in 0u8..2,
        ) {
            let p = Cube::shifted(vec![m1], s1, vec![b]);
            let q = Cube::shifted(vec![m2], s2, vec![b]);
            if p.intersects(&q) {
                prop_assert!(p.contains(&q) || q.contains(&p));
            }
        }

        #[test]
        fn descendant_matches_repeated_children(depth in 0u32..6, i in 0u64..64, j in 0u64..64) {
            let base = Cube::shifted(vec![2, -1], 0, vec![1, 0]);
            let n = 1u64 << depth;
            let local = [i % n, j % n];
            let c = base.descendant(depth, &local);
            prop_assert!(base.contains(&c));
            prop_assert!((c.lower(0) - (base.lower(0) + local[0] as f64 * c.side())).abs() < 1e-12);
            prop_assert!((c.lower(1) - (base.lower(1) + local[1] as f64 * c.side())).abs() < 1e-12);
        }
    }
}
