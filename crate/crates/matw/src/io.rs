//! The MATW1 binary lattice format, grid-function files, and solution
//! files with their JSON sidecars.
//!
//! MATW1 layout, little endian: the five bytes `MATW1`, `u32 n`, `u32 d`,
//! `d` per-axis point counts as `u32`, then `f64` values point by point in
//! row-major point order (axis 0 slowest). Each point carries the same
//! number of values, inferred from the payload length: `n·n` for a matrix
//! weight, `n` for a vector field.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dyadic::Cube;
use crate::error::{MatwError, Result};
use crate::grid::{GridFunction, Lattice};
use crate::pde::DiscreteSolution;
use crate::weight::MatrixWeight;

const MAGIC: &[u8; 5] = b"MATW1";

#[derive(Clone, Debug, PartialEq)]
pub struct Matw1 {
    pub n: u32,
    pub dims: Vec<u32>,
    pub values: Vec<f64>,
}

impl Matw1 {
    pub fn points(&self) -> usize {
        self.dims.iter().map(|&k| k as usize).product()
    }

    pub fn per_point(&self) -> usize {
        self.values.len() / self.points().max(1)
    }

    /// Depth `K` when every axis has `2^K` points.
    pub fn dyadic_depth(&self) -> Result<u32> {
        let first = *self.dims.first().ok_or_else(|| MatwError::Format("no axes".into()))?;
        if !first.is_power_of_two() || self.dims.iter().any(|&k| k != first) {
            return Err(MatwError::Format(format!("axes {:?} are not equal powers of two", self.dims)));
        }
        Ok(first.trailing_zeros())
    }
}

pub fn write_matw1(mut w: impl Write, m: &Matw1) -> Result<()> {
    if m.points() == 0 || m.values.len() % m.points() != 0 {
        return Err(MatwError::Format(format!("{} values do not fill {} points", m.values.len(), m.points())));
    }
    w.write_all(MAGIC)?;
    w.write_all(&m.n.to_le_bytes())?;
    w.write_all(&(m.dims.len() as u32).to_le_bytes())?;
    for k in &m.dims {
        w.write_all(&k.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(m.values.len() * 8);
    for v in &m.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| MatwError::Format("truncated header".into()))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_matw1(mut r: impl Read) -> Result<Matw1> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(|_| MatwError::Format("file shorter than the magic".into()))?;
    if &magic != MAGIC {
        return Err(MatwError::Format("bad magic, expected MATW1".into()));
    }
    let n = read_u32(&mut r)?;
    let d = read_u32(&mut r)?;
    if d == 0 || d > 8 {
        return Err(MatwError::Format(format!("implausible dimension {d}")));
    }
    let dims = (0..d).map(|_| read_u32(&mut r)).collect::<Result<Vec<u32>>>()?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if rest.len() % 8 != 0 {
        return Err(MatwError::Format("payload is not a whole number of f64".into()));
    }
    let values: Vec<f64> = rest.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let m = Matw1 { n, dims, values };
    let pts = m.points();
    if pts == 0 || m.values.len() % pts != 0 || m.values.is_empty() {
        return Err(MatwError::Format(format!("{} values do not fill {pts} points", m.values.len())));
    }
    Ok(m)
}

pub fn read_matw1_file(path: &Path) -> Result<Matw1> {
    read_matw1(std::io::BufReader::new(std::fs::File::open(path)?))
}

pub fn write_matw1_file(path: &Path, m: &Matw1) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_matw1(&mut f, m)?;
    f.flush()?;
    Ok(())
}

/// A sampled weight from a MATW1 file whose axes tile `base` dyadically.
pub fn weight_from_matw1(m: &Matw1, base: &Cube) -> Result<MatrixWeight> {
    let depth = m.dyadic_depth()?;
    if m.dims.len() != base.dim {
        return Err(MatwError::DimensionMismatch(format!("file has {} axes, base cube {}", m.dims.len(), base.dim)));
    }
    let n = m.n as usize;
    if m.per_point() != n * n {
        return Err(MatwError::Format(format!("expected {} values per point, found {}", n * n, m.per_point())));
    }
    MatrixWeight::sampled(Lattice::new(base.clone(), depth), n, m.values.clone())
}

pub fn grid_to_matw1(f: &GridFunction) -> Matw1 {
    let k = 1u32 << f.depth;
    Matw1 { n: f.rows as u32, dims: vec![k; f.base.dim], values: f.values.clone() }
}

/// Reads a grid function from JSON, or from MATW1 over `base` (unit cube
/// if `None`). MATW1 points carry `n` values (a vector) or `n·cols` values.
pub fn load_grid_function(path: &Path, base: Option<&Cube>) -> Result<GridFunction> {
    let is_json = path.extension().is_some_and(|e| e == "json");
    let g = if is_json {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str::<GridFunction>(&text).map_err(|e| MatwError::Format(format!("{}: {e}", path.display())))?
    } else {
        let m = read_matw1_file(path)?;
        let depth = m.dyadic_depth()?;
        let base = base.cloned().unwrap_or_else(|| Cube::unit(m.dims.len()));
        if base.dim != m.dims.len() {
            return Err(MatwError::DimensionMismatch(format!("file has {} axes, base cube {}", m.dims.len(), base.dim)));
        }
        let rows = m.n as usize;
        let per = m.per_point();
        if rows == 0 || per % rows != 0 {
            return Err(MatwError::Format(format!("{per} values per point is not a multiple of n = {rows}")));
        }
        GridFunction { base, depth, rows, cols: per / rows, values: m.values }
    };
    g.validate()?;
    Ok(g)
}

pub fn save_grid_function(path: &Path, f: &GridFunction) -> Result<()> {
    if path.extension().is_some_and(|e| e == "json") {
        std::fs::write(path, serde_json::to_string(f).map_err(|e| MatwError::Format(e.to_string()))?)?;
        Ok(())
    } else {
        write_matw1_file(path, &grid_to_matw1(f))
    }
}

/// JSON stored next to a solution file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolutionSidecar {
    pub solution: DiscreteSolution,
    /// The problem description the solution came from.
    pub problem: serde_json::Value,
    pub meta: serde_json::Value,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes nodal values as MATW1 (`(2^K+1)^d` points, `width` values each)
/// and the metadata to `<path>.json`.
pub fn save_solution(path: &Path, sol: &DiscreteSolution, problem: serde_json::Value, meta: serde_json::Value) -> Result<()> {
    let k = sol.mesh.elements_per_axis() as u32 + 1;
    let m = Matw1 { n: sol.n as u32, dims: vec![k; sol.mesh.dim()], values: sol.values.clone() };
    write_matw1_file(path, &m)?;
    let side = SolutionSidecar { solution: sol.clone(), problem, meta };
    let text = serde_json::to_string_pretty(&side).map_err(|e| MatwError::Format(e.to_string()))?;
    std::fs::write(sidecar_path(path), text)?;
    Ok(())
}

pub fn load_solution(path: &Path) -> Result<SolutionSidecar> {
    let text = std::fs::read_to_string(sidecar_path(path))?;
    let mut side: SolutionSidecar =
        serde_json::from_str(&text).map_err(|e| MatwError::Format(format!("{}: {e}", sidecar_path(path).display())))?;
    let m = read_matw1_file(path)?;
    let sol = &mut side.solution;
    let k = sol.mesh.elements_per_axis() as u32 + 1;
    if m.dims != vec![k; sol.mesh.dim()] || m.values.len() != m.points() * sol.width() {
        return Err(MatwError::Format("solution file does not match its sidecar".into()));
    }
    sol.values = m.values;
    Ok(side)
}
