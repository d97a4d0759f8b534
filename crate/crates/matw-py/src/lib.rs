//! Python bindings: weights, lattice fields, characteristics, sparse
//! families, operators, inequality ratios, the elliptic solvers and the
//! acceptance suite. Reports come back as plain dicts.

use std::path::PathBuf;

use matw::analysis;
use matw::config::{self, ProblemConfig};
use matw::dyadic::{Cube, CubeFamily};
use matw::grid::{GridFunction, Lattice};
use matw::linalg::Mat;
use matw::operators::{self, OperatorKind};
use matw::pde::{self, DiscreteSolution};
use matw::sparse;
use matw::suite;
use matw::weight::{self, MatrixWeight, Method, Quadrature};
use matw::MatwError;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

fn err(e: MatwError) -> PyErr {
    match e {
        MatwError::Io(_) | MatwError::SolverFailure { .. } | MatwError::NonConvergence(_) | MatwError::LineSearchFailure(_) => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    use serde_json::Value;
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(a) => {
            let items = a.iter().map(|x| to_py(py, x)).collect::<PyResult<Vec<_>>>()?;
            PyList::new(py, items)?.into_any()
        }
        Value::Object(o) => {
            let d = PyDict::new(py);
            for (k, x) in o {
                d.set_item(k, to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

fn report<'py>(py: Python<'py>, r: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let v = serde_json::to_value(r).map_err(|e| PyValueError::new_err(e.to_string()))?;
    to_py(py, &v)
}

fn square(rows: Vec<Vec<f64>>) -> PyResult<Mat> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("expected a non-empty square matrix"));
    }
    Ok(Mat::from_row_slice(n, n, &rows.concat()))
}

fn cube(base: Option<&str>, d: usize) -> PyResult<Cube> {
    match base {
        Some(s) => Cube::parse(s).map_err(err),
        None => Ok(Cube::unit(d)),
    }
}

/// A matrix weight `W: R^d → n×n` positive definite matrices.
#[pyclass(name = "Weight", module = "matw_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyWeight {
    inner: MatrixWeight,
}

#[pymethods]
impl PyWeight {
    #[staticmethod]
    fn identity(n: usize, d: usize) -> PyWeight {
        PyWeight { inner: MatrixWeight::identity(n, d) }
    }

    #[staticmethod]
    fn constant(matrix: Vec<Vec<f64>>, d: usize) -> PyResult<PyWeight> {
        Ok(PyWeight { inner: MatrixWeight::constant(&square(matrix)?, d).map_err(err)? })
    }

    /// `W(x) = A ∘ |x|^Γ` entrywise.
    #[staticmethod]
    fn power_radial(a: Vec<Vec<f64>>, gamma: Vec<Vec<f64>>, d: usize) -> PyResult<PyWeight> {
        Ok(PyWeight { inner: MatrixWeight::power_radial(&square(a)?, &square(gamma)?, d).map_err(err)? })
    }

    /// `W(x) = A ∘ Π_k |x_k|^{Γ_k}` entrywise, one exponent matrix per axis.
    #[staticmethod]
    fn power_axis(a: Vec<Vec<f64>>, gammas: Vec<Vec<Vec<f64>>>) -> PyResult<PyWeight> {
        let g = gammas.into_iter().map(square).collect::<PyResult<Vec<_>>>()?;
        Ok(PyWeight { inner: MatrixWeight::power_axis(&square(a)?, &g).map_err(err)? })
    }

    /// Reads a weight description (TOML or JSON).
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<PyWeight> {
        Ok(PyWeight { inner: config::load_weight(&path).map_err(err)?.0 })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    fn with_id(&self, id: String) -> PyWeight {
        PyWeight { inner: self.inner.clone().with_id(id) }
    }

    /// `W(x)` as a list of rows.
    fn __call__(&self, x: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        let m = self.inner.evaluate(&x).map_err(err)?;
        Ok((0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect())
    }

    /// `W^{-p'/q}`, the weight dual to `W` for the `(p, q)` characteristic.
    fn dual(&self, p: f64, q: f64) -> PyResult<PyWeight> {
        Ok(PyWeight { inner: weight::dual_weight(&self.inner, p, q).map_err(err)? })
    }

    fn __repr__(&self) -> String {
        format!("Weight(id={:?}, n={}, d={})", self.inner.id, self.inner.n, self.inner.d)
    }
}

/// Cell values of a field on the dyadic lattice of depth `depth` over `base`.
#[pyclass(name = "Field", module = "matw_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyField {
    inner: GridFunction,
}

#[pymethods]
impl PyField {
    /// Samples `func(x) -> list[float]` (length `n`) at the cell centres.
    #[staticmethod]
    fn sample(base: &str, depth: u32, n: usize, func: Bound<'_, PyAny>) -> PyResult<PyField> {
        let lat = Lattice::new(Cube::parse(base).map_err(err)?, depth);
        let mut values = Vec::with_capacity(lat.len() * n);
        for c in 0..lat.len() {
            let v: Vec<f64> = func.call1((lat.center(c),))?.extract()?;
            if v.len() != n {
                return Err(PyValueError::new_err(format!("function returned {} values, expected {n}", v.len())));
            }
            values.extend(v);
        }
        Ok(PyField { inner: GridFunction { base: lat.base.clone(), depth, rows: n, cols: 1, values } })
    }

    /// Wraps `values`, `n` per cell, cells in row-major order.
    #[staticmethod]
    fn from_values(base: &str, depth: u32, n: usize, values: Vec<f64>) -> PyResult<PyField> {
        let f = GridFunction { base: Cube::parse(base).map_err(err)?, depth, rows: n, cols: 1, values };
        f.validate().map_err(err)?;
        Ok(PyField { inner: f })
    }

    /// Reads JSON or MATW1 by extension.
    #[staticmethod]
    #[pyo3(signature = (path, base=None))]
    fn load(path: PathBuf, base: Option<&str>) -> PyResult<PyField> {
        let base = base.map(Cube::parse).transpose().map_err(err)?;
        Ok(PyField { inner: matw::io::load_grid_function(&path, base.as_ref()).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        matw::io::save_grid_function(&path, &self.inner).map_err(err)
    }

    #[getter]
    fn values(&self) -> Vec<f64> {
        self.inner.values.clone()
    }

    #[getter]
    fn depth(&self) -> u32 {
        self.inner.depth
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.rows
    }

    fn centers(&self) -> Vec<Vec<f64>> {
        let lat = self.inner.lattice();
        (0..lat.len()).map(|c| lat.center(c)).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Truncated characteristic of `w` over the dyadic family of `base` to `depth`.
#[pyfunction]
#[pyo3(signature = (w, p, q=None, base=None, depth=4, method="definition", refine=None))]
fn characteristic(
    py: Python<'_>,
    w: &PyWeight,
    p: f64,
    q: Option<f64>,
    base: Option<&str>,
    depth: u32,
    method: &str,
    refine: Option<u32>,
) -> PyResult<Py<PyAny>> {
    let method: Method = method.parse().map_err(err)?;
    let fam = CubeFamily::new(cube(base, w.inner.d)?, depth);
    let quad = refine.map_or(Quadrature::default_for(w.inner.d), |r| Quadrature::PerCube { refine: r });
    let inner = w.inner.clone();
    let c = py.detach(move || weight::characteristic(&inner, p, q.unwrap_or(p), &fam, method, quad)).map_err(err)?;
    Ok(report(py, &c)?.unbind())
}

/// Whether the power weight `A ∘ |x|^Γ` is a matrix `A_2` weight.
#[pyfunction]
fn power_weight_is_a2(a: Vec<Vec<f64>>, gamma: Vec<Vec<f64>>, d: usize) -> PyResult<bool> {
    Ok(weight::blm_is_a2(&square(a)?, &weight::Gammas::Radial(square(gamma)?), d))
}

/// Stopping-time family; `a=None` calibrates the threshold.
#[pyfunction]
#[pyo3(signature = (w, f, p=2.0, a=None))]
fn sparse_family(py: Python<'_>, w: &PyWeight, f: &PyField, p: f64, a: Option<f64>) -> PyResult<Py<PyAny>> {
    let (wi, fi) = (w.inner.clone(), f.inner.clone());
    let fam = py.detach(move || sparse::stopping_family(&wi, &fi, p, a)).map_err(err)?;
    Ok(report(py, &fam)?.unbind())
}

fn kind(s: &str) -> PyResult<OperatorKind> {
    s.parse().map_err(err)
}

/// Output of `max`, `auxmax` or `riesz` as a field.
#[pyfunction]
#[pyo3(signature = (kind_name, w, f, alpha=0.0, p=2.0, q=None))]
fn apply_operator(py: Python<'_>, kind_name: &str, w: &PyWeight, f: &PyField, alpha: f64, p: f64, q: Option<f64>) -> PyResult<PyField> {
    let k = kind(kind_name)?;
    let q = q.unwrap_or_else(|| 1.0 / (1.0 / p - alpha / w.inner.d as f64));
    let (wi, fi) = (w.inner.clone(), f.inner.clone());
    let out = py
        .detach(move || match k {
            OperatorKind::Max => operators::maximal(&wi, alpha, q, &fi, fi.depth).map(|o| o.values),
            OperatorKind::Auxmax => operators::aux_maximal(&wi, alpha, p, q, &fi, fi.depth).map(|o| o.values),
            OperatorKind::Riesz => operators::riesz(alpha, &fi),
        })
        .map_err(err)?;
    Ok(PyField { inner: out })
}

/// Measured norm ratio of one operator on `f` with its predicted ceiling.
#[pyfunction]
#[pyo3(signature = (kind_name, w, f, alpha=0.0, p=2.0, q=None, characteristic=None))]
#[allow(clippy::too_many_arguments)]
fn operator_ratio(
    py: Python<'_>,
    kind_name: &str,
    w: &PyWeight,
    f: &PyField,
    alpha: f64,
    p: f64,
    q: Option<f64>,
    characteristic: Option<f64>,
) -> PyResult<Py<PyAny>> {
    let k = kind(kind_name)?;
    let q = q.unwrap_or_else(|| 1.0 / (1.0 / p - alpha / w.inner.d as f64));
    let (wi, fi) = (w.inner.clone(), f.inner.clone());
    let r = py.detach(move || operators::operator_ratio(k, &wi, alpha, p, q, &fi, fi.depth, characteristic)).map_err(err)?;
    Ok(report(py, &r)?.unbind())
}

#[pyfunction]
#[pyo3(signature = (w, f, p=2.0, eps=0.0))]
fn poincare_ratio(py: Python<'_>, w: &PyWeight, f: &PyField, p: f64, eps: f64) -> PyResult<Py<PyAny>> {
    Ok(report(py, &analysis::poincare_ratio(&w.inner, p, eps, &f.inner).map_err(err)?)?.unbind())
}

#[pyfunction]
#[pyo3(signature = (w, f, p=2.0, eps=0.0))]
fn sobolev_ratio(py: Python<'_>, w: &PyWeight, f: &PyField, p: f64, eps: f64) -> PyResult<Py<PyAny>> {
    Ok(report(py, &analysis::sobolev_ratio(&w.inner, p, eps, &f.inner).map_err(err)?)?.unbind())
}

#[pyfunction]
fn global_sobolev_ratio(py: Python<'_>, w: &PyWeight, f: &PyField, p: f64) -> PyResult<Py<PyAny>> {
    Ok(report(py, &analysis::global_sobolev_ratio(&w.inner, p, &f.inner).map_err(err)?)?.unbind())
}

/// Nodal finite-element solution of an elliptic Dirichlet problem.
#[pyclass(name = "Solution", module = "matw_py", frozen)]
struct PySolution {
    inner: DiscreteSolution,
}

#[pymethods]
impl PySolution {
    #[getter]
    fn values(&self) -> Vec<f64> {
        self.inner.values.clone()
    }

    #[getter]
    fn energy(&self) -> f64 {
        self.inner.energy
    }

    #[getter]
    fn energy_history(&self) -> Vec<f64> {
        self.inner.energy_history.clone()
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }

    #[getter]
    fn method(&self) -> String {
        self.inner.method.clone()
    }

    /// Interpolated value at `x`, or `None` outside the mesh.
    fn __call__(&self, x: Vec<f64>) -> Option<Vec<f64>> {
        self.inner.eval(&x)
    }
}

/// Solves the problem described by TOML `text`; relative weight files
/// resolve against `directory`.
#[pyfunction]
#[pyo3(signature = (text, directory=None))]
fn solve(py: Python<'_>, text: &str, directory: Option<PathBuf>) -> PyResult<PySolution> {
    let dir = directory.unwrap_or_else(|| PathBuf::from("."));
    let cfg: ProblemConfig = config::parse_str(text, &dir.join("problem.toml")).map_err(err)?;
    let prob = cfg.build(&dir).map_err(err)?;
    let sol = py
        .detach(move || if prob.p == 2.0 { pde::solve_linear(&prob) } else { pde::solve_plaplace(&prob) })
        .map_err(err)?;
    Ok(PySolution { inner: sol })
}

/// Runs one acceptance criterion; returns `(passed, summary line)`.
#[pyfunction]
#[pyo3(signature = (id, seed=7))]
fn run_criterion(py: Python<'_>, id: u32, seed: u64) -> (bool, String) {
    let o = py.detach(move || suite::run_criterion(&suite::Context::new(seed), id));
    (o.pass(), o.line())
}

#[pymodule]
fn matw_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyWeight>()?;
    m.add_class::<PyField>()?;
    m.add_class::<PySolution>()?;
    m.add_function(wrap_pyfunction!(characteristic, m)?)?;
    m.add_function(wrap_pyfunction!(power_weight_is_a2, m)?)?;
    m.add_function(wrap_pyfunction!(sparse_family, m)?)?;
    m.add_function(wrap_pyfunction!(apply_operator, m)?)?;
    m.add_function(wrap_pyfunction!(operator_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(poincare_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(sobolev_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(global_sobolev_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(run_criterion, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
