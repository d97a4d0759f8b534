//! TOML/JSON configuration: weight descriptions, elliptic problems with
//! expression-valued data, and experiment sweeps. Unknown keys are errors.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use evalexpr::error::EvalexprResultValue;
use evalexpr::{Context, EvalexprError, EvalexprResult, Node, Value};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dyadic::Cube;
use crate::error::{MatwError, Result};
use crate::linalg::{self, Mat};
use crate::pde::{CoefficientForm, Domain, EllipticProblem, Mesh, Sampling, Source};
use crate::weight::{Method, MatrixWeight};

/// Lower-case hex SHA-256 of a config file's bytes.
pub fn config_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Parses TOML, or JSON when `path` ends in `.json`.
pub fn parse_str<T: DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    let shown = path.display();
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(text).map_err(|e| MatwError::Config(format!("{shown}: {e}")))
    } else {
        toml::from_str(text).map_err(|e| MatwError::Config(format!("{shown}: {e}")))
    }
}

/// Reads and parses a config file, returning it with its hash.
pub fn load<T: DeserializeOwned>(path: &Path) -> Result<(T, String)> {
    let bytes = std::fs::read(path).map_err(|e| MatwError::Config(format!("{}: {e}", path.display())))?;
    let text = String::from_utf8(bytes.clone()).map_err(|_| MatwError::Config(format!("{}: not UTF-8", path.display())))?;
    Ok((parse_str(&text, path)?, config_hash(&bytes)))
}

/// Rewrites integer literals as floats so that `1/2` means one half.
fn floatify(text: &str) -> String {
    let b = text.as_bytes();
    let mut out = Vec::with_capacity(b.len() + 8);
    let mut i = 0;
    while i < b.len() {
        let c = b[i];
        let starts = c.is_ascii_digit() && (i == 0 || !(b[i - 1].is_ascii_alphanumeric() || b[i - 1] == b'_' || b[i - 1] == b'.'));
        if !starts {
            out.push(c);
            i += 1;
            continue;
        }
        let mut j = i;
        while j < b.len() && b[j].is_ascii_digit() {
            j += 1;
        }
        let mut is_float = false;
        if j < b.len() && b[j] == b'.' {
            is_float = true;
            j += 1;
            while j < b.len() && b[j].is_ascii_digit() {
                j += 1;
            }
        }
        if j < b.len() && (b[j] == b'e' || b[j] == b'E') {
            let mut k = j + 1;
            if k < b.len() && (b[k] == b'+' || b[k] == b'-') {
                k += 1;
            }
            if k < b.len() && b[k].is_ascii_digit() {
                is_float = true;
                j = k;
                while j < b.len() && b[j].is_ascii_digit() {
                    j += 1;
                }
            }
        }
        out.extend_from_slice(&b[i..j]);
        if !is_float {
            out.extend_from_slice(b".0");
        } else if b[j - 1] == b'.' {
            out.push(b'0');
        }
        i = j;
    }
    String::from_utf8(out).expect("only ASCII was inserted")
}

/// Variables `x, y, z` (also `x0, x1, x2`) and `pi`; functions `sin cos tan
/// exp ln sqrt abs` and two-argument `atan2 pow min max`.
struct PointContext {
    vars: Vec<(&'static str, Value)>,
}

impl PointContext {
    fn new(x: &[f64]) -> PointContext {
        let mut vars = vec![("pi", Value::Float(std::f64::consts::PI))];
        for (k, (a, b)) in [("x", "x0"), ("y", "x1"), ("z", "x2")].into_iter().enumerate() {
            let v = x.get(k).copied().unwrap_or(0.0);
            vars.push((a, Value::Float(v)));
            vars.push((b, Value::Float(v)));
        }
        PointContext { vars }
    }
}

fn two_args(v: &Value) -> EvalexprResult<(f64, f64)> {
    let t = v.as_fixed_len_tuple(2)?;
    Ok((t[0].as_number()?, t[1].as_number()?))
}

impl Context for PointContext {
    type NumericTypes = evalexpr::DefaultNumericTypes;

    fn get_value(&self, identifier: &str) -> Option<&Value> {
        self.vars.iter().find(|v| v.0 == identifier).map(|v| &v.1)
    }

    fn call_function(&self, identifier: &str, argument: &Value) -> EvalexprResultValue {
        let one = |f: fn(f64) -> f64| -> EvalexprResultValue { Ok(Value::Float(f(argument.as_number()?))) };
        match identifier {
            "sin" => one(f64::sin),
            "cos" => one(f64::cos),
            "tan" => one(f64::tan),
            "exp" => one(f64::exp),
            "ln" => one(f64::ln),
            "sqrt" => one(f64::sqrt),
            "abs" => one(f64::abs),
            "atan2" => two_args(argument).map(|(a, b)| Value::Float(a.atan2(b))),
            "pow" => two_args(argument).map(|(a, b)| Value::Float(a.powf(b))),
            "min" => two_args(argument).map(|(a, b)| Value::Float(a.min(b))),
            "max" => two_args(argument).map(|(a, b)| Value::Float(a.max(b))),
            _ => Err(EvalexprError::FunctionIdentifierNotFound(identifier.to_string())),
        }
    }

    fn are_builtin_functions_disabled(&self) -> bool {
        false
    }

    fn set_builtin_functions_disabled(&mut self, _disabled: bool) -> EvalexprResult<()> {
        Err(EvalexprError::ContextNotMutable)
    }
}

/// A scalar expression of the point coordinates.
#[derive(Clone, Debug)]
pub struct Expr {
    pub text: String,
    node: Node,
}

impl Expr {
    pub fn parse(text: &str) -> Result<Expr> {
        let node = evalexpr::build_operator_tree(&floatify(text))
            .map_err(|e| MatwError::Config(format!("expression {text:?}: {e}")))?;
        Ok(Expr { text: text.to_string(), node })
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        self.node
            .eval_number_with_context(&PointContext::new(x))
            .map_err(|e| MatwError::Config(format!("expression {:?} at {x:?}: {e}", self.text)))
    }
}

/// Compiles expressions into a vector field, checking them once at `probe`.
pub fn expression_field(exprs: &[String], probe: &[f64]) -> Result<Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>> {
    let parsed: Vec<Expr> = exprs.iter().map(|e| Expr::parse(e)).collect::<Result<_>>()?;
    for e in &parsed {
        e.eval(probe)?;
    }
    Ok(Arc::new(move |x: &[f64]| parsed.iter().map(|e| e.eval(x).unwrap_or(f64::NAN)).collect()))
}

/// A weight description file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightSpec {
    Identity {
        n: usize,
        d: usize,
        #[serde(default)]
        id: Option<String>,
    },
    Constant {
        n: usize,
        d: usize,
        /// Row-major `n×n`.
        matrix: Vec<f64>,
        #[serde(default)]
        id: Option<String>,
    },
    /// `a_ij |x|^{γ_ij}`.
    PowerRadial {
        n: usize,
        d: usize,
        a: Vec<f64>,
        gamma: Vec<f64>,
        #[serde(default)]
        id: Option<String>,
    },
    /// `a_ij Π_k |x_k|^{γ^k_ij}`, one row-major table per axis.
    PowerAxis {
        n: usize,
        a: Vec<f64>,
        gamma: Vec<Vec<f64>>,
        #[serde(default)]
        id: Option<String>,
    },
    /// A MATW1 lattice of matrices over `base`, path relative to the config.
    File {
        path: PathBuf,
        base: String,
        #[serde(default)]
        id: Option<String>,
    },
}

fn square(v: &[f64], n: usize, what: &str) -> Result<Mat> {
    if v.len() != n * n {
        return Err(MatwError::Config(format!("{what} needs {} entries for n = {n}, got {}", n * n, v.len())));
    }
    Ok(linalg::from_flat(v, n))
}

impl WeightSpec {
    pub fn id(&self) -> Option<&String> {
        match self {
            WeightSpec::Identity { id, .. }
            | WeightSpec::Constant { id, .. }
            | WeightSpec::PowerRadial { id, .. }
            | WeightSpec::PowerAxis { id, .. }
            | WeightSpec::File { id, .. } => id.as_ref(),
        }
    }

    /// Builds the weight; relative file paths resolve against `dir`.
    pub fn build(&self, dir: &Path) -> Result<MatrixWeight> {
        let (w, id) = match self {
            WeightSpec::Identity { n, d, id } => (MatrixWeight::identity(*n, *d), id),
            WeightSpec::Constant { n, d, matrix, id } => (MatrixWeight::constant(&square(matrix, *n, "matrix")?, *d)?, id),
            WeightSpec::PowerRadial { n, d, a, gamma, id } => {
                (MatrixWeight::power_radial(&square(a, *n, "a")?, &square(gamma, *n, "gamma")?, *d)?, id)
            }
            WeightSpec::PowerAxis { n, a, gamma, id } => {
                let g = gamma.iter().map(|t| square(t, *n, "gamma")).collect::<Result<Vec<_>>>()?;
                (MatrixWeight::power_axis(&square(a, *n, "a")?, &g)?, id)
            }
            WeightSpec::File { path, base, id } => {
                let full = if path.is_absolute() { path.clone() } else { dir.join(path) };
                let m = crate::io::read_matw1_file(&full)?;
                (crate::io::weight_from_matw1(&m, &Cube::parse(base)?)?, id)
            }
        };
        w.validate()?;
        Ok(match id {
            Some(id) => w.with_id(id.clone()),
            None => w,
        })
    }
}

/// Loads a weight description, returning the weight and the file hash.
pub fn load_weight(path: &Path) -> Result<(MatrixWeight, String)> {
    let (spec, hash): (WeightSpec, String) = load(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let w = spec.build(dir)?;
    let w = if spec.id().is_none() {
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        w.with_id(stem)
    } else {
        w
    };
    Ok((w, hash))
}

fn default_p() -> f64 {
    2.0
}

fn default_form() -> CoefficientForm {
    CoefficientForm::Weight
}

fn default_sampling() -> Sampling {
    Sampling::Barycenter
}

/// An elliptic Dirichlet problem. Exactly one of `weight` and `weight_file`
/// is given. `boundary` holds one expression per real unknown, `source`
/// (optional) one per entry of the row-major `n×d` field `F`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub base: String,
    pub depth: u32,
    #[serde(default)]
    pub weight: Option<WeightSpec>,
    #[serde(default)]
    pub weight_file: Option<PathBuf>,
    #[serde(default = "default_form")]
    pub coefficient: CoefficientForm,
    #[serde(default = "default_sampling")]
    pub sampling: Sampling,
    #[serde(default)]
    pub eig_floor: Option<f64>,
    #[serde(default = "default_p")]
    pub p: f64,
    pub boundary: Vec<String>,
    #[serde(default)]
    pub source: Option<Vec<String>>,
    #[serde(default)]
    pub domain: Option<Domain>,
    #[serde(default)]
    pub tol: Option<f64>,
    #[serde(default)]
    pub max_iter: Option<usize>,
}

impl ProblemConfig {
    pub fn weight(&self, dir: &Path) -> Result<MatrixWeight> {
        match (&self.weight, &self.weight_file) {
            (Some(spec), None) => spec.build(dir),
            (None, Some(file)) => {
                let full = if file.is_absolute() { file.clone() } else { dir.join(file) };
                Ok(load_weight(&full)?.0)
            }
            _ => Err(MatwError::Config("give exactly one of `weight` and `weight_file`".into())),
        }
    }

    pub fn build(&self, dir: &Path) -> Result<EllipticProblem> {
        let base = Cube::parse(&self.base)?;
        let w = self.weight(dir)?;
        let mut prob = EllipticProblem::new(Mesh::new(base.clone(), self.depth), w);
        prob.form = self.coefficient.clone();
        prob.sampling = self.sampling;
        prob.p = self.p;
        if let Some(f) = self.eig_floor {
            prob.eig_floor = f;
        }
        if let Some(t) = self.tol {
            prob.tol = t;
        }
        if let Some(m) = self.max_iter {
            prob.max_iter = m;
        }
        if let Some(dom) = &self.domain {
            prob.domain = dom.clone();
        }
        let probe = base.center();
        if self.boundary.len() != prob.width() {
            return Err(MatwError::Config(format!("boundary needs {} expressions, got {}", prob.width(), self.boundary.len())));
        }
        prob.boundary = expression_field(&self.boundary, &probe)?;
        if let Some(src) = &self.source {
            let need = prob.n * base.dim;
            if src.len() != need {
                return Err(MatwError::Config(format!("source needs {need} expressions (n×d), got {}", src.len())));
            }
            prob.source = Source::Function(expression_field(src, &probe)?);
        }
        Ok(prob)
    }
}

fn default_base() -> String {
    "[0,1)^1".into()
}

fn default_ps() -> Vec<f64> {
    vec![2.0]
}

fn default_depths() -> Vec<u32> {
    vec![4]
}

fn default_method() -> Method {
    Method::Definition
}

/// A characteristic sweep or suite run.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub weights: Vec<WeightSpec>,
    #[serde(default = "default_ps")]
    pub p: Vec<f64>,
    /// Paired with `p`; `q = p` when absent.
    #[serde(default)]
    pub q: Option<Vec<f64>>,
    #[serde(default = "default_base")]
    pub base: String,
    #[serde(default = "default_depths")]
    pub depth: Vec<u32>,
    #[serde(default = "default_method")]
    pub method: Method,
    /// Per-cube refinement; the dimension default when absent.
    #[serde(default)]
    pub refine: Option<u32>,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

/// Provenance written with every artifact.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub weight_ids: Vec<String>,
    pub families: Vec<String>,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>) -> Provenance {
        Provenance {
            tool: "matw".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: config_hash.into(),
            ..Default::default()
        }
    }
}
