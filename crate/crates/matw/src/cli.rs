//! Command-line front end: argument parsing, artifact writing and the
//! exit-status contract (0 ok, 1 error, 2 invariant violation).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::analysis;
use crate::config::{self, ExperimentConfig, ProblemConfig, Provenance};
use crate::dyadic::{Cube, CubeFamily};
use crate::error::{MatwError, Result};
use crate::grid::{GridFunction, Lattice};
use crate::io;
use crate::operators::{self, OperatorKind};
use crate::pde::{self, diagnostics, DiscreteSolution};
use crate::sparse;
use crate::suite;
use crate::weight::{self, MatrixWeight, Method, Quadrature};

#[derive(Debug, Parser)]
#[command(name = "matw", version, about = "Matrix-weighted dyadic analysis and degenerate elliptic solvers")]
pub struct Cli {
    /// Worker threads (MATW_THREADS takes precedence).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Truncated characteristic of a weight, or a sweep from a config file.
    Char(CharArgs),
    /// Stopping-time sparse family of a weight and a function.
    Sparse(SparseArgs),
    /// Weighted maximal operators and the Riesz potential on one input.
    Op(OpArgs),
    /// Poincaré and Sobolev ratios over a function battery.
    Ineq(IneqArgs),
    /// Solve an elliptic Dirichlet problem.
    Solve(SolveArgs),
    /// Regularity diagnostics on a stored solution.
    Diagnose(DiagnoseArgs),
    /// Run a named test suite.
    Suite(SuiteArgs),
    /// Write gnuplot scripts for reports.
    Plot(PlotArgs),
}

/// Outcome of a successful run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Ok,
    Violation,
}

impl Status {
    pub fn code(self) -> i32 {
        match self {
            Status::Ok => 0,
            Status::Violation => 2,
        }
    }

    fn from_ok(ok: bool) -> Status {
        if ok {
            Status::Ok
        } else {
            Status::Violation
        }
    }
}

/// Worker count from `MATW_THREADS`, falling back to `flag`.
pub fn thread_count(flag: Option<usize>) -> Option<usize> {
    std::env::var("MATW_THREADS").ok().and_then(|v| v.trim().parse().ok()).filter(|&n| n > 0).or(flag)
}

pub fn run(cli: Cli) -> Result<Status> {
    let threads = thread_count(cli.threads);
    match cli.command {
        Command::Suite(a) => cmd_suite(a, threads),
        Command::Plot(a) => cmd_plot(a),
        cmd => in_pool(threads, || match cmd {
            Command::Char(a) => cmd_char(a, threads),
            Command::Sparse(a) => cmd_sparse(a),
            Command::Op(a) => cmd_op(a),
            Command::Ineq(a) => cmd_ineq(a),
            Command::Solve(a) => cmd_solve(a),
            Command::Diagnose(a) => cmd_diagnose(a),
            Command::Suite(_) | Command::Plot(_) => unreachable!("handled above"),
        }),
    }
}

fn in_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match threads {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| MatwError::InvalidInput(format!("thread pool: {e}")))?
            .install(f),
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| MatwError::Format(e.to_string()))
}

fn write_artifact(out: Option<&Path>, prov: &Provenance, key: &str, report: &impl Serialize) -> Result<()> {
    let report = serde_json::to_value(report).map_err(|e| MatwError::Format(e.to_string()))?;
    let text = to_json(&json!({ "provenance": prov, key: report }))?;
    match out {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

/// Writes `csv` to `out` with provenance in `<out>.meta.json`, or to stdout.
fn write_csv(out: Option<&Path>, csv: &str, prov: &Provenance) -> Result<()> {
    match out {
        Some(p) => {
            std::fs::write(p, csv)?;
            let mut meta = p.as_os_str().to_owned();
            meta.push(".meta.json");
            std::fs::write(PathBuf::from(meta), to_json(prov)? + "\n")?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn csv_text(header: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| MatwError::Format(e.to_string());
    w.write_record(header).map_err(fail)?;
    for r in rows {
        w.write_record(r).map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| MatwError::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| MatwError::Format(e.to_string()))
}

fn hash_of(parts: &[&str]) -> String {
    config::config_hash(parts.join("\u{0}").as_bytes())
}

fn load_weight(path: &Path) -> Result<(MatrixWeight, String)> {
    config::load_weight(path)
}

fn base_or_unit(base: Option<&str>, d: usize) -> Result<Cube> {
    let cube = match base {
        Some(s) => Cube::parse(s)?,
        None => Cube::unit(d),
    };
    if cube.dim != d {
        return Err(MatwError::DimensionMismatch(format!("base cube in R^{} but weight in R^{d}", cube.dim)));
    }
    Ok(cube)
}

fn quadrature(d: usize, refine: Option<u32>, lattice: bool) -> Quadrature {
    match (refine, lattice) {
        (r, true) => Quadrature::Lattice { refine: r.unwrap_or(1) },
        (Some(r), false) => Quadrature::PerCube { refine: r },
        (None, false) => Quadrature::default_for(d),
    }
}

/// Uniform values in `[-1, 1)` per cell from a seeded ChaCha8 stream.
pub fn random_field(lat: &Lattice, n: usize, seed: u64) -> GridFunction {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = GridFunction::zeros(lat, n, 1);
    f.values.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    f
}

/// Reads `--f`, or draws a seeded random field on `base` at `depth`.
fn input_field(path: Option<&Path>, base: &Cube, depth: Option<u32>, n: usize, seed: u64) -> Result<(GridFunction, String)> {
    match path {
        Some(p) => {
            let f = io::load_grid_function(p, Some(base))?;
            if let Some(k) = depth {
                if k != f.depth {
                    return Err(MatwError::InvalidInput(format!("--depth {k} but {} has depth {}", p.display(), f.depth)));
                }
            }
            let bytes = std::fs::read(p)?;
            Ok((f, config::config_hash(&bytes)))
        }
        None => Ok((random_field(&Lattice::new(base.clone(), depth.unwrap_or(6)), n, seed), format!("random:{seed}"))),
    }
}

// ---------------------------------------------------------------- char

#[derive(Debug, Args)]
pub struct CharArgs {
    /// Weight description (TOML or JSON).
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    pub weight: Option<PathBuf>,
    /// Sweep description; writes one CSV row per weight, exponent pair and depth.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 2.0)]
    pub p: f64,
    /// Defaults to `p`.
    #[arg(long)]
    pub q: Option<f64>,
    /// Root cube such as "[-1,1)^2"; the unit cube when absent.
    #[arg(long)]
    pub base: Option<String>,
    #[arg(long, default_value_t = 4)]
    pub depth: u32,
    #[arg(long, default_value = "definition")]
    pub method: String,
    /// Quadrature refinement per cube.
    #[arg(long)]
    pub refine: Option<u32>,
    /// Average every level on the finest lattice instead of per cube.
    #[arg(long)]
    pub lattice: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// The characteristic is at least one for the exact and trace forms.
fn char_ok(c: &weight::Characteristic) -> bool {
    c.value.is_finite() && (c.method == Method::Reducing || c.value >= 1.0 - 1e-9)
}

fn cmd_char(a: CharArgs, threads: Option<usize>) -> Result<Status> {
    if let Some(cfg) = &a.config {
        return char_sweep(cfg, a.out.as_deref(), threads);
    }
    let path = a.weight.as_deref().expect("clap enforces --weight or --config");
    let (w, whash) = load_weight(path)?;
    let method: Method = a.method.parse()?;
    let base = base_or_unit(a.base.as_deref(), w.d)?;
    let fam = CubeFamily::new(base, a.depth);
    let q = a.q.unwrap_or(a.p);
    let c = weight::characteristic(&w, a.p, q, &fam, method, quadrature(w.d, a.refine, a.lattice))?;
    let mut prov = Provenance::new(hash_of(&[&format!("{a:?}"), &whash]));
    prov.weight_ids = vec![w.id.clone()];
    prov.families = vec![fam.label()];
    eprintln!("{} {:?} p={} q={}: {}", w.id, method, a.p, q, c.value);
    write_artifact(a.out.as_deref(), &prov, "characteristic", &c)?;
    Ok(Status::from_ok(char_ok(&c)))
}

fn char_sweep(path: &Path, out: Option<&Path>, threads: Option<usize>) -> Result<Status> {
    let (cfg, hash): (ExperimentConfig, String) = config::load(path)?;
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let threads = thread_count(None).or(threads).or(cfg.threads);
    let qs = match &cfg.q {
        Some(q) if q.len() != cfg.p.len() => {
            return Err(MatwError::Config(format!("{}: `q` must pair with `p`", path.display())));
        }
        Some(q) => q.clone(),
        None => cfg.p.clone(),
    };
    let base = Cube::parse(&cfg.base)?;
    let mut prov = Provenance::new(hash);
    let mut rows = Vec::new();
    let mut ok = true;
    in_pool(threads, || {
        for (i, spec) in cfg.weights.iter().enumerate() {
            let mut w = spec.build(dir)?;
            if spec.id().is_none() {
                w = w.with_id(format!("weight{i}"));
            }
            prov.weight_ids.push(w.id.clone());
            for (&p, &q) in cfg.p.iter().zip(&qs) {
                for &k in &cfg.depth {
                    let fam = CubeFamily::new(base.clone(), k);
                    let c = weight::characteristic(&w, p, q, &fam, cfg.method, quadrature(w.d, cfg.refine, false))?;
                    ok &= char_ok(&c);
                    if !prov.families.contains(&fam.label()) {
                        prov.families.push(fam.label());
                    }
                    rows.push(vec![
                        w.id.clone(),
                        p.to_string(),
                        q.to_string(),
                        k.to_string(),
                        format!("{:?}", cfg.method).to_lowercase(),
                        c.value.to_string(),
                        c.degenerate.to_string(),
                    ]);
                }
            }
        }
        Ok(())
    })?;
    let csv = csv_text(&["weight_id", "p", "q", "depth", "method", "value", "degenerate"], &rows)?;
    write_csv(out.or(cfg.output.as_deref()), &csv, &prov)?;
    Ok(Status::from_ok(ok))
}

// ---------------------------------------------------------------- sparse

#[derive(Debug, Args)]
pub struct SparseArgs {
    #[arg(long)]
    pub weight: PathBuf,
    /// Input field (JSON or MATW1); a seeded random field when absent.
    #[arg(long)]
    pub f: Option<PathBuf>,
    #[arg(long, default_value_t = 2.0)]
    pub p: f64,
    /// Threshold `a > 1`, or "auto".
    #[arg(long, default_value = "auto")]
    pub a: String,
    #[arg(long)]
    pub base: Option<String>,
    /// Lattice depth of the input field.
    #[arg(long)]
    pub depth: Option<u32>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_auto(s: &str, what: &str) -> Result<Option<f64>> {
    if s == "auto" {
        return Ok(None);
    }
    s.parse::<f64>().map(Some).map_err(|_| MatwError::InvalidInput(format!("{what} must be a number or \"auto\", got {s:?}")))
}

fn cmd_sparse(a: SparseArgs) -> Result<Status> {
    let (w, whash) = load_weight(&a.weight)?;
    let base = base_or_unit(a.base.as_deref(), w.d)?;
    let (f, fhash) = input_field(a.f.as_deref(), &base, a.depth, w.n, a.seed)?;
    let fam = sparse::stopping_family(&w, &f, a.p, parse_auto(&a.a, "--a")?)?;
    let mut prov = Provenance::new(hash_of(&[&format!("{a:?}"), &whash, &fhash]));
    prov.weight_ids = vec![w.id.clone()];
    prov.families = vec![CubeFamily::new(fam.root.clone(), fam.depth).label()];
    let r = &fam.report;
    eprintln!(
        "a={} selected={} disjoint={} core_violations={} min_core_fraction={}",
        fam.a, r.selected, r.level_disjoint, r.core_violations, r.min_core_fraction
    );
    write_artifact(a.out.as_deref(), &prov, "family", &fam)?;
    Ok(Status::from_ok(r.violations() == 0))
}

// ---------------------------------------------------------------- op

#[derive(Debug, Args)]
pub struct OpArgs {
    #[arg(long, value_enum)]
    pub kind: OpKindArg,
    #[arg(long, default_value_t = 0.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 2.0)]
    pub p: f64,
    /// Defaults to `1/q = 1/p - α/d`.
    #[arg(long)]
    pub q: Option<f64>,
    #[arg(long)]
    pub weight: PathBuf,
    #[arg(long)]
    pub f: Option<PathBuf>,
    #[arg(long)]
    pub base: Option<String>,
    /// Lattice depth of the input field; cube family depth for maximal operators.
    #[arg(long)]
    pub depth: Option<u32>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Use this characteristic instead of computing one.
    #[arg(long)]
    pub characteristic: Option<f64>,
    /// Also write the operator output (JSON or MATW1 by extension).
    #[arg(long)]
    pub field_out: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum OpKindArg {
    Max,
    Auxmax,
    Riesz,
}

impl From<OpKindArg> for OperatorKind {
    fn from(k: OpKindArg) -> OperatorKind {
        match k {
            OpKindArg::Max => OperatorKind::Max,
            OpKindArg::Auxmax => OperatorKind::Auxmax,
            OpKindArg::Riesz => OperatorKind::Riesz,
        }
    }
}

fn cmd_op(a: OpArgs) -> Result<Status> {
    let (w, whash) = load_weight(&a.weight)?;
    let base = base_or_unit(a.base.as_deref(), w.d)?;
    let (f, fhash) = input_field(a.f.as_deref(), &base, a.depth, w.n, a.seed)?;
    let q = a.q.unwrap_or_else(|| 1.0 / (1.0 / a.p - a.alpha / w.d as f64));
    let kind = OperatorKind::from(a.kind);
    let depth = a.depth.unwrap_or(f.depth);
    let report = operators::operator_ratio(kind, &w, a.alpha, a.p, q, &f, depth, a.characteristic)?;
    if let Some(path) = &a.field_out {
        let out = match kind {
            OperatorKind::Max => operators::maximal(&w, a.alpha, q, &f, depth)?.values,
            OperatorKind::Auxmax => operators::aux_maximal(&w, a.alpha, a.p, q, &f, depth)?.values,
            OperatorKind::Riesz => operators::riesz(a.alpha, &f)?,
        };
        io::save_grid_function(path, &out)?;
    }
    let mut prov = Provenance::new(hash_of(&[&format!("{a:?}"), &whash, &fhash]));
    prov.weight_ids = vec![w.id.clone()];
    prov.families = vec![report.family.label()];
    eprintln!("{:?} ratio={} ceiling={}", kind, report.ratio, report.ceiling);
    write_artifact(a.out.as_deref(), &prov, "report", &report)?;
    Ok(Status::from_ok(report.ratio.is_finite()))
}

// ---------------------------------------------------------------- ineq

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum IneqKind {
    Poincare,
    Sobolev,
    Global,
    Annulus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BatteryKind {
    /// Fixed smooth fields.
    Standard,
    /// Seeded smooth random fields.
    Random,
}

#[derive(Debug, Args)]
pub struct IneqArgs {
    #[arg(long, value_enum)]
    pub kind: IneqKind,
    /// One or more weight descriptions.
    #[arg(long, num_args = 0..)]
    pub weight: Vec<PathBuf>,
    #[arg(long, default_value_t = 2.0)]
    pub p: f64,
    /// Exponent gain `ε`, or "auto" for the size predicted by the characteristic.
    #[arg(long, default_value = "auto")]
    pub eps: String,
    #[arg(long, value_enum, default_value = "standard")]
    pub battery: BatteryKind,
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub base: Option<String>,
    #[arg(long, default_value_t = 6)]
    pub depth: u32,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Coordinates rescaled to `[0,1)^d` on `base`.
fn unit_coords(base: &Cube, x: &[f64]) -> Vec<f64> {
    x.iter().enumerate().map(|(k, v)| (v - base.lower(k)) / base.side()).collect()
}

/// `(1 - |t - c|²/s²)³` inside the ball, zero outside.
fn bump(t: &[f64], c: &[f64], s: f64) -> f64 {
    let r2: f64 = t.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (s * s);
    if r2 < 1.0 {
        (1.0 - r2).powi(3)
    } else {
        0.0
    }
}

/// Named `n`-vector test fields on `base`; `compact` keeps them away from
/// the boundary.
pub fn standard_battery(base: &Cube, depth: u32, n: usize, compact: bool) -> Vec<(String, GridFunction)> {
    let lat = Lattice::new(base.clone(), depth);
    let d = base.dim;
    let pi = std::f64::consts::PI;
    let mid = vec![0.5; d];
    let off: Vec<f64> = (0..d).map(|k| if k == 0 { 0.42 } else { 0.55 }).collect();
    let field = |g: &dyn Fn(&[f64], usize) -> f64| {
        GridFunction::from_fn(&lat, n, 1, |x| {
            let t = unit_coords(base, x);
            (0..n).map(|j| g(&t, j)).collect()
        })
    };
    let mut out = vec![
        ("bump".to_string(), field(&|t, j| (j + 1) as f64 * bump(t, &mid, 0.4))),
        (
            "bump_wave".to_string(),
            field(&|t, j| bump(t, &off, 0.3) * (1.0 + 0.5 * (2.0 * pi * (j + 1) as f64 * t[0]).sin())),
        ),
    ];
    if !compact {
        out.push(("linear".to_string(), field(&|t, j| t.iter().enumerate().map(|(k, v)| v * (1.0 + (j + k) as f64)).sum())));
        out.push((
            "wave".to_string(),
            field(&|t, j| (pi * (j + 1) as f64 * t[0]).sin() * (pi * t[d - 1]).cos() + 0.3 * j as f64),
        ));
    }
    out
}

/// Sums of `count` random bumps per field, seeded.
pub fn random_battery(base: &Cube, depth: u32, n: usize, compact: bool, count: usize, seed: u64) -> Vec<(String, GridFunction)> {
    let lat = Lattice::new(base.clone(), depth);
    let d = base.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let bumps: Vec<(Vec<f64>, Vec<f64>, f64)> = (0..3)
                .map(|_| {
                    let s = rng.random_range(0.1..0.25);
                    let lo = if compact { s + 0.05 } else { 0.0 };
                    let c: Vec<f64> = (0..d).map(|_| rng.random_range(lo..1.0 - lo)).collect();
                    let amp: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
                    (c, amp, s)
                })
                .collect();
            let f = GridFunction::from_fn(&lat, n, 1, |x| {
                let t = unit_coords(base, x);
                let mut v = vec![0.0; n];
                for (c, amp, s) in &bumps {
                    let b = bump(&t, c, *s);
                    v.iter_mut().zip(amp).for_each(|(o, a)| *o += a * b);
                }
                v
            });
            (format!("random{i}"), f)
        })
        .collect()
}

/// Rows for one weight: `(function_id, eps, lhs, rhs, ratio)`.
fn ineq_rows(kind: IneqKind, w: &MatrixWeight, p: f64, eps: f64, fields: &[(String, GridFunction)]) -> Result<Vec<(String, f64, f64, f64, f64)>> {
    fields
        .iter()
        .map(|(id, f)| {
            let (e, lhs, rhs, ratio) = match kind {
                IneqKind::Poincare => {
                    let r = analysis::poincare_ratio(w, p, eps, f)?;
                    (eps, r.lhs, r.rhs_without_c, r.ratio)
                }
                IneqKind::Sobolev => {
                    let r = analysis::sobolev_ratio(w, p, eps, f)?;
                    (eps, r.lhs, r.rhs_without_c, r.ratio)
                }
                IneqKind::Global => {
                    let r = analysis::global_sobolev_ratio(w, p, f)?;
                    (0.0, r.lhs, r.rhs, r.ratio)
                }
                IneqKind::Annulus => {
                    let lat = f.lattice();
                    let r = analysis::annulus_poincare(w, p, f, &lat.base.center(), 0.5 * lat.base.side(), 1)?;
                    (0.0, r.lhs, r.rhs, r.ratio)
                }
            };
            Ok((id.clone(), e, lhs, rhs, ratio))
        })
        .collect()
}

fn cmd_ineq(a: IneqArgs) -> Result<Status> {
    let eps_arg = parse_auto(&a.eps, "--eps")?;
    let compact = matches!(a.kind, IneqKind::Sobolev | IneqKind::Global);
    let mut hashes = vec![format!("{a:?}")];
    let mut prov = Provenance::new("");
    let mut rows = Vec::new();
    let mut ok = true;
    for path in &a.weight {
        let (w, whash) = load_weight(path)?;
        hashes.push(whash);
        let base = base_or_unit(a.base.as_deref(), w.d)?;
        let fam = CubeFamily::new(base.clone(), a.depth.min(5));
        let c = weight::ap_characteristic(&w, a.p, &fam, Quadrature::default_for(w.d))?.value;
        let eps = eps_arg.unwrap_or_else(|| analysis::default_eps(a.p, c, analysis::EPS_CONSTANT));
        let fields = match a.battery {
            BatteryKind::Standard => standard_battery(&base, a.depth, w.n, compact),
            BatteryKind::Random => random_battery(&base, a.depth, w.n, compact, a.count, a.seed),
        };
        for (fid, e, lhs, rhs, ratio) in ineq_rows(a.kind, &w, a.p, eps, &fields)? {
            ok &= ratio.is_finite();
            rows.push(vec![w.id.clone(), fid, e.to_string(), lhs.to_string(), rhs.to_string(), ratio.to_string(), c.to_string()]);
        }
        prov.weight_ids.push(w.id.clone());
        prov.families.push(fam.label());
    }
    let refs: Vec<&str> = hashes.iter().map(String::as_str).collect();
    prov.config_hash = hash_of(&refs);
    let csv = csv_text(&["weight_id", "function_id", "eps", "lhs", "rhs", "ratio", "characteristic"], &rows)?;
    write_csv(a.out.as_deref(), &csv, &prov)?;
    Ok(Status::from_ok(ok))
}

// ---------------------------------------------------------------- solve

#[derive(Debug, Args)]
pub struct SolveArgs {
    /// Problem description (TOML or JSON).
    #[arg(long)]
    pub problem: PathBuf,
    /// MATW1 nodal values; metadata goes to `<out>.json`.
    #[arg(long)]
    pub out: PathBuf,
}

fn energy_monotone(sol: &DiscreteSolution) -> bool {
    sol.energy_history.windows(2).all(|w| w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0))
}

pub fn solve_problem(prob: &pde::EllipticProblem) -> Result<DiscreteSolution> {
    if prob.p == 2.0 {
        pde::solve_linear(prob)
    } else {
        pde::solve_plaplace(prob)
    }
}

fn cmd_solve(a: SolveArgs) -> Result<Status> {
    let (cfg, hash): (ProblemConfig, String) = config::load(&a.problem)?;
    let dir = match a.problem.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let prob = cfg.build(&dir)?;
    let sol = solve_problem(&prob)?;
    let mut prov = Provenance::new(hash);
    prov.weight_ids = vec![prob.weight.id.clone()];
    prov.families = vec![CubeFamily::new(prob.mesh.base.clone(), prob.mesh.depth).label()];
    let monotone = energy_monotone(&sol);
    let dir = std::fs::canonicalize(&dir).unwrap_or(dir);
    let problem = serde_json::to_value(&cfg).map_err(|e| MatwError::Format(e.to_string()))?;
    let meta = json!({ "provenance": prov, "problem_dir": dir, "energy_monotone": monotone });
    io::save_solution(&a.out, &sol, problem, meta)?;
    eprintln!(
        "{}: {} iterations, residual {:.3e}, energy {}",
        sol.method, sol.iterations, sol.residual, sol.energy
    );
    Ok(Status::from_ok(monotone && sol.energy.is_finite()))
}

// ---------------------------------------------------------------- diagnose

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Check {
    Caccioppoli,
    Meyers,
    Decay,
    Holder,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub sol: PathBuf,
    #[arg(long, value_enum)]
    pub check: Check,
    /// Ball centre, comma separated; the domain centre when absent.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub center: Option<Vec<f64>>,
    /// Ball radius; a size that fits the check when absent.
    #[arg(long)]
    pub radius: Option<f64>,
    /// Number of radii `R·8^{-j}` for the decay fit.
    #[arg(long, default_value_t = 3)]
    pub count: usize,
    /// Number of random point pairs for the Hölder check.
    #[arg(long, default_value_t = 32)]
    pub pairs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn random_point_in_ball(rng: &mut ChaCha8Rng, c: &[f64], r: f64) -> Vec<f64> {
    loop {
        let x: Vec<f64> = c.iter().map(|v| v + rng.random_range(-r..r)).collect();
        let d2: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
        if d2 <= r * r {
            return x;
        }
    }
}

fn cmd_diagnose(a: DiagnoseArgs) -> Result<Status> {
    let side = io::load_solution(&a.sol)?;
    let cfg: ProblemConfig =
        serde_json::from_value(side.problem.clone()).map_err(|e| MatwError::Format(format!("solution sidecar: {e}")))?;
    let dir = side.meta.get("problem_dir").and_then(|v| v.as_str()).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
    let prob = cfg.build(&dir)?;
    let sol = side.solution;
    let base = &prob.mesh.base;
    let center = a.center.clone().unwrap_or_else(|| base.center());
    if center.len() != base.dim {
        return Err(MatwError::DimensionMismatch(format!("centre has {} coordinates, domain is {}-dimensional", center.len(), base.dim)));
    }
    let len = base.side();
    let mut prov = side
        .meta
        .get("provenance")
        .and_then(|v| serde_json::from_value::<Provenance>(v.clone()).ok())
        .unwrap_or_else(|| Provenance::new(""));
    prov.config_hash = hash_of(&[&prov.config_hash, &format!("{a:?}")]);
    let out = a.out.as_deref();
    let status = match a.check {
        Check::Caccioppoli => {
            let r = diagnostics::caccioppoli_check(&sol, &prob, &center, a.radius.unwrap_or(0.25 * len))?;
            eprintln!("caccioppoli ratio={} vacuous={}", r.ratio, r.vacuous);
            write_artifact(out, &prov, "caccioppoli", &r)?;
            Status::from_ok(r.ratio.is_finite())
        }
        Check::Meyers => {
            let opts = diagnostics::MeyersOptions::default();
            let r = diagnostics::meyers_exponent(&sol, &prob, &center, a.radius.unwrap_or(0.25 * len), &opts)?;
            eprintln!("meyers q_max={} (p={})", r.q_max, r.p);
            write_artifact(out, &prov, "meyers", &r)?;
            Status::from_ok(r.q_max > r.p)
        }
        Check::Decay => {
            let r = diagnostics::decay_check(&sol, &prob, &center, a.radius.unwrap_or(0.5 * len), a.count)?;
            eprintln!("decay gamma={} residual={}", r.gamma, r.residual);
            write_artifact(out, &prov, "decay", &r)?;
            Status::from_ok(r.gamma.is_finite() || r.vacuous)
        }
        Check::Holder => {
            let big_r = a.radius.unwrap_or(len / 12.0);
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..a.pairs)
                .map(|_| (random_point_in_ball(&mut rng, &center, big_r), random_point_in_ball(&mut rng, &center, big_r)))
                .collect();
            let eps: Vec<f64> = (1..=10).map(|k| 0.05 * k as f64).collect();
            let r = diagnostics::holder_modulus(&sol, &prob, &center, big_r, &pairs, &eps, 4.0)?;
            eprintln!("holder eps_max={}", r.eps_max);
            write_artifact(out, &prov, "holder", &r)?;
            Status::from_ok(r.c_cal.iter().all(|c| c.is_finite()))
        }
    };
    Ok(status)
}

// ---------------------------------------------------------------- suite

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SuiteName {
    /// The numbered acceptance criteria.
    Acceptance,
}

#[derive(Debug, Args)]
pub struct SuiteArgs {
    #[arg(value_enum)]
    pub name: SuiteName,
    /// Experiment config supplying `seed`, `threads` and `output`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for `acceptance.csv` and its metadata.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn cmd_suite(a: SuiteArgs, threads: Option<usize>) -> Result<Status> {
    let (cfg, hash) = match &a.config {
        Some(p) => {
            let (c, h): (ExperimentConfig, String) = config::load(p)?;
            (Some(c), h)
        }
        None => (None, String::new()),
    };
    let seed = a.seed.or(cfg.as_ref().map(|c| c.seed)).unwrap_or(0);
    let threads = threads.or(cfg.as_ref().and_then(|c| c.threads)).unwrap_or(1);
    let out_dir = a.out.clone().or(cfg.as_ref().and_then(|c| c.output.clone()));
    let SuiteName::Acceptance = a.name;
    let acc = suite::acceptance(seed, threads, &mut |o| println!("{}", o.line()))?;
    let passed = acc.outcomes.iter().filter(|o| o.pass()).count();
    println!("{passed}/{} criteria passed", acc.outcomes.len());
    let mut prov = Provenance::new(hash_of(&[&hash, &seed.to_string()]));
    prov.weight_ids = suite::a2_battery().iter().map(|w| w.id.clone()).collect();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(&dir)?;
        write_csv(Some(&dir.join("acceptance.csv")), &acc.csv, &prov)?;
    }
    Ok(Status::from_ok(passed == acc.outcomes.len()))
}

// ---------------------------------------------------------------- plot

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Report files (CSV or JSON).
    pub reports: Vec<PathBuf>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

/// `path` relative to `dir`, both made absolute first.
fn relative_to(path: &Path, dir: &Path) -> PathBuf {
    let abs = |p: &Path| std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    let (p, d) = (abs(path), abs(dir));
    let pc: Vec<_> = p.components().collect();
    let dc: Vec<_> = d.components().collect();
    let common = pc.iter().zip(&dc).take_while(|(a, b)| a == b).count();
    let mut out = PathBuf::new();
    for _ in common..dc.len() {
        out.push("..");
    }
    for c in &pc[common..] {
        out.push(c);
    }
    out
}

/// Slope and intercept of the least-squares line through `(ln x, ln y)`.
pub fn loglog_fit(xs: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    let pts: Vec<(f64, f64)> =
        xs.iter().zip(ys).filter(|(x, y)| **x > 0.0 && **y > 0.0 && x.is_finite() && y.is_finite()).map(|(x, y)| (x.ln(), y.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx;
    Some((slope, my - slope * mx))
}

fn loglog_script(title: &str, data: &str, sep: &str, x: (usize, &str), y: (usize, &str), fit: Option<(f64, f64)>) -> String {
    let mut s = format!(
        "# {title}\nset datafile separator \"{sep}\"\nset key top left\nset logscale xy\nset xlabel \"{}\"\nset ylabel \"{}\"\n",
        x.1, y.1
    );
    let pts = format!("\"{data}\" using {}:{} every ::1 with points pt 7 title \"{}\"", x.0, y.0, y.1);
    match fit {
        Some((slope, icpt)) => {
            s += &format!("slope = {slope}\nintercept = {icpt}\n");
            s += "set label 1 sprintf(\"fitted slope %.3f\", slope) at graph 0.05, graph 0.9\n";
            s += &format!("plot {pts}, exp(intercept) * x**slope with lines title \"fit\"\n");
        }
        None => s += &format!("plot {pts}\n"),
    }
    s
}

fn plot_csv(report: &Path, rel: &str) -> Result<String> {
    let mut rd = csv::Reader::from_path(report).map_err(|e| MatwError::Format(format!("{}: {e}", report.display())))?;
    let header: Vec<String> = rd.headers().map_err(|e| MatwError::Format(e.to_string()))?.iter().map(str::to_string).collect();
    let rows: Vec<csv::StringRecord> = rd.records().collect::<std::result::Result<_, _>>().map_err(|e| MatwError::Format(e.to_string()))?;
    let col = |name: &str| header.iter().position(|h| h == name);
    let numbers = |i: usize| -> Vec<f64> { rows.iter().map(|r| r.get(i).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN)).collect() };
    let title = format!("{}", report.display());
    if let (Some(ic), Some(ir)) = (col("characteristic"), col("ratio")) {
        let fit = loglog_fit(&numbers(ic), &numbers(ir));
        return Ok(loglog_script(&title, rel, ",", (ic + 1, "characteristic"), (ir + 1, "ratio"), fit));
    }
    if let (Some(ik), Some(iv)) = (col("depth"), col("value")) {
        return Ok(sweep_script(&title, rel, &rows, col("weight_id"), ik, iv));
    }
    let s = format!(
        "# {title}\nset datafile separator \",\"\nset xlabel \"{}\"\nset ylabel \"{}\"\nplot \"{rel}\" using 1:2 every ::1 with linespoints notitle\n",
        header.first().map_or("", String::as_str),
        header.get(1).map_or("", String::as_str)
    );
    Ok(s)
}

/// One log-log series and fitted line per weight id, value against `2^depth`.
fn sweep_script(title: &str, rel: &str, rows: &[csv::StringRecord], id_col: Option<usize>, ik: usize, iv: usize) -> String {
    let mut ids: Vec<String> = Vec::new();
    for r in rows {
        let id = id_col.and_then(|i| r.get(i)).unwrap_or("").to_string();
        if !ids.contains(&id) {
            ids.push(id);
        }
    }
    let mut s = format!(
        "# {title}\nset datafile separator \",\"\nset key top left\nset logscale xy\nset xlabel \"cells per axis\"\nset ylabel \"characteristic\"\n"
    );
    let mut parts = Vec::new();
    for (j, id) in ids.iter().enumerate() {
        let pick = |i: usize| -> Vec<f64> {
            rows.iter()
                .filter(|r| id_col.and_then(|c| r.get(c)).unwrap_or("") == id)
                .map(|r| r.get(i).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN))
                .collect()
        };
        let sizes: Vec<f64> = pick(ik).iter().map(|k| 2f64.powf(*k)).collect();
        let sel = match id_col {
            Some(c) => format!("(strcol({}) eq \"{id}\" ? ${} : 1/0)", c + 1, iv + 1),
            None => format!("{}", iv + 1),
        };
        parts.push(format!("\"{rel}\" using (2**${}):{sel} every ::1 with points pt 7 title \"{id}\"", ik + 1));
        if let Some((slope, icpt)) = loglog_fit(&sizes, &pick(iv)) {
            s += &format!("slope{j} = {slope}\nintercept{j} = {icpt}\n");
            s += &format!(
                "set label {} sprintf(\"{id}: fitted slope %.3f\", slope{j}) at graph 0.05, graph {}\n",
                j + 1,
                0.9 - 0.05 * j as f64
            );
            parts.push(format!("exp(intercept{j}) * x**slope{j} with lines notitle"));
        }
    }
    if parts.is_empty() {
        s += "# no rows\n";
    } else {
        s += &format!("plot {}\n", parts.join(", \\\n     "));
    }
    s
}

/// Pairs of equal-length numeric arrays worth plotting in a JSON report.
const JSON_SERIES: &[(&str, &str, bool)] =
    &[("q", "ratio", false), ("radii", "integrals", true), ("eps", "c_cal", false), ("energy_history", "", false), ("per_level", "", false)];

fn find_series(v: &serde_json::Value) -> Option<(String, String, Vec<(f64, f64)>, bool)> {
    let obj = v.as_object()?;
    for (xk, yk, log) in JSON_SERIES {
        let num = |k: &str| obj.get(k).and_then(|a| a.as_array()).map(|a| a.iter().filter_map(|x| x.as_f64()).collect::<Vec<f64>>());
        if let Some(xs) = num(xk) {
            let pts: Vec<(f64, f64)> = if yk.is_empty() {
                xs.iter().enumerate().map(|(i, y)| (i as f64, *y)).collect()
            } else if let Some(ys) = num(yk) {
                xs.iter().copied().zip(ys).collect()
            } else {
                continue;
            };
            let (xl, yl) = if yk.is_empty() { ("index".to_string(), xk.to_string()) } else { (xk.to_string(), yk.to_string()) };
            return Some((xl, yl, pts, *log));
        }
    }
    obj.values().find_map(find_series)
}

fn plot_json(report: &Path, rel: &str, out_dir: &Path) -> Result<String> {
    let text = std::fs::read_to_string(report)?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| MatwError::Format(format!("{}: {e}", report.display())))?;
    let stem = report.file_stem().map_or("report".into(), |s| s.to_string_lossy().into_owned());
    let dat = format!("{stem}.dat");
    let title = format!("{} (from {rel})", report.display());
    let Some((xl, yl, pts, log)) = find_series(&v) else {
        return scalar_bars(&v, &title, &dat, out_dir);
    };
    let mut body = format!("{xl},{yl}\n");
    for (x, y) in &pts {
        body += &format!("{x},{y}\n");
    }
    std::fs::write(out_dir.join(&dat), body)?;
    if log {
        let (xs, ys): (Vec<f64>, Vec<f64>) = pts.iter().copied().unzip();
        Ok(loglog_script(&title, &dat, ",", (1, &xl), (2, &yl), loglog_fit(&xs, &ys)))
    } else {
        Ok(format!(
            "# {title}\nset datafile separator \",\"\nset xlabel \"{xl}\"\nset ylabel \"{yl}\"\nplot \"{dat}\" using 1:2 every ::1 with linespoints notitle\n"
        ))
    }
}

/// Bar chart of the numeric scalars of the first report object that has any.
fn scalar_bars(v: &serde_json::Value, title: &str, dat: &str, out_dir: &Path) -> Result<String> {
    fn scalars(v: &serde_json::Value) -> Vec<(String, f64)> {
        v.as_object().map_or(Vec::new(), |o| o.iter().filter_map(|(k, x)| x.as_f64().map(|f| (k.clone(), f))).collect())
    }
    let obj = v.as_object().ok_or_else(|| MatwError::Format(format!("{title}: not a JSON object")))?;
    let vals = obj.iter().filter(|(k, _)| *k != "provenance").map(|(_, x)| scalars(x)).find(|s| !s.is_empty()).unwrap_or_else(|| scalars(v));
    if vals.is_empty() {
        return Err(MatwError::Format(format!("{title}: nothing to plot")));
    }
    let mut body = String::from("name,value\n");
    for (k, x) in &vals {
        body += &format!("{k},{x}\n");
    }
    std::fs::write(out_dir.join(dat), body)?;
    Ok(format!(
        "# {title}\nset datafile separator \",\"\nset style fill solid 0.5\nset boxwidth 0.6\nplot \"{dat}\" using 0:2:xtic(1) every ::1 with boxes notitle\n"
    ))
}

/// Writes one `<stem>.gp` per report into `out_dir`; returns the scripts.
pub fn emit_plot_scripts(reports: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if let Some(missing) = reports.iter().find(|p| !p.is_file()) {
        return Err(MatwError::MissingReport(missing.clone()));
    }
    if reports.is_empty() {
        return Ok(Vec::new());
    }
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for report in reports {
        let rel = relative_to(report, out_dir).to_string_lossy().into_owned();
        let is_json = report.extension().is_some_and(|e| e == "json");
        let script = if is_json { plot_json(report, &rel, out_dir)? } else { plot_csv(report, &rel)? };
        let stem = report.file_stem().map_or("report".into(), |s| s.to_string_lossy().into_owned());
        let path = out_dir.join(format!("{stem}.gp"));
        std::fs::write(&path, script)?;
        written.push(path);
    }
    Ok(written)
}

fn cmd_plot(a: PlotArgs) -> Result<Status> {
    for p in emit_plot_scripts(&a.reports, &a.out_dir)? {
        eprintln!("wrote {}", p.display());
    }
    Ok(Status::Ok)
}
