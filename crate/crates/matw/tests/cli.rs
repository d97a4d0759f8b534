use std::path::Path;
use std::process::{Command, Output};

fn matw(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_matw")).current_dir(dir).args(args).env_remove("MATW_THREADS").output().expect("run matw")
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const POWER: &str = "kind = \"power_radial\"\nn = 2\nd = 2\na = [1.0, 0.5, 0.5, 1.0]\ngamma = [0.5, 0.0, 0.0, -0.5]\n";

const SWEEP: &str = r#"
seed = 3
weights = [
  { kind = "power_radial", n = 1, d = 1, a = [1.0], gamma = [0.4], id = "g04" },
  { kind = "identity", n = 2, d = 1, id = "eye" },
]
p = [2.0, 3.0]
base = "[-1,1)^1"
depth = [2, 4, 6]
"#;

#[test]
fn identity_characteristic_artifact() {
    let t = tempfile::tempdir().unwrap();
    write(t.path(), "eye.toml", "kind = \"identity\"\nn = 2\nd = 2\n");
    let out = matw(t.path(), &["char", "--weight", "eye.toml", "--p", "3", "--base", "[-1,1)^2", "--depth", "3", "--out", "c.json"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&t.path().join("c.json"));
    assert!((v["characteristic"]["value"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    let prov = &v["provenance"];
    assert_eq!(prov["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(prov["weight_ids"][0], "eye");
    assert_eq!(prov["families"].as_array().unwrap().len(), 1);
    assert_eq!(prov["tool"], "matw");
}

#[test]
fn sweep_is_deterministic_across_threads() {
    let t = tempfile::tempdir().unwrap();
    write(t.path(), "sweep.toml", SWEEP);
    let a = matw(t.path(), &["char", "--config", "sweep.toml", "--out", "a.csv", "--threads", "1"]);
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));
    let b = Command::new(env!("CARGO_BIN_EXE_matw"))
        .current_dir(t.path())
        .args(["char", "--config", "sweep.toml", "--out", "b.csv"])
        .env("MATW_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(b.status.code(), Some(0));
    let (ca, cb) = (std::fs::read(t.path().join("a.csv")).unwrap(), std::fs::read(t.path().join("b.csv")).unwrap());
    assert_eq!(ca, cb);
    let text = String::from_utf8(ca).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 2 * 3);
    assert!(text.starts_with("weight_id,p,q,depth,method,value,degenerate\n"));
    let meta = json(&t.path().join("a.csv.meta.json"));
    assert_eq!(meta["weight_ids"], serde_json::json!(["g04", "eye"]));
}

#[test]
fn empty_battery_writes_header_only() {
    let t = tempfile::tempdir().unwrap();
    write(t.path(), "empty.toml", "weights = []\n");
    let out = matw(t.path(), &["char", "--config", "empty.toml", "--out", "e.csv"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(t.path().join("e.csv")).unwrap(), "weight_id,p,q,depth,method,value,degenerate\n");
}

#[test]
fn unknown_config_key_is_an_error() {
    let t = tempfile::tempdir().unwrap();
    write(t.path(), "bad.toml", "weights = []\nsede = 4\n");
    let out = matw(t.path(), &["char", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("sede") && err.contains("bad.toml"), "{err}");
}

#[test]
fn sparse_family_and_threshold_error() {
    let t = tempfile::tempdir().unwrap();
    write(t.path(), "w.toml", POWER);
    let ok = matw(t.path(), &["sparse", "--weight", "w.toml", "--base", "[-1,1)^2", "--depth", "4", "--out", "f.json"]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    let fam = json(&t.path().join("f.json"));
    assert_eq!(fam["family"]["report"]["core_violations"], 0);
    assert_eq!(fam["family"]["report"]["level_disjoint"], true);
    let bad = matw(t.path(), &["sparse", "--weight", "w.toml", "--base", "[-1,1)^2", "--depth", "4", "--a", "1.000001"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn operator_report_and_field_output() {
    let t = tempfile::tempdir().unwrap();
    write(t.path(), "w.toml", POWER);
    let out = matw(
        t.path(),
        &["op", "--kind", "riesz", "--alpha", "0.5", "--weight", "w.toml", "--base", "[-1,1)^2", "--depth", "4", "--out", "r.json", "--field-out", "r.matw"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = json(&t.path().join("r.json"));
    assert!((r["report"]["q"].as_f64().unwrap() - 4.0).abs() < 1e-12);
    let field = matw::io::load_grid_function(&t.path().join("r.matw"), Some(&matw::dyadic::Cube::parse("[-1,1)^2").unwrap())).unwrap();
    assert_eq!((field.rows, field.depth), (2, 4));
}

#[test]
fn inequality_csv_columns() {
    let t = tempfile::tempdir().unwrap();
    write(t.path(), "w.toml", POWER);
    let out = matw(t.path(), &["ineq", "--kind", "poincare", "--weight", "w.toml", "--base", "[-1,1)^2", "--depth", "4", "--out", "p.csv"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(t.path().join("p.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("weight_id,function_id,eps,lhs,rhs,ratio,characteristic"));
    assert_eq!(lines.count(), 4);
    let global = matw(t.path(), &["ineq", "--kind", "global", "--weight", "w.toml", "--p", "2"]);
    assert_eq!(global.status.code(), Some(1), "p = d must be rejected for the global inequality");
}

#[test]
fn solve_then_diagnose() {
    let t = tempfile::tempdir().unwrap();
    write(t.path(), "w.toml", "kind = \"power_radial\"\nn = 1\nd = 2\na = [1.0]\ngamma = [0.5]\n");
    write(t.path(), "prob.toml", "base = \"[-1,1)^2\"\ndepth = 5\nboundary = [\"x*x - y*y\"]\nweight_file = \"w.toml\"\n");
    let sub = t.path().join("out");
    std::fs::create_dir(&sub).unwrap();
    let out = matw(t.path(), &["solve", "--problem", "prob.toml", "--out", "out/sol.matw"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let side = matw::io::load_solution(&sub.join("sol.matw")).unwrap();
    assert_eq!(side.solution.values.len(), 33 * 33);
    for check in ["caccioppoli", "meyers", "holder"] {
        let d = matw(&sub, &["diagnose", "--sol", "sol.matw", "--check", check, "--out", &format!("{check}.json")]);
        assert_eq!(d.status.code(), Some(0), "{check}: {}", String::from_utf8_lossy(&d.stderr));
    }
    let m = json(&sub.join("meyers.json"));
    assert!(m["meyers"]["q_max"].as_f64().unwrap() > 2.0);
    let outside = matw(&sub, &["diagnose", "--sol", "sol.matw", "--check", "caccioppoli", "--center=0.9,0.9", "--radius", "0.5"]);
    assert_eq!(outside.status.code(), Some(1));
}

#[test]
fn plot_scripts() {
    let t = tempfile::tempdir().unwrap();
    let none = matw(t.path(), &["plot", "--out-dir", "plots"]);
    assert_eq!(none.status.code(), Some(0));
    assert!(!t.path().join("plots").exists());

    let missing = matw(t.path(), &["plot", "gone.csv"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("gone.csv"));

    write(t.path(), "sweep.toml", SWEEP);
    assert_eq!(matw(t.path(), &["char", "--config", "sweep.toml", "--out", "sweep.csv"]).status.code(), Some(0));
    let out = matw(t.path(), &["plot", "sweep.csv", "--out-dir", "plots"]);
    assert_eq!(out.status.code(), Some(0));
    let files: Vec<_> = std::fs::read_dir(t.path().join("plots")).unwrap().collect();
    assert_eq!(files.len(), 1);
    let script = std::fs::read_to_string(t.path().join("plots/sweep.gp")).unwrap();
    assert!(script.contains("\"../sweep.csv\""));
    assert!(script.contains("set logscale xy") && script.contains("fitted slope"));
}
