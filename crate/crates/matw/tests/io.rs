use matw::config::{load_weight, ProblemConfig};
use matw::dyadic::{Cube, CubeFamily};
use matw::io::*;
use matw::weight::{ap_characteristic, Quadrature};

#[test]
fn weight_file_through_config() {
    let t = tempfile::tempdir().unwrap();
    // 4×4 lattice over [0,1)^2 holding diag(1 + x, 2)
    let mut values = Vec::new();
    for i in 0..4 {
        for _j in 0..4 {
            values.extend_from_slice(&[1.0 + (i as f64 + 0.5) / 4.0, 0.0, 0.0, 2.0]);
        }
    }
    let m = Matw1 { n: 2, dims: vec![4, 4], values };
    write_matw1_file(&t.path().join("w.matw"), &m).unwrap();
    std::fs::write(t.path().join("file.toml"), "kind = \"file\"\npath = \"w.matw\"\nbase = \"[0,1)^2\"\n").unwrap();
    let (w, hash) = load_weight(&t.path().join("file.toml")).unwrap();
    assert_eq!(w.id, "file");
    assert_eq!(hash.len(), 64);
    let at = w.evaluate(&[0.6, 0.1]).unwrap();
    assert!((at[(0, 0)] - 1.625).abs() < 1e-12 && (at[(1, 1)] - 2.0).abs() < 1e-12);
    let c = ap_characteristic(&w, 2.0, &CubeFamily::new(Cube::unit(2), 2), Quadrature::default_for(2)).unwrap().value;
    // only the first diagonal entry varies; the root cube attains the supremum
    // of avg_x avg_y max(w(x)/w(y), 1)
    let a: [f64; 4] = [1.125, 1.375, 1.625, 1.875];
    let want = a.iter().flat_map(|x| a.iter().map(move |y| (x / y).max(1.0))).sum::<f64>() / 16.0;
    assert!((c - want).abs() < 1e-12, "{c} vs {want}");
}

#[test]
fn solution_round_trip_with_sidecar() {
    let t = tempfile::tempdir().unwrap();
    let cfg: ProblemConfig = toml::from_str(
        r#"
base = "[0,1)^2"
depth = 3
boundary = ["x + 2*y"]
weight = { kind = "constant", n = 1, d = 2, matrix = [3.0] }
"#,
    )
    .unwrap();
    let prob = cfg.build(t.path()).unwrap();
    let sol = matw::pde::solve_linear(&prob).unwrap();
    let path = t.path().join("s.matw");
    save_solution(&path, &sol, serde_json::to_value(&cfg).unwrap(), serde_json::json!({ "note": 1 })).unwrap();
    let back = load_solution(&path).unwrap();
    assert_eq!(back.solution.values, sol.values);
    assert_eq!(back.meta["note"], 1);
    let cfg2: ProblemConfig = serde_json::from_value(back.problem).unwrap();
    assert_eq!(cfg2.depth, 3);
    // affine data is reproduced exactly
    assert!(back.solution.max_error(&|x| vec![x[0] + 2.0 * x[1]]) < 1e-10);
}

#[test]
fn grid_functions_in_both_formats() {
    let t = tempfile::tempdir().unwrap();
    let lat = matw::grid::Lattice::new(Cube::parse("[-1,1)^1").unwrap(), 5);
    let f = matw::grid::GridFunction::from_fn(&lat, 3, 1, |x| vec![x[0], 1.0, -x[0] * x[0]]);
    for name in ["f.json", "f.matw"] {
        let p = t.path().join(name);
        save_grid_function(&p, &f).unwrap();
        let g = load_grid_function(&p, Some(&lat.base)).unwrap();
        assert_eq!(g.values, f.values);
        assert_eq!((g.rows, g.cols, g.depth), (3, 1, 5));
    }
    let bad = t.path().join("bad.matw");
    std::fs::write(&bad, b"MATW1\x02\x00").unwrap();
    assert!(load_grid_function(&bad, None).is_err());
}
