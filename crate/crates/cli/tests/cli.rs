use std::path::Path;
use std::process::{Command, Output};

fn akpz(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_akpz")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn column(csv: &str, name: &str) -> Vec<String> {
    let mut lines = csv.lines();
    let k = lines.next().unwrap().split(',').position(|c| c == name).expect("column present");
    lines.map(|l| l.split(',').nth(k).unwrap().to_string()).collect()
}

#[test]
fn akpz_map_square_is_valid() {
    let o = akpz(&["akpz-map", "--model", "square", "--speed", "im-z", "--resolution", "50"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.starts_with("rho1,rho2,v,h11,h12,h22,det,label\n"));
    assert!(column(&out, "label").iter().all(|l| l == "AKPZ" || l == "DEGENERATE"));
}

#[test]
fn unknown_model_is_a_usage_error() {
    let o = akpz(&["akpz-map", "--model", "cubic"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`model`"), "{}", stderr(&o));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("map.json");
    std::fs::write(&cfg, r#"{"experiment": "akpz-map", "model": "square", "resolution": 50}"#).unwrap();
    let cfg = cfg.to_str().unwrap();
    let from_file = stdout(&akpz(&["akpz-map", "--config", cfg]));
    let overridden = stdout(&akpz(&["akpz-map", "--config", cfg, "--resolution", "4"]));
    let direct = stdout(&akpz(&["akpz-map", "--model", "square", "--resolution", "4"]));
    assert_eq!(overridden, direct);
    assert!(from_file.lines().count() > 10 * overridden.lines().count());
}

#[test]
fn config_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    for (text, key) in [
        (r#"{"resolutoin": 5}"#, "resolutoin"),
        (r#"{"margin": "wide"}"#, "margin"),
        (r#"{"model": "cubic"}"#, "model"),
        (r#"{"experiment": "accept"}"#, "experiment"),
    ] {
        std::fs::write(&cfg, text).unwrap();
        let o = akpz(&["akpz-map", "--config", cfg.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{text}");
        assert!(stderr(&o).contains(&format!("`{key}`")), "{text}: {}", stderr(&o));
    }
}

#[test]
fn harmonic_preset_has_vanishing_laplacian() {
    let o = akpz(&["harmonicity", "--speed", "im-z", "--model", "honeycomb"]);
    assert!(o.status.success());
    let laps = column(&stdout(&o), "laplacian");
    assert!(laps.len() > 50);
    assert!(laps.iter().all(|l| l.parse::<f64>().unwrap().abs() < 1e-6));

    let o = akpz(&["harmonicity", "--speed", "abs2", "--model", "square"]);
    let laps = column(&stdout(&o), "laplacian");
    assert!(laps.iter().all(|l| (l.parse::<f64>().unwrap() - 4.0).abs() < 1e-6));

    let o = akpz(&["harmonicity", "--speed", "quadratic:1,0,1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn output_is_deterministic() {
    let a = akpz(&["surface-tension", "--model", "square", "--resolution", "6"]);
    let b = akpz(&["surface-tension", "--model", "square", "--resolution", "6"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let first = stdout(&a).lines().nth(1).unwrap().to_string();
    // 17 significant digits
    assert!(first.split(',').all(|c| c.split('e').next().unwrap().trim_start_matches('-').len() == 18), "{first}");
}

#[test]
fn thread_cap_is_respected_and_validated() {
    let run = |threads: &str| {
        Command::new(env!("CARGO_BIN_EXE_akpz"))
            .args(["akpz-map", "--resolution", "8"])
            .env("AKPZ_THREADS", threads)
            .output()
            .unwrap()
    };
    let one = run("1");
    assert!(one.status.success());
    assert_eq!(one.stdout, run("3").stdout);
    let bad = run("0");
    assert_eq!(bad.status.code(), Some(2));
    assert!(stderr(&bad).contains("AKPZ_THREADS"));
}

#[test]
fn el_preserve_default_writes_trace() {
    let dir = tempfile::tempdir().unwrap();
    let o = akpz(&["el-preserve", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let trace = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert!(trace.starts_with("t,max_EL,max_Delta,R_probe,dDelta_probe_re,dDelta_probe_im"));
    assert_eq!(trace.lines().count(), 1 + 5);
    for f in ["trace.json", "h_initial.csv", "h_initial.json", "h_final.csv", "h_final.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let max_el: Vec<f64> = column(&trace, "max_EL").iter().map(|s| s.parse().unwrap()).collect();
    assert!(max_el.iter().all(|&e| e < 1e-3), "{max_el:?}");
}

#[test]
fn numerical_failure_reports_json() {
    let dir = tempfile::tempdir().unwrap();
    let o = akpz(&["el-preserve", "--shape", "affine:0.7,0.7", "--grid", "9x9", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let diag: serde_json::Value = serde_json::from_str(&stderr(&o)).expect("diagnostic JSON");
    assert_eq!(diag["status"], "error");
    assert_eq!(diag["experiment"], "el-preserve");
    assert!(Path::new(&dir.path().join("error.json")).exists());
}

#[test]
fn make_shape_writes_fields() {
    let dir = tempfile::tempdir().unwrap();
    let o = akpz(&["make-shape", "--method", "burgers", "--C", "const-i", "--grid", "9x9", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let header: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("z.json")).unwrap()).unwrap();
    assert_eq!(header["model"], "honeycomb");
    let h = std::fs::read_to_string(dir.path().join("height.csv")).unwrap();
    assert_eq!(h.lines().count(), 1 + 81);

    let o = akpz(&["make-shape", "--method", "newton"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`method`"));
}

#[test]
fn every_subcommand_documents_defaults() {
    for cmd in ["akpz-map", "harmonicity", "surface-tension", "make-shape", "el-preserve", "accept"] {
        let help = stdout(&akpz(&[cmd, "--help"]));
        assert!(help.contains("[default:"), "{cmd}");
    }
}

#[test]
fn accept_prints_a_table() {
    let o = akpz(&["accept", "--only", "1,3"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.lines().any(|l| l.starts_with("PASS 1.")));
    assert!(out.lines().any(|l| l.starts_with("PASS 3.")));
    assert!(out.contains("acceptance: 2 passed, 0 failed"));
    assert_eq!(akpz(&["accept", "--only", "12"]).status.code(), Some(2));
}

#[test]
fn shipped_example_config_runs() {
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/examples/el-preserve.json");
    let o = akpz(&["el-preserve", "--config", cfg.to_str().unwrap(), "--grid", "17x17"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 1 + 3);
    assert!(stderr(&o).contains("h_char - h_viscous"));
}
