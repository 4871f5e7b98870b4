use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::DMatrix;
use pvko::cli::RunManifest;
use pvko::edmd::LocalKoopman;
use pvko::lifting::make_monomial_basis;
use pvko::pvko::PvkoModel;
use tempfile::TempDir;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny_vdp.json")
}

fn pvko(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pvko")).args(args).output().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, edit: impl FnOnce(&mut serde_json::Value)) -> PathBuf {
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(fixture()).unwrap()).unwrap();
    edit(&mut v);
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    path
}

/// collect, identify, synthesize and simulate into `out`.
fn pipeline(config: &Path, out: &Path) {
    let (c, o) = (config.to_str().unwrap(), out.to_str().unwrap());
    ok(&pvko(&["--config", c, "--out", o, "collect"]));
    ok(&pvko(&["--config", c, "--out", o, "identify", "--snapshots", o]));
    let model = out.join("model.json");
    ok(&pvko(&[
        "--config",
        c,
        "--out",
        o,
        "synthesize",
        "--model",
        model.to_str().unwrap(),
    ]));
    let ctrl = out.join("controller.json");
    ok(&pvko(&[
        "--config",
        c,
        "--out",
        o,
        "simulate",
        "--controller",
        ctrl.to_str().unwrap(),
    ]));
}

fn manifest(out: &Path, command: &str) -> RunManifest {
    serde_json::from_str(&std::fs::read_to_string(out.join(format!("manifest-{command}.json"))).unwrap()).unwrap()
}

#[test]
fn unknown_plant_is_a_config_error_and_writes_nothing() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), |v| v["plant"]["name"] = "duffing".into());
    let out = dir.path().join("out");
    let res = pvko(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "collect",
    ]);
    assert_eq!(res.status.code(), Some(2));
    let msg = stderr(&res);
    assert!(msg.contains("plant"), "{msg}");
    assert!(msg.contains("config.json:"), "no location in: {msg}");
    assert!(!out.exists());
}

#[test]
fn unknown_field_is_rejected_with_its_path() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), |v| v["synthesis"]["horizn"] = 5.into());
    let res = pvko(&["--config", cfg.to_str().unwrap(), "collect"]);
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr(&res).contains("horizn"), "{}", stderr(&res));
}

#[test]
fn missing_config_file_is_an_io_error() {
    let res = pvko(&["--config", "/nonexistent/pvko.json", "collect"]);
    assert_eq!(res.status.code(), Some(4));
}

#[test]
fn missing_csv_column_is_a_parse_error() {
    let dir = TempDir::new().unwrap();
    let snaps = dir.path().join("data/snapshots");
    std::fs::create_dir_all(&snaps).unwrap();
    std::fs::write(snaps.join("p_1.csv"), "t,x1,x2,u1\n0.0,1.0,2.0,0.0\n0.01,1.1,2.1,0.0\n").unwrap();
    let res = pvko(&[
        "--config",
        fixture().to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
        "identify",
        "--snapshots",
        dir.path().join("data").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr(&res).contains("missing column `p`"), "{}", stderr(&res));
}

#[test]
fn reruns_reproduce_every_output_hash() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    pipeline(&fixture(), &a);
    pipeline(&fixture(), &b);
    for cmd in ["collect", "identify", "synthesize", "simulate"] {
        let (ma, mb) = (manifest(&a, cmd), manifest(&b, cmd));
        assert!(!ma.outputs.is_empty());
        let hashes = |m: &RunManifest| {
            m.outputs
                .iter()
                .filter(|e| !e.path.ends_with("timing.json"))
                .map(|e| (e.path.clone(), e.sha256.clone()))
                .collect::<Vec<_>>()
        };
        assert_eq!(hashes(&ma), hashes(&mb), "{cmd}");
        assert_eq!(ma.config_sha256, mb.config_sha256);
    }
    let snaps = manifest(&a, "collect");
    assert_eq!(
        snaps
            .outputs
            .iter()
            .filter(|e| e.path.starts_with("snapshots/"))
            .count(),
        2
    );
    let rows = std::fs::read_to_string(a.join("trajectory.csv"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(rows, 61);
    assert!(std::fs::read_to_string(a.join("trajectory.gp"))
        .unwrap()
        .contains("multiplot"));

    // A different seed changes the data.
    let c = dir.path().join("c");
    let res = pvko(&[
        "--config",
        fixture().to_str().unwrap(),
        "--seed",
        "9",
        "--out",
        c.to_str().unwrap(),
        "collect",
    ]);
    ok(&res);
    assert_ne!(
        manifest(&a, "collect").outputs[0].sha256,
        manifest(&c, "collect").outputs[0].sha256
    );
}

#[test]
fn cost_table_against_itself_is_zero_percent() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("run");
    pipeline(&fixture(), &out);
    let traj = out.join("trajectory.csv");
    let spec = |label: &str| format!("{label}={}", traj.display());
    let res = pvko(&[
        "--out",
        out.to_str().unwrap(),
        "evaluate",
        "cost-table",
        "--trajectory",
        &spec("a"),
        "--trajectory",
        &spec("b"),
        "--reference",
        "a",
    ]);
    ok(&res);
    let table = std::fs::read_to_string(out.join("cost_table.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(
        lines.next(),
        Some("controller,final_cost,mean_solve_seconds,cost_ratio_percent")
    );
    for line in lines {
        assert!(line.ends_with(",0.0"), "{line}");
    }
}

#[test]
fn short_schedule_reports_missing_forecast() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), |v| {
        v["scenario"]["parameter"] = serde_json::json!({"kind": "schedule", "points": [[0.0, 1.0], [0.3, 2.0]]});
    });
    let out = dir.path().join("out");
    pipeline_until_synthesis(&cfg, &out);
    let ctrl = out.join("controller.json");
    let res = pvko(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "simulate",
        "--controller",
        ctrl.to_str().unwrap(),
    ]);
    assert!(!res.status.success());
    assert!(stderr(&res).contains("forecast"), "{}", stderr(&res));
    assert!(!out.join("trajectory.csv").exists());
}

fn pipeline_until_synthesis(config: &Path, out: &Path) {
    let (c, o) = (config.to_str().unwrap(), out.to_str().unwrap());
    ok(&pvko(&["--config", c, "--out", o, "collect"]));
    ok(&pvko(&["--config", c, "--out", o, "identify", "--snapshots", o]));
    let model = out.join("model.json");
    ok(&pvko(&[
        "--config",
        c,
        "--out",
        o,
        "synthesize",
        "--model",
        model.to_str().unwrap(),
    ]));
}

#[test]
fn unstabilizable_model_is_a_numerical_failure() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), |v| {
        v["plant"] = serde_json::json!({"name": "lorenz"});
        v["synthesis"]["qx"] = serde_json::json!([[1.0]]);
        v["synthesis"]["state_bounds"] = serde_json::json!({"lo": [-1.0], "hi": [1.0]});
    });
    let basis = make_monomial_basis(1, vec![vec![1]]).unwrap();
    let local = LocalKoopman::new(1.0, DMatrix::from_element(1, 1, 1.5), DMatrix::zeros(1, 1)).unwrap();
    let model = PvkoModel::new(basis, vec![local], DMatrix::identity(1, 1), 0.01).unwrap();
    let path = dir.path().join("model.json");
    model.save(&path).unwrap();
    let res = pvko(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
        "synthesize",
        "--model",
        path.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(3), "{}", stderr(&res));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            let text = std::fs::read_to_string(&path).unwrap();
            pvko::cli::parse_config(&text, &path.display().to_string()).unwrap();
            seen += 1;
        }
    }
    assert!(seen >= 3);
}
