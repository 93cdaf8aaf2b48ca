use std::path::Path;
use std::process::{Command, Output};

use occ_core::fitter::{scan, SyntheticSetup};
use occ_core::io::{self, CloudFormat};
use occ_core::volume::{ActivationMode, ScalarGrid};
use sha2::{Digest, Sha256};

fn occ(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_occ"))
        .args(args)
        .env("THREADS", "1")
        .output()
        .expect("run occ")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Default-scene grid occupied below 1 m.
fn write_test_grid(dir: &Path) -> String {
    let spec = SyntheticSetup::default_setup().scene.grid;
    let grid = ScalarGrid::from_fn(spec, ActivationMode::Probability, |p| if p.y < 1.0 { 6.0 } else { -6.0 }).unwrap();
    let path = dir.join("g.occ");
    io::write_grid(&grid, &path).unwrap();
    path.to_str().unwrap().to_string()
}

/// Simulated default-scene lidar scan.
fn write_test_cloud(dir: &Path) -> String {
    let setup = SyntheticSetup::default_setup();
    let cloud = scan(&setup.scene, &setup.lidar, false);
    let path = dir.join("cloud.xyz");
    io::write_points(&cloud.points, &path, CloudFormat::Xyz).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(occ(&[]).status.code(), Some(1));
    assert_eq!(occ(&["eval-occ", "--bogus"]).status.code(), Some(1));
    let o = occ(&["eval-occ", "--grid", "/nonexistent/g.occ", "--cloud", "/nonexistent/c.xyz"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/nonexistent/g.occ"), "{}", stderr(&o));
    assert!(!stderr(&o).contains("error: error:"));
}

#[test]
fn help_succeeds_and_documents_formats() {
    let o = occ(&["--help"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("OCCGRID1"));
    assert!(text.contains("THREADS"));
}

#[test]
fn malformed_grid_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.occ");
    std::fs::write(&path, b"OCCGRID1 but truncated").unwrap();
    let cloud = write_test_cloud(dir.path());
    let o = occ(&["eval-occ", "--grid", path.to_str().unwrap(), "--cloud", &cloud]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.occ"), "{}", stderr(&o));
}

#[test]
fn sign_flip_needs_an_sdf_grid() {
    let dir = tempfile::tempdir().unwrap();
    let grid = write_test_grid(dir.path());
    let cloud = write_test_cloud(dir.path());
    let o = occ(&["eval-occ", "--grid", &grid, "--cloud", &cloud, "--flip-sign"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("sdf"), "{}", stderr(&o));
}

#[test]
fn render_depth_requires_out() {
    let dir = tempfile::tempdir().unwrap();
    let grid = write_test_grid(dir.path());
    let o = occ(&["render-depth", "--grid", &grid]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--out"), "{}", stderr(&o));
}

#[test]
fn malformed_labels_report_file_and_offset() {
    let dir = tempfile::tempdir().unwrap();
    let grid = write_test_grid(dir.path());
    let labels = dir.path().join("labels.csv");
    std::fs::write(&labels, "x,y,z,occupied\n1,2,3,1\n1,2,oops,0\n").unwrap();
    let cloud = write_test_cloud(dir.path());
    let o = occ(&["eval-occ", "--grid", &grid, "--cloud", &cloud, "--labels", labels.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("labels.csv") && err.contains("offset"), "{err}");
}

#[test]
fn eval_occ_is_deterministic_and_manifest_matches_files() {
    let dir = tempfile::tempdir().unwrap();
    let grid = write_test_grid(dir.path());
    let out = dir.path().join("run");
    let cloud = write_test_cloud(dir.path());
    let args = ["eval-occ", "--grid", &grid, "--cloud", &cloud, "--threshold", "0.5"];
    let first = occ(&args);
    assert!(first.status.success(), "{}", stderr(&first));
    let text = String::from_utf8(first.stdout.clone()).unwrap();
    assert!(text.starts_with("threshold,abs_rel,"), "{text}");
    assert_eq!(occ(&args).stdout, first.stdout);

    let mut with_out = args.to_vec();
    with_out.extend(["--out", out.to_str().unwrap()]);
    let o = occ(&with_out);
    assert!(o.status.success());
    assert_eq!(o.stdout, first.stdout);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "eval-occ");
    assert!(!manifest["args"].as_array().unwrap().iter().any(|a| a == "--out"));
    let artifacts = manifest["artifacts"].as_array().unwrap();
    assert_eq!(artifacts.len(), 1);
    let bytes = std::fs::read(out.join(artifacts[0]["path"].as_str().unwrap())).unwrap();
    let digest: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(artifacts[0]["sha256"], digest.as_str());
    assert_eq!(artifacts[0]["bytes"], bytes.len());
}

#[test]
fn replay_reproduces_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let grid = write_test_grid(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = occ(&["extract-mesh", "--grid", &grid, "--out", a.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = a.join("manifest.json");
    let o = occ(&["replay", "--manifest", manifest.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for name in ["mesh.ply", "manifest.json"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn malformed_manifest_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.json");
    std::fs::write(&path, "{\"tool\": \"occ\",").unwrap();
    let o = occ(&["replay", "--manifest", path.to_str().unwrap(), "--out", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 1"), "{}", stderr(&o));
}

#[test]
fn small_selfcheck_passes() {
    let o = occ(&["selfcheck", "--instances", "20", "--rays", "200", "--render-instances", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("composite-identity"));
}
