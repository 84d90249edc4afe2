use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn homlab(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_homlab"));
    cmd.args(args).env_remove("HOMLAB_WORKERS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("homlab runs")
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

fn read_json(path: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn csv_rows(path: PathBuf) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(2)
        .map(str::to_string)
        .collect()
}

#[test]
fn geometry_certify_writes_certificate_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().to_str().unwrap();
    let out = homlab(
        &[
            "geometry-certify",
            "--dim",
            "2",
            "--c0",
            "2",
            "--index-bound",
            "16",
            "-o",
            o,
        ],
        &[],
    );
    ok(&out);
    let cert = read_json(dir.path().join("certificate.json"));
    assert!(cert["h2_ratio_min"].as_f64().unwrap() >= 1.0);
    assert!(cert["h2_ratio_max"].as_f64().unwrap() <= cert["h2_ratio_bound"].as_f64().unwrap());

    let manifest = read_json(dir.path().join("manifest.json"));
    assert_eq!(manifest["command"], "geometry-certify");
    let hash = manifest["config_sha256"].as_str().unwrap();
    let files = manifest["files"].as_array().unwrap();
    assert!(files.iter().any(|f| f["path"] == "certificate.json"));
    for f in files {
        let name = f["path"].as_str().unwrap();
        let bytes = fs::read(dir.path().join(name)).unwrap();
        assert_eq!(f["bytes"].as_u64().unwrap(), bytes.len() as u64, "{name}");
        if name.ends_with(".csv") || name.ends_with(".dat") {
            let first = String::from_utf8(bytes).unwrap().lines().next().unwrap().to_string();
            assert_eq!(first, format!("# config_sha256={hash}"), "{name}");
        }
    }
}

#[test]
fn rates_1d_sin_bump_reports_ten_rows_and_two_fits() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().to_str().unwrap();
    let out = homlab(
        &[
            "rates-1d",
            "--preset",
            "sin-bump",
            "--eps-min-exp",
            "3",
            "--eps-max-exp",
            "12",
            "-o",
            o,
        ],
        &[],
    );
    ok(&out);
    assert_eq!(csv_rows(dir.path().join("rates_1d.csv")).len(), 10);
    let report = read_json(dir.path().join("rates_1d.json"));
    assert!(report["l2_fit"]["slope"].as_f64().is_some());
    assert!(report["h1_fit"]["slope"].as_f64().is_some());
    assert!(report["a_star"].as_f64().unwrap() > 0.0);
}

#[test]
fn rates_periodic_2d_interior_slope_is_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().to_str().unwrap();
    let out = homlab(
        &[
            "rates",
            "--preset",
            "periodic-2d",
            "--eps-min-exp",
            "2",
            "--eps-max-exp",
            "4",
            "-o",
            o,
        ],
        &[],
    );
    ok(&out);
    assert_eq!(csv_rows(dir.path().join("convergence.csv")).len(), 3);
    let report = read_json(dir.path().join("convergence.json"));
    let slope = report["h1_interior_fit"]["slope"].as_f64().unwrap();
    assert!((slope - 1.0).abs() < 0.25, "interior slope {slope}");
}

#[test]
fn repeated_runs_give_identical_manifests_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().to_str().unwrap();
    let args = ["homogenize", "--cells-per-unit", "16", "-o", o];
    ok(&homlab(&args, &[("HOMLAB_WORKERS", "1")]));
    let first = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    ok(&homlab(&args, &[("HOMLAB_WORKERS", "3")]));
    let second = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    assert_eq!(first, second);
}

#[test]
fn config_file_and_flags_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "h.toml",
        "schema_version = 1\ncommand = \"homogenize\"\n[homogenize]\ncells_per_unit = 16\n",
    );
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&homlab(&["run", &cfg, "-o", a.to_str().unwrap()], &[]));
    ok(&homlab(
        &["homogenize", "--cells-per-unit", "16", "-o", b.to_str().unwrap()],
        &[],
    ));
    let ma = read_json(a.join("manifest.json"));
    let mb = read_json(b.join("manifest.json"));
    assert_eq!(ma["config_sha256"], mb["config_sha256"]);
    assert_eq!(
        fs::read(a.join("homogenized.json")).unwrap(),
        fs::read(b.join("homogenized.json")).unwrap()
    );
}

#[test]
fn defaults_round_trip_through_check() {
    let dir = tempfile::tempdir().unwrap();
    let out = homlab(&["defaults", "corrector"], &[]);
    ok(&out);
    let cfg = write(dir.path(), "c.toml", &String::from_utf8(out.stdout).unwrap());
    ok(&homlab(&["check", &cfg], &[]));
}

#[test]
fn shipped_example_configs_are_valid() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(root).unwrap() {
        let path = entry.unwrap().path();
        ok(&homlab(&["check", path.to_str().unwrap()], &[]));
        n += 1;
    }
    assert!(n >= 4);
}

#[test]
fn schema_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().join("out");
    let o = o.to_str().unwrap();
    let cases = [
        ("version.toml", "schema_version = 2\ncommand = \"potential\"\n"),
        ("unknown.toml", "schema_version = 1\ncommand = \"potential\"\nfoo = 1\n"),
        ("nested.toml", "schema_version = 1\ncommand = \"potential\"\n[solver]\ntolerance = 1e-8\n"),
        ("profile.toml", "schema_version = 1\ncommand = \"corrector\"\n[coefficient.profile]\nkind = \"bump\"\nrho = 0.5\nwidth = 1.0\n"),
        ("source.toml", "schema_version = 1\ncommand = \"rates-1d\"\n[rates_1d.source]\nkind = \"constant\"\nvalue = 1.0\nscale = 2.0\n"),
        ("preset.toml", "schema_version = 1\ncommand = \"rates-1d\"\n[rates_1d]\npreset = \"nope\"\n"),
        ("bc.toml", "schema_version = 1\ncommand = \"corrector\"\n[corrector]\nbc = \"neumann\"\n"),
    ];
    for (name, text) in cases {
        let cfg = write(dir.path(), name, text);
        let out = homlab(&["run", &cfg, "-o", o], &[]);
        assert_eq!(
            out.status.code(),
            Some(2),
            "{name}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let cfg = write(dir.path(), "pot.toml", "schema_version = 1\ncommand = \"potential\"\n");
    let out = homlab(&["homogenize", "--config", &cfg, "-o", o], &[]);
    assert_eq!(out.status.code(), Some(2));
    let out = homlab(&["potential", "-o", o], &[("HOMLAB_WORKERS", "zero")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn numerical_failures_exit_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().join("out");
    let o = o.to_str().unwrap();
    let stalled = write(
        dir.path(),
        "stalled.toml",
        "schema_version = 1\ncommand = \"homogenize\"\n[solver]\nrel_tol = 1e-12\nmax_iter = 1\npreconditioner = \"jacobi\"\n",
    );
    let out = homlab(&["run", &stalled, "-o", o], &[]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let coarse = write(
        dir.path(),
        "coarse.toml",
        "schema_version = 1\ncommand = \"rates\"\n[rates]\nnodes_per_period = 4\neps_min_exp = 2\neps_max_exp = 3\n",
    );
    let out = homlab(&["run", &coarse, "-o", o], &[]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
