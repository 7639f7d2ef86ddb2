use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rwalk_cli::config::RunConfig;

fn rwalk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rwalk"))
        .args(args)
        .env_remove("RWALK_THREADS")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

const Z2: &str = r#"{"group": {"kind": "lattice", "d": 2}, "measure": {"type": "srw"}, "steps": 200, "prune_eps": 1e-14}"#;

fn f2(steps: usize) -> String {
    format!(
        r#"{{"group": {{"kind": "free_product", "left": {{"kind": "lattice", "d": 1}}, "right": {{"kind": "lattice", "d": 1}}}},
            "measure": {{"type": "adapted", "alpha": 0.5, "mu0": {{"type": "srw"}}, "mu1": {{"type": "srw"}}}},
            "series": "transfer", "steps": {steps}}}"#
    )
}

#[test]
fn config_round_trip_on_disk() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/f2_srw.json");
    let cfg = RunConfig::load(&path).unwrap();
    let again = RunConfig::from_json(&cfg.to_json()).unwrap();
    assert_eq!(cfg, again);
}

#[test]
fn convolve_reads_its_cache() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    let text = Z2.replace(
        "\"steps\": 200",
        &format!(
            "\"steps\": 200, \"cache_dir\": {:?}",
            cache.to_str().unwrap()
        ),
    );
    let cfg = write_config(dir.path(), "z2.json", &text);
    let cfg = cfg.to_str().unwrap();
    let first = rwalk(&["convolve", "--config", cfg]);
    assert!(
        first.status.success(),
        "{}",
        String::from_utf8_lossy(&first.stderr)
    );
    let second = rwalk(&["convolve", "--config", cfg]);
    assert_eq!(first.stdout, second.stdout);

    let entries: Vec<_> = std::fs::read_dir(&cache).unwrap().collect();
    assert_eq!(entries.len(), 1);
    let file = entries[0].as_ref().unwrap().path();
    let body = std::fs::read_to_string(&file).unwrap();
    assert!(body.starts_with("# rwalk-cache v1\nsha256="));

    // a shorter run is served from the cache rows
    let row2 = body.lines().nth(4).unwrap().to_string();
    let marked = body.replace(&row2, "2,5.0000000000000000e-1,0.0000000000000000e0");
    std::fs::write(&file, &marked).unwrap();
    let short = rwalk(&["convolve", "--config", cfg, "--steps", "10"]);
    let out = String::from_utf8(short.stdout).unwrap();
    assert!(out.contains("\n2,5.0000000000000000e-1,"), "{out}");

    // a foreign digest invalidates the file
    let foreign = marked.replacen("sha256=", "sha256=00", 1);
    std::fs::write(&file, foreign).unwrap();
    let fresh = rwalk(&["convolve", "--config", cfg]);
    assert_eq!(fresh.stdout, first.stdout);
}

#[test]
fn csv_format() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "z2.json", Z2);
    let out = rwalk(&[
        "convolve",
        "--config",
        cfg.to_str().unwrap(),
        "--steps",
        "4",
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(!text.contains('\r'));
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], "n,a_n,defect");
    assert_eq!(lines[1], "0,1.0000000000000000e0,0.0000000000000000e0");
    assert_eq!(lines[3], "2,2.5000000000000000e-1,0.0000000000000000e0");
    assert_eq!(lines.len(), 6);
}

#[test]
fn thread_counts_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "z2.json", Z2);
    let cfg = cfg.to_str().unwrap();
    let base = rwalk(&["convolve", "--config", cfg, "--threads", "1"]).stdout;
    for t in ["2", "4"] {
        assert_eq!(
            rwalk(&["convolve", "--config", cfg, "--threads", t]).stdout,
            base
        );
    }
    let via_env = Command::new(env!("CARGO_BIN_EXE_rwalk"))
        .args(["convolve", "--config", cfg])
        .env("RWALK_THREADS", "3")
        .output()
        .unwrap();
    assert_eq!(via_env.stdout, base);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "bad.json", "{\"group\": 3}");
    assert_eq!(
        rwalk(&["spectral-radius", "--config", bad.to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );
    let missing = dir.path().join("nope.json");
    assert_eq!(
        rwalk(&["classify", "--config", missing.to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );

    let short = write_config(dir.path(), "short.json", &f2(40));
    let out = rwalk(&["classify", "--config", short.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stdout).contains("inconclusive"));

    let budget = write_config(
        dir.path(),
        "budget.json",
        r#"{"group": {"kind": "lattice", "d": 3}, "measure": {"type": "srw"}, "steps": 400, "support_budget": 500}"#,
    );
    assert_eq!(
        rwalk(&["convolve", "--config", budget.to_str().unwrap()])
            .status
            .code(),
        Some(4)
    );

    let z = write_config(
        dir.path(),
        "z.json",
        r#"{"group": {"kind": "lattice", "d": 1}, "measure": {"type": "srw"}, "steps": 400}"#,
    );
    let diverges = rwalk(&["green", "--config", z.to_str().unwrap(), "--r", "1.0"]);
    assert_eq!(diverges.status.code(), Some(3));
    assert_eq!(
        rwalk(&["classify", "--config", z.to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn green_on_z() {
    let dir = tempfile::tempdir().unwrap();
    let z = write_config(
        dir.path(),
        "z.json",
        r#"{"group": {"kind": "lattice", "d": 1}, "measure": {"type": "srw"}, "steps": 2000}"#,
    );
    let out = rwalk(&["green", "--config", z.to_str().unwrap(), "--r", "0.6"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    let value: f64 = row[2].parse().unwrap();
    assert!((value - 1.25).abs() < 1e-12, "{text}");
}

#[test]
fn spectral_radius_and_first_return() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "f2.json", &f2(1024));
    let cfg = cfg.to_str().unwrap();
    let out = String::from_utf8(rwalk(&["spectral-radius", "--config", cfg]).stdout).unwrap();
    let get = |key: &str| -> f64 {
        out.lines()
            .find_map(|l| l.strip_prefix(&format!("{key},")))
            .unwrap()
            .parse()
            .unwrap()
    };
    assert!((get("R_excursion") - 2.0 / 3f64.sqrt()).abs() < 1e-9);
    assert!((get("rho") - 3f64.sqrt() / 2.0).abs() < 1e-3);

    let out = rwalk(&[
        "first-return",
        "--config",
        cfg,
        "--factor",
        "0",
        "--eta",
        "0",
        "--r-frac",
        "1.0",
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    let lambda: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("lambda,"))
        .unwrap()
        .parse()
        .unwrap();
    assert!(
        (lambda - (1.0 / 3f64.sqrt() + 1.0 / 3.0)).abs() < 1e-6,
        "{text}"
    );
    let both = rwalk(&[
        "first-return",
        "--config",
        cfg,
        "--factor",
        "0",
        "--r",
        "1.0",
        "--r-frac",
        "1.0",
    ]);
    assert_eq!(both.status.code(), Some(2));
}

#[test]
fn classify_writes_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "f2.json", &f2(2048));
    let json = dir.path().join("report.json");
    let out = rwalk(&[
        "classify",
        "--config",
        cfg.to_str().unwrap(),
        "--json",
        json.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v["decision"]["regime"], "spectrally_positive_recurrent");
    assert_eq!(v["divergence"], "divergent");
}

#[test]
fn oracle_csv() {
    let out = rwalk(&["oracle", "--kind", "binomial-z", "--steps", "4"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().next(), Some("n,a_n,defect,ln_a_n"));
    assert!(text
        .lines()
        .nth(3)
        .unwrap()
        .starts_with("2,5.0000000000000000e-1,"));
    let radial = rwalk(&["oracle", "--kind", "radial-free", "--steps", "20000"]);
    let last = String::from_utf8(radial.stdout)
        .unwrap()
        .lines()
        .last()
        .unwrap()
        .to_string();
    let ln: f64 = last.rsplit(',').next().unwrap().parse().unwrap();
    assert!(ln.is_finite() && ln < -2000.0);
    assert_eq!(rwalk(&["oracle", "--kind", "dense"]).status.code(), Some(2));
}
