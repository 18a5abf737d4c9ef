use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"
[grid]
d = 2
n = 16

[model]
family = "euler_poincare"

[basis]
xi = { kind = "cells", amplitude = 0.1 }

[time]
t_final = 0.02
dt = 2e-3

[seeds]
master = 3

[diagnostics]
loop_points = 32
members = 4
label_lattice = 8
"#;

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn stochflow(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stochflow"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env_remove("STOCHFLOW_OUT")
        .output()
        .unwrap()
}

fn summary(out: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn identities_write_a_manifested_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let out = dir.path().join("ids");
    let o = stochflow(&["identities"], &cfg, &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("identities.csv")).unwrap();
    assert!(csv.starts_with("identity,d,n,residual,tolerance,passed\n"));
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")));
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["subcommand"], "identities");
    // every file but the manifest itself is listed with its digest
    for entry in std::fs::read_dir(&out).unwrap() {
        let name = entry.unwrap().file_name().into_string().unwrap();
        if name != "manifest.json" {
            assert!(manifest["outputs"][&name].is_string(), "{name} missing from manifest");
        }
    }
}

#[test]
fn unknown_key_is_an_error_not_a_failed_check() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", &SMALL.replace("family =", "famliy_typo = 1\nfamily ="));
    let o = stochflow(&["run"], &cfg, &dir.path().join("o"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("famliy_typo"));
}

#[test]
fn missing_config_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = stochflow(&["run"], &dir.path().join("nope.toml"), &dir.path().join("o"));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn exceeded_tolerance_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &format!("{SMALL}tolerance = 1e-300\n"));
    let out = dir.path().join("k");
    let o = stochflow(&["kelvin"], &cfg, &out);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(summary(&out)["passed"], false);
    assert!(out.join("manifest.json").exists());
}

#[test]
fn energy_euler_kelvin_reports_without_failing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &SMALL.replace("euler_poincare", "energy_euler"));
    let out = dir.path().join("k");
    let o = stochflow(&["kelvin"], &cfg, &out);
    assert_eq!(o.status.code(), Some(0));
    let s = summary(&out);
    assert!(s["loops"][0]["max_rel_kelvin_residual"].as_f64().unwrap() > 0.0);
    let csv = std::fs::read_to_string(out.join("kelvin.csv")).unwrap();
    assert!(csv.starts_with("t,loop0_kelvin,loop0_drift,loop0_martingale,loop0_closure,"));
}

#[test]
fn single_member_flags_its_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &SMALL.replace("members = 4", "members = 1"));
    let out = dir.path().join("ci");
    let o = stochflow(&["cikelvin"], &cfg, &out);
    assert!(matches!(o.status.code(), Some(0 | 1)));
    assert_eq!(summary(&out)["loops"][0]["stderr_reliable"], false);
}

#[test]
fn reruns_and_thread_counts_give_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let runs: Vec<PathBuf> = ["1", "1", "2"]
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let out = dir.path().join(format!("r{i}"));
            let o = stochflow(&["cikelvin", "--threads", t], &cfg, &out);
            assert!(matches!(o.status.code(), Some(0 | 1)));
            out
        })
        .collect();
    for name in ["members.csv", "summary.json", "manifest.json"] {
        let a = std::fs::read(runs[0].join(name)).unwrap();
        for other in &runs[1..] {
            assert_eq!(a, std::fs::read(other.join(name)).unwrap(), "{name} differs");
        }
    }
}

#[test]
fn seed_flag_changes_the_digest_and_the_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    stochflow(&["run"], &cfg, &a);
    stochflow(&["run", "--seed", "99"], &cfg, &b);
    let digest = |p: &Path| {
        let m: Value = serde_json::from_str(&std::fs::read_to_string(p.join("manifest.json")).unwrap()).unwrap();
        m["config_digest"].as_str().unwrap().to_string()
    };
    assert_ne!(digest(&a), digest(&b));
    assert_ne!(std::fs::read(a.join("timeseries.csv")).unwrap(), std::fs::read(b.join("timeseries.csv")).unwrap());
}

#[test]
fn output_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let out = dir.path().join("from-env");
    let o = Command::new(env!("CARGO_BIN_EXE_stochflow"))
        .args(["identities", "--config"])
        .arg(&cfg)
        .env("STOCHFLOW_OUT", &out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(out.join("identities.csv").exists());
}

#[test]
fn saved_fields_load_back() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{SMALL}\n[output]\nsave_fields = true\nformats = [\"csv\", \"bin\"]\n");
    let cfg = write_config(dir.path(), "c.toml", &text);
    let out = dir.path().join("run");
    assert_eq!(stochflow(&["run"], &cfg, &out).status.code(), Some(0));
    let csv = stochflow_core::output::read_field(&out.join("u_final_csv.json")).unwrap();
    let bin = stochflow_core::output::read_field(&out.join("u_final_bin.json")).unwrap();
    assert_eq!(csv.physical(), bin.physical());
    assert_eq!(csv.grid().n(), 16);
}

#[test]
fn sweep_reports_slopes() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "{SMALL}\n[diagnostics.sweep]\nkind = \"amplitude\"\nvalues = [0.05, 0.1, 0.2]\n"
    );
    let cfg = write_config(dir.path(), "c.toml", &text.replace("t_final = 0.02", "t_final = 0.1"));
    let out = dir.path().join("sw");
    assert_eq!(stochflow(&["sweep"], &cfg, &out).status.code(), Some(0));
    let s = summary(&out);
    // distance to the noise-free run grows linearly with the amplitude
    let p = s["sweep"]["slopes"]["field_distance"].as_f64().unwrap();
    assert!((p - 1.0).abs() < 0.1, "slope {p}");
}
