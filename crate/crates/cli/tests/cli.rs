use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const DIRAC: &str = r#"
name = "dirac"
seed = 3

[model]
kind = "dirac"
mu = [1.0, -0.5]

[solver]
scheme = "exp_euler"
n_steps = 16

[sample]
n_samples = 3
"#;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn flowguide(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowguide"))
        .args(args)
        .env("FLOWGUIDE_OUTDIR", out)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("experiment.toml");
    fs::write(&path, body).unwrap();
    path
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(|v| v.parse().unwrap()).collect())
        .collect();
    (header, rows)
}

#[test]
fn dirac_terminal_matches_closed_form() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), DIRAC);
    let o = flowguide(dir.path(), &["sample", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let run = dir.path().join("dirac");
    assert!(run.join("summary.json").is_file());

    let (header, rows) = read_csv(&run.join("trajectories.csv"));
    assert_eq!(header, ["sample", "step", "t", "x0", "x1"]);
    let (_, ends) = read_csv(&run.join("terminals.csv"));
    assert_eq!(ends.len(), 3);
    let mu = [1.0, -0.5];
    for end in &ends {
        let s = end[0];
        let start = rows.iter().find(|r| r[0] == s && r[1] == 0.0).unwrap();
        let last = rows.iter().rfind(|r| r[0] == s).unwrap();
        // CondOT: x_t = t mu + (1 - t) x0 for a point mass.
        let t = last[2];
        for k in 0..2 {
            let exact = t * mu[k] + (1.0 - t) * start[3 + k];
            assert!((end[1 + k] - exact).abs() <= 1e-10, "{} vs {exact}", end[1 + k]);
        }
    }
}

#[test]
fn negative_step_count_names_the_field() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &DIRAC.replace("n_steps = 16", "n_steps = -4"));
    let o = flowguide(dir.path(), &["sample", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("solver.n_steps"), "{}", stderr(&o));
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &DIRAC.replace("n_steps = 16", "n_steps = 16\nstep_count = 3"));
    let o = flowguide(dir.path(), &["sample", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("step_count"), "{}", stderr(&o));
}

#[test]
fn set_overrides_scalar_fields() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), DIRAC);
    let o = flowguide(
        dir.path(),
        &["sample", "--config", cfg.to_str().unwrap(), "--set", "solver.n_steps=5", "--set", "name=short"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let (_, rows) = read_csv(&dir.path().join("short/trajectories.csv"));
    assert_eq!(rows.iter().filter(|r| r[0] == 0.0).count(), 6);
}

#[test]
fn empty_study_list_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = configs().join("verify_mixture.toml");
    let o = flowguide(dir.path(), &["verify", "--config", cfg.to_str().unwrap(), "--set", "verify.studies=[]"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn coarse_reference_is_inconclusive() {
    let dir = TempDir::new().unwrap();
    let cfg = configs().join("verify_coarse_reference.toml");
    let o = flowguide(dir.path(), &["verify", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("verify_coarse_reference/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["passed"], false);
    assert_eq!(summary["studies"][0]["outcome"], "inconclusive");
}

#[test]
fn identity_suite_lists_every_residual() {
    let dir = TempDir::new().unwrap();
    let cfg = configs().join("verify_mixture.toml");
    let o = flowguide(
        dir.path(),
        &["verify", "--config", cfg.to_str().unwrap(), "--set", "verify.studies=[\"identity_suite\"]"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("verify_mixture/summary.json")).unwrap()).unwrap();
    let text = summary.to_string();
    for name in flowguide::verify::IDENTITY_CHECKS {
        assert!(text.contains(name), "{name} missing from {text}");
    }
}

#[test]
fn repeated_runs_are_byte_identical() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let cfg = write_config(a.path(), DIRAC);
    for dir in [&a, &b] {
        let o = flowguide(dir.path(), &["sample", "--config", cfg.to_str().unwrap(), "--jobs", "2"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for file in ["trajectories.csv", "terminals.csv", "summary.json", "trajectories.svg"] {
        assert_eq!(
            fs::read(a.path().join("dirac").join(file)).unwrap(),
            fs::read(b.path().join("dirac").join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn zero_jobs_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), DIRAC);
    let o = flowguide(dir.path(), &["sample", "--config", cfg.to_str().unwrap(), "--jobs", "0"]);
    assert_eq!(o.status.code(), Some(1));
}
