use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL_CONFIG: &str = r#"
[train]
epochs = 6
learning_rate = 0.01
lr_schedule = { kind = "constant" }
n_repeats = 2

[model]
global_widths = [8, 4]

[model.pointnet]
point_widths = [8, 12]
transform_point_widths = [8, 12]
transform_fc_widths = [8]

[data]
points_per_cloud = 32
"#;

fn wdsurv(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wdsurv"))
        .args(args)
        .current_dir(cwd)
        .env_remove("WDSURV_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout.clone()).unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new(n: usize) -> Self {
        let dir = TempDir::new().unwrap();
        fs::write(
            dir.path().join("spec.toml"),
            format!("n_subjects = {n}\npoints_per_cloud = 48\nrng_seed = 3\n"),
        )
        .unwrap();
        fs::write(dir.path().join("run.toml"), SMALL_CONFIG).unwrap();
        stdout(&wdsurv(
            &["generate", "--spec", "spec.toml", "--out-dir", "cohort"],
            dir.path(),
        ));
        Fixture { dir }
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn run(&self, args: &[&str]) -> Output {
        wdsurv(args, self.path())
    }

    fn train(&self, variant: &str, extra: &[&str]) -> serde_json::Value {
        let ck = format!("{variant}.json");
        let mut args = vec![
            "train",
            "--manifest",
            "cohort/manifest.csv",
            "--config",
            "run.toml",
            "--variant",
            variant,
            "--checkpoint",
            &ck,
        ];
        args.extend_from_slice(extra);
        serde_json::from_str(&stdout(&self.run(&args))).unwrap()
    }
}

fn read_tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(read_tree(&p));
        } else {
            out.push((
                p.strip_prefix(dir).unwrap().to_path_buf(),
                fs::read(&p).unwrap(),
            ));
        }
    }
    out.sort();
    out
}

#[test]
fn generate_writes_one_cloud_per_row_reproducibly() {
    let f = Fixture::new(50);
    let manifest = fs::read_to_string(f.path().join("cohort/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 51);
    assert_eq!(
        fs::read_dir(f.path().join("cohort/clouds"))
            .unwrap()
            .count(),
        50
    );
    stdout(&f.run(&["generate", "--spec", "spec.toml", "--out-dir", "again"]));
    let a = read_tree(&f.path().join("cohort"));
    let b = read_tree(&f.path().join("again"));
    assert_eq!(a, b);
}

#[test]
fn generate_rejects_invalid_spec() {
    let f = Fixture::new(10);
    fs::write(f.path().join("bad.toml"), "baseline_hazard_rate = -0.1\n").unwrap();
    let o = f.run(&["generate", "--spec", "bad.toml", "--out-dir", "x"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("baseline_hazard_rate"));
    assert!(o.stdout.is_empty());
}

#[test]
fn seed_environment_variable_overrides() {
    let f = Fixture::new(10);
    let with_seed = |seed: &str, out: &str| {
        Command::new(env!("CARGO_BIN_EXE_wdsurv"))
            .args(["generate", "--spec", "spec.toml", "--out-dir", out])
            .current_dir(f.path())
            .env("WDSURV_SEED", seed)
            .output()
            .unwrap()
    };
    let v: serde_json::Value = serde_json::from_str(&stdout(&with_seed("99", "s99"))).unwrap();
    assert_eq!(v["seed"], 99);
    assert_ne!(
        read_tree(&f.path().join("s99")),
        read_tree(&f.path().join("cohort"))
    );
    assert_eq!(with_seed("abc", "bad").status.code(), Some(1));
}

#[test]
fn train_wide_reports_coefficients() {
    let f = Fixture::new(80);
    let s = f.train("wide", &[]);
    let c = s["test_c_index"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&c));
    assert!(!s["coefficients"].as_array().unwrap().is_empty());
    assert!(s.get("decomposition").is_none());
    assert!(f.path().join("wide.json.epochs.csv").exists());
    let epochs = fs::read_to_string(f.path().join("wide.json.epochs.csv")).unwrap();
    assert_eq!(epochs.lines().count(), 7);

    let table = stdout(&f.run(&["coefficients", "--checkpoint", "wide.json"]));
    let names: Vec<&str> = table
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    let from_summary: Vec<&str> = s["coefficients"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["feature"].as_str().unwrap())
        .collect();
    assert_eq!(names, from_summary);
    // 5 biomarkers, gender, 4 spline, 4 education contrasts, 4 interactions
    assert_eq!(names.len(), 18);
    assert!(names.contains(&"age_ns1×gender"));
}

#[test]
fn train_widedeep_reports_decomposition() {
    let f = Fixture::new(80);
    let s = f.train("widedeep", &["--with-volume"]);
    assert_eq!(s["with_volume"], true);
    let d = &s["decomposition"];
    for key in [
        "wide_mean",
        "wide_sd",
        "deep_mean",
        "deep_sd",
        "correlation",
    ] {
        assert!(d[key].is_number(), "{key}");
    }
    let names = stdout(&f.run(&["coefficients", "--checkpoint", "widedeep.json"]));
    assert!(names.contains("hippocampus_volume,"));
}

#[test]
fn unknown_variant_is_a_user_error() {
    let f = Fixture::new(10);
    let o = f.run(&[
        "train",
        "--manifest",
        "cohort/manifest.csv",
        "--variant",
        "cnn",
        "--checkpoint",
        "x.json",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn deep_only_checkpoint_has_no_coefficients() {
    let f = Fixture::new(60);
    f.train("deep", &[]);
    let o = f.run(&["coefficients", "--checkpoint", "deep.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("shape-only"));
}

#[test]
fn predict_scores_every_row_deterministically() {
    let f = Fixture::new(60);
    f.train("widedeep", &[]);
    let args = [
        "predict",
        "--checkpoint",
        "widedeep.json",
        "--manifest",
        "cohort/manifest.csv",
    ];
    let a = stdout(&f.run(&args));
    assert_eq!(a.lines().count(), 61);
    assert_eq!(a.lines().next(), Some("subject_id,risk_score"));
    assert_eq!(a, stdout(&f.run(&args)));

    let e: serde_json::Value = serde_json::from_str(&stdout(&f.run(&[
        "evaluate",
        "--checkpoint",
        "widedeep.json",
        "--manifest",
        "cohort/manifest.csv",
    ])))
    .unwrap();
    assert!(e["c_index"].as_f64().unwrap() > 0.0);
}

fn drop_column(src: &Path, dst: &Path, column: &str) {
    let text = fs::read_to_string(src).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let idx = header.iter().position(|c| *c == column).unwrap();
    let out: String = text
        .lines()
        .map(|l| {
            let cells: Vec<&str> = l
                .split(',')
                .enumerate()
                .filter(|(i, _)| *i != idx)
                .map(|(_, c)| c)
                .collect();
            cells.join(",") + "\n"
        })
        .collect();
    fs::write(dst, out).unwrap();
}

#[test]
fn predict_rejects_schema_mismatch() {
    let f = Fixture::new(60);
    f.train("wide", &["--with-volume"]);
    let src = f.path().join("cohort/manifest.csv");
    drop_column(
        &src,
        &f.path().join("cohort/no_volume.csv"),
        "hippocampus_volume",
    );
    drop_column(&src, &f.path().join("cohort/no_age.csv"), "age");
    for (manifest, column) in [
        ("cohort/no_volume.csv", "hippocampus_volume"),
        ("cohort/no_age.csv", "age"),
    ] {
        let o = f.run(&[
            "predict",
            "--checkpoint",
            "wide.json",
            "--manifest",
            manifest,
        ]);
        assert_eq!(o.status.code(), Some(1), "{manifest}");
        assert!(
            String::from_utf8_lossy(&o.stderr).contains(column),
            "{manifest}"
        );
        assert!(o.stdout.is_empty());
    }
}

#[test]
fn repeat_emits_rows_per_variant_and_medians() {
    let f = Fixture::new(60);
    let args = |out: &'static str| {
        [
            "repeat",
            "--manifest",
            "cohort/manifest.csv",
            "--config",
            "run.toml",
            "--variants",
            "wide,deep",
            "--out-dir",
            out,
        ]
    };
    let medians = stdout(&f.run(&args("r1")));
    assert_eq!(medians.lines().count(), 3);
    let table = fs::read_to_string(f.path().join("r1/repeats.csv")).unwrap();
    assert_eq!(table.lines().filter(|l| l.starts_with("wide,")).count(), 2);
    assert_eq!(table.lines().filter(|l| l.starts_with("deep,")).count(), 2);
    stdout(&f.run(&args("r2")));
    assert_eq!(
        read_tree(&f.path().join("r1")),
        read_tree(&f.path().join("r2"))
    );
}

#[test]
fn missing_manifest_is_a_user_error() {
    let dir = TempDir::new().unwrap();
    let o = wdsurv(
        &[
            "train",
            "--manifest",
            "nope.csv",
            "--variant",
            "wide",
            "--checkpoint",
            "c.json",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.csv"));
}
