use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use haad::motion::{load_manifest, DatasetManifest};

const SMALL: &str = r#"{"train": {"epochs": 2, "holdout_fraction": 0.0,
  "encoder": {"layers": 2, "hidden": 8, "out_dim": 4, "fuse_dim": 8, "dct_coeffs": 5},
  "flow": {"layers": 3}}}"#;

fn haad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_haad"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = haad(args);
    assert!(
        out.status.success(),
        "haad {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = haad(args);
    assert!(!out.status.success(), "haad {args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error:"), "stderr must start with `error:`: {err}");
    err
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new(per_class: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let f = Self { dir };
        ok(&["synth", "--seed", "7", "--per-class", per_class, "--out", f.s("train")]);
        ok(&["synth", "--seed", "8", "--per-class", per_class, "--out", f.s("test")]);
        fs::write(f.path("small.json"), SMALL).unwrap();
        f
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn s(&self, rel: &str) -> &'static str {
        Box::leak(self.path(rel).to_string_lossy().into_owned().into_boxed_str())
    }

    fn train(&self, normal: &str, out: &str) -> String {
        ok(&[
            "train",
            "--config",
            self.s("small.json"),
            "--data",
            self.s("train/manifest.json"),
            "--normal",
            normal,
            "--out",
            self.s(out),
        ])
    }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn synth_writes_reproducible_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let printed = ok(&["synth", "--seed", "7", "--per-class", "30", "--out", a.to_str().unwrap()]);
    assert_eq!(printed.trim(), a.join("manifest.json").to_str().unwrap());
    ok(&["synth", "--seed", "7", "--per-class", "30", "--out", b.to_str().unwrap()]);
    let m: DatasetManifest = load_manifest(&a.join("manifest.json")).unwrap();
    assert_eq!(m.clips.len(), 90);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
}

#[test]
fn synth_rejects_zero_per_class() {
    let out = haad(&["synth", "--per-class", "0", "--out", "/tmp/unused"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn train_prints_epochs_and_eval_prints_auc() {
    let f = Fixture::new("4");
    let log = f.train("wave", "wave.model");
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("epoch=1 nll="), "{log}");
    assert!(lines[1].starts_with("epoch=2 nll="), "{log}");
    assert!(f.path("wave.model").exists());

    let out = ok(&[
        "eval",
        "--model",
        f.s("wave.model"),
        "--data",
        f.s("test/manifest.json"),
        "--scores",
        f.s("scores.csv"),
        "--roc",
        f.s("roc.csv"),
    ]);
    let auc_line = out.trim();
    assert!(auc_line.starts_with("auc="), "{out}");
    let value = &auc_line[4..];
    assert_eq!(value.split('.').nth(1).map(str::len), Some(6));
    let auc: f64 = value.parse().unwrap();
    assert!((0.0..=1.0).contains(&auc));

    let scores = fs::read_to_string(f.path("scores.csv")).unwrap();
    let mut rows = scores.lines();
    assert_eq!(rows.next(), Some("clip_id,label,is_normal,score"));
    let rows: Vec<&str> = rows.collect();
    assert_eq!(rows.len(), 12);
    assert!(rows[0].starts_with("wave_000,wave,1,"));
    assert!(rows[4].starts_with("kick_000,kick,0,"));
    let roc = fs::read_to_string(f.path("roc.csv")).unwrap();
    assert!(roc.starts_with("threshold,fpr,tpr\ninf,0,0\n"));
    assert!(roc.trim_end().ends_with(",1,1"));

    let nll = ok(&["eval", "--model", f.s("wave.model"), "--data", f.s("test/manifest.json"), "--scheme", "nll"]);
    assert!(nll.starts_with("auc="));
}

#[test]
fn perfect_separation_fixture() {
    // No holdout and K = 1: every training clip is its own nearest neighbour.
    let f = Fixture::new("4");
    f.train("kick", "kick.model");
    let out = ok(&[
        "eval",
        "--model",
        f.s("kick.model"),
        "--data",
        f.s("train/manifest.json"),
        "--k",
        "1",
    ]);
    assert_eq!(out.trim(), "auc=1.000000");
}

#[test]
fn same_seed_gives_identical_outputs() {
    let f = Fixture::new("3");
    f.train("jump", "a.model");
    f.train("jump", "b.model");
    assert_eq!(fs::read(f.path("a.model")).unwrap(), fs::read(f.path("b.model")).unwrap());
    for m in ["a", "b"] {
        ok(&[
            "eval",
            "--model",
            f.s(&format!("{m}.model")),
            "--data",
            f.s("test/manifest.json"),
            "--scores",
            f.s(&format!("{m}.csv")),
        ]);
    }
    assert_eq!(fs::read(f.path("a.csv")).unwrap(), fs::read(f.path("b.csv")).unwrap());
}

#[test]
fn errors_are_single_line_with_prefix() {
    let f = Fixture::new("2");
    let err = fails(&[
        "train",
        "--data",
        f.s("train/manifest.json"),
        "--normal",
        "nosuch",
        "--out",
        f.s("x.model"),
    ]);
    assert!(err.contains("label not found"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);

    let err = fails(&["eval", "--model", f.s("missing.model"), "--data", f.s("test/manifest.json")]);
    assert!(err.contains("missing.model"), "{err}");

    fs::write(f.path("bad.json"), r#"{"train": {"epochz": 3}}"#).unwrap();
    let err = fails(&[
        "train",
        "--config",
        f.s("bad.json"),
        "--data",
        f.s("train/manifest.json"),
        "--normal",
        "wave",
        "--out",
        f.s("x.model"),
    ]);
    assert!(err.contains("epochz"), "{err}");
}

#[test]
fn flags_override_config() {
    let f = Fixture::new("2");
    let log = ok(&[
        "train",
        "--config",
        f.s("small.json"),
        "--data",
        f.s("train/manifest.json"),
        "--normal",
        "wave",
        "--epochs",
        "3",
        "--m",
        "4",
        "--out",
        f.s("w.model"),
    ]);
    assert_eq!(log.lines().count(), 3);
    let model = haad::trainer::load_model(&f.path("w.model")).unwrap();
    assert_eq!(model.config.encoder.dct_coeffs, 4);
    assert_eq!(model.config.encoder.hidden, 8);
}

fn sweep(f: &Fixture, extra: &[&str]) -> Vec<String> {
    let mut args = vec![
        "sweep",
        "--config",
        f.s("small.json"),
        "--data",
        f.s("train/manifest.json"),
        "--test",
        f.s("test/manifest.json"),
        "--normal",
        "wave",
        "--epochs",
        "1",
    ];
    args.extend_from_slice(extra);
    let out = ok(&args);
    let mut lines = out.lines().map(str::to_string);
    assert_eq!(lines.next().as_deref(), Some("setting,auc"));
    lines.collect()
}

#[test]
fn sweeps_emit_one_row_per_setting() {
    let f = Fixture::new("3");
    let scoring = sweep(&f, &["--kind", "scoring"]);
    assert_eq!(scoring.len(), 2);
    assert!(scoring[0].starts_with("knn,") && scoring[1].starts_with("nll,"));

    let dct = sweep(&f, &["--kind", "dct_m", "--values", "2,3,5", "--out", f.s("dct.csv")]);
    let settings: Vec<&str> = dct.iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(settings, ["2", "3", "5"]);
    assert!(fs::read_to_string(f.path("dct.csv")).unwrap().starts_with("setting,auc\n2,"));

    let parts = sweep(&f, &["--kind", "parts"]);
    let settings: Vec<&str> = parts.iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(settings, ["full", "full+up", "full+low", "full+up+low"]);
}

#[test]
fn convert_csv_dump_into_clip() {
    let f = Fixture::new("2");
    let mut csv = String::from("# two joints, xyz\nx0,y0,z0,x1,y1,z1\n");
    for t in 0..5 {
        let v = t as f32 * 0.5;
        csv.push_str(&format!("{v},0,0,{v},1,0\n"));
    }
    fs::write(f.path("dump.csv"), csv).unwrap();
    ok(&[
        "convert",
        "--input",
        f.s("dump.csv"),
        "--out",
        f.s("dump.haad"),
        "--id",
        "d0",
        "--label",
        "wave",
        "--joints",
        "2",
    ]);
    let clip = haad::motion::decode_clip("d0", "wave", &fs::read(f.path("dump.haad")).unwrap()).unwrap();
    assert_eq!((clip.frames(), clip.joints(), clip.channels()), (5, 2, 3));
    assert_eq!(clip.data()[[4, 1, 0]], 2.0);
    assert_eq!(clip.data()[[3, 1, 1]], 1.0);

    fs::write(f.path("ragged.csv"), "1,2,3,4,5,6\n1,2,3\n").unwrap();
    let err = fails(&[
        "convert", "--input", f.s("ragged.csv"), "--out", f.s("r.haad"), "--id", "r", "--label", "x", "--joints", "2",
    ]);
    assert!(err.contains("line 2"), "{err}");

    // Register a 16-joint clip in the existing training manifest.
    let mut wide = String::new();
    for t in 0..12 {
        let row: Vec<String> = (0..48).map(|i| format!("{}", (i + t) as f32 * 0.01)).collect();
        wide.push_str(&row.join(","));
        wide.push('\n');
    }
    fs::write(f.path("wide.csv"), wide).unwrap();
    let clip_path = f.path("train/extra.haad");
    ok(&[
        "convert",
        "--input",
        f.s("wide.csv"),
        "--out",
        clip_path.to_str().unwrap(),
        "--id",
        "extra",
        "--label",
        "other",
        "--joints",
        "16",
        "--manifest",
        f.s("train/manifest.json"),
    ]);
    let m = load_manifest(&f.path("train/manifest.json")).unwrap();
    let last = m.clips.last().unwrap();
    assert_eq!((last.id.as_str(), last.frames), ("extra", 12));
    assert_eq!(last.path, PathBuf::from("extra.haad"));
    assert!(m.read_clip(last).is_ok());
}
