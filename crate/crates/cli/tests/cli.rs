use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use augsearch::transform::{Image, Policy};

const TINY: &str = r#"{
  "B": 2, "E": 1, "T": 2, "batch_size": 6,
  "seg_widths": [4, 4, 8], "embed_dim": 8,
  "controller_hidden": 8, "controller_embed": 4,
  "data": { "image_size": 16, "train_per_domain": 6, "test_per_domain": 2 }
}"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_augsearch"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.json");
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn search_writes_all_artifacts_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&["search", "--config", &cfg, "--out", s(out), "--seed", "3"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in [
        "config.json",
        "report.json",
        "report.csv",
        "policy.json",
        "seg_model.json",
        "domain_classifier.json",
        "controller.json",
        "timing.json",
    ] {
        assert!(a.join(f).is_file(), "missing {f}");
    }
    assert_eq!(fs::read(a.join("report.json")).unwrap(), fs::read(b.join("report.json")).unwrap());
    let report: serde_json::Value = serde_json::from_slice(&fs::read(a.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 3);
    assert_eq!(report["epochs"][0]["raw_rewards"].as_array().unwrap().len(), 2);
    assert!(report["heldout"]["rows"].is_array());
    Policy::load(a.join("policy.json")).unwrap();

    // The snapshot alone reproduces the run.
    let c = dir.path().join("c");
    let o = run(&["search", "--config", s(&a.join("config.json")), "--out", s(&c)]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(a.join("report.json")).unwrap(), fs::read(c.join("report.json")).unwrap());
}

#[test]
fn bad_config_is_a_user_error_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"R": 0}"#);
    let o = run(&["search", "--config", &cfg, "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("`R`"));

    let cfg = write_config(dir.path(), r#"{"batch_sise": 4}"#);
    let o = run(&["search", "--config", &cfg, "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("batch_sise"));

    let o = run(&["search", "--config", s(&dir.path().join("nope.json")), "--out", "x"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn unknown_command_is_a_usage_error() {
    assert_eq!(code(&run(&["frobnicate"])), 2);
    assert_eq!(code(&run(&[])), 2);
}

#[test]
fn thread_cap_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .env("AADG_THREADS", "0")
        .args(["export-golden", "--out", s(dir.path())])
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    let cfg = write_config(dir.path(), TINY);
    let o = bin()
        .env("AADG_THREADS", "1")
        .args(["search-radg", "--config", &cfg, "--out", s(&dir.path().join("r"))])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let t: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("r/timing.json")).unwrap()).unwrap();
    assert_eq!(t["threads"], 1);
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("r/report.json")).unwrap()).unwrap();
    assert_eq!(report["mode"], "radg");
}

fn png_dir(dir: &Path, n: usize) {
    fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        let px = (0..12 * 10 * 3).map(|j| ((j * 7 + i * 31) % 256) as u8).collect();
        Image::new(12, 10, px).unwrap().save_png(dir.join(format!("im{i}.png"))).unwrap();
    }
}

#[test]
fn identity_policy_application_is_lossless_and_traced() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    png_dir(&input, 4);
    let pol = dir.path().join("id.json");
    Policy::identity(10, 5, 2).unwrap().save(&pol).unwrap();
    let out = dir.path().join("out");
    let o = run(&["apply-policy", "--policy", s(&pol), "--input", s(&input), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for i in 0..4 {
        let name = format!("im{i}.png");
        assert_eq!(
            Image::load_png(input.join(&name)).unwrap(),
            Image::load_png(out.join(&name)).unwrap()
        );
    }
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 4);
}

#[test]
fn policy_application_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    png_dir(&input, 3);
    let pol = dir.path().join("p.json");
    let text = r#"{"version": 1, "R": 10, "S": 2, "L": 2, "cutout_fill": 0,
      "subpolicies": [[{"op": "Cutout", "level": 6}, {"op": "Solarize", "level": 3}],
                      [{"op": "Cutout", "level": 9}, {"op": "Color", "level": 1}]]}"#;
    fs::write(&pol, text).unwrap();
    Policy::load(&pol).expect("hand-written policy parses");
    let mut outs = Vec::new();
    for (k, seed) in ["5", "5", "6"].iter().enumerate() {
        let out = dir.path().join(format!("o{k}"));
        let o = run(&[
            "apply-policy", "--policy", s(&pol), "--input", s(&input), "--out", s(&out), "--seed", seed,
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        outs.push(out);
    }
    let read = |d: &Path| -> Vec<Vec<u8>> {
        (0..3)
            .map(|i| fs::read(d.join(format!("im{i}.png"))).unwrap())
            .chain([fs::read(d.join("trace.csv")).unwrap()])
            .collect()
    };
    assert_eq!(read(&outs[0]), read(&outs[1]));
    assert_ne!(read(&outs[0]), read(&outs[2]));
    let trace = fs::read_to_string(outs[0].join("trace.csv")).unwrap();
    for row in trace.lines().skip(1) {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols.len(), 4);
        assert!(!cols[3].is_empty(), "every sub-policy places a Cutout");
    }
}

#[test]
fn policy_schema_violations_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    png_dir(&input, 1);
    let pol = dir.path().join("p.json");
    let mut doc: serde_json::Value = serde_json::from_str(&Policy::identity(10, 5, 2).unwrap().to_json()).unwrap();
    doc["version"] = 99.into();
    fs::write(&pol, doc.to_string()).unwrap();
    let o = run(&["apply-policy", "--policy", s(&pol), "--input", s(&input), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 2);
    let o = run(&[
        "apply-policy", "--policy", s(&dir.path().join("missing.json")), "--input", s(&input), "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn golden_export_is_complete_and_stable() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        assert_eq!(code(&run(&["export-golden", "--out", s(d)])), 0);
    }
    let m: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    let entries = m["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 150);
    for e in entries {
        let out = e["output"].as_str().unwrap();
        assert_eq!(fs::read(a.join(out)).unwrap(), fs::read(b.join(out)).unwrap());
    }
    assert_eq!(fs::read(a.join("manifest.json")).unwrap(), fs::read(b.join("manifest.json")).unwrap());
}

#[test]
fn generated_dataset_feeds_search_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let data = dir.path().join("data");
    let o = run(&["gen-data", "--config", &cfg, "--out", s(&data), "--seed", "4"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(data.join("manifest.json").is_file());

    let from_disk = dir.path().join("disk");
    let generated = dir.path().join("gen");
    for (out, input) in [(&from_disk, Some(&data)), (&generated, None)] {
        let mut args = vec!["search", "--config", &cfg, "--out", s(out), "--seed", "4"];
        if let Some(i) = input {
            args.extend(["--input", s(i)]);
        }
        assert_eq!(code(&run(&args)), 0);
    }
    assert_eq!(
        fs::read(from_disk.join("report.json")).unwrap(),
        fs::read(generated.join("report.json")).unwrap()
    );

    let ev = dir.path().join("eval");
    let o = run(&["eval", "--config", &cfg, "--out", s(&ev), "--input", s(&data)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(ev.join("eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);
}
