use std::fs;
use std::path::Path;

use augsearch::golden::{export_golden, verify_golden, GOLDEN_IMAGES};
use augsearch::transform::OpKind;

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["inputs", "outputs"] {
        for e in fs::read_dir(dir.join(sub)).unwrap() {
            let p = e.unwrap().path();
            out.push((format!("{sub}/{}", p.file_name().unwrap().to_string_lossy()), fs::read(&p).unwrap()));
        }
    }
    out.push(("manifest.json".into(), fs::read(dir.join("manifest.json")).unwrap()));
    out.sort();
    out
}

#[test]
fn corpus_has_150_pairs_with_full_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let m = export_golden(dir.path()).unwrap();
    assert_eq!(m.entries.len(), 150);
    for kind in OpKind::ALL {
        assert_eq!(m.entries.iter().filter(|e| e.op == kind).count(), 3 * GOLDEN_IMAGES);
    }
    let text = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    for e in v["entries"].as_array().unwrap() {
        assert!(e["op"].is_string() && e["level"].is_u64() && e["seed"].is_u64());
    }
    assert!(verify_golden(dir.path()).unwrap().is_empty());
}

#[test]
fn regeneration_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    export_golden(a.path()).unwrap();
    export_golden(b.path()).unwrap();
    assert_eq!(files(a.path()), files(b.path()));
}

#[test]
fn tampered_output_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let m = export_golden(dir.path()).unwrap();
    let target = &m.entries[17];
    let img = augsearch::transform::Image::load_png(dir.path().join(&target.output)).unwrap();
    let mut px = img.pixels().to_vec();
    px[5] ^= 1;
    augsearch::transform::Image::new(img.width(), img.height(), px)
        .unwrap()
        .save_png(dir.path().join(&target.output))
        .unwrap();
    assert_eq!(verify_golden(dir.path()).unwrap(), vec![target.output.clone()]);
}

#[test]
fn missing_corpus_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(verify_golden(dir.path()).is_err());
}
