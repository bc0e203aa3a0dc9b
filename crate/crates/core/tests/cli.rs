use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL_SPEC: &str = r#"{"n_concepts": 3, "n_channels": 4, "n_timepoints": 80, "sample_rate_hz": 100.0,
    "windows": [{"start": 5, "length": 15}, {"start": 30, "length": 15}, {"start": 55, "length": 15}],
    "snr": 4.0, "trials_per_stimulus": 2, "n_stimuli": 20, "seed": 3}"#;

fn tempattr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tempattr"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = tempattr(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn small_setup(dir: &Path) {
    fs::write(dir.join("spec.json"), SMALL_SPEC).unwrap();
    ok(dir, &["gen", "--spec", "spec.json", "--out", "data"]);
    ok(
        dir,
        &[
            "train",
            "--epochs",
            "data/epochs.bin",
            "--concepts",
            "data/concepts.bin",
            "--out",
            "model.bin",
            "--encoder",
            "window-mean",
            "--window-len",
            "5",
        ],
    );
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path).unwrap();
    r.records()
        .map(|rec| rec.unwrap().iter().map(str::to_string).collect())
        .collect()
}

fn polylines(svg: &str) -> usize {
    let doc = roxmltree::Document::parse(svg).expect("well-formed SVG");
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    doc.descendants().filter(|n| n.has_tag_name("polyline")).count()
}

#[test]
fn default_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["gen", "--out", "data"]);
    let scores = ok(
        dir,
        &[
            "train",
            "--epochs",
            "data/epochs.bin",
            "--concepts",
            "data/concepts.bin",
            "--out",
            "model.bin",
            "--holdout",
            "0.2",
        ],
    );
    assert!(scores.lines().any(|l| l.starts_with("mean_pearson ")));
    ok(
        dir,
        &[
            "attribute",
            "--epochs",
            "data/epochs.bin",
            "--concepts",
            "data/concepts.bin",
            "--model",
            "model.bin",
            "--out",
            "run",
        ],
    );
    ok(dir, &["cluster", "--grid", "run/curves_concepts.bin", "--out", "run"]);
    ok(dir, &["report", "--out", "run"]);

    let run = dir.join("run");
    for entry in fs::read_dir(&run).unwrap() {
        let p = entry.unwrap().path();
        let name = p.file_name().unwrap().to_str().unwrap().to_string();
        if p.extension().is_some_and(|e| e == "csv") && (name.starts_with('m') || name.starts_with("curves_")) {
            let rows = csv_rows(&p);
            assert!(rows.iter().all(|r| r.len() == 202), "{name}");
        }
    }
    let curves = csv_rows(&run.join("curves_concepts.csv"));
    assert_eq!(curves.len() - 1, 8);
    assert_eq!(
        polylines(&fs::read_to_string(run.join("curves_concepts.svg")).unwrap()),
        8
    );
    assert_eq!(polylines(&fs::read_to_string(run.join("curves_mean.svg")).unwrap()), 1);
    polylines(&fs::read_to_string(run.join("dendrogram.svg")).unwrap());

    let clusters = csv_rows(&run.join("clusters.csv"));
    let ids: std::collections::BTreeSet<&str> = clusters[1..].iter().map(|r| r[1].as_str()).collect();
    assert_eq!(ids.len(), 5);
    let d = csv_rows(&run.join("distance.csv"));
    assert_eq!((d.len(), d[0].len()), (9, 9));
}

#[test]
fn empty_mask_gives_zero_m2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_setup(dir);
    ok(
        dir,
        &[
            "attribute",
            "--epochs",
            "data/epochs.bin",
            "--concepts",
            "data/concepts.bin",
            "--model",
            "model.bin",
            "--out",
            "run",
            "--mask-len",
            "0",
            "--mask-starts",
            "0..80",
        ],
    );
    let rows = csv_rows(&dir.join("run/m2.csv"));
    assert_eq!(rows[0].len(), 82);
    assert_eq!(rows.len(), 21);
    for r in &rows[1..] {
        assert!(r[1..].iter().all(|v| v.parse::<f64>().unwrap() == 0.0));
    }
}

#[test]
fn m3_curves_have_one_row_per_concept() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_setup(dir);
    ok(
        dir,
        &[
            "attribute",
            "--epochs",
            "data/epochs.bin",
            "--concepts",
            "data/concepts.bin",
            "--model",
            "model.bin",
            "--out",
            "run",
            "--mask-len",
            "10",
            "--mask-starts",
            "0..70:5",
            "--metric",
            "m3",
            "--top-k",
            "2",
        ],
    );
    let rows = csv_rows(&dir.join("run/curves_concepts.csv"));
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.len() == 16));
    assert_eq!(csv_rows(&dir.join("run/curves_mean.csv")).len(), 4);
    assert_eq!(csv_rows(&dir.join("run/topk.csv")).len(), 1 + 20 * 2);
    ok(dir, &["report", "--out", "figs", "--from", "run"]);
    assert_eq!(
        polylines(&fs::read_to_string(dir.join("figs/curves_concepts.svg")).unwrap()),
        3
    );
}

#[test]
fn failures_print_one_error_line_and_leave_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_setup(dir);
    let out = tempattr(
        dir,
        &[
            "attribute",
            "--epochs",
            "data/epochs.bin",
            "--concepts",
            "data/concepts.bin",
            "--model",
            "model.bin",
            "--out",
            "run",
            "--mask-len",
            "50",
        ],
    );
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("ERROR OUT_OF_RANGE: "), "{err}");
    assert!(!dir.join("run").exists());

    fs::write(dir.join("junk.bin"), b"XXXXjunk").unwrap();
    let out = tempattr(
        dir,
        &[
            "train",
            "--epochs",
            "junk.bin",
            "--concepts",
            "data/concepts.bin",
            "--out",
            "m2/model.bin",
        ],
    );
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("ERROR BAD_MAGIC: "));
    assert!(!dir.join("m2").exists());

    let out = tempattr(dir, &["cluster", "--grid", "nope.bin", "--out", "c", "--k", "0"]);
    assert!(String::from_utf8(out.stderr)
        .unwrap()
        .starts_with("ERROR K_OUT_OF_RANGE: "));

    let out = tempattr(
        dir,
        &[
            "train",
            "--lambda=-1",
            "--epochs",
            "data/epochs.bin",
            "--concepts",
            "data/concepts.bin",
            "--out",
            "x.bin",
        ],
    );
    assert!(String::from_utf8(out.stderr)
        .unwrap()
        .starts_with("ERROR INVALID_PARAMETER: "));

    let out = tempattr(dir, &["gen", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("ERROR USAGE: "));
}

#[test]
fn config_file_overrides_flags_and_is_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_setup(dir);
    fs::write(
        dir.join("cfg.json"),
        r#"{"mask-len": 10, "mask_starts": "0..70:10", "q": 0.5}"#,
    )
    .unwrap();
    ok(
        dir,
        &[
            "attribute",
            "--epochs",
            "data/epochs.bin",
            "--concepts",
            "data/concepts.bin",
            "--model",
            "model.bin",
            "--out",
            "run",
            "--config",
            "cfg.json",
            "--workers",
            "3",
        ],
    );
    assert_eq!(csv_rows(&dir.join("run/m1.csv"))[0].len(), 9);
    let record: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("run/attribute.run.json")).unwrap()).unwrap();
    assert_eq!(record["config"]["mask_len"], 10);
    assert_eq!(record["config"]["q"], 0.5);
    assert!(record["config"].get("workers").is_none());
}

#[test]
fn gen_is_deterministic_in_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("spec.json"), SMALL_SPEC).unwrap();
    ok(dir, &["gen", "--spec", "spec.json", "--out", "a"]);
    ok(dir, &["gen", "--spec", "spec.json", "--out", "b"]);
    ok(dir, &["gen", "--spec", "spec.json", "--out", "c", "--seed", "4"]);
    let read = |d: &str| fs::read(dir.join(d).join("epochs.bin")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
    let spec: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("c/plant_spec.json")).unwrap()).unwrap();
    assert_eq!(spec["seed"], 4);
}
