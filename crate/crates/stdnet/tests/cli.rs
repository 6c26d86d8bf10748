//! End-to-end tests of the command-line surface: exit codes, file
//! round-trips, and the traverse -> select-thresholds -> search pipeline.

use std::path::Path;
use std::process::Command;

use stdnet::io::WeightContainer;
use stdnet::tensor::DenseTensor;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stdnet"))
}

fn run(args: &[&str]) -> (i32, String) {
    let out = bin().args(args).output().expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn tmpdir(tag: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("stdnet-cli-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn build_model(dir: &Path, variant: &str, seed: u64) -> std::path::PathBuf {
    let path = dir.join(format!("{variant}.json"));
    let (code, err) = run(&[
        "build-srnetc64",
        "--seed",
        &seed.to_string(),
        "--variant",
        variant,
        "--out",
        path.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "build failed: {err}");
    path
}

#[test]
fn usage_error_exits_1() {
    let (code, err) = run(&["no-such-command"]);
    assert_eq!(code, 1);
    assert!(!err.is_empty());
}

#[test]
fn help_exits_0() {
    let (code, _) = run(&["--help"]);
    assert_eq!(code, 0);
}

#[test]
fn tau_above_start_exits_2_naming_constraint() {
    let dir = tmpdir("tau");
    let model = build_model(&dir, "original", 1);
    let out = dir.join("curves.csv");
    let (code, err) = run(&[
        "traverse",
        "--model",
        model.to_str().unwrap(),
        "--batch",
        "synthetic:4x16x16:1",
        "--tau",
        "0.6",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 2, "stderr: {err}");
    assert!(err.contains("tau"), "constraint not named: {err}");
}

#[test]
fn missing_model_file_exits_2() {
    let dir = tmpdir("missing");
    let (code, _) = run(&[
        "cost",
        "--model",
        dir.join("nope.json").to_str().unwrap(),
        "--out",
        dir.join("r.csv").to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
}

#[test]
fn verify_fresh_model_exits_0() {
    let dir = tmpdir("verify");
    let model = build_model(&dir, "original", 3);
    let (code, err) = run(&[
        "verify",
        "--model",
        model.to_str().unwrap(),
        "--batch",
        "synthetic:4x16x16:3",
    ]);
    assert_eq!(code, 0, "stderr: {err}");
    assert!(err.contains("all"), "summary missing: {err}");
}

#[test]
fn cost_on_reference_cylinder_matches_table() {
    let dir = tmpdir("cost");
    let base = build_model(&dir, "original", 7);
    let cyl = build_model(&dir, "cylinder", 7);
    let out = dir.join("report.csv");
    let (code, err) = run(&[
        "cost",
        "--model",
        cyl.to_str().unwrap(),
        "--baseline",
        base.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "stderr: {err}");
    let csv = std::fs::read_to_string(&out).unwrap();
    let total = csv
        .lines()
        .find(|l| l.starts_with("total,"))
        .expect("totals row");
    let fields: Vec<&str> = total.split(',').collect();
    let params: f64 = fields[2].parse().unwrap();
    let flops: f64 = fields[4].parse().unwrap();
    assert!((params - 4.97e4).abs() / 4.97e4 < 0.02, "params {params}");
    assert!((flops - 12.00e8).abs() / 12.00e8 < 0.02, "flops {flops}");
}

#[test]
fn decompose_single_layer_and_recost() {
    let dir = tmpdir("decompose");
    let model = build_model(&dir, "original", 5);
    let out = dir.join("replaced.json");
    let (code, err) = run(&[
        "decompose",
        "--model",
        model.to_str().unwrap(),
        "--layer",
        "L3-1",
        "--rank-in",
        "7",
        "--rank-out",
        "7",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "stderr: {err}");

    let report = dir.join("after.csv");
    let (code, _) = run(&[
        "cost",
        "--model",
        out.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let csv = std::fs::read_to_string(&report).unwrap();
    let row = csv.lines().find(|l| l.starts_with("L3-1,")).unwrap();
    let fields: Vec<&str> = row.split(',').collect();
    assert_eq!(fields[1], "2304");
    assert_eq!(fields[2], "665");

    // Replacing a non-decomposable layer is refused.
    let (code, err) = run(&[
        "decompose",
        "--model",
        model.to_str().unwrap(),
        "--layer",
        "L1",
        "--rank-in",
        "1",
        "--rank-out",
        "64",
        "--out",
        dir.join("x.json").to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("non-decomposable"), "stderr: {err}");
}

#[test]
fn builds_are_deterministic_across_runs() {
    let dir = tmpdir("determinism");
    let a = dir.join("a");
    let b = dir.join("b");
    std::fs::create_dir_all(&a).unwrap();
    std::fs::create_dir_all(&b).unwrap();
    for sub in [&a, &b] {
        let (code, _) = run(&[
            "build-srnetc64",
            "--seed",
            "9",
            "--variant",
            "ladder",
            "--out",
            sub.join("m.json").to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
    }
    assert_eq!(
        std::fs::read(a.join("m.json")).unwrap(),
        std::fs::read(b.join("m.json")).unwrap()
    );
    assert_eq!(
        std::fs::read(a.join("m.stdt")).unwrap(),
        std::fs::read(b.join("m.stdt")).unwrap()
    );
}

#[test]
fn batch_container_input_accepted() {
    let dir = tmpdir("batchfile");
    let model = build_model(&dir, "original", 11);

    let mut container = WeightContainer::default();
    let data: Vec<f64> = (0..4 * 16 * 16).map(|i| ((i as f64) * 0.013).sin()).collect();
    container.push(
        "batch",
        DenseTensor::new(vec![4, 1, 16, 16], data).unwrap(),
    );
    let batch_path = dir.join("batch.stdt");
    container.save(&batch_path).unwrap();

    let (code, err) = run(&[
        "verify",
        "--model",
        model.to_str().unwrap(),
        "--batch",
        batch_path.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "stderr: {err}");
}

#[test]
fn corrupt_weight_container_exits_2() {
    let dir = tmpdir("corrupt");
    let model = build_model(&dir, "original", 13);
    let stdt = model.with_extension("stdt");
    let mut bytes = std::fs::read(&stdt).unwrap();
    bytes.truncate(bytes.len() - 10);
    std::fs::write(&stdt, &bytes).unwrap();
    let (code, err) = run(&[
        "cost",
        "--model",
        model.to_str().unwrap(),
        "--out",
        dir.join("r.csv").to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("offset"), "stderr: {err}");
}

#[test]
fn pipeline_traverse_select_search() {
    let dir = tmpdir("pipeline");
    let model = build_model(&dir, "original", 17);
    let curves = dir.join("curves.csv");
    let batch = "synthetic:4x16x16:17";

    let (code, err) = bin()
        .args([
            "traverse",
            "--model",
            model.to_str().unwrap(),
            "--batch",
            batch,
            "--out",
            curves.to_str().unwrap(),
        ])
        .env("STD_NET_THREADS", "2")
        .output()
        .map(|o| {
            (
                o.status.code().unwrap_or(-1),
                String::from_utf8_lossy(&o.stderr).into_owned(),
            )
        })
        .unwrap();
    assert_eq!(code, 0, "stderr: {err}");

    let text = std::fs::read_to_string(&curves).unwrap();
    assert!(text.starts_with("layer,gamma,distortion\n"));
    // 13 bottom-group layers at 7 samples, 8 middle-group layers at 3.
    assert_eq!(text.lines().count(), 1 + 13 * 7 + 8 * 3);

    let thresholds = dir.join("thresholds.json");
    let (code, err) = run(&[
        "select-thresholds",
        "--curves",
        curves.to_str().unwrap(),
        "--policy",
        "knee",
        "--out",
        thresholds.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "stderr: {err}");
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&thresholds).unwrap()).unwrap();
    assert_eq!(doc["thresholds"].as_array().unwrap().len(), 21);

    let cyl = dir.join("cylinder.json");
    let lad = dir.join("ladder.json");
    let report = dir.join("report.txt");
    let (code, err) = run(&[
        "search",
        "--model",
        model.to_str().unwrap(),
        "--batch",
        batch,
        "--thresholds",
        thresholds.to_str().unwrap(),
        "--out-cylinder",
        cyl.to_str().unwrap(),
        "--out-ladder",
        lad.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "stderr: {err}");

    // Both variants load back and still pass the invariant suite.
    for m in [&cyl, &lad] {
        let (code, err) = run(&[
            "verify",
            "--model",
            m.to_str().unwrap(),
            "--batch",
            batch,
        ]);
        assert_eq!(code, 0, "variant {m:?}: {err}");
    }
    let report_text = std::fs::read_to_string(&report).unwrap();
    assert!(report_text.contains("channel decisions"));
    assert!(report_text.contains("cylinder variant"));
    assert!(report_text.contains("overall"));
}

#[test]
fn manual_threshold_selection_requires_complete_map() {
    let dir = tmpdir("manual");
    let curves = dir.join("curves.csv");
    std::fs::write(
        &curves,
        "layer,gamma,distortion\nL2,0.5000,1.00000000e-2\nL3-1,0.5000,2.00000000e-2\n",
    )
    .unwrap();
    let entries = dir.join("partial.json");
    std::fs::write(
        &entries,
        "{\"thresholds\":[{\"layer\":\"L2\",\"value\":0.12}]}\n",
    )
    .unwrap();
    let out = dir.join("out.json");
    let (code, err) = run(&[
        "select-thresholds",
        "--curves",
        curves.to_str().unwrap(),
        "--policy",
        "manual",
        "--thresholds",
        entries.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("L3-1"), "stderr: {err}");

    // Complete map passes through verbatim.
    std::fs::write(
        &entries,
        "{\"thresholds\":[{\"layer\":\"L2\",\"value\":0.12},{\"layer\":\"L3-1\",\"value\":0.2}]}\n",
    )
    .unwrap();
    let (code, err) = run(&[
        "select-thresholds",
        "--curves",
        curves.to_str().unwrap(),
        "--policy",
        "manual",
        "--thresholds",
        entries.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "stderr: {err}");
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(doc["thresholds"][0]["value"].as_f64().unwrap(), 0.12);
}
