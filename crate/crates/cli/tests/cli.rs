use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use uio_core::data_io::{synth_generate, write_jsonl};

fn uio(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uio"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "info")
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "stderr:\n{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn write_manifest(dir: &Path, datasets: &str) {
    let text = format!(r#"{{"format": "uio-manifest", "version": 1, "datasets": [{datasets}]}}"#);
    std::fs::write(dir.join("m.json"), text).unwrap();
}

const SPARSE: &str = r#"
    {"id": "loc", "task": "object_localization", "generator": {"name": "colored_square_localization", "count": 12, "seed": 1}},
    {"id": "cap", "task": "image_captioning", "generator": {"name": "color_caption", "count": 12, "seed": 2}}"#;

#[test]
fn unknown_task_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = uio(&["tokenize", "--task", "teleportation", "--input", "x.jsonl"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown task"));
}

#[test]
fn box_record_dumps_four_location_tokens_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let recs = synth_generate("colored_square_localization", 1, 5).unwrap();
    write_jsonl(dir.path().join("r.jsonl"), &recs).unwrap();
    let dump = ok(&uio(&["tokenize", "--task", "object_localization", "--input", "r.jsonl", "--image-size", "32"], dir.path()));
    let target = dump.split("# target\n").nth(1).unwrap();
    let label = recs[0].label.clone().unwrap();
    let n_boxes = recs[0].boxes.iter().filter(|b| b.label == label).count();
    let loc: Vec<&str> = target.lines().filter(|l| l.contains("\tlocation\t")).collect();
    assert_eq!(loc.len(), 4 * n_boxes);
    assert!(loc.iter().all(|l| l.contains("bin ")));
    assert!(target.lines().last().unwrap().contains("<eos>"));

    std::fs::write(dir.path().join("dump.txt"), &dump).unwrap();
    let json = ok(&uio(&["detokenize", "--task", "object_localization", "--input", "dump.txt"], dir.path()));
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    let boxes = v["boxes"].as_array().unwrap();
    assert_eq!(boxes.len(), n_boxes);
    for b in boxes {
        assert_eq!(b["label"], label.as_str());
        let truth = recs[0].boxes.iter().find(|t| (t.bbox.y_min - b["bbox"]["y_min"].as_f64().unwrap()).abs() <= 1e-3).unwrap();
        for k in ["y_min", "x_min", "y_max", "x_max"] {
            let want = serde_json::to_value(truth.bbox).unwrap()[k].as_f64().unwrap();
            assert!((b["bbox"][k].as_f64().unwrap() - want).abs() <= 1e-3, "{k}");
        }
    }
}

#[test]
fn empty_input_gives_empty_dump() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("e.jsonl"), "").unwrap();
    assert_eq!(ok(&uio(&["tokenize", "--task", "image_captioning", "--input", "e.jsonl"], dir.path())), "");
}

#[test]
fn detokenize_reports_parse_position() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("t.txt"), "300 301\n").unwrap();
    let o = uio(&["detokenize", "--task", "object_localization", "--input", "t.txt"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("at token 0"), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn smoke_run_resume_and_audit() {
    let dir = tempfile::tempdir().unwrap();
    write_manifest(dir.path(), SPARSE);
    let common = ["--manifest", "m.json", "--image-size", "32", "--preset", "micro", "--audit", "5", "--seed", "3"];
    let t = Instant::now();
    ok(&uio(&[&["multitask", "--out", "full", "--steps", "10"][..], &common].concat(), dir.path()));
    assert!(t.elapsed() < Duration::from_secs(60));

    ok(&uio(&[&["multitask", "--out", "split", "--steps", "5"][..], &common].concat(), dir.path()));
    let o = uio(&[&["multitask", "--out", "split", "--steps", "10"][..], &common].concat(), dir.path());
    ok(&o);
    assert!(String::from_utf8_lossy(&o.stderr).contains("resuming"));
    for f in ["state.ckpt", "model.ckpt", "tokenizer.json"] {
        let a = std::fs::read(dir.path().join("full").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("split").join(f)).unwrap();
        assert!(a == b, "{f} differs after resume");
    }
    let metrics = std::fs::read_to_string(dir.path().join("full/metrics.jsonl")).unwrap();
    let audits = metrics.lines().filter(|l| l.contains("\"audit\"")).count();
    assert_eq!(audits, 2);
    let logged: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("full/run_config.json")).unwrap()).unwrap();
    assert_eq!(logged["command"], "multitask");
    assert_eq!(logged["config"]["steps"], 10);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    write_manifest(dir.path(), SPARSE);
    std::fs::write(dir.path().join("c.json"), r#"{"manifest": "m.json", "steps": 50, "batch_size": 2, "image_size": 32}"#).unwrap();
    ok(&uio(&["multitask", "--config", "c.json", "--steps", "2", "--out", "o"], dir.path()));
    let logged: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("o/run_config.json")).unwrap()).unwrap();
    assert_eq!(logged["config"]["steps"], 2);
    assert_eq!(logged["config"]["batch_size"], 2);
    let o = uio(&["multitask", "--config", "c.json", "--preset", "gigantic", "--out", "o2"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    std::fs::write(dir.path().join("bad.json"), r#"{"stepz": 3}"#).unwrap();
    assert_eq!(uio(&["audit", "--config", "bad.json"], dir.path()).status.code(), Some(2));
}

#[test]
fn schema_errors_stop_before_training() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("m.json"), r#"{"format": "uio-manifest", "version": 1, "datasets": [{"id": "a", "task": "image_captioning", "records": [{"text": "q"}]}]}"#)
        .unwrap();
    let o = uio(&["multitask", "--manifest", "m.json", "--steps", "2", "--out", "o"], dir.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("/datasets/0/records/0"));
    assert!(!dir.path().join("o/state.ckpt").exists());
}

#[test]
fn audit_prints_mixture_table() {
    let dir = tempfile::tempdir().unwrap();
    write_manifest(dir.path(), SPARSE);
    let table = ok(&uio(&["audit", "--manifest", "m.json", "--steps", "50"], dir.path()));
    assert!(table.contains("sparse_labelling") && table.contains("image_captioning"));
}

#[test]
fn depth_inference_writes_graymap_and_json_line() {
    let dir = tempfile::tempdir().unwrap();
    write_manifest(
        dir.path(),
        r#"{"id": "depth", "task": "depth_estimation", "generator": {"name": "gradient_depth", "count": 12, "seed": 4}}"#,
    );
    ok(&uio(&["train-vq", "--manifest", "m.json", "--out", "vq", "--steps", "5", "--image-size", "32"], dir.path()));
    let no_vq = uio(&["multitask", "--manifest", "m.json", "--out", "bad", "--steps", "2", "--image-size", "32"], dir.path());
    assert_eq!(no_vq.status.code(), Some(2));
    ok(&uio(&["multitask", "--manifest", "m.json", "--vq", "vq/vq.ckpt", "--out", "run", "--steps", "2", "--image-size", "32"], dir.path()));

    let recs = synth_generate("gradient_depth", 1, 9).unwrap();
    write_jsonl(dir.path().join("one.jsonl"), &recs).unwrap();
    ok(&uio(&["infer", "--checkpoint", "run/model.ckpt", "--task", "depth_estimation", "--input", "one.jsonl", "--out", "inf"], dir.path()));
    let lines = std::fs::read_to_string(dir.path().join("inf/results.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 1);
    let v: serde_json::Value = serde_json::from_str(lines.trim()).unwrap();
    assert_eq!(v["ok"], true);
    let raster = dir.path().join("inf").join(v["output"]["raster"].as_str().unwrap());
    assert!(std::fs::read(&raster).unwrap().starts_with(b"P5"));

    let o = uio(&["infer", "--checkpoint", "run/model.ckpt", "--task", "object_detection", "--input", "one.jsonl", "--out", "inf2"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(std::fs::read_to_string(dir.path().join("inf2/results.jsonl")).unwrap().contains("\"ok\":false"));
}

#[test]
fn keypoint_inference_logs_stages() {
    let dir = tempfile::tempdir().unwrap();
    write_manifest(
        dir.path(),
        r#"{"id": "kp", "task": "keypoint_estimation", "generator": {"name": "stick_keypoints", "count": 6, "seed": 4}},
           {"id": "people", "task": "object_localization", "generator": {"name": "stick_localization", "count": 6, "seed": 5}}"#,
    );
    ok(&uio(&["multitask", "--manifest", "m.json", "--out", "run", "--steps", "2", "--image-size", "32"], dir.path()));
    let o = uio(&["infer", "--checkpoint", "run/model.ckpt", "--manifest", "m.json", "--task", "keypoint_estimation", "--out", "inf"], dir.path());
    ok(&o);
    let log = String::from_utf8_lossy(&o.stderr);
    assert!(log.contains("person region(s)"), "{log}");
}
