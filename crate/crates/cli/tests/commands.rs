use std::path::Path;
use std::process::{Command, Output};

fn lfsa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lfsa")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const CONFLICT_SCENE: &str = r#"{
  "gts": [
    {"cx": 20, "cy": 20, "w": 12, "h": 14, "class": 0},
    {"cx": 21, "cy": 19, "w": 16, "h": 12, "class": 1},
    {"cx": 19, "cy": 22, "w": 10, "h": 10, "class": 1}
  ],
  "anchors": [[12, 12]],
  "grid": {"rows": 4, "cols": 4, "stride": 8},
  "predictions": [
    {"level": 0, "anchor": 0, "row": 2, "col": 2, "box": {"cx": 20, "cy": 20, "w": 12, "h": 13}, "class_probs": [0.9, 0.2], "objectness": 0.7},
    {"level": 0, "anchor": 0, "row": 1, "col": 2, "box": {"cx": 21, "cy": 18, "w": 15, "h": 12}, "class_probs": [0.1, 0.8], "objectness": 0.6},
    {"level": 0, "anchor": 0, "row": 2, "col": 1, "box": {"cx": 18, "cy": 21, "w": 11, "h": 11}, "class_probs": [0.3, 0.6], "objectness": 0.5},
    {"level": 0, "anchor": 0, "row": 1, "col": 1, "box": {"cx": 16, "cy": 16, "w": 9, "h": 9}, "class_probs": [0.5, 0.5], "objectness": 0.5}
  ],
  "lambda": 3.0
}"#;

#[test]
fn gradcheck_exit_codes() {
    let ok = lfsa(&["gradcheck", "--scope", "primitive"]);
    assert_eq!(code(&ok), 0, "{}", stdout(&ok));
    assert!(stdout(&ok).contains("PASS"));
    assert_eq!(code(&lfsa(&["gradcheck", "--scope", "foo"])), 2);
    assert_eq!(code(&lfsa(&["gradcheck", "--scope", "lfsa", "--inject-fault", "0.01"])), 1);
    assert_eq!(code(&lfsa(&["gradcheck", "--scope", "end2end"])), 0);
}

#[test]
fn cost_report_is_deterministic_and_bounded() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for p in [&a, &b] {
        assert_eq!(code(&lfsa(&["cost-report", "--output", p.to_str().unwrap()])), 0);
    }
    let (ta, tb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(ta, tb);
    let text = String::from_utf8(ta).unwrap();
    assert!(text.contains("\"convention\": \"flops=2*macs\""));
    assert!(text.contains("\"reference\": \"5.8/34.7\""));
    let ratio: f64 = text
        .lines()
        .find(|l| l.contains("edh_dh_flops_ratio"))
        .and_then(|l| l.split(':').nth(1))
        .map(|v| v.trim().trim_end_matches(',').parse().unwrap())
        .unwrap();
    assert!(ratio <= 0.35);
}

#[test]
fn cost_report_config_handling() {
    let dir = tempfile::tempdir().unwrap();
    let empty = write(dir.path(), "empty.toml", "levels = []\n");
    let o = lfsa(&["--config", &empty, "cost-report"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("\"edh_dh_flops_ratio\": null"));

    let bad = write(dir.path(), "bad.toml", "lambda = -1.0\nn_classes = 0\n");
    let o = lfsa(&["--config", &bad, "cost-report"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("lambda") && stderr(&o).contains("edh"), "{}", stderr(&o));

    let unknown = write(dir.path(), "unknown.toml", "lamda = 1.0\n");
    assert_eq!(code(&lfsa(&["--config", &unknown, "cost-report"])), 2);
}

#[test]
fn assign_documents() {
    let dir = tempfile::tempdir().unwrap();
    let scene = write(dir.path(), "scene.json", CONFLICT_SCENE);
    let first = lfsa(&["assign", &scene]);
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    assert_eq!(first.stdout, lfsa(&["assign", &scene]).stdout);
    let out = stdout(&first);
    assert!(out.contains("\"top2\""));
    let doc = lfsa_core::docs::assign_document(&lfsa_core::docs::parse_scene(CONFLICT_SCENE).unwrap(), None).unwrap();
    assert_eq!(out, lfsa_core::docs::to_json(&doc).unwrap());
    assert!(doc.assignments.iter().any(|a| a.top2.len() == 2));

    let truncated = write(dir.path(), "truncated.json", &CONFLICT_SCENE[..200]);
    let o = lfsa(&["assign", &truncated]);
    assert_ne!(code(&o), 0);
    assert!(stderr(&o).contains("line"), "{}", stderr(&o));

    let degenerate =
        write(dir.path(), "degenerate.json", &CONFLICT_SCENE.replace("\"w\": 12, \"h\": 14", "\"w\": 0, \"h\": 14"));
    assert_eq!(code(&lfsa(&["assign", &degenerate])), 2);
}

#[test]
fn train_toy_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let one = dir.path().join("one.csv");
    let o = lfsa(&["train-toy", "--steps", "1", "--out", one.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(&one).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.starts_with("step,loss\n0,"));

    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for p in [&a, &b] {
        lfsa(&["train-toy", "--steps", "20", "--seed", "3", "--out", p.to_str().unwrap()]);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let o = lfsa(&["train-toy", "--lr", "-1", "--out", a.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn bench_rows_sorted_by_macs() {
    let o = lfsa(&["bench", "--size", "8,12,12", "--size", "1,1,1", "--size", "4,6,6", "--reps", "1"]);
    assert_eq!(code(&o), 0);
    let sizes: Vec<String> =
        stdout(&o).lines().skip(1).map(|l| l.split_whitespace().next().unwrap().to_string()).collect();
    assert_eq!(sizes, ["1,1,1", "4,6,6", "8,12,12"]);
    assert_eq!(code(&lfsa(&["bench", "--size", "0,1,1"])), 2);
}
