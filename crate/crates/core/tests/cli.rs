use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn flora(args: &[&str]) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_flora"));
    c.args(args).env_remove("FLORA_CONFIG");
    c
}

fn run(c: &mut Command) -> Output {
    c.output().expect("binary runs")
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

fn synth_into(dir: &Path, extra: &[&str]) {
    let out = dir.to_str().unwrap();
    let mut args = vec!["synth", "--seed", "7", "--count", "30", "--out", out];
    args.extend_from_slice(extra);
    let o = run(&mut flora(&args));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn first_record(dir: &Path) -> Value {
    let text = std::fs::read_to_string(dir.join("records.jsonl")).unwrap();
    serde_json::from_str(text.lines().next().unwrap()).unwrap()
}

#[test]
fn synth_then_eval_with_mock() {
    let dir = tempfile::tempdir().unwrap();
    synth_into(dir.path(), &[]);
    assert!(dir.path().join("scenes/scene-00007.json").exists());
    let report = dir.path().join("report");
    let o = run(&mut flora(&[
        "eval",
        dir.path().join("records.jsonl").to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
        "--mock",
        dir.path().join("mock.json").to_str().unwrap(),
        "--parallelism",
        "3",
    ]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = stdout_json(&o);
    assert_eq!(summary["n"], 30);
    assert_eq!(summary["p_at_1"], 1.0);
    let lines = std::fs::read_to_string(report.join("per_record.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 30);
    let on_disk: Value = serde_json::from_str(&std::fs::read_to_string(report.join("summary.json")).unwrap()).unwrap();
    assert_eq!(on_disk, summary);
}

#[test]
fn association_records_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    synth_into(dir.path(), &["--association", "--mode", "minimal"]);
    let o = run(&mut flora(&[
        "eval",
        dir.path().join("records.jsonl").to_str().unwrap(),
        "--out",
        dir.path().join("r").to_str().unwrap(),
        "--mock",
        dir.path().join("mock.json").to_str().unwrap(),
    ]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_json(&o)["assoc_accuracy"], 1.0);
}

#[test]
fn infer_uses_config_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    synth_into(dir.path(), &[]);
    let cfg = dir.path().join("flora.conf");
    std::fs::write(&cfg, format!("mock.backends = {}\nsigma.kind = squared\n", dir.path().join("mock.json").display()))
        .unwrap();
    let rec = first_record(dir.path());
    let o = run(flora(&[
        "infer",
        rec["phrase"].as_str().unwrap(),
        "--image",
        rec["image"]["uri"].as_str().unwrap(),
        "--width",
        "640",
        "--height",
        "480",
        "--top-k",
        "1",
    ])
    .env("FLORA_CONFIG", &cfg));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let answer = stdout_json(&o);
    assert_eq!(answer["ranked"].as_array().unwrap().len(), 1);
    assert_eq!(answer["ranked"][0]["candidate"]["box"], rec["gt_box"]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("[type]"));
}

#[test]
fn parse_prints_semantics() {
    let dir = tempfile::tempdir().unwrap();
    synth_into(dir.path(), &[]);
    let phrase = first_record(dir.path())["phrase"].as_str().unwrap().to_string();
    let mock = dir.path().join("mock.json");
    let o = run(&mut flora(&["parse", &phrase, "--mock-llm", mock.to_str().unwrap()]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let parsed = stdout_json(&o);
    assert!(parsed["type"].is_string());
}

#[test]
fn exit_code_for_no_answer() {
    let dir = tempfile::tempdir().unwrap();
    synth_into(dir.path(), &[]);
    let rec = first_record(dir.path());
    // the scripted detector knows no prompts for this scene
    let mut mock: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("mock.json")).unwrap()).unwrap();
    let uri = rec["image"]["uri"].as_str().unwrap();
    mock["scenes"][uri]["detections"] = serde_json::json!({});
    let path = dir.path().join("empty.json");
    std::fs::write(&path, mock.to_string()).unwrap();
    let o = run(&mut flora(&[
        "infer",
        rec["phrase"].as_str().unwrap(),
        "--image",
        uri,
        "--width",
        "640",
        "--height",
        "480",
        "--mock",
        path.to_str().unwrap(),
    ]));
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(stdout_json(&o)["no_answer"], true);
}

#[test]
fn exit_code_for_backend_failure() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let url = format!("http://127.0.0.1:{port}");
    let o = run(&mut flora(&[
        "infer",
        "the red car",
        "--image",
        "file:///x.jpg",
        "--width",
        "10",
        "--height",
        "10",
        "--llm-url",
        &url,
        "--set",
        &format!("detector.url={url}"),
        "--set",
        &format!("scorer.url={url}"),
        "--set",
        "llm.timeout_ms=2000",
    ]));
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn exit_code_for_usage_errors() {
    assert_eq!(run(&mut flora(&["infer"])).status.code(), Some(2));
    assert_eq!(run(&mut flora(&["synth", "--out", "/tmp/x", "--mode", "bogus"])).status.code(), Some(2));
    let o = run(&mut flora(&["parse", "the car", "--set", "no.such.key=1"]));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no.such.key"));
    // no backends configured at all
    assert_eq!(run(&mut flora(&["parse", "the car"])).status.code(), Some(2));
    let missing =
        run(&mut flora(&["eval", "/definitely/not/here.jsonl", "--out", "/tmp/none", "--mock", "/nope.json"]));
    assert_eq!(missing.status.code(), Some(2));
    assert_eq!(run(&mut flora(&["--help"])).status.code(), Some(0));
}

#[test]
fn synth_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    synth_into(a.path(), &[]);
    synth_into(b.path(), &[]);
    for f in ["records.jsonl", "mock.json", "scenes/scene-00020.json"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn parse_worked_example() {
    let dir = tempfile::tempdir().unwrap();
    let q = |question: &str| {
        format!("The description of an object in an image is 'black car on the left'. {question} The answer must start with a #.")
    };
    let script = serde_json::json!({"llm": {
        q("Tell me the type of the object described."): "#Car",
        q("Tell me the spatial location of the object described. If it is not mentioned, answer None."): "#Left",
        q("Tell me the visual patterns of the object described. If they are not mentioned, answer None."): "#Black",
        q("Tell me its relation to surrounding objects. If it is not mentioned, answer None."): "#None"
    }});
    let path = dir.path().join("llm.json");
    std::fs::write(&path, script.to_string()).unwrap();
    let o = run(&mut flora(&["parse", "black car on the left", "--mock-llm", path.to_str().unwrap()]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        stdout_json(&o),
        serde_json::json!({"type": "car", "location": ["left"], "visual": "black", "relation": null})
    );
    assert_eq!(run(&mut flora(&["parse", "", "--mock-llm", path.to_str().unwrap()])).status.code(), Some(2));
}

#[test]
fn parse_against_unreachable_llm() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let o = run(&mut flora(&["parse", "the car", "--llm-url", &format!("http://127.0.0.1:{port}")]));
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("llm"));
}

#[test]
fn eval_on_empty_dataset_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("empty.jsonl");
    std::fs::write(&data, "").unwrap();
    let mock = dir.path().join("mock.json");
    std::fs::write(&mock, "{}").unwrap();
    let o = run(&mut flora(&[
        "eval",
        data.to_str().unwrap(),
        "--out",
        dir.path().join("r").to_str().unwrap(),
        "--mock",
        mock.to_str().unwrap(),
    ]));
    assert_eq!(o.status.code(), Some(2));
}
