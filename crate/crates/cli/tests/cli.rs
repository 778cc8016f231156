use std::path::Path;
use std::process::{Command, Output};

use ntkg_core::config::KEYS;
use ntkg_core::data::Split;
use ntkg_core::io::load_dataset;
use ntkg_core::train::{rollout_group, Agent, Checkpoint, Steering};
use ntkg_core::Tape;
use serde_json::Value;

const SMALL: &[&str] = &[
    "--set", "entity_dim=6", "--set", "relation_dim=6", "--set", "time_dim=4", "--set", "hidden=6",
    "--set", "mlp_hidden=6", "--set", "lstm_layers=1", "--set", "valid_beam=4",
];

fn ntkg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ntkg")).args(args).output().unwrap()
}

fn ok_json(out: Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn error_kind(out: &Output) -> String {
    assert!(!out.status.success());
    let v: Value = serde_json::from_slice(&out.stderr).expect("stderr is JSON");
    v["error"]["kind"].as_str().unwrap().to_string()
}

fn synth(dir: &Path) -> String {
    let d = dir.join("data");
    ok_json(ntkg(&["synth-gen", "--out", d.to_str().unwrap(), "--set", "timestamps=20", "--set", "seed=4"]));
    d.to_str().unwrap().to_string()
}

fn train(data: &str, out: &Path, extra: &[&str]) -> Value {
    let ds = format!("dataset={data}");
    let mut args = vec!["train", "--out", out.to_str().unwrap(), "--set", &ds, "--set", "epochs=2"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    ok_json(ntkg(&args))
}

fn metrics_without_clock(run: &Path) -> Vec<Value> {
    std::fs::read_to_string(run.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wallclock_s");
            v
        })
        .collect()
}

#[test]
fn train_is_reproducible_and_echoes_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let summary = train(&data, &a, &["--set", "seed=9"]);
    train(&data, &b, &["--set", "seed=9"]);
    assert_eq!(metrics_without_clock(&a), metrics_without_clock(&b));
    assert_eq!(metrics_without_clock(&a).len(), 2);
    assert_eq!(summary["config"]["seed"], 9);
    let ck = Checkpoint::load(&a.join("checkpoint.json")).unwrap();
    assert_eq!(ck.config.seed, 9);
    let echoed: Value = serde_json::from_str(&std::fs::read_to_string(a.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed, serde_json::to_value(&ck.config).unwrap());
    assert_eq!(metrics_without_clock(&a)[0]["seed"], 9);
}

#[test]
fn width_one_eval_is_greedy() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let run = dir.path().join("run");
    train(&data, &run, &[]);
    let ck_path = run.join("checkpoint.json");
    let v = ok_json(ntkg(&["eval", "--checkpoint", ck_path.to_str().unwrap(), "--beam", "1"]));
    let ranks: Vec<usize> = serde_json::from_value(v["result"]["ranks"].clone()).unwrap();

    let ck = Checkpoint::load(&ck_path).unwrap();
    let ds = load_dataset(Path::new(&data)).unwrap().add_inverse_facts();
    let spec = ck.config.model_spec(&ds);
    let agent = Agent::new(&ds, &spec, &ck.prior, ck.config.action_cap, ck.config.max_steps);
    let greedy: Vec<usize> = ds
        .queries(Split::Test)
        .iter()
        .map(|q| {
            let mut tape = Tape::new();
            let model = spec.bind(&mut tape, &ck.params).unwrap();
            let g = rollout_group(&mut tape, &model, &agent, &[q], Steering::Greedy).unwrap();
            let end = g.trajectories[0].states.last().unwrap().0;
            if end == q.answer {
                1
            } else {
                ds.num_entities()
            }
        })
        .collect();
    assert_eq!(ranks, greedy);
}

#[test]
fn eval_ignores_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let run = dir.path().join("run");
    train(&data, &run, &[]);
    let ck = run.join("checkpoint.json");
    let ck = ck.to_str().unwrap();
    let one = ok_json(ntkg(&["--threads", "1", "eval", "--checkpoint", ck, "--beam", "8"]));
    let four = ok_json(ntkg(&["--threads", "4", "eval", "--checkpoint", ck, "--beam", "8"]));
    assert_eq!(one, four);
}

#[test]
fn explain_writes_one_record_per_query() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let run = dir.path().join("run");
    train(&data, &run, &[]);
    let ck = run.join("checkpoint.json");
    let test = std::fs::read_to_string(Path::new(&data).join("test.jsonl")).unwrap();
    let first: Value = serde_json::from_str(test.lines().next().unwrap()).unwrap();
    let mut q = first.clone();
    q["hide"] = 1.into();
    let qfile = dir.path().join("q.jsonl");
    std::fs::write(&qfile, format!("{q}\n{first}\n")).unwrap();
    let out = dir.path().join("ex.jsonl");
    let res = ntkg(&[
        "explain", "--checkpoint", ck.to_str().unwrap(), "--queries", qfile.to_str().unwrap(),
        "--beam", "4", "--out", out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let lines: Vec<Value> = std::fs::read_to_string(&out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    let t = first["t"].as_u64().unwrap();
    for l in &lines {
        assert_eq!(l["query"]["time"].as_u64().unwrap(), t);
        for step in l["path"].as_array().unwrap() {
            assert!(step["time"].as_u64().unwrap() < t);
            assert_eq!(step["gate"].as_array().unwrap().len(), 3);
        }
    }
}

#[test]
fn contradictory_config_fails_with_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let ds = format!("dataset={data}");
    let out = dir.path().join("x");
    let res = ntkg(&[
        "train", "--out", out.to_str().unwrap(), "--set", &ds, "--set", "no_pp=true", "--set", "no_cp=true",
        "--set", "no_fp=true",
    ]);
    assert_eq!(error_kind(&res), "config");
    assert_eq!(res.status.code(), Some(2));
    let res = ntkg(&["train", "--out", out.to_str().unwrap(), "--set", "epoch=3"]);
    assert_eq!(error_kind(&res), "config");
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let cfg = dir.path().join("run.conf");
    std::fs::write(&cfg, format!("# tiny run\ndataset = {data}\nepochs = 5\nseed = 2\n")).unwrap();
    let out = dir.path().join("r");
    let mut args = vec!["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--set", "epochs=1"];
    args.extend_from_slice(SMALL);
    let v = ok_json(ntkg(&args));
    assert_eq!(v["config"]["epochs"], 1);
    assert_eq!(v["config"]["seed"], 2);
}

#[test]
fn missing_inputs_are_reported() {
    let res = ntkg(&["stats", "/definitely/not/here"]);
    assert_eq!(error_kind(&res), "missing_file");
    let res = ntkg(&["no-such-command"]);
    assert_eq!(error_kind(&res), "usage");
}

#[test]
fn convert_then_stats() {
    let dir = tempfile::tempdir().unwrap();
    let tsv = dir.path().join("tsv");
    std::fs::create_dir(&tsv).unwrap();
    std::fs::write(tsv.join("train.txt"), "Consult\tA0\tUS\tA1\tJapan\tWay\tVisit\t24\nCoop\tA0\tJapan\tA1\tChina\t48\n").unwrap();
    std::fs::write(tsv.join("valid.txt"), "Coop\tA0\tChina\tA1\tUS\t72\n").unwrap();
    std::fs::write(tsv.join("test.txt"), "").unwrap();
    let out = dir.path().join("canon");
    let a = ok_json(ntkg(&["convert", "--input", tsv.to_str().unwrap(), "--out", out.to_str().unwrap()]));
    let b = ok_json(ntkg(&["stats", out.to_str().unwrap()]));
    assert_eq!(a, b);
    assert_eq!((b["entities"].as_u64(), b["predicates"].as_u64(), b["test"].as_u64()), (Some(4), Some(2), Some(0)));
    assert_eq!(b["granularity"], 24);
}

#[test]
fn help_documents_every_key() {
    let out = ntkg(&["train", "--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for (k, _) in KEYS {
        assert!(text.contains(k), "{k} missing from help");
    }
}
