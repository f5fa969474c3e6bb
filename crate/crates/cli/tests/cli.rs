use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_eduembed"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn eduembed")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "eduembed {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

const FAST: [&str; 4] = ["--epochs", "4", "--stage1-epochs", "2"];

fn synth(dir: &Path, seed: &str, domain: &str) -> PathBuf {
    let out = dir.join(format!("synth_{domain}_{seed}"));
    ok(&["synth", "--out", s(&out), "--seed", seed, "--domain", domain]);
    out
}

#[test]
fn synth_stage1_train_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "3", "a");
    let emb = tmp.path().join("emb.jsonl");
    ok(&["stage1", "--corpus", s(&data), "--out", s(&emb), "--stage1-epochs", "2"]);
    let header: Value = serde_json::from_str(fs::read_to_string(&emb).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(header["format"], "eduembed-emb");
    assert_eq!(header["dim"], 64, "header dim follows the config's d");
    assert!(emb.with_extension("encoder").exists());
    assert_eq!(json(&emb.with_extension("report.json"))["command"], "stage1");

    let train = tmp.path().join("train");
    let mut args = vec!["train", "--scenario", "transductive", "--corpus", s(&data), "--emb", s(&emb), "--out", s(&train)];
    args.extend(FAST);
    ok(&args);
    let report = json(&train.join("report.json"));
    assert_eq!(report["config"]["epochs"], 4);
    assert_eq!(report["scenario"], "transductive");
    let mastery = fs::read_to_string(train.join("mastery.csv")).unwrap();
    assert_eq!(mastery.lines().count(), 101);
    assert!(mastery.starts_with("student_id,c0,"));

    let eval_out = tmp.path().join("eval.json");
    ok(&[
        "eval",
        "--checkpoint",
        s(&train.join("model.ckpt")),
        "--corpus",
        s(&data),
        "--emb",
        s(&emb),
        "--out",
        s(&eval_out),
    ]);
    let eval = json(&eval_out);
    assert_eq!(eval["split"], "test");
    assert_eq!(eval["metrics"], report["test"]);
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "4", "a");
    let mut outs = Vec::new();
    for k in 0..2 {
        let out = tmp.path().join(format!("run{k}"));
        let mut args = vec!["train", "--scenario", "transductive", "--corpus", s(&data), "--out", s(&out)];
        args.extend(FAST);
        ok(&args);
        outs.push(out);
    }
    for f in ["report.json", "model.ckpt", "mastery.csv", "embeddings.jsonl"] {
        assert_eq!(fs::read(outs[0].join(f)).unwrap(), fs::read(outs[1].join(f)).unwrap(), "{f} differs");
    }

    // the in-process table is written out and reproduces the test metrics
    let eval_out = tmp.path().join("eval.json");
    ok(&[
        "eval",
        "--checkpoint",
        s(&outs[0].join("model.ckpt")),
        "--corpus",
        s(&data),
        "--emb",
        s(&outs[0].join("embeddings.jsonl")),
        "--out",
        s(&eval_out),
    ]);
    assert_eq!(json(&eval_out)["metrics"], json(&outs[0].join("report.json"))["test"]);
}

#[test]
fn cat_reports_requested_checkpoints_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "5", "a");
    let planted = data.join("planted.json");
    let mut reports = Vec::new();
    for k in 0..2 {
        let out = tmp.path().join(format!("cat{k}"));
        let mut args = vec![
            "cat", "--corpus", s(&data), "--strategy", "maxinfo", "--steps", "2,4", "--planted", s(&planted), "--out", s(&out),
        ];
        args.extend(FAST);
        ok(&args);
        reports.push(fs::read(out.join("report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    let r: Value = serde_json::from_slice(&reports[0]).unwrap();
    assert_eq!(r["oracle"], "planted");
    assert_eq!(r["strategy"], "maxinfo");
    let steps: Vec<u64> = r["cat"]["checkpoints"].as_array().unwrap().iter().map(|c| c["step"].as_u64().unwrap()).collect();
    assert_eq!(steps, [2, 4]);
    assert_eq!(r["cat"]["params_checksum_before"], r["cat"]["params_checksum_after"]);
}

fn write_fixture(dir: &Path) {
    fs::create_dir_all(dir).unwrap();
    fs::write(dir.join("concepts.csv"), "concept_id,name\nk1,addition\nk2,subtraction\n").unwrap();
    let mut q = String::from("exercise_id,concept_id\n");
    for j in 0..12 {
        q.push_str(&format!("x{j},k{}\n", 1 + j % 2));
    }
    fs::write(dir.join("q_matrix.csv"), q).unwrap();
    let mut r = String::from("student_id,exercise_id,score\n");
    for (student, n) in [("full_a", 12), ("short", 9), ("full_b", 10), ("full_c", 11)] {
        for j in 0..n {
            r.push_str(&format!("{student},x{j},{}\n", (j + student.len()) % 2));
        }
    }
    fs::write(dir.join("responses.csv"), r).unwrap();
}

#[test]
fn prepare_drops_sparse_students_and_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw");
    write_fixture(&raw);
    let once = tmp.path().join("once");
    let out = ok(&["prepare", "--data", s(&raw), "--out", s(&once), "--min-responses", "10"]);
    let report = json(&once.join("prepare_report.json"));
    assert_eq!(report["dropped_students"], serde_json::json!(["short"]));
    assert_eq!(report["input_students"], 4);
    assert_eq!(report["students"], 3);
    assert_eq!(report["responses"], 33);
    let stdout: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(stdout, report);
    let responses = fs::read_to_string(once.join("responses.csv")).unwrap();
    assert!(!responses.contains("short"));
    assert!(once.join("attributes.jsonl").exists());

    let files = ["concepts.csv", "q_matrix.csv", "responses.csv", "attributes.jsonl", "prepare_report.json"];
    let first: Vec<Vec<u8>> = files.iter().map(|f| fs::read(once.join(f)).unwrap()).collect();
    ok(&["prepare", "--data", s(&raw), "--out", s(&once), "--min-responses", "10"]);
    for (f, bytes) in files.iter().zip(&first) {
        assert_eq!(&fs::read(once.join(f)).unwrap(), bytes, "{f} changed on re-run");
    }

    let twice = tmp.path().join("twice");
    ok(&["prepare", "--data", s(&once), "--out", s(&twice), "--min-responses", "10"]);
    for f in ["concepts.csv", "q_matrix.csv", "responses.csv", "attributes.jsonl"] {
        assert_eq!(fs::read(once.join(f)).unwrap(), fs::read(twice.join(f)).unwrap(), "{f} changed");
    }
    assert_eq!(json(&twice.join("prepare_report.json"))["dropped_students"], serde_json::json!([]));
}

#[test]
fn cross_domain_refuses_shared_identifiers() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synth(tmp.path(), "6", "a");
    let a2 = synth(tmp.path(), "7", "a");
    let out = run(&["train", "--scenario", "cross-domain", "--source", s(&a), "--target", s(&a2), "--out", s(&tmp.path().join("cd"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("appears in source and target"));
}

#[test]
fn cross_domain_on_disjoint_domains_writes_target_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synth(tmp.path(), "8", "a");
    let b = synth(tmp.path(), "1008", "b");
    let out = tmp.path().join("cd");
    let mut args = vec!["train", "--scenario", "cross-domain", "--source", s(&a), "--target", s(&b), "--out", s(&out), "--lambda", "0.3"];
    args.extend(FAST);
    let res = ok(&args);
    assert!(String::from_utf8_lossy(&res.stderr).contains("--lambda ignored"));
    let report = json(&out.join("report.json"));
    assert_eq!(report["scenario"], "cross-domain");
    assert_eq!(report["warnings"].as_array().unwrap().len(), 1);
    assert!(out.join("target_mastery.csv").exists());
    assert!(out.join("target_embeddings.jsonl").exists());
}

#[test]
fn inductive_lambda_warns_and_keeps_parameters_fixed() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "9", "a");
    let out = tmp.path().join("ind");
    let mut args = vec!["train", "--scenario", "inductive", "--corpus", s(&data), "--lambda", "0.5", "--out", s(&out)];
    args.extend(FAST);
    let res = ok(&args);
    assert!(String::from_utf8_lossy(&res.stderr).contains("lambda forced to 1"));
    let report = json(&out.join("report.json"));
    assert_eq!(report["inductive"]["checksum_before"], report["inductive"]["checksum_after"]);
    assert_eq!(report["inductive"]["trainable_student_params"], 0);
}

#[test]
fn seeds_aggregates_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "10", "a");
    let emb = tmp.path().join("emb.jsonl");
    ok(&["stage1", "--corpus", s(&data), "--out", s(&emb), "--stage1-epochs", "2"]);

    let single = tmp.path().join("one.json");
    let mut args = vec!["seeds", "--n", "1", "--start", "2", "--out", s(&single), "train", "--scenario", "transductive"];
    args.extend(["--corpus", s(&data), "--emb", s(&emb)]);
    args.extend(FAST);
    ok(&args);
    let r = json(&single);
    assert_eq!(r["seeds"], serde_json::json!([2]));
    let run = &r["runs"][0];
    for (k, v) in run.as_object().unwrap() {
        assert_eq!(&r["summary"][k]["mean"], v);
        assert_eq!(r["summary"][k]["std"], 0.0);
    }

    let direct = tmp.path().join("direct");
    let mut args = vec!["train", "--scenario", "transductive", "--corpus", s(&data), "--emb", s(&emb), "--seed", "2"];
    args.extend(["--out", s(&direct)]);
    args.extend(FAST);
    ok(&args);
    assert_eq!(run["test.auc"], json(&direct.join("report.json"))["test"]["auc"]);
}

#[test]
fn exit_codes_follow_error_kind() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&["train", "--bogus"]), 1);
    assert_eq!(code(&["train", "--scenario", "sideways", "--out", "x"]), 1);
    assert_eq!(code(&["--help"]), 0);

    let missing = tmp.path().join("missing");
    assert_eq!(code(&["train", "--scenario", "transductive", "--corpus", s(&missing), "--out", s(&tmp.path().join("o"))]), 2);

    let data = synth(tmp.path(), "11", "a");
    let out = s(&tmp.path().join("o")).to_string();
    assert_eq!(code(&["train", "--scenario", "transductive", "--out", &out]), 1, "missing --corpus");
    assert_eq!(code(&["train", "--scenario", "transductive", "--corpus", s(&data), "--lambda", "1.5", "--out", &out]), 1);

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "lr = \"fast\"\n").unwrap();
    assert_eq!(code(&["train", "--scenario", "transductive", "--corpus", s(&data), "--config", s(&bad), "--out", &out]), 1);

    let broken = tmp.path().join("broken");
    fs::create_dir_all(&broken).unwrap();
    for f in ["concepts.csv", "q_matrix.csv"] {
        fs::copy(data.join(f), broken.join(f)).unwrap();
    }
    fs::write(broken.join("responses.csv"), "student_id,exercise_id,score\ns0,e0,7\n").unwrap();
    assert_eq!(code(&["prepare", "--data", s(&broken), "--out", s(&tmp.path().join("p"))]), 2);

    let emb = tmp.path().join("emb.jsonl");
    ok(&["stage1", "--corpus", s(&data), "--out", s(&emb), "--stage1-epochs", "1"]);
    let huge = tmp.path().join("huge.toml");
    fs::write(&huge, "lr = 1e300\nepochs = 3\n").unwrap();
    assert_eq!(
        code(&["train", "--scenario", "transductive", "--corpus", s(&data), "--emb", s(&emb), "--config", s(&huge), "--out", &out]),
        3
    );
}
