use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ctxpipe::backend::mock_embed;
use ctxpipe::cosine;
use serde_json::Value;

const SECRET: &str = "sk-cli-test-91d0be";

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctxpipe"))
        .args(args)
        .current_dir(root())
        .env_remove("CTXPIPE_API_KEY")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn lines(text: &str) -> Vec<Value> {
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[test]
fn usage_errors_exit_64() {
    assert_eq!(code(&run(&["decompose", "--schema", "schemas/fig2.json", "   "])), 64);
    assert_eq!(code(&run(&["filter", "fixtures/synasst_small.jsonl", "--method", "bogus"])), 64);
    assert_eq!(code(&run(&["bench", "nonsense"])), 64);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn missing_inputs_exit_66() {
    assert_eq!(code(&run(&["decompose", "--schema", "schemas/nope.json", "hi"])), 66);
    assert_eq!(code(&run(&["filter", "fixtures/does_not_exist.jsonl"])), 66);
}

#[test]
fn all_degraded_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("garbage.mock");
    std::fs::write(&script, r#"{"default": "not json at all"}"#).unwrap();
    let out = run(&["decompose", "--schema", "schemas/fig2.json", "--mock", &s(&script), "Make a folder."]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    let rec = &lines(&stdout(&out))[0];
    assert_eq!(rec["path"], serde_json::json!(["miscellaneous"]));
}

#[test]
fn backend_failure_exits_1_without_output_or_key() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("live.toml");
    std::fs::write(
        &config,
        format!("[llm.http]\nbase_url = \"http://{addr}/v1\"\nmodel_id = \"m\"\nmax_retries = 0\ntimeout_secs = 2.0\n"),
    )
    .unwrap();
    let out_file = dir.path().join("out.jsonl");
    let out = Command::new(env!("CARGO_BIN_EXE_ctxpipe"))
        .args(["decompose", "--live", "--config", &s(&config), "--schema", "schemas/fig2.json", "--out", &s(&out_file), "hi"])
        .current_dir(root())
        .env("CTXPIPE_API_KEY", SECRET)
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
    assert!(!out_file.exists());
    let all = format!("{}{}", stdout(&out), String::from_utf8_lossy(&out.stderr));
    assert!(!all.contains(SECRET));
}

#[test]
fn http_profile_without_live_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("live.toml");
    std::fs::write(&config, "[llm.http]\nbase_url = \"http://127.0.0.1:9/v1\"\nmodel_id = \"m\"\n").unwrap();
    let out = run(&["decompose", "--config", &s(&config), "--schema", "schemas/fig2.json", "hi"]);
    assert_eq!(code(&out), 64);
}

#[test]
fn batch_decompose_keeps_input_order() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("p.txt");
    std::fs::write(&input, "Delete the old folder.\nWhat time is it in Lima?\n\nasdkWldqwlqwlej.\n").unwrap();
    let out = run(&["decompose", "--schema", "schemas/fig2.json", "--input", &s(&input), "--jobs", "4"]);
    assert_eq!(code(&out), 0);
    let recs = lines(&stdout(&out));
    let prompts: Vec<&str> = recs.iter().map(|r| r["prompt"].as_str().unwrap()).collect();
    assert_eq!(prompts, ["Delete the old folder.", "What time is it in Lima?", "asdkWldqwlqwlej."]);
}

#[test]
fn filter_matches_golden_and_independent_cosines() {
    let out = run(&["filter", "fixtures/synasst_small.jsonl"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert_eq!(text, std::fs::read_to_string(root().join("fixtures/golden/filter_default.jsonl")).unwrap());

    let data = std::fs::read_to_string(root().join("fixtures/synasst_small.jsonl")).unwrap();
    for (entry, result) in lines(&data).iter().zip(lines(&text)) {
        let tree = entry;
        let q = mock_embed(tree["reference_prompt"].as_str().unwrap(), 256, 0);
        for seg in tree["segments"].as_array().unwrap() {
            let i = seg["index"].as_u64().unwrap();
            let expected = cosine(&mock_embed(seg["text"].as_str().unwrap(), 256, 0), &q).unwrap();
            let got = result["scores"][i.to_string()].as_f64().unwrap();
            assert!((expected - got).abs() < 1e-12);
            let kept = result["kept"].as_array().unwrap().contains(&Value::from(i));
            assert_eq!(kept, got >= 0.35);
        }
    }
}

#[test]
fn lowest_threshold_keeps_everything() {
    let out = run(&["filter", "fixtures/synasst_small.jsonl", "--tau", "-1"]);
    assert_eq!(code(&out), 0);
    for r in lines(&stdout(&out)) {
        assert_eq!(r["kept"].as_array().unwrap().len(), r["scores"].as_object().unwrap().len());
    }
}

#[test]
fn no_divergence_means_everything_is_relevant() {
    let out = run(&["synth", "conversations", "--pairs", "4", "--n", "12", "--p-diverge", "0"]);
    assert_eq!(code(&out), 0);
    for e in lines(&stdout(&out)) {
        let n = e["segments"].as_array().unwrap().len();
        let gold: Vec<u64> = serde_json::from_value(e["gold_relevant"].clone()).unwrap();
        assert_eq!(gold, (0..n as u64).collect::<Vec<_>>());
    }
}

#[test]
fn synthesis_is_reproducible() {
    let a = run(&["synth", "prompts", "--schema", "schemas/fig4.json", "--n", "30", "--seed", "11"]);
    let b = run(&["synth", "prompts", "--schema", "schemas/fig4.json", "--n", "30", "--seed", "11"]);
    let c = run(&["synth", "prompts", "--schema", "schemas/fig4.json", "--n", "30", "--seed", "12"]);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    assert_ne!(a.stdout, c.stdout);
    assert_eq!(lines(&stdout(&a)).len(), 30);
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(&config, "[filter]\ntau = -1.0\n").unwrap();
    let from_config = run(&["filter", "fixtures/synasst_small.jsonl", "--config", &s(&config)]);
    assert_eq!(code(&from_config), 0);
    assert!(lines(&stdout(&from_config)).iter().all(|r| r["params"]["threshold"] == -1.0));
    let flagged = run(&["filter", "fixtures/synasst_small.jsonl", "--config", &s(&config), "--tau", "0.35"]);
    assert_eq!(
        stdout(&flagged),
        std::fs::read_to_string(root().join("fixtures/golden/filter_default.jsonl")).unwrap()
    );
    std::fs::write(&config, "[filter]\ntau = 0.1\nbogus = 1\n").unwrap();
    assert_eq!(code(&run(&["filter", "fixtures/synasst_small.jsonl", "--config", &s(&config)])), 64);
}

#[test]
fn alpha_sweep_matches_report_curves_and_tables_render() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("syn.jsonl");
    let report = dir.path().join("r");
    assert_eq!(code(&run(&["synth", "prompts", "--schema", "schemas/fig2.json", "--n", "20", "--out", &s(&data)])), 0);
    let out = run(&[
        "bench", "decomp", &s(&data), "--schema", "schemas/fig2.json", "--sample-n", "10", "--alpha-sweep", "--out", &s(&report),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let curves = run(&["report", "curves"]);
    assert_eq!(std::fs::read(report.join("curves.csv")).unwrap(), curves.stdout);
    assert!(!report.join("report.json.partial").exists());

    let table = run(&["report", "table", &s(&report.join("report.json"))]);
    assert_eq!(code(&table), 0);
    let text = stdout(&table);
    assert!(text.starts_with("dataset (mean ECI)"), "{text}");
    assert!(text.lines().nth(2).unwrap().starts_with("syn "));
    assert!(text.contains("1.0000"));
    let csv = run(&["report", "table", &s(&report.join("report.json")), "--format", "csv"]);
    assert_eq!(stdout(&csv).lines().count(), 2);
}
