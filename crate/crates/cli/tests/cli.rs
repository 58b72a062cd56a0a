use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn tdvit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tdvit"))
        .args(args)
        .env("TDVIT_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn json_lines(out: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap_or_else(|e| panic!("bad JSON line {l:?}: {e}")))
        .collect()
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    fs::write(&p, "seeds = 2\ntrain_videos = 8\ntest_videos = 4\n[train]\nsteps = 3\n").unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn gradcheck_passes_and_reports_every_case() {
    let out = tdvit(&["gradcheck"]);
    assert_eq!(out.status.code(), Some(0));
    let lines = json_lines(&out);
    assert_eq!(lines[0]["command"], "gradcheck");
    assert!(lines[0]["config"]["model"].is_object());
    assert_eq!(lines.len(), 1 + tdvit::gradsuite::CASES.len() + 1);
    assert_eq!(lines.last().unwrap()["summary"]["passed"], true);
}

#[test]
fn corrupted_gradient_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("corrupt.toml");
    fs::write(&cfg, "[gradcheck]\ncorrupt = \"tdtb_window\"\ncorrupt_by = 0.001\n").unwrap();
    let out = tdvit(&["--config", cfg.to_str().unwrap(), "gradcheck"]);
    assert_eq!(out.status.code(), Some(1));
    let failed: Vec<_> = json_lines(&out)
        .into_iter()
        .filter(|l| l["passed"] == false)
        .map(|l| l["op"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(failed, ["tdtb_window"]);
}

#[test]
fn trf_rows_agree() {
    let out = tdvit(&["trf"]);
    assert_eq!(out.status.code(), Some(0));
    let lines = json_lines(&out);
    let row = |prefix: &str| lines.iter().find(|l| l["name"].as_str().is_some_and(|n| n.starts_with(prefix))).unwrap();
    assert_eq!(row("calculator")["closed_form"], 4);
    assert_eq!(row("chain")["closed_form"], 8);
    assert_eq!(row("chain")["measured"], 8);
    assert_eq!(row("model")["measured"], 93);
}

#[test]
fn bench_counts_are_exact_and_out_file_matches_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("bench.jsonl");
    let out = tdvit(&["bench", "--frames", "20", "--out", file.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(fs::read(&file).unwrap(), out.stdout);
    let lines = json_lines(&out);
    for l in lines.iter().filter(|l| l["cost"]["dilation"].is_u64()) {
        let d = l["cost"]["dilation"].as_u64().unwrap();
        assert_eq!(l["cost"]["kv_count"].as_u64().unwrap(), 20u64.div_ceil(d));
        assert_eq!(l["cost"]["q_count"], 20);
    }
    let summary = &lines.last().unwrap()["summary"];
    assert_eq!(summary["equivalent"], true);
    assert_eq!(summary["counters_exact"], true);
}

#[test]
fn train_and_eval_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let runs: Vec<_> = ["a", "b"]
        .iter()
        .map(|n| {
            let out = dir.path().join(n);
            let o = tdvit(&["--config", &cfg, "--out", out.to_str().unwrap(), "train"]);
            assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
            out
        })
        .collect();
    for f in ["metrics.jsonl", "table.txt", "seed1-tdvit.json", "seed2-space_only.json"] {
        assert_eq!(fs::read(runs[0].join(f)).unwrap(), fs::read(runs[1].join(f)).unwrap(), "{f}");
    }

    let train_metrics: Vec<Value> = fs::read_to_string(runs[0].join("metrics.jsonl"))
        .unwrap()
        .lines()
        .filter_map(|l| serde_json::from_str::<Value>(l).ok())
        .filter(|v| v["model"].is_string())
        .collect();
    let eval = tdvit(&["--config", &cfg, "eval", runs[0].to_str().unwrap()]);
    assert_eq!(eval.status.code(), Some(0));
    let evaluated: Vec<Value> = json_lines(&eval).into_iter().filter(|v| v["model"].is_string()).collect();
    assert_eq!(evaluated.len(), 4);
    for (t, e) in train_metrics.iter().zip(&evaluated) {
        assert_eq!((&t["seed"], &t["model"]), (&e["seed"], &e["model"]));
        assert_eq!(t["occluded_accuracy"], e["occluded_accuracy"]);
        assert_eq!(t["center_error"], e["center_error"]);
    }
}

#[test]
fn generated_dataset_can_be_evaluated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("test.tdvs");
    let run = dir.path().join("run");
    assert_eq!(tdvit(&["--config", &cfg, "--out", data.to_str().unwrap(), "generate", "--videos", "3"]).status.code(), Some(0));
    assert_eq!(tdvit(&["--config", &cfg, "--out", run.to_str().unwrap(), "train", "--seeds", "1"]).status.code(), Some(0));
    let out = tdvit(&["--config", &cfg, "eval", run.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let frames: Vec<_> = json_lines(&out).iter().filter_map(|v| v["frames"].as_u64()).collect();
    assert_eq!(frames, [24, 24]);
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[model]\ndilation = [1, 2]\n").unwrap();
    assert_eq!(tdvit(&["--config", bad.to_str().unwrap(), "trf"]).status.code(), Some(2));
    assert_eq!(tdvit(&["--config", "/nonexistent.toml", "trf"]).status.code(), Some(2));
    assert_eq!(tdvit(&["--variant", "XL", "trf"]).status.code(), Some(2));
    assert_eq!(tdvit(&["gradcheck", "--corrupt", "no_such_op"]).status.code(), Some(2));
    assert_eq!(tdvit(&["eval", "/nonexistent-dir"]).status.code(), Some(2));
}

#[test]
fn flags_override_the_echoed_config() {
    let out = tdvit(&["--seed", "7", "--mode", "refresh", "--toy-scale", "4", "bench", "--frames", "2"]);
    assert_eq!(out.status.code(), Some(0));
    let cfg = &json_lines(&out)[0]["config"];
    assert_eq!(cfg["seed"], 7);
    assert_eq!(cfg["mode"], "refresh");
    assert_eq!(cfg["model"]["toy_scale"], 4);
}
