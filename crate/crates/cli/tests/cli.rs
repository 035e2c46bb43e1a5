//! End-to-end tests of the `graphmask` binary: exit codes, flag handling,
//! rerun determinism, and the artifact layout of a full (tiny) pipeline run.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_graphmask"));
    cmd.env_remove("GRAPHMASK_OUT");
    cmd
}

fn temp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("graphmask-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A configuration small enough that every stage finishes in milliseconds.
fn tiny_config(dir: &Path, extra: &[(&str, serde_json::Value)]) -> PathBuf {
    let mut cfg = serde_json::json!({
        "count": 120,
        "num_colors": 4,
        "state_dim": 8,
        "model_hidden_dim": 16,
        "model_max_epochs": 3,
        "target_accuracy": 0.1,
        "max_epochs_after_full": 2,
        "nonamortized_steps": 5,
        "ig_steps": 4,
        "ib_epochs": 1,
        "gnnexplainer_steps": 5,
        "seeds": [0],
        "render_count": 2,
        "degradation_resamples": 2,
        "output_dir": dir.join("run"),
    });
    for (k, v) in extra {
        cfg[k] = v.clone();
    }
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn generate_writes_split_files_and_reruns_are_byte_identical() {
    let dir = temp_dir("generate");
    let out_a = dir.join("a");
    let out_b = dir.join("b");
    for out in [&out_a, &out_b] {
        let res = bin()
            .args(["--output-dir", out.to_str().unwrap(), "generate", "--count", "60"])
            .args(["--num-colors", "3"])
            .output()
            .unwrap();
        assert!(res.status.success(), "{}", stderr(&res));
        assert!(stdout(&res).contains("50 train / 5 validation / 5 test"));
    }
    for f in ["train.jsonl", "validation.jsonl", "test.jsonl"] {
        let a = std::fs::read(out_a.join("data").join(f)).unwrap();
        let b = std::fs::read(out_b.join("data").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between identical runs");
    }
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_a.join("data/dataset.json")).unwrap())
            .unwrap();
    assert_eq!(meta["provenance"]["config"]["count"], 60);
    assert_eq!(meta["provenance"]["seeds"], serde_json::json!([0]));
}

#[test]
fn flags_override_the_config_file() {
    let dir = temp_dir("flag-override");
    let cfg = tiny_config(&dir, &[("count", serde_json::json!(120))]);
    let res = bin()
        .args(["--config", cfg.to_str().unwrap(), "generate", "--count", "60"])
        .output()
        .unwrap();
    assert!(res.status.success(), "{}", stderr(&res));
    // 60 total with the default 10:1:1 split, not the file's 120.
    assert!(stdout(&res).contains("50 train / 5 validation / 5 test"), "{}", stdout(&res));
}

#[test]
fn unknown_method_and_config_errors_exit_2() {
    let dir = temp_dir("exit2");
    let cfg = tiny_config(&dir, &[]);

    let res = bin()
        .args(["--config", cfg.to_str().unwrap(), "baseline", "--method", "bogus"])
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr(&res).contains("expected one of"), "{}", stderr(&res));

    // Misrouted methods are configuration errors with a pointer to the
    // right subcommand.
    let res = bin()
        .args(["--config", cfg.to_str().unwrap(), "explain", "--method", "erasure"])
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr(&res).contains("graphmask baseline --method erasure"));

    // Unreadable config file.
    let res = bin()
        .args(["--config", dir.join("missing.json").to_str().unwrap(), "generate"])
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(2), "{}", stderr(&res));
}

#[test]
fn missing_prerequisites_name_the_command_to_run_first() {
    let dir = temp_dir("missing-prereq");
    let cfg = tiny_config(&dir, &[]);

    // No dataset yet.
    let res = bin()
        .args(["--config", cfg.to_str().unwrap(), "train-model"])
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr(&res).contains("graphmask generate"), "{}", stderr(&res));

    // Dataset but no model checkpoint.
    let res = bin().args(["--config", cfg.to_str().unwrap(), "generate"]).output().unwrap();
    assert!(res.status.success());
    let res = bin()
        .args(["--config", cfg.to_str().unwrap(), "explain"])
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr(&res).contains("train-model"), "{}", stderr(&res));
}

#[test]
fn compare_requires_at_least_two_files() {
    let dir = temp_dir("compare-arity");
    let cfg = tiny_config(&dir, &[]);
    let res = bin()
        .args(["--config", cfg.to_str().unwrap(), "compare", "only-one.json"])
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(2), "{}", stderr(&res));
}

#[test]
fn pipeline_produces_the_full_artifact_layout() {
    let dir = temp_dir("pipeline");
    let cfg = tiny_config(&dir, &[]);
    let run = dir.join("run");

    let res = bin().args(["--config", cfg.to_str().unwrap(), "pipeline"]).output().unwrap();
    assert!(res.status.success(), "{}", stderr(&res));
    let text = stdout(&res);
    assert!(text.contains("pipeline complete"), "{text}");
    assert!(
        text.contains("stability section omitted: single seed"),
        "single-seed run must say why stability is missing: {text}"
    );

    // One attribution file per method.
    for m in ["graphmask", "nonamortized", "erasure", "gnnexplainer", "ig", "ib"] {
        assert!(run.join(format!("attributions/{m}.json")).exists(), "missing {m} attributions");
    }

    // The table has one block of rows per method.
    let table = std::fs::read_to_string(run.join("reports/table1.csv")).unwrap();
    assert!(table.starts_with("method,metric,value\n"));
    for m in ["graphmask", "nonamortized", "erasure", "gnnexplainer", "ig", "ib"] {
        assert!(table.contains(&format!("{m},f1,")), "table lacks {m}: {table}");
    }
    assert!(run.join("reports/degradation.csv").exists());

    // The report embeds config, checkpoint hashes, seeds, notices, timings.
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("reports/report.json")).unwrap())
            .unwrap();
    assert_eq!(report["provenance"]["config"]["count"], 120);
    let ckpts = report["provenance"]["checkpoints"].as_object().unwrap();
    for name in ["model", "classifier-s0", "ib_readout"] {
        let hash = ckpts[name].as_str().unwrap();
        assert_eq!(hash.len(), 64, "checkpoint hash for {name} should be hex sha-256");
    }
    assert_eq!(report["provenance"]["seeds"], serde_json::json!([0]));
    assert!(report["stability"].is_null());
    assert!(report["notices"].as_array().unwrap().iter().any(|n| n
        .as_str()
        .unwrap()
        .contains("stability section omitted")));
    for stage in ["generate", "train-model", "train-graphmask", "attributions", "evaluate", "render"]
    {
        assert!(
            report["stage_seconds"][stage].is_number(),
            "missing timing for stage {stage}"
        );
    }

    // Renders: render_count per method, with both edge classes present.
    let renders: Vec<_> = std::fs::read_dir(run.join("renders"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(renders.len(), 6 * 2, "{renders:?}");
    let svg_name = renders.iter().find(|n| n.starts_with("erasure")).unwrap();
    let svg = std::fs::read_to_string(run.join("renders").join(svg_name)).unwrap();
    assert!(svg.contains(r#"class="superfluous""#));
    assert!(svg.contains("query x = color"));

    // evaluate --methods filters the table to exactly those rows.
    let res = bin()
        .args(["--config", cfg.to_str().unwrap(), "evaluate", "--methods", "graphmask,erasure"])
        .output()
        .unwrap();
    assert!(res.status.success(), "{}", stderr(&res));
    let table = std::fs::read_to_string(run.join("reports/table1.csv")).unwrap();
    assert!(table.contains("graphmask,f1,") && table.contains("erasure,f1,"));
    for absent in ["nonamortized", "gnnexplainer", "ig,", "ib,"] {
        assert!(!table.contains(absent), "filtered table still has {absent}: {table}");
    }

    // compare two saved attribution files.
    let a = run.join("attributions/graphmask.json");
    let b = run.join("attributions/erasure.json");
    let res = bin()
        .args(["--config", cfg.to_str().unwrap(), "compare"])
        .args([a.to_str().unwrap(), b.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(res.status.success(), "{}", stderr(&res));
    assert!(stdout(&res).contains("pairwise decision agreement"), "{}", stdout(&res));

    // render: out-of-range id errors with the available range…
    let res = bin()
        .args(["--config", cfg.to_str().unwrap(), "render", "--ids", "42"])
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr(&res).contains("available ids: 0..=9"), "{}", stderr(&res));

    // …and a valid rerun reproduces the same bytes.
    let out1 = dir.join("r1");
    let out2 = dir.join("r2");
    for out in [&out1, &out2] {
        let res = bin()
            .args(["--config", cfg.to_str().unwrap(), "render", "--ids", "0..2"])
            .args(["--out-dir", out.to_str().unwrap()])
            .output()
            .unwrap();
        assert!(res.status.success(), "{}", stderr(&res));
    }
    for f in ["graphmask-ex0000.svg", "graphmask-ex0001.svg", "graphmask-ex0002.svg"] {
        let x = std::fs::read(out1.join(f)).unwrap();
        let y = std::fs::read(out2.join(f)).unwrap();
        assert_eq!(x, y, "render {f} not deterministic");
    }
}

#[test]
fn method_filter_skips_gate_training_and_stability() {
    let dir = temp_dir("filtered");
    let cfg = tiny_config(&dir, &[]);
    let run = dir.join("run");

    let res = bin()
        .args(["--config", cfg.to_str().unwrap(), "pipeline", "--methods", "erasure,ig"])
        .output()
        .unwrap();
    assert!(res.status.success(), "{}", stderr(&res));

    assert!(run.join("attributions/erasure.json").exists());
    assert!(run.join("attributions/ig.json").exists());
    assert!(!run.join("attributions/graphmask.json").exists());
    assert!(!run.join("checkpoints/gate-classifier.json").exists());

    let table = std::fs::read_to_string(run.join("reports/table1.csv")).unwrap();
    assert!(table.contains("erasure,f1,") && table.contains("ig,f1,"));
    assert!(!table.contains("graphmask"));

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("reports/report.json")).unwrap())
            .unwrap();
    assert!(report["notices"]
        .as_array()
        .unwrap()
        .iter()
        .any(|n| n.as_str().unwrap().contains("graphmask is not among the selected methods")));
}

#[test]
fn environment_variable_sets_the_output_root_but_flags_win() {
    let dir = temp_dir("env-root");
    let via_env = dir.join("via-env");
    let via_flag = dir.join("via-flag");

    let res = bin()
        .env("GRAPHMASK_OUT", &via_env)
        .args(["generate", "--count", "24", "--num-colors", "3"])
        .output()
        .unwrap();
    assert!(res.status.success(), "{}", stderr(&res));
    assert!(via_env.join("data/train.jsonl").exists());

    let res = bin()
        .env("GRAPHMASK_OUT", dir.join("ignored"))
        .args(["--output-dir", via_flag.to_str().unwrap()])
        .args(["generate", "--count", "24", "--num-colors", "3"])
        .output()
        .unwrap();
    assert!(res.status.success(), "{}", stderr(&res));
    assert!(via_flag.join("data/train.jsonl").exists());
    assert!(!dir.join("ignored").exists());
}
