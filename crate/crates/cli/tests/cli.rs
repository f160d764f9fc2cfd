use std::path::Path;
use std::process::{Command, Output};

fn mmhlab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmhlab"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    )
}

fn write_small_dup_config(dir: &Path) {
    let out = mmhlab(dir, &["preset", "duplicated-class"]);
    assert_eq!(out.status.code(), Some(0));
    let mut cfg: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    cfg["train"]["steps"] = 200.into();
    cfg["train"]["hidden"] = serde_json::json!([16, 16]);
    cfg["metrics"]["n"] = 2.into();
    cfg["metrics"]["steps"] = 8.into();
    let s = &mut cfg["setup"];
    s["rows_per_class"] = 10.into();
    s["eval_repeats"] = 2.into();
    s["mitigation_k"] = serde_json::json!([1]);
    s["mitigation_samples"] = 2.into();
    s["mitigation_draws"] = 1.into();
    s["optimize_steps"] = 1.into();
    std::fs::write(dir.join("dup.json"), serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
}

#[test]
fn help_lists_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let out = mmhlab(dir.path(), &["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let help = text(&out);
    for cmd in [
        "synth",
        "train",
        "sample",
        "lid",
        "detect",
        "metrics",
        "mitigate",
        "optimize-cond",
        "verify",
        "run",
        "report",
    ] {
        assert!(help.contains(cmd), "{cmd}");
    }
    for flag in ["--config", "--seed", "--out", "--threads"] {
        assert!(help.contains(flag), "{flag}");
    }
}

#[test]
fn verify_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = mmhlab(dir.path(), &["--out", "v", "verify", "duplication", "conditioning"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    assert!(dir.path().join("v/verify_duplication.csv").exists());
    assert!(dir.path().join("v/verify_conditioning.csv").exists());

    let out = mmhlab(dir.path(), &["verify", "bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out).contains("unknown suite"));
}

#[test]
fn missing_inputs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = mmhlab(dir.path(), &["train", "--data", "nowhere.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out).contains("nowhere.csv"));
    let out = mmhlab(dir.path(), &["--config", "absent.json", "run"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out).contains("absent.json"));
    let out = mmhlab(dir.path(), &["preset", "nope"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unconditional_pipeline_by_hand() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = mmhlab(d, &["preset", "von-mises"]);
    let cfg: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    std::fs::write(
        d.join("spec.json"),
        serde_json::to_string(&cfg["setup"]["spec"]).unwrap(),
    )
    .unwrap();

    let run = |args: &[&str]| {
        let o = mmhlab(d, args);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", text(&o));
    };
    run(&["--out", "o", "--seed", "4", "synth", "--spec", "spec.json", "-n", "200"]);
    let first = std::fs::read(d.join("o/synth.csv")).unwrap();
    run(&["--out", "o", "--seed", "4", "synth", "--spec", "spec.json", "-n", "200"]);
    assert_eq!(std::fs::read(d.join("o/synth.csv")).unwrap(), first);

    run(&["--out", "o", "train", "--data", "o/synth.csv", "--steps", "100"]);
    run(&[
        "--out",
        "o",
        "sample",
        "--model",
        "o/model.ckpt",
        "-n",
        "8",
        "--steps",
        "10",
    ]);
    run(&[
        "--out",
        "o",
        "lid",
        "--model",
        "o/model.ckpt",
        "--points",
        "o/samples.csv",
        "--estimator",
        "nb",
    ]);
    run(&[
        "--out",
        "o",
        "lid",
        "--points",
        "o/samples.csv",
        "--estimator",
        "lpca",
        "--data",
        "o/synth.csv",
    ]);
    run(&[
        "--out",
        "o",
        "detect",
        "--model",
        "o/model.ckpt",
        "--points",
        "o/samples.csv",
        "--train",
        "o/synth.csv",
    ]);
    let detect = std::fs::read_to_string(d.join("o/detect.csv")).unwrap();
    assert!(detect.starts_with("point_id,method,score,label,mem_type,config_hash"));
    assert_eq!(detect.lines().count(), 9);

    let o = mmhlab(d, &["lid", "--points", "o/samples.csv", "--estimator", "flipd"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("--model"));
}

#[test]
fn conditional_commands_and_full_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_small_dup_config(d);
    // An undertrained model fails its batteries: exit 1, not an error.
    let o = mmhlab(d, &["--config", "dup.json", "--out", "r", "run"]);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
    assert!(d.join("r/report.json").exists());
    let o = mmhlab(d, &["report", "r"]);
    assert!(text(&o).contains("stage mitigation"), "{}", text(&o));

    let prompt = vec!["0.3"; 32].join(",");
    for args in [
        vec!["metrics", "--metric", "a-flipd"],
        vec!["mitigate", "--components", "8", "-k", "2"],
        vec!["mitigate", "--components", "8", "--strategy", "random"],
        vec!["optimize-cond"],
    ] {
        let mut full = vec![
            "--config",
            "dup.json",
            "--out",
            "c",
            args[0],
            "--model",
            "r/model.ckpt",
            "--prompt",
            &prompt,
        ];
        full.extend(&args[1..]);
        let o = mmhlab(d, &full);
        assert_eq!(o.status.code(), Some(0), "{full:?}: {}", text(&o));
    }
    let o = mmhlab(
        d,
        &[
            "--config",
            "dup.json",
            "metrics",
            "--model",
            "r/model.ckpt",
            "--prompt",
            "null",
            "--metric",
            "a-cfg",
        ],
    );
    assert!(text(&o).contains("a_cfg = 0 "), "{}", text(&o));
    let o = mmhlab(d, &["metrics", "--model", "r/model.ckpt", "--prompt", "1,2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("dimension mismatch"));
}
