use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn malm(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_malm"))
        .arg("--run-root")
        .arg(root)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// The single run directory under `root`.
fn run_dir(root: &Path) -> PathBuf {
    let dirs: Vec<PathBuf> = fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.into_iter().next().unwrap()
}

fn resolved(root: &Path) -> String {
    fs::read_to_string(run_dir(root).join("config.resolved")).unwrap()
}

// small enough to train in a few seconds
const SMALL: &[&str] = &[
    "--embed-dim",
    "16",
    "--image-hidden",
    "16",
    "--recipe-hidden",
    "16",
    "--synth-pairs",
    "24",
    "--synth-test-pairs",
    "12",
    "--epochs",
    "1",
    "--freeze-image-encoder-epochs",
    "0",
    "--max-steps",
    "2",
    "--batch-size",
    "4",
];

#[test]
fn no_arguments_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_malm"))
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("Usage"));
    assert!(!tmp.path().join("run").exists());
}

#[test]
fn unknown_flags_and_bad_values_exit_2() {
    let tmp = TempDir::new().unwrap();
    let o = malm(tmp.path(), &["check", "--no-such-key", "1"]);
    assert_eq!(code(&o), 2);
    let o = malm(tmp.path(), &["check", "--quick", "--beta", "-1"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("beta"));
    let file = tmp.path().join("bad.toml");
    fs::write(&file, "not_a_key = 3\n").unwrap();
    let o = malm(
        tmp.path(),
        &["--config", file.to_str().unwrap(), "check", "--quick"],
    );
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("not_a_key"));
}

#[test]
fn flags_override_the_file() {
    let tmp = TempDir::new().unwrap();
    let file = tmp.path().join("c.toml");
    fs::write(&file, "beta = 2.0\nlambda_dist = 0.5\n").unwrap();
    let root = tmp.path().join("runs");
    let o = malm(
        &root,
        &[
            "--config",
            file.to_str().unwrap(),
            "--beta",
            "1.5",
            "generate-data",
            "--synth-pairs",
            "4",
            "--synth-test-pairs",
            "2",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = resolved(&root);
    assert!(text.contains("beta = 1.5  # flag"), "{text}");
    assert!(text.contains("lambda_dist = 0.5  # file"), "{text}");
    assert!(text.contains("seed = 0  # default"), "{text}");
}

#[test]
fn every_key_is_settable_by_flag() {
    let tmp = TempDir::new().unwrap();
    let o = malm(tmp.path(), &["generate-data", "--help"]);
    let help = String::from_utf8_lossy(&o.stdout).into_owned();
    let keys: Vec<String> = help
        .lines()
        .filter_map(|l| l.trim().strip_prefix("--"))
        .filter_map(|l| l.split_whitespace().next().map(str::to_owned))
        .filter(|k| !["config", "preset", "run-root", "help"].contains(&k.as_str()))
        .collect();
    assert!(keys.len() >= 40, "{keys:?}");
    // echo every default back as a flag and expect each marked as such
    let mut args: Vec<String> = vec!["generate-data".into()];
    let defaults = {
        let d = tmp.path().join("defaults");
        assert_eq!(
            code(&malm(
                &d,
                &[
                    "generate-data",
                    "--synth-pairs",
                    "4",
                    "--synth-test-pairs",
                    "2"
                ]
            )),
            0
        );
        resolved(&d)
    };
    for line in defaults.lines() {
        let (key, rest) = line.split_once(" = ").unwrap();
        let value = rest.split("  # ").next().unwrap().trim_matches('"');
        let value = match key {
            "synth_pairs" => "4",
            "synth_test_pairs" => "2",
            _ => value,
        };
        args.push(format!("--{}", key.replace('_', "-")));
        args.push(value.to_owned());
    }
    let root = tmp.path().join("all");
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let o = malm(&root, &refs);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = resolved(&root);
    assert_eq!(text.lines().count(), keys.len(), "{text}");
    assert!(text.lines().all(|l| l.ends_with("# flag")), "{text}");
}

#[test]
fn generated_data_trains_evaluates_and_retrieves() {
    let tmp = TempDir::new().unwrap();
    let gen_root = tmp.path().join("gen");
    let mut args = vec!["generate-data"];
    args.extend_from_slice(SMALL);
    let o = malm(&gen_root, &args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let data = run_dir(&gen_root);
    for split in ["train", "test"] {
        for f in ["dataset.json", "groundtruth.json"] {
            assert!(data.join(split).join(f).is_file(), "{split}/{f}");
        }
    }
    let train_dir = data.join("train");
    let test_dir = data.join("test");

    let train_root = tmp.path().join("train");
    let mut args = vec!["train", "--data", train_dir.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    let o = malm(&train_root, &args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run = run_dir(&train_root);
    let ckpt = run.join("last.ckpt.json");
    for f in [
        "last.ckpt.json",
        "metrics.jsonl",
        "train_report.json",
        "train_report.txt",
    ] {
        assert!(run.join(f).is_file(), "{f}");
    }

    let eval_root = tmp.path().join("eval");
    let o = malm(
        &eval_root,
        &[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            test_dir.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(run_dir(&eval_root).join("eval_report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["retrieval"].as_array().unwrap().len(), 2);
    assert!(report["localization"].is_object());

    let query = tmp.path().join("q.json");
    fs::write(
        &query,
        r#"{"title": "red soup", "ingredients": ["red"], "instructions": ["add red"]}"#,
    )
    .unwrap();
    let retrieve = |root: &Path, k: &str, q: &Path| {
        malm(
            root,
            &[
                "retrieve",
                "--checkpoint",
                ckpt.to_str().unwrap(),
                "--corpus",
                test_dir.to_str().unwrap(),
                "--query-recipe",
                q.to_str().unwrap(),
                "--k",
                k,
            ],
        )
    };
    let results = |root: &Path| -> serde_json::Value {
        serde_json::from_str(&fs::read_to_string(run_dir(root).join("retrieval.json")).unwrap())
            .unwrap()
    };

    let r = tmp.path().join("r3");
    let o = retrieve(&r, "3", &query);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v = results(&r);
    assert_eq!(v["results"].as_array().unwrap().len(), 3);
    let scores: Vec<f64> = v["results"]
        .as_array()
        .unwrap()
        .iter()
        .map(|h| h["score"].as_f64().unwrap())
        .collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));

    let r = tmp.path().join("r0");
    assert_eq!(code(&retrieve(&r, "0", &query)), 0);
    assert!(results(&r)["results"].as_array().unwrap().is_empty());

    let r = tmp.path().join("rbig");
    assert_eq!(code(&retrieve(&r, "500", &query)), 0);
    let v = results(&r);
    assert_eq!(v["results"].as_array().unwrap().len(), 12);
    assert!(v["note"].as_str().unwrap().contains("exceeds"));

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"title": "soup", "ingredients": "red"}"#).unwrap();
    let o = retrieve(&tmp.path().join("rbad"), "3", &bad);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("ingredients"), "{}", stderr(&o));
}

#[test]
fn quick_check_passes() {
    let tmp = TempDir::new().unwrap();
    let o = malm(tmp.path(), &["check", "--quick"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.lines().any(|l| l.starts_with("PASS")));
    assert!(!out.lines().any(|l| l.starts_with("FAIL")));
    assert!(run_dir(tmp.path()).join("check.json").is_file());
}
