use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn fgaa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fgaa"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn iou_prints_nine_decimals() {
    let o = fgaa(&["iou", "--a", "0,0,1,1,0", "--b", "0,0,1,1,0.7853981634"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "0.707106781");
    let o = fgaa(&["iou", "--a", "-3,-2,4,2,-0.5", "--b", "-3,-2,4,2,-0.5"]);
    assert_eq!(stdout(&o).trim(), "1.000000000");
}

#[test]
fn usage_errors_exit_two_with_prefix() {
    for args in [
        vec!["iou", "--a", "0,0,1,1", "--b", "0,0,1,1,0"],
        vec!["iou", "--a", "0,0,-1,1,0", "--b", "0,0,1,1,0"],
        vec!["frobnicate"],
        vec!["train-toy"],
    ] {
        let o = fgaa(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(
            stderr(&o).starts_with("error[usage]:"),
            "{args:?}: {}",
            stderr(&o)
        );
    }
}

#[test]
fn help_documents_defaults() {
    let o = fgaa(&["rasterize", "--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("[default: 8]") && text.contains("[default: 1024]"));
    let o = fgaa(&["eval", "--help"]);
    assert!(stdout(&o).contains("[default: voc07]"));
}

#[test]
fn train_toy_zero_steps_writes_only_config_echo() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = fgaa(&[
        "train-toy",
        "--out",
        out.to_str().unwrap(),
        "--steps",
        "0",
        "--seed",
        "3",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    let lines: Vec<Value> = metrics
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 1);
    assert_eq!(lines[0]["kind"], "config");
    assert_eq!(lines[0]["seed"], 3);
    assert_eq!(lines[0]["config"]["steps"], 0);
    assert!(lines[0]["config_hash"].is_string() && lines[0]["generator_version"].is_u64());
    assert!(out.join("config.json").exists() && out.join("checkpoint.fgaa").exists());
}

#[test]
fn train_toy_short_run_records_steps_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"channels": 8, "heads": 2, "batch_size": 1, "eval_scenes": 2}"#,
    )
    .unwrap();
    let out = dir.path().join("run");
    let o = fgaa(&[
        "train-toy",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--steps",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("toy AP50"));
    let metrics = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    let kinds: Vec<String> = metrics
        .lines()
        .map(|l| {
            serde_json::from_str::<Value>(l).unwrap()["kind"]
                .as_str()
                .unwrap()
                .to_string()
        })
        .collect();
    assert_eq!(kinds, ["config", "step", "step", "eval"]);
}

#[test]
fn bad_config_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    for (body, key) in [
        (r#"{"image_size": 100}"#, "image_size"),
        (r#"{"momentum": "high"}"#, "momentum"),
        (r#"{"lr_max": 1}"#, "lr_max"),
    ] {
        std::fs::write(&cfg, body).unwrap();
        let o = fgaa(&[
            "train-toy",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.path().join("x").to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(2));
        let e = stderr(&o);
        assert!(e.starts_with("error[config]:") && e.contains(key), "{e}");
    }
}

#[test]
fn params_prints_table_and_record() {
    let o = fgaa(&["params"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("neck total") && text.contains("exact parity"));
    let record: Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();
    assert_eq!(record["channels"], 256);
    assert!(record["neck_params"].as_u64().unwrap() > 3_000_000);
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn eval_rasterize_and_parse_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ann = dir.path().join("ann");
    std::fs::create_dir(&ann).unwrap();
    write(&ann, "img1.txt", "imagesource:GoogleEarth\ngsd:0.2\n10 10 30 10 30 20 10 20 plane 0\n50 50 60 50 60 60 50 60 ship 1\n");
    write(&ann, "img2.txt", "0 0 16 0 16 16 0 16 harbor 0\n");
    let dets = write(
        dir.path(),
        "dets.txt",
        "img1 plane 0.9 10 10 30 10 30 20 10 20\nimg2 harbor 0.8 0 0 16 0 16 16 0 16\nimg2 plane 0.4 40 40 50 40 50 50 40 50\n",
    );
    let o = fgaa(&[
        "eval",
        "--annotations",
        ann.to_str().unwrap(),
        "--detections",
        &dets,
        "--json",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let plane = r["classes"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["name"] == "plane")
        .unwrap();
    assert_eq!(plane["per_threshold"][0]["tp"], 1);
    assert_eq!(plane["per_threshold"][0]["fp"], 1);
    let o = fgaa(&[
        "eval",
        "--annotations",
        ann.to_str().unwrap(),
        "--detections",
        &dets,
        "--mode",
        "all_points",
    ]);
    assert!(stdout(&o).contains("mAP"));

    let o = fgaa(&[
        "rasterize",
        "--annotation",
        ann.join("img2.txt").to_str().unwrap(),
        "--stride",
        "8",
        "--height",
        "32",
        "--width",
        "32",
        "--out",
        dir.path().join("m").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let pgm = std::fs::read_to_string(dir.path().join("m").join("img2_s8.pgm")).unwrap();
    assert!(pgm.starts_with("P2\n4 4\n"));
    assert!(stdout(&o).contains("4 foreground cells"));

    let o = fgaa(&["parse-dota", ann.join("img1.txt").to_str().unwrap()]);
    assert_eq!(stdout(&o).trim(), "2 objects");

    let bad = write(dir.path(), "bad_dets.txt", "img1 plane 0.9 10 10 30\n");
    let o = fgaa(&[
        "eval",
        "--annotations",
        ann.to_str().unwrap(),
        "--detections",
        &bad,
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 1"));
}

#[test]
fn gradcheck_exits_zero() {
    let o = fgaa(&["gradcheck", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o)
        .lines()
        .filter(|l| l.contains("max_rel_err"))
        .all(|l| l.ends_with("ok")));
}
