use std::path::Path;
use std::process::{Command, Output};

use evoprune_cli::artifacts::{read_pareto_csv, read_runlog};
use evoprune_cli::data::write_idx;

fn evoprune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evoprune"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn search(dir: &Path, generations: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "search",
        "--seed",
        "4",
        "--population",
        "6",
        "--generations",
        generations,
        "--initial",
        "8",
        "--recon-samples",
        "64",
        "--eval-samples",
        "256",
        "--output",
        dir.to_str().unwrap(),
    ];
    args.extend(extra);
    evoprune(&args)
}

#[test]
fn flops_of_builtins_and_genomes() {
    let out = evoprune(&["flops", "toy-cnn"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("124544 "));
    let out = evoprune(&["flops", "toy-cnn", "--genome", "8,16,16,32"]);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("124544 "));
    let small = evoprune(&["flops", "toy-cnn", "--genome", "4,8,8,16"]);
    let n: u64 = String::from_utf8_lossy(&small.stdout).split(' ').next().unwrap().parse().unwrap();
    assert!(n < 124544);
    assert_eq!(evoprune(&["flops", "no-such-model"]).status.code(), Some(2));
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("broken.json");
    std::fs::write(&spec, "{\"layers\": [").unwrap();
    assert_eq!(evoprune(&["flops", spec.to_str().unwrap()]).status.code(), Some(3));
    assert_eq!(evoprune(&["flops", "toy-cnn", "--genome", "99,16,16,32"]).status.code(), Some(2));
}

#[test]
fn search_export_report_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let out = search(&run, "2", &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["pareto.csv", "runlog.jsonl", "pareto.svg", "run_config.json", "model.json", "base.eapw", "space.json"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let front = read_pareto_csv(run.join("pareto.csv")).unwrap();
    let log = read_runlog(run.join("runlog.jsonl")).unwrap();
    assert_eq!(log.len(), 8 + 2 * 6);
    assert!(log.iter().all(|r| r.eval_ms.is_none()));
    assert!(!front.is_empty());

    for member in [0, front.len() - 1] {
        let dest = tmp.path().join(format!("export{member}"));
        let out = evoprune(&[
            "export",
            "--run",
            run.to_str().unwrap(),
            "--member",
            &member.to_string(),
            "--out",
            dest.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(report["reproduced_accuracy"], report["logged_accuracy"]);
        assert_eq!(report["logged_accuracy"].as_f64().unwrap(), front[member].proxy_accuracy);
        assert!(dest.join("model.json").is_file() && dest.join("weights.eapw").is_file());
    }

    let out = evoprune(&["report", "--run", run.to_str().unwrap()]);
    assert!(out.status.success());
    let table = std::fs::read_to_string(run.join("retention.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 4 * front.len());
    assert!(run.join("retention.svg").is_file());

    let missing = evoprune(&[
        "export",
        "--run",
        run.to_str().unwrap(),
        "--member",
        "999",
        "--out",
        tmp.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn timings_fill_eval_ms() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(search(tmp.path(), "0", &["--timings"]).status.success());
    let log = read_runlog(tmp.path().join("runlog.jsonl")).unwrap();
    assert!(log.iter().all(|r| r.eval_ms.is_some_and(|ms| ms >= 0.0)));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    // clap usage error
    assert_eq!(evoprune(&["search"]).status.code(), Some(2));

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"populaton": 4}"#).unwrap();
    let out = evoprune(&["search", "--seed", "1", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    assert_eq!(search(&tmp.path().join("r"), "2", &["--mutation-prob", "1.5"]).status.code(), Some(2));

    let images = tmp.path().join("images.idx");
    let labels = tmp.path().join("labels.idx");
    let mut corrupt = write_idx(&[4, 3, 16, 16], &vec![0.0; 4 * 3 * 256], 0x08);
    corrupt.truncate(100);
    std::fs::write(&images, corrupt).unwrap();
    std::fs::write(&labels, write_idx(&[4], &[0.0, 1.0, 2.0, 3.0], 0x08)).unwrap();
    let cfg = tmp.path().join("idx.json");
    std::fs::write(
        &cfg,
        format!(
            r#"{{"data": {{"format": "idx", "images": {:?}, "labels": {:?}}}}}"#,
            images.to_str().unwrap(),
            labels.to_str().unwrap()
        ),
    )
    .unwrap();
    let out = evoprune(&["search", "--seed", "1", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("offset"), "{}", String::from_utf8_lossy(&out.stderr));

    std::fs::remove_file(&images).unwrap();
    assert_eq!(
        evoprune(&["search", "--seed", "1", "--config", cfg.to_str().unwrap()]).status.code(),
        Some(3)
    );
}
