use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use kse::analysis::{load_reports, save_reports};
use kse::io::{load_model, save_model};
use kse::toy::{toy_dataset, toy_model};

fn kse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kse")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn help_lists_defaults() {
    let out = stdout(&kse(&["compress", "--help"]));
    for needle in ["--granularity", "[default: 4]", "--shift", "[default: 0]", "--alpha", "[default: 1]", "--k-neighbors", "[default: 5]", "--quantile", "[default: 0.005]", "--workers", "--seed"] {
        assert!(out.contains(needle), "{needle} missing from help:\n{out}");
    }
}

#[test]
fn analyze_compress_report_eval_finetune() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("toy");
    save_model(&toy_model(5), &model).unwrap();
    let data = dir.path().join("data");
    toy_dataset(6, 9).save(&data).unwrap();

    let r1 = dir.path().join("r1.jsonl");
    let r2 = dir.path().join("r2.jsonl");
    assert!(kse(&["analyze", s(&model), "-o", s(&r1)]).status.success());
    assert!(kse(&["analyze", s(&model), "-o", s(&r2), "--workers", "1"]).status.success());
    assert_eq!(fs::read(&r1).unwrap(), fs::read(&r2).unwrap());

    let comp = dir.path().join("comp");
    let out = kse(&["compress", s(&model), "-r", s(&r1), "-o", s(&comp), "-G", "4", "-T", "0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(load_model(&comp).unwrap().has_compressed_payloads());

    let out = kse(&["eval", s(&comp), "-d", s(&data), "--reference", s(&model)]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("accuracy") && text.contains("agreement"), "{text}");

    let tuned = dir.path().join("tuned");
    let out = kse(&["finetune", s(&comp), "-d", s(&data), "-o", s(&tuned), "--epochs", "2", "--batch-size", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout(&out).lines().filter(|l| l.starts_with("epoch")).count(), 2);

    let out = kse(&["report", s(&model), s(&tuned), "--json"]);
    assert!(out.status.success());
    assert_eq!(stdout(&out).lines().count(), 5);
}

#[test]
fn identity_reports_give_unit_acceleration() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("toy");
    save_model(&toy_model(6), &model).unwrap();
    let reports = dir.path().join("r.jsonl");
    assert!(kse(&["analyze", s(&model), "-o", s(&reports)]).status.success());
    let mut r = load_reports(&reports).unwrap();
    for rep in &mut r {
        rep.indicator.iter_mut().for_each(|v| *v = 1.0);
    }
    save_reports(&r, &reports).unwrap();
    let comp = dir.path().join("id");
    assert!(kse(&["compress", s(&model), "-r", s(&reports), "-o", s(&comp)]).status.success());
    let text = stdout(&kse(&["report", s(&model), s(&comp)]));
    let rows: Vec<&str> = text.lines().filter(|l| l.starts_with(|c: char| c.is_ascii_digit())).collect();
    assert_eq!(rows.len(), 4, "{text}");
    for row in rows {
        assert!(row.contains("(1.000x)"), "{row}");
    }
}

#[test]
fn distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("toy");
    save_model(&toy_model(7), &model).unwrap();
    let comp = dir.path().join("c");

    let missing = kse(&["analyze", s(&dir.path().join("absent"))]);
    let bad_flag = kse(&["analyze", s(&model), "--bogus"]);
    let bad_g = kse(&["compress", s(&model), "-o", s(&comp), "-G", "1"]);
    assert!(kse(&["compress", s(&model), "-o", s(&comp)]).status.success());
    let stage = kse(&["analyze", s(&comp)]);
    fs::write(dir.path().join("junk.manifest.json"), "{ not json").unwrap();
    let junk = kse(&["analyze", s(&dir.path().join("junk"))]);

    let codes: Vec<i32> = [&missing, &bad_flag, &bad_g, &stage, &junk].iter().map(|o| o.status.code().unwrap()).collect();
    assert!(codes.iter().all(|&c| c != 0), "{codes:?}");
    let mut unique = codes.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), codes.len(), "{codes:?}");
    for o in [&missing, &bad_g, &stage, &junk] {
        assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    }
}
