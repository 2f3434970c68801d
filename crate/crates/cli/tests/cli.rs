use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hulm_core::eval::{BucketScheme, Report, RunEval};
use tempfile::TempDir;

fn hulm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hulm")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = hulm(args);
    assert!(
        out.status.success(),
        "hulm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    hulm(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A generated 40-author corpus shared by the training tests.
fn corpus(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    ok(&["generate", "--authors", "40", "--seed", "3", "--out", s(&data)]);
    data
}

fn pretrain(data: &Path, out: &Path, extra: &[&str]) {
    let train = data.join("train.tsv");
    let dev = data.join("dev.tsv");
    let mut args = vec!["pretrain", "--train", s(&train), "--dev", s(&dev), "--out", s(out)];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn generate_is_deterministic_and_splits_by_ratio() {
    let tmp = TempDir::new().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    ok(&["generate", "--authors", "50", "--seed", "9", "--out", s(&a)]);
    ok(&["generate", "--authors", "50", "--seed", "9", "--out", s(&b)]);
    ok(&["generate", "--authors", "50", "--seed", "10", "--out", s(&c)]);
    for f in ["train.tsv", "dev.tsv", "test.tsv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_ne!(std::fs::read(a.join("train.tsv")).unwrap(), std::fs::read(c.join("train.tsv")).unwrap());

    let authors = |f: &str| {
        let text = std::fs::read_to_string(a.join(f)).unwrap();
        let mut ids: Vec<String> = text.lines().skip(1).map(|l| l.split('\t').next().unwrap().to_string()).collect();
        ids.dedup();
        ids
    };
    let (tr, dv, te) = (authors("train.tsv"), authors("dev.tsv"), authors("test.tsv"));
    assert_eq!((tr.len(), dv.len(), te.len()), (40, 5, 5));
    assert!(tr.iter().all(|x| !dv.contains(x) && !te.contains(x)));

    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "generate");
    assert_eq!(manifest["seed"], 9);
    assert_eq!(manifest["artifacts"]["train.tsv"].as_str().unwrap().len(), 64);
}

#[test]
fn none_regime_smoke_run_reports_finite_perplexity() {
    let tmp = TempDir::new().unwrap();
    let data = corpus(tmp.path());
    let run = tmp.path().join("run");
    let out = ok(&[
        "--json",
        "pretrain",
        "--train",
        s(&data.join("train.tsv")),
        "--dev",
        s(&data.join("dev.tsv")),
        "--regime",
        "none",
        "--epochs",
        "1",
        "--out",
        s(&run),
    ]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    let ppl = v["dev"][0]["dev_ppl"].as_f64().unwrap();
    assert!(ppl.is_finite() && ppl > 1.0, "{ppl}");
    for f in ["loss.csv", "dev.csv", "config.toml", "checkpoints/best.ckpt", "checkpoints/last.ckpt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["regime"]["regime"], "none");
    assert_eq!(manifest["inputs"].as_object().unwrap().len(), 2);
}

#[test]
fn configuration_errors_exit_2_before_writing() {
    let tmp = TempDir::new().unwrap();
    let data = corpus(tmp.path());
    let run = tmp.path().join("gi");
    let train = data.join("train.tsv");
    assert_eq!(
        code(&["pretrain", "--train", s(&train), "--regime", "group_individual", "--out", s(&run)]),
        2
    );
    assert!(!run.exists());

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[regime]\nregime = \"none\"\nbogus = 1\n").unwrap();
    assert_eq!(code(&["pretrain", "--config", s(&bad), "--train", s(&train), "--out", s(&run)]), 2);

    let missing = tmp.path().join("nope.tsv");
    assert_eq!(code(&["pretrain", "--train", s(&missing), "--regime", "none", "--out", s(&run)]), 3);
}

#[test]
fn non_empty_run_directory_needs_force() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    std::fs::create_dir(&out).unwrap();
    std::fs::write(out.join("keep.txt"), "x").unwrap();
    assert_eq!(code(&["generate", "--authors", "10", "--out", s(&out)]), 2);
    assert!(out.join("keep.txt").exists());
    ok(&["generate", "--authors", "10", "--out", s(&out), "--force"]);
    assert!(!out.join("keep.txt").exists());
    assert!(out.join("train.tsv").exists());
}

fn loss_rows(run: &Path) -> Vec<String> {
    std::fs::read_to_string(run.join("loss.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(String::from)
        .collect()
}

#[test]
fn resumed_run_continues_the_uninterrupted_one() {
    let tmp = TempDir::new().unwrap();
    let data = corpus(tmp.path());
    let (full, first, second) = (tmp.path().join("full"), tmp.path().join("first"), tmp.path().join("second"));
    let common = ["--regime", "individual", "--seed", "4", "--batch-size", "4"];
    pretrain(&data, &full, &[&common[..], &["--epochs", "2"]].concat());
    pretrain(&data, &first, &[&common[..], &["--epochs", "1"]].concat());
    let last = first.join("checkpoints/last.ckpt");
    pretrain(&data, &second, &["--resume", s(&last), "--epochs", "2"]);
    let mut joined = loss_rows(&first);
    joined.extend(loss_rows(&second));
    assert_eq!(joined, loss_rows(&full));
}

fn evaluate(ck: &Path, data: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec!["evaluate", "--checkpoint", s(ck), "--data", s(data), "--out", s(out)];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn compare_puts_regimes_side_by_side_and_rejects_mixed_splits() {
    let tmp = TempDir::new().unwrap();
    let data = corpus(tmp.path());
    let p = |n: &str| tmp.path().join(n);
    pretrain(&data, &p("none"), &["--regime", "none", "--epochs", "1"]);
    pretrain(&data, &p("ind"), &["--regime", "individual", "--epochs", "1"]);
    let test = data.join("test.tsv");
    evaluate(&p("none/checkpoints/best.ckpt"), &test, &p("ev-none"), &[]);
    evaluate(&p("ind/checkpoints/best.ckpt"), &test, &p("ev-ind"), &[]);
    ok(&["compare", s(&p("ev-none")), s(&p("ev-ind")), "--out", s(&p("cmp"))]);
    let report: Report = serde_json::from_slice(&std::fs::read(p("cmp/report.json")).unwrap()).unwrap();
    let runs: Vec<&str> = report.rows.iter().map(|r| r.run.as_str()).collect();
    assert_eq!(runs, ["none", "individual"]);
    assert_eq!(report.tasks, ["lm"]);
    assert_eq!(report.metrics, ["perplexity"]);
    assert_eq!(report.significance.len(), 1);
    assert!(report.rows.iter().all(|r| r.cells[0].value.unwrap().is_finite()));
    let text = std::fs::read_to_string(p("cmp/report.txt")).unwrap();
    assert!(text.contains("individual") && text.contains("lm (perplexity)"));

    evaluate(&p("none/checkpoints/best.ckpt"), &data.join("dev.tsv"), &p("ev-dev"), &["--name", "dev"]);
    assert_eq!(code(&["compare", s(&p("ev-none")), s(&p("ev-dev")), "--out", s(&p("cmp2"))]), 2);
    assert!(!p("cmp2").exists());
}

/// Rows whose Pearson r is exactly `r`: predictions and golds are built
/// from orthonormal centered vectors.
fn bucket_rows(bucket: &str, r: f64) -> String {
    let x = [0.5, 0.5, -0.5, -0.5];
    let z = [0.5, -0.5, 0.5, -0.5];
    let q = (1.0 - r * r).sqrt();
    (0..4)
        .map(|i| format!("{bucket}{i}\t{}\t{}\t{bucket}\n", x[i], r * x[i] + q * z[i]))
        .collect()
}

#[test]
fn evaluate_scores_prediction_files_and_reports_med() {
    let tmp = TempDir::new().unwrap();
    let names = BucketScheme::age().names;
    let mut med = Vec::new();
    for (k, rs) in [[0.223, 0.230, 0.512, 0.485, 0.106], [0.394, 0.278, 0.531, 0.530, 0.205]]
        .iter()
        .enumerate()
    {
        let mut text = String::from("#hulm-predictions v1 unit=author task=age\n");
        for (b, r) in names.iter().zip(rs) {
            text.push_str(&bucket_rows(b, *r));
        }
        let file = tmp.path().join(format!("p{k}.tsv"));
        std::fs::write(&file, text).unwrap();
        let out = tmp.path().join(format!("ev{k}"));
        ok(&["evaluate", "--predictions", s(&file), "--name", &format!("m{k}"), "--out", s(&out)]);
        let eval: RunEval = serde_json::from_slice(&std::fs::read(out.join("eval.json")).unwrap()).unwrap();
        assert_eq!(eval.tasks[0].metric.name(), "pearson");
        let report: Report = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
        let table = &report.buckets[0];
        for (score, r) in table.scores.iter().zip(rs) {
            assert!((score.value.unwrap() - r).abs() < 1e-12);
        }
        med.push(table.med.unwrap());
    }
    assert!((med[0] - 0.215).abs() <= 5e-4, "{med:?}");
    assert!((med[1] - 0.181).abs() <= 5e-4, "{med:?}");
}

#[test]
fn finetune_evaluation_matches_standalone_evaluate() {
    let tmp = TempDir::new().unwrap();
    let data = corpus(tmp.path());
    let p = |n: &str| tmp.path().join(n);
    pretrain(&data, &p("gi"), &["--regime", "group_individual", "--attribute", "age", "--epochs", "1"]);
    ok(&[
        "finetune",
        "--checkpoint",
        s(&p("gi/checkpoints/best.ckpt")),
        "--train",
        s(&data.join("train.tsv")),
        "--dev",
        s(&data.join("dev.tsv")),
        "--test",
        s(&data.join("test.tsv")),
        "--attribute",
        "ope",
        "--epochs",
        "2",
        "--max-blocks",
        "2",
        "--out",
        s(&p("ft")),
    ]);
    evaluate(&p("ft/model.ckpt"), &data.join("test.tsv"), &p("ev"), &[]);
    for f in ["eval.json", "predictions/ope.tsv", "report.json"] {
        assert_eq!(std::fs::read(p("ft").join(f)).unwrap(), std::fs::read(p("ev").join(f)).unwrap(), "{f}");
    }
    let log = std::fs::read_to_string(p("ft/finetune.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(p("ft/predictions/dev.tsv").exists());
}

#[test]
fn transfer_requires_a_group_individual_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let data = corpus(tmp.path());
    let p = |n: &str| tmp.path().join(n);
    pretrain(&data, &p("ind"), &["--regime", "individual", "--epochs", "1"]);
    let train = data.join("train.tsv");
    let args = |ck: &Path, out: &Path| -> Vec<String> {
        ["transfer", "--checkpoint", s(ck), "--train", s(&train), "--attribute", "ope", "--epochs", "1", "--out", s(out)]
            .map(String::from)
            .to_vec()
    };
    let a = args(&p("ind/checkpoints/last.ckpt"), &p("t1"));
    assert_eq!(code(&a.iter().map(String::as_str).collect::<Vec<_>>()), 2);
    assert!(!p("t1").exists());

    pretrain(&data, &p("gi"), &["--regime", "group_individual", "--attribute", "age", "--epochs", "1"]);
    let b = args(&p("gi/checkpoints/last.ckpt"), &p("t2"));
    ok(&b.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(p("t2/checkpoints/last.ckpt").exists());
}
