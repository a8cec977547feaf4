use std::path::{Path, PathBuf};
use std::process::Command;

use colora::data::Keep;
use colora_cli::{
    cmd_distill, cmd_eval, cmd_params, cmd_synth, cmd_train, merge_equivalence, DistillOptions, ParamsSource,
    SynthTask,
};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_colora"))
}

fn blobs(root: &Path) -> PathBuf {
    let dir = root.join("blobs");
    cmd_synth(SynthTask::Blobs, [12, 4, 4], 8, 0, &dir).unwrap();
    dir
}

fn small_run(data: &Path, out: &Path, extra: &[&str]) -> Vec<String> {
    let mut o = vec![
        format!("data.dir={}", data.display()),
        format!("out.dir={}", out.display()),
        "train.epochs=1".into(),
        "train.batch_size=8".into(),
        "arch.widths=4".into(),
        "arch.head_reduce=4".into(),
        "arch.head_hidden=4".into(),
    ];
    o.extend(extra.iter().map(|s| s.to_string()));
    o
}

#[test]
fn single_epoch_smoke_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = blobs(tmp.path());
    let out = tmp.path().join("run");
    let s = cmd_train(None, &small_run(&data, &out, &[])).unwrap();
    let history = std::fs::read_to_string(out.join("run0/history.csv")).unwrap();
    let rows: Vec<&str> = history.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    for (row, split) in rows.iter().zip(["train", "val", "test"]) {
        assert!(row.starts_with(&format!("1,{split},")), "{row}");
        assert!(row.ends_with(','), "timing column should be blank: {row}");
    }
    // Every file in the output directory is listed in the manifest.
    let manifest = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
    for a in &s.artifacts {
        assert!(out.join(a).is_file());
        assert!(manifest.contains(&format!("  {a}\n")), "{a} missing from manifest");
    }
    for entry in ["params.csv", "aggregate.csv", "curves.svg", "run0/final.ckpt", "run0/best_test.ckpt", "run0/selection.csv"] {
        assert!(s.artifacts.iter().any(|a| a == entry), "{entry}");
    }
}

#[test]
fn identical_configs_give_identical_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = blobs(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    cmd_train(None, &small_run(&data, &a, &["train.epochs=2", "runs=2"])).unwrap();
    cmd_train(None, &small_run(&data, &b, &["train.epochs=2", "runs=2"])).unwrap();
    let sel = std::fs::read_to_string(a.join("run0/selection.csv")).unwrap();
    assert!(sel.contains("\nbest_test,") && sel.contains("\nbest_val,"), "{sel}");
    for f in ["run0/history.csv", "run1/history.csv", "run0/selection.csv", "aggregate.csv", "run1/final.ckpt", "params.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    // The manifest doubles as a config: rerunning from it reproduces the run.
    let c = tmp.path().join("c");
    cmd_train(Some(&a.join("manifest.txt")), &[format!("out.dir={}", c.display())]).unwrap();
    assert_eq!(std::fs::read(a.join("run0/history.csv")).unwrap(), std::fs::read(c.join("run0/history.csv")).unwrap());
}

#[test]
fn exit_codes_and_no_partial_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("never");
    let status = bin()
        .args(["train", &format!("data.dir={}", tmp.path().join("absent").display()), &format!("out.dir={}", out.display())])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    assert!(!out.exists());

    let status = bin().args(["train", "no.such.key=1"]).status().unwrap();
    assert_eq!(status.code(), Some(2));

    let data = blobs(tmp.path());
    let blocker = tmp.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let args = small_run(&data, &blocker.join("sub"), &[]);
    let status = bin().arg("train").args(&args).status().unwrap();
    assert_eq!(status.code(), Some(3));

    let args = small_run(&data, &tmp.path().join("nan"), &["train.lr=1e30", "colora.targets=none"]);
    let status = bin().arg("train").args(&args).status().unwrap();
    assert_eq!(status.code(), Some(1));

    let status = bin().args(["merge-check", "--layers", "20"]).status().unwrap();
    assert_eq!(status.code(), Some(0));
}

#[test]
fn eval_is_pure_and_macro_recall_matches_the_confusion_matrix() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("stripes");
    cmd_synth(SynthTask::StripesTarget, [8, 4, 6], 8, 1, &data).unwrap();
    let run = tmp.path().join("run");
    cmd_train(None, &small_run(&data, &run, &["train.epochs=2"])).unwrap();
    let ckpt = run.join("run0/final.ckpt");
    let (e1, e2) = (tmp.path().join("e1"), tmp.path().join("e2"));
    cmd_eval(&ckpt, &data, "test", &e1, true).unwrap();
    cmd_eval(&ckpt, &data, "test", &e2, true).unwrap();
    for f in ["classwise.csv", "confusion.csv", "roc.svg", "roc/class0.csv", "manifest.txt"] {
        assert_eq!(std::fs::read(e1.join(f)).unwrap(), std::fs::read(e2.join(f)).unwrap(), "{f}");
    }

    let cm: Vec<Vec<f64>> = std::fs::read_to_string(e1.join("confusion.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(cm.len(), 4);
    let recalls: Vec<f64> = cm.iter().enumerate().map(|(i, row)| row[i] / row.iter().sum::<f64>()).collect();
    let want = recalls.iter().sum::<f64>() / 4.0;
    let csv = std::fs::read_to_string(e1.join("classwise.csv")).unwrap();
    let macro_row = csv.lines().find(|l| l.starts_with("macro,")).unwrap();
    let got: f64 = macro_row.split(',').nth(2).unwrap().parse().unwrap();
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");

    assert!(cmd_eval(&ckpt, &blobs(tmp.path()), "test", &tmp.path().join("e3"), false).is_err());
}

#[test]
fn distill_counts_and_identity() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("stripes");
    cmd_synth(SynthTask::StripesTarget, [5, 2, 2], 8, 2, &data).unwrap();
    let run = tmp.path().join("run");
    cmd_train(None, &small_run(&data, &run, &[])).unwrap();
    let ckpt = run.join("run0/final.ckpt");

    let opts = DistillOptions { discard_top: 1, keep: Keep::Count(2), balance: None, plots: true };
    let r = cmd_distill(&ckpt, &data, &opts, &tmp.path().join("d1")).unwrap();
    assert_eq!(r.retained_total(), 8);
    let manifest = std::fs::read_to_string(tmp.path().join("d1/train_manifest.txt")).unwrap();
    assert_eq!(manifest.lines().count(), 8);

    let all = DistillOptions { discard_top: 0, keep: Keep::All, balance: None, plots: false };
    cmd_distill(&ckpt, &data, &all, &tmp.path().join("d2")).unwrap();
    for f in ["train_manifest.txt", "train_labels.cot1", "train_images.cot1", "test_images.cot1"] {
        assert_eq!(std::fs::read(data.join(f)).unwrap(), std::fs::read(tmp.path().join("d2").join(f)).unwrap(), "{f}");
    }

    let short = DistillOptions { discard_top: 4, keep: Keep::Count(2), balance: None, plots: false };
    let err = cmd_distill(&ckpt, &data, &short, &tmp.path().join("d3")).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("class 3: need 6, have 5"), "{err}");
    assert!(!tmp.path().join("d3").exists());
}

#[test]
fn parameter_fractions() {
    let cfg = |o: &[&str]| o.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let colora = cfg(&["colora.targets=all"]);
    let r = cmd_params(ParamsSource::Config { path: None, overrides: &colora }, None).unwrap();
    assert!(r.trainable_fraction() < 0.25, "{}", r.trainable_fraction());

    let plain = cfg(&["colora.targets=none"]);
    let r = cmd_params(ParamsSource::Config { path: None, overrides: &plain }, None).unwrap();
    assert_eq!(r.trainable_fraction(), 1.0);

    let head_only = cfg(&["colora.targets=none", "train.freeze=backbone"]);
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("p/params.csv");
    let r = cmd_params(ParamsSource::Config { path: None, overrides: &head_only }, Some(&csv)).unwrap();
    let head: usize = r.rows.iter().filter(|row| row.name.starts_with("head.")).map(|row| row.total()).sum();
    assert_eq!(r.trainable, head);
    assert_eq!(r.trainable_fraction(), head as f64 / r.total as f64);
    assert!(std::fs::read_to_string(csv).unwrap().lines().count() > r.rows.len());
}

#[test]
fn merge_check_suite() {
    let m = merge_equivalence(100, 0).unwrap();
    assert_eq!(m.cases.len(), 100);
    assert!(m.passed(), "{:?}", m.worst());
}
