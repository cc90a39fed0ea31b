use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use atamlab::commands::{cmd_compare, cmd_eval, cmd_plot, cmd_synth, cmd_train, init_model, train_model, ReportFile};
use atamlab::config::LoadedConfig;
use atamlab::plot::{roc_svg, Curve};
use atamlab::ExitKind;
use atamlab_core::data::load_csv_dataset;
use atamlab_core::eval::{evaluate_model, verification_from_scores};
use tempfile::TempDir;

fn tiny(loss: &str, extra: &str) -> String {
    format!(
        r#"{{
  "data": {{ "synth": {{ "classes": 6, "attr_dim": 4, "input_dim": 8, "per_class": 20, "sigma": 0.3 }}, "seed": 3 }},
  "model": {{ "hidden": [16], "embedding_dim": 8, "margin_hidden": [8] }},
  "loss": {loss},
  "train": {{ "epochs": 4, "batch_size": 16 }},
  "eval": {{ "far_levels": [0.01, 0.001], "max_rank": 5, "num_pairs": 200 }}{extra}
}}"#
    )
}

const SOFTMAX: &str = r#"{"kind": "softmax"}"#;
const ATAM: &str = r#"{"kind": "atam"}"#;

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atamlab")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn synth_files_round_trip_and_repeat() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "c.json", &tiny(SOFTMAX, ""));
    let files = cmd_synth(&cfg, Some(&dir.path().join("a"))).unwrap();
    assert_eq!(files.len(), 2);
    cmd_synth(&cfg, Some(&dir.path().join("b"))).unwrap();
    for name in ["features.csv", "attributes.csv"] {
        let a = std::fs::read(dir.path().join("a").join(name)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
    let original = LoadedConfig::load(&cfg).unwrap().dataset().unwrap();
    let loaded = load_csv_dataset(&files[0], Some(files[1].as_path())).unwrap();
    assert_eq!(loaded.features, original.features);
    assert_eq!(loaded.labels, original.labels);
    assert_eq!(loaded.attributes, original.attributes);
}

#[test]
fn csv_config_reproduces_synth_run() {
    let dir = TempDir::new().unwrap();
    let synth_cfg = write(dir.path(), "s.json", &tiny(ATAM, ""));
    cmd_synth(&synth_cfg, Some(&dir.path().join("data"))).unwrap();
    let csv = tiny(ATAM, "").replace(
        r#""synth": { "classes": 6, "attr_dim": 4, "input_dim": 8, "per_class": 20, "sigma": 0.3 }"#,
        r#""csv": { "features": "data/features.csv", "attributes": "data/attributes.csv" }"#,
    );
    let csv_cfg = write(dir.path(), "c.json", &csv);
    let a = LoadedConfig::load(&synth_cfg).unwrap().split().unwrap();
    let b = LoadedConfig::load(&csv_cfg).unwrap().split().unwrap();
    assert_eq!(a.0.features, b.0.features);
    assert_eq!(a.1.labels, b.1.labels);
}

#[test]
fn invalid_config_exits_with_validation_code() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "c.json", &tiny(SOFTMAX, "").replace("\"classes\": 6", "\"classes\": 1"));
    let out = bin(&["synth", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("classes"), "{}", stderr(&out));

    let typo = write(dir.path(), "t.json", &tiny(SOFTMAX, ", \"sed\": 1"));
    let out = bin(&["train", "--config", typo.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("sed"), "{}", stderr(&out));
}

#[test]
fn usage_errors_exit_with_validation_code() {
    assert_eq!(bin(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(bin(&["train"]).status.code(), Some(1));
    assert_eq!(bin(&["--help"]).status.code(), Some(0));
}

#[test]
fn train_writes_artifacts_and_both_losses_run() {
    let dir = TempDir::new().unwrap();
    for (name, loss) in [("softmax", SOFTMAX), ("atam", ATAM)] {
        let cfg = write(dir.path(), &format!("{name}.json"), &tiny(loss, ""));
        let out = bin(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().join(name).to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        let history = std::fs::read_to_string(dir.path().join(name).join("history.csv")).unwrap();
        assert!(history.starts_with("epoch,loss,lr,seconds\n"));
        assert_eq!(history.lines().count(), 5);
        assert!(dir.path().join(name).join("checkpoint.json").exists());
    }
}

#[test]
fn atam_without_attribute_file_is_rejected() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "features.csv", "id,label,x0,x1\na,0,0.1,0.2\nb,1,0.3,0.4\n");
    let text = tiny(ATAM, "").replace(
        r#""synth": { "classes": 6, "attr_dim": 4, "input_dim": 8, "per_class": 20, "sigma": 0.3 }"#,
        r#""csv": { "features": "features.csv", "attributes": "missing.csv" }"#,
    );
    let cfg = write(dir.path(), "c.json", &text);
    let err = cmd_train(&cfg, Some(dir.path())).unwrap_err();
    assert!(err.to_string().contains("ATAM requires attributes"), "{err}");
    let out = bin(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("ATAM requires attributes"));
}

#[test]
fn divergence_is_a_runtime_failure() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "c.json", &tiny(SOFTMAX, "").replace("\"epochs\": 4", "\"epochs\": 4, \"lr\": 1e200"));
    let out = bin(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let msg = stderr(&out);
    assert!(msg.contains("epoch") && msg.contains("batch"), "{msg}");
}

#[test]
fn eval_report_has_requested_levels() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "c.json", &tiny(ATAM, ""));
    let trained = cmd_train(&cfg, Some(dir.path())).unwrap();
    let report = cmd_eval(&cfg, &trained.checkpoint, Some(dir.path())).unwrap();
    assert!(report.tar_at_far.contains_key("0.01"));
    assert!(report.tar_at_far.contains_key("0.001"));
    assert_eq!(report.loss, "atam");
    let on_disk: ReportFile =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(on_disk, report);
    let roc = std::fs::read_to_string(dir.path().join("roc.csv")).unwrap();
    assert_eq!(roc.lines().count(), report.report.verification.roc.len() + 1);
    assert!(!report.report.warnings.iter().any(|w| w.contains("different config")));
}

#[test]
fn trained_model_beats_untrained_on_its_train_split() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "c.json", &tiny(SOFTMAX, "").replace("\"epochs\": 4", "\"epochs\": 20"));
    let loaded = LoadedConfig::load(&cfg).unwrap();
    let (train, _) = loaded.split().unwrap();
    let untrained = init_model(&loaded.config, &train, 0).unwrap();
    let (trained, _) = train_model(&loaded.config, &train, 0).unwrap();
    let before = evaluate_model(&untrained, &train, &train, &loaded.config.eval).unwrap();
    let after = evaluate_model(&trained, &train, &train, &loaded.config.eval).unwrap();
    assert!(after.rank1 >= before.rank1, "{} < {}", after.rank1, before.rank1);
}

#[test]
fn eval_rejects_corrupt_and_mismatched_checkpoints() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "c.json", &tiny(SOFTMAX, ""));
    let bad = write(dir.path(), "bad.json", "{\"format\": 7");
    let out = bin(&["eval", "--config", cfg.to_str().unwrap(), "--checkpoint", bad.to_str().unwrap()]);
    assert_ne!(out.status.code(), Some(0));
    assert!(stderr(&out).contains("unreadable checkpoint"), "{}", stderr(&out));

    let wide = write(dir.path(), "w.json", &tiny(SOFTMAX, "").replace("\"embedding_dim\": 8", "\"embedding_dim\": 5"));
    let trained = cmd_train(&wide, Some(&dir.path().join("w"))).unwrap();
    let err = cmd_eval(&cfg, &trained.checkpoint, Some(dir.path())).unwrap_err();
    assert_eq!(err.kind, ExitKind::Validation);
    let msg = err.to_string();
    assert!(msg.contains("embedding_dim") && msg.contains('5') && msg.contains('8'), "{msg}");
}

#[test]
fn eval_warns_on_foreign_checkpoint() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "c.json", &tiny(SOFTMAX, ""));
    let other = write(dir.path(), "o.json", &tiny(SOFTMAX, ", \"seed\": 9"));
    let trained = cmd_train(&other, Some(&dir.path().join("o"))).unwrap();
    let report = cmd_eval(&cfg, &trained.checkpoint, Some(dir.path())).unwrap();
    let foreign = report.report.warnings.iter().filter(|w| w.contains("different config")).count();
    assert_eq!(foreign, 1, "{:?}", report.report.warnings);
}

#[test]
fn compare_matches_individual_evals() {
    let dir = TempDir::new().unwrap();
    let configs = dir.path().join("configs");
    std::fs::create_dir(&configs).unwrap();
    write(&configs, "a_softmax.json", &tiny(SOFTMAX, ", \"seeds\": [0, 1, 2, 3, 4]"));
    write(&configs, "b_atam.json", &tiny(ATAM, ", \"seeds\": [0, 1, 2, 3, 4]"));
    write(&configs, "notes.txt", "ignored");
    let out = dir.path().join("out");
    let table = cmd_compare(&configs, Some(&out)).unwrap();
    assert_eq!(table.rows.len(), 2);
    assert_eq!(table.rows[0].loss, "softmax");
    assert_eq!(table.rows[1].loss, "atam");
    for row in &table.rows {
        assert_eq!(row.accuracy.count, 5);
        assert!(row.accuracy.std.is_some());
        assert!(row.map.std.is_some());
        assert_eq!(row.tar_at_far.len(), 2);
    }
    let csv = std::fs::read_to_string(out.join("compare.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(std::fs::read_to_string(out.join("compare.txt")).unwrap().contains("±"));

    // Re-evaluating a stored checkpoint with a single-seed config reproduces the row's per-seed report.
    let single = write(dir.path(), "single.json", &tiny(ATAM, ", \"seed\": 2"));
    let ckpt = out.join("b_atam").join("seed_2").join("checkpoint.json");
    let again = cmd_eval(&single, &ckpt, Some(&dir.path().join("again"))).unwrap();
    let stored = &table.rows[1].reports[2];
    assert_eq!(again.report.verification, stored.report.verification);
    assert_eq!(again.report.rank1, stored.report.rank1);
    assert_eq!(again.report.map, stored.report.map);
    assert_eq!(again.report.spearman, stored.report.spearman);

    let accs: Vec<f64> = table.rows[1].reports.iter().map(|r| r.report.verification.best_accuracy).collect();
    let mean = accs.iter().sum::<f64>() / 5.0;
    assert!((table.rows[1].accuracy.mean - mean).abs() < 1e-15);
}

#[test]
fn compare_is_independent_of_thread_count() {
    let dir = TempDir::new().unwrap();
    let configs = dir.path().join("configs");
    std::fs::create_dir(&configs).unwrap();
    write(&configs, "a.json", &tiny(SOFTMAX, ", \"seeds\": [0, 1]"));
    write(&configs, "b.json", &tiny(ATAM, ", \"seeds\": [0, 1]"));
    let run = |threads: &str, out: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_atamlab"))
            .env("ATAMLAB_THREADS", threads)
            .args(["compare", "--config", configs.to_str().unwrap(), "--out"])
            .arg(dir.path().join(out))
            .output()
            .unwrap();
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        std::fs::read(dir.path().join(out).join("compare.csv")).unwrap()
    };
    assert_eq!(run("1", "one"), run("3", "three"));
    let o = Command::new(env!("CARGO_BIN_EXE_atamlab"))
        .env("ATAMLAB_THREADS", "many")
        .args(["compare", "--config", configs.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn compare_rejects_mismatched_dataset_seeds() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "a.json", &tiny(SOFTMAX, ""));
    write(dir.path(), "b.json", &tiny(ATAM, "").replace("\"seed\": 3", "\"seed\": 4"));
    let err = cmd_compare(dir.path(), Some(&dir.path().join("out"))).unwrap_err();
    assert!(err.to_string().contains("mismatched dataset seeds"), "{err}");
    assert!(!dir.path().join("out").exists());

    let lonely = TempDir::new().unwrap();
    write(lonely.path(), "a.json", &tiny(SOFTMAX, ""));
    assert!(cmd_compare(lonely.path(), None).is_err());
}

#[test]
fn gradcheck_lists_every_loss_and_passes() {
    let out = bin(&["gradcheck"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8_lossy(&out.stdout);
    for name in [
        "softmax",
        "modified_softmax",
        "a_softmax(m=2)",
        "a_softmax(m=3)",
        "a_softmax(m=4)",
        "cosface",
        "arcface",
        "atam",
        "margin_net",
        "encoder",
        "head_normalization",
    ] {
        assert!(text.contains(name), "missing {name} in\n{text}");
    }
}

fn parse_svg(svg: &str) -> roxmltree::Document<'_> {
    roxmltree::Document::parse(svg).expect("valid XML")
}

#[test]
fn plot_overlays_reports() {
    let dir = TempDir::new().unwrap();
    let mut reports = Vec::new();
    for (i, loss) in [SOFTMAX, ATAM, r#"{"kind": "cosface", "m": 0.35}"#].iter().enumerate() {
        let cfg = write(dir.path(), &format!("c{i}.json"), &tiny(loss, ""));
        let run = dir.path().join(format!("r{i}"));
        let trained = cmd_train(&cfg, Some(&run)).unwrap();
        cmd_eval(&cfg, &trained.checkpoint, Some(&run)).unwrap();
        reports.push(run.join("report.json"));
    }
    let one = cmd_plot(&reports[..1], Some(&dir.path().join("one"))).unwrap();
    let text = std::fs::read_to_string(one).unwrap();
    let doc = parse_svg(&text);
    assert_eq!(doc.descendants().filter(|n| n.has_tag_name("polyline")).count(), 1);

    let out = bin(&[
        "plot",
        reports[0].to_str().unwrap(),
        reports[1].to_str().unwrap(),
        reports[2].to_str().unwrap(),
        "--out",
        dir.path().join("three").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = std::fs::read_to_string(dir.path().join("three").join("roc.svg")).unwrap();
    let doc = parse_svg(&text);
    assert_eq!(doc.descendants().filter(|n| n.has_tag_name("polyline")).count(), 3);
    let labels: Vec<&str> = doc.descendants().filter_map(|n| n.text()).collect();
    for name in ["softmax", "atam", "cosface(s=30,m=0.35)"] {
        assert!(labels.contains(&name), "{labels:?}");
    }
}

#[test]
fn plot_rejects_reports_without_roc() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "c.json", &tiny(SOFTMAX, ""));
    let trained = cmd_train(&cfg, Some(dir.path())).unwrap();
    let mut report = cmd_eval(&cfg, &trained.checkpoint, Some(dir.path())).unwrap();
    report.report.verification.roc.clear();
    let path = write(dir.path(), "empty.json", &serde_json::to_string(&report).unwrap());
    let err = cmd_plot(&[path], Some(dir.path())).unwrap_err();
    assert!(err.to_string().contains("no ROC data"), "{err}");
    let junk = write(dir.path(), "junk.json", "{}");
    assert_eq!(cmd_plot(&[junk], Some(dir.path())).unwrap_err().kind, ExitKind::Validation);
}

#[test]
fn perfect_classifier_passes_through_top_left() {
    let scores = [(0.9, true), (0.8, true), (0.1, false), (0.2, false)];
    let rep = verification_from_scores(&scores, &[0.1]).unwrap();
    assert!(rep.roc.iter().any(|p| p.far == 0.0 && p.tar == 1.0));
    let curve = Curve {
        label: "perfect".into(),
        points: rep.roc.iter().map(|p| (p.far, p.tar)).collect(),
    };
    let svg = roc_svg(&[curve]).unwrap();
    let doc = parse_svg(&svg);
    let line = doc.descendants().find(|n| n.has_tag_name("polyline")).unwrap();
    let points = line.attribute("points").unwrap();
    // Left edge of the plot area at TAR = 1.
    assert!(points.split(' ').any(|p| p == "64.00,24.00"), "{points}");
}
