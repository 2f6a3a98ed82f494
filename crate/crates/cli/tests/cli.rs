use std::path::Path;
use std::process::{Command, Output};

fn imss(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_imss")).args(args).output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const TINY: [&str; 14] = [
    "--override",
    "synth.image_size=32",
    "--override",
    "synth.train_samples=4",
    "--override",
    "synth.val_samples=2",
    "--override",
    "model.encoder.stage_channels=[8,8,8,8]",
    "--override",
    "model.head.embed_width=8",
    "--override",
    "train.batch_size=2",
    "--override",
    "train.warmup_epochs=0",
];

fn with_tiny<'a>(mut args: Vec<&'a str>, extra: &[&'a str]) -> Vec<&'a str> {
    args.extend_from_slice(&TINY);
    args.extend_from_slice(extra);
    args
}

fn synth(dir: &Path) {
    let d = dir.to_str().unwrap();
    ok(&imss(&with_tiny(vec!["synth-data", "--out", d], &[])));
}

#[test]
fn synthetic_data_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a);
    synth(&b);
    let ma = std::fs::read(a.join("manifest.json")).unwrap();
    assert_eq!(ma, std::fs::read(b.join("manifest.json")).unwrap());
    assert_eq!(
        std::fs::read(a.join("rgb/train_0000.png")).ok(),
        std::fs::read(b.join("rgb/train_0000.png")).ok()
    );
    assert!(a.join("config.toml").exists());
}

#[test]
fn unknown_override_names_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let out = imss(&["synth-data", "--out", tmp.path().to_str().unwrap(), "--override", "model.colour=3"]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert_eq!(err.trim().lines().count(), 1);
    assert!(err.contains("model.colour"), "{err}");
}

#[test]
fn missing_inputs_are_reported_with_their_path() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().to_str().unwrap();
    let out = imss(&["eval", "--out", d, "--checkpoint", "/nonexistent/best.json"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("/nonexistent/best.json"));

    let out = imss(&["train", "--out", d, "--config", "/nonexistent/c.toml"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("/nonexistent/c.toml"));

    let out = imss(&["train", "--out", d, "--variant", "z"]);
    assert!(!out.status.success());
    assert_eq!(stderr(&out).trim().lines().count(), 1);
}

#[test]
fn train_eval_diagnose_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let root = format!("data.root={}", data.display());
    let run = tmp.path().join("run");
    let r = run.to_str().unwrap();
    ok(&imss(&with_tiny(
        vec!["train", "--out", r, "--variant", "c", "--seed", "3"],
        &["--override", &root, "--override", "train.epochs=1"],
    )));
    let echoed = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(echoed.contains("embed_width = 8"));
    assert!(echoed.contains("init = 3"));
    assert_eq!(std::fs::read_to_string(run.join("train_log.jsonl")).unwrap().lines().count(), 1);

    let ck = run.join("last.json");
    let ck = ck.to_str().unwrap();
    let ev = tmp.path().join("eval");
    let e = ev.to_str().unwrap();
    ok(&imss(&["eval", "--out", e, "--checkpoint", ck]));
    let first = std::fs::read(ev.join("metrics.json")).unwrap();
    let report: serde_json::Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(report["subsets"].as_array().unwrap().len(), 7);
    for s in report["subsets"].as_array().unwrap() {
        let m = s["miou"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&m));
    }
    ok(&imss(&["eval", "--out", e, "--checkpoint", ck]));
    assert_eq!(first, std::fs::read(ev.join("metrics.json")).unwrap());

    let one = tmp.path().join("one");
    ok(&imss(&["eval", "--out", one.to_str().unwrap(), "--checkpoint", ck, "--subset", "nir,rgb"]));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(one.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report["subsets"].as_array().unwrap().len(), 1);
    assert_eq!(report["subsets"][0]["id"], "nir+rgb");

    let di = tmp.path().join("diag");
    ok(&imss(&["diagnose", "--out", di.to_str().unwrap(), "--checkpoint", ck]));
    let diag: serde_json::Value = serde_json::from_slice(&std::fs::read(di.join("diagnostics.json")).unwrap()).unwrap();
    assert_eq!(diag["intra_class_variance"].as_array().unwrap().len(), 4);

    let pl = tmp.path().join("plots");
    ok(&imss(&[
        "plot",
        "--out",
        pl.to_str().unwrap(),
        "--metrics",
        ev.join("metrics.json").to_str().unwrap(),
        "--diagnostics",
        di.join("diagnostics.json").to_str().unwrap(),
    ]));
    for f in ["metrics_table.svg", "metrics_table.md", "robustness.svg", "variance_radar.svg"] {
        let text = std::fs::read_to_string(pl.join(f)).unwrap();
        assert!(!text.is_empty(), "{f}");
    }
}

#[test]
fn zero_sampling_weight_logs_variant_b_losses() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let root = format!("data.root={}", data.display());
    let log = |variant: &str, extra: &[&str]| {
        let out = tmp.path().join(variant).join(extra.len().to_string());
        let mut tail = vec!["--override", root.as_str(), "--override", "train.epochs=2"];
        tail.extend_from_slice(extra);
        ok(&imss(&with_tiny(vec!["train", "--out", out.to_str().unwrap(), "--variant", variant], &tail)));
        std::fs::read_to_string(out.join("train_log.jsonl"))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["l_sgf"].as_f64().unwrap())
            .collect::<Vec<_>>()
    };
    let c = log("c", &["--override", "loss.lambda_mas=0"]);
    let b = log("b", &[]);
    for (x, y) in c.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-4 * y.abs(), "{c:?} vs {b:?}");
    }
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["desk.toml", "ablation.toml", "full.toml"] {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = dir.join(name);
        let out = imss(&[
            "synth-data",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            tmp.path().to_str().unwrap(),
            "--override",
            "synth.train_samples=1",
            "--override",
            "synth.val_samples=1",
        ]);
        ok(&out);
    }
}
