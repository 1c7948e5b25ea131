use std::path::Path;
use std::process::{Command, Output};

use nmt_adapt::store::{sha256_hex, Manifest, MANIFEST};

const TINY: &str = r#"
seed = 5

[family]
n_parallel = 120
n_mono = 60
n_mono_lrl = 80
n_dev = 12
n_test = 12

[model]
d_model = 8
heads = 2
enc_layers = 1
dec_layers = 1
ffn = 16

[critic]
fc1 = 8
fc2 = 8
gru = 4

[pretrain]
epochs = 1
batch_tokens = 200
accumulation = 1

[supervised]
epochs = 1
batch_tokens = 200
accumulation = 1

[en2lrl]
epochs = 1
batch_tokens = 200
accumulation = 1

[lrl2en]
epochs = 1
batch_tokens = 200
accumulation = 1

[pipeline]
k_max = 1
later_epochs = 1

[pipeline.bt_decode]
max_len = 12

[eval]
probe_samples = 40
ablation_sizes = [20, 80]

[eval.decode]
max_len = 12
"#;

fn run(dir: &Path, config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nmt-adapt"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(dir)
        .arg("--quiet")
        .args(args)
        .env_remove("NMT_ADAPT_OUT")
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\n{}", o.status.code(), String::from_utf8_lossy(&o.stderr));
}

fn manifest(dir: &Path) -> Manifest {
    serde_json::from_slice(&std::fs::read(dir.join(MANIFEST)).unwrap()).unwrap()
}

#[test]
fn iterate_evaluate_ablate_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let out = tmp.path().join("run");

    ok(&run(&out, &cfg, &["synth-data"]));
    ok(&run(&out, &cfg, &["iterate"]));
    let m = manifest(&out);
    for name in ["models/base", "models/lrl2en-0", "models/en2lrl-1", "models/lrl2en-1", "bt/bt-en2lrl-1", "bt/bt-lrl2en-1"] {
        assert!(m.artifacts.contains_key(name), "{name} missing from {:?}", m.artifacts.keys().collect::<Vec<_>>());
    }
    for a in m.artifacts.values() {
        let bytes = std::fs::read(out.join(&a.path)).unwrap();
        assert_eq!(sha256_hex(&bytes), a.sha256, "{}", a.path);
    }

    let e = run(&out, &cfg, &["evaluate"]);
    ok(&e);
    let report: serde_json::Value = serde_json::from_slice(&e.stdout).unwrap();
    assert_eq!(report["en2lrl"]["iteration"], 1);
    assert!(report["lrl2en"]["test_bleu"].as_f64().unwrap() >= 0.0);
    assert!((0.0..=1.0).contains(&report["en2lrl"]["purity"].as_f64().unwrap()));

    let a = run(&out, &cfg, &["ablate"]);
    ok(&a);
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("size,bleu"));
    assert_eq!(csv.lines().count(), 3);

    ok(&run(&out, &cfg, &["report"]));
    let m = manifest(&out);
    for chart in ["charts/bleu-iteration", "charts/bleu-mono-size", "charts/loss-en2lrl-1"] {
        assert!(m.artifacts.contains_key(chart), "{chart}");
    }
    assert!(out.join("config.effective.toml").exists());
    assert!(!out.join("run.lock").exists());
}

#[test]
fn evaluate_without_checkpoint_is_a_missing_prerequisite() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let out = tmp.path().join("run");
    ok(&run(&out, &cfg, &["synth-data"]));
    ok(&run(&out, &cfg, &["prepare"]));
    let o = run(&out, &cfg, &["evaluate"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("checkpoint"));
}

#[test]
fn iterate_without_data_is_a_missing_prerequisite() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let o = run(&tmp.path().join("run"), &cfg, &["iterate"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[model]\nd_modle = 8\n").unwrap();
    let o = run(&tmp.path().join("run"), &cfg, &["synth-data"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("d_modle"));
}

#[test]
fn held_lock_refuses_a_second_writer() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let out = tmp.path().join("run");
    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(out.join("run.lock"), "other").unwrap();
    let o = run(&out, &cfg, &["synth-data"]);
    assert!(!o.status.success());
    assert!(out.join("run.lock").exists());
}
