//! End-to-end checks of the command-line surface: exit codes, file outputs,
//! and the determinism contracts (same seed, same bytes).

use std::path::Path;
use std::process::{Command, Output};

fn pmn() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pmn"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn pmn");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Small-but-real config: full architecture, tiny dataset and epoch count.
fn quick_config(dir: &Path, seed: u64, extra: &str) -> std::path::PathBuf {
    let path = dir.join(format!("config_{seed}.json"));
    std::fs::write(
        &path,
        format!(r#"{{"seed": {seed}, "epochs": 2, "batch_size": 16, "samples_per_class": 8{extra}}}"#),
    )
    .unwrap();
    path
}

#[test]
fn generate_writes_deterministic_datasets_with_expected_counts() {
    let dir = tempfile::tempdir().unwrap();
    let config = quick_config(dir.path(), 5, "");

    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let stdout = run_ok(pmn()
        .args(["generate", "--config"])
        .arg(&config)
        .arg("--out-dir")
        .arg(&out_a));
    let text = String::from_utf8(stdout.stdout).unwrap();
    assert!(text.contains("class 0:"), "stdout was: {text}");

    run_ok(pmn()
        .args(["generate", "--config"])
        .arg(&config)
        .arg("--out-dir")
        .arg(&out_b));

    // Same seed, byte-identical files.
    for name in ["train.pmds", "test.pmds"] {
        let a = std::fs::read(out_a.join(name)).unwrap();
        let b = std::fs::read(out_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }

    // 8 per class at 0.7: 6 train / 2 test over 4 classes.
    let train = pmn_core::signal::read_pmds(&out_a.join("train.pmds")).unwrap();
    let test = pmn_core::signal::read_pmds(&out_a.join("test.pmds")).unwrap();
    assert_eq!(train.len(), 24);
    assert_eq!(test.len(), 8);
    for c in 0..4u16 {
        assert_eq!(train.samples.iter().filter(|s| s.label == c).count(), 6);
        assert_eq!(test.samples.iter().filter(|s| s.label == c).count(), 2);
    }
}

#[test]
fn invalid_split_ratio_is_rejected_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.json");
    std::fs::write(&config, r#"{"split_ratio": 1.5}"#).unwrap();
    let out = pmn()
        .args(["generate", "--config"])
        .arg(&config)
        .arg("--out-dir")
        .arg(dir.path().join("x"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("split ratio"), "stderr: {stderr}");
}

#[test]
fn seed_env_var_overrides_only_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config_seed_9 = quick_config(dir.path(), 9, "");
    let config_seed_1 = quick_config(dir.path(), 1, "");

    let out_env = dir.path().join("env");
    let out_direct = dir.path().join("direct");
    run_ok(pmn()
        .env("PMN_SEED", "9")
        .args(["generate", "--config"])
        .arg(&config_seed_1)
        .arg("--out-dir")
        .arg(&out_env));
    run_ok(pmn()
        .args(["generate", "--config"])
        .arg(&config_seed_9)
        .arg("--out-dir")
        .arg(&out_direct));
    assert_eq!(
        std::fs::read(out_env.join("train.pmds")).unwrap(),
        std::fs::read(out_direct.join("train.pmds")).unwrap()
    );
}

#[test]
fn train_eval_explain_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let config = quick_config(dir.path(), 3, "");
    let data_dir = dir.path().join("data");
    let run_dir = dir.path().join("run");

    run_ok(pmn()
        .args(["generate", "--config"])
        .arg(&config)
        .arg("--out-dir")
        .arg(&data_dir));
    run_ok(pmn()
        .args(["train", "--config"])
        .arg(&config)
        .arg("--data-dir")
        .arg(&data_dir)
        .arg("--out-dir")
        .arg(&run_dir));

    // Log schema contract.
    let log = std::fs::read_to_string(run_dir.join("train_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,cla,recon,r1,r2,r3,total,train_acc,test_acc,r_rps"
    );
    assert_eq!(lines.count(), 2);
    assert!(run_dir.join("best.pmn").exists());
    assert!(run_dir.join("final.pmn").exists());

    // Eval: byte-identical reports across invocations, consistent confusion.
    let report_a = dir.path().join("report_a.json");
    let report_b = dir.path().join("report_b.json");
    for report in [&report_a, &report_b] {
        run_ok(pmn()
            .args(["eval", "--checkpoint"])
            .arg(run_dir.join("final.pmn"))
            .arg("--dataset")
            .arg(data_dir.join("test.pmds"))
            .arg("--report")
            .arg(report));
    }
    let bytes_a = std::fs::read(&report_a).unwrap();
    assert_eq!(bytes_a, std::fs::read(&report_b).unwrap());

    let report: serde_json::Value = serde_json::from_slice(&bytes_a).unwrap();
    let confusion = report["confusion"].as_array().unwrap();
    let total: u64 = confusion
        .iter()
        .flat_map(|row| row.as_array().unwrap())
        .map(|v| v.as_u64().unwrap())
        .sum();
    let trace: u64 = (0..confusion.len())
        .map(|i| confusion[i][i].as_u64().unwrap())
        .sum();
    let accuracy = report["accuracy"].as_f64().unwrap();
    assert_eq!(total, 8);
    assert!((accuracy - trace as f64 / total as f64).abs() < 1e-12);

    // Feature export: rows = samples + prototypes.
    let features = dir.path().join("features.csv");
    run_ok(pmn()
        .args(["eval", "--checkpoint"])
        .arg(run_dir.join("final.pmn"))
        .arg("--dataset")
        .arg(data_dir.join("test.pmds"))
        .arg("--export-features")
        .arg(&features));
    let text = std::fs::read_to_string(&features).unwrap();
    assert_eq!(text.lines().count(), 1 + 8 + 4); // header + samples + prototypes
    assert!(text.lines().next().unwrap().starts_with("label,domain,z0,"));
    assert_eq!(text.lines().filter(|l| l.starts_with("-1,")).count(), 4);

    // Explain: bundle fields and CSV side outputs.
    let bundle = dir.path().join("bundle.json");
    let attribution = dir.path().join("attribution.csv");
    let prototypes = dir.path().join("prototypes.csv");
    run_ok(pmn()
        .args(["explain", "--checkpoint"])
        .arg(run_dir.join("best.pmn"))
        .arg("--dataset")
        .arg(data_dir.join("test.pmds"))
        .args(["--index", "3", "--out"])
        .arg(&bundle)
        .arg("--attribution-csv")
        .arg(&attribution)
        .arg("--all-prototypes")
        .arg(&prototypes));

    let bundle: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&bundle).unwrap()).unwrap();
    assert_eq!(bundle["distances"].as_array().unwrap().len(), 4);
    assert_eq!(bundle["decoded_prototype"].as_array().unwrap().len(), 1024);
    assert_eq!(
        bundle["attribution"]["scores"].as_array().unwrap().len(),
        1024
    );
    assert_eq!(bundle["sample_id"].as_u64().unwrap(), 3);

    let attribution = std::fs::read_to_string(&attribution).unwrap();
    let mut lines = attribution.lines();
    assert!(lines.next().unwrap().contains("hz = bin * rate / 2048"));
    assert_eq!(lines.next().unwrap(), "bin,hz,attribution");
    assert_eq!(lines.count(), 1024);

    let prototypes = std::fs::read_to_string(&prototypes).unwrap();
    let rows: Vec<&str> = prototypes.lines().collect();
    assert_eq!(rows.len(), 4);
    for row in rows {
        assert_eq!(row.split(',').count(), 1024);
    }

    // Bad selector.
    let out = pmn()
        .args(["explain", "--checkpoint"])
        .arg(run_dir.join("best.pmn"))
        .arg("--dataset")
        .arg(data_dir.join("test.pmds"))
        .args(["--index", "999"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("out of range"));
}

#[test]
fn checkpoint_round_trip_reproduces_eval_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let config = quick_config(dir.path(), 11, "");
    let data_dir = dir.path().join("data");
    let run_dir = dir.path().join("run");
    run_ok(pmn()
        .args(["generate", "--config"])
        .arg(&config)
        .arg("--out-dir")
        .arg(&data_dir));
    run_ok(pmn()
        .args(["train", "--config"])
        .arg(&config)
        .arg("--data-dir")
        .arg(&data_dir)
        .arg("--out-dir")
        .arg(&run_dir));

    // Load + re-save, then check the eval output is byte-identical.
    let (model, cfg, epoch) = pmn_core::checkpoint::load(&run_dir.join("final.pmn")).unwrap();
    let resaved = dir.path().join("resaved.pmn");
    pmn_core::checkpoint::save(&resaved, &model, &cfg, epoch).unwrap();

    let mut reports = Vec::new();
    for ckpt in [run_dir.join("final.pmn"), resaved] {
        let report = dir.path().join(format!(
            "{}.json",
            ckpt.file_stem().unwrap().to_string_lossy()
        ));
        run_ok(pmn()
            .args(["eval", "--checkpoint"])
            .arg(&ckpt)
            .arg("--dataset")
            .arg(data_dir.join("test.pmds"))
            .arg("--report")
            .arg(&report));
        reports.push(std::fs::read(&report).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}
