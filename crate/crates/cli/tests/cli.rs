use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn svdlab(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_svdlab"));
    cmd.args(args).env_remove("SVDLAB_SEED");
    if let Some(s) = seed {
        cmd.env("SVDLAB_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn run(sub: &str, config: &Path, out: &Path, extra: &[&str], seed: Option<&str>) -> Output {
    let mut args = vec![
        sub,
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    svdlab(&args, seed)
}

const SMALL_FL: &str = r#""fl": {"num_clients": 4, "clients_per_round": 3, "rounds": 3,
    "data": {"num_classes": 4, "per_class": 12, "side": 8, "test_per_class": 5}, "hidden": [8]}"#;

fn mean_mse(csv: &str, defense: &str) -> f64 {
    csv.lines()
        .find(|l| l.starts_with(&format!("mean,{defense},")))
        .and_then(|l| l.split(',').nth(3))
        .and_then(|v| v.parse().ok())
        .expect("summary row")
}

#[test]
fn missing_config_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = run("train", &missing, &dir.path().join("out"), &[], None);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nope.json"), "{err}");
}

#[test]
fn unknown_keys_and_bad_values_exit_2_with_one_line_each() {
    let dir = tempfile::tempdir().unwrap();
    let typo = write_config(dir.path(), "typo.json", r#"{"fl": {"rouns": 3}}"#);
    assert_eq!(
        run("train", &typo, &dir.path().join("o"), &[], None)
            .status
            .code(),
        Some(2)
    );
    let bad = write_config(
        dir.path(),
        "bad.json",
        r#"{"fl": {"rounds": 0, "local_lr": -1}}"#,
    );
    let out = run("train", &bad, &dir.path().join("o"), &[], None);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(
        err.lines()
            .filter(|l| l.starts_with("config error"))
            .count(),
        2,
        "{err}"
    );
}

#[test]
fn numerical_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "boom.json",
        &format!("{{{SMALL_FL}}}").replace("\"rounds\": 3", "\"rounds\": 3, \"local_lr\": 1e300"),
    );
    assert_eq!(
        run("train", &cfg, &dir.path().join("o"), &[], None)
            .status
            .code(),
        Some(3)
    );
}

#[test]
fn train_writes_rounds_and_checkpoint_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "train.json",
        &format!("{{\"mode\": \"train\", {SMALL_FL}}}"),
    );
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run("train", &cfg, &a, &[], None).status.success());
    assert!(run("train", &cfg, &b, &[], None).status.success());
    let csv = fs::read_to_string(a.join("rounds.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert_eq!(
        csv.lines().next().unwrap(),
        "round,accuracy,bytes_up,bytes_down,mean_entropy,defense_method"
    );
    assert_eq!(csv, fs::read_to_string(b.join("rounds.csv")).unwrap());
    assert!(a.join("model.ckpt").exists());

    let (c, d) = (dir.path().join("c"), dir.path().join("d"));
    assert!(run("train", &cfg, &c, &[], Some("77")).status.success());
    assert!(run("train", &cfg, &d, &[], Some("77")).status.success());
    let seeded = fs::read_to_string(c.join("rounds.csv")).unwrap();
    assert_eq!(seeded, fs::read_to_string(d.join("rounds.csv")).unwrap());
    assert_ne!(seeded, csv);
}

#[test]
fn single_example_attack_has_one_row_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "attack.json",
        &format!(
            r#"{{{SMALL_FL}, "attack": {{"iterations": 50}},
               "evaluation": {{"n_examples": 1, "defenses": ["none"]}}}}"#
        ),
    );
    let out_dir = dir.path().join("o");
    let out = run("attack", &cfg, &out_dir, &[], None);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = fs::read_to_string(out_dir.join("attack_metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "example_id,defense,attack_mode,mse,psnr,ssim");
    assert!(lines[1].starts_with("0,none,none,"));
    assert!(lines[2].starts_with("mean,none,none,"));
    assert_eq!(lines.len(), 3);
    assert!(out_dir.join("images/none_0_recon.pgm").exists());
}

const ATTACK_FL: &str = r#""fl": {"data": {"num_classes": 10, "per_class": 4, "side": 8, "test_per_class": 4},
    "hidden": [32], "seed": 3}"#;

#[test]
fn svdefense_raises_attack_error_over_no_defense() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "attack.json",
        &format!(
            r#"{{{ATTACK_FL},
               "attack": {{"iterations": 2000, "lr": 0.02, "label_mode": "known", "restarts": 3}},
               "evaluation": {{"n_examples": 4, "batch_size": 2, "defenses": ["none", "svdefense"], "dump_images": false}}}}"#
        ),
    );
    let out_dir = dir.path().join("o");
    let out = run("attack", &cfg, &out_dir, &[], None);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = fs::read_to_string(out_dir.join("attack_metrics.csv")).unwrap();
    assert!(
        mean_mse(&csv, "svdefense") > mean_mse(&csv, "none"),
        "{csv}"
    );
}

#[test]
fn prune_mask_attack_beats_non_adaptive_against_pruning() {
    let dir = tempfile::tempdir().unwrap();
    let body = |adaptive: &str| {
        format!(
            r#"{{{ATTACK_FL},
               "attack": {{"iterations": 2000, "lr": 0.02, "label_mode": "known", "restarts": 3, "adaptive": "{adaptive}"}},
               "evaluation": {{"n_examples": 6, "batch_size": 2, "defenses": ["prune"], "dump_images": false}}}}"#
        )
    };
    let plain = write_config(dir.path(), "plain.json", &body("none"));
    let masked = write_config(dir.path(), "masked.json", &body("prune_mask"));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run("attack", &plain, &a, &[], None).status.success());
    assert!(run("attack", &masked, &b, &[], None).status.success());
    let plain_mse = mean_mse(
        &fs::read_to_string(a.join("attack_metrics.csv")).unwrap(),
        "prune",
    );
    let masked_mse = mean_mse(
        &fs::read_to_string(b.join("attack_metrics.csv")).unwrap(),
        "prune",
    );
    assert!(masked_mse < plain_mse, "{masked_mse} vs {plain_mse}");
}

#[test]
fn beta_sweep_has_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "sweep.json",
        r#"{"fl": {"num_clients": 4, "clients_per_round": 3, "rounds": 3, "hidden": [8],
              "data": {"num_classes": 4, "per_class": 12, "side": 8, "test_per_class": 5},
              "defense": {"method": "svdefense"}},
            "attack": {"iterations": 20},
            "evaluation": {"n_examples": 1, "dump_images": false}}"#,
    );
    let out_dir = dir.path().join("o");
    let out = run(
        "sweep",
        &cfg,
        &out_dir,
        &["--axis", "beta", "--values", "0.1,0.3,0.6"],
        None,
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "axis,value,final_accuracy,mean_attack_mse,comm_reduction_pct,mean_entropy"
    );
    assert_eq!(lines.len(), 4);
    assert!(lines[2].starts_with("beta,0.3,"));
    assert!(out_dir.join("sweep_beta_0.6_rounds.csv").exists());

    let empty = run(
        "sweep",
        &cfg,
        &dir.path().join("e"),
        &["--axis", "beta", "--values", ""],
        None,
    );
    assert_eq!(empty.status.code(), Some(2));
    let unknown = run(
        "sweep",
        &cfg,
        &dir.path().join("u"),
        &["--axis", "gamma", "--values", "1"],
        None,
    );
    assert_eq!(unknown.status.code(), Some(2));
}

#[test]
fn outputs_stay_under_out_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "train.json", &format!("{{{SMALL_FL}}}"));
    let out_dir = dir.path().join("nested/out");
    assert!(run("train", &cfg, &out_dir, &[], None).status.success());
    let mut top: Vec<String> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    top.sort();
    assert_eq!(top, vec!["nested", "train.json"]);
    let mut inner: Vec<String> = fs::read_dir(&out_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    inner.sort();
    assert_eq!(inner, vec!["model.ckpt", "rounds.csv"]);
}
