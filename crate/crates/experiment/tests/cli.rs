use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use ndarray::Array2;
use weakinv_core::attack::AttackConfig;
use weakinv_core::forge::{DatasetConfig, ShapesConfig};
use weakinv_experiment::{checkpoint, tables, RunConfig};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_weakinv"));
    c.env("RUST_LOG", "error");
    c
}

fn tiny(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::shapes();
    cfg.dataset = DatasetConfig::Shapes(ShapesConfig { canvas: 16, pos_x: 2, pos_y: 2, scales: 2, ..Default::default() });
    cfg.model.conv_channels = vec![4];
    cfg.model.encoder_hidden = vec![16];
    cfg.model.decoder_hidden = vec![16];
    cfg.model.classifier_hidden = vec![8];
    cfg.model.projection_hidden = 8;
    cfg.model.projection_dim = 4;
    cfg.train.steps = 4;
    cfg.train.pairs_per_batch = 4;
    cfg.train.curriculum.ramp_steps = 2;
    cfg.metrics.fvae_votes = 20;
    cfg.metrics.fvae_probe = 8;
    cfg.attacks = vec![AttackConfig::fgsm(0.1), AttackConfig { pgd_steps: 2, ..AttackConfig::pgd(0.1) }];
    cfg.attack_samples = 16;
    cfg.plots.iterations = 30;
    cfg.plots.max_points = 40;
    cfg.plots.recon_columns = 4;
    cfg.out_dir = out.to_path_buf();
    cfg
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, cfg.to_json().unwrap()).unwrap();
    p
}

fn ok(cmd: &mut Command) -> String {
    let out = cmd.output().unwrap();
    assert!(out.status.success(), "{cmd:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn train_then_every_verb() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg = tiny(&run);
    let cfg_path = write_config(dir.path(), &cfg);
    let c = cfg_path.to_str().unwrap();

    ok(bin().args(["train", "--config", c]));
    let ckpt = run.join("ckpt/model.ckpt");
    assert!(ckpt.exists());
    let log = fs::read_to_string(run.join("logs/train.csv")).unwrap();
    assert_eq!(log.lines().count(), cfg.train.steps + 1);
    assert!(fs::read_to_string(run.join("reports/result.csv")).unwrap().starts_with("dataset,variant,seed"));
    let k = ckpt.to_str().unwrap();

    let eval = ok(bin().args(["eval", "--config", c, "--ckpt", k]));
    assert_eq!(eval.lines().count(), 2);

    ok(bin().args(["metrics", "--config", c, "--ckpt", k]));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(run.join("reports/metrics.json")).unwrap()).unwrap();
    for key in ["mig", "sap", "irs", "fvae", "dci"] {
        assert!(report[key].is_number(), "{key} missing");
    }

    let attacks = ok(bin().args(["attack", "--config", c, "--ckpt", k]));
    assert_eq!(attacks.lines().count(), 3);

    let plots = ok(bin().args(["plots", "--config", c, "--ckpt", k]));
    for line in plots.lines() {
        assert!(Path::new(line).exists(), "{line}");
    }
    let emb = fs::read_to_string(run.join("figures/embedding_z_p.csv")).unwrap();
    assert_eq!(emb.lines().count(), cfg.plots.max_points + 1);
    assert!(run.join("figures/reconstructions.png").exists());

    let forged = dir.path().join("forged");
    ok(bin().args(["forge", "build", "--config", c, "--out", forged.to_str().unwrap()]));
    let grid = dir.path().join("grid.json");
    fs::write(&grid, serde_json::to_string(&[AttackConfig::fgsm(0.0), AttackConfig::fgsm(0.2)]).unwrap()).unwrap();
    let out = dir.path().join("attack.csv");
    ok(bin().args([
        "attack",
        "run",
        "--config",
        c,
        "--ckpt",
        k,
        "--dataset",
        forged.to_str().unwrap(),
        "--grid",
        grid.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]));
    let csv = fs::read_to_string(&out).unwrap();
    let first: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(first[3], first[4], "eps 0 keeps accuracy");
}

#[test]
fn metrics_run_on_flat_arrays() {
    let dir = tempfile::tempdir().unwrap();
    let n = 300;
    let factors = Array2::from_shape_fn((n, 2), |(i, f)| if f == 0 { i % 3 } else { (i / 3) % 4 });
    let codes = factors.mapv(|v| v as f64);
    tables::write_f64(&dir.path().join("codes.bin"), &codes).unwrap();
    tables::write_usize(&dir.path().join("factors.bin"), &factors).unwrap();
    let out = dir.path().join("report.json");
    let stdout = ok(bin().args([
        "metrics",
        "run",
        "--codes",
        dir.path().join("codes.bin").to_str().unwrap(),
        "--factors",
        dir.path().join("factors.bin").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "3",
    ]));
    assert!(stdout.contains("mig"));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    assert!(report["mig"].as_f64().unwrap() > 0.99);
    assert_eq!(report["settings"]["seed"], 3);
}

#[test]
fn same_seed_same_results_and_seed_flag_matters() {
    let dir = tempfile::tempdir().unwrap();
    let mut results = Vec::new();
    for (name, seed) in [("a", "1"), ("b", "1"), ("c", "2")] {
        let cfg = tiny(&dir.path().join(name));
        let p = dir.path().join(format!("{name}.json"));
        fs::write(&p, cfg.to_json().unwrap()).unwrap();
        ok(bin().args(["train", "--config", p.to_str().unwrap(), "--seed", seed]));
        let run = dir.path().join(name);
        let ck = checkpoint::load(&run.join("ckpt/model.ckpt")).unwrap();
        results.push((ck.model.params().clone(), fs::read_to_string(run.join("reports/result.csv")).unwrap()));
    }
    assert!(results[0] == results[1], "same seed diverged");
    assert!(results[0].0 != results[2].0, "seed flag ignored");
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    fs::write(&p, r#"{"not_a_field": 1}"#).unwrap();
    let out = bin().args(["train", "--config", p.to_str().unwrap()]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("not_a_field"));

    let out = bin().args(["eval", "--ckpt", "/nonexistent.ckpt"]).output().unwrap();
    assert!(!out.status.success());
    let out = bin().args(["metrics"]).output().unwrap();
    assert!(!out.status.success());
    let out = bin().args(["train", "--preset", "nope"]).output().unwrap();
    assert!(!out.status.success());
}
