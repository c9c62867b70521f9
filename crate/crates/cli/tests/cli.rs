use std::path::Path;
use std::process::{Command, Output};

fn e2ephy(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_e2ephy"))
        .arg("--set")
        .arg(format!("output_dir={}", dir.display()))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}\n{}", o.status.code(), String::from_utf8_lossy(&o.stderr));
    o
}

/// Tiny schedules so a full pipeline runs in seconds.
const TINY: [&str; 6] = ["--set", "schedule=200:100", "--set", "oe_schedule=200:100", "--set", "seed=3"];

#[test]
fn config_prints_every_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = stdout(&ok(e2ephy(dir.path(), &["--set", "seed=42", "config"])));
    assert!(out.contains("seed = 42"), "{out}");
    for key in ["eval_grid", "finetune_lr", "tau_bound", "oe_schedule"] {
        assert!(out.contains(key), "{key} missing");
    }
}

#[test]
fn config_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let printed = stdout(&ok(e2ephy(dir.path(), &["--set", "lr=0.0005", "config"])));
    let file = dir.path().join("exp.conf");
    std::fs::write(&file, &printed).unwrap();
    let again = stdout(&ok(e2ephy(dir.path(), &["--config", file.to_str().unwrap(), "config"])));
    assert_eq!(printed, again);
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = e2ephy(dir.path(), &["--set", "no_such_key=1", "config"]);
    assert_eq!(o.status.code(), Some(2));
    let o = e2ephy(dir.path(), &["--set", "seed", "config"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_weights_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = e2ephy(dir.path(), &["eval", "--weights", "/nonexistent/model.weights"]);
    assert_eq!(o.status.code(), Some(3));
    let o = e2ephy(dir.path(), &["train-oe"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn bad_system_name_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = e2ephy(dir.path(), &["eval", "--system", "ofdm"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let run = |extra: &[&str]| {
        let mut args: Vec<&str> = TINY.to_vec();
        args.extend_from_slice(extra);
        ok(e2ephy(dir.path(), &args))
    };
    run(&["train"]);
    assert!(dir.path().join("phase1.weights").exists());
    assert!(dir.path().join("phase1.ckpt.meta").exists());
    run(&["train-oe"]);
    let model = dir.path().join("model.weights");
    assert!(model.exists());

    let listing = stdout(&run(&["inspect-weights", model.to_str().unwrap()]));
    for name in ["tx", "pe", "fe", "rx", "oe"] {
        assert!(listing.contains(name), "{name} missing from\n{listing}");
    }

    run(&["constellation", "--rescale"]);
    let csv = std::fs::read_to_string(dir.path().join("constellation.csv")).unwrap();
    assert!(csv.starts_with("# config_hash = "));
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "message,symbol_index,re,im");
    assert_eq!(rows.len() - 1, 256 * 4);
    let power: f64 = rows[1..]
        .iter()
        .map(|r| {
            let v: Vec<f64> = r.split(',').skip(2).map(|x| x.parse().unwrap()).collect();
            v[0] * v[0] + v[1] * v[1]
        })
        .sum::<f64>()
        / 1024.0;
    assert!((power - 1.0).abs() < 1e-6, "{power}");

    // Same config, same seed: byte-identical results.
    let eval = ["--set", "eval_grid=4,8", "--set", "eval_max_trials=300", "eval"];
    run(&eval);
    let first = std::fs::read(dir.path().join("bler_autoencoder_stochastic.csv")).unwrap();
    run(&eval);
    let second = std::fs::read(dir.path().join("bler_autoencoder_stochastic.csv")).unwrap();
    assert_eq!(first, second);
}

#[test]
fn training_resumes_from_its_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let two = ["--set", "schedule=200:100,200:100", "--set", "checkpoint_every=2"];
    let mut args = two.to_vec();
    args.push("train");
    ok(e2ephy(dir.path(), &args));
    let straight = std::fs::read(dir.path().join("phase1.weights")).unwrap();

    let other = tempfile::tempdir().unwrap();
    let mut args = two.to_vec();
    args.extend(["--set", "schedule=200:100", "train"]);
    // A shorter schedule is a different config; resuming it must be refused.
    ok(e2ephy(other.path(), &args));
    let mut args = two.to_vec();
    args.extend(["train", "--resume"]);
    assert!(!e2ephy(other.path(), &args).status.success());

    // Resuming a finished run of the same config reproduces its weights.
    let mut args = two.to_vec();
    args.extend(["train", "--resume"]);
    ok(e2ephy(dir.path(), &args));
    assert_eq!(straight, std::fs::read(dir.path().join("phase1.weights")).unwrap());
}
