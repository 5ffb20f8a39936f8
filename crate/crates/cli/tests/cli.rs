use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"
epochs = 2
pretrain_epochs = 3
"#;

struct Sandbox {
    dir: TempDir,
}

impl Sandbox {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn config(&self, body: &str) -> PathBuf {
        let path = self.dir.path().join("run.toml");
        std::fs::write(&path, body).unwrap();
        path
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn olor(args: &[&str], config: Option<&Path>, out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_olor"));
    cmd.args(args);
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    if let Some(o) = out {
        cmd.arg("--out").arg(o);
    }
    cmd.output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_key_is_a_config_error() {
    let sb = Sandbox::new();
    let cfg = sb.config("epochs = 2\nlearning_rate = 0.1\n");
    let o = olor(&["pretrain"], Some(&cfg), Some(&sb.out("o")));
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    assert!(msg.contains("learning_rate"), "{msg}");
    assert!(msg.contains(":2:"), "{msg}");
}

#[test]
fn iota_ordering_violation_names_the_constraint() {
    let sb = Sandbox::new();
    let cfg = sb.config("[rollback]\niota1 = 0.001\niota2 = 0.01\n");
    let o = olor(&["finetune"], Some(&cfg), Some(&sb.out("o")));
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    assert!(msg.contains("rollback.iota2") && msg.contains("iota1 >= iota2"), "{msg}");
    assert!(!sb.out("o").exists());
}

#[test]
fn missing_output_is_a_config_error() {
    let sb = Sandbox::new();
    let cfg = sb.config(TINY);
    let o = olor(&["pretrain"], Some(&cfg), None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("out"));
}

#[test]
fn missing_config_file_is_an_io_error() {
    let sb = Sandbox::new();
    let o = olor(&["pretrain"], Some(&sb.out("absent.toml")), Some(&sb.out("o")));
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn existing_output_needs_overwrite() {
    let sb = Sandbox::new();
    let cfg = sb.config(TINY);
    let out = sb.out("o");
    assert!(olor(&["pretrain"], Some(&cfg), Some(&out)).status.success());
    let again = olor(&["pretrain"], Some(&cfg), Some(&out));
    assert_eq!(again.status.code(), Some(4));
    let forced = olor(&["pretrain", "--overwrite"], Some(&cfg), Some(&out));
    assert!(forced.status.success(), "{}", stderr(&forced));

    // A directory not created by a run is never removed.
    let foreign = sb.out("foreign");
    std::fs::create_dir(&foreign).unwrap();
    std::fs::write(foreign.join("keep.txt"), "x").unwrap();
    let o = olor(&["pretrain", "--overwrite"], Some(&cfg), Some(&foreign));
    assert_eq!(o.status.code(), Some(4));
    assert!(foreign.join("keep.txt").exists());
}

#[test]
fn divergence_is_a_numeric_error() {
    let sb = Sandbox::new();
    let cfg = sb.config(
        "pretrain_epochs = 3\npretrain_lr = 1e308\n[optimizer]\nhost = \"sgd\"\nmomentum = 0.0\n[model]\nactivation = \"relu\"\n",
    );
    let o = olor(&["pretrain"], Some(&cfg), Some(&sb.out("o")));
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn presets_are_listed() {
    let o = olor(&["presets"], None, None);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().count() >= 20);
    assert!(text.contains("cifar100-vit-analog"));
}

#[test]
fn unknown_preset_is_rejected() {
    let sb = Sandbox::new();
    let o = olor(&["pretrain", "--preset", "nope"], None, Some(&sb.out("o")));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn finetune_outputs_are_deterministic_and_ordered() {
    let sb = Sandbox::new();
    let cfg = sb.config(TINY);
    let mut metrics = Vec::new();
    for name in ["a", "b"] {
        let out = sb.out(name);
        let o = olor(&["finetune", "--seed", "7"], Some(&cfg), Some(&out));
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(out.join("config.json").exists() && out.join("summary.json").exists());
        metrics.push(std::fs::read_to_string(out.join("seed-7/metrics.csv")).unwrap());
    }
    assert_eq!(metrics[0], metrics[1]);
    let header = metrics[0].lines().next().unwrap();
    assert!(header.starts_with("step,epoch,lr,train_loss,downstream_acc,upstream_acc,discrepancy,disc_"));
}

#[test]
fn default_sweep_covers_the_full_grid() {
    let sb = Sandbox::new();
    let cfg = sb.config("epochs = 1\npretrain_epochs = 2\n");
    let out = sb.out("o");
    let o = olor(&["sweep", "--seed", "1"], Some(&cfg), Some(&out));
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("seed-1/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 27);
}

#[test]
fn no_decay_means_no_defect() {
    let sb = Sandbox::new();
    let cfg = sb.config("[defect]\nlambda = { min = 0.0, max = 0.0, count = 1 }\n");
    let out = sb.out("o");
    let o = olor(&["delay-defect"], Some(&cfg), Some(&out));
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("defect.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|c| *c == "defect").unwrap();
    let mut rows = 0;
    for line in lines {
        assert_eq!(line.split(',').nth(col), Some("false"));
        rows += 1;
    }
    assert_eq!(rows, 41 * 41);
}
