use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
# tiny run
model_dim = 24
depth = 2
heads = 2
search_size = 16
template_size = 8
head_hidden = 8
level_taps = 1,2
train_size = 4
test_size = 4
steps = 2
log_every = 1
";

fn sdmoe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdmoe")).args(args).output().unwrap()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("small.cfg");
    std::fs::write(&path, SMALL).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let run = dir.path().join("run");
    let out = sdmoe(&["train", "--config", &cfg, "--seed", "3", "--out", run.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 4);
    for f in ["config.txt", "metrics.tsv", "model.manifest", "model.bin"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let saved = std::fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(saved.contains("seed = 3"));

    let out = sdmoe(&["eval", "--model", run.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    // Training lines carry training-set losses; the held-out scores must agree.
    let eval_line = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .last()
        .unwrap()
        .to_owned();
    let scores = |line: &str| line.split('\t').skip(7).take(3).map(str::to_owned).collect::<Vec<_>>();
    assert_eq!(scores(&eval_line), scores(stdout.lines().last().unwrap()));
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("x");
    let out = out.to_str().unwrap();
    assert_eq!(
        sdmoe(&["train", "--config", &cfg, "--top-k", "9", "--out", out])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        sdmoe(&["train", "--config", &cfg, "--toggle-mff", "maybe", "--out", out])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(sdmoe(&["train", "--config", &cfg]).status.code(), Some(2));
    assert_eq!(
        sdmoe(&["train", "--config", "/nonexistent.cfg", "--out", out])
            .status
            .code(),
        Some(2)
    );
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "no_such_key = 1\n").unwrap();
    assert_eq!(
        sdmoe(&["gen-data", "--config", bad.to_str().unwrap(), "--out", out])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn divergent_training_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("run");
    let res = sdmoe(&[
        "train",
        "--config",
        &cfg,
        "--lr",
        "1e300",
        "--steps",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn gen_data_writes_both_splits() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = sdmoe(&["gen-data", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    for f in ["train.manifest", "train.bin", "test.manifest", "test.bin"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn gradcheck_passes_on_the_tiny_tracker() {
    let out = sdmoe(&["gradcheck"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8(out.stdout).unwrap().contains("worst"));
}
