use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use relattn::cli::{CHECKPOINT_FILE, DEV_REPORT_FILE, LOG_FILE, TEST_REPORT_FILE};
use relattn::config::OUTPUT_ROOT_ENV;
use relattn::data::{load_tacred_json, LabelSet};
use relattn::eval::{micro_prf, read_predictions, ScoreReport};
use relattn::model::load_checkpoint;

const SMALL: &str = r#"
dataset = "synthetic"
synth_train = 300
synth_dev = 60
synth_test = 60
word_dim = 8
ner_dim = 2
pos_dim = 2
num_heads = 2
ff_hidden = 6
max_len = 20
posattn_pos_dim = 3
posattn_attn_dim = 5
epochs = 2
batch_size = 25
"#;

fn relattn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relattn"))
        .args(args)
        .env_remove(OUTPUT_ROOT_ENV)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, format!("{SMALL}{extra}")).unwrap();
    path
}

fn train_run(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let cfg = write_config(dir, "");
    let out = dir.join(name);
    let mut args = vec!["train", "--config", cfg.to_str().unwrap(), "--output-dir", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = relattn(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    out
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_writes_loadable_reproducible_splits() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = relattn(&["synth", "--out", path_str(out), "--synth-train", "120", "--synth-dev", "30", "--synth-test", "20"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for (split, n) in [("train", 120), ("dev", 30), ("test", 20)] {
        let file = format!("{split}.json");
        assert_eq!(load_tacred_json(a.join(&file)).unwrap().len(), n);
        assert_eq!(fs::read(a.join(&file)).unwrap(), fs::read(b.join(&file)).unwrap());
    }
}

#[test]
fn train_writes_all_artifacts_quickly_and_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let a = train_run(dir.path(), "a", &[]);
    assert!(start.elapsed() < Duration::from_secs(60));
    for f in [CHECKPOINT_FILE, LOG_FILE, DEV_REPORT_FILE, TEST_REPORT_FILE] {
        assert!(a.join(f).is_file(), "missing {f}");
    }
    let log = fs::read_to_string(a.join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 3);
    let b = train_run(dir.path(), "b", &[]);
    assert_eq!(fs::read(a.join(CHECKPOINT_FILE)).unwrap(), fs::read(b.join(CHECKPOINT_FILE)).unwrap());
    assert_eq!(log, fs::read_to_string(b.join(LOG_FILE)).unwrap());
    let c = train_run(dir.path(), "c", &["--seed", "2"]);
    assert_ne!(log, fs::read_to_string(c.join(LOG_FILE)).unwrap());
}

#[test]
fn missing_data_paths_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = relattn(&["train", "--config", path_str(&cfg), "--dataset", "tacred"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train_path"), "{}", stderr(&o));

    let missing = dir.path().join("nope.json");
    let o = relattn(&[
        "train", "--config", path_str(&cfg), "--dataset", "tacred", "--train-path", path_str(&missing), "--dev-path",
        path_str(&missing),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train_path"), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bogus_key = 3\n");
    let o = relattn(&["train", "--config", path_str(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bogus_key"));
    assert_eq!(relattn(&["frobnicate"]).status.code(), Some(1));
    let cfg = write_config(dir.path(), "");
    let o = relattn(&["train", "--config", path_str(&cfg), "--num-heads", "5"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn eval_report_matches_dumped_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_run(dir.path(), "run", &[]);
    let data = dir.path().join("data");
    let o = relattn(&["synth", "--out", path_str(&data), "--synth-train", "50", "--synth-test", "80", "--synth-seed", "3"]);
    assert_eq!(o.status.code(), Some(0));
    let test = data.join("test.json");
    let out = dir.path().join("eval");
    let ckpt = run.join(CHECKPOINT_FILE);
    let o = relattn(&["eval", "--checkpoint", path_str(&ckpt), "--data", path_str(&test), "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: ScoreReport = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let labels = load_checkpoint(&ckpt).unwrap().vocabs.labels;
    let pred: Vec<usize> = read_predictions(&out.join("predictions.txt"))
        .unwrap()
        .iter()
        .map(|n| labels.id(n).unwrap())
        .collect();
    let gold: Vec<usize> = load_tacred_json(&test)
        .unwrap()
        .iter()
        .map(|i| labels.id(&i.relation).unwrap())
        .collect();
    let expect = micro_prf(&gold, &pred, LabelSet::NA_ID).unwrap();
    assert_eq!((report.precision, report.recall, report.f1), (expect.precision, expect.recall, expect.f1));

    let predict_out = dir.path().join("pred.txt");
    let o = relattn(&["predict", "--checkpoint", path_str(&ckpt), "--data", path_str(&test), "--out", path_str(&predict_out)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(fs::read(&predict_out).unwrap(), fs::read(out.join("predictions.txt")).unwrap());

    let ens = dir.path().join("ens");
    let mut args = vec!["ensemble", "--data", path_str(&test), "--out", path_str(&ens)];
    for _ in 0..5 {
        args.extend(["--checkpoint", path_str(&ckpt)]);
    }
    let o = relattn(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read(ens.join("report.json")).unwrap(), fs::read(out.join("report.json")).unwrap());
    let one = dir.path().join("one");
    let o = relattn(&["ensemble", "--data", path_str(&test), "--out", path_str(&one), "--checkpoint", path_str(&ckpt)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(fs::read(one.join("predictions.txt")).unwrap(), fs::read(out.join("predictions.txt")).unwrap());

    let o = relattn(&["compare", path_str(&run)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("| run |"));
}

#[test]
fn corrupt_checkpoint_exits_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("bad.ckpt");
    fs::write(&ckpt, b"not a checkpoint").unwrap();
    let data = dir.path().join("d.json");
    fs::write(&data, "[]").unwrap();
    let o = relattn(&["eval", "--checkpoint", path_str(&ckpt), "--data", path_str(&data)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("checkpoint"));
}

#[test]
fn gradcheck_passes_and_catches_a_corrupted_rule() {
    let o = relattn(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout).into_owned();
    assert!(stdout.lines().last().unwrap().starts_with("max relative error"));
    let o = relattn(&["gradcheck", "--inject-fault", "tanh"]);
    assert_eq!(o.status.code(), Some(3));
    let stdout = String::from_utf8_lossy(&o.stdout).into_owned();
    assert!(stdout.contains("pa."), "{stdout}");
}

#[test]
fn relative_outputs_resolve_under_the_output_root() {
    let root = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_relattn"))
        .args(["synth", "--out", "splits", "--synth-train", "10", "--synth-dev", "5", "--synth-test", "5"])
        .env(OUTPUT_ROOT_ENV, root.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(root.path().join("splits/train.json").is_file());
}
