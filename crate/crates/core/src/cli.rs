//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::check::{gradcheck_variant, Variant, GRADCHECK_TOLERANCE};
use crate::config::{parse_overrides, resolve_output, DatasetKind, RunConfig};
use crate::data::{
    generate_synthetic, load_glove, load_tacred_json, save_tacred_json, RelationInstance, Vocabularies,
};
use crate::error::{Error, Result};
use crate::eval::{score_model, write_predictions, predict_instances, ScoreReport};
use crate::model::{load_checkpoint, save_checkpoint, Model};
use crate::tensor::{OpKind, RngState};
use crate::train::{metrics_csv, score_ensemble, train};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.csv";
pub const DEV_REPORT_FILE: &str = "dev_report.json";
pub const TEST_REPORT_FILE: &str = "test_report.json";

#[derive(Parser, Debug)]
#[command(name = "relattn", version, about = "Self-attention relation classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes a checkpoint, a CSV log and dev/test reports.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// `--key value` settings that override the config file.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Score a checkpoint on a TACRED-format file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory for `report.json` and `predictions.txt`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        batch_size: usize,
    },
    /// Write one predicted label per input instance.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        batch_size: usize,
    },
    /// Majority-vote several checkpoints and score the result.
    Ensemble {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        batch_size: usize,
    },
    /// Finite-difference gradient check of a reduced-width model.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Check every residual / norm / activation / position combination.
        #[arg(long)]
        sweep: bool,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Generate synthetic train/dev/test splits in TACRED format.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Tabulate the test reports of several training runs.
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

/// Parse arguments and run; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { config, overrides } => {
            let cfg = RunConfig::load(&config, &parse_overrides(&overrides)?)?;
            let summary = cmd_train(&cfg, true)?;
            println!("{summary}");
            Ok(())
        }
        Command::Eval { checkpoint, data, out, batch_size } => {
            let report = cmd_eval(&checkpoint, &data, out.as_deref(), batch_size)?;
            print!("{}", report.to_table());
            Ok(())
        }
        Command::Predict { checkpoint, data, out, batch_size } => {
            let model = load_checkpoint(&checkpoint)?;
            let instances = load_tacred_json(&data)?;
            let pred = predict_instances(&model, &instances, batch_size)?;
            write_predictions(&resolve_output(&out), &model.vocabs.labels, &pred)
        }
        Command::Ensemble { checkpoints, data, out, batch_size } => {
            let report = cmd_ensemble(&checkpoints, &data, out.as_deref(), batch_size)?;
            print!("{}", report.to_table());
            Ok(())
        }
        Command::Gradcheck { config, sweep, seed, inject_fault, overrides } => {
            let overrides = parse_overrides(&overrides)?;
            let cfg = match config {
                Some(p) => RunConfig::load(&p, &overrides)?,
                None => RunConfig::from_toml_str("", &overrides)?,
            };
            let fault = match inject_fault {
                Some(name) => Some((
                    OpKind::parse(&name).ok_or_else(|| Error::Usage(format!("unknown op kind `{name}`")))?,
                    1.5,
                )),
                None => None,
            };
            let variants = if sweep { Variant::sweep() } else { vec![Variant::of(&cfg.model_config())] };
            cmd_gradcheck(&variants, seed, fault)
        }
        Command::Synth { config, out, overrides } => {
            let overrides = parse_overrides(&overrides)?;
            let cfg = match config {
                Some(p) => RunConfig::load(&p, &overrides)?,
                None => RunConfig::from_toml_str("", &overrides)?,
            };
            cmd_synth(&cfg, &out)
        }
        Command::Compare { runs } => {
            print!("{}", compare_table(&runs)?);
            Ok(())
        }
    }
}

fn load_split(key: &str, path: &Path) -> Result<Vec<RelationInstance>> {
    load_tacred_json(path).map_err(|e| match e {
        Error::Io { path, source } => Error::Data(format!("{key}: cannot read {}: {source}", path.display())),
        other => other,
    })
}

/// Train, dev and optional test splits selected by the config.
pub fn load_splits(cfg: &RunConfig) -> Result<(Vec<RelationInstance>, Vec<RelationInstance>, Vec<RelationInstance>)> {
    match cfg.dataset {
        DatasetKind::Synthetic => {
            let s = generate_synthetic(&cfg.synthetic_config(), &mut RngState::new(cfg.synth_seed))?;
            Ok((s.train, s.dev, s.test))
        }
        DatasetKind::Tacred => {
            let required = |key: &str, p: &Option<PathBuf>| {
                p.clone()
                    .ok_or_else(|| Error::Config(format!("{key} must be set when dataset = \"tacred\"")))
            };
            let train = load_split("train_path", &required("train_path", &cfg.train_path)?)?;
            let dev = load_split("dev_path", &required("dev_path", &cfg.dev_path)?)?;
            let test = match &cfg.test_path {
                Some(p) => load_split("test_path", p)?,
                None => Vec::new(),
            };
            Ok((train, dev, test))
        }
    }
}

/// Outcome of a training run.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub output_dir: PathBuf,
    pub best_epoch: usize,
    pub dev: ScoreReport,
    pub test: Option<ScoreReport>,
}

impl std::fmt::Display for TrainSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "best epoch {}: dev F1 {:.4}", self.best_epoch, self.dev.f1)?;
        if let Some(t) = &self.test {
            write!(f, ", test P {:.4} R {:.4} F1 {:.4}", t.precision, t.recall, t.f1)?;
        }
        write!(f, " ({})", self.output_dir.display())
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Full training pipeline for a resolved config.
pub fn cmd_train(cfg: &RunConfig, progress: bool) -> Result<TrainSummary> {
    let (train_set, dev_set, test_set) = load_splits(cfg)?;
    if train_set.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let vocabs = Vocabularies::from_splits(&train_set, &[&dev_set, &test_set], cfg.min_count);
    let mut root = RngState::new(cfg.seed);
    let mut model = Model::new(cfg.model_config(), vocabs, &mut root.fork(1))?;
    if let Some(path) = &cfg.glove_path {
        let table = load_glove(path, &model.vocabs.words, cfg.word_dim, &mut root.fork(3))?;
        model.set_word_embeddings(table.matrix)?;
    }
    let out_dir = cfg.resolved_output_dir();
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let outcome = train(&mut model, &train_set, &dev_set, &cfg.train_config(), &mut root.fork(2), |m| {
        if progress {
            eprintln!(
                "epoch {:>3}  loss {:.4}  dev P {:.4} R {:.4} F1 {:.4}  lr {:.5}",
                m.epoch, m.loss, m.dev_p, m.dev_r, m.dev_f1, m.lr
            );
        }
    })?;
    model.params = outcome.best;
    save_checkpoint(&model, &out_dir.join(CHECKPOINT_FILE))?;
    write_file(&out_dir.join(LOG_FILE), metrics_csv(&outcome.log))?;
    write_file(&out_dir.join(DEV_REPORT_FILE), outcome.best_dev.to_json())?;
    let test = if test_set.is_empty() {
        None
    } else {
        let (report, _) = score_model(&model, &test_set, cfg.batch_size)?;
        write_file(&out_dir.join(TEST_REPORT_FILE), report.to_json())?;
        Some(report)
    };
    Ok(TrainSummary { output_dir: out_dir, best_epoch: outcome.best_epoch, dev: outcome.best_dev, test })
}

pub fn cmd_eval(checkpoint: &Path, data: &Path, out: Option<&Path>, batch_size: usize) -> Result<ScoreReport> {
    let model = load_checkpoint(checkpoint)?;
    let instances = load_tacred_json(data)?;
    let (report, pred) = score_model(&model, &instances, batch_size)?;
    if let Some(out) = out {
        let dir = resolve_output(out);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_file(&dir.join("report.json"), report.to_json())?;
        write_predictions(&dir.join("predictions.txt"), &model.vocabs.labels, &pred)?;
    }
    Ok(report)
}

pub fn cmd_ensemble(checkpoints: &[PathBuf], data: &Path, out: Option<&Path>, batch_size: usize) -> Result<ScoreReport> {
    let models = checkpoints.iter().map(|p| load_checkpoint(p)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Model> = models.iter().collect();
    let instances = load_tacred_json(data)?;
    let (report, pred) = score_ensemble(&refs, &instances, batch_size)?;
    if let Some(out) = out {
        let dir = resolve_output(out);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_file(&dir.join("report.json"), report.to_json())?;
        write_predictions(&dir.join("predictions.txt"), &models[0].vocabs.labels, &pred)?;
    }
    Ok(report)
}

/// Check each variant and print its worst parameter; fails with a numeric
/// error when any relative error reaches the tolerance.
pub fn cmd_gradcheck(variants: &[Variant], seed: u64, fault: Option<(OpKind, f64)>) -> Result<()> {
    let mut worst = (0.0f64, String::new());
    for v in variants {
        let report = gradcheck_variant(*v, seed, fault)?;
        let name = report.worst.clone().unwrap_or_default();
        println!("{v}: max relative error {:.3e} ({name})", report.max_rel_error);
        if report.max_rel_error >= worst.0 {
            worst = (report.max_rel_error, name);
        }
    }
    println!("max relative error {:.3e} at {}", worst.0, worst.1);
    if worst.0 < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check failed: relative error {:.3e} >= {GRADCHECK_TOLERANCE:e} at {}",
            worst.0, worst.1
        )))
    }
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let splits = generate_synthetic(&cfg.synthetic_config(), &mut RngState::new(cfg.synth_seed))?;
    let dir = resolve_output(out);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (name, split) in [("train", &splits.train), ("dev", &splits.dev), ("test", &splits.test)] {
        save_tacred_json(dir.join(format!("{name}.json")), split)?;
    }
    Ok(())
}

/// Markdown table of `test_report.json` from each run directory.
pub fn compare_table(runs: &[PathBuf]) -> Result<String> {
    let mut s = String::from("| run | P | R | F1 |\n|---|---|---|---|\n");
    for run in runs {
        let path = resolve_output(run).join(TEST_REPORT_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let r: ScoreReport = serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.clone(), msg: e.to_string() })?;
        let name = run.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        s.push_str(&format!("| {name} | {:.4} | {:.4} | {:.4} |\n", r.precision, r.recall, r.f1));
    }
    Ok(s)
}
