//! Flat TOML run configuration with command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticConfig;
use crate::encoder::{Activation, EncoderConfig, NormKind, PositionMode, ResidualKind};
use crate::error::{Error, Result};
use crate::model::{InitScheme, ModelConfig};
use crate::posattn::{BinConfig, PosAttnConfig};
use crate::train::TrainConfig;

/// Environment variable whose value prefixes relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "RELATTN_OUTPUT_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    Tacred,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    pub train_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub glove_path: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub min_count: usize,

    pub synth_num_cues: usize,
    pub synth_filler_vocab: usize,
    pub synth_min_len: usize,
    pub synth_max_len: usize,
    pub synth_train: usize,
    pub synth_dev: usize,
    pub synth_test: usize,
    pub synth_seed: u64,

    pub word_dim: usize,
    pub ner_dim: usize,
    pub pos_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub ff_hidden: usize,
    pub position_mode: PositionMode,
    pub norm: NormKind,
    pub residual: ResidualKind,
    pub activation: Activation,
    pub attn_dropout: f64,
    pub block_dropout: f64,
    pub scale_scores: bool,
    pub max_len: usize,
    pub rrelu_lower: f64,
    pub rrelu_upper: f64,
    pub norm_eps: f64,
    pub bn_momentum: f64,
    pub use_posattn: bool,
    pub posattn_pos_dim: usize,
    pub posattn_attn_dim: usize,
    pub bin_widths: Vec<usize>,
    pub obj_pos_embedding: bool,
    pub init: InitScheme,
    pub freeze_word_embeddings: bool,

    pub lr: f64,
    pub lr_decay: f64,
    pub patience: usize,
    pub decay_start_epoch: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub max_grad_norm: f64,
    pub weight_decay: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let e = &m.encoder;
        let t = TrainConfig::default();
        let s = SyntheticConfig::default();
        Self {
            dataset: DatasetKind::Synthetic,
            train_path: None,
            dev_path: None,
            test_path: None,
            glove_path: None,
            output_dir: PathBuf::from("runs/default"),
            min_count: 1,
            synth_num_cues: s.num_cues,
            synth_filler_vocab: s.filler_vocab,
            synth_min_len: s.min_len,
            synth_max_len: s.max_len,
            synth_train: s.train,
            synth_dev: s.dev,
            synth_test: s.test,
            synth_seed: 7,
            word_dim: m.word_dim,
            ner_dim: m.ner_dim,
            pos_dim: m.pos_dim,
            num_heads: e.num_heads,
            num_layers: e.num_layers,
            ff_hidden: e.ff_hidden,
            position_mode: e.position_mode,
            norm: e.norm,
            residual: e.residual,
            activation: e.activation,
            attn_dropout: e.attn_dropout,
            block_dropout: e.block_dropout,
            scale_scores: e.scale_scores,
            max_len: e.max_len,
            rrelu_lower: e.rrelu_lower,
            rrelu_upper: e.rrelu_upper,
            norm_eps: e.norm_eps,
            bn_momentum: e.bn_momentum,
            use_posattn: m.use_posattn,
            posattn_pos_dim: m.posattn.pos_dim,
            posattn_attn_dim: m.posattn.attn_dim,
            bin_widths: m.posattn.bins.widths.clone(),
            obj_pos_embedding: m.obj_pos_embedding,
            init: m.init,
            freeze_word_embeddings: m.freeze_word_embeddings,
            lr: t.lr,
            lr_decay: t.lr_decay,
            patience: t.patience,
            decay_start_epoch: t.decay_start_epoch,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: t.seed,
            max_grad_norm: t.max_grad_norm,
            weight_decay: t.weight_decay,
        }
    }
}

/// Parse a command-line value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Split `--key value` / `--key=value` pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(key) = arg.strip_prefix("--") else {
            return Err(Error::Usage(format!("expected --key value override, got `{arg}`")));
        };
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Usage(format!("override --{key} is missing a value")))?;
                (key.to_string(), v.clone())
            }
        };
        out.push((key.replace('-', "_"), value));
    }
    Ok(out)
}

impl RunConfig {
    pub fn from_toml_str(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        for (k, v) in overrides {
            table.insert(k.clone(), parse_value(v));
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train_config().validate()?;
        if self.dataset == DatasetKind::Synthetic {
            self.synthetic_config().validate()?;
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let bins = BinConfig::with_widths(self.bin_widths.clone(), self.max_len);
        ModelConfig {
            word_dim: self.word_dim,
            ner_dim: self.ner_dim,
            pos_dim: self.pos_dim,
            encoder: EncoderConfig {
                num_heads: self.num_heads,
                num_layers: self.num_layers,
                ff_hidden: self.ff_hidden,
                position_mode: self.position_mode,
                norm: self.norm,
                residual: self.residual,
                activation: self.activation,
                attn_dropout: self.attn_dropout,
                block_dropout: self.block_dropout,
                scale_scores: self.scale_scores,
                max_len: self.max_len,
                rrelu_lower: self.rrelu_lower,
                rrelu_upper: self.rrelu_upper,
                norm_eps: self.norm_eps,
                bn_momentum: self.bn_momentum,
            },
            use_posattn: self.use_posattn,
            posattn: PosAttnConfig {
                pos_dim: self.posattn_pos_dim,
                attn_dim: self.posattn_attn_dim,
                bins,
            },
            obj_pos_embedding: self.obj_pos_embedding,
            init: self.init,
            freeze_word_embeddings: self.freeze_word_embeddings,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            lr_decay: self.lr_decay,
            patience: self.patience,
            decay_start_epoch: self.decay_start_epoch,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            max_grad_norm: self.max_grad_norm,
            weight_decay: self.weight_decay,
        }
    }

    pub fn synthetic_config(&self) -> SyntheticConfig {
        SyntheticConfig {
            num_cues: self.synth_num_cues,
            filler_vocab: self.synth_filler_vocab,
            min_len: self.synth_min_len,
            max_len: self.synth_max_len,
            train: self.synth_train,
            dev: self.synth_dev,
            test: self.synth_test,
        }
    }

    /// `output_dir`, prefixed by `$RELATTN_OUTPUT_ROOT` when it is relative
    /// and the variable is set.
    pub fn resolved_output_dir(&self) -> PathBuf {
        resolve_output(&self.output_dir)
    }
}

pub fn resolve_output(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if path.is_relative() && !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}
