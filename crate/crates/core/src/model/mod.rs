//! The full relation classifier: input assembly, encoder, position-aware
//! attention (or max-pool summary), and a linear output layer.

mod checkpoint;
mod init;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use init::{init_params, Init, InitScheme, ParamSpec};

use crate::data::{Batch, Vocabularies};
use crate::encoder::{self, EncoderConfig, EncoderOutput};
use crate::error::{Error, Result};
use crate::posattn::{self, PosAttnConfig, PosAttnTrace};
use crate::tensor::{BatchStats, ParamStore, RngState, Tape, Tensor, Var};

/// How stochastic layers behave during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    /// Dropout on, sampled RReLU slopes, batch-norm batch statistics.
    Train,
    /// Dropout off, midpoint RReLU slope, batch-norm running statistics.
    Eval,
    /// Like `Eval` but batch norm uses batch statistics, so the pass is a
    /// smooth deterministic function of the parameters.
    Deterministic,
}

impl ForwardMode {
    pub fn dropout(self) -> bool {
        self == ForwardMode::Train
    }

    pub fn sample_activation(self) -> bool {
        self == ForwardMode::Train
    }

    pub fn batch_statistics(self) -> bool {
        self != ForwardMode::Eval
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub word_dim: usize,
    pub ner_dim: usize,
    pub pos_dim: usize,
    pub encoder: EncoderConfig,
    /// Position-aware attention on top of the encoder; when off the
    /// max-pooled summary feeds the classifier.
    pub use_posattn: bool,
    pub posattn: PosAttnConfig,
    /// Add a learned embedding of the binned offset to the object.
    pub obj_pos_embedding: bool,
    pub init: InitScheme,
    pub freeze_word_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            word_dim: 300,
            ner_dim: 30,
            pos_dim: 30,
            encoder: EncoderConfig::default(),
            use_posattn: true,
            posattn: PosAttnConfig::default(),
            obj_pos_embedding: true,
            init: InitScheme::Kaiming,
            freeze_word_embeddings: false,
        }
    }
}

impl ModelConfig {
    pub fn d_model(&self) -> usize {
        self.word_dim + self.ner_dim + self.pos_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.word_dim == 0 || self.ner_dim == 0 || self.pos_dim == 0 {
            return Err(Error::Config("embedding widths must be positive".into()));
        }
        self.encoder.validate(self.d_model())?;
        self.posattn.validate()
    }

    pub fn param_specs(&self, vocabs: &Vocabularies) -> Vec<ParamSpec> {
        let d = self.d_model();
        let mut specs = vec![
            ParamSpec::new("emb.word", &[vocabs.words.len(), self.word_dim], Init::Embedding),
            ParamSpec::new("emb.ner", &[vocabs.ner.len(), self.ner_dim], Init::Embedding),
            ParamSpec::new("emb.pos", &[vocabs.pos.len(), self.pos_dim], Init::Embedding),
        ];
        if self.obj_pos_embedding {
            specs.push(ParamSpec::new("emb.objpos", &[self.posattn.bins.table_rows(), d], Init::Embedding));
        }
        specs.extend(self.encoder.param_specs(d));
        if self.use_posattn {
            specs.extend(self.posattn.param_specs(d));
        }
        specs.push(ParamSpec::weight("cls.w", d, vocabs.labels.len()));
        specs.push(ParamSpec::new("cls.b", &[vocabs.labels.len()], Init::Zeros));
        specs
    }

    /// Build the computation graph for one batch.
    pub fn forward(&self, tape: &mut Tape, batch: &Batch, mode: ForwardMode, rng: &mut RngState) -> Result<ForwardOutput> {
        let bins = &self.posattn.bins;
        let obj_ids = posattn::position_ids(batch, bins, |b| batch.obj_spans[b])?;
        let e = encoder::assemble_input(tape, batch, self.obj_pos_embedding.then_some(obj_ids.as_slice()))?;
        let enc = encoder::encode(tape, &self.encoder, e, &batch.mask, mode, rng)?;
        let summary = tape.max_pool_seq(enc.h, &batch.mask)?;
        let (z, pa) = if self.use_posattn {
            let subj_ids = posattn::position_ids(batch, bins, |b| batch.subj_spans[b])?;
            let t = posattn::position_aware_attention(tape, enc.h, summary, &subj_ids, &obj_ids, &batch.mask)?;
            (t.z, Some(t))
        } else {
            (summary, None)
        };
        let z = tape.dropout(z, self.encoder.block_dropout, mode.dropout(), rng)?;
        let w = tape.param("cls.w")?;
        let b = tape.param("cls.b")?;
        let logits = tape.matmul(z, w)?;
        let logits = tape.add_bias(logits, b)?;
        Ok(ForwardOutput { logits, encoder: enc, summary, posattn: pa, input: e })
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[B, C]`.
    pub logits: Var,
    pub input: Var,
    pub encoder: EncoderOutput,
    /// Max-pooled encoder output `[B, D]`.
    pub summary: Var,
    pub posattn: Option<PosAttnTrace>,
}

/// Row-wise argmax; ties go to the lowest index.
pub fn predict(logits: &Tensor) -> Vec<usize> {
    logits.data().chunks(logits.cols()).map(argmax).collect()
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Row-wise softmax of a `[B, C]` logit matrix.
pub fn probabilities(logits: &Tensor) -> Vec<Vec<f64>> {
    logits
        .data()
        .chunks(logits.cols())
        .map(|row| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

/// A configured model with its vocabularies and parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocabs: Vocabularies,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, vocabs: Vocabularies, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        if vocabs.labels.is_empty() {
            return Err(Error::Config("label set is empty".into()));
        }
        let mut params = init_params(&config.param_specs(&vocabs), config.init, rng);
        if config.freeze_word_embeddings {
            params.get_mut("emb.word")?.requires_grad = false;
        }
        Ok(Self { config, vocabs, params })
    }

    pub fn num_labels(&self) -> usize {
        self.vocabs.labels.len()
    }

    /// Replace the word embedding table, e.g. with pretrained vectors.
    pub fn set_word_embeddings(&mut self, table: Tensor) -> Result<()> {
        let cur = self.params.get_mut("emb.word")?;
        if cur.shape() != table.shape() {
            return Err(Error::dim(format!(
                "word table {:?} does not match {:?}",
                table.shape(),
                cur.shape()
            )));
        }
        let trainable = cur.requires_grad;
        *cur = table;
        cur.requires_grad = trainable;
        Ok(())
    }

    pub fn logits(&self, batch: &Batch, mode: ForwardMode, rng: &mut RngState) -> Result<Tensor> {
        let mut tape = Tape::new(&self.params);
        let out = self.config.forward(&mut tape, batch, mode, rng)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Inference-mode logits.
    pub fn eval_logits(&self, batch: &Batch) -> Result<Tensor> {
        self.logits(batch, ForwardMode::Eval, &mut RngState::new(0))
    }

    pub fn predict_batch(&self, batch: &Batch) -> Result<Vec<usize>> {
        Ok(predict(&self.eval_logits(batch)?))
    }

    /// Fold training-mode batch statistics into the running buffers:
    /// `running ← (1 - momentum) · running + momentum · batch`.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats)]) -> Result<()> {
        let m = self.config.encoder.bn_momentum;
        for (prefix, s) in stats {
            for (suffix, values) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let t = self.params.get_mut(&format!("{prefix}.{suffix}"))?;
                for (r, &v) in t.data_mut().iter_mut().zip(values.iter()) {
                    *r = (1.0 - m) * *r + m * v;
                }
            }
        }
        Ok(())
    }
}
