//! Self-attention encoder: input assembly, multi-head attention with
//! pairwise and relative-position scores, the feed-forward sublayer, and the
//! residual / normalization / activation variants.

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::{ForwardMode, Init, ParamSpec};
use crate::tensor::{BatchStats, RngState, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    Relative,
    AbsoluteSinusoidal,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Batch,
    Layer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualKind {
    /// One connection from the layer input to the norm after the feed-forward block.
    SingleSpan,
    /// A connection around each of the attention and feed-forward blocks.
    OriginalTwo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Rrelu,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
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
    /// Longest sentence the relative-position tables cover.
    pub max_len: usize,
    pub rrelu_lower: f64,
    pub rrelu_upper: f64,
    pub norm_eps: f64,
    pub bn_momentum: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_heads: 3,
            num_layers: 1,
            ff_hidden: 130,
            position_mode: PositionMode::Relative,
            norm: NormKind::Batch,
            residual: ResidualKind::SingleSpan,
            activation: Activation::Rrelu,
            attn_dropout: 0.1,
            block_dropout: 0.4,
            scale_scores: true,
            max_len: 100,
            rrelu_lower: 1.0 / 8.0,
            rrelu_upper: 1.0 / 3.0,
            norm_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self, d_model: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_heads == 0 || self.num_layers == 0 || self.ff_hidden == 0 || self.max_len == 0 {
            return bad("num_heads, num_layers, ff_hidden and max_len must be positive".into());
        }
        if !d_model.is_multiple_of(self.num_heads) {
            return bad(format!("model width {d_model} is not divisible by {} heads", self.num_heads));
        }
        for (name, p) in [("attn_dropout", self.attn_dropout), ("block_dropout", self.block_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} must be in [0, 1), got {p}"));
            }
        }
        if !(0.0 < self.rrelu_lower && self.rrelu_lower <= self.rrelu_upper && self.rrelu_upper < 1.0) {
            return bad(format!(
                "rrelu bounds must satisfy 0 < lower <= upper < 1, got ({}, {})",
                self.rrelu_lower, self.rrelu_upper
            ));
        }
        if self.norm_eps <= 0.0 {
            return bad("norm_eps must be positive".into());
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return bad("bn_momentum must be in (0, 1]".into());
        }
        if self.position_mode == PositionMode::AbsoluteSinusoidal && !d_model.is_multiple_of(2) {
            return bad(format!("sinusoidal encodings need an even width, got {d_model}"));
        }
        Ok(())
    }

    pub fn head_dim(&self, d_model: usize) -> usize {
        d_model / self.num_heads
    }

    fn norm_names(&self, layer: usize) -> Vec<String> {
        let mut names = vec![format!("enc.{layer}.norm_out")];
        if self.residual == ResidualKind::OriginalTwo {
            names.insert(0, format!("enc.{layer}.norm_attn"));
        }
        names
    }

    pub fn param_specs(&self, d_model: usize) -> Vec<ParamSpec> {
        let dh = self.head_dim(d_model);
        let mut specs = Vec::new();
        for l in 0..self.num_layers {
            for h in 0..self.num_heads {
                let p = format!("enc.{l}.head.{h}");
                for m in ["wq", "wk", "wv"] {
                    specs.push(ParamSpec::weight(format!("{p}.{m}"), d_model, dh));
                }
                if self.position_mode == PositionMode::Relative {
                    specs.push(ParamSpec::weight(format!("{p}.wr"), d_model, dh));
                    specs.push(ParamSpec::new(format!("{p}.rel"), &[2 * self.max_len - 1, dh], Init::Zeros));
                }
            }
            specs.push(ParamSpec::weight(format!("enc.{l}.attn.wo"), d_model, d_model));
            specs.push(ParamSpec::new(format!("enc.{l}.attn.bo"), &[d_model], Init::Zeros));
            specs.push(ParamSpec::weight(format!("enc.{l}.ff.w1"), d_model, self.ff_hidden));
            specs.push(ParamSpec::new(format!("enc.{l}.ff.b1"), &[self.ff_hidden], Init::Zeros));
            specs.push(ParamSpec::weight(format!("enc.{l}.ff.w2"), self.ff_hidden, d_model));
            specs.push(ParamSpec::new(format!("enc.{l}.ff.b2"), &[d_model], Init::Zeros));
            for n in self.norm_names(l) {
                specs.push(ParamSpec::new(format!("{n}.gamma"), &[d_model], Init::Ones));
                specs.push(ParamSpec::new(format!("{n}.beta"), &[d_model], Init::Zeros));
                if self.norm == NormKind::Batch {
                    specs.push(ParamSpec::new(format!("{n}.running_mean"), &[d_model], Init::Buffer(0.0)));
                    specs.push(ParamSpec::new(format!("{n}.running_var"), &[d_model], Init::Buffer(1.0)));
                }
            }
        }
        specs
    }
}

/// Per-head intermediate values. Shapes are `[B, n, d_h]` for projections
/// and `[B, n, n]` for scores and weights.
#[derive(Clone, Copy, Debug)]
pub struct HeadTrace {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub r: Option<Var>,
    pub z_pair: Var,
    pub z_relpos: Option<Var>,
    pub weights: Var,
    pub out: Var,
}

#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub heads: Vec<HeadTrace>,
    pub h: Var,
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Final hidden states `[B, n, D]`, zero at padding.
    pub h: Var,
    pub layers: Vec<LayerTrace>,
    /// Batch statistics observed by each batch-norm layer, keyed by parameter prefix.
    pub stats: Vec<(String, BatchStats)>,
}

/// Concatenate word, NER and POS embeddings and add the object-position
/// embedding when `objpos_ids` is given. Output `[B, n, D]`, zero at padding.
pub fn assemble_input(tape: &mut Tape, batch: &Batch, objpos_ids: Option<&[usize]>) -> Result<Var> {
    let shape = [batch.size, batch.max_len];
    let word = tape.param("emb.word")?;
    let ner = tape.param("emb.ner")?;
    let pos = tape.param("emb.pos")?;
    let w = tape.embedding(word, &batch.words, &shape)?;
    let n = tape.embedding(ner, &batch.ner, &shape)?;
    let p = tape.embedding(pos, &batch.pos, &shape)?;
    let e = tape.concat(&[w, n, p])?;
    match objpos_ids {
        Some(ids) => {
            let table = tape.param("emb.objpos")?;
            let o = tape.embedding(table, ids, &shape)?;
            tape.add(e, o)
        }
        None => Ok(e),
    }
}

/// Interleaved sinusoids: `PE[p, 2k] = sin(p / 10000^(2k/d))`,
/// `PE[p, 2k+1] = cos(p / 10000^(2k/d))`.
pub fn sinusoidal_encoding(n: usize, d: usize) -> Result<Tensor> {
    if !d.is_multiple_of(2) {
        return Err(Error::Config(format!("sinusoidal encodings need an even width, got {d}")));
    }
    let mut out = vec![0.0; n * d];
    for p in 0..n {
        for k in 0..d / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * k as f64 / d as f64);
            out[p * d + 2 * k] = angle.sin();
            out[p * d + 2 * k + 1] = angle.cos();
        }
    }
    Tensor::new(&[n, d], out)
}

/// `M_i` for 1-based query position `i`: column `j` (1-based) holds
/// `m_{j-i}`. `table` is `[2L-1, d_h]` with `m_0` at row `L-1`.
pub fn build_relpos_matrix(i: usize, n: usize, table: &Tensor) -> Result<Tensor> {
    let rows = table.shape()[0];
    let max_len = rows.div_ceil(2);
    if n > max_len {
        return Err(Error::dim(format!("sequence length {n} exceeds maximum {max_len}")));
    }
    if i == 0 || i > n {
        return Err(Error::dim(format!("query position {i} outside 1..={n}")));
    }
    let dh = table.cols();
    let center = max_len - 1;
    let mut out = vec![0.0; dh * n];
    for j in 1..=n {
        let m = table.row(center + j - i);
        for (c, &v) in m.iter().enumerate() {
            out[c * n + (j - 1)] = v;
        }
    }
    Tensor::new(&[dh, n], out)
}

/// One attention head over `e[B, n, D]`.
pub fn attention_head(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    prefix: &str,
    e: Var,
    mask: &[bool],
    mode: ForwardMode,
    rng: &mut RngState,
) -> Result<HeadTrace> {
    let wq = tape.param(&format!("{prefix}.wq"))?;
    let wk = tape.param(&format!("{prefix}.wk"))?;
    let wv = tape.param(&format!("{prefix}.wv"))?;
    let q = tape.matmul(e, wq)?;
    let k = tape.matmul(e, wk)?;
    let v = tape.matmul(e, wv)?;
    let z_pair = tape.bmm(q, k, false, true)?;
    let (r, z_relpos, mut scores) = if cfg.position_mode == PositionMode::Relative {
        let wr = tape.param(&format!("{prefix}.wr"))?;
        let table = tape.param(&format!("{prefix}.rel"))?;
        let r = tape.matmul(e, wr)?;
        let zr = tape.rel_scores(r, table)?;
        let s = tape.add(z_pair, zr)?;
        (Some(r), Some(zr), s)
    } else {
        (None, None, z_pair)
    };
    if cfg.scale_scores {
        let dh = tape.shape(q)[2] as f64;
        scores = tape.scale(scores, 1.0 / dh.sqrt());
    }
    let weights = tape.softmax(scores, Some(mask))?;
    let dropped = tape.dropout(weights, cfg.attn_dropout, mode.dropout(), rng)?;
    let out = tape.bmm(dropped, v, false, false)?;
    Ok(HeadTrace { q, k, v, r, z_pair, z_relpos, weights, out })
}

/// All heads of layer `layer`, concatenated and projected back to `D`.
pub fn multi_head(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    layer: usize,
    e: Var,
    mask: &[bool],
    mode: ForwardMode,
    rng: &mut RngState,
) -> Result<(Var, Vec<HeadTrace>)> {
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        heads.push(attention_head(tape, cfg, &format!("enc.{layer}.head.{h}"), e, mask, mode, rng)?);
    }
    let outs: Vec<Var> = heads.iter().map(|h| h.out).collect();
    let cat = tape.concat(&outs)?;
    let wo = tape.param(&format!("enc.{layer}.attn.wo"))?;
    let bo = tape.param(&format!("enc.{layer}.attn.bo"))?;
    let proj = tape.matmul(cat, wo)?;
    Ok((tape.add_bias(proj, bo)?, heads))
}

fn feed_forward(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    layer: usize,
    x: Var,
    mode: ForwardMode,
    rng: &mut RngState,
) -> Result<Var> {
    let p = format!("enc.{layer}.ff");
    let w1 = tape.param(&format!("{p}.w1"))?;
    let b1 = tape.param(&format!("{p}.b1"))?;
    let w2 = tape.param(&format!("{p}.w2"))?;
    let b2 = tape.param(&format!("{p}.b2"))?;
    let a = tape.matmul(x, w1)?;
    let a = tape.add_bias(a, b1)?;
    let a = match cfg.activation {
        Activation::Relu => tape.relu(a),
        Activation::Rrelu => tape.rrelu(a, cfg.rrelu_lower, cfg.rrelu_upper, mode.sample_activation(), rng)?,
    };
    let o = tape.matmul(a, w2)?;
    tape.add_bias(o, b2)
}

fn normalize(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    prefix: &str,
    x: Var,
    mask: &[bool],
    mode: ForwardMode,
    stats: &mut Vec<(String, BatchStats)>,
) -> Result<Var> {
    let gamma = tape.param(&format!("{prefix}.gamma"))?;
    let beta = tape.param(&format!("{prefix}.beta"))?;
    match cfg.norm {
        NormKind::Layer => {
            let y = tape.layer_norm(x, gamma, beta, cfg.norm_eps)?;
            tape.mask_rows(y, mask)
        }
        NormKind::Batch => {
            let params = tape.params();
            let running = if mode.batch_statistics() {
                None
            } else {
                Some((
                    params.get(&format!("{prefix}.running_mean"))?.data(),
                    params.get(&format!("{prefix}.running_var"))?.data(),
                ))
            };
            let (y, s) = tape.batch_norm(x, gamma, beta, mask, running, cfg.norm_eps)?;
            if let Some(s) = s {
                stats.push((prefix.to_string(), s));
            }
            Ok(y)
        }
    }
}

/// One encoder layer over `e[B, n, D]`.
#[allow(clippy::too_many_arguments)]
pub fn encoder_layer(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    layer: usize,
    e: Var,
    mask: &[bool],
    mode: ForwardMode,
    rng: &mut RngState,
    stats: &mut Vec<(String, BatchStats)>,
) -> Result<LayerTrace> {
    let (attn, heads) = multi_head(tape, cfg, layer, e, mask, mode, rng)?;
    let attn = tape.dropout(attn, cfg.block_dropout, mode.dropout(), rng)?;
    let h = match cfg.residual {
        ResidualKind::SingleSpan => {
            let ff = feed_forward(tape, cfg, layer, attn, mode, rng)?;
            let ff = tape.dropout(ff, cfg.block_dropout, mode.dropout(), rng)?;
            let sum = tape.add(e, ff)?;
            normalize(tape, cfg, &format!("enc.{layer}.norm_out"), sum, mask, mode, stats)?
        }
        ResidualKind::OriginalTwo => {
            let sum = tape.add(e, attn)?;
            let x = normalize(tape, cfg, &format!("enc.{layer}.norm_attn"), sum, mask, mode, stats)?;
            let ff = feed_forward(tape, cfg, layer, x, mode, rng)?;
            let ff = tape.dropout(ff, cfg.block_dropout, mode.dropout(), rng)?;
            let sum = tape.add(x, ff)?;
            normalize(tape, cfg, &format!("enc.{layer}.norm_out"), sum, mask, mode, stats)?
        }
    };
    Ok(LayerTrace { heads, h })
}

/// Full encoder stack. Absolute sinusoids are added to `e` first when
/// configured.
pub fn encode(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    e: Var,
    mask: &[bool],
    mode: ForwardMode,
    rng: &mut RngState,
) -> Result<EncoderOutput> {
    let s = tape.shape(e).to_vec();
    if s.len() != 3 || mask.len() != s[0] * s[1] {
        return Err(Error::dim(format!("encoder expects e [B,n,D] with matching mask, got {s:?}")));
    }
    if s[1] > cfg.max_len {
        return Err(Error::dim(format!("sequence length {} exceeds maximum {}", s[1], cfg.max_len)));
    }
    let mut x = e;
    if cfg.position_mode == PositionMode::AbsoluteSinusoidal {
        let pe = sinusoidal_encoding(s[1], s[2])?;
        let tiled: Vec<f64> = (0..s[0]).flat_map(|_| pe.data().iter().copied()).collect();
        let pe = tape.constant(Tensor::new(&s, tiled)?);
        let sum = tape.add(x, pe)?;
        x = tape.mask_rows(sum, mask)?;
    }
    let mut layers = Vec::with_capacity(cfg.num_layers);
    let mut stats = Vec::new();
    for l in 0..cfg.num_layers {
        let trace = encoder_layer(tape, cfg, l, x, mask, mode, rng, &mut stats)?;
        x = trace.h;
        layers.push(trace);
    }
    Ok(EncoderOutput { h: x, layers, stats })
}
