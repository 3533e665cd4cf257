//! Position-aware attention over encoder outputs: subject/object relative
//! offsets, distance binning, and the attention-weighted sentence vector.

use serde::{Deserialize, Serialize};

use crate::data::{Batch, Span};
use crate::error::{Error, Result};
use crate::model::{Init, ParamSpec};
use crate::tensor::{Tape, Var};

/// Signed offset of every token to the nearest token of `span`: zero inside
/// the span, negative to its left, positive to its right.
pub fn relative_position_vector(span: Span, n: usize) -> Result<Vec<i64>> {
    if span.start > span.end || span.end >= n {
        return Err(Error::Data(format!(
            "span ({}, {}) outside sentence of length {n}",
            span.start, span.end
        )));
    }
    Ok((0..n)
        .map(|i| {
            if i < span.start {
                i as i64 - span.start as i64
            } else if i > span.end {
                (i - span.end) as i64
            } else {
                0
            }
        })
        .collect())
}

/// Distance bins whose widths grow with distance. `widths[k]` is the width
/// of bin `k + 1`; past the end of the list each bin is one wider than the
/// previous one. Bin indices are clamped to `max_bin`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinConfig {
    pub widths: Vec<usize>,
    pub max_bin: usize,
}

impl Default for BinConfig {
    fn default() -> Self {
        Self::for_length(100)
    }
}

impl BinConfig {
    /// Default widths with `max_bin` large enough for any offset in a
    /// sentence of `max_len` tokens.
    pub fn for_length(max_len: usize) -> Self {
        Self::with_widths(vec![1, 1, 2, 3, 4], max_len)
    }

    /// Custom widths with `max_bin` covering `max_len`. Invalid widths give
    /// a config that fails [`BinConfig::validate`].
    pub fn with_widths(widths: Vec<usize>, max_len: usize) -> Self {
        let mut cfg = Self { widths, max_bin: 0 };
        if cfg.validate_widths().is_ok() {
            cfg.max_bin = usize::MAX;
            cfg.max_bin = (cfg.bin(max_len.saturating_sub(1) as i64).unsigned_abs() as usize).max(1);
        }
        cfg
    }

    fn validate_widths(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("bin widths must be nonempty and positive".into()));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_widths()?;
        if self.max_bin == 0 {
            return Err(Error::Config("max_bin must be positive".into()));
        }
        Ok(())
    }

    fn width(&self, k: usize) -> usize {
        match self.widths.get(k) {
            Some(&w) => w,
            None => self.widths.last().unwrap() + (k + 1 - self.widths.len()),
        }
    }

    /// `sign(d) * bin(|d|)`, with bin(0) = 0.
    pub fn bin(&self, d: i64) -> i64 {
        let dist = d.unsigned_abs() as usize;
        let mut k = 0;
        let mut upper = 0;
        while upper < dist && k < self.max_bin {
            upper += self.width(k);
            k += 1;
        }
        d.signum() * k as i64
    }

    /// Rows of a position embedding table indexed by [`BinConfig::row`]:
    /// padding, then bins `-max_bin..=max_bin`.
    pub fn table_rows(&self) -> usize {
        2 * self.max_bin + 2
    }

    /// Table row for a binned offset; row 0 is reserved for padding.
    pub fn row(&self, bin: i64) -> usize {
        let m = self.max_bin as i64;
        (bin.clamp(-m, m) + m + 1) as usize
    }
}

pub fn bin_positions(p: &[i64], cfg: &BinConfig) -> Vec<i64> {
    p.iter().map(|&d| cfg.bin(d)).collect()
}

/// Embedding-table row ids of binned offsets to each instance's span
/// selected by `span_of`, padded with 0 to `batch.max_len`.
pub fn position_ids(batch: &Batch, bins: &BinConfig, span_of: impl Fn(usize) -> Span) -> Result<Vec<usize>> {
    let n = batch.max_len;
    let mut ids = vec![0; batch.size * n];
    for b in 0..batch.size {
        let len = batch.lengths[b];
        let offsets = relative_position_vector(span_of(b), len)?;
        for (i, d) in offsets.into_iter().enumerate() {
            ids[b * n + i] = bins.row(bins.bin(d));
        }
    }
    Ok(ids)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosAttnConfig {
    /// Width of the shared position embedding `P`.
    pub pos_dim: usize,
    /// Hidden width of the scoring MLP.
    pub attn_dim: usize,
    pub bins: BinConfig,
}

impl Default for PosAttnConfig {
    fn default() -> Self {
        Self {
            pos_dim: 30,
            attn_dim: 180,
            bins: BinConfig::default(),
        }
    }
}

impl PosAttnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pos_dim == 0 || self.attn_dim == 0 {
            return Err(Error::Config("posattn widths must be positive".into()));
        }
        self.bins.validate()
    }

    pub fn param_specs(&self, d_model: usize) -> Vec<ParamSpec> {
        let (dp, da) = (self.pos_dim, self.attn_dim);
        vec![
            ParamSpec::new("pa.P", &[self.bins.table_rows(), dp], Init::Embedding),
            ParamSpec::weight("pa.wh", d_model, da),
            ParamSpec::weight("pa.wq", d_model, da),
            ParamSpec::weight("pa.ws", dp, da),
            ParamSpec::weight("pa.wo", dp, da),
            ParamSpec::weight("pa.v", da, 1),
        ]
    }
}

/// Intermediate values of one position-aware attention pass.
#[derive(Clone, Copy, Debug)]
pub struct PosAttnTrace {
    /// Unnormalized scores `[B, 1, n]`.
    pub u: Var,
    /// Attention weights `[B, 1, n]`.
    pub a: Var,
    /// Sentence representation `[B, D]`.
    pub z: Var,
}

/// `u_i = vᵀ tanh(W_h h_i + W_q q + W_s p^s_i + W_o p^o_i)`, `a = softmax(u)`
/// over valid positions, `z = Σ a_i h_i`. `h` is `[B, n, D]`, `q` is
/// `[B, D]`, and `subj_ids` / `obj_ids` are rows of `pa.P`.
pub fn position_aware_attention(
    tape: &mut Tape,
    h: Var,
    q: Var,
    subj_ids: &[usize],
    obj_ids: &[usize],
    mask: &[bool],
) -> Result<PosAttnTrace> {
    let s = tape.shape(h).to_vec();
    if s.len() != 3 {
        return Err(Error::dim(format!("posattn expects h [B,n,D], got {s:?}")));
    }
    let (batch, n, d) = (s[0], s[1], s[2]);
    let table = tape.param("pa.P")?;
    let wh = tape.param("pa.wh")?;
    let wq = tape.param("pa.wq")?;
    let ws = tape.param("pa.ws")?;
    let wo = tape.param("pa.wo")?;
    let v = tape.param("pa.v")?;

    let hw = tape.matmul(h, wh)?;
    let qw = tape.matmul(q, wq)?;
    let ps = tape.embedding(table, subj_ids, &[batch, n])?;
    let po = tape.embedding(table, obj_ids, &[batch, n])?;
    let psw = tape.matmul(ps, ws)?;
    let pow = tape.matmul(po, wo)?;
    let mut pre = tape.add(hw, psw)?;
    pre = tape.add(pre, pow)?;
    pre = tape.add_broadcast(pre, qw)?;
    let act = tape.tanh(pre);
    let u = tape.matmul(act, v)?;
    let u = tape.reshape(u, &[batch, 1, n])?;
    let a = tape.softmax(u, Some(mask))?;
    let z = tape.bmm(a, h, false, false)?;
    let z = tape.reshape(z, &[batch, d])?;
    Ok(PosAttnTrace { u, a, z })
}
